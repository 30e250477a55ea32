//! Forward noising, the training objective, the optimizer, and the sampler.
//!
//! Training minimizes `L = L_DF + γ·L_flow`: the noise-prediction loss
//! `E‖ε − ε_θ(x_t, t, c)‖²` plus, in the final stage, the γ-weighted flow
//! regression loss. One decoupled-weight-decay adaptive-moment update is
//! applied per batch. Every random draw (timestep, noise, condition dropout,
//! batch indices) comes from the single serialized stream in [`TrainState`],
//! which is what makes checkpoint resume bitwise exact.
//!
//! Sampling is the deterministic (η = 0) reverse update over a strided
//! timestep grid, starting from pure noise. With ε-prediction on a
//! zero-terminal-SNR schedule the terminal step t = N is excluded from both
//! the training draw and the sampler grid (ε is unidentifiable there); the
//! `diffusion.param = v` alternative has no such exclusion.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::config::RunConfig;
use crate::denoiser::{
    bind_params, encode_conditions, forward, ArchDescriptor, ForwardOpts, ParamSet,
};
use crate::error::{Error, Result};
use crate::predictnet;
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::scenegen::VideoSample;
use crate::schedule::NoiseSchedule;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Optimizer and loss hyperparameters for one training run.
#[derive(Debug, Clone)]
pub struct TrainHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub gamma: f64,
    pub cond_drop_prob: f64,
    pub epsilon_param: bool,
    pub check_finite: bool,
    /// Diagnostic hook: pin every sample to one timestep.
    pub fixed_t: Option<usize>,
    /// Architecture toggles for ablation variants.
    pub forward_opts: ForwardOpts,
}

impl TrainHyper {
    pub fn from_config(cfg: &RunConfig) -> Self {
        TrainHyper {
            lr: cfg.lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: cfg.weight_decay,
            gamma: cfg.gamma,
            cond_drop_prob: cfg.cond_drop_prob,
            epsilon_param: cfg.epsilon_param,
            check_finite: cfg.check_finite,
            fixed_t: None,
            forward_opts: ForwardOpts::default(),
        }
    }
}

/// Optimizer moments, RNG, and counters; everything a resume needs.
#[derive(Debug, Clone)]
pub struct TrainState<E> {
    /// Global optimizer step count (bias correction uses step+1).
    pub step: u64,
    /// Current stage index.
    pub stage: usize,
    /// Steps completed within the current stage.
    pub step_in_stage: u64,
    pub rng: Rng,
    pub moment1: ParamSet<E>,
    pub moment2: ParamSet<E>,
}

impl<E: Scalar> TrainState<E> {
    pub fn new(seed: u64) -> Self {
        TrainState {
            step: 0,
            stage: 0,
            step_in_stage: 0,
            rng: Rng::new(seed),
            moment1: ParamSet::new(),
            moment2: ParamSet::new(),
        }
    }
}

/// `x_t = √ᾱ_t·x₀ + √(1−ᾱ_t)·ε`.
pub fn add_noise<E: Scalar>(
    x0: &Tensor<E>,
    t: usize,
    eps: &Tensor<E>,
    sched: &NoiseSchedule,
) -> Result<Tensor<E>> {
    if x0.shape() != eps.shape() {
        return Err(Error::ShapeMismatch {
            op: "add_noise",
            lhs: x0.shape().to_vec(),
            rhs: eps.shape().to_vec(),
        });
    }
    let (sa, sb) = sched.noising_coeffs(t)?;
    let (sa, sb) = (E::from_f64(sa), E::from_f64(sb));
    let data = x0
        .data()
        .iter()
        .zip(eps.data().iter())
        .map(|(&x, &e)| sa * x + sb * e)
        .collect();
    Tensor::new(x0.shape().to_vec(), data)
}

/// v-prediction target: `v = √ᾱ_t·ε − √(1−ᾱ_t)·x₀`.
pub fn v_target<E: Scalar>(
    x0: &Tensor<E>,
    t: usize,
    eps: &Tensor<E>,
    sched: &NoiseSchedule,
) -> Result<Tensor<E>> {
    let (sa, sb) = sched.noising_coeffs(t)?;
    let (sa, sb) = (E::from_f64(sa), E::from_f64(sb));
    let data = x0
        .data()
        .iter()
        .zip(eps.data().iter())
        .map(|(&x, &e)| sa * e - sb * x)
        .collect();
    Tensor::new(x0.shape().to_vec(), data)
}

/// `L_DF + γ·L_flow`; with γ = 0 or no flow loss the total IS `loss_df`.
pub fn combine_losses<E: Scalar>(
    tape: &mut Tape<E>,
    loss_df: Var,
    loss_flow: Option<Var>,
    gamma: f64,
) -> Result<Var> {
    match loss_flow {
        Some(flow) if gamma != 0.0 => {
            let weighted = tape.scale(flow, gamma)?;
            tape.add(loss_df, weighted)
        }
        _ => Ok(loss_df),
    }
}

/// Timesteps the training sampler may draw: 1..=N, except that t = N is
/// excluded under ε-prediction on a zero-terminal schedule.
pub fn max_trainable_t(sched: &NoiseSchedule, epsilon_param: bool) -> usize {
    if epsilon_param && sched.zero_terminal() {
        sched.len() - 1
    } else {
        sched.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub loss_df: f64,
    pub loss_flow: Option<f64>,
    pub loss_total: f64,
    pub grad_norm: f64,
}

/// One optimization step over a batch: per-sample graphs, accumulated
/// gradients, a single AdamW update. RNG draws happen in sample-index order.
pub fn train_step<E: Scalar>(
    params: &mut ParamSet<E>,
    state: &mut TrainState<E>,
    desc: &ArchDescriptor,
    sched: &NoiseSchedule,
    batch: &[&VideoSample],
    use_predictnet: bool,
    hyper: &TrainHyper,
) -> Result<StepOutcome> {
    if batch.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    if use_predictnet && !params.has_prefix(predictnet::PREFIX) {
        return Err(Error::Contract(
            "stage enables PredictNet but parameters are missing".into(),
        ));
    }
    let t_max = max_trainable_t(sched, hyper.epsilon_param);

    let mut grad_acc: BTreeMap<String, Tensor<E>> = BTreeMap::new();
    let mut df_sum = 0.0f64;
    let mut flow_sum = 0.0f64;
    let mut total_sum = 0.0f64;
    let mut t_drawn: Vec<usize> = Vec::with_capacity(batch.len());

    for sample in batch {
        // serialized draws, in sample order
        let t = match hyper.fixed_t {
            Some(t) => t,
            None => 1 + state.rng.next_below(t_max),
        };
        t_drawn.push(t);
        let x0 = sample.frames.cast::<E>();
        let eps = Tensor::<E>::randn(&mut state.rng, x0.shape());
        let drop_cond = state.rng.next_bool(hyper.cond_drop_prob);

        let x_t = add_noise(&x0, t, &eps, sched)?;
        let target = if hyper.epsilon_param {
            eps
        } else {
            v_target(&x0, t, &eps, sched)?
        };

        let mut tape = Tape::<E>::new();
        tape.set_check_finite(hyper.check_finite);
        let bound = bind_params(&mut tape, params, true);

        let fhw: usize = x0.shape()[1..].iter().product();
        let y = tape.input(
            Tensor::new(
                x0.shape()[1..].to_vec(),
                x0.data()[..fhw].to_vec(),
            )?,
        );
        let x_t_var = tape.input(x_t);
        let target_var = tape.input(target);
        let embs = encode_conditions(
            &mut tape,
            &bound,
            desc,
            &sample.spatial_tokens,
            &sample.motion_tokens,
            y,
            drop_cond,
            hyper.forward_opts,
        )?;
        let trace = forward(
            &mut tape,
            &bound,
            desc,
            x_t_var,
            t,
            &embs,
            hyper.forward_opts,
        )?;
        let loss_df = tape.mse(trace.eps_hat, target_var)?;

        let loss_flow = if use_predictnet {
            let flow_target = tape.input(sample.flow.cast::<E>());
            let flow_hat = predictnet::predict_flow(
                &mut tape,
                &bound,
                desc,
                &trace,
                &embs,
                hyper.forward_opts,
            )?;
            Some(predictnet::flow_loss(&mut tape, flow_hat, flow_target)?)
        } else {
            None
        };
        let total = combine_losses(&mut tape, loss_df, loss_flow, hyper.gamma)?;

        df_sum += tape.value(loss_df).item().to_f64();
        if let Some(flow) = loss_flow {
            flow_sum += tape.value(flow).item().to_f64();
        }
        total_sum += tape.value(total).item().to_f64();

        tape.backward(total)?;
        for name in bound.names() {
            let var = bound.get(name)?;
            if let Some(g) = tape.grad(var) {
                match grad_acc.get_mut(name) {
                    Some(acc) => {
                        for (a, &gv) in acc.data_mut().iter_mut().zip(g.data().iter()) {
                            *a += gv;
                        }
                    }
                    None => {
                        grad_acc.insert(name.clone(), g.clone());
                    }
                }
            }
        }
    }

    let inv_b = E::from_f64(1.0 / batch.len() as f64);
    let mut grad_sq = 0.0f64;
    for g in grad_acc.values_mut() {
        for v in g.data_mut().iter_mut() {
            *v = *v * inv_b;
        }
        let n = g.norm_l2();
        grad_sq += n * n;
    }
    let grad_norm = libm::sqrt(grad_sq);

    let b = batch.len() as f64;
    let outcome = StepOutcome {
        loss_df: df_sum / b,
        loss_flow: use_predictnet.then_some(flow_sum / b),
        loss_total: total_sum / b,
        grad_norm,
    };
    if !outcome.loss_total.is_finite() || !grad_norm.is_finite() {
        return Err(Error::TrainAbort(format!(
            "non-finite loss at step {}: t={t_drawn:?} loss_df={} loss_flow={:?} grad_norm={grad_norm}",
            state.step, outcome.loss_df, outcome.loss_flow
        )));
    }

    adamw_update(params, &grad_acc, state, hyper)?;
    state.step += 1;
    state.step_in_stage += 1;
    Ok(outcome)
}

/// Decoupled-weight-decay adaptive-moment update.
fn adamw_update<E: Scalar>(
    params: &mut ParamSet<E>,
    grads: &BTreeMap<String, Tensor<E>>,
    state: &mut TrainState<E>,
    hyper: &TrainHyper,
) -> Result<()> {
    let t = (state.step + 1) as f64;
    let b1 = E::from_f64(hyper.beta1);
    let b2 = E::from_f64(hyper.beta2);
    let one_m_b1 = E::from_f64(1.0 - hyper.beta1);
    let one_m_b2 = E::from_f64(1.0 - hyper.beta2);
    let corr1 = E::from_f64(1.0 / (1.0 - libm::pow(hyper.beta1, t)));
    let corr2 = E::from_f64(1.0 / (1.0 - libm::pow(hyper.beta2, t)));
    let lr = E::from_f64(hyper.lr);
    let eps = E::from_f64(hyper.eps);
    let wd = E::from_f64(hyper.lr * hyper.weight_decay);

    for (name, g) in grads {
        if !state.moment1.contains(name) {
            state.moment1.insert(name, Tensor::zeros(g.shape()));
            state.moment2.insert(name, Tensor::zeros(g.shape()));
        }
        let m = state.moment1.get_mut(name)?;
        for (mv, &gv) in m.data_mut().iter_mut().zip(g.data().iter()) {
            *mv = b1 * *mv + one_m_b1 * gv;
        }
        let v = state.moment2.get_mut(name)?;
        for (vv, &gv) in v.data_mut().iter_mut().zip(g.data().iter()) {
            *vv = b2 * *vv + one_m_b2 * gv * gv;
        }
        let m = state.moment1.get(name)?;
        let v = state.moment2.get(name)?;
        let p = params.get_mut(name)?;
        for ((pv, &mv), &vv) in p
            .data_mut()
            .iter_mut()
            .zip(m.data().iter())
            .zip(v.data().iter())
        {
            let mhat = mv * corr1;
            let vhat = vv * corr2;
            *pv = *pv - lr * (mhat / (vhat.sqrt() + eps)) - wd * *pv;
        }
    }
    Ok(())
}

// ---- sampling -------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct SampleOpts {
    pub steps: usize,
    pub guidance: f64,
    pub seed: u64,
    /// Ablation override: run the reverse loop on an unrescaled schedule
    /// despite the train/test residual-signal defect.
    pub allow_unrescaled: bool,
    pub forward_opts: ForwardOpts,
    pub epsilon_param: bool,
}

impl Default for SampleOpts {
    fn default() -> Self {
        SampleOpts {
            steps: 20,
            guidance: 1.0,
            seed: 0,
            allow_unrescaled: false,
            forward_opts: ForwardOpts::default(),
            epsilon_param: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SampleOutcome {
    /// Generated video [T,3,H,W].
    pub video: Tensor<f32>,
    /// Number of denoiser evaluations performed.
    pub model_evals: usize,
}

/// Descending strided timestep grid from `t_max` down to 1.
pub fn sample_grid(t_max: usize, steps: usize) -> Vec<usize> {
    if steps <= 1 || t_max <= 1 {
        return alloc::vec![t_max];
    }
    let mut grid = Vec::with_capacity(steps);
    for i in 0..steps {
        let t = t_max as f64 - (t_max - 1) as f64 * i as f64 / (steps - 1) as f64;
        let t = libm::round(t) as usize;
        if grid.last() != Some(&t) {
            grid.push(t);
        }
    }
    grid
}

/// Deterministic reverse loop: from pure noise at t = N down to t = 1,
/// reconstructing `x̂₀ = (x_t − √(1−ᾱ_t)·ε̂)/max(√ᾱ_t, 1e-4)` and advancing
/// with the η = 0 update. `guidance > 1` blends conditional and
/// null-conditioned predictions; the first frame `y` is never dropped.
pub fn sample(
    params: &ParamSet<f32>,
    desc: &ArchDescriptor,
    sched: &NoiseSchedule,
    first_frame: &Tensor<f32>,
    spatial_tokens: &[u32],
    motion_tokens: &[u32],
    frames: usize,
    opts: &SampleOpts,
) -> Result<SampleOutcome> {
    if !sched.is_rescaled() && !opts.allow_unrescaled {
        return Err(Error::Contract(
            "refusing to sample from an unrescaled schedule (nonzero terminal SNR); \
             rescale it or set the explicit override"
                .into(),
        ));
    }
    let fs = first_frame.shape();
    if fs.len() != 3 || fs[0] != desc.channels {
        return Err(Error::ShapeMismatch {
            op: "sample first_frame",
            lhs: fs.to_vec(),
            rhs: alloc::vec![desc.channels, 0, 0],
        });
    }
    let (h, w) = (fs[1], fs[2]);
    let t_start = max_trainable_t(sched, opts.epsilon_param);
    let grid = sample_grid(t_start, opts.steps);

    let mut rng = Rng::new(opts.seed);
    let mut x = Tensor::<f32>::randn(&mut rng, &[frames, desc.channels, h, w]);
    let mut model_evals = 0usize;

    let eval = |x: &Tensor<f32>, t: usize, null_cond: bool| -> Result<Tensor<f32>> {
        let mut tape = Tape::<f32>::new();
        tape.set_check_finite(false);
        let bound = bind_params(&mut tape, params, false);
        let y = tape.input(first_frame.clone());
        let x_var = tape.input(x.clone());
        let embs = encode_conditions(
            &mut tape,
            &bound,
            desc,
            spatial_tokens,
            motion_tokens,
            y,
            null_cond,
            opts.forward_opts,
        )?;
        let trace = forward(&mut tape, &bound, desc, x_var, t, &embs, opts.forward_opts)?;
        Ok(tape.value(trace.eps_hat).clone())
    };

    for (i, &t) in grid.iter().enumerate() {
        let mut pred = eval(&x, t, false)?;
        model_evals += 1;
        if opts.guidance > 1.0 {
            let uncond = eval(&x, t, true)?;
            model_evals += 1;
            let g = opts.guidance as f32;
            for (p, &u) in pred.data_mut().iter_mut().zip(uncond.data().iter()) {
                *p = u + g * (*p - u);
            }
        }

        let (sa, sb) = sched.noising_coeffs(t)?;
        let (sa, sb) = (sa as f32, sb as f32);
        let denom = sa.max(1e-4);
        // reconstruct x̂₀ and the effective ε̂ under either parameterization
        let mut x0_hat = Tensor::<f32>::zeros(x.shape());
        let mut eps_hat = Tensor::<f32>::zeros(x.shape());
        for ((x0v, ev), (&xv, &pv)) in x0_hat
            .data_mut()
            .iter_mut()
            .zip(eps_hat.data_mut().iter_mut())
            .zip(x.data().iter().zip(pred.data().iter()))
        {
            if opts.epsilon_param {
                *x0v = (xv - sb * pv) / denom;
                *ev = pv;
            } else {
                *x0v = sa * xv - sb * pv;
                *ev = sa * pv + sb * xv;
            }
        }

        match grid.get(i + 1) {
            Some(&t_next) => {
                let (na, nb) = sched.noising_coeffs(t_next)?;
                let (na, nb) = (na as f32, nb as f32);
                for ((xv, &x0v), &ev) in x
                    .data_mut()
                    .iter_mut()
                    .zip(x0_hat.data().iter())
                    .zip(eps_hat.data().iter())
                {
                    *xv = na * x0v + nb * ev;
                }
            }
            None => x = x0_hat,
        }
    }

    Ok(SampleOutcome {
        video: x,
        model_evals,
    })
}
