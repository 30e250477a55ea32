//! Acceptance suite: one test per criterion, each printing a PASS line
//! (visible with `--nocapture`). Criterion 8 trains the full toy stage plan
//! from scratch and is the long pole; everything else is seconds.

use std::fs;
use std::path::PathBuf;

use ti2v::{dataset, sampling, trainer};
use ti2v_core::config::RunConfig;
use ti2v_core::denoiser::{
    adapter_cross_attention, bind_params, cross_attention, encode_conditions, forward,
    init_params, AdapterParams, ArchDescriptor, CrossAttnParams, ForwardOpts, ParamSet,
};
use ti2v_core::diffusion::{train_step, TrainHyper, TrainState};
use ti2v_core::metrics::{self, AblationVariant};
use ti2v_core::predictnet;
use ti2v_core::rng::{hash64, Rng};
use ti2v_core::schedule::{shift_factor, BaseFamily, NoiseSchedule, RescaleForm};
use ti2v_core::{Tape, Tensor};

fn tmp(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("ti2v_acc_{name}_{}", std::process::id()));
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

fn tiny_desc() -> ArchDescriptor {
    ArchDescriptor {
        channels: 3,
        width0: 8,
        width1: 16,
        emb_dim: 8,
        time_dim: 8,
        groups: 4,
        vocab: ti2v_core::vocab::size(),
            max_frames: 16,
        lambda: 1.0,
    }
}

#[test]
fn acceptance_01_shift_factor_is_exactly_one_eighth() {
    let s = shift_factor(16, 512, 512, 256).unwrap();
    assert_eq!(s, 0.125, "shift factor must be exactly 0.125");
    println!("ACCEPTANCE 1 PASS: shift_factor(16,512,512,256) = {s} exactly");
}

#[test]
fn acceptance_02_zero_terminal_snr_after_rescale() {
    for family in [BaseFamily::LinearBeta, BaseFamily::ScaledLinearBeta] {
        let (lo, hi) = match family {
            BaseFamily::LinearBeta => (1e-4, 0.02),
            BaseFamily::ScaledLinearBeta => (0.00085, 0.012),
        };
        for n in [100usize, 1000] {
            let r = NoiseSchedule::make_base(n, family, lo, hi)
                .unwrap()
                .apply_rescale(RescaleForm::AlphaBar)
                .unwrap();
            let last = r.alpha_bar(n).unwrap();
            let first = r.alpha_bar(1).unwrap();
            assert!(last <= 1e-12, "{family:?} N={n}: terminal {last}");
            assert!(first >= 1.0 - 1e-12, "{family:?} N={n}: first {first}");
            // shifted variant rescales to the same endpoints
            let rs = NoiseSchedule::make_base(n, family, lo, hi)
                .unwrap()
                .apply_shift(0.125)
                .unwrap()
                .apply_rescale(RescaleForm::AlphaBar)
                .unwrap();
            assert!(rs.alpha_bar(n).unwrap() <= 1e-12);
            assert!(rs.alpha_bar(1).unwrap() >= 1.0 - 1e-12);
        }
    }
    println!("ACCEPTANCE 2 PASS: terminal alpha_bar <= 1e-12 and alpha_bar_1 >= 1-1e-12 for both families at N in {{100,1000}}");
}

#[test]
fn acceptance_03_constant_log_snr_offset() {
    let base =
        NoiseSchedule::make_base(1000, BaseFamily::ScaledLinearBeta, 0.00085, 0.012).unwrap();
    let s = 0.125f64;
    let shifted = base.apply_shift(s).unwrap();
    let want = 2.0 * s.ln();
    let mut worst = 0.0f64;
    for t in 1..=1000 {
        let (a, b) = (base.log_snr(t).unwrap(), shifted.log_snr(t).unwrap());
        if a.is_finite() && b.is_finite() {
            worst = worst.max((b - a - want).abs());
        }
    }
    assert!(worst < 1e-9, "worst offset deviation {worst}");
    println!("ACCEPTANCE 3 PASS: |ln SNR'(t) - ln SNR(t) - 2 ln s| < 1e-9 for all finite t (worst {worst:.2e})");
}

#[test]
fn acceptance_04_adapter_lambda_zero_reduces_bitwise() {
    for seed in 0..50u64 {
        let mut rng = Rng::new(40_000 + seed);
        let mut tape = Tape::<f32>::new();
        let n = 1 + rng.next_below(8);
        let l = 1 + rng.next_below(5);
        let d = 4 * (1 + rng.next_below(3));
        let de = 2 + rng.next_below(6);
        let x = tape.input(Tensor::randn(&mut rng, &[n, d]));
        let txt = tape.input(Tensor::randn(&mut rng, &[l, de]));
        let img = tape.input(Tensor::randn(&mut rng, &[1, de]));
        let base = CrossAttnParams {
            wq: tape.param(Tensor::randn(&mut rng, &[d, d])),
            wk: tape.param(Tensor::randn(&mut rng, &[de, d])),
            wv: tape.param(Tensor::randn(&mut rng, &[de, d])),
            wo: tape.param(Tensor::randn(&mut rng, &[d, d])),
            bo: tape.param(Tensor::randn(&mut rng, &[d])),
        };
        let p = AdapterParams {
            base,
            wk_adp: Some(tape.param(Tensor::randn(&mut rng, &[de, d]))),
            wv_adp: Some(tape.param(Tensor::randn(&mut rng, &[de, d]))),
        };
        let a = adapter_cross_attention(&mut tape, x, txt, img, 0.0, &p).unwrap();
        let b = cross_attention(&mut tape, x, txt, &base).unwrap();
        assert!(
            tape.value(a)
                .data()
                .iter()
                .zip(tape.value(b).data().iter())
                .all(|(x, y)| x.to_bits() == y.to_bits()),
            "instance {seed} not bitwise equal"
        );
    }
    println!("ACCEPTANCE 4 PASS: adapter CA with lambda=0 equals plain CA bitwise on 50 randomized instances");
}

#[test]
fn acceptance_05_gradient_integrity() {
    // (a) every differentiable op against central finite differences, f64
    let op_tol = |a: f64, n: f64| 1e-7 + 1e-4 * n.abs().max(a.abs());
    let mut checked_ops = 0usize;
    {
        use ti2v_core::Var;
        type Build = dyn Fn(&mut Tape<f64>, &[Var]) -> Var;
        let gradcheck = |name: &str, inputs: &[Tensor<f64>], build: &Build| {
            let mut tape = Tape::<f64>::new();
            let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
            let loss = build(&mut tape, &vars);
            tape.backward(loss).unwrap();
            let grads: Vec<Tensor<f64>> = vars
                .iter()
                .zip(inputs.iter())
                .map(|(&v, t)| tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
                .collect();
            let eval = |inputs: &[Tensor<f64>]| -> f64 {
                let mut tape = Tape::<f64>::new();
                let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
                let loss = build(&mut tape, &vars);
                tape.value(loss).item()
            };
            for (ii, input) in inputs.iter().enumerate() {
                for c in 0..input.numel() {
                    let mut plus = inputs.to_vec();
                    plus[ii].data_mut()[c] += 1e-5;
                    let mut minus = inputs.to_vec();
                    minus[ii].data_mut()[c] -= 1e-5;
                    let num = (eval(&plus) - eval(&minus)) / 2e-5;
                    let got = grads[ii].data()[c];
                    assert!(
                        (got - num).abs() <= op_tol(got, num),
                        "{name} input {ii} coord {c}: {got} vs {num}"
                    );
                }
            }
        };

        fn proj(tape: &mut Tape<f64>, out: Var, seed: u64) -> Var {
            let shape = tape.value(out).shape().to_vec();
            let r = tape.input(Tensor::randn(&mut Rng::new(seed), &shape));
            let m = tape.mul(out, r).unwrap();
            tape.sum_all(m).unwrap()
        }
        let mut rng = Rng::new(55);
        let a23 = Tensor::<f64>::randn(&mut rng, &[2, 3]);
        let b23 = Tensor::<f64>::randn(&mut rng, &[2, 3]);
        let row = Tensor::<f64>::randn(&mut rng, &[1, 3]);
        let m34 = Tensor::<f64>::randn(&mut rng, &[3, 4]);
        let m43 = Tensor::<f64>::randn(&mut rng, &[4, 3]);
        let bmm_a = Tensor::<f64>::randn(&mut rng, &[2, 3, 4]);
        let bmm_b = Tensor::<f64>::randn(&mut rng, &[2, 4, 2]);
        let nchw = Tensor::<f64>::randn(&mut rng, &[2, 4, 4, 4]);
        let gamma = Tensor::<f64>::randn(&mut rng, &[3]);
        let beta = Tensor::<f64>::randn(&mut rng, &[3]);
        let gamma4 = Tensor::<f64>::randn(&mut rng, &[4]);
        let beta4 = Tensor::<f64>::randn(&mut rng, &[4]);
        let conv_w = Tensor::<f64>::randn(&mut rng, &[3, 4, 3, 3]);
        let conv_b = Tensor::<f64>::randn(&mut rng, &[3]);
        let tconv_w = Tensor::<f64>::randn(&mut rng, &[3, 4, 2]);
        let table = Tensor::<f64>::randn(&mut rng, &[5, 3]);

        let cases: Vec<(&str, Vec<Tensor<f64>>, Box<Build>)> = vec![
            ("add", vec![a23.clone(), b23.clone()], Box::new(|t, v| { let o = t.add(v[0], v[1]).unwrap(); proj(t, o, 1) })),
            ("add_bcast", vec![a23.clone(), row.clone()], Box::new(|t, v| { let o = t.add(v[0], v[1]).unwrap(); proj(t, o, 2) })),
            ("sub", vec![a23.clone(), b23.clone()], Box::new(|t, v| { let o = t.sub(v[0], v[1]).unwrap(); proj(t, o, 3) })),
            ("mul", vec![a23.clone(), b23.clone()], Box::new(|t, v| { let o = t.mul(v[0], v[1]).unwrap(); proj(t, o, 4) })),
            ("scale", vec![a23.clone()], Box::new(|t, v| { let o = t.scale(v[0], -2.3).unwrap(); proj(t, o, 5) })),
            ("silu", vec![a23.clone()], Box::new(|t, v| { let o = t.silu(v[0]).unwrap(); proj(t, o, 6) })),
            ("matmul", vec![m34.clone(), m43.clone()], Box::new(|t, v| { let o = t.matmul(v[0], v[1]).unwrap(); proj(t, o, 7) })),
            ("bmm", vec![bmm_a.clone(), bmm_b.clone()], Box::new(|t, v| { let o = t.bmm(v[0], v[1]).unwrap(); proj(t, o, 8) })),
            ("transpose", vec![m34.clone()], Box::new(|t, v| { let o = t.transpose(v[0]).unwrap(); proj(t, o, 9) })),
            ("permute", vec![bmm_a.clone()], Box::new(|t, v| { let o = t.permute(v[0], &[2, 0, 1]).unwrap(); proj(t, o, 10) })),
            ("reshape", vec![m34.clone()], Box::new(|t, v| { let o = t.reshape(v[0], &[12]).unwrap(); proj(t, o, 11) })),
            ("softmax", vec![m34.clone()], Box::new(|t, v| { let o = t.softmax(v[0], 1).unwrap(); proj(t, o, 12) })),
            ("layer_norm", vec![a23.clone(), gamma.clone(), beta.clone()], Box::new(|t, v| { let o = t.layer_norm(v[0], v[1], v[2]).unwrap(); proj(t, o, 13) })),
            ("group_norm", vec![nchw.clone(), gamma4.clone(), beta4.clone()], Box::new(|t, v| { let o = t.group_norm(v[0], v[1], v[2], 2).unwrap(); proj(t, o, 14) })),
            ("conv2d", vec![nchw.clone(), conv_w.clone(), conv_b.clone()], Box::new(|t, v| { let o = t.conv2d(v[0], v[1], Some(v[2])).unwrap(); proj(t, o, 15) })),
            ("conv1d_temporal", vec![nchw.clone(), tconv_w.clone(), conv_b.clone()], Box::new(|t, v| { let o = t.conv1d_temporal(v[0], v[1], Some(v[2])).unwrap(); proj(t, o, 16) })),
            ("avg_pool2", vec![nchw.clone()], Box::new(|t, v| { let o = t.avg_pool2(v[0]).unwrap(); proj(t, o, 17) })),
            ("upsample2", vec![nchw.clone()], Box::new(|t, v| { let o = t.upsample2(v[0]).unwrap(); proj(t, o, 18) })),
            ("global_avg_pool", vec![nchw.clone()], Box::new(|t, v| { let o = t.global_avg_pool(v[0]).unwrap(); proj(t, o, 19) })),
            ("concat", vec![a23.clone(), b23.clone()], Box::new(|t, v| { let o = t.concat(&[v[0], v[1]], 1).unwrap(); proj(t, o, 20) })),
            ("repeat_outer", vec![a23.clone()], Box::new(|t, v| { let o = t.repeat_outer(v[0], 3).unwrap(); proj(t, o, 21) })),
            ("gather_rows", vec![table.clone()], Box::new(|t, v| { let o = t.gather_rows(v[0], &[0, 2, 4, 2]).unwrap(); proj(t, o, 22) })),
            ("add_chan", vec![nchw.clone(), gamma4.clone()], Box::new(|t, v| { let o = t.add_chan(v[0], v[1]).unwrap(); proj(t, o, 23) })),
            ("mean_axis", vec![bmm_a.clone()], Box::new(|t, v| { let o = t.mean(v[0], 1).unwrap(); proj(t, o, 24) })),
            ("mean_all", vec![a23.clone()], Box::new(|t, v| t.mean_all(v[0]).unwrap())),
            ("sum_all", vec![a23.clone()], Box::new(|t, v| t.sum_all(v[0]).unwrap())),
            ("mse", vec![a23.clone(), b23.clone()], Box::new(|t, v| t.mse(v[0], v[1]).unwrap())),
        ];
        for (name, inputs, build) in &cases {
            gradcheck(name, inputs, build.as_ref());
            checked_ops += 1;
        }
    }

    // (b) the full 2-frame 8x8 denoiser in double precision, rel err < 1e-3
    let desc = tiny_desc();
    let mut params = init_params::<f64>(&desc, 5001).unwrap();
    let mut liven = Rng::new(5002);
    let names: Vec<String> = params.names().cloned().collect();
    for name in &names {
        if params.get(name).unwrap().data().iter().all(|&v| v == 0.0) {
            let shape = params.get(name).unwrap().shape().to_vec();
            *params.get_mut(name).unwrap() =
                Tensor::<f64>::randn(&mut liven, &shape).map(|v| v * 0.1);
        }
    }
    let mut rng = Rng::new(5003);
    let x_t = Tensor::<f64>::randn(&mut rng, &[2, 3, 8, 8]);
    let y = Tensor::<f64>::randn(&mut rng, &[3, 8, 8]);
    let target = Tensor::<f64>::randn(&mut rng, &[2, 3, 8, 8]);
    let loss_of = |params: &ParamSet<f64>| -> f64 {
        let mut tape = Tape::<f64>::new();
        let bound = bind_params(&mut tape, params, true);
        let x = tape.input(x_t.clone());
        let yv = tape.input(y.clone());
        let embs = encode_conditions(
            &mut tape, &bound, &desc, &[2, 10], &[17, 19], yv, false, ForwardOpts::default(),
        )
        .unwrap();
        let trace =
            forward(&mut tape, &bound, &desc, x, 5, &embs, ForwardOpts::default()).unwrap();
        let t = tape.input(target.clone());
        let l = tape.mse(trace.eps_hat, t).unwrap();
        tape.value(l).item()
    };
    let mut tape = Tape::<f64>::new();
    let bound = bind_params(&mut tape, &params, true);
    let x = tape.input(x_t.clone());
    let yv = tape.input(y.clone());
    let embs = encode_conditions(
        &mut tape, &bound, &desc, &[2, 10], &[17, 19], yv, false, ForwardOpts::default(),
    )
    .unwrap();
    let trace = forward(&mut tape, &bound, &desc, x, 5, &embs, ForwardOpts::default()).unwrap();
    let t = tape.input(target.clone());
    let l = tape.mse(trace.eps_hat, t).unwrap();
    tape.backward(l).unwrap();

    let mut coord_rng = Rng::new(5004);
    let mut checked_coords = 0usize;
    for name in &names {
        let tensor = params.get(name).unwrap();
        let var = bound.get(name).unwrap();
        let analytic_t = tape.grad(var).cloned();
        for _ in 0..2 {
            let c = coord_rng.next_below(tensor.numel());
            let analytic = analytic_t.as_ref().map(|g| g.data()[c]).unwrap_or(0.0);
            let mut plus = params.clone();
            plus.get_mut(name).unwrap().data_mut()[c] += 1e-5;
            let mut minus = params.clone();
            minus.get_mut(name).unwrap().data_mut()[c] -= 1e-5;
            let numeric = (loss_of(&plus) - loss_of(&minus)) / 2e-5;
            let tol = 1e-6 + 1e-3 * numeric.abs().max(analytic.abs());
            assert!(
                (analytic - numeric).abs() <= tol,
                "full model {name}[{c}]: {analytic} vs {numeric}"
            );
            checked_coords += 1;
        }
    }
    println!("ACCEPTANCE 5 PASS: {checked_ops} ops within 1e-4 and full 2-frame 8x8 denoiser within 1e-3 ({checked_coords} coords)");
}

#[test]
fn acceptance_06_predictnet_copy_init() {
    let desc = tiny_desc();
    let mut params = init_params::<f64>(&desc, 61).unwrap();
    let pn = predictnet::init_from_denoiser(&params, &desc, 62).unwrap();
    params.merge(pn);
    let mut copied = 0usize;
    for (src, dst) in predictnet::copied_pairs(&params).collect::<Vec<_>>() {
        let a = params.get(&src).unwrap();
        let b = params.get(&dst).unwrap();
        assert!(
            a.data().iter().zip(b.data().iter()).all(|(x, y)| x.to_bits() == y.to_bits()),
            "{src} differs"
        );
        copied += 1;
    }
    let mut tape = Tape::<f64>::new();
    let bound = bind_params(&mut tape, &params, false);
    let mut rng = Rng::new(63);
    let x = tape.input(Tensor::randn(&mut rng, &[4, 3, 8, 8]));
    let y = tape.input(Tensor::randn(&mut rng, &[3, 8, 8]));
    let embs = encode_conditions(
        &mut tape, &bound, &desc, &[2], &[17], y, false, ForwardOpts::default(),
    )
    .unwrap();
    let trace = forward(&mut tape, &bound, &desc, x, 2, &embs, ForwardOpts::default()).unwrap();
    let flow = predictnet::predict_flow(&mut tape, &bound, &desc, &trace, &embs, ForwardOpts::default()).unwrap();
    assert!(tape.value(flow).data().iter().all(|&v| v == 0.0));
    println!("ACCEPTANCE 6 PASS: {copied} copied tensors bitwise-equal and initial flow identically zero");
}

#[test]
fn acceptance_07_loss_composition() {
    let desc = tiny_desc();
    let mut params = init_params::<f32>(&desc, 71).unwrap();
    params.merge(predictnet::init_from_denoiser(&params, &desc, 72).unwrap());
    let sched = NoiseSchedule::make_base(50, BaseFamily::ScaledLinearBeta, 0.00085, 0.012)
        .unwrap()
        .apply_shift_for_shape(4, 16, 16, 16)
        .unwrap()
        .apply_rescale(RescaleForm::AlphaBar)
        .unwrap();
    let specs = ti2v_core::scenegen::plan_dataset(4, 7, 4, 16, 16).unwrap();
    let samples: Vec<_> = specs
        .iter()
        .map(|s| ti2v_core::scenegen::render(s, 4, 16, 16).unwrap())
        .collect();
    let mut state = TrainState::new(73);
    let mut hyper = TrainHyper::from_config(&RunConfig::default());
    hyper.gamma = 1.0;
    hyper.check_finite = true;
    let mut worst = 0.0f64;
    for chunk in samples.chunks(2) {
        let refs: Vec<_> = chunk.iter().collect();
        let out = train_step(&mut params, &mut state, &desc, &sched, &refs, true, &hyper).unwrap();
        let flow = out.loss_flow.expect("flow term");
        worst = worst.max((out.loss_total - (out.loss_df + 1.0 * flow)).abs());
    }
    assert!(worst < 1e-7, "decomposition error {worst}");
    println!("ACCEPTANCE 7 PASS: total = loss_df + gamma*loss_flow within 1e-7 (worst {worst:.2e}, gamma = 1)");
}

fn toy_run_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    // v-prediction for the end-to-end run: with epsilon-prediction on a
    // zero-terminal schedule the caption-dependent part of the target
    // vanishes at exactly the noise levels where the captions are the only
    // motion source, so prompt following never trains at this scale
    cfg.apply(
        "schedule.n = 100\nschedule.reference_d = 16\n\
         train.stages = 8x16x16:1500,8x24x24:1000,8x24x24+flow:500\n\
         train.batch = 2\ntrain.lr = 0.001\ntrain.seed = 1\n\
         sample.steps = 20\nsample.guidance = 1\ndiffusion.param = v\n",
    )
    .unwrap();
    cfg
}

#[test]
fn acceptance_08_end_to_end_toy_training() {
    let dir = tmp("e2e");
    let cfg = toy_run_config();
    // 512 synthetic videos per stage shape
    for (t, h, w) in [(8usize, 16usize, 16usize), (8, 24, 24)] {
        dataset::make_dataset(512, 11, t, h, w, &dir.join(format!("data/{t}x{h}x{w}")), 1, false)
            .unwrap();
    }
    let run = trainer::run_stages(&cfg, &dir.join("data"), &dir.join("run"), None).unwrap();
    assert_eq!(run.stage_checkpoints.len(), 3);

    // loss contract: final-100-step mean < 0.5 x steps 100-200 mean
    let log = fs::read_to_string(dir.join("run/loss.csv")).unwrap();
    let df: Vec<f64> = log
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(2).unwrap().parse().unwrap())
        .collect();
    assert_eq!(df.len(), 3000);
    let early: f64 = df[100..200].iter().sum::<f64>() / 100.0;
    let late: f64 = df[2900..].iter().sum::<f64>() / 100.0;
    assert!(
        late < 0.5 * early,
        "final-100 mean {late} not < 0.5 x steps-100-200 mean {early}"
    );

    // sampling: 20 seeds per direction
    let loaded = sampling::load(&run.final_checkpoint).unwrap();
    let mut videos = Vec::new();
    let mut prompts = Vec::new();
    let spatial_prompts = [
        "red square large solid",
        "blue circle small gradient",
        "yellow bar large solid",
        "green square small gradient",
    ];
    for (d, motion) in ["moving right slow", "moving left slow"].iter().enumerate() {
        for k in 0..20usize {
            let out = sampling::sample_prompt(
                &loaded,
                &sampling::PromptRequest {
                    spatial: spatial_prompts[k % spatial_prompts.len()],
                    motion,
                    first_frame: None,
                    frames: None,
                    seed: hash64(e2e_seed(), (d * 100 + k) as u64),
                    steps: cfg.sample_steps,
                    guidance: cfg.guidance,
                },
            )
            .unwrap();
            videos.push(out.outcome.video);
            let (tokens, _) = ti2v_core::vocab::encode(motion);
            prompts.push(tokens);
        }
    }
    let agreement = metrics::motion_agreement(&videos, &prompts).unwrap();
    let fc: f64 = videos
        .iter()
        .map(|v| metrics::frame_consistency(v).unwrap())
        .sum::<f64>()
        / videos.len() as f64;
    assert!(
        agreement >= 0.8,
        "motion agreement {agreement} < 0.8 over {} samples",
        videos.len()
    );
    assert!(fc >= 0.9, "frame consistency {fc} < 0.9");
    println!(
        "ACCEPTANCE 8 PASS: loss {early:.4} -> {late:.4} (ratio {:.3}), motion_agreement {agreement:.3} >= 0.8, frame_consistency {fc:.3} >= 0.9",
        late / early
    );
    let _ = fs::remove_dir_all(&dir);
}

fn e2e_seed() -> u64 {
    0x5eed
}

#[test]
fn acceptance_09_sampler_determinism_and_predictnet_independence() {
    let dir = tmp("det");
    // a small trained-ish checkpoint with predictnet present
    let mut cfg = RunConfig::default();
    cfg.apply(
        "arch.width0 = 8\narch.width1 = 16\narch.emb_dim = 8\narch.time_dim = 8\narch.groups = 4\n\
         schedule.n = 40\nschedule.reference_d = 16\ntrain.batch = 2\n\
         train.stages = 4x16x16:6,4x16x16+flow:4\ntrain.seed = 9\nsample.steps = 8\n",
    )
    .unwrap();
    dataset::make_dataset(8, 5, 4, 16, 16, &dir.join("data/4x16x16"), 1, false).unwrap();
    let run = trainer::run_stages(&cfg, &dir.join("data"), &dir.join("run"), None).unwrap();
    let ckpt = run.final_checkpoint;
    assert!(ckpt.join("params/predictnet").is_dir());

    let sample_once = |ckpt: &std::path::Path| -> Vec<u8> {
        let loaded = sampling::load(ckpt).unwrap();
        let out = sampling::sample_prompt(
            &loaded,
            &sampling::PromptRequest {
                spatial: "red square large solid",
                motion: "moving right slow",
                first_frame: None,
                frames: None,
                seed: 77,
                steps: 8,
                guidance: 1.0,
            },
        )
        .unwrap();
        ti2v::vtf::write_bytes(&out.outcome.video)
    };
    let a = sample_once(&ckpt);
    let b = sample_once(&ckpt);
    assert_eq!(a, b, "same seed must give identical output bytes");

    // strip predictnet parameters entirely; output must not change
    let stripped = dir.join("stripped");
    copy_dir(&ckpt, &stripped).unwrap();
    fs::remove_dir_all(stripped.join("params/predictnet")).unwrap();
    let c = sample_once(&stripped);
    assert_eq!(a, c, "PredictNet presence must not affect sampling");
    println!("ACCEPTANCE 9 PASS: identical hashes across runs and with/without PredictNet parameters");
    let _ = fs::remove_dir_all(&dir);
}

fn copy_dir(src: &std::path::Path, dst: &std::path::Path) -> std::io::Result<()> {
    fs::create_dir_all(dst)?;
    for entry in fs::read_dir(src)? {
        let entry = entry?;
        let to = dst.join(entry.file_name());
        if entry.path().is_dir() {
            copy_dir(&entry.path(), &to)?;
        } else {
            fs::copy(entry.path(), &to)?;
        }
    }
    Ok(())
}

#[test]
fn acceptance_10_ablation_harness() {
    let dir = tmp("ablate");
    let mut cfg = RunConfig::default();
    cfg.apply(
        "arch.width0 = 8\narch.width1 = 16\narch.emb_dim = 8\narch.time_dim = 8\narch.groups = 4\n\
         schedule.n = 40\nschedule.reference_d = 16\ntrain.batch = 2\ntrain.seed = 3\n\
         sample.steps = 6\nablate.steps = 30\nablate.shape = 8x16x16\n\
         ablate.eval_per_dir = 2\nablate.data_n = 16\n",
    )
    .unwrap();
    let reports = ti2v::ablate::run_ablation(&cfg, &dir).unwrap();
    assert_eq!(reports.len(), 6, "all six variants must be emitted");

    let get = |v: AblationVariant| reports.iter().find(|r| r.variant == v).unwrap();
    // deterministic schedule-math columns
    let no_rescale = get(AblationVariant::NoRescale);
    assert!(
        no_rescale.alpha_bar_terminal > 0.0,
        "no-rescale terminal alpha_bar must stay positive"
    );
    for v in [
        AblationVariant::Full,
        AblationVariant::NoShift,
        AblationVariant::DirectT2V,
    ] {
        let r = get(v);
        if v == AblationVariant::NoShift {
            let s = shift_factor(8, 16, 16, 16).unwrap();
            let want = 1.0 / (s * s);
            assert!(
                (r.snr_mid_ratio - want).abs() < 1e-9,
                "no-shift mid-SNR ratio {} != 1/s^2 = {want}",
                r.snr_mid_ratio
            );
        } else {
            assert!((r.snr_mid_ratio - 1.0).abs() < 1e-12, "{v:?}");
        }
    }
    let full = get(AblationVariant::Full);
    assert_eq!(get(AblationVariant::Full).alpha_bar_terminal, 0.0);
    assert!(full.flow_epe.is_some(), "full variant reports flow EPE");
    assert!(
        get(AblationVariant::NoPredictNet).flow_epe.is_none(),
        "no-predictnet variant has no flow column"
    );
    let csv = fs::read_to_string(dir.join("ablation.csv")).unwrap();
    assert_eq!(csv.lines().count(), 7);
    assert!(dir.join("ablation.txt").is_file());
    println!(
        "ACCEPTANCE 10 PASS: six variants emitted; no-rescale terminal alpha_bar {} > 0; no-shift mid-SNR ratio = 1/s^2; soft directional checks logged",
        no_rescale.alpha_bar_terminal
    );
    let _ = fs::remove_dir_all(&dir);
}
