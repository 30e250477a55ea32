//! Flow-prediction head, trained only in the final stage.
//!
//! PredictNet is a copy of the denoiser's upsampling branch (bitwise equal at
//! init, independently trained afterwards — no weight tying) that consumes the
//! denoiser's down/mid activations as its skip inputs and regresses the clean
//! optical flow field directly. Its fresh output head is a temporal k=2 valid
//! convolution (mapping T frames of features to T−1 flow slots) followed by a
//! zero-initialized 1x1 conv, so the initial flow prediction is exactly zero
//! while the head still receives gradient.
//!
//! Gradients from the flow loss reach the denoiser's shared down/mid features
//! (the joint update) but not the copied up-branch, which only PredictNet owns.

use alloc::format;
use alloc::string::String;

use crate::denoiser::{up_branch, ArchDescriptor, BoundParams, EmbeddingVars, ForwardOpts, ForwardTrace, ParamSet};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const PREFIX: &str = "predictnet/";

/// The up-branch parameter subtrees PredictNet copies.
const COPIED_PREFIXES: [&str; 3] = ["u1/", "u0/", "up/"];

/// Whether a parameter name belongs to the denoiser subtree PredictNet copies.
pub fn is_copied_name(name: &str) -> bool {
    COPIED_PREFIXES.iter().any(|p| name.starts_with(p))
}

/// Build PredictNet parameters from a denoiser: bitwise copies of the
/// up-branch subtree plus the fresh flow head. Returns only `predictnet/*`
/// entries; merge them into the full set before training.
pub fn init_from_denoiser<E: Scalar>(
    denoiser: &ParamSet<E>,
    desc: &ArchDescriptor,
    seed: u64,
) -> Result<ParamSet<E>> {
    let mut out = ParamSet::new();
    let mut copied = 0usize;
    for (name, tensor) in denoiser.iter() {
        if is_copied_name(name) {
            out.insert(&format!("{PREFIX}{name}"), tensor.clone());
            copied += 1;
        }
    }
    if copied == 0 {
        return Err(Error::Contract(
            "denoiser has no up-branch parameters to copy".into(),
        ));
    }
    let mut rng = Rng::new(seed);
    let hc = desc.width0;
    let std = libm::sqrt(2.0 / (desc.width0 * 2) as f64);
    let tconv: Tensor<E> = Tensor::new(
        alloc::vec![hc, desc.width0, 2],
        (0..hc * desc.width0 * 2)
            .map(|_| E::from_f64(rng.next_normal() * std))
            .collect(),
    )?;
    out.insert(&format!("{PREFIX}head/tconv/w"), tconv);
    out.insert(&format!("{PREFIX}head/tconv/b"), Tensor::zeros(&[hc]));
    // zero output layer: initial flow is identically zero
    out.insert(
        &format!("{PREFIX}head/out/w"),
        Tensor::zeros(&[2, hc, 1, 1]),
    );
    out.insert(&format!("{PREFIX}head/out/b"), Tensor::zeros(&[2]));
    Ok(out)
}

/// Names of the copied parameters as (denoiser name, predictnet name) pairs.
pub fn copied_pairs<E: Scalar>(params: &ParamSet<E>) -> impl Iterator<Item = (String, String)> + '_ {
    params
        .names()
        .filter(|n| is_copied_name(n))
        .map(|n| (n.clone(), format!("{PREFIX}{n}")))
}

/// Run PredictNet on the denoiser's recorded activations for the same
/// `(x_t, t, conditions)`; returns the flow field [T−1, 2, H, W].
pub fn predict_flow<E: Scalar>(
    tape: &mut Tape<E>,
    v: &BoundParams,
    desc: &ArchDescriptor,
    trace: &ForwardTrace,
    embs: &EmbeddingVars,
    opts: ForwardOpts,
) -> Result<Var> {
    let frames = tape.value(trace.skip0).shape()[0];
    if frames < 2 {
        return Err(Error::Contract(
            "flow prediction needs at least 2 frames".into(),
        ));
    }
    let feats = up_branch(
        tape,
        v,
        PREFIX,
        desc,
        trace.mid,
        trace.skip0,
        trace.skip1,
        trace.temb,
        embs,
        opts,
    )?;
    let ht = tape.conv1d_temporal(
        feats,
        v.get(&format!("{PREFIX}head/tconv/w"))?,
        Some(v.get(&format!("{PREFIX}head/tconv/b"))?),
    )?;
    let ht = tape.silu(ht)?;
    tape.conv2d(
        ht,
        v.get(&format!("{PREFIX}head/out/w"))?,
        Some(v.get(&format!("{PREFIX}head/out/b"))?),
    )
}

/// `L_flow = mean ‖f − f̂‖²` over every flow component.
pub fn flow_loss<E: Scalar>(tape: &mut Tape<E>, predicted: Var, target: Var) -> Result<Var> {
    tape.mse(predicted, target)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{bind_params, encode_conditions, forward, init_params};
    use alloc::vec::Vec;

    fn tiny_desc() -> ArchDescriptor {
        ArchDescriptor {
            channels: 3,
            width0: 8,
            width1: 16,
            emb_dim: 8,
            time_dim: 8,
            groups: 4,
            vocab: crate::vocab::size(),
            max_frames: 16,
            lambda: 1.0,
        }
    }

    fn full_params(seed: u64) -> (ArchDescriptor, ParamSet<f64>) {
        let desc = tiny_desc();
        let mut params = init_params::<f64>(&desc, seed).unwrap();
        let pn = init_from_denoiser(&params, &desc, seed ^ 0xf0f0).unwrap();
        params.merge(pn);
        (desc, params)
    }

    #[test]
    fn copied_subtree_is_bitwise_equal() {
        let (_, params) = full_params(61);
        let pairs: Vec<_> = copied_pairs(&params).collect();
        assert!(!pairs.is_empty());
        for (src, dst) in pairs {
            let a = params.get(&src).unwrap();
            let b = params.get(&dst).unwrap();
            assert_eq!(a.shape(), b.shape(), "{src}");
            assert!(
                a.data()
                    .iter()
                    .zip(b.data().iter())
                    .all(|(x, y)| x.to_bits() == y.to_bits()),
                "{src} differs from {dst}"
            );
        }
    }

    #[test]
    fn initial_flow_is_exactly_zero_and_shaped() {
        let (desc, params) = full_params(62);
        let mut tape = Tape::<f64>::new();
        let v = bind_params(&mut tape, &params, false);
        let mut rng = Rng::new(63);
        let x = tape.input(Tensor::randn(&mut rng, &[8, 3, 16, 16]));
        let y = tape.input(Tensor::randn(&mut rng, &[3, 16, 16]));
        let embs = encode_conditions(&mut tape, &v, &desc, &[2], &[17], y, false, ForwardOpts::default()).unwrap();
        let trace = forward(&mut tape, &v, &desc, x, 3, &embs, ForwardOpts::default()).unwrap();
        let flow = predict_flow(&mut tape, &v, &desc, &trace, &embs, ForwardOpts::default())
            .unwrap();
        assert_eq!(tape.value(flow).shape(), &[7, 2, 16, 16]);
        assert!(tape.value(flow).data().iter().all(|&f| f == 0.0));
    }

    #[test]
    fn flow_gradients_do_not_touch_denoiser_up_branch() {
        let (desc, mut params) = full_params(64);
        // the zero output head blocks upstream gradient at init; give it
        // trained-like weights so gradient actually reaches the backbone
        let mut rng0 = Rng::new(640);
        let shape = params.get("predictnet/head/out/w").unwrap().shape().to_vec();
        *params.get_mut("predictnet/head/out/w").unwrap() = Tensor::randn(&mut rng0, &shape);
        let mut tape = Tape::<f64>::new();
        let v = bind_params(&mut tape, &params, true);
        let mut rng = Rng::new(65);
        let x = tape.input(Tensor::randn(&mut rng, &[2, 3, 8, 8]));
        let y = tape.input(Tensor::randn(&mut rng, &[3, 8, 8]));
        let target = tape.input(Tensor::randn(&mut rng, &[1, 2, 8, 8]));
        let embs = encode_conditions(&mut tape, &v, &desc, &[2], &[17], y, false, ForwardOpts::default()).unwrap();
        let trace = forward(&mut tape, &v, &desc, x, 2, &embs, ForwardOpts::default()).unwrap();
        let flow =
            predict_flow(&mut tape, &v, &desc, &trace, &embs, ForwardOpts::default()).unwrap();
        let loss = flow_loss(&mut tape, flow, target).unwrap();
        tape.backward(loss).unwrap();

        // denoiser's own up-branch: untouched by the flow loss
        for name in ["u1/res/conv1/w", "u0/fuse/w", "up/w", "out/conv/w"] {
            let var = v.get(name).unwrap();
            let norm = tape.grad(var).map(|g| g.norm_l2()).unwrap_or(0.0);
            assert_eq!(norm, 0.0, "flow loss leaked into denoiser `{name}`");
        }
        // shared down/mid path: joint update receives gradient (the zero
        // conv2/wo inits block their own upstream inputs, so probe params
        // whose gradient paths ride the residual connections)
        for name in ["conv_in/w", "down/w", "d0/res/conv2/w", "mid/res/conv2/w"] {
            let var = v.get(name).unwrap();
            let norm = tape.grad(var).map(|g| g.norm_l2()).unwrap_or(0.0);
            assert!(norm > 0.0, "no joint gradient into `{name}`");
        }
        // predictnet's copy trains
        let var = v.get("predictnet/head/out/w").unwrap();
        assert!(tape.grad(var).map(|g| g.norm_l2()).unwrap_or(0.0) > 0.0);
    }

    #[test]
    fn flow_loss_identities() {
        let mut tape = Tape::<f64>::new();
        let mut rng = Rng::new(66);
        let f = tape.input(Tensor::randn(&mut rng, &[3, 2, 4, 4]));
        let zero = flow_loss(&mut tape, f, f).unwrap();
        assert_eq!(tape.value(zero).item(), 0.0);

        let shifted_t = tape.value(f).map(|x| x + 1.0);
        let g = tape.input(shifted_t);
        let one = flow_loss(&mut tape, g, f).unwrap();
        assert!((tape.value(one).item() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn flow_loss_matches_two_line_recomputation() {
        let mut tape = Tape::<f64>::new();
        let mut rng = Rng::new(67);
        let a = Tensor::<f64>::randn(&mut rng, &[2, 2, 3, 3]);
        let b = Tensor::<f64>::randn(&mut rng, &[2, 2, 3, 3]);
        let av = tape.input(a.clone());
        let bv = tape.input(b.clone());
        let loss = flow_loss(&mut tape, av, bv).unwrap();
        let want: f64 = a
            .data()
            .iter()
            .zip(b.data().iter())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / a.numel() as f64;
        assert!((tape.value(loss).item() - want).abs() < 1e-7);
    }

    #[test]
    fn missing_head_is_a_contract_error() {
        let desc = tiny_desc();
        let params = init_params::<f64>(&desc, 68).unwrap(); // no predictnet merge
        let mut tape = Tape::<f64>::new();
        let v = bind_params(&mut tape, &params, false);
        let mut rng = Rng::new(69);
        let x = tape.input(Tensor::randn(&mut rng, &[2, 3, 8, 8]));
        let y = tape.input(Tensor::randn(&mut rng, &[3, 8, 8]));
        let embs = encode_conditions(&mut tape, &v, &desc, &[2], &[17], y, false, ForwardOpts::default()).unwrap();
        let trace = forward(&mut tape, &v, &desc, x, 2, &embs, ForwardOpts::default()).unwrap();
        assert!(predict_flow(&mut tape, &v, &desc, &trace, &embs, ForwardOpts::default()).is_err());
    }
}
