//! Ablation harness: train six variants with an identical step budget at one
//! shape, then report schedule math plus learned metrics side by side.
//!
//! Deterministic columns come straight from schedule algebra: the terminal
//! ᾱ of the variant's training schedule, and the variant's mid-schedule SNR
//! relative to the full pipeline's (computed on the pre-rescale tables, where
//! the shift is an exact factor of s²). Learned columns (frame consistency,
//! motion agreement, flow EPE) are reported as-is; directional expectations
//! are logged as soft checks, never asserted.

use std::fs;

use std::path::Path;

use ti2v_core::config::RunConfig;
use ti2v_core::denoiser::{init_params, ForwardOpts};
use ti2v_core::diffusion::{sample, train_step, SampleOpts, TrainHyper, TrainState};
use ti2v_core::metrics::{direction_matches, frame_consistency, AblationVariant};
use ti2v_core::predictnet;
use ti2v_core::rng::{hash64, Rng};
use ti2v_core::scenegen::{self, VideoSample};
use ti2v_core::schedule::NoiseSchedule;
use ti2v_core::vocab;

use crate::error::Result;
use crate::evalio;
use crate::sampling::LoadedCheckpoint;
use crate::trainer::arch_from_config;

#[derive(Debug, Clone)]
pub struct VariantReport {
    pub variant: AblationVariant,
    pub alpha_bar_terminal: f64,
    pub snr_mid_ratio: f64,
    pub frame_consistency: f64,
    pub motion_agreement: f64,
    pub flow_epe: Option<f64>,
}

fn forward_opts(variant: AblationVariant) -> ForwardOpts {
    ForwardOpts {
        direct_t2v: variant == AblationVariant::DirectT2V,
        single_encoder: variant == AblationVariant::SingleEncoder,
        ..Default::default()
    }
}

/// The variant's training schedule: shift unless ablated, rescale unless
/// ablated.
fn variant_schedule(cfg: &RunConfig, variant: AblationVariant) -> Result<NoiseSchedule> {
    let (t, h, w) = cfg.ablate_shape;
    let mut sched =
        NoiseSchedule::make_base(cfg.sched_n, cfg.sched_family, cfg.beta_lo, cfg.beta_hi)?;
    if variant != AblationVariant::NoShift {
        sched = sched.apply_shift_for_shape(t, h, w, cfg.reference_d)?;
    }
    if variant != AblationVariant::NoRescale {
        sched = sched.apply_rescale(cfg.rescale_form)?;
    }
    Ok(sched)
}

/// Mid-schedule SNR of the pre-rescale table (where the shift acts as an
/// exact s² factor on every timestep).
fn snr_mid_prerescale(cfg: &RunConfig, shifted: bool) -> Result<f64> {
    let (t, h, w) = cfg.ablate_shape;
    let mut sched =
        NoiseSchedule::make_base(cfg.sched_n, cfg.sched_family, cfg.beta_lo, cfg.beta_hi)?;
    if shifted {
        sched = sched.apply_shift_for_shape(t, h, w, cfg.reference_d)?;
    }
    let mid = (cfg.sched_n / 2).max(1);
    let a = sched.alpha_bar(mid)?;
    Ok(a / (1.0 - a))
}

/// Concatenate spatial and motion captions (the direct-T2V conditioning).
fn concat_tokens(sample: &VideoSample) -> (Vec<u32>, Vec<u32>) {
    let mut joined = sample.spatial_tokens.clone();
    joined.extend_from_slice(&sample.motion_tokens);
    (joined.clone(), joined)
}

fn train_variant(
    cfg: &RunConfig,
    variant: AblationVariant,
    data: &[VideoSample],
) -> Result<(ti2v_core::denoiser::ParamSet<f32>, NoiseSchedule)> {
    let desc = arch_from_config(cfg);
    let sched = variant_schedule(cfg, variant)?;
    let mut params = init_params::<f32>(&desc, cfg.seed)?;
    let mut state = TrainState::new(hash64(cfg.seed, 0xab1a));
    let mut hyper = TrainHyper::from_config(cfg);
    hyper.forward_opts = forward_opts(variant);

    // mirror the staged scheme at mini scale: the flow head joins for the
    // final third of the budget (except in the no-predictnet variant)
    let flow_from = cfg.ablate_steps - cfg.ablate_steps / 3;
    let adapted: Vec<VideoSample> = if variant == AblationVariant::DirectT2V {
        data.iter()
            .map(|s| {
                let (sp, mo) = concat_tokens(s);
                VideoSample {
                    frames: s.frames.clone(),
                    spatial_tokens: sp,
                    motion_tokens: mo,
                    flow: s.flow.clone(),
                    spec: s.spec.clone(),
                }
            })
            .collect()
    } else {
        data.to_vec()
    };

    for step in 0..cfg.ablate_steps {
        let use_pn = variant != AblationVariant::NoPredictNet && step >= flow_from;
        if use_pn && !params.has_prefix(predictnet::PREFIX) {
            let pn = predictnet::init_from_denoiser(&params, &desc, hash64(cfg.seed, 0x9d))?;
            params.merge(pn);
        }
        let idx: Vec<usize> = (0..cfg.batch.max(1))
            .map(|_| state.rng.next_below(adapted.len()))
            .collect();
        let refs: Vec<&VideoSample> = idx.iter().map(|&i| &adapted[i]).collect();
        train_step(&mut params, &mut state, &desc, &sched, &refs, use_pn, &hyper)?;
    }
    Ok((params, sched))
}

fn eval_variant(
    cfg: &RunConfig,
    variant: AblationVariant,
    params: &ti2v_core::denoiser::ParamSet<f32>,
    sched: &NoiseSchedule,
) -> Result<(f64, f64, Option<f64>)> {
    let desc = arch_from_config(cfg);
    let (frames, h, w) = cfg.ablate_shape;
    let opts_fwd = forward_opts(variant);
    let mut fc_sum = 0.0;
    let mut matched = 0usize;
    let mut total = 0usize;

    for dir_idx in 0..4usize {
        for k in 0..cfg.ablate_eval_per_dir {
            let seed = hash64(cfg.seed ^ 0xe7a1, (dir_idx * 1000 + k) as u64);
            let mut rng = Rng::new(seed);
            let spec = scenegen::sample_scene(&mut rng, frames, h, w, Some(dir_idx))?;
            let first = scenegen::render_frame(&spec, 0, h, w);
            let (mut spatial, _) = vocab::encode(&spec.spatial_caption());
            let (mut motion, _) = vocab::encode(&spec.motion_caption());
            if variant == AblationVariant::DirectT2V {
                spatial.extend_from_slice(&motion);
                motion = spatial.clone();
            }
            let out = sample(
                params,
                &desc,
                sched,
                &first,
                &spatial,
                &motion,
                frames,
                &SampleOpts {
                    steps: cfg.sample_steps,
                    guidance: cfg.guidance,
                    seed,
                    allow_unrescaled: variant == AblationVariant::NoRescale,
                    forward_opts: opts_fwd,
                    epsilon_param: cfg.epsilon_param,
                },
            )?;
            fc_sum += frame_consistency(&out.video)?;
            let dir_word = ["right", "left", "down", "up"][dir_idx];
            if direction_matches(&out.video, dir_word)? {
                matched += 1;
            }
            total += 1;
        }
    }

    let epe = if params.has_prefix(predictnet::PREFIX) {
        // supervised-flow quality on freshly rendered scenes
        let loaded = LoadedCheckpoint {
            desc: desc.clone(),
            params: params.clone(),
            sched: sched.clone(),
            config: cfg.clone(),
        };
        let mut acc = 0.0;
        let mut n = 0usize;
        for i in 0..4usize {
            let mut rng = Rng::new(hash64(cfg.seed ^ 0xf10e, i as u64));
            let spec = scenegen::sample_scene(&mut rng, frames, h, w, Some(i))?;
            let sample = scenegen::render(&spec, frames, h, w)?;
            acc += evalio::predictnet_epe_for(&loaded, &sample, hash64(cfg.seed, 77 + i as u64))?;
            n += 1;
        }
        Some(acc / n as f64)
    } else {
        None
    };

    Ok((fc_sum / total as f64, matched as f64 / total as f64, epe))
}

pub fn run_ablation(cfg: &RunConfig, out_dir: &Path) -> Result<Vec<VariantReport>> {
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join("config.txt"), cfg.render())?;

    let (frames, h, w) = cfg.ablate_shape;
    let specs = scenegen::plan_dataset(cfg.ablate_data_n, hash64(cfg.seed, 0xda7a), frames, h, w)?;
    let data: Vec<VideoSample> = specs
        .iter()
        .map(|s| scenegen::render(s, frames, h, w))
        .collect::<ti2v_core::Result<_>>()?;

    let snr_mid_full = snr_mid_prerescale(cfg, true)?;
    let mut reports = Vec::new();
    for &variant in &cfg.ablate_variants {
        let (params, sched) = train_variant(cfg, variant, &data)?;
        let (fc, ma, epe) = eval_variant(cfg, variant, &params, &sched)?;
        let snr_mid = snr_mid_prerescale(cfg, variant != AblationVariant::NoShift)?;
        reports.push(VariantReport {
            variant,
            alpha_bar_terminal: sched.alpha_bar(sched.len())?,
            snr_mid_ratio: snr_mid / snr_mid_full,
            frame_consistency: fc,
            motion_agreement: ma,
            flow_epe: epe,
        });
    }

    write_reports(&reports, out_dir)?;
    Ok(reports)
}

fn write_reports(reports: &[VariantReport], out_dir: &Path) -> Result<()> {
    let mut csv = String::from(
        "variant,alpha_bar_terminal,snr_mid_ratio,frame_consistency,motion_agreement,flow_epe\n",
    );
    for r in reports {
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.variant.name(),
            r.alpha_bar_terminal,
            r.snr_mid_ratio,
            r.frame_consistency,
            r.motion_agreement,
            r.flow_epe.map(|e| e.to_string()).unwrap_or_default()
        ));
    }
    fs::write(out_dir.join("ablation.csv"), &csv)?;

    let mut table = format!(
        "{:<15} {:>18} {:>14} {:>18} {:>17} {:>9}\n",
        "variant", "alpha_bar_term", "snr_mid_ratio", "frame_consistency", "motion_agreement", "flow_epe"
    );
    for r in reports {
        table.push_str(&format!(
            "{:<15} {:>18.3e} {:>14.4} {:>18.4} {:>17.4} {:>9}\n",
            r.variant.name(),
            r.alpha_bar_terminal,
            r.snr_mid_ratio,
            r.frame_consistency,
            r.motion_agreement,
            r.flow_epe.map(|e| format!("{e:.3}")).unwrap_or_else(|| "-".into())
        ));
    }

    // soft directional expectations, logged rather than asserted
    let get = |v: AblationVariant| reports.iter().find(|r| r.variant == v);
    let mut notes = String::new();
    if let (Some(full), Some(nopn)) = (
        get(AblationVariant::Full),
        get(AblationVariant::NoPredictNet),
    ) {
        notes.push_str(&format!(
            "note: motion_agreement full={:.4} vs no-predictnet={:.4} (expected full >= no-predictnet): {}\n",
            full.motion_agreement,
            nopn.motion_agreement,
            if full.motion_agreement >= nopn.motion_agreement { "holds" } else { "does NOT hold" }
        ));
    }
    if let (Some(full), Some(direct)) = (
        get(AblationVariant::Full),
        get(AblationVariant::DirectT2V),
    ) {
        notes.push_str(&format!(
            "note: frame_consistency factorized={:.4} vs direct={:.4} (expected factorized >= direct): {}\n",
            full.frame_consistency,
            direct.frame_consistency,
            if full.frame_consistency >= direct.frame_consistency { "holds" } else { "does NOT hold" }
        ));
    }
    table.push('\n');
    table.push_str(&notes);
    fs::write(out_dir.join("ablation.txt"), table)?;
    eprint!("{notes}");
    Ok(())
}
