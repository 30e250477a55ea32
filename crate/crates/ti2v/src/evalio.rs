//! Evaluation over a dataset: regenerate each sample from its first frame and
//! captions, then score frame consistency and prompt-motion agreement; when
//! the checkpoint carries PredictNet, also score flow endpoint error against
//! the analytic flow.

use std::fs;
use std::io::Write;
use std::path::Path;

use ti2v_core::denoiser::{bind_params, encode_conditions, forward, ForwardOpts};
use ti2v_core::diffusion::add_noise;
use ti2v_core::metrics::{
    direction_matches, flow_epe, frame_consistency, prompt_direction, EvalReport, EvalRow,
};
use ti2v_core::predictnet;
use ti2v_core::rng::{hash64, Rng};
use ti2v_core::scenegen::VideoSample;
use ti2v_core::Tape;
use ti2v_core::Tensor;

use crate::dataset;
use crate::error::{Error, Result};
use crate::sampling::{sample_prompt, LoadedCheckpoint, PromptRequest};

pub struct EvalOpts {
    pub seed: u64,
    pub steps: usize,
    pub guidance: f64,
}

fn first_frame_of(sample: &VideoSample) -> Tensor<f32> {
    let s = sample.frames.shape();
    let fhw = s[1] * s[2] * s[3];
    Tensor::new(s[1..].to_vec(), sample.frames.data()[..fhw].to_vec()).expect("frame slice")
}

/// PredictNet flow EPE on one dataset sample at mid-schedule noise.
pub fn predictnet_epe_for(
    loaded: &LoadedCheckpoint,
    sample: &VideoSample,
    seed: u64,
) -> Result<f64> {
    let sched = &loaded.sched;
    let t = (sched.len() / 2).max(1);
    let mut rng = Rng::new(seed);
    let eps = Tensor::<f32>::randn(&mut rng, sample.frames.shape());
    let x_t = add_noise(&sample.frames, t, &eps, sched)?;

    let mut tape = Tape::<f32>::new();
    tape.set_check_finite(false);
    let bound = bind_params(&mut tape, &loaded.params, false);
    let y = tape.input(first_frame_of(sample));
    let x_var = tape.input(x_t);
    let opts = ForwardOpts::default();
    let embs = encode_conditions(
        &mut tape,
        &bound,
        &loaded.desc,
        &sample.spatial_tokens,
        &sample.motion_tokens,
        y,
        false,
        opts,
    )?;
    let trace = forward(&mut tape, &bound, &loaded.desc, x_var, t, &embs, opts)?;
    let flow = predictnet::predict_flow(&mut tape, &bound, &loaded.desc, &trace, &embs, opts)?;
    Ok(flow_epe(tape.value(flow), &sample.flow)?)
}

pub fn run_eval(
    loaded: &LoadedCheckpoint,
    data_dir: &Path,
    opts: &EvalOpts,
) -> Result<(EvalReport, Vec<String>)> {
    let samples = dataset::load_dataset(data_dir)?;
    let rows_meta = dataset::read_manifest(data_dir)?;
    let has_predictnet = loaded.params.has_prefix(predictnet::PREFIX);

    let mut rows = Vec::with_capacity(samples.len());
    let mut files = Vec::with_capacity(samples.len());
    for (i, sample) in samples.iter().enumerate() {
        let frames = sample.frames.shape()[0];
        let generated = sample_prompt(
            loaded,
            &PromptRequest {
                spatial: &rows_meta[i].spatial_caption,
                motion: &rows_meta[i].motion_caption,
                first_frame: Some(first_frame_of(sample)),
                frames: Some(frames),
                seed: hash64(opts.seed, i as u64),
                steps: opts.steps,
                guidance: opts.guidance,
            },
        )?;
        let fc = frame_consistency(&generated.outcome.video)?;
        let dir = prompt_direction(&sample.motion_tokens).ok_or_else(|| {
            Error::data(format!(
                "{}: motion caption has no direction word",
                rows_meta[i].file
            ))
        })?;
        let matched = direction_matches(&generated.outcome.video, dir)?;
        let epe = if has_predictnet {
            Some(predictnet_epe_for(loaded, sample, hash64(opts.seed, 1000 + i as u64))?)
        } else {
            None
        };
        rows.push(EvalRow {
            index: i,
            frame_consistency: fc,
            motion_match: if matched { 1.0 } else { 0.0 },
            flow_epe: epe,
        });
        files.push(rows_meta[i].file.clone());
    }
    let report = EvalReport::from_rows(rows, loaded.config.fingerprint())?;
    Ok((report, files))
}

pub fn write_report_csv(report: &EvalReport, files: &[String], path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let mut out = format!("# fingerprint={}\n", report.config_fingerprint);
    out.push_str("index,file,frame_consistency,motion_match,flow_epe\n");
    for row in &report.rows {
        let epe = row.flow_epe.map(|e| e.to_string()).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{epe}\n",
            row.index, files[row.index], row.frame_consistency, row.motion_match
        ));
    }
    out.push_str(&format!(
        "# mean frame_consistency={} motion_agreement={} flow_epe={}\n",
        report.frame_consistency,
        report.motion_agreement,
        report
            .flow_epe
            .map(|e| e.to_string())
            .unwrap_or_else(|| "na".into())
    ));
    fs::File::create(path)?.write_all(out.as_bytes())?;

    // human-readable sibling table
    let mut table = String::new();
    table.push_str(&format!(
        "{:<6} {:<18} {:>18} {:>13} {:>10}\n",
        "index", "file", "frame_consistency", "motion_match", "flow_epe"
    ));
    for row in &report.rows {
        table.push_str(&format!(
            "{:<6} {:<18} {:>18.4} {:>13} {:>10}\n",
            row.index,
            files[row.index],
            row.frame_consistency,
            if row.motion_match > 0.0 { "yes" } else { "no" },
            row.flow_epe
                .map(|e| format!("{e:.3}"))
                .unwrap_or_else(|| "-".into())
        ));
    }
    table.push_str(&format!(
        "\nmean: frame_consistency={:.4} motion_agreement={:.4} flow_epe={}\n",
        report.frame_consistency,
        report.motion_agreement,
        report
            .flow_epe
            .map(|e| format!("{e:.4}"))
            .unwrap_or_else(|| "-".into())
    ));
    fs::write(path.with_extension("txt"), table)?;
    Ok(())
}
