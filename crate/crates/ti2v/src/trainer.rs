//! Multi-stage training: low resolution, then high resolution, then the flow
//! head joins. Each stage re-derives the SNR shift for its own shape and
//! trains on a dataset rendered at that shape (`<data>/TxHxW/manifest.txt`).
//! Every random draw comes from the checkpointed RNG stream, so resuming
//! from a mid-stage checkpoint reproduces the uninterrupted loss sequence
//! bitwise.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ti2v_core::config::RunConfig;
use ti2v_core::denoiser::{init_params, ArchDescriptor};
use ti2v_core::diffusion::{train_step, StepOutcome, TrainHyper, TrainState};
use ti2v_core::predictnet;
use ti2v_core::rng::hash64;
use ti2v_core::scenegen::VideoSample;
use ti2v_core::schedule::NoiseSchedule;

use crate::checkpoint;
use crate::dataset::{self, shape_dir};
use crate::error::{Error, Result};

pub fn arch_from_config(cfg: &RunConfig) -> ArchDescriptor {
    ArchDescriptor {
        width0: cfg.width0,
        width1: cfg.width1,
        emb_dim: cfg.emb_dim,
        time_dim: cfg.time_dim,
        groups: cfg.groups,
        ..Default::default()
    }
}

/// Base schedule shifted for a stage shape and rescaled, per the run config.
pub fn schedule_for_shape(
    cfg: &RunConfig,
    frames: usize,
    h: usize,
    w: usize,
) -> Result<NoiseSchedule> {
    let sched = NoiseSchedule::make_base(cfg.sched_n, cfg.sched_family, cfg.beta_lo, cfg.beta_hi)?
        .apply_shift_for_shape(frames, h, w, cfg.reference_d)?
        .apply_rescale(cfg.rescale_form)?;
    Ok(sched)
}

pub struct RunOutcome {
    pub stage_checkpoints: Vec<PathBuf>,
    pub final_checkpoint: PathBuf,
    pub steps_run: u64,
}

/// Execute the configured stage plan. `resume` continues from a training
/// checkpoint (the config must be identical to the one it was written with).
pub fn run_stages(
    cfg: &RunConfig,
    data_root: &Path,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<RunOutcome> {
    fs::create_dir_all(out_dir)?;
    let echo = cfg.render();
    fs::File::create(out_dir.join("config.txt"))?.write_all(echo.as_bytes())?;

    let desc = arch_from_config(cfg);
    let (mut params, mut state) = match resume {
        Some(ckpt) => {
            let stored = fs::read_to_string(ckpt.join("config.txt"))
                .map_err(|e| Error::data(format!("resume checkpoint has no config: {e}")))?;
            if stored != echo {
                return Err(Error::data(
                    "resume config differs from the checkpoint's config",
                ));
            }
            (checkpoint::load_params(ckpt)?, checkpoint::load_state(ckpt)?)
        }
        None => (
            init_params::<f32>(&desc, cfg.seed)?,
            TrainState::new(hash64(cfg.seed, 0x7261_u64)),
        ),
    };
    let hyper = TrainHyper::from_config(cfg);

    let mut log = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(out_dir.join("loss.csv"))?;
    if state.step == 0 {
        writeln!(log, "step,stage,loss_df,loss_flow,grad_norm")?;
    }

    let mut stage_checkpoints = Vec::new();
    let mut steps_run = 0u64;
    let resume_stage = state.stage;

    for (stage_idx, stage) in cfg.stages.iter().enumerate() {
        if stage_idx < resume_stage {
            // completed before the resume point; its checkpoint already exists
            stage_checkpoints.push(out_dir.join(format!("stage{}", stage_idx + 1)));
            continue;
        }
        let sched = schedule_for_shape(cfg, stage.frames, stage.height, stage.width)?;
        let stage_data = data_root.join(shape_dir(stage.frames, stage.height, stage.width));
        let samples = dataset::load_dataset(&stage_data).map_err(|e| {
            Error::data(format!(
                "stage {} needs a dataset at {}: {e}",
                stage_idx + 1,
                stage_data.display()
            ))
        })?;
        if stage.use_predictnet && !params.has_prefix(predictnet::PREFIX) {
            let pn = predictnet::init_from_denoiser(&params, &desc, hash64(cfg.seed, 0x9d))?;
            params.merge(pn);
        }

        let start = if stage_idx == resume_stage {
            state.step_in_stage
        } else {
            0
        };
        state.stage = stage_idx;
        state.step_in_stage = start;

        for _ in start..stage.steps as u64 {
            let refs = draw_batch(&mut state, &samples, cfg.batch);
            let refs: Vec<&VideoSample> = refs.iter().map(|&i| &samples[i]).collect();
            let out = train_step(
                &mut params,
                &mut state,
                &desc,
                &sched,
                &refs,
                stage.use_predictnet,
                &hyper,
            )?;
            steps_run += 1;
            write_row(&mut log, state.step, stage_idx + 1, &out)?;
            if cfg.ckpt_every > 0 && state.step_in_stage % cfg.ckpt_every as u64 == 0 {
                let dir = out_dir.join(format!("step{}", state.step));
                checkpoint::save_full(&dir, &desc, &params, &state, &sched, &echo)?;
            }
        }

        // mark the stage complete before writing its checkpoint so resuming
        // from it starts cleanly at the next stage
        state.stage = stage_idx + 1;
        state.step_in_stage = 0;
        let dir = out_dir.join(format!("stage{}", stage_idx + 1));
        checkpoint::save_full(&dir, &desc, &params, &state, &sched, &echo)?;
        stage_checkpoints.push(dir);
    }

    let final_dir = out_dir.join("final");
    let last_stage = cfg.stages.last().expect("stages non-empty");
    let sched = schedule_for_shape(cfg, last_stage.frames, last_stage.height, last_stage.width)?;
    checkpoint::save_full(&final_dir, &desc, &params, &state, &sched, &echo)?;
    Ok(RunOutcome {
        stage_checkpoints,
        final_checkpoint: final_dir,
        steps_run,
    })
}

/// Batch indices drawn from the serialized training stream.
fn draw_batch(state: &mut TrainState<f32>, samples: &[VideoSample], batch: usize) -> Vec<usize> {
    (0..batch.max(1))
        .map(|_| state.rng.next_below(samples.len()))
        .collect()
}

fn write_row(
    log: &mut fs::File,
    step: u64,
    stage: usize,
    out: &StepOutcome,
) -> Result<()> {
    let flow = out
        .loss_flow
        .map(|f| f.to_string())
        .unwrap_or_default();
    writeln!(
        log,
        "{step},{stage},{},{flow},{}",
        out.loss_df, out.grad_norm
    )?;
    Ok(())
}
