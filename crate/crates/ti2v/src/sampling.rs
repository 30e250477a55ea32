//! Sampling from a checkpoint: the factorized inference path. Without a
//! supplied first frame the spatial prompt's scene is rendered at t = 0
//! (text-to-video); with one, that image is animated (image-to-video).

use std::path::Path;

use ti2v_core::config::RunConfig;
use ti2v_core::denoiser::{ArchDescriptor, ParamSet};
use ti2v_core::diffusion::{sample, SampleOpts, SampleOutcome};
use ti2v_core::scenegen;
use ti2v_core::schedule::NoiseSchedule;
use ti2v_core::vocab;
use ti2v_core::Tensor;

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::trainer::schedule_for_shape;

pub struct LoadedCheckpoint {
    pub desc: ArchDescriptor,
    pub params: ParamSet<f32>,
    pub sched: NoiseSchedule,
    pub config: RunConfig,
}

pub fn load(ckpt: &Path) -> Result<LoadedCheckpoint> {
    let desc = checkpoint::load_arch(ckpt)?;
    let params = checkpoint::load_params(ckpt)?;
    let sched = checkpoint::load_schedule(ckpt)?;
    let config_text = std::fs::read_to_string(ckpt.join("config.txt"))
        .map_err(|e| Error::data(format!("checkpoint has no config.txt: {e}")))?;
    let config = RunConfig::parse(&config_text)?;
    Ok(LoadedCheckpoint {
        desc,
        params,
        sched,
        config,
    })
}

pub struct PromptRequest<'a> {
    pub spatial: &'a str,
    pub motion: &'a str,
    pub first_frame: Option<Tensor<f32>>,
    pub frames: Option<usize>,
    pub seed: u64,
    pub steps: usize,
    pub guidance: f64,
}

pub struct PromptOutcome {
    pub outcome: SampleOutcome,
    pub unknown_words: Vec<String>,
    pub first_frame: Tensor<f32>,
}

/// Tokenize prompts, obtain the first frame, re-derive the schedule for the
/// target shape when it differs from the trained one, and run the sampler.
pub fn sample_prompt(loaded: &LoadedCheckpoint, req: &PromptRequest<'_>) -> Result<PromptOutcome> {
    let (spatial_tokens, mut unknown) = vocab::encode(req.spatial);
    let (motion_tokens, unk2) = vocab::encode(req.motion);
    unknown.extend(unk2);
    if spatial_tokens.is_empty() || motion_tokens.is_empty() {
        return Err(Error::usage("both prompts must be non-empty"));
    }

    let trained_shape = loaded.sched.shift_shape();
    let frames = req
        .frames
        .or(trained_shape.map(|(t, _, _)| t))
        .ok_or_else(|| Error::data("checkpoint schedule has no shape; pass --frames"))?;

    let first_frame = match &req.first_frame {
        Some(f) => {
            let s = f.shape();
            if s.len() != 3 || s[0] != loaded.desc.channels {
                return Err(Error::data(format!(
                    "first frame must be [3,H,W], got {s:?}"
                )));
            }
            f.clone()
        }
        None => {
            let (h, w) = trained_shape
                .map(|(_, h, w)| (h, w))
                .ok_or_else(|| Error::data("checkpoint schedule has no shape for T2V mode"))?;
            let spec =
                scenegen::spec_from_caption(&spatial_tokens, &motion_tokens, req.seed, h, w)?;
            scenegen::render_frame(&spec, 0, h, w)
        }
    };
    let (h, w) = (first_frame.shape()[1], first_frame.shape()[2]);

    let sched = if trained_shape == Some((frames, h, w)) {
        loaded.sched.clone()
    } else {
        schedule_for_shape(&loaded.config, frames, h, w)?
    };

    let opts = SampleOpts {
        steps: req.steps,
        guidance: req.guidance,
        seed: req.seed,
        allow_unrescaled: false,
        forward_opts: Default::default(),
        epsilon_param: loaded.config.epsilon_param,
    };
    let outcome = sample(
        &loaded.params,
        &loaded.desc,
        &sched,
        &first_frame,
        &spatial_tokens,
        &motion_tokens,
        frames,
        &opts,
    )?;
    Ok(PromptOutcome {
        outcome,
        unknown_words: unknown,
        first_frame,
    })
}
