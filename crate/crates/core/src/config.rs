//! Flat `key = value` run configuration.
//!
//! UTF-8 text, `#` starts a comment, unknown keys are a hard error so typos
//! cannot silently fall back to defaults. CLI flags override file values;
//! the fully-resolved config renders back out via [`RunConfig::render`] and
//! is echoed into every output directory.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::metrics::AblationVariant;
use crate::rng::hash64;
use crate::schedule::{BaseFamily, RescaleForm};

/// One training stage: shape, step budget, and whether the flow head trains.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StagePlan {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub steps: usize,
    pub use_predictnet: bool,
}

impl StagePlan {
    pub fn render(&self) -> String {
        format!(
            "{}x{}x{}{}:{}",
            self.frames,
            self.height,
            self.width,
            if self.use_predictnet { "+flow" } else { "" },
            self.steps
        )
    }
}

/// Parse `TxHxW` (used by stage specs and the CLI `--shape` flag).
pub fn parse_shape(s: &str) -> Result<(usize, usize, usize)> {
    let parts: Vec<&str> = s.split('x').collect();
    if parts.len() != 3 {
        return Err(Error::Config(format!("bad shape `{s}`, want TxHxW")));
    }
    let parse = |p: &str| -> Result<usize> {
        p.parse::<usize>()
            .map_err(|_| Error::Config(format!("bad extent `{p}` in shape `{s}`")))
    };
    Ok((parse(parts[0])?, parse(parts[1])?, parse(parts[2])?))
}

fn parse_stages(s: &str) -> Result<Vec<StagePlan>> {
    let mut out = Vec::new();
    for item in s.split(',') {
        let item = item.trim();
        if item.is_empty() {
            continue;
        }
        let (shape_part, steps_part) = item
            .split_once(':')
            .ok_or_else(|| Error::Config(format!("bad stage `{item}`, want TxHxW[+flow]:steps")))?;
        let (shape_str, use_predictnet) = match shape_part.strip_suffix("+flow") {
            Some(rest) => (rest, true),
            None => (shape_part, false),
        };
        let (frames, height, width) = parse_shape(shape_str)?;
        let steps = steps_part
            .parse::<usize>()
            .map_err(|_| Error::Config(format!("bad step count in stage `{item}`")))?;
        out.push(StagePlan {
            frames,
            height,
            width,
            steps,
            use_predictnet,
        });
    }
    if out.is_empty() {
        return Err(Error::Config("train.stages is empty".into()));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    // numerics
    pub check_finite: bool,
    // schedule
    pub sched_family: BaseFamily,
    pub sched_n: usize,
    pub beta_lo: f64,
    pub beta_hi: f64,
    pub rescale_form: RescaleForm,
    pub reference_d: usize,
    // diffusion
    pub epsilon_param: bool, // epsilon vs v prediction
    // architecture
    pub width0: usize,
    pub width1: usize,
    pub emb_dim: usize,
    pub time_dim: usize,
    pub groups: usize,
    // training
    pub gamma: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch: usize,
    pub cond_drop_prob: f64,
    pub seed: u64,
    pub stages: Vec<StagePlan>,
    pub ckpt_every: usize,
    // sampling
    pub sample_steps: usize,
    pub guidance: f64,
    // ablation harness
    pub ablate_steps: usize,
    pub ablate_shape: (usize, usize, usize),
    pub ablate_eval_per_dir: usize,
    pub ablate_data_n: usize,
    pub ablate_variants: Vec<AblationVariant>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            check_finite: false,
            sched_family: BaseFamily::ScaledLinearBeta,
            sched_n: 1000,
            beta_lo: 0.00085,
            beta_hi: 0.012,
            rescale_form: RescaleForm::AlphaBar,
            reference_d: 256,
            epsilon_param: true,
            width0: 32,
            width1: 64,
            emb_dim: 32,
            time_dim: 64,
            groups: 8,
            gamma: 1.0,
            lr: 1e-3,
            weight_decay: 1e-4,
            batch: 2,
            cond_drop_prob: 0.1,
            seed: 0,
            stages: parse_stages("8x16x16:1500,8x24x24:1000,8x24x24+flow:500")
                .expect("default stages parse"),
            ckpt_every: 0,
            sample_steps: 20,
            guidance: 1.0,
            ablate_steps: 1500,
            ablate_shape: (8, 16, 16),
            ablate_eval_per_dir: 5,
            ablate_data_n: 64,
            ablate_variants: AblationVariant::ALL.to_vec(),
        }
    }
}

impl RunConfig {
    /// Apply one `key = value` assignment. Unknown keys are hard errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: core::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse::<T>()
                .map_err(|_| Error::Config(format!("bad value `{v}` for key `{key}`")))
        }
        match key {
            "numerics.check_finite" => self.check_finite = num(key, value)?,
            "schedule.family" => self.sched_family = BaseFamily::parse(value)?,
            "schedule.n" => self.sched_n = num(key, value)?,
            "schedule.beta_lo" => self.beta_lo = num(key, value)?,
            "schedule.beta_hi" => self.beta_hi = num(key, value)?,
            "schedule.rescale_form" => self.rescale_form = RescaleForm::parse(value)?,
            "schedule.reference_d" => self.reference_d = num(key, value)?,
            "diffusion.param" => {
                self.epsilon_param = match value {
                    "epsilon" => true,
                    "v" => false,
                    other => {
                        return Err(Error::Config(format!(
                            "diffusion.param must be `epsilon` or `v`, got `{other}`"
                        )))
                    }
                }
            }
            "arch.width0" => self.width0 = num(key, value)?,
            "arch.width1" => self.width1 = num(key, value)?,
            "arch.emb_dim" => self.emb_dim = num(key, value)?,
            "arch.time_dim" => self.time_dim = num(key, value)?,
            "arch.groups" => self.groups = num(key, value)?,
            "train.gamma" => self.gamma = num(key, value)?,
            "train.lr" => self.lr = num(key, value)?,
            "train.weight_decay" => self.weight_decay = num(key, value)?,
            "train.batch" => self.batch = num(key, value)?,
            "train.cond_drop_prob" => self.cond_drop_prob = num(key, value)?,
            "train.seed" => self.seed = num(key, value)?,
            "train.stages" => self.stages = parse_stages(value)?,
            "train.ckpt_every" => self.ckpt_every = num(key, value)?,
            "sample.steps" => self.sample_steps = num(key, value)?,
            "sample.guidance" => self.guidance = num(key, value)?,
            "ablate.steps" => self.ablate_steps = num(key, value)?,
            "ablate.shape" => self.ablate_shape = parse_shape(value)?,
            "ablate.eval_per_dir" => self.ablate_eval_per_dir = num(key, value)?,
            "ablate.data_n" => self.ablate_data_n = num(key, value)?,
            "ablate.variants" => {
                self.ablate_variants = if value == "all" {
                    AblationVariant::ALL.to_vec()
                } else {
                    value
                        .split(',')
                        .map(|v| AblationVariant::parse(v.trim()))
                        .collect::<Result<Vec<_>>>()?
                }
            }
            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Parse a whole config file body on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply(text)?;
        Ok(cfg)
    }

    /// Apply config text on top of the current values.
    pub fn apply(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(pos) => &raw[..pos],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key = value", lineno + 1))
            })?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// Canonical fully-resolved rendering; parsing it back reproduces `self`.
    pub fn render(&self) -> String {
        let stages = self
            .stages
            .iter()
            .map(|s| s.render())
            .collect::<Vec<_>>()
            .join(",");
        format!(
            "numerics.check_finite = {}\n\
             schedule.family = {}\n\
             schedule.n = {}\n\
             schedule.beta_lo = {}\n\
             schedule.beta_hi = {}\n\
             schedule.rescale_form = {}\n\
             schedule.reference_d = {}\n\
             diffusion.param = {}\n\
             arch.width0 = {}\n\
             arch.width1 = {}\n\
             arch.emb_dim = {}\n\
             arch.time_dim = {}\n\
             arch.groups = {}\n\
             train.gamma = {}\n\
             train.lr = {}\n\
             train.weight_decay = {}\n\
             train.batch = {}\n\
             train.cond_drop_prob = {}\n\
             train.seed = {}\n\
             train.stages = {}\n\
             train.ckpt_every = {}\n\
             sample.steps = {}\n\
             sample.guidance = {}\n\
             ablate.steps = {}\n\
             ablate.shape = {}x{}x{}\n\
             ablate.eval_per_dir = {}\n\
             ablate.data_n = {}\n\
             ablate.variants = {}\n",
            self.check_finite,
            self.sched_family.as_str(),
            self.sched_n,
            self.beta_lo,
            self.beta_hi,
            self.rescale_form.as_str(),
            self.reference_d,
            if self.epsilon_param { "epsilon" } else { "v" },
            self.width0,
            self.width1,
            self.emb_dim,
            self.time_dim,
            self.groups,
            self.gamma,
            self.lr,
            self.weight_decay,
            self.batch,
            self.cond_drop_prob,
            self.seed,
            stages,
            self.ckpt_every,
            self.sample_steps,
            self.guidance,
            self.ablate_steps,
            self.ablate_shape.0,
            self.ablate_shape.1,
            self.ablate_shape.2,
            self.ablate_eval_per_dir,
            self.ablate_data_n,
            self.ablate_variants
                .iter()
                .map(|v| v.name())
                .collect::<Vec<_>>()
                .join(","),
        )
    }

    /// Short hex fingerprint of the resolved config.
    pub fn fingerprint(&self) -> String {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        for b in self.render().bytes() {
            h = hash64(h, b as u64);
        }
        format!("{h:016x}")
    }
}
