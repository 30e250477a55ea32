//! Checkpoint directories.
//!
//! Layout:
//!
//! ```text
//! ckpt/
//!   arch.txt          architecture descriptor (key=value)
//!   config.txt        fully-resolved run config echo
//!   schedule.txt      schedule construction recipe (key=value header)
//!   schedule.vtf      the alpha-bar table as f32 (advisory; the recipe
//!                     re-derives the table in f64 on load)
//!   params/<path>.vtf one tensor per parameter, nested by the `/` in names
//!   state/step.txt    optimizer counters and RNG state
//!   state/m/..., state/v/...  AdamW moments (training checkpoints only)
//! ```
//!
//! PredictNet parameters live under `params/predictnet/...` and are simply
//! absent from inference-only checkpoints.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ti2v_core::denoiser::{ArchDescriptor, ParamSet};
use ti2v_core::diffusion::TrainState;
use ti2v_core::rng::Rng;
use ti2v_core::schedule::{BaseFamily, NoiseSchedule, RescaleForm};
use ti2v_core::Tensor;

use crate::error::{Error, Result};
use crate::vtf;

fn parse_kv(text: &str) -> Vec<(String, String)> {
    let mut out = Vec::new();
    for token in text.split_whitespace() {
        if let Some((k, v)) = token.split_once('=') {
            out.push((k.to_string(), v.to_string()));
        }
    }
    out
}

pub fn save_schedule(sched: &NoiseSchedule, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::File::create(dir.join("schedule.txt"))?.write_all(sched.header().as_bytes())?;
    let table = Tensor::new(vec![sched.len()], sched.table_f32())?;
    vtf::save(&table, &dir.join("schedule.vtf"))
}

pub fn load_schedule(dir: &Path) -> Result<NoiseSchedule> {
    let text = fs::read_to_string(dir.join("schedule.txt"))
        .map_err(|e| Error::data(format!("missing schedule.txt in {}: {e}", dir.display())))?;
    let kv = parse_kv(&text);
    let get = |key: &str| -> Result<&str> {
        kv.iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| Error::data(format!("schedule.txt missing `{key}`")))
    };
    let family = BaseFamily::parse(get("family")?)?;
    let n: usize = get("n")?
        .parse()
        .map_err(|_| Error::data("bad schedule n"))?;
    let beta_lo: f64 = get("beta_lo")?
        .parse()
        .map_err(|_| Error::data("bad beta_lo"))?;
    let beta_hi: f64 = get("beta_hi")?
        .parse()
        .map_err(|_| Error::data("bad beta_hi"))?;
    let shift = match kv.iter().find(|(k, _)| k == "s") {
        Some((_, s)) => {
            let s: f64 = s.parse().map_err(|_| Error::data("bad shift s"))?;
            let shape = kv
                .iter()
                .find(|(k, _)| k == "shift_shape")
                .and_then(|(_, v)| ti2v_core::config::parse_shape(v).ok());
            let d: usize = get("reference_d")?
                .parse()
                .map_err(|_| Error::data("bad reference_d"))?;
            Some((s, shape, d))
        }
        None => None,
    };
    let rescaled = match get("rescaled")? {
        "none" => None,
        form => Some(RescaleForm::parse(form)?),
    };
    let sched = NoiseSchedule::from_recipe(n, family, beta_lo, beta_hi, shift, rescaled)?;

    // sanity-check the re-derived table against the stored f32 copy
    let stored = vtf::load(&dir.join("schedule.vtf"))?;
    if stored.numel() != n {
        return Err(Error::data("schedule.vtf length mismatch"));
    }
    for (t, &s) in stored.data().iter().enumerate() {
        let re = sched.alpha_bar(t + 1)? as f32;
        if (re - s).abs() > 1e-6 {
            return Err(Error::data(format!(
                "schedule.vtf disagrees with recipe at t={} ({re} vs {s})",
                t + 1
            )));
        }
    }
    Ok(sched)
}

pub fn save_params(params: &ParamSet<f32>, dir: &Path) -> Result<()> {
    let base = dir.join("params");
    fs::create_dir_all(&base)?;
    for (name, tensor) in params.iter() {
        vtf::save(tensor, &base.join(format!("{name}.vtf")))?;
    }
    Ok(())
}

fn collect_vtf(dir: &Path, prefix: &str, out: &mut Vec<(String, PathBuf)>) -> Result<()> {
    let mut entries: Vec<_> = fs::read_dir(dir)?.collect::<std::io::Result<_>>()?;
    entries.sort_by_key(|e| e.file_name());
    for entry in entries {
        let path = entry.path();
        let name = entry.file_name().to_string_lossy().to_string();
        if path.is_dir() {
            collect_vtf(&path, &format!("{prefix}{name}/"), out)?;
        } else if let Some(stem) = name.strip_suffix(".vtf") {
            out.push((format!("{prefix}{stem}"), path));
        }
    }
    Ok(())
}

pub fn load_params(dir: &Path) -> Result<ParamSet<f32>> {
    let base = dir.join("params");
    if !base.is_dir() {
        return Err(Error::data(format!(
            "{} has no params/ directory",
            dir.display()
        )));
    }
    let mut files = Vec::new();
    collect_vtf(&base, "", &mut files)?;
    if files.is_empty() {
        return Err(Error::data(format!("{} holds no tensors", base.display())));
    }
    let mut set = ParamSet::new();
    for (name, path) in files {
        set.insert(&name, vtf::load(&path)?);
    }
    Ok(set)
}

pub fn save_arch(desc: &ArchDescriptor, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::File::create(dir.join("arch.txt"))?.write_all(desc.render().as_bytes())?;
    Ok(())
}

pub fn load_arch(dir: &Path) -> Result<ArchDescriptor> {
    let text = fs::read_to_string(dir.join("arch.txt"))
        .map_err(|e| Error::data(format!("missing arch.txt in {}: {e}", dir.display())))?;
    ArchDescriptor::parse(&text).map_err(Error::from)
}

pub fn save_state(state: &TrainState<f32>, dir: &Path) -> Result<()> {
    let base = dir.join("state");
    fs::create_dir_all(&base)?;
    let mut f = fs::File::create(base.join("step.txt"))?;
    writeln!(f, "step={}", state.step)?;
    writeln!(f, "stage={}", state.stage)?;
    writeln!(f, "step_in_stage={}", state.step_in_stage)?;
    writeln!(f, "rng={:016x}", state.rng.state())?;
    for (prefix, moments) in [("m", &state.moment1), ("v", &state.moment2)] {
        for (name, tensor) in moments.iter() {
            vtf::save(tensor, &base.join(prefix).join(format!("{name}.vtf")))?;
        }
    }
    Ok(())
}

pub fn load_state(dir: &Path) -> Result<TrainState<f32>> {
    let base = dir.join("state");
    let text = fs::read_to_string(base.join("step.txt"))
        .map_err(|e| Error::data(format!("missing state in {}: {e}", dir.display())))?;
    let kv = parse_kv(&text);
    let get = |key: &str| -> Result<&str> {
        kv.iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| Error::data(format!("state missing `{key}`")))
    };
    let mut state = TrainState::new(0);
    state.step = get("step")?.parse().map_err(|_| Error::data("bad step"))?;
    state.stage = get("stage")?
        .parse()
        .map_err(|_| Error::data("bad stage"))?;
    state.step_in_stage = get("step_in_stage")?
        .parse()
        .map_err(|_| Error::data("bad step_in_stage"))?;
    let rng_state =
        u64::from_str_radix(get("rng")?, 16).map_err(|_| Error::data("bad rng state"))?;
    state.rng = Rng::from_state(rng_state);
    for (prefix, moments) in [("m", &mut state.moment1), ("v", &mut state.moment2)] {
        let mdir = base.join(prefix);
        if mdir.is_dir() {
            let mut files = Vec::new();
            collect_vtf(&mdir, "", &mut files)?;
            for (name, path) in files {
                moments.insert(&name, vtf::load(&path)?);
            }
        }
    }
    Ok(state)
}

/// Write a full training checkpoint.
pub fn save_full(
    dir: &Path,
    desc: &ArchDescriptor,
    params: &ParamSet<f32>,
    state: &TrainState<f32>,
    sched: &NoiseSchedule,
    config_echo: &str,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    save_arch(desc, dir)?;
    save_params(params, dir)?;
    save_state(state, dir)?;
    save_schedule(sched, dir)?;
    fs::File::create(dir.join("config.txt"))?.write_all(config_echo.as_bytes())?;
    Ok(())
}
