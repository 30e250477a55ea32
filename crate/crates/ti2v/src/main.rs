//! `ti2v` — the whole pipeline behind one executable: synthetic data
//! generation, multi-stage training, sampling (text-to-video from a rendered
//! first frame, or image-to-video from a supplied one), schedule export,
//! evaluation, and the ablation harness.
//!
//! Exit codes: 0 success, 1 usage error, 2 data/contract error.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ti2v::{ablate, dataset, evalio, pgm, sampling, schedule_csv, trainer, vtf, Error};
use ti2v_core::config::{parse_shape, RunConfig};
use ti2v_core::schedule::NoiseSchedule;

#[derive(Parser)]
#[command(name = "ti2v", version, about = "toy factorized text/image-to-video diffusion")]
struct Cli {
    /// Worker threads where parallelism is allowed (1 keeps everything
    /// bitwise deterministic; outputs do not depend on this).
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic moving-shape dataset with analytic flow.
    GenData(GenDataArgs),
    /// Run the multi-stage training plan from a config file.
    Train(TrainArgs),
    /// Sample a video from a checkpoint.
    Sample(SampleArgs),
    /// Export the log-SNR curve of a noise schedule as CSV.
    Schedule(ScheduleArgs),
    /// Evaluate a checkpoint against a dataset.
    Eval(EvalArgs),
    /// Train and score all ablation variants.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// TxHxW
    #[arg(long)]
    shape: String,
    #[arg(long)]
    out: PathBuf,
    /// Also write per-frame 8-bit PGM dumps.
    #[arg(long, default_value_t = false)]
    dump_pgm: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Dataset root holding one TxHxW subdirectory per stage shape.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Continue from a training checkpoint directory.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    prompt_spatial: String,
    #[arg(long)]
    prompt_motion: String,
    /// Animate this VTF image instead of rendering one from the prompt.
    #[arg(long)]
    first_frame: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Reverse-process steps (defaults to the checkpoint config).
    #[arg(long)]
    steps: Option<usize>,
    /// Guidance scale (defaults to the checkpoint config).
    #[arg(long)]
    guidance: Option<f64>,
    /// Frame count (defaults to the trained shape).
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    /// Also dump the generated frames as PGM files into this directory.
    #[arg(long)]
    dump_pgm: Option<PathBuf>,
}

#[derive(Args)]
struct ScheduleArgs {
    /// TxHxW used for the SNR shift.
    #[arg(long)]
    shape: String,
    #[arg(long, default_value_t = false)]
    no_shift: bool,
    #[arg(long, default_value_t = false)]
    no_rescale: bool,
    /// Optional config file for the base schedule parameters.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    guidance: Option<f64>,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn load_config(path: &PathBuf) -> ti2v::Result<RunConfig> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::usage(format!("cannot read config {}: {e}", path.display())))?;
    RunConfig::parse(&text).map_err(|e| Error::usage(e.to_string()))
}

fn run(cli: Cli) -> ti2v::Result<()> {
    match cli.cmd {
        Cmd::GenData(a) => {
            let (t, h, w) = parse_shape(&a.shape).map_err(|e| Error::usage(e.to_string()))?;
            let manifest =
                dataset::make_dataset(a.n, a.seed, t, h, w, &a.out, cli.threads, a.dump_pgm)?;
            // echo the generation parameters next to the data
            fs::write(
                a.out.join("gen.txt"),
                format!("n = {}\nseed = {}\nshape = {}\n", a.n, a.seed, a.shape),
            )?;
            eprintln!("wrote {} samples, manifest at {}", a.n, manifest.display());
            Ok(())
        }
        Cmd::Train(a) => {
            let cfg = load_config(&a.config)?;
            let outcome = trainer::run_stages(&cfg, &a.data, &a.out, a.resume.as_deref())?;
            eprintln!(
                "trained {} steps; final checkpoint at {}",
                outcome.steps_run,
                outcome.final_checkpoint.display()
            );
            Ok(())
        }
        Cmd::Sample(a) => {
            let loaded = sampling::load(&a.ckpt)?;
            let first_frame = match &a.first_frame {
                Some(path) => Some(vtf::load(path)?),
                None => None,
            };
            let result = sampling::sample_prompt(
                &loaded,
                &sampling::PromptRequest {
                    spatial: &a.prompt_spatial,
                    motion: &a.prompt_motion,
                    first_frame,
                    frames: a.frames,
                    seed: a.seed,
                    steps: a.steps.unwrap_or(loaded.config.sample_steps),
                    guidance: a.guidance.unwrap_or(loaded.config.guidance),
                },
            )?;
            for word in &result.unknown_words {
                eprintln!("warning: unknown prompt word `{word}` mapped to <unk>");
            }
            vtf::save(&result.outcome.video, &a.out)?;
            fs::write(
                a.out.with_extension("config.txt"),
                format!(
                    "{}sample.seed = {}\nsample.prompt_spatial = {}\nsample.prompt_motion = {}\n",
                    loaded.config.render(),
                    a.seed,
                    a.prompt_spatial,
                    a.prompt_motion
                ),
            )?;
            if let Some(dir) = &a.dump_pgm {
                pgm::dump_video(&result.outcome.video, dir)?;
            }
            eprintln!(
                "sampled {:?} with {} model evaluations",
                result.outcome.video.shape(),
                result.outcome.model_evals
            );
            Ok(())
        }
        Cmd::Schedule(a) => {
            let (t, h, w) = parse_shape(&a.shape).map_err(|e| Error::usage(e.to_string()))?;
            let cfg = match &a.config {
                Some(path) => load_config(path)?,
                None => RunConfig::default(),
            };
            let mut sched =
                NoiseSchedule::make_base(cfg.sched_n, cfg.sched_family, cfg.beta_lo, cfg.beta_hi)?;
            if !a.no_shift {
                sched = sched.apply_shift_for_shape(t, h, w, cfg.reference_d)?;
            }
            if !a.no_rescale {
                sched = sched.apply_rescale(cfg.rescale_form)?;
            }
            schedule_csv::export_logsnr_csv(&sched, &a.out)?;
            fs::write(a.out.with_extension("config.txt"), cfg.render())?;
            Ok(())
        }
        Cmd::Eval(a) => {
            let loaded = sampling::load(&a.ckpt)?;
            let opts = evalio::EvalOpts {
                seed: a.seed,
                steps: a.steps.unwrap_or(loaded.config.sample_steps),
                guidance: a.guidance.unwrap_or(loaded.config.guidance),
            };
            let (report, files) = evalio::run_eval(&loaded, &a.data, &opts)?;
            evalio::write_report_csv(&report, &files, &a.out)?;
            fs::write(a.out.with_extension("config.txt"), loaded.config.render())?;
            eprintln!(
                "frame_consistency={:.4} motion_agreement={:.4} flow_epe={}",
                report.frame_consistency,
                report.motion_agreement,
                report
                    .flow_epe
                    .map(|e| format!("{e:.4}"))
                    .unwrap_or_else(|| "-".into())
            );
            Ok(())
        }
        Cmd::Ablate(a) => {
            let cfg = load_config(&a.config)?;
            let reports = ablate::run_ablation(&cfg, &a.out)?;
            eprintln!("wrote {} variant rows to {}", reports.len(), a.out.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap's own help/version output is success, not usage error
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
