use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use mumae::cli::ablate::ablate;
use mumae::cli::commands::{
    checkpoint_config, eval_cmd, finetune_cmd, format_report, gen_data, metrics_path, pretrain_cmd, read_config,
    with_no_cross, Init,
};
use mumae::cli::gradcheck::{format_suite, run_suite};
use mumae::cli::{exit_code, Dataset, RunConfig};
use mumae::{Error, Result};

#[derive(Parser)]
#[command(name = "mumae", version, about = "Multimodal masked-autoencoder pretraining and one-shot evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Run config (`key = value` lines); defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset directory.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        /// Overwrite a non-empty output directory.
        #[arg(long)]
        force: bool,
    },
    /// Masked-autoencoder pretraining on meta-train classes.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Output checkpoint; metrics go to `<out>.metrics`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Episodic finetuning on meta-train classes.
    Finetune {
        #[command(flatten)]
        common: Common,
        /// Starting checkpoint; required unless --from-scratch.
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        from_scratch: bool,
        /// Replace cross-attention fusion with concatenation and projection.
        #[arg(long)]
        no_cross: bool,
        /// Overrides finetune.episodes.
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// One-shot evaluation on meta-test classes.
    Eval {
        #[command(flatten)]
        common: Common,
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Metrics file; defaults to `<checkpoint>.eval.metrics`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides eval.episodes.
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Pretrain, finetune and evaluate every cell of a sweep (`table3`,
    /// `table2` or a sweep file).
    Ablate {
        #[command(flatten)]
        common: Common,
        sweep: String,
        #[arg(long)]
        data: PathBuf,
        /// Output directory for the table, metrics and checkpoints.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        /// Overrides eval.episodes.
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Finite-difference check of every differentiable component.
    Gradcheck,
}

/// Explicit config, else the one embedded in `fallback`, else defaults; then
/// the seed override.
fn resolve(common: &Common, fallback: Option<&Path>) -> Result<RunConfig> {
    let mut cfg = match (&common.config, fallback) {
        (Some(p), _) => read_config(p)?,
        (None, Some(ck)) => checkpoint_config(ck)?,
        (None, None) => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::GenData { common, out, force } => {
            let cfg = resolve(&common, None)?;
            let manifest = gen_data(&cfg, &out, force)?;
            let n = manifest.lines().filter(|l| l.starts_with("sample =")).count();
            println!("wrote {n} samples to {}", out.display());
        }
        Command::Pretrain { common, data, out } => {
            let cfg = resolve(&common, None)?;
            let ds = Dataset::open(&data)?;
            let curve = pretrain_cmd(&cfg, &ds, &out)?;
            match (curve.first(), curve.last()) {
                (Some(a), Some(b)) => println!("pretrained {} epochs, loss {a:.4} -> {b:.4}", curve.len()),
                _ => println!("0 epochs: wrote initial parameters"),
            }
            println!("checkpoint {}\nmetrics {}", out.display(), metrics_path(&out).display());
        }
        Command::Finetune {
            common,
            checkpoint,
            data,
            out,
            from_scratch,
            no_cross,
            episodes,
        } => {
            let init = match (from_scratch, checkpoint) {
                (true, None) => Init::Scratch,
                (false, Some(p)) => Init::Checkpoint(p),
                (true, Some(_)) => return Err(Error::Config("--from-scratch takes no checkpoint".into())),
                (false, None) => return Err(Error::Config("finetune needs a checkpoint or --from-scratch".into())),
            };
            let fallback = match &init {
                Init::Checkpoint(p) => Some(p.as_path()),
                Init::Scratch => None,
            };
            let mut cfg = with_no_cross(resolve(&common, fallback)?, no_cross);
            if let Some(e) = episodes {
                cfg.finetune.episodes = e;
            }
            let ds = Dataset::open(&data)?;
            let losses = finetune_cmd(&cfg, &ds, &init, &out)?;
            if let (Some(a), Some(b)) = (losses.first(), losses.last()) {
                println!("finetuned {} episodes, loss {a:.4} -> {b:.4}", losses.len());
            }
            println!("checkpoint {}\nmetrics {}", out.display(), metrics_path(&out).display());
        }
        Command::Eval {
            common,
            checkpoint,
            data,
            out,
            episodes,
        } => {
            let mut cfg = resolve(&common, Some(&checkpoint))?;
            if let Some(e) = episodes {
                cfg.eval_episodes = e;
            }
            cfg.validate()?;
            let ds = Dataset::open(&data)?;
            let out = out.unwrap_or_else(|| {
                let mut s = checkpoint.as_os_str().to_owned();
                s.push(".eval.metrics");
                PathBuf::from(s)
            });
            let report = eval_cmd(&cfg, &ds, &checkpoint, &out)?;
            println!("{}", format_report(&report));
        }
        Command::Ablate {
            common,
            sweep,
            data,
            out,
            workers,
            episodes,
        } => {
            let mut cfg = resolve(&common, None)?;
            if let Some(e) = episodes {
                cfg.eval_episodes = e;
            }
            cfg.validate()?;
            let ds = Dataset::open(&data)?;
            let outcome = ablate(&cfg, &ds, &sweep, &out, workers)?;
            for w in &outcome.warnings {
                eprintln!("warning: {w}");
            }
            for r in &outcome.results {
                if let Err(e) = &r.outcome {
                    eprintln!("cell failed: {e}");
                }
            }
            print!("{}", outcome.table);
            return Ok(outcome.all_ok());
        }
        Command::Gradcheck => {
            // Test fixture: scales one component's analytic gradient.
            let corrupt = std::env::var("MUMAE_GRADCHECK_CORRUPT").ok();
            let reps = run_suite(corrupt.as_deref())?;
            print!("{}", format_suite(&reps));
            let failed: Vec<&str> = reps.iter().filter(|r| !r.report.pass).map(|r| r.name).collect();
            if !failed.is_empty() {
                eprintln!("gradient check failed: {}", failed.join(", "));
                return Ok(false);
            }
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
