//! `sarlab`: train, refine, sample, evaluate and ablate scale-wise autoregressive generators.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};

use sarlab::workbench::commands::{self, read_config, SampleOptions};
use sarlab::workbench::{Checkpoint, ExperimentConfig};

#[derive(Parser)]
#[command(
    name = "sarlab",
    version,
    about = "Scale-wise autoregressive generation lab"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from scratch with the `train.*` scheme (teacher forcing or a naive student-forcing schedule).
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; defaults to `run.output`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Continue from a checkpoint with the `refine.*` scheme (refinement by default).
    Refine {
        #[arg(long = "from")]
        from: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate images and token dumps for one class.
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        label: usize,
        #[arg(long, default_value_t = 8)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
        /// Overrides `sample.seed`.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the guidance scale (`off` disables).
        #[arg(long)]
        cfg: Option<String>,
        #[arg(long)]
        argmax: bool,
    },
    /// FD/precision/recall of a checkpoint against a held-out synthetic set.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// Config file whose `dataset.*` section defines the evaluation set; defaults to the checkpoint's.
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Continue a checkpoint under TF, full, alternate, interleave and hybrid(N-1) schedules and evaluate each.
    AblateSf {
        #[arg(long)]
        ckpt: PathBuf,
        /// Overrides for the continuation (`refine.*` keys); defaults to the checkpoint's config.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Refine a checkpoint with argmax, stochastic and guided rollout sampling and evaluate each.
    AblateSampling {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Emit SVG plots and summary tables for every CSV in a run directory.
    Report {
        #[arg(long)]
        dir: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e)
            if matches!(
                e.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            ) =>
        {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg
                .lines()
                .next()
                .unwrap_or("")
                .trim_start_matches("error: ");
            eprintln!("{}", e.render());
            eprintln!("sarlab-error kind=usage message={first:?}");
            return ExitCode::from(2);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = e
                .chain()
                .find_map(|c| c.downcast_ref::<sarlab::Error>())
                .map_or("internal", |s| s.kind());
            eprintln!("sarlab-error kind={kind} message={:?}", e.to_string());
            ExitCode::from(if kind == "usage" || kind == "config" {
                2
            } else {
                1
            })
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train { config, out } => {
            let config = read_config(&config)?;
            let dir = out.unwrap_or_else(|| config.output.clone());
            commands::train(&config, &dir)?;
        }
        Command::Refine { from, config, out } => {
            let config = read_config(&config)?;
            let dir = out.unwrap_or_else(|| config.output.clone());
            commands::refine(&from, &config, &dir)?;
        }
        Command::Sample {
            ckpt,
            label,
            n,
            out,
            seed,
            cfg,
            argmax,
        } => {
            let cfg = cfg.as_deref().map(commands::parse_cfg).transpose()?;
            commands::sample(&ckpt, label, n, &SampleOptions { seed, cfg, argmax }, &out)?;
        }
        Command::Eval { ckpt, dataset, out } => {
            let dataset = dataset.as_deref().map(read_config).transpose()?;
            commands::eval(&ckpt, dataset.as_ref(), &out)?;
        }
        Command::AblateSf { ckpt, config, out } => {
            let (overrides, dir) = ablation_args(&ckpt, config.as_deref(), out, "ablate_sf")?;
            commands::ablate_sf(&ckpt, overrides.as_ref(), &dir)?;
        }
        Command::AblateSampling { ckpt, config, out } => {
            let (overrides, dir) = ablation_args(&ckpt, config.as_deref(), out, "ablate_sampling")?;
            commands::ablate_sampling(&ckpt, overrides.as_ref(), &dir)?;
        }
        Command::Report { dir } => commands::report(&dir)?,
    }
    Ok(())
}

/// Override config and output directory; the directory defaults to
/// `<run.output>/<name>` of the overrides, else of the checkpoint.
fn ablation_args(
    ckpt: &Path,
    config: Option<&Path>,
    out: Option<PathBuf>,
    name: &str,
) -> Result<(Option<ExperimentConfig>, PathBuf)> {
    let overrides = config.map(read_config).transpose()?;
    let dir = match (out, &overrides) {
        (Some(d), _) => d,
        (None, Some(c)) => c.output.join(name),
        (None, None) => Checkpoint::<f32>::load(ckpt)?.config.output.join(name),
    };
    Ok((overrides, dir))
}
