use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use oatflow_cli::commands::{PHASE1_CHECKPOINT, REFINED_CHECKPOINT};
use oatflow_cli::{cmd_bench, cmd_eval, cmd_export_traj, cmd_refine, cmd_train, CliError, RunConfig};
use oatflow_core::bench::{TaskSpec, TrialResult};

#[derive(Parser)]
#[command(
    name = "oatflow",
    version,
    about = "Flow matching with optimal acceleration transport refinement"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory, overriding `[output] dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run seed, overriding the config and OATFLOW_SEED.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Phase-1 flow-matching training.
    Train(Common),
    /// Refine a phase-1 checkpoint.
    Refine {
        #[command(flatten)]
        common: Common,
        /// Phase-1 checkpoint; defaults to phase1.ckpt in the output directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// W2², NPE and straightness of a checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to evaluate; defaults to refined.ckpt in the output directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Multi-trial benchmark over tasks and methods.
    Bench {
        #[command(flatten)]
        common: Common,
        /// Parallel worker threads, overriding `[bench] workers`.
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Write RK4 trajectories of a checkpoint as CSV.
    ExportTraj {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Task such as `8gs->moons`; defaults to `[data] task`.
        #[arg(long)]
        task: Option<TaskSpec>,
        /// Number of trajectories.
        #[arg(long, default_value_t = 256)]
        n: usize,
        #[arg(long)]
        seed: Option<u64>,
        /// CSV file to write.
        #[arg(long)]
        out: PathBuf,
    },
}

fn load(config: Option<&Path>, out: Option<PathBuf>, seed: Option<u64>) -> Result<RunConfig, CliError> {
    let mut cfg = match config {
        Some(p) => RunConfig::load(p)?,
        None => {
            let mut cfg = RunConfig::from_toml("", Path::new("."))?;
            if let Ok(v) = std::env::var(oatflow_cli::SEED_ENV) {
                let s = v.trim().parse().map_err(|_| {
                    CliError::Config(format!("{}={v:?} is not an unsigned integer", oatflow_cli::SEED_ENV))
                })?;
                cfg.set_seed(s);
            }
            cfg
        }
    };
    if let Some(dir) = out {
        cfg.set_output_dir(dir);
    }
    if let Some(s) = seed {
        cfg.set_seed(s);
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Writes one line to stdout. A closed pipe (e.g. `| head`) is not an error.
fn emit(line: &str) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{line}");
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train(c) => {
            let cfg = load(c.config.as_deref(), c.out, c.seed)?;
            let path = cmd_train(&cfg)?;
            emit(&path.display().to_string());
        }
        Command::Refine { common: c, checkpoint } => {
            let cfg = load(c.config.as_deref(), c.out, c.seed)?;
            let ckpt = checkpoint.unwrap_or_else(|| cfg.output.dir.join(PHASE1_CHECKPOINT));
            let path = cmd_refine(&cfg, &ckpt)?;
            emit(&path.display().to_string());
        }
        Command::Eval { common: c, checkpoint } => {
            let cfg = load(c.config.as_deref(), c.out, c.seed)?;
            let ckpt = checkpoint.unwrap_or_else(|| cfg.output.dir.join(REFINED_CHECKPOINT));
            let report = cmd_eval(&cfg, &ckpt)?;
            emit(&serde_json::to_string_pretty(&report).expect("metrics serialize"));
        }
        Command::Bench { common: c, workers } => {
            let mut cfg = load(c.config.as_deref(), c.out, c.seed)?;
            if let Some(w) = workers {
                cfg.bench.workers = w.max(1);
            }
            let progress = |rs: &[TrialResult]| {
                for r in rs {
                    eprintln!(
                        "{} {} trial {} {}: w2 {:.4} npe {:.4} straightness {:.4}",
                        r.task,
                        r.method,
                        r.trial,
                        r.phase.name(),
                        r.metrics.w2,
                        r.metrics.npe,
                        r.metrics.straightness
                    );
                }
            };
            cmd_bench(&cfg, Some(&progress))?;
            emit(&cfg.output.dir.display().to_string());
        }
        Command::ExportTraj {
            config,
            checkpoint,
            task,
            n,
            seed,
            out,
        } => {
            let cfg = load(config.as_deref(), None, seed)?;
            cmd_export_traj(&checkpoint, &task.unwrap_or(cfg.data.task), n, cfg.eval.seed, &out)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("oatflow: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
