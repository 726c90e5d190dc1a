use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use oatflow_core::bench::{
    eval_sources, eval_trajectory, metrics_from_trajectory, reference_w2, run_benchmark, BenchmarkReport, Progress,
    TaskSpec, EVAL_STEPS,
};
use oatflow_core::flows::Phase1Trainer;
use oatflow_core::model::VelocityField;
use oatflow_core::oatfm::RefineTrainer;
use oatflow_core::ode::{integrate_dopri5, integrate_rk4, write_trajectory_csv, VectorField};
use serde::{Deserialize, Serialize};

use crate::config::{Integrator, RunConfig};
use crate::error::CliError;

pub const PHASE1_CHECKPOINT: &str = "phase1.ckpt";
pub const REFINED_CHECKPOINT: &str = "refined.ckpt";
pub const TRAIN_LOG: &str = "train_log.jsonl";
pub const REFINE_LOG: &str = "refine_log.jsonl";
pub const CONFIG_SNAPSHOT: &str = "config.toml";
pub const METRICS_FILE: &str = "metrics.json";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_CSV: &str = "report.csv";

/// Dimension of every benchmark task.
const TASK_DIM: usize = 2;

fn prepare_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(format!("creating {}", dir.display()), e))
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::io(format!("creating {}", path.display()), e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(|e| CliError::io(format!("writing {}", path.display()), e))
}

fn snapshot(cfg: &RunConfig) -> Result<(), CliError> {
    write_file(&cfg.output.dir.join(CONFIG_SNAPSHOT), cfg.to_toml()?.as_bytes())
}

fn json_line(out: &mut impl Write, value: &impl Serialize) -> oatflow_core::Result<()> {
    let line = serde_json::to_string(value).expect("log records serialize");
    writeln!(out, "{line}")?;
    Ok(())
}

/// Loads a checkpoint and checks it against the task dimension.
pub fn load_checkpoint(path: &Path) -> Result<VelocityField, CliError> {
    let field = VelocityField::load(path).map_err(|e| match e {
        oatflow_core::Error::Checkpoint(msg) => CliError::Checkpoint(format!("{}: {msg}", path.display())),
        other => other.into(),
    })?;
    if field.dim() != TASK_DIM {
        return Err(CliError::Checkpoint(format!(
            "{} has dimension {}, the task needs {TASK_DIM}",
            path.display(),
            field.dim()
        )));
    }
    Ok(field)
}

/// Phase-1 training. Writes the checkpoint, a JSON-lines log and a config snapshot.
pub fn cmd_train(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    let dir = &cfg.output.dir;
    prepare_dir(dir)?;
    snapshot(cfg)?;
    let task = cfg.data.task;
    let mut trainer = Phase1Trainer::new(cfg.phase1.clone(), TASK_DIM)?;
    let mut log = create(&dir.join(TRAIN_LOG))?;
    trainer.run(cfg.phase1.n_batches, &task.source, &task.target, |r| {
        json_line(&mut log, r)
    })?;
    log.flush()
        .map_err(|e| CliError::io(format!("writing {}", dir.join(TRAIN_LOG).display()), e))?;
    let path = dir.join(PHASE1_CHECKPOINT);
    trainer.field().save(&path)?;
    Ok(path)
}

/// Refinement of a phase-1 checkpoint. Writes the refined checkpoint and its log.
pub fn cmd_refine(cfg: &RunConfig, checkpoint: &Path) -> Result<PathBuf, CliError> {
    let phase1 = load_checkpoint(checkpoint)?;
    let dir = &cfg.output.dir;
    prepare_dir(dir)?;
    snapshot(cfg)?;
    let task = cfg.data.task;
    let mut trainer = RefineTrainer::new(&phase1, cfg.refine.clone())?;
    let mut log = create(&dir.join(REFINE_LOG))?;
    trainer.run(cfg.refine.n_batches, &task.source, &task.target, |r| {
        json_line(&mut log, r)
    })?;
    log.flush()
        .map_err(|e| CliError::io(format!("writing {}", dir.join(REFINE_LOG).display()), e))?;
    let path = dir.join(REFINED_CHECKPOINT);
    trainer.into_online().save(&path)?;
    Ok(path)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub task: TaskSpec,
    pub integrator: Integrator,
    pub w2: f64,
    pub npe: f64,
    pub pe: f64,
    pub straightness: f64,
    /// Field evaluations of the adaptive solve.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nfe: Option<usize>,
    pub reference_w2: f64,
    pub n_test: usize,
    pub seed: u64,
}

/// Evaluates a checkpoint on the configured task and writes `metrics.json`.
pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path) -> Result<EvalReport, CliError> {
    let field = load_checkpoint(checkpoint)?;
    let (task, ev) = (cfg.data.task, &cfg.eval);
    let (traj, nfe) = match ev.integrator {
        Integrator::Rk4 => (eval_trajectory(&field, &task, ev.n_test, ev.seed)?, None),
        Integrator::Dopri5 => {
            let grid: Vec<f64> = (0..=EVAL_STEPS).map(|k| k as f64 / EVAL_STEPS as f64).collect();
            let x0 = eval_sources(&task, ev.n_test, ev.seed);
            let mut traj = integrate_dopri5(&field, &x0, ev.atol, ev.rtol, &grid)?;
            // Path energy needs the field along the reported states.
            let vel = traj
                .states
                .iter()
                .zip(&traj.times)
                .map(|(x, &t)| field.eval(x, t))
                .collect::<oatflow_core::Result<Vec<_>>>()?;
            traj.velocities = Some(vel);
            let nfe = traj.nfe;
            (traj, Some(nfe))
        }
    };
    let reference = reference_w2(&task, ev.reference_n, ev.seed)?;
    let m = metrics_from_trajectory(&traj, &task, ev.seed, reference)?;
    let report = EvalReport {
        task,
        integrator: ev.integrator,
        w2: m.w2,
        npe: m.npe,
        pe: m.pe,
        straightness: m.straightness,
        nfe,
        reference_w2: reference,
        n_test: m.n_test,
        seed: m.seed,
    };
    prepare_dir(&cfg.output.dir)?;
    let mut text = serde_json::to_string_pretty(&report).expect("metrics serialize");
    text.push('\n');
    write_file(&cfg.output.dir.join(METRICS_FILE), text.as_bytes())?;
    Ok(report)
}

/// Runs the benchmark and writes `report.json` and `report.csv`.
pub fn cmd_bench(cfg: &RunConfig, progress: Option<Progress<'_>>) -> Result<BenchmarkReport, CliError> {
    let dir = &cfg.output.dir;
    prepare_dir(dir)?;
    snapshot(cfg)?;
    let report = run_benchmark(&cfg.bench, &cfg.phase1, &cfg.refine, progress)?;
    let mut text = serde_json::to_string_pretty(&report).expect("report serializes");
    text.push('\n');
    write_file(&dir.join(REPORT_JSON), text.as_bytes())?;
    let csv_path = dir.join(REPORT_CSV);
    let mut csv = create(&csv_path)?;
    report.write_csv(&mut csv)?;
    csv.flush()
        .map_err(|e| CliError::io(format!("writing {}", csv_path.display()), e))?;
    Ok(report)
}

/// RK4 trajectories of `n` seeded source samples, written as CSV to `out`.
pub fn cmd_export_traj(checkpoint: &Path, task: &TaskSpec, n: usize, seed: u64, out: &Path) -> Result<(), CliError> {
    let field = load_checkpoint(checkpoint)?;
    if n == 0 {
        return Err(CliError::Config("--n must be at least 1".into()));
    }
    let traj = integrate_rk4(&field, &eval_sources(task, n, seed), EVAL_STEPS)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        prepare_dir(parent)?;
    }
    let mut w = create(out)?;
    write_trajectory_csv(&traj, &mut w)?;
    w.flush()
        .map_err(|e| CliError::io(format!("writing {}", out.display()), e))
}
