use std::io::Write;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::datasets::TaskSpec;
use super::metrics::{evaluate, reference_w2, EvalMetrics, DEFAULT_N_TEST, REFERENCE_N};
use crate::error::{Error, Result};
use crate::flows::{Method, Phase1Config, Phase1Trainer};
use crate::oatfm::{refine, RefineConfig};
use crate::rng::derive_seed;

const STREAM_CELL: u64 = 21;
const STREAM_EVAL: u64 = 22;
const STREAM_REFERENCE: u64 = 23;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub tasks: Vec<TaskSpec>,
    pub methods: Vec<Method>,
    pub trials: usize,
    pub n_test: usize,
    pub reference_n: usize,
    /// Total phase-1 batches of the longer-training control.
    pub control_batches: usize,
    pub workers: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            tasks: TaskSpec::table().to_vec(),
            methods: vec![Method::Icfm],
            trials: 5,
            n_test: DEFAULT_N_TEST,
            reference_n: REFERENCE_N,
            control_batches: 40_000,
            workers: 1,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    /// After the phase-1 batches.
    Phase1,
    /// Phase 1 followed by refinement.
    Refined,
    /// Phase 1 continued to the control batch count.
    Control,
}

impl Phase {
    pub const ALL: [Phase; 3] = [Phase::Phase1, Phase::Refined, Phase::Control];

    pub fn name(self) -> &'static str {
        match self {
            Phase::Phase1 => "phase1",
            Phase::Refined => "refined",
            Phase::Control => "control",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub task: TaskSpec,
    pub method: Method,
    pub trial: usize,
    pub phase: Phase,
    pub metrics: EvalMetrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub task: TaskSpec,
    pub method: Method,
    pub phase: Phase,
    pub n_trials: usize,
    pub w2_mean: f64,
    pub w2_std: Option<f64>,
    pub npe_mean: f64,
    pub npe_std: Option<f64>,
    pub straightness_mean: f64,
    pub straightness_std: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceW2 {
    pub task: TaskSpec,
    pub w2: f64,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub references: Vec<ReferenceW2>,
    pub rows: Vec<ReportRow>,
    pub trials: Vec<TrialResult>,
}

/// Sample mean and, for two or more values, the unbiased standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, Option<f64>) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let std = (xs.len() >= 2).then(|| (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
    (mean, std)
}

impl BenchmarkReport {
    pub fn row(&self, task: &TaskSpec, method: Method, phase: Phase) -> Option<&ReportRow> {
        self.rows
            .iter()
            .find(|r| &r.task == task && r.method == method && r.phase == phase)
    }

    /// Per-trial values of one cell, ordered by trial.
    pub fn trial_metrics(&self, task: &TaskSpec, method: Method, phase: Phase) -> Vec<EvalMetrics> {
        let mut v: Vec<_> = self
            .trials
            .iter()
            .filter(|r| &r.task == task && r.method == method && r.phase == phase)
            .collect();
        v.sort_by_key(|r| r.trial);
        v.into_iter().map(|r| r.metrics).collect()
    }

    /// Long-format CSV: `task,method,phase,metric,mean,std,n_trials`.
    pub fn write_csv(&self, mut out: impl Write) -> Result<()> {
        writeln!(out, "task,method,phase,metric,mean,std,n_trials")?;
        for r in &self.rows {
            for (metric, mean, std) in [
                ("w2", r.w2_mean, r.w2_std),
                ("npe", r.npe_mean, r.npe_std),
                ("straightness", r.straightness_mean, r.straightness_std),
            ] {
                let std = std.map(|s| s.to_string()).unwrap_or_default();
                writeln!(
                    out,
                    "{},{},{},{metric},{mean},{std},{}",
                    r.task,
                    r.method,
                    r.phase.name(),
                    r.n_trials
                )?;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy)]
struct Cell {
    task_idx: usize,
    method_idx: usize,
    trial: usize,
}

fn run_cell(
    cell: Cell,
    config: &BenchConfig,
    phase1: &Phase1Config,
    refine_cfg: &RefineConfig,
    reference: f64,
) -> Result<Vec<TrialResult>> {
    let task = config.tasks[cell.task_idx];
    let method = config.methods[cell.method_idx];
    let seed = derive_seed(
        config.seed,
        &[
            STREAM_CELL,
            cell.task_idx as u64,
            cell.method_idx as u64,
            cell.trial as u64,
        ],
    );
    let eval_seed = derive_seed(config.seed, &[STREAM_EVAL, cell.task_idx as u64, cell.trial as u64]);
    let p1 = Phase1Config {
        method,
        seed,
        ..phase1.clone()
    };
    let rc = RefineConfig {
        seed,
        ..refine_cfg.clone()
    };

    let mut trainer = Phase1Trainer::new(p1.clone(), 2)?;
    trainer.run(p1.n_batches, &task.source, &task.target, |_| Ok(()))?;
    let after_phase1 = trainer.field().clone();
    let refined = refine(&after_phase1, &rc, &task.source, &task.target)?;
    trainer.run(
        config.control_batches - p1.n_batches,
        &task.source,
        &task.target,
        |_| Ok(()),
    )?;
    let control = trainer.into_field();

    [
        (Phase::Phase1, &after_phase1),
        (Phase::Refined, &refined),
        (Phase::Control, &control),
    ]
    .into_iter()
    .map(|(phase, field)| {
        Ok(TrialResult {
            task,
            method,
            trial: cell.trial,
            phase,
            metrics: evaluate(field, &task, config.n_test, eval_seed, reference)?,
        })
    })
    .collect()
}

/// Runs `jobs` on up to `workers` threads; results keep job order and the first
/// error wins.
fn parallel_map<J: Sync, R: Send>(jobs: &[J], workers: usize, f: impl Fn(&J) -> Result<R> + Sync) -> Result<Vec<R>> {
    let next = AtomicUsize::new(0);
    let failed = AtomicBool::new(false);
    let slots: Mutex<Vec<Option<Result<R>>>> = Mutex::new((0..jobs.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..workers.clamp(1, jobs.len().max(1)) {
            s.spawn(|| loop {
                if failed.load(Ordering::Relaxed) {
                    break;
                }
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= jobs.len() {
                    break;
                }
                let r = f(&jobs[i]);
                if r.is_err() {
                    failed.store(true, Ordering::Relaxed);
                }
                slots.lock().expect("no poisoned workers")[i] = Some(r);
            });
        }
    });
    let mut out = Vec::with_capacity(jobs.len());
    for slot in slots.into_inner().expect("no poisoned workers") {
        match slot {
            Some(Ok(r)) => out.push(r),
            Some(Err(e)) => return Err(e),
            None => {}
        }
    }
    if out.len() != jobs.len() {
        return Err(Error::InvalidArgument("benchmark aborted".into()));
    }
    Ok(out)
}

/// Callback invoked with the results of each finished cell.
pub type Progress<'a> = &'a (dyn Fn(&[TrialResult]) + Sync);

/// Phase-1 training, refinement and the longer-training control for every
/// (task, method, trial) cell, followed by aggregation. `progress` sees each cell's
/// results as it finishes.
pub fn run_benchmark(
    config: &BenchConfig,
    phase1: &Phase1Config,
    refine_cfg: &RefineConfig,
    progress: Option<Progress<'_>>,
) -> Result<BenchmarkReport> {
    if config.trials == 0 || config.tasks.is_empty() || config.methods.is_empty() {
        return Err(Error::InvalidArgument(
            "benchmark needs at least one task, method and trial".into(),
        ));
    }
    if config.control_batches < phase1.n_batches {
        return Err(Error::InvalidArgument(format!(
            "control_batches ({}) must be at least the phase-1 batch count ({})",
            config.control_batches, phase1.n_batches
        )));
    }
    phase1.validate()?;
    refine_cfg.validate()?;

    let task_ids: Vec<usize> = (0..config.tasks.len()).collect();
    let refs = parallel_map(&task_ids, config.workers, |&i| {
        reference_w2(
            &config.tasks[i],
            config.reference_n,
            derive_seed(config.seed, &[STREAM_REFERENCE, i as u64]),
        )
    })?;

    let mut cells = Vec::new();
    for task_idx in 0..config.tasks.len() {
        for method_idx in 0..config.methods.len() {
            for trial in 0..config.trials {
                cells.push(Cell {
                    task_idx,
                    method_idx,
                    trial,
                });
            }
        }
    }
    let results = parallel_map(&cells, config.workers, |c| {
        let r = run_cell(*c, config, phase1, refine_cfg, refs[c.task_idx])?;
        if let Some(p) = progress {
            p(&r);
        }
        Ok(r)
    })?;
    let trials: Vec<TrialResult> = results.into_iter().flatten().collect();

    let mut rows = Vec::new();
    for &task in &config.tasks {
        for &method in &config.methods {
            for phase in Phase::ALL {
                let ms: Vec<&EvalMetrics> = trials
                    .iter()
                    .filter(|r| r.task == task && r.method == method && r.phase == phase)
                    .map(|r| &r.metrics)
                    .collect();
                let col = |f: fn(&EvalMetrics) -> f64| mean_std(&ms.iter().map(|m| f(m)).collect::<Vec<_>>());
                let (w2_mean, w2_std) = col(|m| m.w2);
                let (npe_mean, npe_std) = col(|m| m.npe);
                let (straightness_mean, straightness_std) = col(|m| m.straightness);
                rows.push(ReportRow {
                    task,
                    method,
                    phase,
                    n_trials: ms.len(),
                    w2_mean,
                    w2_std,
                    npe_mean,
                    npe_std,
                    straightness_mean,
                    straightness_std,
                });
            }
        }
    }
    Ok(BenchmarkReport {
        references: config
            .tasks
            .iter()
            .zip(refs)
            .map(|(&task, w2)| ReferenceW2 {
                task,
                w2,
                n: config.reference_n,
            })
            .collect(),
        rows,
        trials,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> (BenchConfig, Phase1Config, RefineConfig) {
        let bench = BenchConfig {
            tasks: vec!["8gs->moons".parse().unwrap()],
            methods: vec![Method::Icfm],
            trials: 1,
            n_test: 64,
            reference_n: 128,
            control_batches: 6,
            workers: 2,
            seed: 3,
        };
        let p1 = Phase1Config {
            batch_size: 32,
            n_batches: 3,
            ..Default::default()
        };
        let rc = RefineConfig {
            batch_size: 32,
            n_batches: 3,
            ..Default::default()
        };
        (bench, p1, rc)
    }

    #[test]
    fn single_trial_has_three_rows_without_std() {
        let (b, p, r) = tiny();
        let report = run_benchmark(&b, &p, &r, None).unwrap();
        assert_eq!(report.rows.len(), 3);
        assert!(report.rows.iter().all(|r| r.n_trials == 1 && r.w2_std.is_none()));
        assert_eq!(report.trials.len(), 3);
    }

    #[test]
    fn rows_per_task_method_phase_and_worker_independence() {
        let (mut b, p, r) = tiny();
        b.tasks.push("N->scurve".parse().unwrap());
        b.methods.push(Method::Otcfm);
        b.trials = 2;
        b.workers = 1;
        let serial = run_benchmark(&b, &p, &r, None).unwrap();
        assert_eq!(serial.rows.len(), 2 * 2 * 3);
        assert!(serial.rows.iter().all(|r| r.n_trials == 2 && r.w2_std.is_some()));
        b.workers = 4;
        assert_eq!(run_benchmark(&b, &p, &r, None).unwrap(), serial);
    }

    #[test]
    fn rejects_short_control() {
        let (mut b, p, r) = tiny();
        b.control_batches = 2;
        assert!(run_benchmark(&b, &p, &r, None).is_err());
        b.control_batches = 6;
        b.trials = 0;
        assert!(run_benchmark(&b, &p, &r, None).is_err());
    }

    #[test]
    fn csv_layout() {
        let (b, p, r) = tiny();
        let report = run_benchmark(&b, &p, &r, None).unwrap();
        let mut buf = Vec::new();
        report.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0], "task,method,phase,metric,mean,std,n_trials");
        assert_eq!(lines.len(), 1 + 3 * 3);
        assert!(lines[1].starts_with("8gs→moons,icfm,phase1,w2,"));
        assert!(lines[1].ends_with(",,1"));
    }

    #[test]
    fn mean_and_sample_std() {
        assert_eq!(mean_std(&[2.0]), (2.0, None));
        let (m, s) = mean_std(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((s.unwrap() - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
    }
}
