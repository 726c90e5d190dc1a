use serde::{Deserialize, Serialize};

use super::datasets::TaskSpec;
use crate::error::{Error, Result};
use crate::model::VelocityField;
use crate::ode::{integrate_rk4, path_energy, Trajectory, VectorField};
use crate::otcore::empirical_w2;
use crate::rng::{derive_seed, seeded};

pub const EVAL_STEPS: usize = 100;
pub const DEFAULT_N_TEST: usize = 1024;
pub const REFERENCE_N: usize = 4096;

const STREAM_EVAL_SOURCE: u64 = 11;
const STREAM_EVAL_TARGET: u64 = 12;
const STREAM_REF_SOURCE: u64 = 13;
const STREAM_REF_TARGET: u64 = 14;

/// RK4 trajectories of `n_test` seeded source samples on the 101-point grid.
pub fn eval_trajectory(field: &dyn VectorField, task: &TaskSpec, n_test: usize, seed: u64) -> Result<Trajectory> {
    if n_test == 0 {
        return Err(Error::InvalidArgument("n_test must be at least 1".into()));
    }
    integrate_rk4(field, &eval_sources(task, n_test, seed), EVAL_STEPS)
}

/// The seeded source samples that [`eval_trajectory`] starts from.
pub fn eval_sources(task: &TaskSpec, n_test: usize, seed: u64) -> crate::diffcore::Tensor {
    task.source
        .sample_with(n_test, &mut seeded(derive_seed(seed, &[STREAM_EVAL_SOURCE])))
}

/// `n_test` seeded target samples matching [`eval_trajectory`]'s seed.
pub fn eval_targets(task: &TaskSpec, n_test: usize, seed: u64) -> crate::diffcore::Tensor {
    task.target
        .sample_with(n_test, &mut seeded(derive_seed(seed, &[STREAM_EVAL_TARGET])))
}

/// Empirical W2² between generated samples and fresh target samples.
pub fn eval_w2(field: &dyn VectorField, task: &TaskSpec, n_test: usize, seed: u64) -> Result<f64> {
    let traj = eval_trajectory(field, task, n_test, seed)?;
    empirical_w2(traj.final_state(), &eval_targets(task, n_test, seed))
}

/// Ground-truth W2²(ρ0, ρ1) estimated from `n` paired source and target samples.
pub fn reference_w2(task: &TaskSpec, n: usize, seed: u64) -> Result<f64> {
    let x = task
        .source
        .sample_with(n, &mut seeded(derive_seed(seed, &[STREAM_REF_SOURCE])));
    let y = task
        .target
        .sample_with(n, &mut seeded(derive_seed(seed, &[STREAM_REF_TARGET])));
    empirical_w2(&x, &y)
}

/// `|PE − W2²| / W2²`
pub fn npe_from(pe: f64, reference: f64) -> Result<f64> {
    if !(reference >= 1e-9) {
        return Err(Error::DegenerateTask(reference));
    }
    Ok((pe - reference).abs() / reference)
}

/// Normalized path energy against a reference W2² computed at [`REFERENCE_N`].
pub fn eval_npe(field: &dyn VectorField, task: &TaskSpec, n_test: usize, seed: u64) -> Result<f64> {
    let reference = reference_w2(task, REFERENCE_N, seed)?;
    let pe = path_energy(&eval_trajectory(field, task, n_test, seed)?)?;
    npe_from(pe, reference)
}

/// Mean over samples of the largest distance from `x(t)` to the segment
/// `x(0) → x(1)`, relative to the segment length. Samples whose endpoints are
/// closer than `1e-9` are skipped.
pub fn straightness_score(traj: &Trajectory) -> f64 {
    let (b, d) = (traj.batch_size(), traj.dim());
    let first = &traj.states[0];
    let last = traj.final_state();
    let mut total = 0.0;
    let mut counted = 0usize;
    for i in 0..b {
        let (a, z) = (first.row(i), last.row(i));
        let chord: Vec<f64> = (0..d).map(|k| z[k] - a[k]).collect();
        let len2: f64 = chord.iter().map(|c| c * c).sum();
        if len2.sqrt() < 1e-9 {
            continue;
        }
        let mut worst = 0.0f64;
        for s in &traj.states {
            let p = s.row(i);
            let proj: f64 = (0..d).map(|k| (p[k] - a[k]) * chord[k]).sum::<f64>() / len2;
            let lambda = proj.clamp(0.0, 1.0);
            let dist2: f64 = (0..d).map(|k| (p[k] - a[k] - lambda * chord[k]).powi(2)).sum();
            worst = worst.max(dist2.sqrt());
        }
        total += worst / len2.sqrt();
        counted += 1;
    }
    if counted == 0 {
        0.0
    } else {
        total / counted as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub w2: f64,
    pub npe: f64,
    pub pe: f64,
    pub straightness: f64,
    pub n_test: usize,
    pub seed: u64,
}

/// W2², NPE and straightness from one shared RK4 rollout, against a precomputed
/// reference W2².
pub fn evaluate(
    field: &VelocityField,
    task: &TaskSpec,
    n_test: usize,
    seed: u64,
    reference: f64,
) -> Result<EvalMetrics> {
    metrics_from_trajectory(&eval_trajectory(field, task, n_test, seed)?, task, seed, reference)
}

/// Metrics of an already integrated evaluation trajectory, which must carry
/// velocities and start from [`eval_sources`] with the same `seed`.
pub fn metrics_from_trajectory(traj: &Trajectory, task: &TaskSpec, seed: u64, reference: f64) -> Result<EvalMetrics> {
    let n_test = traj.batch_size();
    let pe = path_energy(traj)?;
    Ok(EvalMetrics {
        w2: empirical_w2(traj.final_state(), &eval_targets(task, n_test, seed))?,
        npe: npe_from(pe, reference)?,
        pe,
        straightness: straightness_score(traj),
        n_test,
        seed,
    })
}
