//! Phase-2 refinement: velocity-aware mini-batch coupling followed by the
//! acceleration-penalizing pair loss on chord-interpolated states.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::diffcore::{clip_grad_norm_in_place, grad, AdamState, Graph, ParamVars, ParamVector, Tensor, Var};
use crate::error::{shape_err, Error, Result};
use crate::flows::{Sampler, STREAM_REFINE};
use crate::model::{TargetField, TargetPolicy, VelocityField};
use crate::otcore::{cost_matrix, sample_pairs, solve_exact, solve_sinkhorn, CostMatrix, CostMode, Coupling};
use crate::rng::{derive_seed, seeded, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum CouplingSolver {
    Exact,
    /// Entropic plan with absolute regularization `epsilon`; `batch_size` pairs are
    /// drawn from it per step.
    Sinkhorn {
        epsilon: f64,
        max_iters: usize,
        tol: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RefineConfig {
    pub alpha: f64,
    pub batch_size: usize,
    pub n_batches: usize,
    pub lr: f64,
    pub grad_clip_norm: f64,
    pub target_policy: TargetPolicy,
    pub coupling_solver: CouplingSolver,
    pub cost_mode: CostMode,
    pub seed: u64,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            alpha: 2.0 / 3.0,
            batch_size: 256,
            n_batches: 20_000,
            lr: 1e-3,
            grad_clip_norm: 1.0,
            target_policy: TargetPolicy::HardCopy { period: 500 },
            coupling_solver: CouplingSolver::Exact,
            cost_mode: CostMode::OatReduced,
            seed: 0,
        }
    }
}

impl RefineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::InvalidArgument(format!(
                "alpha must lie in [0, 1], got {}",
                self.alpha
            )));
        }
        if self.batch_size < 2 {
            return Err(Error::InvalidArgument(format!(
                "batch_size must be at least 2, got {}",
                self.batch_size
            )));
        }
        if !(self.lr > 0.0) {
            return Err(Error::InvalidArgument(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.grad_clip_norm > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "grad_clip_norm must be positive, got {}",
                self.grad_clip_norm
            )));
        }
        if let CouplingSolver::Sinkhorn {
            epsilon,
            max_iters,
            tol,
        } = self.coupling_solver
        {
            if !(epsilon > 0.0) || max_iters == 0 || !(tol > 0.0) {
                return Err(Error::InvalidArgument(
                    "sinkhorn needs epsilon > 0, max_iters ≥ 1, tol > 0".into(),
                ));
            }
        }
        self.target_policy.validate()
    }
}

/// `(v_target(X0, 0), v_target(X1, 1))`, evaluated outside any gradient graph.
pub fn boundary_velocities(target: &TargetField, x0: &Tensor, x1: &Tensor) -> Result<(Tensor, Tensor)> {
    let f = target.field();
    Ok((f.forward_at(x0, 0.0)?, f.forward_at(x1, 1.0)?))
}

/// Coupling between `x0` (columns) and `x1` (rows) under `mode`.
pub fn solve_coupling(cost: &CostMatrix, solver: CouplingSolver) -> Result<Coupling> {
    match solver {
        CouplingSolver::Exact => Ok(Coupling::Assignment(solve_exact(cost))),
        CouplingSolver::Sinkhorn {
            epsilon,
            max_iters,
            tol,
        } => Ok(Coupling::SoftPlan(solve_sinkhorn(cost, epsilon, max_iters, tol)?)),
    }
}

/// Matched pairs with their boundary velocities and interpolation times.
#[derive(Clone, Debug, PartialEq)]
pub struct PairBatch {
    pub x0: Tensor,
    pub x1: Tensor,
    pub v0: Tensor,
    pub v1: Tensor,
    pub t: Vec<f64>,
}

impl PairBatch {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    fn check(&self, d: usize) -> Result<()> {
        let k = self.len();
        if k == 0 {
            return Err(Error::InvalidArgument("empty pair batch".into()));
        }
        for (name, m) in [("x0", &self.x0), ("x1", &self.x1), ("v0", &self.v0), ("v1", &self.v1)] {
            if m.shape() != [k, d] {
                return Err(shape_err(
                    "oat_loss",
                    format!("{name} has shape {:?}, expected [{k}, {d}]", m.shape()),
                ));
            }
        }
        if self.t.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return Err(Error::InvalidArgument("pair times must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Chord points `(1 − t)·x0 + t·x1`.
    pub fn chord_points(&self) -> Tensor {
        let mut out = self.x0.clone();
        for (i, &t) in self.t.iter().enumerate() {
            for (o, b) in out.row_mut(i).iter_mut().zip(self.x1.row(i)) {
                *o = (1.0 - t) * *o + t * b;
            }
        }
        out
    }

    fn chord(&self) -> Tensor {
        let mut u = self.x1.clone();
        for (o, a) in u.data_mut().iter_mut().zip(self.x0.data()) {
            *o -= a;
        }
        u
    }
}

/// Mean pair loss over a batch given the intermediate velocities `vt`:
/// `α(‖u − (v0+vt)/2‖² + ‖u − (vt+v1)/2‖²) + (1−α)(‖vt − v0‖² + ‖v1 − vt‖²)` with
/// `u = x1 − x0`.
pub fn oat_objective(batch: &PairBatch, vt: &Tensor, alpha: f64) -> Result<f64> {
    let d = batch.x0.cols();
    batch.check(d)?;
    if vt.shape() != batch.x0.shape() {
        return Err(shape_err("oat_objective", format!("vt has shape {:?}", vt.shape())));
    }
    let mut total = 0.0;
    for i in 0..batch.len() {
        let (a, b, p, q, w) = (
            batch.x0.row(i),
            batch.x1.row(i),
            batch.v0.row(i),
            batch.v1.row(i),
            vt.row(i),
        );
        for k in 0..d {
            let u = b[k] - a[k];
            let r0 = u - 0.5 * (p[k] + w[k]);
            let r1 = u - 0.5 * (w[k] + q[k]);
            total += alpha * (r0 * r0 + r1 * r1) + (1.0 - alpha) * ((w[k] - p[k]).powi(2) + (q[k] - w[k]).powi(2));
        }
    }
    Ok(total / batch.len() as f64)
}

/// Records the batch loss on `graph`; `v0` and `v1` are graph variables so that
/// callers can check that nothing flows back into them.
pub fn record_oat_loss(
    graph: &mut Graph,
    vars: &ParamVars,
    online: &VelocityField,
    batch: &PairBatch,
    v0: Var,
    v1: Var,
    alpha: f64,
) -> Result<Var> {
    batch.check(online.dim())?;
    let k = batch.len();
    let u = graph.constant(batch.chord());
    let xt = graph.constant(batch.chord_points());
    let t = graph.constant(Tensor::matrix(k, 1, batch.t.clone())?);
    let vt = online.forward_graph(graph, vars, xt, t)?;
    let half_vt = graph.scale(vt, 0.5)?;
    let half_v0 = graph.scale(v0, 0.5)?;
    let half_v1 = graph.scale(v1, 0.5)?;
    let a0 = graph.sub(u, half_v0)?;
    let a1 = graph.sub(u, half_v1)?;
    let r0 = graph.sub(a0, half_vt)?;
    let r1 = graph.sub(a1, half_vt)?;
    let d0 = graph.sub(vt, v0)?;
    let d1 = graph.sub(v1, vt)?;
    let mut parts = Vec::with_capacity(4);
    for (r, w) in [(r0, alpha), (r1, alpha), (d0, 1.0 - alpha), (d1, 1.0 - alpha)] {
        let sq = graph.square(r)?;
        let s = graph.sum(sq)?;
        parts.push(graph.scale(s, w / k as f64)?);
    }
    let lhs = graph.add(parts[0], parts[1])?;
    let rhs = graph.add(parts[2], parts[3])?;
    graph.add(lhs, rhs)
}

/// Batch loss evaluated without a graph.
pub fn oat_loss(online: &VelocityField, batch: &PairBatch, alpha: f64) -> Result<f64> {
    batch.check(online.dim())?;
    let vt = online.forward(&batch.chord_points(), &batch.t)?;
    oat_objective(batch, &vt, alpha)
}

/// Batch loss and its gradient with respect to the online parameters only.
pub fn oat_loss_grad(online: &VelocityField, batch: &PairBatch, alpha: f64) -> Result<(f64, ParamVector)> {
    grad(online.params(), |g, vars| {
        let v0 = g.constant(batch.v0.clone());
        let v1 = g.constant(batch.v1.clone());
        record_oat_loss(g, vars, online, batch, v0, v1, alpha)
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefineRecord {
    pub step: u64,
    pub loss: f64,
    pub coupling_cost: f64,
    pub grad_norm: f64,
}

/// Builds the coupling for one batch and gathers the matched pairs with fresh times.
pub fn couple_batch(
    target: &TargetField,
    x0: &Tensor,
    x1: &Tensor,
    config: &RefineConfig,
    rng: &mut Rng,
) -> Result<(PairBatch, f64)> {
    let (v0, v1) = boundary_velocities(target, x0, x1)?;
    let cost = cost_matrix(x0, x1, Some(&v0), Some(&v1), config.cost_mode)?;
    let coupling = solve_coupling(&cost, config.coupling_solver)?;
    let pairs = sample_pairs(&coupling, config.batch_size, rng)?;
    let rows: Vec<usize> = pairs.iter().map(|p| p.0).collect();
    let cols: Vec<usize> = pairs.iter().map(|p| p.1).collect();
    let t = (0..pairs.len()).map(|_| rng.gen_range(0.0..=1.0)).collect();
    Ok((
        PairBatch {
            x0: x0.gather_rows(&cols),
            x1: x1.gather_rows(&rows),
            v0: v0.gather_rows(&cols),
            v1: v1.gather_rows(&rows),
            t,
        },
        coupling.cost(&cost),
    ))
}

/// One refinement update on a given batch. Mutates the online field, its optimizer
/// state and the target; `step` is the 1-based index of this update.
#[allow(clippy::too_many_arguments)]
pub fn refine_step(
    online: &mut VelocityField,
    adam: &mut AdamState,
    target: &mut TargetField,
    x0: &Tensor,
    x1: &Tensor,
    config: &RefineConfig,
    step: u64,
    rng: &mut Rng,
) -> Result<RefineRecord> {
    let (pairs, coupling_cost) = couple_batch(target, x0, x1, config, rng)?;
    let (loss, mut g) = oat_loss_grad(online, &pairs, config.alpha)?;
    let grad_norm = clip_grad_norm_in_place(&mut g, config.grad_clip_norm);
    adam.update(online.params_mut(), &g, config.lr)?;
    target.update(online, step)?;
    Ok(RefineRecord {
        step,
        loss,
        coupling_cost,
        grad_norm,
    })
}

/// Resumable refinement state: online field, target copy, Adam moments and the data
/// stream.
#[derive(Clone, Debug)]
pub struct RefineTrainer {
    config: RefineConfig,
    online: VelocityField,
    target: TargetField,
    adam: AdamState,
    rng: Rng,
    step: u64,
}

impl RefineTrainer {
    pub fn new(phase1: &VelocityField, config: RefineConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            target: TargetField::new(phase1, config.target_policy)?,
            adam: AdamState::new(phase1.params().len()),
            rng: seeded(derive_seed(config.seed, &[STREAM_REFINE])),
            online: phase1.clone(),
            step: 0,
            config,
        })
    }

    pub fn online(&self) -> &VelocityField {
        &self.online
    }

    pub fn target(&self) -> &TargetField {
        &self.target
    }

    pub fn into_online(self) -> VelocityField {
        self.online
    }

    pub fn steps_done(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, source: &dyn Sampler, target: &dyn Sampler) -> Result<RefineRecord> {
        let d = self.online.dim();
        if source.dim() != d || target.dim() != d {
            return Err(shape_err(
                "refine",
                format!(
                    "samplers have dimensions {} and {}, field has {d}",
                    source.dim(),
                    target.dim()
                ),
            ));
        }
        let b = self.config.batch_size;
        let x0 = source.sample(b, &mut self.rng);
        let x1 = target.sample(b, &mut self.rng);
        let rec = refine_step(
            &mut self.online,
            &mut self.adam,
            &mut self.target,
            &x0,
            &x1,
            &self.config,
            self.step + 1,
            &mut self.rng,
        )?;
        self.step += 1;
        Ok(rec)
    }

    pub fn run(
        &mut self,
        n: usize,
        source: &dyn Sampler,
        target: &dyn Sampler,
        mut log: impl FnMut(&RefineRecord) -> Result<()>,
    ) -> Result<()> {
        for _ in 0..n {
            let rec = self.step(source, target)?;
            log(&rec)?;
        }
        Ok(())
    }
}

/// Refines `phase1` for `config.n_batches` steps and returns the online field.
pub fn refine(
    phase1: &VelocityField,
    config: &RefineConfig,
    source: &dyn Sampler,
    target: &dyn Sampler,
) -> Result<VelocityField> {
    let mut trainer = RefineTrainer::new(phase1, config.clone())?;
    trainer.run(config.n_batches, source, target, |_| Ok(()))?;
    Ok(trainer.into_online())
}
