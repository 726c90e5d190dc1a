//! Phase-1 conditional flow matching: FM, I-CFM, VP-CFM and OT-CFM.

use std::f64::consts::FRAC_PI_2;
use std::str::FromStr;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diffcore::{grad, AdamState, ParamVector, Tensor};
use crate::error::{shape_err, Error, Result};
use crate::model::VelocityField;
use crate::otcore::{cost_matrix, solve_exact, CostMode};
use crate::rng::{derive_seed, seeded, Rng};

/// Largest time drawn for FM, keeping its target velocity away from the singular
/// endpoint when `sigma = 0`.
pub const FM_T_MAX: f64 = 1.0 - 1e-5;

/// Source of i.i.d. samples from a distribution on `R^d`.
pub trait Sampler: Send + Sync {
    fn dim(&self) -> usize;

    /// An `[n, dim]` batch.
    fn sample(&self, n: usize, rng: &mut Rng) -> Tensor;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Fm,
    Icfm,
    Vpcfm,
    Otcfm,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Fm, Method::Icfm, Method::Vpcfm, Method::Otcfm];

    pub fn name(self) -> &'static str {
        match self {
            Method::Fm => "fm",
            Method::Icfm => "icfm",
            Method::Vpcfm => "vpcfm",
            Method::Otcfm => "otcfm",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "fm" => Ok(Method::Fm),
            "icfm" => Ok(Method::Icfm),
            "vpcfm" => Ok(Method::Vpcfm),
            "otcfm" => Ok(Method::Otcfm),
            _ => Err(Error::InvalidArgument(format!("unknown method {s:?}"))),
        }
    }
}

/// One point on a conditional path together with its regression target.
#[derive(Clone, Debug, PartialEq)]
pub struct PathSample {
    pub x_t: Vec<f64>,
    pub u_t: Vec<f64>,
    pub t: f64,
    pub x0: Vec<f64>,
    pub x1: Vec<f64>,
}

/// Draws `x_t` on the conditional path of `method` between `x0` and `x1`.
///
/// FM ignores `x0` and draws its own standard-normal noise from `rng`.
pub fn draw_path_sample(
    method: Method,
    x0: &[f64],
    x1: &[f64],
    t: f64,
    sigma: f64,
    rng: &mut Rng,
) -> Result<PathSample> {
    if x0.len() != x1.len() {
        return Err(shape_err(
            "draw_path_sample",
            format!("x0 has {} entries, x1 has {}", x0.len(), x1.len()),
        ));
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::InvalidArgument(format!("t must lie in [0, 1], got {t}")));
    }
    if !(sigma >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "sigma must be non-negative, got {sigma}"
        )));
    }
    let (x_t, u_t) = match method {
        Method::Fm => {
            let denom = 1.0 - (1.0 - sigma) * t;
            if denom.abs() < 1e-12 {
                return Err(Error::InvalidArgument(format!(
                    "FM target velocity is singular at t = {t}, sigma = {sigma}"
                )));
            }
            let scale = t * sigma - t + 1.0;
            let x_t: Vec<f64> = x1
                .iter()
                .map(|&b| {
                    let eps: f64 = StandardNormal.sample(rng);
                    t * b + scale * eps
                })
                .collect();
            let u_t = x1
                .iter()
                .zip(&x_t)
                .map(|(&b, &x)| (b - (1.0 - sigma) * x) / denom)
                .collect();
            (x_t, u_t)
        }
        Method::Icfm | Method::Otcfm => {
            let x_t = x0
                .iter()
                .zip(x1)
                .map(|(&a, &b)| {
                    let jitter = if sigma > 0.0 {
                        sigma * Distribution::<f64>::sample(&StandardNormal, rng)
                    } else {
                        0.0
                    };
                    (1.0 - t) * a + t * b + jitter
                })
                .collect();
            let u_t = x0.iter().zip(x1).map(|(&a, &b)| b - a).collect();
            (x_t, u_t)
        }
        Method::Vpcfm => {
            let (s, c) = (FRAC_PI_2 * t).sin_cos();
            let x_t = x0.iter().zip(x1).map(|(&a, &b)| c * a + s * b).collect();
            let u_t = x0.iter().zip(x1).map(|(&a, &b)| FRAC_PI_2 * (c * b - s * a)).collect();
            (x_t, u_t)
        }
    };
    Ok(PathSample {
        x_t,
        u_t,
        t,
        x0: x0.to_vec(),
        x1: x1.to_vec(),
    })
}

/// A batch of path samples in matrix form.
#[derive(Clone, Debug, PartialEq)]
pub struct PathBatch {
    pub x_t: Tensor,
    pub u_t: Tensor,
    pub t: Vec<f64>,
}

impl PathBatch {
    pub fn from_samples(samples: &[PathSample]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        Ok(Self {
            x_t: Tensor::from_rows(&samples.iter().map(|s| &s.x_t[..]).collect::<Vec<_>>())?,
            u_t: Tensor::from_rows(&samples.iter().map(|s| &s.u_t[..]).collect::<Vec<_>>())?,
            t: samples.iter().map(|s| s.t).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    fn check(&self, field: &VelocityField) -> Result<()> {
        if self.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        if self.x_t.shape() != [self.len(), field.dim()] || self.u_t.shape() != self.x_t.shape() {
            return Err(shape_err(
                "cfm_loss",
                format!(
                    "x_t {:?}, u_t {:?}, field dimension {}",
                    self.x_t.shape(),
                    self.u_t.shape(),
                    field.dim()
                ),
            ));
        }
        Ok(())
    }
}

/// `mean_i ‖v_θ(x_tᵢ, tᵢ) − u_tᵢ‖²`
pub fn cfm_loss(field: &VelocityField, batch: &PathBatch) -> Result<f64> {
    batch.check(field)?;
    let out = field.forward(&batch.x_t, &batch.t)?;
    let sum: f64 = out
        .data()
        .iter()
        .zip(batch.u_t.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(sum / batch.len() as f64)
}

/// [`cfm_loss`] and its gradient with respect to the field parameters.
pub fn cfm_loss_grad(field: &VelocityField, batch: &PathBatch) -> Result<(f64, ParamVector)> {
    batch.check(field)?;
    let b = batch.len();
    grad(field.params(), |g, vars| {
        let x = g.constant(batch.x_t.clone());
        let t = g.constant(Tensor::matrix(b, 1, batch.t.clone())?);
        let u = g.constant(batch.u_t.clone());
        let out = field.forward_graph(g, vars, x, t)?;
        let diff = g.sub(out, u)?;
        let sq = g.square(diff)?;
        let total = g.sum(sq)?;
        g.scale(total, 1.0 / b as f64)
    })
}

/// Reorders `x0` so that row `i` is the source matched to `x1[i]` by the exact
/// squared-Euclidean assignment.
pub fn ot_pairing(x0: &Tensor, x1: &Tensor) -> Result<Tensor> {
    let c = cost_matrix(x0, x1, None, None, CostMode::SquaredEuclidean)?;
    Ok(x0.gather_rows(&solve_exact(&c)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Phase1Config {
    pub method: Method,
    pub sigma: f64,
    pub batch_size: usize,
    pub n_batches: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for Phase1Config {
    fn default() -> Self {
        Self {
            method: Method::Icfm,
            sigma: 0.0,
            batch_size: 256,
            n_batches: 20_000,
            lr: 1e-3,
            seed: 0,
        }
    }
}

impl Phase1Config {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || (self.method == Method::Otcfm && self.batch_size < 2) {
            return Err(Error::InvalidArgument(format!(
                "batch_size {} is too small for {}",
                self.batch_size, self.method
            )));
        }
        if !(self.lr > 0.0) {
            return Err(Error::InvalidArgument(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.sigma >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "sigma must be non-negative, got {}",
                self.sigma
            )));
        }
        Ok(())
    }
}

/// Sub-seed streams derived from a run seed.
pub(crate) const STREAM_INIT: u64 = 1;
pub(crate) const STREAM_PHASE1: u64 = 2;
pub(crate) const STREAM_REFINE: u64 = 3;

/// Resumable phase-1 training state. Stepping it `n` times and then `m` more times
/// is identical to stepping it `n + m` times.
#[derive(Clone, Debug)]
pub struct Phase1Trainer {
    config: Phase1Config,
    field: VelocityField,
    adam: AdamState,
    rng: Rng,
    step: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Phase1Record {
    pub step: u64,
    pub loss: f64,
}

impl Phase1Trainer {
    /// Starts from the seeded default initialization for dimension `d`.
    pub fn new(config: Phase1Config, d: usize) -> Result<Self> {
        let field = VelocityField::init(d, derive_seed(config.seed, &[STREAM_INIT]))?;
        Self::with_field(config, field)
    }

    pub fn with_field(config: Phase1Config, field: VelocityField) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            adam: AdamState::new(field.params().len()),
            rng: seeded(derive_seed(config.seed, &[STREAM_PHASE1])),
            step: 0,
            config,
            field,
        })
    }

    pub fn field(&self) -> &VelocityField {
        &self.field
    }

    pub fn into_field(self) -> VelocityField {
        self.field
    }

    pub fn steps_done(&self) -> u64 {
        self.step
    }

    pub fn config(&self) -> &Phase1Config {
        &self.config
    }

    /// Draws the next training batch without updating parameters.
    pub fn draw_batch(&mut self, source: &dyn Sampler, target: &dyn Sampler) -> Result<PathBatch> {
        let b = self.config.batch_size;
        let d = self.field.dim();
        if source.dim() != d || target.dim() != d {
            return Err(shape_err(
                "train_phase1",
                format!(
                    "samplers have dimensions {} and {}, field has {d}",
                    source.dim(),
                    target.dim()
                ),
            ));
        }
        let mut x0 = source.sample(b, &mut self.rng);
        let x1 = target.sample(b, &mut self.rng);
        if self.config.method == Method::Otcfm {
            x0 = ot_pairing(&x0, &x1)?;
        }
        let t_max = if self.config.method == Method::Fm {
            FM_T_MAX
        } else {
            1.0
        };
        let samples = (0..b)
            .map(|i| {
                let t = self.rng.gen_range(0.0..=t_max);
                draw_path_sample(
                    self.config.method,
                    x0.row(i),
                    x1.row(i),
                    t,
                    self.config.sigma,
                    &mut self.rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        PathBatch::from_samples(&samples)
    }

    /// One Adam step on a fresh batch; returns the pre-update batch loss.
    pub fn step(&mut self, source: &dyn Sampler, target: &dyn Sampler) -> Result<Phase1Record> {
        let batch = self.draw_batch(source, target)?;
        let (loss, g) = cfm_loss_grad(&self.field, &batch)?;
        self.adam.update(self.field.params_mut(), &g, self.config.lr)?;
        self.step += 1;
        Ok(Phase1Record { step: self.step, loss })
    }

    /// Runs `n` steps, passing every record to `log`.
    pub fn run(
        &mut self,
        n: usize,
        source: &dyn Sampler,
        target: &dyn Sampler,
        mut log: impl FnMut(&Phase1Record) -> Result<()>,
    ) -> Result<()> {
        for _ in 0..n {
            let rec = self.step(source, target)?;
            log(&rec)?;
        }
        Ok(())
    }
}

/// Trains a fresh field for `config.n_batches` steps.
pub fn train_phase1(config: &Phase1Config, source: &dyn Sampler, target: &dyn Sampler) -> Result<VelocityField> {
    let mut trainer = Phase1Trainer::new(config.clone(), source.dim())?;
    trainer.run(config.n_batches, source, target, |_| Ok(()))?;
    Ok(trainer.into_field())
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Normal(usize);

    impl Sampler for Normal {
        fn dim(&self) -> usize {
            self.0
        }

        fn sample(&self, n: usize, rng: &mut Rng) -> Tensor {
            let data = (0..n * self.0).map(|_| StandardNormal.sample(rng)).collect();
            Tensor::matrix(n, self.0, data).unwrap()
        }
    }

    #[test]
    fn icfm_endpoints() {
        let mut rng = seeded(0);
        for m in [Method::Icfm, Method::Otcfm] {
            let s = draw_path_sample(m, &[1.0, 2.0], &[3.0, -1.0], 0.0, 0.0, &mut rng).unwrap();
            assert_eq!(s.x_t, vec![1.0, 2.0]);
            assert_eq!(s.u_t, vec![2.0, -3.0]);
            let s = draw_path_sample(m, &[1.0, 2.0], &[3.0, -1.0], 1.0, 0.0, &mut rng).unwrap();
            assert_eq!(s.x_t, vec![3.0, -1.0]);
        }
    }

    #[test]
    fn vpcfm_at_one() {
        let s = draw_path_sample(Method::Vpcfm, &[1.0, 0.0], &[0.0, 1.0], 1.0, 0.0, &mut seeded(0)).unwrap();
        assert!((s.x_t[0]).abs() < 1e-15 && (s.x_t[1] - 1.0).abs() < 1e-15);
        assert!((s.u_t[0] + FRAC_PI_2).abs() < 1e-15 && s.u_t[1].abs() < 1e-15);
    }

    #[test]
    fn vp_norm_identity() {
        let mut rng = seeded(1);
        for _ in 0..100 {
            let x0 = [rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)];
            let x1 = [rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)];
            let t: f64 = rng.gen_range(0.0..1.0);
            let s = draw_path_sample(Method::Vpcfm, &x0, &x1, t, 0.0, &mut rng).unwrap();
            let (sn, cs) = (FRAC_PI_2 * t).sin_cos();
            let dot = x0[0] * x1[0] + x0[1] * x1[1];
            let want = cs * cs * (x0[0].powi(2) + x0[1].powi(2))
                + sn * sn * (x1[0].powi(2) + x1[1].powi(2))
                + 2.0 * sn * cs * dot;
            let got = s.x_t[0].powi(2) + s.x_t[1].powi(2);
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn paths_satisfy_their_ode() {
        let mut rng = seeded(2);
        let (x0, x1) = ([0.3, -1.2], [2.0, 0.7]);
        for m in [Method::Icfm, Method::Vpcfm] {
            for k in 0..=100 {
                let t = k as f64 / 100.0;
                let h = 1e-7;
                let (lo, hi) = ((t - h).max(0.0), (t + h).min(1.0));
                let a = draw_path_sample(m, &x0, &x1, lo, 0.0, &mut rng).unwrap();
                let b = draw_path_sample(m, &x0, &x1, hi, 0.0, &mut rng).unwrap();
                let s = draw_path_sample(m, &x0, &x1, t, 0.0, &mut rng).unwrap();
                for i in 0..2 {
                    let fd = (b.x_t[i] - a.x_t[i]) / (hi - lo);
                    assert!((fd - s.u_t[i]).abs() < 1e-6, "{m} t={t}");
                }
            }
        }
    }

    #[test]
    fn fm_path_with_zero_sigma_is_conditional_linear() {
        let mut rng = seeded(3);
        let x1 = [1.0, -2.0];
        let t = 0.25;
        let s = draw_path_sample(Method::Fm, &[9.0, 9.0], &x1, t, 0.0, &mut rng).unwrap();
        for i in 0..2 {
            assert!((s.u_t[i] - (x1[i] - s.x_t[i]) / (1.0 - t)).abs() < 1e-12);
        }
        assert!(draw_path_sample(Method::Fm, &[0.0], &[1.0], 1.0, 0.0, &mut rng).is_err());
        assert!(draw_path_sample(Method::Fm, &[0.0], &[1.0], 1.0, 0.1, &mut rng).is_ok());
    }

    #[test]
    fn fm_marginal_moments() {
        let mut rng = seeded(4);
        let (t, sigma, x1) = (0.6, 0.2, [2.0]);
        let n = 50_000;
        let xs: Vec<f64> = (0..n)
            .map(|_| {
                draw_path_sample(Method::Fm, &[0.0], &x1, t, sigma, &mut rng)
                    .unwrap()
                    .x_t[0]
            })
            .collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        let sd = t * sigma - t + 1.0;
        assert!((mean - t * x1[0]).abs() < 4.0 * sd / (n as f64).sqrt());
        assert!((var - sd * sd).abs() < 0.03 * sd * sd);
    }

    #[test]
    fn jitter_only_when_sigma_positive() {
        let mut rng = seeded(5);
        let s = draw_path_sample(Method::Icfm, &[0.0, 0.0], &[2.0, 2.0], 0.5, 0.3, &mut rng).unwrap();
        assert_ne!(s.x_t, vec![1.0, 1.0]);
        assert_eq!(s.u_t, vec![2.0, 2.0]);
    }

    #[test]
    fn cfm_loss_examples() {
        let zero = VelocityField::zeros(2, &[4]).unwrap();
        let batch = PathBatch {
            x_t: Tensor::from_rows(&[[0.1, 0.2], [0.3, -0.1], [1.0, 1.0]]).unwrap(),
            u_t: Tensor::from_rows(&[[1.0, 0.0]; 3]).unwrap(),
            t: vec![0.0, 0.5, 1.0],
        };
        assert_eq!(cfm_loss(&zero, &batch).unwrap(), 1.0);
        let f = VelocityField::init_with(2, &[4], 1).unwrap();
        let perfect = PathBatch {
            u_t: f.forward(&batch.x_t, &batch.t).unwrap(),
            ..batch.clone()
        };
        assert_eq!(cfm_loss(&f, &perfect).unwrap(), 0.0);
        let (l, _) = cfm_loss_grad(&f, &batch).unwrap();
        assert!((l - cfm_loss(&f, &batch).unwrap()).abs() < 1e-13);
    }

    #[test]
    fn cfm_gradient_matches_finite_differences() {
        let f = VelocityField::init_with(2, &[5, 4], 8).unwrap();
        let mut rng = seeded(6);
        let x0 = Normal(2).sample(6, &mut rng);
        let x1 = Normal(2).sample(6, &mut rng);
        let samples: Vec<_> = (0..6)
            .map(|i| draw_path_sample(Method::Icfm, x0.row(i), x1.row(i), i as f64 / 5.0, 0.0, &mut rng).unwrap())
            .collect();
        let batch = PathBatch::from_samples(&samples).unwrap();
        let (_, g) = cfm_loss_grad(&f, &batch).unwrap();
        let h = 1e-6;
        for k in 0..f.params().len() {
            let eval = |delta: f64| {
                let mut p = f.params().clone();
                p.as_mut_slice()[k] += delta;
                cfm_loss(&VelocityField::from_params(2, &[5, 4], p).unwrap(), &batch).unwrap()
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let a = g.as_slice()[k];
            assert!(
                (a - fd).abs() <= 1e-4 * a.abs().max(fd.abs()).max(1e-3),
                "{k}: {a} vs {fd}"
            );
        }
    }

    #[test]
    fn zero_batches_returns_initialization() {
        let cfg = Phase1Config {
            n_batches: 0,
            seed: 3,
            ..Default::default()
        };
        let f = train_phase1(&cfg, &Normal(2), &Normal(2)).unwrap();
        assert_eq!(f, VelocityField::init(2, derive_seed(3, &[STREAM_INIT])).unwrap());
    }

    #[test]
    fn icfm_on_matching_gaussians_beats_zero_field() {
        let cfg = Phase1Config {
            n_batches: 300,
            batch_size: 128,
            seed: 1,
            ..Default::default()
        };
        let mut trainer = Phase1Trainer::new(cfg, 2).unwrap();
        let mut losses = Vec::new();
        trainer
            .run(300, &Normal(2), &Normal(2), |r| {
                losses.push(r.loss);
                Ok(())
            })
            .unwrap();
        let tail = losses[250..].iter().sum::<f64>() / 50.0;
        assert!(tail.is_finite());
        // Zero-field loss is E‖x1 − x0‖² = 2d = 4.
        assert!(tail <= 4.0, "{tail}");
    }

    #[test]
    fn resuming_matches_a_single_run() {
        let cfg = Phase1Config {
            batch_size: 16,
            seed: 9,
            method: Method::Otcfm,
            ..Default::default()
        };
        let mut a = Phase1Trainer::new(cfg.clone(), 2).unwrap();
        a.run(10, &Normal(2), &Normal(2), |_| Ok(())).unwrap();
        let mut b = Phase1Trainer::new(cfg, 2).unwrap();
        b.run(4, &Normal(2), &Normal(2), |_| Ok(())).unwrap();
        b.run(6, &Normal(2), &Normal(2), |_| Ok(())).unwrap();
        assert_eq!(a.field().to_bytes(), b.field().to_bytes());
    }

    #[test]
    fn ot_pairing_never_worse_than_identity() {
        let mut rng = seeded(7);
        for _ in 0..20 {
            let x0 = Normal(2).sample(32, &mut rng);
            let x1 = Normal(2).sample(32, &mut rng);
            let paired = ot_pairing(&x0, &x1).unwrap();
            let cost = |a: &Tensor| -> f64 {
                (0..32)
                    .map(|i| {
                        a.row(i)
                            .iter()
                            .zip(x1.row(i))
                            .map(|(p, q)| (p - q).powi(2))
                            .sum::<f64>()
                    })
                    .sum()
            };
            assert!(cost(&paired) <= cost(&x0) + 1e-12);
        }
    }

    #[test]
    fn ot_pairing_is_order_equivariant() {
        let mut rng = seeded(8);
        let x0 = Normal(2).sample(12, &mut rng);
        let x1 = Normal(2).sample(12, &mut rng);
        let perm: Vec<usize> = (0..12).rev().collect();
        let pairs = |a: &Tensor, b: &Tensor| -> Vec<Vec<u64>> {
            let p = ot_pairing(a, b).unwrap();
            let mut v: Vec<Vec<u64>> = (0..12)
                .map(|i| b.row(i).iter().chain(p.row(i)).map(|x| x.to_bits()).collect())
                .collect();
            v.sort();
            v
        };
        assert_eq!(pairs(&x0, &x1), pairs(&x0.gather_rows(&perm), &x1.gather_rows(&perm)));
    }

    #[test]
    fn config_validation() {
        let bad = Phase1Config {
            method: Method::Otcfm,
            batch_size: 1,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        assert!(Phase1Config {
            lr: 0.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert_eq!("I-CFM".parse::<Method>().unwrap(), Method::Icfm);
        assert_eq!("ot_cfm".parse::<Method>().unwrap(), Method::Otcfm);
        assert!("sbcfm".parse::<Method>().is_err());
    }
}
