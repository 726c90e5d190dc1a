//! Mini-batch couplings: cost matrices, exact and entropic solvers, pair sampling
//! and empirical squared 2-Wasserstein distances.

mod assignment;
mod cost;
mod sinkhorn;

pub use assignment::solve_exact;
pub use cost::{cost_matrix, CostMatrix, CostMode};
pub use sinkhorn::{solve_sinkhorn, SoftPlan};

use crate::diffcore::Tensor;
use crate::error::{shape_err, Error, Result};
use crate::rng::Rng;
use rand::distributions::{Distribution, WeightedIndex};

#[derive(Clone, Debug, PartialEq)]
pub enum Coupling {
    /// Row `i` (target) is paired with column `sigma[i]` (source).
    Assignment(Vec<usize>),
    SoftPlan(SoftPlan),
}

impl Coupling {
    /// `Σ C[i, σ(i)] / n` for assignments, `⟨C, P⟩` for soft plans.
    pub fn cost(&self, c: &CostMatrix) -> f64 {
        match self {
            Coupling::Assignment(s) => c.assignment_cost(s) / s.len().max(1) as f64,
            Coupling::SoftPlan(p) => p.transport_cost(c),
        }
    }
}

/// Index pairs `(i, j)` (target row, source column) drawn from a coupling.
///
/// An assignment always yields its full matching and ignores `k`; a soft plan yields
/// `k` independent draws proportional to its entries.
pub fn sample_pairs(plan: &Coupling, k: usize, rng: &mut Rng) -> Result<Vec<(usize, usize)>> {
    if k == 0 {
        return Err(Error::InvalidArgument("need at least one pair".into()));
    }
    match plan {
        Coupling::Assignment(sigma) => Ok(sigma.iter().copied().enumerate().collect()),
        Coupling::SoftPlan(p) => {
            let n = p.n();
            let dist = WeightedIndex::new(p.data().iter().map(|x| x.max(0.0)))
                .map_err(|e| Error::InvalidArgument(format!("cannot sample from plan: {e}")))?;
            Ok((0..k)
                .map(|_| {
                    let flat = dist.sample(rng);
                    (flat / n, flat % n)
                })
                .collect())
        }
    }
}

/// Exact `min_σ (1/n) Σ ‖xᵢ − y_σ(i)‖²` between equally sized point clouds.
pub fn empirical_w2(x: &Tensor, y: &Tensor) -> Result<f64> {
    if x.shape() != y.shape() || x.shape().len() != 2 {
        return Err(shape_err("empirical_w2", format!("{:?} vs {:?}", x.shape(), y.shape())));
    }
    let n = x.rows();
    if n == 0 {
        return Ok(0.0);
    }
    // Rows index x, columns index y.
    let c = cost_matrix(y, x, None, None, CostMode::SquaredEuclidean)?;
    let sigma = solve_exact(&c);
    Ok(c.assignment_cost(&sigma) / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use rand::Rng as _;

    fn cloud(rng: &mut Rng, n: usize) -> Tensor {
        let data = (0..n * 2).map(|_| rng.gen_range(-2.0..2.0)).collect();
        Tensor::matrix(n, 2, data).unwrap()
    }

    fn brute_w2(x: &Tensor, y: &Tensor) -> f64 {
        fn rec(x: &Tensor, y: &Tensor, i: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
            if i == x.rows() {
                *best = best.min(acc);
                return;
            }
            for j in 0..y.rows() {
                if !used[j] {
                    used[j] = true;
                    let c = cost::sq_dist(x.row(i), y.row(j));
                    rec(x, y, i + 1, used, acc + c, best);
                    used[j] = false;
                }
            }
        }
        let mut best = f64::INFINITY;
        rec(x, y, 0, &mut vec![false; y.rows()], 0.0, &mut best);
        best / x.rows() as f64
    }

    #[test]
    fn assignment_pairs() {
        let mut rng = seeded(0);
        let p = sample_pairs(&Coupling::Assignment(vec![0, 1, 2]), 99, &mut rng).unwrap();
        assert_eq!(p, vec![(0, 0), (1, 1), (2, 2)]);
        assert!(sample_pairs(&Coupling::Assignment(vec![0]), 0, &mut rng).is_err());
    }

    #[test]
    fn degenerate_soft_plan_repeats_its_pair() {
        let mut data = vec![0.0; 9];
        data[5] = 1.0;
        let plan = Coupling::SoftPlan(SoftPlan::from_vec(3, data).unwrap());
        let p = sample_pairs(&plan, 7, &mut seeded(1)).unwrap();
        assert_eq!(p, vec![(1, 2); 7]);
    }

    #[test]
    fn uniform_soft_plan_frequencies() {
        let plan = Coupling::SoftPlan(SoftPlan::from_vec(2, vec![0.25; 4]).unwrap());
        let k = 100_000;
        let pairs = sample_pairs(&plan, k, &mut seeded(2)).unwrap();
        let mut counts = [0usize; 4];
        for (i, j) in pairs {
            counts[i * 2 + j] += 1;
        }
        let sigma = (k as f64 * 0.25 * 0.75).sqrt();
        for c in counts {
            assert!((c as f64 - k as f64 * 0.25).abs() < 3.0 * sigma, "{counts:?}");
        }
    }

    #[test]
    fn w2_examples() {
        let mut rng = seeded(3);
        let x = cloud(&mut rng, 20);
        assert_eq!(empirical_w2(&x, &x).unwrap(), 0.0);
        let mut y = x.clone();
        for r in 0..y.rows() {
            y.row_mut(r)[0] += 0.5;
            y.row_mut(r)[1] -= 1.5;
        }
        assert!((empirical_w2(&x, &y).unwrap() - 2.5).abs() < 1e-12);
        assert!(empirical_w2(&x, &cloud(&mut rng, 3)).is_err());
    }

    #[test]
    fn w2_matches_enumeration() {
        let mut rng = seeded(4);
        for _ in 0..100 {
            let n = rng.gen_range(1..=7);
            let (x, y) = (cloud(&mut rng, n), cloud(&mut rng, n));
            let got = empirical_w2(&x, &y).unwrap();
            assert!((got - brute_w2(&x, &y)).abs() < 1e-10);
        }
    }

    #[test]
    fn w2_root_triangle_inequality() {
        let mut rng = seeded(5);
        for _ in 0..50 {
            let n = rng.gen_range(2..=30);
            let (x, y, z) = (cloud(&mut rng, n), cloud(&mut rng, n), cloud(&mut rng, n));
            let xz = empirical_w2(&x, &z).unwrap();
            let bound = (empirical_w2(&x, &y).unwrap().sqrt() + empirical_w2(&y, &z).unwrap().sqrt()).powi(2);
            assert!(xz <= bound + 1e-10);
        }
    }

    #[test]
    fn zero_velocity_oat_cost_is_squared_euclidean() {
        let mut rng = seeded(6);
        let (x0, x1) = (cloud(&mut rng, 6), cloud(&mut rng, 6));
        let z = Tensor::zeros(vec![6, 2]);
        let a = cost_matrix(&x0, &x1, Some(&z), Some(&z), CostMode::OatReduced).unwrap();
        let b = cost_matrix(&x0, &x1, None, None, CostMode::SquaredEuclidean).unwrap();
        assert_eq!(a.data(), b.data());
    }

    /// The full pairwise cost differs from twelve times the reduced cost by
    /// `4‖v0ⱼ‖² + 4‖v1ᵢ‖² + 4 v0ⱼ·v1ᵢ`. Only the cross term depends on the pairing.
    #[test]
    fn full_and_reduced_costs_differ_by_velocity_terms() {
        let mut rng = seeded(7);
        let n = 5;
        let (x0, x1, v0, v1) = (
            cloud(&mut rng, n),
            cloud(&mut rng, n),
            cloud(&mut rng, n),
            cloud(&mut rng, n),
        );
        let full = cost_matrix(&x0, &x1, Some(&v0), Some(&v1), CostMode::OatFull).unwrap();
        let red = cost_matrix(&x0, &x1, Some(&v0), Some(&v1), CostMode::OatReduced).unwrap();
        for i in 0..n {
            for j in 0..n {
                let (a, b) = (v0.row(j), v1.row(i));
                let extra = 4.0 * crate::geometry::norm_sq(a)
                    + 4.0 * crate::geometry::norm_sq(b)
                    + 4.0 * crate::geometry::dot(a, b);
                assert!((full.get(i, j) - 12.0 * red.get(i, j) - extra).abs() < 1e-10);
            }
        }
    }

    /// When one side's velocities are shared by the whole batch the cross term is the
    /// same for every pairing, so both costs select the same assignment.
    #[test]
    fn reduced_cost_selects_full_optimum_with_shared_target_velocity() {
        let mut rng = seeded(8);
        for _ in 0..100 {
            let n = rng.gen_range(2..=7);
            let (x0, x1, v0) = (cloud(&mut rng, n), cloud(&mut rng, n), cloud(&mut rng, n));
            let shared = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
            let v1 = Tensor::from_rows(&vec![shared; n]).unwrap();
            let full = cost_matrix(&x0, &x1, Some(&v0), Some(&v1), CostMode::OatFull).unwrap();
            let red = cost_matrix(&x0, &x1, Some(&v0), Some(&v1), CostMode::OatReduced).unwrap();
            let (a, b) = (solve_exact(&full), solve_exact(&red));
            let gap = (full.assignment_cost(&a) - full.assignment_cost(&b)).abs();
            assert!(a == b || gap < 1e-9);
        }
    }
}
