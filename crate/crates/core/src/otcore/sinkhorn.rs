use super::cost::CostMatrix;
use crate::error::{Error, Result};

/// Entropic transport plan with uniform marginals `1/n`.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftPlan {
    n: usize,
    data: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    /// L1 row-marginal violation after each iteration (columns are exact after
    /// every column update).
    pub violations: Vec<f64>,
}

impl SoftPlan {
    pub fn from_vec(n: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * n {
            return Err(Error::Shape {
                op: "soft_plan",
                detail: format!("{} entries for {n}x{n}", data.len()),
            });
        }
        Ok(Self {
            n,
            data,
            converged: true,
            iterations: 0,
            violations: Vec::new(),
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row_sums(&self) -> Vec<f64> {
        self.data.chunks_exact(self.n.max(1)).map(|r| r.iter().sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.n];
        for r in self.data.chunks_exact(self.n.max(1)) {
            for (o, x) in out.iter_mut().zip(r) {
                *o += x;
            }
        }
        out
    }

    /// `⟨C, P⟩`
    pub fn transport_cost(&self, c: &CostMatrix) -> f64 {
        self.data.iter().zip(c.data()).map(|(p, c)| p * c).sum()
    }
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + values.map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Log-domain Sinkhorn iterations for `min ⟨C, P⟩ + ε⟨P, log P⟩` with uniform marginals.
///
/// Stops once the row-marginal violation drops below `tol`; otherwise returns the
/// last iterate with `converged = false`.
pub fn solve_sinkhorn(c: &CostMatrix, epsilon: f64, max_iters: usize, tol: f64) -> Result<SoftPlan> {
    if !(epsilon > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "epsilon must be positive, got {epsilon}"
        )));
    }
    let n = c.n();
    if n == 0 {
        return SoftPlan::from_vec(0, Vec::new());
    }
    let log_w = -(n as f64).ln();
    let w = 1.0 / n as f64;
    let mut f = vec![0.0; n];
    let mut g = vec![0.0; n];
    let mut violations = Vec::new();
    let mut converged = false;
    let mut iterations = 0;

    for _ in 0..max_iters {
        iterations += 1;
        for i in 0..n {
            let row = c.row(i);
            f[i] = epsilon * log_w - epsilon * log_sum_exp((0..n).map(|j| (g[j] - row[j]) / epsilon));
        }
        for j in 0..n {
            g[j] = epsilon * log_w - epsilon * log_sum_exp((0..n).map(|i| (f[i] - c.get(i, j)) / epsilon));
        }
        let mut viol = 0.0;
        for i in 0..n {
            let row = c.row(i);
            let s: f64 = (0..n).map(|j| ((f[i] + g[j] - row[j]) / epsilon).exp()).sum();
            viol += (s - w).abs();
        }
        if !viol.is_finite() {
            return Err(Error::NonFinite { op: "sinkhorn" });
        }
        violations.push(viol);
        if viol < tol {
            converged = true;
            break;
        }
    }

    let mut data = Vec::with_capacity(n * n);
    for i in 0..n {
        let row = c.row(i);
        for j in 0..n {
            data.push(((f[i] + g[j] - row[j]) / epsilon).exp());
        }
    }
    Ok(SoftPlan {
        n,
        data,
        converged,
        iterations,
        violations,
    })
}
