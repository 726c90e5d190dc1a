use crate::diffcore::Tensor;
use crate::error::{shape_err, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostMode {
    /// `‖x1ᵢ − x0ⱼ‖²`
    SquaredEuclidean,
    /// `‖x1ᵢ − x0ⱼ‖² − (x1ᵢ − x0ⱼ)ᵀ(v0ⱼ + v1ᵢ)`, the velocity-aware coupling cost used
    /// for refinement.
    OatReduced,
    /// Full pairwise acceleration cost between `(x0ⱼ, v0ⱼ)` and `(x1ᵢ, v1ᵢ)`.
    OatFull,
}

impl CostMode {
    pub fn needs_velocities(self) -> bool {
        !matches!(self, CostMode::SquaredEuclidean)
    }
}

/// Square cost matrix. Row `i` indexes the target batch, column `j` the source batch.
#[derive(Clone, Debug, PartialEq)]
pub struct CostMatrix {
    n: usize,
    data: Vec<f64>,
    mode: CostMode,
}

impl CostMatrix {
    pub fn from_rows(rows: &[Vec<f64>], mode: CostMode) -> Result<Self> {
        let n = rows.len();
        let mut data = Vec::with_capacity(n * n);
        for r in rows {
            if r.len() != n {
                return Err(shape_err(
                    "cost_matrix",
                    format!("row of length {} in {n}x{n}", r.len()),
                ));
            }
            data.extend_from_slice(r);
        }
        Self::from_vec(n, data, mode)
    }

    pub fn from_vec(n: usize, data: Vec<f64>, mode: CostMode) -> Result<Self> {
        if data.len() != n * n {
            return Err(shape_err("cost_matrix", format!("{} entries for {n}x{n}", data.len())));
        }
        if !data.iter().all(|c| c.is_finite()) {
            return Err(Error::NonFinite { op: "cost_matrix" });
        }
        Ok(Self { n, data, mode })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn mode(&self) -> CostMode {
        self.mode
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n..(i + 1) * self.n]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn median(&self) -> f64 {
        let mut v = self.data.clone();
        v.sort_by(f64::total_cmp);
        let m = v.len();
        if m == 0 {
            return 0.0;
        }
        if m % 2 == 1 {
            v[m / 2]
        } else {
            0.5 * (v[m / 2 - 1] + v[m / 2])
        }
    }

    /// Total cost of pairing row `i` with column `sigma[i]`.
    pub fn assignment_cost(&self, sigma: &[usize]) -> f64 {
        sigma.iter().enumerate().map(|(i, &j)| self.get(i, j)).sum()
    }
}

fn check_batch(name: &str, t: &Tensor, n: usize, d: usize) -> Result<()> {
    if t.shape() != [n, d] {
        return Err(shape_err(
            "cost_matrix",
            format!("{name} has shape {:?}, expected [{n}, {d}]", t.shape()),
        ));
    }
    Ok(())
}

/// Pairwise coupling costs between a source batch `x0` and target batch `x1`.
pub fn cost_matrix(
    x0: &Tensor,
    x1: &Tensor,
    v0: Option<&Tensor>,
    v1: Option<&Tensor>,
    mode: CostMode,
) -> Result<CostMatrix> {
    let n = x0.rows();
    let d = x0.cols();
    check_batch("x0", x0, n, d)?;
    check_batch("x1", x1, n, d)?;
    let vel = if mode.needs_velocities() {
        match (v0, v1) {
            (Some(v0), Some(v1)) => {
                check_batch("v0", v0, n, d)?;
                check_batch("v1", v1, n, d)?;
                Some((v0, v1))
            }
            _ => {
                return Err(Error::InvalidArgument(format!(
                    "{mode:?} cost needs both boundary velocity batches"
                )))
            }
        }
    } else {
        None
    };

    let mut data = Vec::with_capacity(n * n);
    for i in 0..n {
        let a = x1.row(i);
        for j in 0..n {
            let b = x0.row(j);
            let c = match (mode, vel) {
                (CostMode::SquaredEuclidean, _) => sq_dist(a, b),
                (CostMode::OatReduced, Some((v0, v1))) => {
                    let (w0, w1) = (v0.row(j), v1.row(i));
                    let mut c = 0.0;
                    for k in 0..d {
                        let u = a[k] - b[k];
                        c += u * u - u * (w0[k] + w1[k]);
                    }
                    c
                }
                (CostMode::OatFull, Some((v0, v1))) => {
                    let (w0, w1) = (v0.row(j), v1.row(i));
                    let mut align = 0.0;
                    let mut accel = 0.0;
                    for k in 0..d {
                        let r = a[k] - b[k] - 0.5 * (w0[k] + w1[k]);
                        let w = w1[k] - w0[k];
                        align += r * r;
                        accel += w * w;
                    }
                    12.0 * align + accel
                }
                _ => unreachable!("velocities validated above"),
            };
            data.push(c);
        }
    }
    CostMatrix::from_vec(n, data, mode)
}

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}
