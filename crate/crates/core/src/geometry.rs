//! Second-order transport between phase-space endpoints.
//!
//! For endpoints `z0 = (x0, v0)` and `z1 = (x1, v1)` on a unit time horizon, the
//! squared acceleration cost is
//!
//! ```text
//! c²(z0, z1) = 12 ‖u − (v0 + v1)/2‖² + ‖v1 − v0‖²,    u = x1 − x0,
//! ```
//!
//! which is exactly `∫₀¹ ‖ẍ(t)‖² dt` along the unique cubic matching both positions
//! and both velocities. The remaining functions are the single-pair refinement loss,
//! its minimizer over the mid-path velocity, and the constant of the lower bound
//! relating the two.

use crate::error::{Error, Result};

fn check_dims(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Shape {
            op: "geometry",
            detail: format!("dimensions {} and {}", a.len(), b.len()),
        });
    }
    Ok(())
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm_sq(a: &[f64]) -> f64 {
    dot(a, a)
}

fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

/// A point in the product space of positions and velocities.
#[derive(Clone, Debug, PartialEq)]
pub struct PhasePoint {
    pub x: Vec<f64>,
    pub v: Vec<f64>,
}

impl PhasePoint {
    pub fn new(x: Vec<f64>, v: Vec<f64>) -> Result<Self> {
        if x.is_empty() {
            return Err(Error::InvalidArgument("phase point needs dimension >= 1".into()));
        }
        check_dims(&x, &v)?;
        if !x.iter().chain(&v).all(|c| c.is_finite()) {
            return Err(Error::NonFinite { op: "phase_point" });
        }
        Ok(Self { x, v })
    }

    pub fn dim(&self) -> usize {
        self.x.len()
    }
}

/// Squared acceleration cost between two endpoints over horizon `horizon`.
pub fn oat_cost(z0: &PhasePoint, z1: &PhasePoint, horizon: f64) -> Result<f64> {
    if !(horizon > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "horizon must be positive, got {horizon}"
        )));
    }
    check_dims(&z0.x, &z1.x)?;
    let mut align = 0.0;
    let mut accel = 0.0;
    for k in 0..z0.dim() {
        let a = (z1.x[k] - z0.x[k]) / horizon - 0.5 * (z1.v[k] + z0.v[k]);
        let w = z1.v[k] - z0.v[k];
        align += a * a;
        accel += w * w;
    }
    Ok(12.0 * align + accel)
}

/// `x(t) = x0 + v0 t + b t² + c t³` on `t ∈ [0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct CubicPath {
    pub x0: Vec<f64>,
    pub v0: Vec<f64>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
}

impl CubicPath {
    pub fn position(&self, t: f64) -> Vec<f64> {
        (0..self.x0.len())
            .map(|k| self.x0[k] + t * (self.v0[k] + t * (self.b[k] + t * self.c[k])))
            .collect()
    }

    pub fn velocity(&self, t: f64) -> Vec<f64> {
        (0..self.x0.len())
            .map(|k| self.v0[k] + t * (2.0 * self.b[k] + 3.0 * t * self.c[k]))
            .collect()
    }

    pub fn acceleration(&self, t: f64) -> Vec<f64> {
        (0..self.x0.len())
            .map(|k| 2.0 * self.b[k] + 6.0 * t * self.c[k])
            .collect()
    }
}

/// The minimum-acceleration path between two endpoints on a unit horizon.
pub fn cubic_minimizer(z0: &PhasePoint, z1: &PhasePoint) -> Result<CubicPath> {
    check_dims(&z0.x, &z1.x)?;
    let d = z0.dim();
    let mut b = Vec::with_capacity(d);
    let mut c = Vec::with_capacity(d);
    for k in 0..d {
        let u = z1.x[k] - z0.x[k];
        b.push(3.0 * u - 2.0 * z0.v[k] - z1.v[k]);
        c.push(z0.v[k] + z1.v[k] - 2.0 * u);
    }
    Ok(CubicPath {
        x0: z0.x.clone(),
        v0: z0.v.clone(),
        b,
        c,
    })
}

/// `∫₀¹ ‖ẍ(t)‖² dt` for a cubic path, in closed form.
pub fn accel_energy(path: &CubicPath) -> f64 {
    4.0 * norm_sq(&path.b) + 12.0 * dot(&path.b, &path.c) + 12.0 * norm_sq(&path.c)
}

/// Tangential and normal parts of an acceleration relative to a velocity.
#[derive(Clone, Debug, PartialEq)]
pub struct AccelSplit {
    pub a_par: Vec<f64>,
    pub a_perp: Vec<f64>,
}

pub fn split_acceleration(v: &[f64], a: &[f64]) -> Result<AccelSplit> {
    check_dims(v, a)?;
    let vv = norm_sq(v);
    if vv == 0.0 {
        return Err(Error::InvalidArgument("velocity is zero; direction undefined".into()));
    }
    let s = dot(v, a) / vv;
    let a_par: Vec<f64> = v.iter().map(|x| s * x).collect();
    let a_perp = sub(a, &a_par);
    Ok(AccelSplit { a_par, a_perp })
}

/// Norm of the component of `w` orthogonal to `u` (`u` assumed non-zero).
fn orthogonal_norm(w: &[f64], u: &[f64]) -> f64 {
    let s = dot(w, u) / norm_sq(u);
    w.iter()
        .zip(u)
        .map(|(wi, ui)| (wi - s * ui).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Whether the minimum-acceleration path between the endpoints is a straight line:
/// both velocities collinear with the displacement, within `tol · (1 + ‖u‖)`.
pub fn is_straight_pair(z0: &PhasePoint, z1: &PhasePoint, tol: f64) -> bool {
    let u = sub(&z1.x, &z0.x);
    let unorm = norm_sq(&u).sqrt();
    let bound = tol * (1.0 + unorm);
    if unorm == 0.0 {
        // Zero displacement: only mutual collinearity of the velocities matters.
        let (n0, n1) = (norm_sq(&z0.v), norm_sq(&z1.v));
        return if n0 == 0.0 || n1 == 0.0 {
            true
        } else if n0 >= n1 {
            orthogonal_norm(&z1.v, &z0.v) <= bound
        } else {
            orthogonal_norm(&z0.v, &z1.v) <= bound
        };
    }
    orthogonal_norm(&z0.v, &u) <= bound && orthogonal_norm(&z1.v, &u) <= bound
}

/// Single-pair refinement loss at mid-path velocity `v_t`, with both difference
/// quotients replaced by the chord displacement `x1 − x0`.
pub fn pair_loss(z0: &PhasePoint, z1: &PhasePoint, v_t: &[f64], alpha: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    check_dims(&z0.x, &z1.x)?;
    check_dims(&z0.x, v_t)?;
    let mut align = 0.0;
    let mut accel = 0.0;
    for k in 0..z0.dim() {
        let u = z1.x[k] - z0.x[k];
        let a0 = u - 0.5 * (z0.v[k] + v_t[k]);
        let a1 = u - 0.5 * (v_t[k] + z1.v[k]);
        let w0 = v_t[k] - z0.v[k];
        let w1 = z1.v[k] - v_t[k];
        align += a0 * a0 + a1 * a1;
        accel += w0 * w0 + w1 * w1;
    }
    Ok(alpha * align + (1.0 - alpha) * accel)
}

/// Minimizer of [`pair_loss`] over the mid-path velocity, given the displacement
/// `u = x1 − x0` and mean endpoint velocity `v_bar = (v0 + v1)/2`.
pub fn optimal_vt(u: &[f64], v_bar: &[f64], alpha: f64) -> Result<Vec<f64>> {
    if !(0.0..4.0 / 3.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!(
            "alpha must lie in [0, 4/3), got {alpha}"
        )));
    }
    check_dims(u, v_bar)?;
    let denom = 4.0 - 3.0 * alpha;
    let cu = 2.0 * alpha / denom;
    let cv = (4.0 - 5.0 * alpha) / denom;
    Ok(u.iter().zip(v_bar).map(|(a, b)| cu * a + cv * b).collect())
}

/// Constant `c(α)` such that `min_{v_t} pair_loss ≥ c(α) · oat_cost`; maximal at α = 2/3.
pub fn bound_constant(alpha: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    let first = alpha * (1.0 - alpha) / (6.0 - 4.5 * alpha);
    let second = 0.5 - 0.375 * alpha;
    Ok(first.min(second))
}
