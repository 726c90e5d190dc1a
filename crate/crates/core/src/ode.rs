//! Integrators for `dx/dt = v(x, t)` on `t ∈ [0, 1]`, path energy and trajectory
//! export.

use std::io::Write;

use crate::diffcore::Tensor;
use crate::error::{shape_err, Error, Result};
use crate::model::VelocityField;

/// A time-dependent vector field evaluated on `[B, d]` batches.
pub trait VectorField: Sync {
    fn dim(&self) -> usize;

    fn eval(&self, x: &Tensor, t: f64) -> Result<Tensor>;
}

impl VectorField for VelocityField {
    fn dim(&self) -> usize {
        VelocityField::dim(self)
    }

    fn eval(&self, x: &Tensor, t: f64) -> Result<Tensor> {
        self.forward_at(x, t)
    }
}

/// A field given by a per-row closure `f(x, t, out)`.
pub struct FnField<F> {
    d: usize,
    f: F,
}

impl<F> FnField<F>
where
    F: Fn(&[f64], f64, &mut [f64]) + Sync,
{
    pub fn new(d: usize, f: F) -> Self {
        Self { d, f }
    }
}

impl<F> VectorField for FnField<F>
where
    F: Fn(&[f64], f64, &mut [f64]) + Sync,
{
    fn dim(&self) -> usize {
        self.d
    }

    fn eval(&self, x: &Tensor, t: f64) -> Result<Tensor> {
        let mut out = Tensor::zeros(x.shape().to_vec());
        for i in 0..x.rows() {
            (self.f)(x.row(i), t, out.row_mut(i));
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    /// One `[B, d]` state per time.
    pub states: Vec<Tensor>,
    /// Field evaluations at every `(states[k], times[k])`, when recorded.
    pub velocities: Option<Vec<Tensor>>,
    /// Number of field evaluations spent.
    pub nfe: usize,
}

impl Trajectory {
    pub fn final_state(&self) -> &Tensor {
        self.states.last().expect("trajectories hold at least one state")
    }

    pub fn batch_size(&self) -> usize {
        self.states[0].rows()
    }

    pub fn dim(&self) -> usize {
        self.states[0].cols()
    }
}

fn check_start(field: &dyn VectorField, x0: &Tensor) -> Result<()> {
    match x0.shape() {
        [_, d] if *d == field.dim() => Ok(()),
        s => Err(shape_err(
            "integrate",
            format!("x0 has shape {s:?}, field dimension is {}", field.dim()),
        )),
    }
}

/// `y + h·k`
fn axpy(y: &Tensor, h: f64, k: &Tensor) -> Tensor {
    let mut out = y.clone();
    for (o, v) in out.data_mut().iter_mut().zip(k.data()) {
        *o += h * v;
    }
    out
}

/// `y + Σ cᵢ·kᵢ`
fn combine(y: &Tensor, terms: &[(f64, &Tensor)]) -> Tensor {
    let mut out = y.clone();
    for &(c, k) in terms {
        if c != 0.0 {
            for (o, v) in out.data_mut().iter_mut().zip(k.data()) {
                *o += c * v;
            }
        }
    }
    out
}

fn finite_or(step: usize, x: Tensor) -> Result<Tensor> {
    if x.is_finite() {
        Ok(x)
    } else {
        Err(Error::NonFiniteState { step })
    }
}

fn eval_at(field: &dyn VectorField, x: &Tensor, t: f64, step: usize) -> Result<Tensor> {
    match field.eval(x, t) {
        Ok(v) => finite_or(step, v),
        Err(Error::NonFinite { .. }) => Err(Error::NonFiniteState { step }),
        Err(e) => Err(e),
    }
}

fn uniform_grid(n_steps: usize) -> Result<Vec<f64>> {
    if n_steps == 0 {
        return Err(Error::InvalidArgument("n_steps must be at least 1".into()));
    }
    Ok((0..=n_steps).map(|k| k as f64 / n_steps as f64).collect())
}

/// Fixed-step explicit Euler on the uniform grid, recording velocities.
pub fn integrate_euler(field: &dyn VectorField, x0: &Tensor, n_steps: usize) -> Result<Trajectory> {
    check_start(field, x0)?;
    let times = uniform_grid(n_steps)?;
    let h = 1.0 / n_steps as f64;
    let mut states = vec![x0.clone()];
    let mut velocities = Vec::with_capacity(n_steps + 1);
    for k in 0..n_steps {
        let v = eval_at(field, &states[k], times[k], k)?;
        states.push(finite_or(k + 1, axpy(&states[k], h, &v))?);
        velocities.push(v);
    }
    velocities.push(eval_at(field, &states[n_steps], 1.0, n_steps)?);
    Ok(Trajectory {
        times,
        states,
        velocities: Some(velocities),
        nfe: n_steps + 1,
    })
}

/// Classical fourth-order Runge–Kutta on the uniform grid, recording velocities.
pub fn integrate_rk4(field: &dyn VectorField, x0: &Tensor, n_steps: usize) -> Result<Trajectory> {
    check_start(field, x0)?;
    let times = uniform_grid(n_steps)?;
    let h = 1.0 / n_steps as f64;
    let mut states = vec![x0.clone()];
    let mut velocities = Vec::with_capacity(n_steps + 1);
    for k in 0..n_steps {
        let (y, t) = (&states[k], times[k]);
        let k1 = eval_at(field, y, t, k)?;
        let k2 = eval_at(field, &axpy(y, 0.5 * h, &k1), t + 0.5 * h, k)?;
        let k3 = eval_at(field, &axpy(y, 0.5 * h, &k2), t + 0.5 * h, k)?;
        let k4 = eval_at(field, &axpy(y, h, &k3), t + h, k)?;
        let next = combine(y, &[(h / 6.0, &k1), (h / 3.0, &k2), (h / 3.0, &k3), (h / 6.0, &k4)]);
        states.push(finite_or(k + 1, next)?);
        velocities.push(k1);
    }
    velocities.push(eval_at(field, &states[n_steps], 1.0, n_steps)?);
    Ok(Trajectory {
        times,
        states,
        velocities: Some(velocities),
        nfe: 4 * n_steps + 1,
    })
}

// Dormand–Prince 5(4) tableau.
const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const A71: f64 = 35.0 / 384.0;
const A73: f64 = 500.0 / 1113.0;
const A74: f64 = 125.0 / 192.0;
const A75: f64 = -2187.0 / 6784.0;
const A76: f64 = 11.0 / 84.0;
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;
// Dense output of order 4.
const D1: f64 = -12715105075.0 / 11282082432.0;
const D3: f64 = 87487479700.0 / 32700410799.0;
const D4: f64 = -10690763975.0 / 1880347072.0;
const D5: f64 = 701980252875.0 / 199316789632.0;
const D6: f64 = -1453857185.0 / 822651844.0;
const D7: f64 = 69997945.0 / 29380423.0;

const SAFETY: f64 = 0.9;
const FAC_MIN: f64 = 0.2;
const FAC_MAX: f64 = 10.0;
const BETA: f64 = 0.04;
const MIN_STEP: f64 = 1e-12;
const MAX_STEPS: usize = 1_000_000;

fn scaled_rms(x: &Tensor, y0: &Tensor, y1: Option<&Tensor>, atol: f64, rtol: f64) -> f64 {
    let n = x.numel().max(1) as f64;
    let mut acc = 0.0;
    for (i, &e) in x.data().iter().enumerate() {
        let mut scale = y0.data()[i].abs();
        if let Some(y1) = y1 {
            scale = scale.max(y1.data()[i].abs());
        }
        let r = e / (atol + rtol * scale);
        acc += r * r;
    }
    (acc / n).sqrt()
}

fn initial_step(field: &dyn VectorField, y0: &Tensor, f0: &Tensor, atol: f64, rtol: f64) -> Result<f64> {
    let d0 = scaled_rms(y0, y0, None, atol, rtol);
    let d1 = scaled_rms(f0, y0, None, atol, rtol);
    let h0 = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
    let f1 = eval_at(field, &axpy(y0, h0, f0), h0, 0)?;
    let mut diff = f1;
    for (a, b) in diff.data_mut().iter_mut().zip(f0.data()) {
        *a -= b;
    }
    let d2 = scaled_rms(&diff, y0, None, atol, rtol) / h0;
    let m = d1.max(d2);
    let h1 = if m <= 1e-15 {
        (h0 * 1e-3).max(1e-6)
    } else {
        (0.01 / m).powf(0.2)
    };
    Ok((100.0 * h0).min(h1).min(1.0))
}

/// Adaptive Dormand–Prince 5(4) with PI step control. States are reported at the
/// points of `grid` (increasing, from 0 to 1) through the order-4 dense output.
pub fn integrate_dopri5(
    field: &dyn VectorField,
    x0: &Tensor,
    atol: f64,
    rtol: f64,
    grid: &[f64],
) -> Result<Trajectory> {
    check_start(field, x0)?;
    if !(atol > 0.0 && rtol > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "tolerances must be positive, got atol={atol}, rtol={rtol}"
        )));
    }
    if grid.len() < 2 || grid[0] != 0.0 || *grid.last().unwrap() != 1.0 || grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidArgument(
            "output grid must increase strictly from 0 to 1".into(),
        ));
    }

    let mut states = vec![x0.clone()];
    let mut next_out = 1;
    let mut y = x0.clone();
    let mut t = 0.0;
    let mut k1 = eval_at(field, &y, t, 0)?;
    let mut nfe = 1;
    let mut h = initial_step(field, &y, &k1, atol, rtol)?;
    nfe += 1;
    let mut fac_old: f64 = 1e-4;
    let mut rejected_last = false;
    let mut steps = 0;

    while t < 1.0 {
        steps += 1;
        if steps > MAX_STEPS {
            return Err(Error::StepUnderflow { t, h });
        }
        if h < MIN_STEP {
            return Err(Error::StepUnderflow { t, h });
        }
        let last = t + h >= 1.0;
        if last {
            h = 1.0 - t;
        }
        let stages = (|| -> Result<_> {
            let k2 = field.eval(&axpy(&y, h * A21, &k1), t + C2 * h)?;
            let k3 = field.eval(&combine(&y, &[(h * A31, &k1), (h * A32, &k2)]), t + C3 * h)?;
            let k4 = field.eval(
                &combine(&y, &[(h * A41, &k1), (h * A42, &k2), (h * A43, &k3)]),
                t + C4 * h,
            )?;
            let k5 = field.eval(
                &combine(&y, &[(h * A51, &k1), (h * A52, &k2), (h * A53, &k3), (h * A54, &k4)]),
                t + C5 * h,
            )?;
            let k6 = field.eval(
                &combine(
                    &y,
                    &[
                        (h * A61, &k1),
                        (h * A62, &k2),
                        (h * A63, &k3),
                        (h * A64, &k4),
                        (h * A65, &k5),
                    ],
                ),
                t + h,
            )?;
            let y_new = combine(
                &y,
                &[
                    (h * A71, &k1),
                    (h * A73, &k3),
                    (h * A74, &k4),
                    (h * A75, &k5),
                    (h * A76, &k6),
                ],
            );
            let k7 = field.eval(&y_new, t + h)?;
            Ok((k2, k3, k4, k5, k6, y_new, k7))
        })();
        nfe += 6;
        let (_, k3, k4, k5, k6, y_new, k7) = match stages {
            Ok(s) if s.5.is_finite() && s.6.is_finite() => s,
            Ok(_) | Err(Error::NonFinite { .. }) => {
                // Treat a blow-up inside the step as a rejection.
                h *= FAC_MIN;
                rejected_last = true;
                continue;
            }
            Err(e) => return Err(e),
        };
        let err_vec = combine(
            &Tensor::zeros(y.shape().to_vec()),
            &[
                (h * E1, &k1),
                (h * E3, &k3),
                (h * E4, &k4),
                (h * E5, &k5),
                (h * E6, &k6),
                (h * E7, &k7),
            ],
        );
        let err = scaled_rms(&err_vec, &y, Some(&y_new), atol, rtol);

        let fac11 = err.powf(0.2 - BETA * 0.75);
        if err <= 1.0 {
            let fac = (fac11 / fac_old.powf(BETA) / SAFETY).clamp(1.0 / FAC_MAX, 1.0 / FAC_MIN);
            let mut h_new = h / fac;
            fac_old = err.max(1e-4);

            let t_new = if last { 1.0 } else { t + h };
            while next_out < grid.len() && grid[next_out] <= t_new {
                let s = grid[next_out];
                if s == t_new {
                    states.push(y_new.clone());
                } else {
                    states.push(dense(&y, &y_new, &k1, &k3, &k4, &k5, &k6, &k7, h, (s - t) / h));
                }
                next_out += 1;
            }
            if rejected_last {
                h_new = h_new.min(h);
            }
            rejected_last = false;
            y = y_new;
            k1 = k7;
            t = t_new;
            h = h_new;
        } else {
            h /= (fac11 / SAFETY).min(1.0 / FAC_MIN);
            rejected_last = true;
        }
    }
    Ok(Trajectory {
        times: grid.to_vec(),
        states,
        velocities: None,
        nfe,
    })
}

#[allow(clippy::too_many_arguments)]
fn dense(
    y0: &Tensor,
    y1: &Tensor,
    k1: &Tensor,
    k3: &Tensor,
    k4: &Tensor,
    k5: &Tensor,
    k6: &Tensor,
    k7: &Tensor,
    h: f64,
    theta: f64,
) -> Tensor {
    let th1 = 1.0 - theta;
    let mut out = y0.clone();
    for (i, o) in out.data_mut().iter_mut().enumerate() {
        let r1 = y0.data()[i];
        let r2 = y1.data()[i] - r1;
        let r3 = h * k1.data()[i] - r2;
        let r4 = r2 - h * k7.data()[i] - r3;
        let r5 = h
            * (D1 * k1.data()[i]
                + D3 * k3.data()[i]
                + D4 * k4.data()[i]
                + D5 * k5.data()[i]
                + D6 * k6.data()[i]
                + D7 * k7.data()[i]);
        *o = r1 + theta * (r2 + th1 * (r3 + theta * (r4 + th1 * r5)));
    }
    out
}

/// Trapezoidal `∫₀¹ mean_b ‖v(x_b(t), t)‖² dt` on the trajectory grid.
pub fn path_energy(traj: &Trajectory) -> Result<f64> {
    let vel = traj
        .velocities
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("trajectory carries no velocities".into()))?;
    let b = traj.batch_size().max(1) as f64;
    let speed: Vec<f64> = vel
        .iter()
        .map(|v| v.data().iter().map(|x| x * x).sum::<f64>() / b)
        .collect();
    Ok(traj
        .times
        .windows(2)
        .zip(speed.windows(2))
        .map(|(t, s)| 0.5 * (t[1] - t[0]) * (s[0] + s[1]))
        .sum())
}

/// Writes `sample_id,t,x_1..x_d` rows, grouped by sample.
pub fn write_trajectory_csv(traj: &Trajectory, mut out: impl Write) -> Result<()> {
    let d = traj.dim();
    let mut header = String::from("sample_id,t");
    for k in 1..=d {
        header.push_str(&format!(",x_{k}"));
    }
    writeln!(out, "{header}")?;
    for i in 0..traj.batch_size() {
        for (t, s) in traj.times.iter().zip(&traj.states) {
            write!(out, "{i},{t}")?;
            for x in s.row(i) {
                write!(out, ",{x}")?;
            }
            writeln!(out)?;
        }
    }
    Ok(())
}
