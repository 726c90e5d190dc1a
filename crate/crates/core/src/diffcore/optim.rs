use super::params::ParamVector;
use crate::error::{shape_err, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self::with_hyper(len, 0.9, 0.999, 1e-8)
    }

    pub fn with_hyper(len: usize, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
            beta1,
            beta2,
            eps,
        }
    }

    /// In-place bias-corrected Adam update.
    pub fn update(&mut self, params: &mut ParamVector, grads: &ParamVector, lr: f64) -> Result<()> {
        let n = params.len();
        if grads.len() != n || self.m.len() != n || self.v.len() != n {
            return Err(shape_err(
                "adam_step",
                format!(
                    "params {n}, grads {}, moments {}/{}",
                    grads.len(),
                    self.m.len(),
                    self.v.len()
                ),
            ));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        for (((p, &g), m), v) in params
            .as_mut_slice()
            .iter_mut()
            .zip(grads.as_slice())
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    }
}

/// Functional form of [`AdamState::update`].
pub fn adam_step(
    params: &ParamVector,
    grads: &ParamVector,
    state: &AdamState,
    lr: f64,
) -> Result<(ParamVector, AdamState)> {
    let mut p = params.clone();
    let mut s = state.clone();
    s.update(&mut p, grads, lr)?;
    Ok((p, s))
}

/// Rescales `grads` onto the ball of radius `max_norm` if it lies outside it.
pub fn clip_grad_norm(grads: &ParamVector, max_norm: f64) -> ParamVector {
    let mut out = grads.clone();
    clip_grad_norm_in_place(&mut out, max_norm);
    out
}

/// Returns the pre-clipping norm.
pub fn clip_grad_norm_in_place(grads: &mut ParamVector, max_norm: f64) -> f64 {
    let norm = grads.norm();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        grads.as_mut_slice().iter_mut().for_each(|g| *g *= s);
    }
    norm
}
