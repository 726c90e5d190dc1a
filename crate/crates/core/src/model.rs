//! The velocity network `v_θ(x, t)` and the slowly updated target copy that supplies
//! boundary velocities during refinement.
//!
//! The network is an MLP on `concat(x, t)` with SELU after every hidden layer and a
//! linear head. Parameters live in one flat [`ParamVector`] with blocks
//! `l{k}.weight` (`[fan_in, fan_out]`) and `l{k}.bias`.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::diffcore::{gemm, Graph, ParamVars, ParamVector, Tensor, Var, SELU_ALPHA, SELU_LAMBDA};
use crate::error::{shape_err, Error, Result};
use crate::rng::seeded;

pub const DEFAULT_HIDDEN: [usize; 3] = [64, 64, 64];

const MAGIC: &[u8; 6] = b"OATFM1";

#[derive(Clone, Debug, PartialEq)]
pub struct VelocityField {
    d: usize,
    hidden: Vec<usize>,
    params: ParamVector,
}

fn layout(d: usize, hidden: &[usize]) -> Vec<(String, Vec<usize>)> {
    let mut widths = Vec::with_capacity(hidden.len() + 2);
    widths.push(d + 1);
    widths.extend_from_slice(hidden);
    widths.push(d);
    let mut blocks = Vec::new();
    for (k, w) in widths.windows(2).enumerate() {
        blocks.push((format!("l{k}.weight"), vec![w[0], w[1]]));
        blocks.push((format!("l{k}.bias"), vec![w[1]]));
    }
    blocks
}

fn selu(x: f64) -> f64 {
    if x > 0.0 {
        SELU_LAMBDA * x
    } else {
        SELU_LAMBDA * SELU_ALPHA * (x.exp() - 1.0)
    }
}

impl VelocityField {
    /// All-zero parameters; the field is identically zero.
    pub fn zeros(d: usize, hidden: &[usize]) -> Result<Self> {
        if d == 0 {
            return Err(Error::InvalidArgument("dimension must be at least 1".into()));
        }
        if hidden.contains(&0) {
            return Err(Error::InvalidArgument("hidden widths must be positive".into()));
        }
        Ok(Self {
            d,
            hidden: hidden.to_vec(),
            params: ParamVector::zeros(layout(d, hidden)),
        })
    }

    /// Seeded initialization with the default three hidden layers of width 64.
    pub fn init(d: usize, seed: u64) -> Result<Self> {
        Self::init_with(d, &DEFAULT_HIDDEN, seed)
    }

    /// Weights uniform on `±1/√fan_in`, biases zero.
    pub fn init_with(d: usize, hidden: &[usize], seed: u64) -> Result<Self> {
        let mut field = Self::zeros(d, hidden)?;
        let mut rng = seeded(seed);
        for i in 0..field.n_layers() {
            let block = &field.params.layout()[2 * i];
            let bound = 1.0 / (block.shape[0] as f64).sqrt();
            for w in field.params.block_mut(2 * i) {
                *w = rng.gen_range(-bound..bound);
            }
        }
        Ok(field)
    }

    pub fn from_params(d: usize, hidden: &[usize], params: ParamVector) -> Result<Self> {
        let field = Self::zeros(d, hidden)?;
        if !field.params.same_layout(&params) {
            return Err(shape_err(
                "velocity_field",
                "parameter layout does not match architecture",
            ));
        }
        Ok(Self { params, ..field })
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn hidden(&self) -> &[usize] {
        &self.hidden
    }

    pub fn n_layers(&self) -> usize {
        self.hidden.len() + 1
    }

    pub fn params(&self) -> &ParamVector {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamVector {
        &mut self.params
    }

    pub fn same_architecture(&self, other: &VelocityField) -> bool {
        self.d == other.d && self.hidden == other.hidden
    }

    fn check_input(&self, x: &Tensor, t_len: usize) -> Result<usize> {
        let b = match x.shape() {
            [b, d] if *d == self.d => *b,
            s => {
                return Err(shape_err(
                    "forward",
                    format!("x has shape {s:?}, field dimension is {}", self.d),
                ))
            }
        };
        if t_len != b {
            return Err(shape_err("forward", format!("{t_len} times for {b} positions")));
        }
        Ok(b)
    }

    /// Batched evaluation without recording a graph.
    pub fn forward(&self, x: &Tensor, t: &[f64]) -> Result<Tensor> {
        let b = self.check_input(x, t.len())?;
        let mut width = self.d + 1;
        let mut h = Vec::with_capacity(b * width);
        for (row, &ti) in x.row_iter().zip(t) {
            h.extend_from_slice(row);
            h.push(ti);
        }
        let last = self.n_layers() - 1;
        for k in 0..self.n_layers() {
            let w = self.params.block(2 * k);
            let bias = self.params.block(2 * k + 1);
            let out_w = bias.len();
            let mut out = vec![0.0; b * out_w];
            for r in out.chunks_exact_mut(out_w) {
                r.copy_from_slice(bias);
            }
            gemm(b, width, out_w, &h, false, w, false, &mut out, true);
            if k != last {
                out.iter_mut().for_each(|v| *v = selu(*v));
            }
            h = out;
            width = out_w;
        }
        let out = Tensor::matrix(b, self.d, h)?;
        if !out.is_finite() {
            return Err(Error::NonFinite { op: "forward" });
        }
        Ok(out)
    }

    /// Evaluates every row of `x` at the same time `t`.
    pub fn forward_at(&self, x: &Tensor, t: f64) -> Result<Tensor> {
        self.forward(x, &vec![t; x.rows()])
    }

    /// Records the forward pass on `graph`. `x` is `[B, d]`, `t` is `[B, 1]`, and
    /// `vars` must hold this field's blocks registered on the same graph.
    pub fn forward_graph(&self, graph: &mut Graph, vars: &ParamVars, x: Var, t: Var) -> Result<Var> {
        if vars.vars().len() != 2 * self.n_layers() {
            return Err(shape_err(
                "forward_graph",
                "parameter variables do not match architecture",
            ));
        }
        let mut h = graph.concat_cols(&[x, t])?;
        let last = self.n_layers() - 1;
        for k in 0..self.n_layers() {
            h = graph.matmul(h, vars.get(2 * k))?;
            h = graph.add_row(h, vars.get(2 * k + 1))?;
            if k != last {
                h = graph.selu(h)?;
            }
        }
        Ok(h)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(6 + 4 * (2 + self.hidden.len()) + 8 + 8 * self.params.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.d as u32).to_le_bytes());
        out.extend_from_slice(&(self.hidden.len() as u32).to_le_bytes());
        for &w in &self.hidden {
            out.extend_from_slice(&(w as u32).to_le_bytes());
        }
        out.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for &p in self.params.as_slice() {
            out.extend_from_slice(&p.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 6];
        read_exact(&mut r, &mut magic, "magic")?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint(format!(
                "bad magic {:?}",
                String::from_utf8_lossy(&magic)
            )));
        }
        let d = read_u32(&mut r, "dimension")? as usize;
        let n_hidden = read_u32(&mut r, "layer count")? as usize;
        if n_hidden > 1024 {
            return Err(Error::Checkpoint(format!("implausible layer count {n_hidden}")));
        }
        let hidden = (0..n_hidden)
            .map(|_| read_u32(&mut r, "layer width").map(|w| w as usize))
            .collect::<Result<Vec<_>>>()?;
        let count = read_u64(&mut r, "parameter count")?;
        let mut field = Self::zeros(d, &hidden).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if count != field.params.len() as u64 {
            return Err(Error::Checkpoint(format!(
                "header declares {count} parameters, architecture needs {}",
                field.params.len()
            )));
        }
        if r.len() != 8 * field.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} bytes of parameters, found {}",
                8 * field.params.len(),
                r.len()
            )));
        }
        for (p, chunk) in field.params.as_mut_slice().iter_mut().zip(r.chunks_exact(8)) {
            *p = f64::from_le_bytes(chunk.try_into().expect("chunk of 8"));
        }
        Ok(field)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes =
            std::fs::read(path).map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}

fn read_exact(r: &mut &[u8], buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Checkpoint(format!("truncated header while reading {what}")))
}

fn read_u32(r: &mut &[u8], what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut &[u8], what: &str) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b, what)?;
    Ok(u64::from_le_bytes(b))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum TargetPolicy {
    /// `target ← decay·target + (1 − decay)·online` after every step.
    Ema { decay: f64 },
    /// `target ← online` whenever the step index is a multiple of `period`.
    HardCopy { period: u64 },
}

impl TargetPolicy {
    pub fn validate(&self) -> Result<()> {
        match *self {
            TargetPolicy::Ema { decay } if !(0.0..=1.0).contains(&decay) => Err(Error::InvalidArgument(format!(
                "EMA decay must lie in [0, 1], got {decay}"
            ))),
            TargetPolicy::HardCopy { period: 0 } => {
                Err(Error::InvalidArgument("hard-copy period must be at least 1".into()))
            }
            _ => Ok(()),
        }
    }
}

/// Frozen copy of a [`VelocityField`] that only changes through [`TargetField::update`].
#[derive(Clone, Debug, PartialEq)]
pub struct TargetField {
    field: VelocityField,
    policy: TargetPolicy,
}

impl TargetField {
    pub fn new(online: &VelocityField, policy: TargetPolicy) -> Result<Self> {
        policy.validate()?;
        Ok(Self {
            field: online.clone(),
            policy,
        })
    }

    pub fn field(&self) -> &VelocityField {
        &self.field
    }

    pub fn policy(&self) -> TargetPolicy {
        self.policy
    }

    /// Applies the policy after optimizer step `step` (counted from 1).
    pub fn update(&mut self, online: &VelocityField, step: u64) -> Result<()> {
        if !self.field.same_architecture(online) || !self.field.params.same_layout(&online.params) {
            return Err(shape_err("update_target", "online and target layouts differ"));
        }
        match self.policy {
            TargetPolicy::Ema { decay } => {
                for (t, o) in self
                    .field
                    .params
                    .as_mut_slice()
                    .iter_mut()
                    .zip(online.params.as_slice())
                {
                    *t = decay * *t + (1.0 - decay) * o;
                }
            }
            TargetPolicy::HardCopy { period } => {
                if step.is_multiple_of(period) {
                    self.field
                        .params
                        .as_mut_slice()
                        .copy_from_slice(online.params.as_slice());
                }
            }
        }
        Ok(())
    }
}
