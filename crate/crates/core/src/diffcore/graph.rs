//! Tape-based reverse-mode differentiation over whole tensors.
//!
//! A [`Graph`] records every operation as a node holding its forward value. Nodes
//! created with [`Graph::param`] are differentiable leaves; [`Graph::constant`]
//! leaves never receive a gradient, and neither does anything computed purely from
//! constants. [`Graph::backward`] walks the tape once in reverse.

use super::tensor::{gemm, Tensor};
use crate::error::{shape_err, Error, Result};

pub const SELU_LAMBDA: f64 = 1.050_700_987_355_480_5;
pub const SELU_ALPHA: f64 = 1.673_263_242_354_377_3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Selu(Var),
    Cos(Var),
    Sin(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    ConcatCols(Vec<Var>),
    Scale(Var, f64),
    AddScalar(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<Var>,
}

/// Gradients indexed by graph variable.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `v`, or zeros shaped like `like` if `v` did not influence the loss.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(like.shape().to_vec()))
    }
}

fn check(op: &'static str, t: Tensor) -> Result<Tensor> {
    if t.is_finite() {
        Ok(t)
    } else {
        Err(Error::NonFinite { op })
    }
}

fn selu(x: f64) -> f64 {
    if x > 0.0 {
        SELU_LAMBDA * x
    } else {
        SELU_LAMBDA * SELU_ALPHA * (x.exp() - 1.0)
    }
}

fn selu_grad(x: f64) -> f64 {
    if x > 0.0 {
        SELU_LAMBDA
    } else {
        SELU_LAMBDA * SELU_ALPHA * x.exp()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        let v = self.push(value, Op::Leaf, true);
        self.params.push(v);
        v
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Differentiable leaves, in creation order.
    pub fn params(&self) -> &[Var] {
        &self.params
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn matrix_dims(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        match self.value(v).shape() {
            [r, c] => Ok((*r, *c)),
            s => Err(shape_err(op, format!("expected a matrix, got shape {s:?}"))),
        }
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(shape_err(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims("matmul", a)?;
        let (k2, n) = self.matrix_dims("matmul", b)?;
        if k != k2 {
            return Err(shape_err("matmul", format!("[{m}, {k}] x [{k2}, {n}]")));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            &mut out,
            false,
        );
        let value = check("matmul", Tensor::matrix(m, n, out)?)?;
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(value, Op::MatMul(a, b), tracked))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = check("add", self.value(a).zip_map(self.value(b), |x, y| x + y))?;
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(value, Op::Add(a, b), tracked))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let value = check("sub", self.value(a).zip_map(self.value(b), |x, y| x - y))?;
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(value, Op::Sub(a, b), tracked))
    }

    /// Adds a length-`n` vector to every row of an `[m, n]` matrix (bias broadcast).
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (_, n) = self.matrix_dims("add_row", a)?;
        if self.value(row).numel() != n {
            return Err(shape_err(
                "add_row",
                format!("row of {} entries for {n} columns", self.value(row).numel()),
            ));
        }
        let mut value = self.value(a).clone();
        let r = self.value(row).data().to_vec();
        for chunk in value.data_mut().chunks_exact_mut(n.max(1)) {
            for (x, b) in chunk.iter_mut().zip(&r) {
                *x += b;
            }
        }
        let value = check("add_row", value)?;
        let tracked = self.tracked(a) || self.tracked(row);
        Ok(self.push(value, Op::AddRow(a, row), tracked))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value = check("mul", self.value(a).zip_map(self.value(b), |x, y| x * y))?;
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(value, Op::Mul(a, b), tracked))
    }

    pub fn selu(&mut self, a: Var) -> Result<Var> {
        let value = check("selu", self.value(a).map(selu))?;
        let tracked = self.tracked(a);
        Ok(self.push(value, Op::Selu(a), tracked))
    }

    pub fn cos(&mut self, a: Var) -> Result<Var> {
        let value = check("cos", self.value(a).map(f64::cos))?;
        let tracked = self.tracked(a);
        Ok(self.push(value, Op::Cos(a), tracked))
    }

    pub fn sin(&mut self, a: Var) -> Result<Var> {
        let value = check("sin", self.value(a).map(f64::sin))?;
        let tracked = self.tracked(a);
        Ok(self.push(value, Op::Sin(a), tracked))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let value = check("square", self.value(a).map(|x| x * x))?;
        let tracked = self.tracked(a);
        Ok(self.push(value, Op::Square(a), tracked))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let value = check("sum", Tensor::scalar(self.value(a).data().iter().sum()))?;
        let tracked = self.tracked(a);
        Ok(self.push(value, Op::Sum(a), tracked))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel();
        if n == 0 {
            return Err(shape_err("mean", "empty tensor"));
        }
        let value = check(
            "mean",
            Tensor::scalar(self.value(a).data().iter().sum::<f64>() / n as f64),
        )?;
        let tracked = self.tracked(a);
        Ok(self.push(value, Op::Mean(a), tracked))
    }

    /// Concatenates matrices with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(shape_err("concat_cols", "no inputs"));
        };
        let (m, _) = self.matrix_dims("concat_cols", first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.matrix_dims("concat_cols", p)?;
            if r != m {
                return Err(shape_err("concat_cols", format!("row counts {m} and {r}")));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let value = check("concat_cols", Tensor::matrix(m, total, data)?)?;
        let tracked = parts.iter().any(|&p| self.tracked(p));
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), tracked))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let value = check("scale", self.value(a).map(|x| x * s))?;
        let tracked = self.tracked(a);
        Ok(self.push(value, Op::Scale(a, s), tracked))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        let value = check("add_scalar", self.value(a).map(|x| x + s))?;
        let tracked = self.tracked(a);
        Ok(self.push(value, Op::AddScalar(a), tracked))
    }

    /// Reverse sweep from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(shape_err(
                "backward",
                format!("loss must be a scalar, got shape {:?}", self.value(loss).shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape().to_vec(), 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.tracked {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                }
                Op::MatMul(a, b) => {
                    let (m, k) = self.matrix_dims("matmul", *a)?;
                    let (_, n) = self.matrix_dims("matmul", *b)?;
                    if self.tracked(*a) {
                        let mut da = vec![0.0; m * k];
                        gemm(m, n, k, g.data(), false, self.value(*b).data(), true, &mut da, false);
                        accumulate(&mut grads, *a, Tensor::matrix(m, k, da)?);
                    }
                    if self.tracked(*b) {
                        let mut db = vec![0.0; k * n];
                        gemm(k, m, n, self.value(*a).data(), true, g.data(), false, &mut db, false);
                        accumulate(&mut grads, *b, Tensor::matrix(k, n, db)?);
                    }
                }
                Op::Add(a, b) => {
                    if self.tracked(*a) {
                        accumulate(&mut grads, *a, g.clone());
                    }
                    if self.tracked(*b) {
                        accumulate(&mut grads, *b, g.clone());
                    }
                }
                Op::Sub(a, b) => {
                    if self.tracked(*a) {
                        accumulate(&mut grads, *a, g.clone());
                    }
                    if self.tracked(*b) {
                        accumulate(&mut grads, *b, g.map(|x| -x));
                    }
                }
                Op::AddRow(a, row) => {
                    if self.tracked(*a) {
                        accumulate(&mut grads, *a, g.clone());
                    }
                    if self.tracked(*row) {
                        let rv = self.value(*row);
                        let n = rv.numel();
                        let mut dr = vec![0.0; n];
                        for chunk in g.data().chunks_exact(n.max(1)) {
                            for (d, x) in dr.iter_mut().zip(chunk) {
                                *d += x;
                            }
                        }
                        accumulate(&mut grads, *row, Tensor::new(rv.shape().to_vec(), dr)?);
                    }
                }
                Op::Mul(a, b) => {
                    if self.tracked(*a) {
                        accumulate(&mut grads, *a, g.zip_map(self.value(*b), |x, y| x * y));
                    }
                    if self.tracked(*b) {
                        accumulate(&mut grads, *b, g.zip_map(self.value(*a), |x, y| x * y));
                    }
                }
                Op::Selu(a) => {
                    let d = g.zip_map(self.value(*a), |x, y| x * selu_grad(y));
                    accumulate(&mut grads, *a, d);
                }
                Op::Cos(a) => {
                    let d = g.zip_map(self.value(*a), |x, y| -x * y.sin());
                    accumulate(&mut grads, *a, d);
                }
                Op::Sin(a) => {
                    let d = g.zip_map(self.value(*a), |x, y| x * y.cos());
                    accumulate(&mut grads, *a, d);
                }
                Op::Square(a) => {
                    let d = g.zip_map(self.value(*a), |x, y| 2.0 * x * y);
                    accumulate(&mut grads, *a, d);
                }
                Op::Sum(a) => {
                    let s = g.item();
                    let d = Tensor::full(self.value(*a).shape().to_vec(), s);
                    accumulate(&mut grads, *a, d);
                }
                Op::Mean(a) => {
                    let av = self.value(*a);
                    let s = g.item() / av.numel() as f64;
                    accumulate(&mut grads, *a, Tensor::full(av.shape().to_vec(), s));
                }
                Op::ConcatCols(parts) => {
                    let m = g.rows();
                    let total = g.cols();
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.value(p).cols();
                        if self.tracked(p) {
                            let mut d = Vec::with_capacity(m * w);
                            for i in 0..m {
                                d.extend_from_slice(&g.data()[i * total + offset..i * total + offset + w]);
                            }
                            accumulate(&mut grads, p, Tensor::matrix(m, w, d)?);
                        }
                        offset += w;
                    }
                }
                Op::Scale(a, s) => {
                    let s = *s;
                    accumulate(&mut grads, *a, g.map(|x| x * s));
                }
                Op::AddScalar(a) => {
                    accumulate(&mut grads, *a, g.clone());
                }
            }
        }

        for g in grads.iter().flatten() {
            if !g.is_finite() {
                return Err(Error::NonFinite { op: "backward" });
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, x) in existing.data_mut().iter_mut().zip(g.data()) {
                *e += x;
            }
        }
        slot @ None => *slot = Some(g),
    }
}
