use super::graph::{Gradients, Graph, Var};
use super::tensor::Tensor;
use crate::error::{shape_err, Result};

/// A named slice of a [`ParamVector`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamBlock {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl ParamBlock {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Flat parameter storage with a layout table. Blocks are contiguous, disjoint
/// and cover the whole array.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamVector {
    data: Vec<f64>,
    layout: Vec<ParamBlock>,
}

impl ParamVector {
    /// Zero-filled vector with blocks laid out in the given order.
    pub fn zeros<S: Into<String>>(blocks: impl IntoIterator<Item = (S, Vec<usize>)>) -> Self {
        let mut layout = Vec::new();
        let mut offset = 0;
        for (name, shape) in blocks {
            let block = ParamBlock {
                name: name.into(),
                shape,
                offset,
            };
            offset += block.len();
            layout.push(block);
        }
        Self {
            data: vec![0.0; offset],
            layout,
        }
    }

    pub fn with_data(layout: Vec<ParamBlock>, data: Vec<f64>) -> Result<Self> {
        let mut offset = 0;
        for b in &layout {
            if b.offset != offset {
                return Err(shape_err("param_vector", format!("block {} is not contiguous", b.name)));
            }
            offset += b.len();
        }
        if offset != data.len() {
            return Err(shape_err(
                "param_vector",
                format!("layout covers {offset} entries, data has {}", data.len()),
            ));
        }
        Ok(Self { data, layout })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            data: vec![0.0; self.data.len()],
            layout: self.layout.clone(),
        }
    }

    pub fn layout(&self) -> &[ParamBlock] {
        &self.layout
    }

    pub fn same_layout(&self, other: &ParamVector) -> bool {
        self.layout == other.layout
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn block(&self, i: usize) -> &[f64] {
        &self.data[self.layout[i].range()]
    }

    pub fn block_mut(&mut self, i: usize) -> &mut [f64] {
        let r = self.layout[i].range();
        &mut self.data[r]
    }

    pub fn block_tensor(&self, i: usize) -> Tensor {
        Tensor::new(self.layout[i].shape.clone(), self.block(i).to_vec()).expect("layout shape matches block length")
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    /// Euclidean distance to another vector of the same length.
    pub fn distance(&self, other: &ParamVector) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    /// Registers every block as a differentiable leaf of `graph`.
    pub fn register(&self, graph: &mut Graph) -> ParamVars {
        let vars = (0..self.layout.len())
            .map(|i| graph.param(self.block_tensor(i)))
            .collect();
        ParamVars { vars }
    }

    /// Registers every block as a constant (no gradient) in `graph`.
    pub fn register_constant(&self, graph: &mut Graph) -> ParamVars {
        let vars = (0..self.layout.len())
            .map(|i| graph.constant(self.block_tensor(i)))
            .collect();
        ParamVars { vars }
    }

    fn gather(&self, vars: &ParamVars, grads: &Gradients, graph: &Graph) -> ParamVector {
        let mut out = self.zeros_like();
        for (i, &v) in vars.vars.iter().enumerate() {
            if let Some(g) = grads.get(v) {
                out.block_mut(i).copy_from_slice(g.data());
            }
            debug_assert_eq!(graph.value(v).numel(), self.layout[i].len());
        }
        out
    }
}

/// Graph variables for the blocks of a [`ParamVector`], in layout order.
#[derive(Clone, Debug)]
pub struct ParamVars {
    vars: Vec<Var>,
}

impl ParamVars {
    pub fn get(&self, i: usize) -> Var {
        self.vars[i]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Loss value and exact reverse-mode gradient of `loss` at `params`.
///
/// `loss` builds its computation on a fresh graph in which the blocks of `params`
/// are the only differentiable leaves.
pub fn grad<F>(params: &ParamVector, loss: F) -> Result<(f64, ParamVector)>
where
    F: FnOnce(&mut Graph, &ParamVars) -> Result<Var>,
{
    let mut graph = Graph::new();
    let vars = params.register(&mut graph);
    let out = loss(&mut graph, &vars)?;
    let grads = graph.backward(out)?;
    let value = graph.value(out).item();
    Ok((value, params.gather(&vars, &grads, &graph)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_is_contiguous_and_covering() {
        let p = ParamVector::zeros([("w", vec![3, 2]), ("b", vec![2])]);
        assert_eq!(p.len(), 8);
        assert_eq!(p.layout()[1].offset, 6);
        let mut bad = p.layout().to_vec();
        bad[1].offset = 5;
        assert!(ParamVector::with_data(bad, vec![0.0; 8]).is_err());
        assert!(ParamVector::with_data(p.layout().to_vec(), vec![0.0; 7]).is_err());
    }

    #[test]
    fn grad_of_sum_of_squares() {
        let mut p = ParamVector::zeros([("theta", vec![2])]);
        p.as_mut_slice().copy_from_slice(&[1.0, 2.0]);
        let (value, g) = grad(&p, |graph, vars| {
            let sq = graph.square(vars.get(0))?;
            graph.sum(sq)
        })
        .unwrap();
        assert_eq!(value, 5.0);
        assert_eq!(g.as_slice(), &[2.0, 4.0]);
    }

    #[test]
    fn grad_of_constant_is_zero() {
        let p = ParamVector::zeros([("theta", vec![3])]);
        let (value, g) = grad(&p, |graph, _| Ok(graph.constant(Tensor::scalar(4.0)))).unwrap();
        assert_eq!(value, 4.0);
        assert!(g.as_slice().iter().all(|&x| x == 0.0));
    }
}
