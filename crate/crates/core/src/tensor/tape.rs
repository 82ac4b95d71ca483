use super::array::Tensor;
use super::kernels::{self, Primitive, Saved};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

struct Entry {
    op: Primitive,
    inputs: Vec<NodeId>,
    saved: Saved,
}

struct Node {
    value: Tensor,
    /// `None` for leaves.
    entry: Option<Entry>,
    needs_grad: bool,
}

/// Wengert list of primitive applications.
///
/// Nodes are appended in evaluation order, so every entry's inputs precede it
/// and a single reverse sweep is a valid topological traversal. A tape is
/// built for one forward pass and dropped afterwards.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of the tape's leaves produced by a reverse sweep.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    visited: usize,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.get_mut(id.0).and_then(Option::take)
    }

    /// Number of recorded entries whose backward rule ran.
    pub fn visited_nodes(&self) -> usize {
        self.visited
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf. Gradients are only reported for leaves created with
    /// `requires_grad`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            entry: None,
            needs_grad: requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn check(&self, id: NodeId) -> Result<()> {
        if id.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(Error::UnknownNode(id.0))
        }
    }

    pub fn apply(&mut self, op: Primitive, inputs: &[NodeId]) -> Result<NodeId> {
        for &i in inputs {
            self.check(i)?;
        }
        let values: Vec<&Tensor> = inputs.iter().map(|i| &self.nodes[i.0].value).collect();
        let (value, saved) = kernels::forward(&op, &values)?;
        let needs_grad = inputs.iter().any(|i| self.nodes[i.0].needs_grad);
        self.nodes.push(Node {
            value,
            entry: Some(Entry {
                op,
                inputs: inputs.to_vec(),
                saved,
            }),
            needs_grad,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    pub fn dense(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Dense, &[x, w, b])
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Conv2d, &[x, w, b])
    }

    pub fn max_pool2(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Primitive::MaxPool2, &[x])
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Relu, &[x])
    }

    pub fn flatten(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Flatten, &[x])
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Primitive::MatMul, &[a, b])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Add, &[a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Mul, &[a, b])
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.apply(Primitive::Scale(c), &[a])
    }

    pub fn log_softmax(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Primitive::LogSoftmax, &[x])
    }

    pub fn cross_entropy(&mut self, logp: NodeId, targets: NodeId) -> Result<NodeId> {
        self.apply(Primitive::CrossEntropy, &[logp, targets])
    }

    pub fn entropy(&mut self, logp: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Entropy, &[logp])
    }

    pub fn kl_div(&mut self, logp: NodeId, logq: NodeId) -> Result<NodeId> {
        self.apply(Primitive::KlDiv, &[logp, logq])
    }

    pub fn margin(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        self.apply(Primitive::Margin(labels.to_vec()), &[logits])
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Sum, &[x])
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Mean, &[x])
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, output: NodeId) -> Result<Gradients> {
        self.check(output)?;
        let v = &self.nodes[output.0].value;
        if v.numel() != 1 {
            return Err(Error::NonScalarOutput(v.shape().to_vec()));
        }
        self.vjp(output, &Tensor::full(v.shape(), 1.0))
    }

    /// Vector-Jacobian product: reverse sweep seeded with `seed` at `output`.
    pub fn vjp(&self, output: NodeId, seed: &Tensor) -> Result<Gradients> {
        self.check(output)?;
        let out_shape = self.nodes[output.0].value.shape();
        if seed.shape() != out_shape {
            return Err(Error::shape(
                "vjp",
                format!("seed {:?} vs output {:?}", seed.shape(), out_shape),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(seed.clone());
        let mut visited = 0;
        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            let Some(entry) = &node.entry else { continue };
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            visited += 1;
            let inputs: Vec<&Tensor> = entry.inputs.iter().map(|i| &self.nodes[i.0].value).collect();
            let needs: Vec<bool> = entry.inputs.iter().map(|i| self.nodes[i.0].needs_grad).collect();
            let parts = kernels::backward(&entry.op, &inputs, &node.value, &entry.saved, &g, &needs)?;
            for (inp, part) in entry.inputs.iter().zip(parts) {
                let Some(part) = part else { continue };
                if !self.nodes[inp.0].needs_grad {
                    continue;
                }
                match &mut grads[inp.0] {
                    Some(acc) => acc.add_assign(&part),
                    slot @ None => *slot = Some(part),
                }
            }
        }
        for (idx, node) in self.nodes.iter().enumerate() {
            if node.entry.is_some() || !node.needs_grad {
                grads[idx] = None;
            }
        }
        Ok(Gradients { grads, visited })
    }

    /// Jacobian-vector product: propagates `tangents` (seeded at leaves or
    /// intermediate nodes) forward to `output`.
    pub fn jvp(&self, tangents: &[(NodeId, &Tensor)], output: NodeId) -> Result<Tensor> {
        self.check(output)?;
        let mut tan: Vec<Option<Tensor>> = (0..=output.0).map(|_| None).collect();
        for (id, t) in tangents {
            self.check(*id)?;
            if t.shape() != self.nodes[id.0].value.shape() {
                return Err(Error::shape(
                    "jvp",
                    format!("tangent {:?} vs node {:?}", t.shape(), self.nodes[id.0].value.shape()),
                ));
            }
            if id.0 <= output.0 {
                tan[id.0] = Some((*t).clone());
            }
        }
        let start = tangents.iter().map(|(id, _)| id.0).min().unwrap_or(output.0);
        for idx in start..=output.0 {
            if tan[idx].is_some() {
                continue;
            }
            let Some(entry) = &self.nodes[idx].entry else { continue };
            let dx: Vec<Option<&Tensor>> = entry.inputs.iter().map(|i| tan[i.0].as_ref()).collect();
            if dx.iter().all(Option::is_none) {
                continue;
            }
            let inputs: Vec<&Tensor> = entry.inputs.iter().map(|i| &self.nodes[i.0].value).collect();
            tan[idx] = Some(kernels::tangent(&entry.op, &inputs, &self.nodes[idx].value, &entry.saved, &dx)?);
        }
        Ok(tan[output.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(self.nodes[output.0].value.shape())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_derivative() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0), true);
        let y = tape.mul(x, x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().item(), Some(6.0));
    }

    #[test]
    fn softmax_ce_gradient_at_uniform_logits() {
        let mut tape = Tape::new();
        let z = tape.leaf(Tensor::zeros(&[1, 10]), true);
        let mut onehot = Tensor::zeros(&[1, 10]);
        onehot.data_mut()[3] = 1.0;
        let t = tape.constant(onehot);
        let lp = tape.log_softmax(z).unwrap();
        let ce = tape.cross_entropy(lp, t).unwrap();
        let loss = tape.sum(ce).unwrap();
        let g = tape.backward(loss).unwrap();
        for (i, v) in g.get(z).unwrap().data().iter().enumerate() {
            let expect = if i == 3 { 0.1 - 1.0 } else { 0.1 };
            assert!((v - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]), true);
        let y = tape.relu(x).unwrap();
        assert!(matches!(tape.backward(y), Err(Error::NonScalarOutput(s)) if s == vec![2]));
    }

    #[test]
    fn constants_get_no_gradient_and_are_skipped() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, -2.0]), true);
        let c = tape.constant(Tensor::vector(vec![5.0, 5.0]));
        let cc = tape.relu(c).unwrap();
        let y = tape.mul(x, cc).unwrap();
        let s = tape.sum(y).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[5.0, 5.0]);
        assert!(g.get(c).is_none());
        // mul and sum run; the relu on the constant branch is skipped.
        assert_eq!(g.visited_nodes(), 2);
    }

    #[test]
    fn fan_out_accumulates() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.0), true);
        let a = tape.scale(x, 3.0).unwrap();
        let b = tape.add(a, x).unwrap();
        let g = tape.backward(b).unwrap();
        assert_eq!(g.get(x).unwrap().item(), Some(4.0));
    }

    #[test]
    fn jvp_matches_vjp_transpose() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::matrix(1, 3, vec![0.5, -1.0, 2.0]).unwrap(), true);
        let w = tape.constant(Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, -1.0, 0.5, 0.0]).unwrap());
        let b = tape.constant(Tensor::vector(vec![0.1, 0.2]));
        let y = tape.dense(x, w, b).unwrap();
        let r = tape.relu(y).unwrap();
        let v = Tensor::matrix(1, 3, vec![1.0, 0.0, -1.0]).unwrap();
        let u = Tensor::matrix(1, 2, vec![0.3, 0.7]).unwrap();
        let jv = tape.jvp(&[(x, &v)], r).unwrap();
        let jtu = tape.vjp(r, &u).unwrap();
        let lhs: f64 = jv.data().iter().zip(u.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = jtu.get(x).unwrap().data().iter().zip(v.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
