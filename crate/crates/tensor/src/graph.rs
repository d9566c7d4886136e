use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use crate::error::{Result, TensorError};
use crate::real::Real;
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub(crate) enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias {
        x: Var,
        bias: Var,
    },
    Affine {
        x: Var,
        scale: T,
    },
    MulScalar {
        x: Var,
        s: Var,
    },
    DivScalar {
        x: Var,
        s: Var,
    },
    MatMul(Var, Var),
    Conv2d {
        x: Var,
        w: Var,
        stride: usize,
        padding: usize,
    },
    MaxPool2d {
        x: Var,
        argmax: Vec<usize>,
    },
    Relu(Var),
    Tanh(Var),
    Abs(Var),
    Clip {
        x: Var,
        lo: T,
        hi: T,
    },
    Sum(Var),
    Mean(Var),
    MaxAll {
        x: Var,
        index: usize,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    LogSoftmax {
        x: Var,
        axis: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<f64>,
    },
    SqDist(Var, Var),
    Pick {
        x: Var,
        indices: Vec<usize>,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    Reshape(Var),
    RoundSte(Var),
    SignSte(Var),
}

impl<T> Op<T> {
    pub(crate) fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | MatMul(a, b) | SqDist(a, b) => vec![*a, *b],
            AddBias { x, bias } => vec![*x, *bias],
            MulScalar { x, s } | DivScalar { x, s } => vec![*x, *s],
            Conv2d { x, w, .. } => vec![*x, *w],
            BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Affine { x, .. }
            | MaxPool2d { x, .. }
            | Clip { x, .. }
            | MaxAll { x, .. }
            | Softmax { x, .. }
            | LogSoftmax { x, .. }
            | Pick { x, .. }
            | SliceRows { x, .. } => vec![*x],
            Relu(x) | Tanh(x) | Abs(x) | Sum(x) | Mean(x) | Reshape(x) | RoundSte(x)
            | SignSte(x) => vec![*x],
        }
    }

    pub(crate) fn is_ste(&self) -> bool {
        matches!(self, Op::RoundSte(_) | Op::SignSte(_))
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Node<T> {
    pub(crate) value: Tensor<T>,
    pub(crate) grad: Option<Tensor<T>>,
    pub(crate) requires_grad: bool,
    pub(crate) op: Op<T>,
}

/// A tape of executed operations. Nodes are appended in execution order, so
/// node indices are already a topological order.
#[derive(Debug, Clone)]
pub struct Graph<T: Real = f32> {
    pub(crate) nodes: Vec<Node<T>>,
    backward_calls: usize,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            backward_calls: 0,
        }
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that receives gradients.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// Leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<T>> {
        self.nodes[v.0].grad.take()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of completed `backward` calls on this graph.
    pub fn backward_calls(&self) -> usize {
        self.backward_calls
    }

    /// True when any straight-through op was recorded; such graphs have a
    /// defined gradient that finite differences cannot reproduce.
    pub fn contains_ste(&self) -> bool {
        self.nodes.iter().any(|n| n.op.is_ste())
    }

    /// Hash of every piecewise branch taken during the forward pass (relu
    /// signs, pooling winners, clip regions, rounding results). Two evaluations
    /// with equal signatures lie on the same smooth piece.
    pub fn kink_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for (i, node) in self.nodes.iter().enumerate() {
            let input = |v: &Var| self.nodes[v.0].value.data();
            match &node.op {
                Op::Relu(x) | Op::Abs(x) => {
                    i.hash(&mut h);
                    for v in input(x) {
                        (v.partial_cmp(&T::zero())).hash(&mut h);
                    }
                }
                Op::Clip { x, lo, hi } => {
                    i.hash(&mut h);
                    for v in input(x) {
                        (*v > *lo, *v < *hi).hash(&mut h);
                    }
                }
                Op::MaxPool2d { argmax, .. } => {
                    i.hash(&mut h);
                    argmax.hash(&mut h);
                }
                Op::MaxAll { index, .. } => {
                    i.hash(&mut h);
                    index.hash(&mut h);
                }
                Op::RoundSte(_) | Op::SignSte(_) => {
                    i.hash(&mut h);
                    for v in node.value.data() {
                        v.as_f64().to_bits().hash(&mut h);
                    }
                }
                _ => {}
            }
        }
        h.finish()
    }

    /// Reverse-mode sweep from a scalar `loss`. Gradients of `requires_grad`
    /// leaves are summed into their existing buffers.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss).to_vec();
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(TensorError::NotScalar { shape });
        }
        let mut pending: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        pending[loss.0] = Some(vec![T::one()]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = pending[idx].take() else {
                continue;
            };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            if matches!(self.nodes[idx].op, Op::Leaf) {
                let node = &mut self.nodes[idx];
                match &mut node.grad {
                    Some(existing) => {
                        for (e, v) in existing.data_mut().iter_mut().zip(&g) {
                            *e += *v;
                        }
                    }
                    None => {
                        node.grad = Some(Tensor::from_parts(node.value.shape().to_vec(), g));
                    }
                }
                continue;
            }
            for (input, gi) in self.vjp(idx, &g)? {
                match &mut pending[input.0] {
                    Some(acc) => {
                        for (a, v) in acc.iter_mut().zip(&gi) {
                            *a += *v;
                        }
                    }
                    slot @ None => *slot = Some(gi),
                }
            }
        }
        self.backward_calls += 1;
        Ok(())
    }
}
