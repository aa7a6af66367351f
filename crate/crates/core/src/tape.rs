//! Reverse-mode differentiation tape.
//!
//! Every differentiable operation appends one node holding its output value
//! and whatever it needs for the backward rule. Node indices are therefore a
//! topological order, and [`Tape::backward`] walks them in exact reverse.

use std::collections::hash_map::DefaultHasher;
use std::collections::BTreeMap;
use std::hash::{Hash, Hasher};

use crate::error::{Error, Result};
use crate::ops;
use crate::param::{ParamId, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(crate) enum Op<T> {
    Leaf,
    Param,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sum(Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Reshape(Var),
    Conv2d(ops::conv::Conv2dSaved),
    BatchNorm(ops::norm::BatchNormSaved<T>),
    MaxPool(ops::pool::MaxPoolSaved),
    Upsample(ops::pool::UpsampleSaved),
    Concat(Vec<Var>),
    Gate { x: Var, sm: Var },
    Linear { x: Var, w: Var, b: Option<Var> },
    Softmax(Var),
    Embedding { table: Var, idx: Vec<usize> },
    SelectStep { x: Var, t: usize },
    SeqNll(ops::loss::SeqNllSaved<T>),
}

impl<T> Op<T> {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param => "param",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Sum(_) => "sum",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Tanh(_) => "tanh",
            Op::Reshape(_) => "reshape",
            Op::Conv2d(_) => "conv2d",
            Op::BatchNorm(_) => "batchnorm2d",
            Op::MaxPool(_) => "maxpool2d",
            Op::Upsample(_) => "bilinear_upsample",
            Op::Concat(_) => "concat_channels",
            Op::Gate { .. } => "gate_multiply",
            Op::Linear { .. } => "linear",
            Op::Softmax(_) => "softmax",
            Op::Embedding { .. } => "embedding_lookup",
            Op::SelectStep { .. } => "select_step",
            Op::SeqNll(_) => "sequence_nll",
        }
    }
}

pub(crate) struct Node<T> {
    pub value: Tensor<T>,
    pub op: Op<T>,
    pub requires_grad: bool,
}

/// Recorded computation for one forward pass.
pub struct Tape<T> {
    pub(crate) nodes: Vec<Node<T>>,
    params: BTreeMap<ParamId, Var>,
    consumed: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), params: BTreeMap::new(), consumed: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records an input value.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Snapshot of a stored parameter; repeated calls reuse one node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let value = store.param(id).value.clone();
        self.nodes.push(Node { value, op: Op::Param, requires_grad: true });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        v
    }

    /// Makes later [`Tape::param`] calls for `id` resolve to `v`, so a
    /// parameter can be fed from an explicit leaf (used by gradient checks).
    pub fn bind_param(&mut self, id: ParamId, v: Var) {
        self.params.insert(id, v);
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: format!("{} (node {})", op.name(), self.nodes.len()) });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Hash of every data-dependent branch taken in the forward pass (ReLU
    /// masks, max-pool winners). Two evaluations with equal signatures lie
    /// in the same smooth piece of the function.
    pub fn branch_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(x) => {
                    for v in self.nodes[x.0].value.data() {
                        (*v > T::zero()).hash(&mut h);
                    }
                }
                Op::MaxPool(saved) => saved.argmax.hash(&mut h),
                _ => {}
            }
        }
        h.finish()
    }

    /// Back-propagates from a scalar `loss`, consuming the tape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        let loss_value = &self.nodes[loss.0].value;
        if !loss_value.is_scalar() {
            return Err(Error::NonScalarLoss(loss_value.shape().to_vec()));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut leaf_grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let nodes = &self.nodes;
            let node = &nodes[i];
            let mut acc = Accumulator { nodes, grads: &mut grads };
            match &node.op {
                Op::Leaf | Op::Param => {
                    leaf_grads[i] = Some(g);
                    continue;
                }
                Op::Add(a, b) => {
                    acc.add(*a, &g);
                    acc.add(*b, &g);
                }
                Op::Sub(a, b) => {
                    acc.add(*a, &g);
                    acc.with(*b, |s| s.iter_mut().zip(&g).for_each(|(s, &g)| *s -= g));
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                    acc.with(*a, |s| {
                        for ((s, &g), &b) in s.iter_mut().zip(&g).zip(bv) {
                            *s += g * b;
                        }
                    });
                    acc.with(*b, |s| {
                        for ((s, &g), &a) in s.iter_mut().zip(&g).zip(av) {
                            *s += g * a;
                        }
                    });
                }
                Op::Scale(x, k) => {
                    acc.with(*x, |s| s.iter_mut().zip(&g).for_each(|(s, &g)| *s += g * *k));
                }
                Op::Sum(x) => {
                    acc.with(*x, |s| s.iter_mut().for_each(|s| *s += g[0]));
                }
                Op::Relu(x) => {
                    let xv = nodes[x.0].value.data();
                    acc.with(*x, |s| {
                        for ((s, &g), &x) in s.iter_mut().zip(&g).zip(xv) {
                            if x > T::zero() {
                                *s += g;
                            }
                        }
                    });
                }
                Op::Sigmoid(x) => {
                    let y = node.value.data();
                    acc.with(*x, |s| {
                        for ((s, &g), &y) in s.iter_mut().zip(&g).zip(y) {
                            *s += g * y * (T::one() - y);
                        }
                    });
                }
                Op::Tanh(x) => {
                    let y = node.value.data();
                    acc.with(*x, |s| {
                        for ((s, &g), &y) in s.iter_mut().zip(&g).zip(y) {
                            *s += g * (T::one() - y * y);
                        }
                    });
                }
                Op::Reshape(x) => acc.add(*x, &g),
                Op::Conv2d(saved) => ops::conv::backward(saved, &g, &mut acc),
                Op::BatchNorm(saved) => ops::norm::backward(saved, &g, &mut acc),
                Op::MaxPool(saved) => ops::pool::maxpool_backward(saved, &g, &mut acc),
                Op::Upsample(saved) => ops::pool::upsample_backward(saved, &g, &mut acc),
                Op::Concat(xs) => ops::dense::concat_backward(xs, node.value.shape(), &g, &mut acc),
                Op::Gate { x, sm } => ops::dense::gate_backward(*x, *sm, &g, &mut acc),
                Op::Linear { x, w, b } => ops::dense::linear_backward(*x, *w, *b, &g, &mut acc),
                Op::Softmax(x) => ops::dense::softmax_backward(*x, node.value.data(), &g, &mut acc),
                Op::Embedding { table, idx } => ops::dense::embedding_backward(*table, idx, &g, &mut acc),
                Op::SelectStep { x, t } => ops::dense::select_backward(*x, *t, &g, &mut acc),
                Op::SeqNll(saved) => ops::loss::backward(saved, g[0], &mut acc),
            }
        }

        let params = self.params.iter().map(|(&id, &v)| (id, v)).collect();
        Ok(Gradients { grads: leaf_grads, params })
    }
}

/// Gradient buffers handed to backward rules; skips inputs that do not
/// require a gradient.
pub(crate) struct Accumulator<'a, T> {
    pub nodes: &'a [Node<T>],
    grads: &'a mut [Option<Vec<T>>],
}

impl<'a, T: Real> Accumulator<'a, T> {
    pub fn value(&self, v: Var) -> &'a Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Runs `f` on the gradient buffer of `v`, if `v` needs one.
    pub fn with(&mut self, v: Var, f: impl FnOnce(&mut [T])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let n = self.nodes[v.0].value.numel();
        let slot = self.grads[v.0].get_or_insert_with(|| vec![T::zero(); n]);
        f(slot);
    }

    pub fn add(&mut self, v: Var, g: &[T]) {
        self.with(v, |s| s.iter_mut().zip(g).for_each(|(s, &g)| *s += g));
    }
}

/// Result of a backward pass: gradients of every leaf that required one.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    params: Vec<(ParamId, Var)>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of a leaf; `None` when the leaf was unreachable from the loss
    /// or did not require a gradient.
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradients of every parameter recorded on the tape.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, Option<&[T]>)> + '_ {
        self.params.iter().map(move |&(id, v)| (id, self.get(v)))
    }
}
