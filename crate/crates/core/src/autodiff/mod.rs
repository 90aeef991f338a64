//! Reverse-mode differentiation over a recorded tape of tensor operations.
//!
//! Every operation appends a node whose inputs precede it, so a single reverse
//! sweep over the node list is a valid topological order. Parameters are bound
//! lazily from a [`ParamStore`] by name; only names accepted by the tape's
//! trainable filter require gradients.
//!
//! A tape built with [`Tape::shape_only`] validates and propagates shapes
//! without computing values, which lets full-size architectures be checked
//! without allocating their activations.

mod conv;
mod elementwise;
mod layers;

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::{ParamFilter, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{numel, Tensor};

pub use conv::conv_output_extent;
pub use layers::{BatchStats, BN_EPS, BN_MOMENTUM};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }

    #[cfg(test)]
    pub(crate) fn from_raw(index: usize) -> Self {
        Var(index)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduce {
    Mean,
    Min,
    Max,
}

#[derive(Debug)]
pub(crate) enum Op<E> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, E),
    AddScalar(Var),
    MulScalarVar { x: Var, s: Var },
    Relu(Var),
    LeakyRelu(Var, E),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    BatchMean(Var),
    RepeatBatch(Var),
    AddChannelBias { x: Var, b: Var },
    MulChannel { x: Var, a: Var },
    Conv2d { x: Var, k: Var, stride: usize, pad: usize },
    Upsample { x: Var, factor: usize },
    AvgPool { x: Var, window: usize, stride: usize },
    MaxPool { x: Var, argmax: Vec<usize> },
    GlobalPool { x: Var, reduce: Reduce, argidx: Vec<usize> },
    Dense { x: Var, w: Var, b: Option<Var> },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<E>,
        inv_std: Vec<E>,
        train: bool,
    },
    Prelu { x: Var, slope: Var },
    Softmax { x: Var, axis: usize },
    LogSoftmax { x: Var, axis: usize },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<E> },
}

impl<E> Op<E> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::MulScalarVar { .. } => "mul_scalar_var",
            Op::Relu(..) => "relu",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::Sigmoid(..) => "sigmoid",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Reshape(..) => "reshape",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::BatchMean(..) => "batch_mean",
            Op::RepeatBatch(..) => "repeat_batch",
            Op::AddChannelBias { .. } => "add_channel_bias",
            Op::MulChannel { .. } => "mul_channel",
            Op::Conv2d { .. } => "conv2d",
            Op::Upsample { .. } => "upsample_nearest",
            Op::AvgPool { .. } => "avg_pool",
            Op::MaxPool { .. } => "max_pool",
            Op::GlobalPool { .. } => "global_pool",
            Op::Dense { .. } => "dense",
            Op::BatchNorm { .. } => "batch_norm",
            Op::Prelu { .. } => "prelu",
            Op::Softmax { .. } => "softmax",
            Op::LogSoftmax { .. } => "log_softmax",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Scale(x, _)
            | Op::AddScalar(x)
            | Op::Relu(x)
            | Op::LeakyRelu(x, _)
            | Op::Sigmoid(x)
            | Op::Exp(x)
            | Op::Log(x)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::Reshape(x)
            | Op::BatchMean(x)
            | Op::RepeatBatch(x) => vec![*x],
            Op::MulScalarVar { x, s } => vec![*x, *s],
            Op::Concat { inputs, .. } => inputs.clone(),
            Op::Slice { x, .. }
            | Op::Upsample { x, .. }
            | Op::AvgPool { x, .. }
            | Op::MaxPool { x, .. }
            | Op::GlobalPool { x, .. }
            | Op::Softmax { x, .. }
            | Op::LogSoftmax { x, .. } => vec![*x],
            Op::AddChannelBias { x, b } => vec![*x, *b],
            Op::MulChannel { x, a } => vec![*x, *a],
            Op::Conv2d { x, k, .. } => vec![*x, *k],
            Op::Dense { x, w, b } => {
                let mut v = vec![*x, *w];
                v.extend(b.iter().copied());
                v
            }
            Op::BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Prelu { x, slope } => vec![*x, *slope],
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

struct Node<E> {
    shape: Vec<usize>,
    value: Option<Tensor<E>>,
    op: Op<E>,
    requires_grad: bool,
}

/// Append-only record of a computation plus its gradient accumulators.
///
/// A tape is confined to the thread that builds it.
pub struct Tape<'p, E: Scalar = f32> {
    nodes: Vec<Node<E>>,
    grads: Vec<Option<Tensor<E>>>,
    store: Option<&'p ParamStore<E>>,
    trainable: ParamFilter,
    bound: BTreeMap<String, Var>,
    checked: bool,
    shape_only: bool,
    training: bool,
    buffer_updates: Vec<(String, Tensor<E>)>,
}

impl<E: Scalar> Default for Tape<'_, E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p, E: Scalar> Tape<'p, E> {
    /// An empty tape in checked mode with no parameter store.
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            store: None,
            trainable: ParamFilter::Nothing,
            bound: BTreeMap::new(),
            checked: true,
            shape_only: false,
            training: true,
            buffer_updates: Vec::new(),
        }
    }

    /// A tape that binds parameters from `store`; names accepted by
    /// `trainable` are differentiable leaves, all others are constants.
    pub fn with_params(store: &'p ParamStore<E>, trainable: ParamFilter) -> Self {
        Tape {
            store: Some(store),
            trainable,
            ..Self::new()
        }
    }

    /// A tape that only propagates shapes.
    pub fn shape_only(store: &'p ParamStore<E>) -> Self {
        Tape {
            shape_only: true,
            ..Self::with_params(store, ParamFilter::Nothing)
        }
    }

    /// Non-finite outputs (and non-positive `log` inputs) become errors when
    /// checked mode is on. It is on by default.
    pub fn set_checked(&mut self, checked: bool) {
        self.checked = checked;
    }

    /// Batch normalization uses batch statistics in training mode and running
    /// statistics otherwise.
    pub fn set_training(&mut self, training: bool) {
        self.training = training;
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn is_shape_only(&self) -> bool {
        self.shape_only
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf value.
    pub fn leaf(&mut self, value: Tensor<E>, requires_grad: bool) -> Var {
        let shape = value.shape().to_vec();
        let value = if self.shape_only { None } else { Some(value) };
        self.push_node(shape, value, Op::Leaf, requires_grad)
    }

    /// A constant leaf.
    pub fn constant(&mut self, value: Tensor<E>) -> Var {
        self.leaf(value, false)
    }

    /// A differentiable leaf.
    pub fn variable(&mut self, value: Tensor<E>) -> Var {
        self.leaf(value, true)
    }

    /// Binds the named parameter, reusing the node if already bound.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let store = self.store.ok_or_else(|| Error::MissingParam(name.to_string()))?;
        let value = store
            .get(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))?;
        let requires_grad = self.trainable.accepts(name)
            && store.entry(name).map(|e| e.kind) == Some(crate::params::ParamKind::Trainable);
        let shape = value.shape().to_vec();
        let v = if self.shape_only {
            self.push_node(shape, None, Op::Leaf, false)
        } else {
            self.push_node(shape, Some(value.clone()), Op::Leaf, requires_grad)
        };
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    /// Read access to a stored tensor that is not placed on the tape
    /// (running statistics).
    pub fn stored(&self, name: &str) -> Result<&'p Tensor<E>> {
        self.store
            .and_then(|s| s.get(name))
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub(crate) fn queue_buffer_update(&mut self, name: String, value: Tensor<E>) {
        self.buffer_updates.push((name, value));
    }

    /// Running-statistic updates produced by training-mode batch norms.
    pub fn take_buffer_updates(&mut self) -> Vec<(String, Tensor<E>)> {
        std::mem::take(&mut self.buffer_updates)
    }

    fn node(&self, v: Var) -> Result<&Node<E>> {
        self.nodes.get(v.0).ok_or(Error::UnknownVar(v.0))
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// The computed value of a node.
    ///
    /// # Panics
    /// On a shape-only tape, or when `v` belongs to another tape.
    pub fn value(&self, v: Var) -> &Tensor<E> {
        self.nodes[v.0]
            .value
            .as_ref()
            .expect("values are unavailable on a shape-only tape")
    }

    pub fn try_value(&self, v: Var) -> Result<&Tensor<E>> {
        self.node(v)?.value.as_ref().ok_or(Error::ShapeOnly)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push_node(
        &mut self,
        shape: Vec<usize>,
        value: Option<Tensor<E>>,
        op: Op<E>,
        requires_grad: bool,
    ) -> Var {
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Appends the result of an operation, enforcing finiteness in checked
    /// mode. `value` is `None` exactly when the tape is shape-only.
    pub(crate) fn push_op(
        &mut self,
        shape: Vec<usize>,
        value: Option<Tensor<E>>,
        op: Op<E>,
    ) -> Result<Var> {
        for v in op.inputs() {
            self.node(v)?;
        }
        if self.checked {
            if let Some(t) = &value {
                if !t.all_finite() {
                    return Err(Error::NonFinite { op: op.name() });
                }
            }
        }
        debug_assert_eq!(value.is_none(), self.shape_only);
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push_node(shape, value, op, requires_grad))
    }

    /// Reverse sweep from a scalar loss; gradients accumulate additively over
    /// fan-out.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let node = self.node(loss)?;
        if numel(&node.shape) != 1 {
            return Err(Error::NotScalar(node.shape.clone()));
        }
        if self.shape_only {
            return Err(Error::ShapeOnly);
        }
        let mut grads: Vec<Option<Tensor<E>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(&node.shape.clone()));
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backward_node(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    /// Accumulated gradient of a node after [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&Tensor<E>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn bound_params(&self) -> impl Iterator<Item = (&str, Var)> {
        self.bound.iter().map(|(k, &v)| (k.as_str(), v))
    }

    /// Gradients of every bound trainable parameter; parameters the loss does
    /// not reach get zeros.
    pub fn param_grads(&self) -> BTreeMap<String, Tensor<E>> {
        self.bound
            .iter()
            .filter(|(_, &v)| self.nodes[v.0].requires_grad)
            .map(|(name, &v)| {
                let g = self
                    .grad(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(&self.nodes[v.0].shape));
                (name.clone(), g)
            })
            .collect()
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<E>>], v: Var, g: Tensor<E>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        debug_assert_eq!(g.shape(), self.nodes[v.0].shape.as_slice());
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += *b;
                }
            }
            slot => *slot = Some(g),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_node(
        &self,
        idx: usize,
        g: &Tensor<E>,
        grads: &mut [Option<Tensor<E>>],
    ) -> Result<()> {
        let out = self.nodes[idx].value.as_ref().ok_or(Error::ShapeOnly)?;
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                if self.wants(*b) {
                    self.accumulate(grads, *b, g.map(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    self.accumulate(grads, *a, g.zip_map(self.value(*b), |x, y| x * y)?);
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, g.zip_map(self.value(*a), |x, y| x * y)?);
                }
            }
            Op::Scale(x, s) => {
                let s = *s;
                self.accumulate(grads, *x, g.map(|v| v * s));
            }
            Op::AddScalar(x) | Op::Reshape(x) => {
                let shape = self.nodes[x.0].shape.clone();
                self.accumulate(grads, *x, g.clone().reshape(&shape)?);
            }
            Op::MulScalarVar { x, s } => {
                let sv = self.value(*s).data()[0];
                if self.wants(*x) {
                    self.accumulate(grads, *x, g.map(|v| v * sv));
                }
                if self.wants(*s) {
                    let d: E = g
                        .data()
                        .iter()
                        .zip(self.value(*x).data())
                        .map(|(&a, &b)| a * b)
                        .sum();
                    let shape = self.nodes[s.0].shape.clone();
                    self.accumulate(grads, *s, Tensor::from_parts(shape, vec![d]));
                }
            }
            Op::Relu(x) => {
                let gx = g.zip_map(self.value(*x), |gv, xv| if xv > E::zero() { gv } else { E::zero() })?;
                self.accumulate(grads, *x, gx);
            }
            Op::LeakyRelu(x, slope) => {
                let s = *slope;
                let gx = g.zip_map(self.value(*x), |gv, xv| if xv >= E::zero() { gv } else { gv * s })?;
                self.accumulate(grads, *x, gx);
            }
            Op::Sigmoid(x) => {
                let gx = g.zip_map(out, |gv, y| gv * y * (E::one() - y))?;
                self.accumulate(grads, *x, gx);
            }
            Op::Exp(x) => {
                self.accumulate(grads, *x, g.zip_map(out, |gv, y| gv * y)?);
            }
            Op::Log(x) => {
                self.accumulate(grads, *x, g.zip_map(self.value(*x), |gv, xv| gv / xv)?);
            }
            Op::Sum(x) => {
                let gv = g.data()[0];
                let shape = self.nodes[x.0].shape.clone();
                self.accumulate(grads, *x, Tensor::full(&shape, gv));
            }
            Op::Mean(x) => {
                let shape = self.nodes[x.0].shape.clone();
                let gv = g.data()[0] / E::from_f64(numel(&shape) as f64);
                self.accumulate(grads, *x, Tensor::full(&shape, gv));
            }
            Op::Concat { inputs, axis } => {
                elementwise::concat_backward(self, inputs, *axis, g, grads)?;
            }
            Op::Slice { x, axis, start } => {
                let gx = elementwise::slice_backward(&self.nodes[x.0].shape, *axis, *start, g);
                self.accumulate(grads, *x, gx);
            }
            Op::BatchMean(x) => {
                let gx = elementwise::batch_mean_backward(&self.nodes[x.0].shape, g);
                self.accumulate(grads, *x, gx);
            }
            Op::RepeatBatch(x) => {
                let gx = elementwise::repeat_batch_backward(&self.nodes[x.0].shape, g);
                self.accumulate(grads, *x, gx);
            }
            Op::AddChannelBias { x, b } => {
                self.accumulate(grads, *x, g.clone());
                if self.wants(*b) {
                    let gb = elementwise::channel_sum(g, self.nodes[b.0].shape[0]);
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::MulChannel { x, a } => {
                let (gx, ga) = elementwise::mul_channel_backward(self.value(*x), self.value(*a), g);
                if self.wants(*x) {
                    self.accumulate(grads, *x, gx);
                }
                if self.wants(*a) {
                    self.accumulate(grads, *a, ga);
                }
            }
            Op::Conv2d { x, k, stride, pad } => {
                let (gx, gk) = conv::conv2d_backward(
                    self.value(*x),
                    self.value(*k),
                    *stride,
                    *pad,
                    g,
                    self.wants(*x),
                    self.wants(*k),
                );
                if let Some(gx) = gx {
                    self.accumulate(grads, *x, gx);
                }
                if let Some(gk) = gk {
                    self.accumulate(grads, *k, gk);
                }
            }
            Op::Upsample { x, factor } => {
                let gx = conv::upsample_backward(&self.nodes[x.0].shape, *factor, g);
                self.accumulate(grads, *x, gx);
            }
            Op::AvgPool { x, window, stride } => {
                let gx = conv::avg_pool_backward(&self.nodes[x.0].shape, *window, *stride, g);
                self.accumulate(grads, *x, gx);
            }
            Op::MaxPool { x, argmax } | Op::GlobalPool { x, argidx: argmax, reduce: Reduce::Min | Reduce::Max } => {
                let shape = self.nodes[x.0].shape.clone();
                let mut gx = Tensor::zeros(&shape);
                for (o, &src) in argmax.iter().enumerate() {
                    gx.data_mut()[src] += g.data()[o];
                }
                self.accumulate(grads, *x, gx);
            }
            Op::GlobalPool { x, reduce: Reduce::Mean, .. } => {
                let gx = conv::global_mean_backward(&self.nodes[x.0].shape, g);
                self.accumulate(grads, *x, gx);
            }
            Op::Dense { x, w, b } => {
                layers::dense_backward(self, *x, *w, *b, g, grads)?;
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                layers::batch_norm_backward(self, *x, *gamma, *beta, xhat, inv_std, *train, g, grads)?;
            }
            Op::Prelu { x, slope } => {
                layers::prelu_backward(self, *x, *slope, g, grads)?;
            }
            Op::Softmax { x, axis } => {
                let gx = layers::softmax_backward(out, *axis, g);
                self.accumulate(grads, *x, gx);
            }
            Op::LogSoftmax { x, axis } => {
                let gx = layers::log_softmax_backward(out, *axis, g);
                self.accumulate(grads, *x, gx);
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let shape = self.nodes[logits.0].shape.clone();
                let gx = layers::cross_entropy_backward(&shape, labels, probs, g.data()[0]);
                self.accumulate(grads, *logits, gx);
            }
        }
        Ok(())
    }
}

/// `(outer, len, inner)` split of a shape around `axis`.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::Axis {
            axis,
            rank: shape.len(),
        });
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}
