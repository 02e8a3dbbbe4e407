use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;

use super::activation::{relu_backward, relu_forward, softmax_backward, softmax_forward};
use super::conv::{conv2d_backward, conv2d_forward};
use super::dense::{dense_backward, dense_forward};
use super::gru::{gru_backward, gru_forward, GruCache, GruWeights};
use super::loss::{cross_entropy_backward, cross_entropy_forward};
use super::lrn::{lrn_backward, lrn_forward, LrnParams};
use super::pool::{max_pool_backward, max_pool_forward};
use super::{ParamId, ParamStore, Scalar, Tensor};
use crate::error::{Error, Result};

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a specific [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    idx: usize,
    tape: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DropoutMode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Input,
    Param,
    Conv2d,
    MaxPool2d,
    LocalResponseNorm,
    Dense,
    Relu,
    Softmax,
    Dropout,
    Concat,
    Reshape,
    GatherRows,
    GruSequence,
    LastStep,
    CrossEntropy,
    Sum,
    WeightedSum,
    Add,
}

impl OpKind {
    pub fn name(self) -> &'static str {
        match self {
            OpKind::Input => "input",
            OpKind::Param => "param",
            OpKind::Conv2d => "conv2d",
            OpKind::MaxPool2d => "max_pool2d",
            OpKind::LocalResponseNorm => "local_response_norm",
            OpKind::Dense => "dense",
            OpKind::Relu => "relu",
            OpKind::Softmax => "softmax",
            OpKind::Dropout => "dropout",
            OpKind::Concat => "concat",
            OpKind::Reshape => "reshape",
            OpKind::GatherRows => "gather_rows",
            OpKind::GruSequence => "gru_sequence",
            OpKind::LastStep => "last_step",
            OpKind::CrossEntropy => "categorical_cross_entropy",
            OpKind::Sum => "sum",
            OpKind::WeightedSum => "weighted_sum",
            OpKind::Add => "add",
        }
    }
}

enum Op<T> {
    Input,
    Param(ParamId),
    Conv2d { input: usize, kernel: usize, bias: usize, stride: usize, pad: usize },
    MaxPool2d { input: usize, argmax: Vec<usize> },
    Lrn { input: usize, params: LrnParams, scale: Vec<T> },
    Dense { input: usize, weights: usize, bias: usize },
    Relu { input: usize },
    Softmax { input: usize },
    Dropout { input: usize, mask: Vec<T> },
    Concat { a: usize, b: usize },
    Reshape { input: usize },
    GatherRows { input: usize, indices: Vec<usize> },
    Gru { inputs: usize, h0: usize, weights: [usize; 9], cache: Box<GruCache<T>> },
    LastStep { input: usize },
    CrossEntropy { probs: usize, targets: Vec<usize> },
    Sum { input: usize },
    WeightedSum { input: usize, weights: Tensor<T> },
    Add { a: usize, b: usize },
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Input => OpKind::Input,
            Op::Param(_) => OpKind::Param,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::MaxPool2d { .. } => OpKind::MaxPool2d,
            Op::Lrn { .. } => OpKind::LocalResponseNorm,
            Op::Dense { .. } => OpKind::Dense,
            Op::Relu { .. } => OpKind::Relu,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::Dropout { .. } => OpKind::Dropout,
            Op::Concat { .. } => OpKind::Concat,
            Op::Reshape { .. } => OpKind::Reshape,
            Op::GatherRows { .. } => OpKind::GatherRows,
            Op::Gru { .. } => OpKind::GruSequence,
            Op::LastStep { .. } => OpKind::LastStep,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
            Op::Sum { .. } => OpKind::Sum,
            Op::WeightedSum { .. } => OpKind::WeightedSum,
            Op::Add { .. } => OpKind::Add,
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Records one forward pass so [`Tape::backward`] can replay it in reverse.
pub struct Tape<T: Scalar = f32> {
    id: u64,
    nodes: Vec<Node<T>>,
    fault: Option<OpKind>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by one backward pass, retained for leaf nodes.
pub struct Gradients<T> {
    tape: u64,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        if var.tape != self.tape {
            return None;
        }
        self.grads.get(var.idx).and_then(Option::as_ref)
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed), nodes: Vec::new(), fault: None }
    }

    /// Drops every record; handles from before the reset become stale.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.id = NEXT_TAPE.fetch_add(1, Ordering::Relaxed);
    }

    /// Negates the input gradients of every `kind` node. Only used to prove
    /// that the gradient checker catches a broken backward.
    #[doc(hidden)]
    pub fn inject_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.idx >= self.nodes.len() {
            return Err(Error::StaleTape(format!("value {} does not belong to the current recording", v.idx)));
        }
        Ok(v.idx)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var { idx: self.nodes.len() - 1, tape: self.id }
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[self.check(v).expect("var from this tape")].value
    }

    /// A leaf whose gradient is reported by [`Gradients::get`].
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Input)
    }

    /// A leaf bound to a stored parameter. Calling this twice for the same id
    /// yields two sites whose gradients sum into the one parameter.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id))
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var, stride: usize, pad: usize) -> Result<Var> {
        let (i, k, b) = (self.check(input)?, self.check(kernel)?, self.check(bias)?);
        let out = conv2d_forward(&self.nodes[i].value, &self.nodes[k].value, &self.nodes[b].value, stride, pad)?;
        Ok(self.push(out, Op::Conv2d { input: i, kernel: k, bias: b, stride, pad }))
    }

    pub fn max_pool2d(&mut self, input: Var, window: usize, stride: usize) -> Result<Var> {
        let i = self.check(input)?;
        let (out, argmax) = max_pool_forward(&self.nodes[i].value, window, stride)?;
        Ok(self.push(out, Op::MaxPool2d { input: i, argmax }))
    }

    pub fn local_response_norm(&mut self, input: Var, params: LrnParams) -> Result<Var> {
        let i = self.check(input)?;
        let (out, scale) = lrn_forward(&self.nodes[i].value, &params)?;
        Ok(self.push(out, Op::Lrn { input: i, params, scale }))
    }

    pub fn dense(&mut self, input: Var, weights: Var, bias: Var) -> Result<Var> {
        let (i, w, b) = (self.check(input)?, self.check(weights)?, self.check(bias)?);
        let out = dense_forward(&self.nodes[i].value, &self.nodes[w].value, &self.nodes[b].value)?;
        Ok(self.push(out, Op::Dense { input: i, weights: w, bias: b }))
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        let i = self.check(input)?;
        let out = relu_forward(&self.nodes[i].value);
        Ok(self.push(out, Op::Relu { input: i }))
    }

    pub fn softmax(&mut self, input: Var) -> Result<Var> {
        let i = self.check(input)?;
        let out = softmax_forward(&self.nodes[i].value)?;
        Ok(self.push(out, Op::Softmax { input: i }))
    }

    /// Inverted dropout: survivors are scaled by `1 / (1 - p)` so evaluation
    /// is the identity.
    pub fn dropout(&mut self, input: Var, p: f64, mode: DropoutMode, rng: &mut impl Rng) -> Result<Var> {
        let i = self.check(input)?;
        if !(0.0..1.0).contains(&p) {
            return Err(Error::config(format!("dropout probability {p} outside [0, 1)")));
        }
        if mode == DropoutMode::Eval || p == 0.0 {
            let out = self.nodes[i].value.clone();
            return Ok(self.push(out, Op::Reshape { input: i }));
        }
        let keep = T::from_f64_lossy(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..self.nodes[i].value.len())
            .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
            .collect();
        let x = &self.nodes[i].value;
        let data = x.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Dropout { input: i, mask }))
    }

    /// `N x D1` and `N x D2` to `N x (D1 + D2)`.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (ta, tb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
            return Err(Error::shape(format!("concat needs equal leading dims, got {sa:?} and {sb:?}")));
        }
        let (n, d1, d2) = (sa[0], sa[1], sb[1]);
        let mut data = Vec::with_capacity(n * (d1 + d2));
        for r in 0..n {
            data.extend_from_slice(&ta.data()[r * d1..(r + 1) * d1]);
            data.extend_from_slice(&tb.data()[r * d2..(r + 1) * d2]);
        }
        let out = Tensor::new(vec![n, d1 + d2], data)?;
        Ok(self.push(out, Op::Concat { a: ia, b: ib }))
    }

    /// Rows `indices` of `input` viewed as `shape[0] x rest`; rows may repeat.
    pub fn gather_rows(&mut self, input: Var, indices: &[usize]) -> Result<Var> {
        let i = self.check(input)?;
        let x = &self.nodes[i].value;
        let rows = x.shape().first().copied().unwrap_or(0);
        if let Some(&bad) = indices.iter().find(|&&r| r >= rows) {
            return Err(Error::shape(format!("gather_rows index {bad} out of {rows} rows")));
        }
        let mut shape = x.shape().to_vec();
        shape[0] = indices.len();
        let mut data = Vec::with_capacity(indices.len() * x.len() / rows.max(1));
        for &r in indices {
            data.extend_from_slice(x.row(r));
        }
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, Op::GatherRows { input: i, indices: indices.to_vec() }))
    }

    pub fn reshape(&mut self, input: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let i = self.check(input)?;
        let out = self.nodes[i].value.clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape { input: i }))
    }

    /// Runs a GRU over `inputs` (`T x N x D`). Returns `(outputs, h_T)`.
    pub fn gru_sequence(&mut self, inputs: Var, h0: Var, weights: [Var; 9]) -> Result<(Var, Var)> {
        let xi = self.check(inputs)?;
        let hi = self.check(h0)?;
        let mut wi = [0usize; 9];
        for (slot, v) in wi.iter_mut().zip(weights) {
            *slot = self.check(v)?;
        }
        let w = GruWeights::from_slice(wi.map(|i| &self.nodes[i].value));
        let (out, cache) = gru_forward(&self.nodes[xi].value, &self.nodes[hi].value, &w)?;
        let outputs = self.push(out, Op::Gru { inputs: xi, h0: hi, weights: wi, cache: Box::new(cache) });
        let last = self.last_step(outputs)?;
        Ok((outputs, last))
    }

    /// Final step `N x H` of a `T x N x H` sequence.
    pub fn last_step(&mut self, input: Var) -> Result<Var> {
        let i = self.check(input)?;
        let x = &self.nodes[i].value;
        let s = x.shape();
        if s.len() != 3 || s[0] == 0 {
            return Err(Error::shape(format!("last_step expects a non-empty T×N×H tensor, got {s:?}")));
        }
        let width = s[1] * s[2];
        let out = Tensor::new(vec![s[1], s[2]], x.data()[(s[0] - 1) * width..].to_vec())?;
        Ok(self.push(out, Op::LastStep { input: i }))
    }

    pub fn cross_entropy(&mut self, probs: Var, targets: &[usize]) -> Result<Var> {
        let p = self.check(probs)?;
        let loss = cross_entropy_forward(&self.nodes[p].value, targets)?;
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy { probs: p, targets: targets.to_vec() }))
    }

    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let i = self.check(input)?;
        let total = self.nodes[i].value.data().iter().copied().sum();
        Ok(self.push(Tensor::scalar(total), Op::Sum { input: i }))
    }

    /// `sum(x * weights)` for a constant weight tensor of the same shape.
    pub fn weighted_sum(&mut self, input: Var, weights: Tensor<T>) -> Result<Var> {
        let i = self.check(input)?;
        let x = &self.nodes[i].value;
        if x.shape() != weights.shape() {
            return Err(Error::shape(format!("weighted_sum shapes {:?} and {:?}", x.shape(), weights.shape())));
        }
        let total = x.data().iter().zip(weights.data()).map(|(&a, &b)| a * b).sum();
        Ok(self.push(Tensor::scalar(total), Op::WeightedSum { input: i, weights }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (ta, tb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        if ta.shape() != tb.shape() {
            return Err(Error::shape(format!("add shapes {:?} and {:?}", ta.shape(), tb.shape())));
        }
        let mut out = ta.clone();
        out.add_assign(tb);
        Ok(self.push(out, Op::Add { a: ia, b: ib }))
    }

    /// Reverse pass from a one-element `loss`. Parameter gradients are added
    /// into `store`; leaf gradients are returned.
    pub fn backward(&self, loss: Var, store: &mut ParamStore<T>) -> Result<Gradients<T>> {
        let root = self.check(loss)?;
        if self.nodes[root].value.len() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[root].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root] = Some(Tensor::full(self.nodes[root].value.shape().to_vec(), T::one()));

        fn acc<T: Scalar>(grads: &mut [Option<Tensor<T>>], idx: usize, g: Tensor<T>) {
            match &mut grads[idx] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }

        for i in (0..=root).rev() {
            let node = &self.nodes[i];
            let is_leaf = matches!(node.op, Op::Input | Op::Param(_));
            let g = if is_leaf {
                match (&node.op, &grads[i]) {
                    (Op::Param(id), Some(g)) => store.accumulate_grad(*id, g),
                    _ => {}
                }
                continue;
            } else {
                match grads[i].take() {
                    Some(g) => g,
                    None => continue,
                }
            };
            let mut outs: Vec<(usize, Tensor<T>)> = Vec::with_capacity(3);
            let value = |j: usize| &self.nodes[j].value;
            match &node.op {
                Op::Input | Op::Param(_) => unreachable!(),
                Op::Conv2d { input, kernel, bias, stride, pad } => {
                    let (di, dk, db) = conv2d_backward(value(*input), value(*kernel), value(*bias), *stride, *pad, &g)?;
                    outs.extend([(*input, di), (*kernel, dk), (*bias, db)]);
                }
                Op::MaxPool2d { input, argmax } => {
                    outs.push((*input, max_pool_backward(value(*input).shape(), argmax, &g)));
                }
                Op::Lrn { input, params, scale } => {
                    outs.push((*input, lrn_backward(value(*input), scale, params, &g)));
                }
                Op::Dense { input, weights, bias } => {
                    let (di, dw, db) = dense_backward(value(*input), value(*weights), &g);
                    outs.extend([(*input, di), (*weights, dw), (*bias, db)]);
                }
                Op::Relu { input } => outs.push((*input, relu_backward(value(*input), &g))),
                Op::Softmax { input } => outs.push((*input, softmax_backward(&node.value, &g))),
                Op::Dropout { input, mask } => {
                    let data = g.data().iter().zip(mask).map(|(&a, &m)| a * m).collect();
                    outs.push((*input, Tensor::new(g.shape().to_vec(), data)?));
                }
                Op::Concat { a, b } => {
                    let (d1, d2) = (value(*a).shape()[1], value(*b).shape()[1]);
                    let n = g.shape()[0];
                    let mut ga = Vec::with_capacity(n * d1);
                    let mut gb = Vec::with_capacity(n * d2);
                    for row in g.data().chunks_exact((d1 + d2).max(1)).take(n) {
                        ga.extend_from_slice(&row[..d1]);
                        gb.extend_from_slice(&row[d1..]);
                    }
                    outs.push((*a, Tensor::new(vec![n, d1], ga)?));
                    outs.push((*b, Tensor::new(vec![n, d2], gb)?));
                }
                Op::Reshape { input } => {
                    outs.push((*input, g.reshape(value(*input).shape().to_vec())?));
                }
                Op::GatherRows { input, indices } => {
                    let mut full = Tensor::zeros(value(*input).shape().to_vec());
                    let width = g.len() / indices.len().max(1);
                    let buf = full.data_mut();
                    for (k, &r) in indices.iter().enumerate() {
                        for (dst, src) in buf[r * width..(r + 1) * width].iter_mut().zip(&g.data()[k * width..]) {
                            *dst += *src;
                        }
                    }
                    outs.push((*input, full));
                }
                Op::Gru { inputs, h0, weights, cache } => {
                    let w = GruWeights::from_slice(weights.map(|j| value(j)));
                    let grads = gru_backward(value(*inputs), &w, cache, &g);
                    outs.push((*inputs, grads.d_inputs));
                    outs.push((*h0, grads.d_h0));
                    for (j, dw) in weights.iter().zip(grads.d_weights) {
                        outs.push((*j, dw));
                    }
                }
                Op::LastStep { input } => {
                    let s = value(*input).shape();
                    let mut full = Tensor::zeros(s.to_vec());
                    let width = s[1] * s[2];
                    full.data_mut()[(s[0] - 1) * width..].copy_from_slice(g.data());
                    outs.push((*input, full));
                }
                Op::CrossEntropy { probs, targets } => {
                    outs.push((*probs, cross_entropy_backward(value(*probs), targets, g.item())));
                }
                Op::Sum { input } => {
                    outs.push((*input, Tensor::full(value(*input).shape().to_vec(), g.item())));
                }
                Op::WeightedSum { input, weights } => {
                    let s = g.item();
                    let data = weights.data().iter().map(|&w| w * s).collect();
                    outs.push((*input, Tensor::new(weights.shape().to_vec(), data)?));
                }
                Op::Add { a, b } => {
                    outs.push((*a, g.clone()));
                    outs.push((*b, g));
                }
            }
            let negate = self.fault == Some(node.op.kind());
            for (j, mut dg) in outs {
                if negate {
                    dg.data_mut().iter_mut().for_each(|v| *v = -*v);
                }
                acc(&mut grads, j, dg);
            }
        }
        Ok(Gradients { tape: self.id, grads })
    }
}
