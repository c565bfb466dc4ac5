//! Reverse-mode differentiation over a linear tape of recorded operations.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::kernels::{self, BnCache, BnMode, RunningStats};
use crate::tensor::{LabelMask, Real, Shape, Tensor};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

impl Var {
    pub fn index(self) -> usize {
        self.index
    }
}

/// Kind tag of a recorded operation, used for graph inspection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    Conv2d,
    Relu,
    BatchNorm,
    MaxPool,
    Upsample,
    Concat,
    Add,
    SoftmaxCe,
    WeightedSum,
}

enum Op<T> {
    Leaf,
    Conv2d { x: usize, w: usize, b: usize },
    Relu { x: usize },
    BatchNorm { x: usize, gamma: usize, beta: usize, cache: BnCache<T> },
    MaxPool { x: usize, argmax: Vec<u32> },
    Upsample { x: usize },
    Concat { a: usize, b: usize },
    Add { a: usize, b: usize },
    SoftmaxCe { logits: usize, probs: Vec<T>, target: Vec<u8> },
    WeightedSum { x: usize, weights: Vec<T> },
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::Relu { .. } => OpKind::Relu,
            Op::BatchNorm { .. } => OpKind::BatchNorm,
            Op::MaxPool { .. } => OpKind::MaxPool,
            Op::Upsample { .. } => OpKind::Upsample,
            Op::Concat { .. } => OpKind::Concat,
            Op::Add { .. } => OpKind::Add,
            Op::SoftmaxCe { .. } => OpKind::SoftmaxCe,
            Op::WeightedSum { .. } => OpKind::WeightedSum,
        }
    }

    fn inputs(&self) -> Vec<usize> {
        match *self {
            Op::Leaf => vec![],
            Op::Conv2d { x, w, b } => vec![x, w, b],
            Op::Relu { x } | Op::MaxPool { x, .. } | Op::Upsample { x } | Op::WeightedSum { x, .. } => vec![x],
            Op::BatchNorm { x, gamma, beta, .. } => vec![x, gamma, beta],
            Op::Concat { a, b } | Op::Add { a, b } => vec![a, b],
            Op::SoftmaxCe { logits, .. } => vec![logits],
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
    /// Full-precision copy of scalar reductions.
    exact: Option<f64>,
}

/// Records operations in execution order; [`Tape::backward`] replays them in
/// reverse. Leaves created with `requires_grad` receive their gradient in
/// `Tensor::grad` after a backward pass.
pub struct Tape<T> {
    id: u64,
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed), nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::NotOnTape);
        }
        Ok(v.index)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let needs_grad = match op {
            Op::Leaf => value.requires_grad,
            _ => op.inputs().iter().any(|&i| self.nodes[i].needs_grad),
        };
        self.nodes.push(Node { value, op, needs_grad, exact: None });
        Var { tape: self.id, index: self.nodes.len() - 1 }
    }

    /// Records an input tensor. Its gradient is tracked iff `requires_grad` is set.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        let mut tensor = tensor;
        tensor.grad = None;
        self.push(tensor, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[self.idx(v).expect("variable from another tape")].value
    }

    /// Value of a scalar variable. Loss reductions are accumulated in f64
    /// and reported here without rounding to the element type.
    pub fn scalar(&self, v: Var) -> f64 {
        let node = &self.nodes[self.idx(v).expect("variable from another tape")];
        node.exact.unwrap_or_else(|| node.value.data()[0].as_f64())
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.value(v).shape()
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes.get(v.index).filter(|_| v.tape == self.id)?.value.grad.as_deref()
    }

    /// Removes and returns the tensor behind a leaf, including its gradient.
    pub fn take(&mut self, v: Var) -> Tensor<T> {
        let i = self.idx(v).expect("variable from another tape");
        let shape = self.nodes[i].value.shape();
        std::mem::replace(&mut self.nodes[i].value, Tensor::zeros(Shape::new(0, shape.c, shape.h, shape.w)))
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes[v.index].op.kind()
    }

    /// Input variables of the operation that produced `v`.
    pub fn inputs(&self, v: Var) -> Vec<Var> {
        self.nodes[v.index].op.inputs().into_iter().map(|index| Var { tape: self.id, index }).collect()
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xi, wi, bi) = (self.idx(x)?, self.idx(w)?, self.idx(b)?);
        let out = kernels::conv2d(&self.nodes[xi].value, &self.nodes[wi].value, &self.nodes[bi].value)?;
        Ok(self.push(out, Op::Conv2d { x: xi, w: wi, b: bi }))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let out = kernels::relu(&self.nodes[xi].value);
        Ok(self.push(out, Op::Relu { x: xi }))
    }

    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &mut RunningStats<T>,
        mode: BnMode,
        name: &str,
    ) -> Result<Var> {
        let (xi, gi, bi) = (self.idx(x)?, self.idx(gamma)?, self.idx(beta)?);
        if mode == BnMode::Eval && !stats.is_populated() {
            return Err(Error::UnpopulatedStats(name.to_string()));
        }
        let (out, cache) = kernels::batch_norm(
            &self.nodes[xi].value,
            self.nodes[gi].value.data(),
            self.nodes[bi].value.data(),
            stats,
            mode,
        )?;
        Ok(self.push(out, Op::BatchNorm { x: xi, gamma: gi, beta: bi, cache }))
    }

    pub fn maxpool2x2(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let (out, argmax) = kernels::maxpool2x2(&self.nodes[xi].value)?;
        Ok(self.push(out, Op::MaxPool { x: xi, argmax }))
    }

    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let out = kernels::upsample_nearest2x(&self.nodes[xi].value);
        Ok(self.push(out, Op::Upsample { x: xi }))
    }

    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        let out = kernels::concat_channels(&self.nodes[ai].value, &self.nodes[bi].value)?;
        Ok(self.push(out, Op::Concat { a: ai, b: bi }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        let (va, vb) = (&self.nodes[ai].value, &self.nodes[bi].value);
        if va.shape() != vb.shape() {
            return Err(Error::shape("add", format!("{} vs {}", va.shape(), vb.shape())));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::from_vec(va.shape(), data)?;
        Ok(self.push(out, Op::Add { a: ai, b: bi }))
    }

    /// Mean softmax cross-entropy; yields a scalar variable.
    pub fn softmax_ce(&mut self, logits: Var, target: &LabelMask) -> Result<Var> {
        let li = self.idx(logits)?;
        let (loss, probs) = kernels::softmax_ce(&self.nodes[li].value, target)?;
        let v = self.push(Tensor::scalar(T::of(loss)), Op::SoftmaxCe { logits: li, probs, target: target.labels.clone() });
        self.nodes[v.index].exact = Some(loss);
        Ok(v)
    }

    /// `Σ x·weights`, a scalar. Used to build generic losses for gradient tests.
    pub fn weighted_sum(&mut self, x: Var, weights: Vec<T>) -> Result<Var> {
        let xi = self.idx(x)?;
        let v = &self.nodes[xi].value;
        if weights.len() != v.numel() {
            return Err(Error::shape("weighted_sum", format!("{} weights for {} elements", weights.len(), v.numel())));
        }
        let total: f64 = v.data().iter().zip(&weights).map(|(&a, &b)| (a * b).as_f64()).sum();
        let v = self.push(Tensor::scalar(T::of(total)), Op::WeightedSum { x: xi, weights });
        self.nodes[v.index].exact = Some(total);
        Ok(v)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        self.weighted_sum(x, vec![T::one(); n])
    }

    /// Smallest distance of any ReLU input to zero and of any max-pool window
    /// to a tie, over everything recorded so far. Finite differences are only
    /// trustworthy when this exceeds the perturbation size.
    pub fn kink_margin(&self) -> f64 {
        let mut margin = f64::INFINITY;
        for node in &self.nodes {
            match &node.op {
                Op::Relu { x } => {
                    for &v in self.nodes[*x].value.data() {
                        margin = margin.min(v.as_f64().abs());
                    }
                }
                Op::MaxPool { x, argmax } => {
                    let input = &self.nodes[*x].value;
                    let s = input.shape();
                    let data = input.data();
                    let (oh, ow) = (s.h / 2, s.w / 2);
                    for (o, &win) in argmax.iter().enumerate() {
                        let (ox, oy, nc) = (o % ow, (o / ow) % oh, o / (oh * ow));
                        let best = data[win as usize];
                        for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                            let i = nc * s.plane() + (2 * oy + dy) * s.w + 2 * ox + dx;
                            // Exact zero ties come from ReLU outputs and stay tied under
                            // perturbation as long as the ReLU inputs are off the kink.
                            if i != win as usize && !(best == T::zero() && data[i] == T::zero()) {
                                margin = margin.min((best - data[i]).as_f64().abs());
                            }
                        }
                    }
                }
                _ => {}
            }
        }
        margin
    }

    /// Hash of every ReLU input sign and max-pool argmax on the tape. Two
    /// evaluations with the same pattern lie in the same linear piece of
    /// the piecewise-smooth graph.
    pub fn activation_pattern(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu { x } => {
                    for &v in self.nodes[*x].value.data() {
                        (v > T::zero()).hash(&mut h);
                    }
                }
                Op::MaxPool { argmax, .. } => argmax.hash(&mut h),
                _ => {}
            }
        }
        h.finish()
    }

    /// Propagates `d loss / d v` to every recorded value that needs it.
    /// Gradients of leaves with `requires_grad` accumulate into their `grad`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let root = self.idx(loss)?;
        let shape = self.nodes[root].value.shape();
        if shape.numel() != 1 {
            return Err(Error::NonScalarLoss(shape.to_string()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=root).map(|_| None).collect();
        grads[root] = Some(vec![T::one()]);

        for i in (0..=root).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            let node = &self.nodes[i];
            let wants = |j: usize| self.nodes[j].needs_grad;
            match &node.op {
                Op::Leaf => {
                    let value = &mut self.nodes[i].value;
                    match value.grad.as_mut() {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                        None => value.grad = Some(g),
                    }
                }
                &Op::Conv2d { x, w, b } => {
                    let cg = kernels::conv2d_backward(
                        &self.nodes[x].value,
                        &self.nodes[w].value,
                        &g,
                        [wants(x), wants(w), wants(b)],
                    );
                    accumulate(&mut grads, x, cg.input);
                    accumulate(&mut grads, w, cg.weight);
                    accumulate(&mut grads, b, cg.bias);
                }
                &Op::Relu { x } => {
                    let dx = kernels::relu_backward(self.nodes[x].value.data(), &g);
                    accumulate(&mut grads, x, Some(dx));
                }
                Op::BatchNorm { x, gamma, beta, cache } => {
                    let (x, gamma, beta) = (*x, *gamma, *beta);
                    let bg = kernels::batch_norm_backward(
                        self.nodes[x].value.shape(),
                        self.nodes[gamma].value.data(),
                        cache,
                        &g,
                    );
                    accumulate(&mut grads, x, wants(x).then_some(bg.input));
                    accumulate(&mut grads, gamma, wants(gamma).then_some(bg.gamma));
                    accumulate(&mut grads, beta, wants(beta).then_some(bg.beta));
                }
                Op::MaxPool { x, argmax } => {
                    let dx = kernels::maxpool2x2_backward(self.nodes[*x].value.shape(), argmax, &g);
                    accumulate(&mut grads, *x, Some(dx));
                }
                &Op::Upsample { x } => {
                    let dx = kernels::upsample_nearest2x_backward(self.nodes[x].value.shape(), &g);
                    accumulate(&mut grads, x, Some(dx));
                }
                &Op::Concat { a, b } => {
                    let (da, db) = kernels::concat_channels_backward(
                        self.nodes[a].value.shape(),
                        self.nodes[b].value.shape(),
                        &g,
                    );
                    accumulate(&mut grads, a, wants(a).then_some(da));
                    accumulate(&mut grads, b, wants(b).then_some(db));
                }
                &Op::Add { a, b } => {
                    if wants(a) && wants(b) {
                        accumulate(&mut grads, a, Some(g.clone()));
                        accumulate(&mut grads, b, Some(g));
                    } else if wants(a) {
                        accumulate(&mut grads, a, Some(g));
                    } else {
                        accumulate(&mut grads, b, Some(g));
                    }
                }
                Op::SoftmaxCe { logits, probs, target } => {
                    let dx = kernels::softmax_ce_backward(self.nodes[*logits].value.shape(), probs, target, g[0]);
                    accumulate(&mut grads, *logits, Some(dx));
                }
                Op::WeightedSum { x, weights } => {
                    let dx = weights.iter().map(|&w| w * g[0]).collect();
                    accumulate(&mut grads, *x, Some(dx));
                }
            }
        }
        Ok(())
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Vec<T>>], i: usize, g: Option<Vec<T>>) {
    let Some(g) = g else { return };
    match grads[i].as_mut() {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
        None => grads[i] = Some(g),
    }
}
