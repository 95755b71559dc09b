//! Dynamic reverse-mode tape.
//!
//! Every operation appends a node holding its output value and the
//! context its backward rule needs. [`Tape::backward`] walks the nodes in
//! reverse, so the recording order is a valid topological order by
//! construction. Gradients are kept for parameter leaves and for any
//! interior node marked with [`Tape::retain_grad`] (Grad-CAM taps the
//! final feature activation this way).

use std::sync::atomic::{AtomicU64, Ordering};

use super::kernels::{self, ConvGeometry};
use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::tensor::{Real, Tensor};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed)
}

/// Handle to a value recorded on a specific tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

/// Train mode enables dropout; eval mode makes it the identity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

enum Op<T> {
    Leaf,
    Conv2d { input: usize, weight: usize, bias: usize, geometry: ConvGeometry },
    MaxPool { input: usize, argmax: Vec<usize> },
    Relu { input: usize },
    Dropout { input: usize, mask: Vec<T> },
    GlobalAvgPool { input: usize },
    SoftmaxCrossEntropy { logits: usize, labels: Vec<usize>, probs: Tensor<T> },
    Add { a: usize, b: usize },
    Sum { input: usize },
    WeightedSum { input: usize, weights: Vec<T> },
    Pick { input: usize, index: usize },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::MaxPool { .. } => "maxpool2d",
            Op::Relu { .. } => "relu",
            Op::Dropout { .. } => "dropout",
            Op::GlobalAvgPool { .. } => "global_avg_pool",
            Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
            Op::Add { .. } => "add",
            Op::Sum { .. } => "sum",
            Op::WeightedSum { .. } => "weighted_sum",
            Op::Pick { .. } => "pick",
        }
    }

    fn inputs(&self) -> Vec<usize> {
        match *self {
            Op::Leaf => vec![],
            Op::Conv2d { input, weight, bias, .. } => vec![input, weight, bias],
            Op::MaxPool { input, .. }
            | Op::Relu { input }
            | Op::Dropout { input, .. }
            | Op::GlobalAvgPool { input }
            | Op::Sum { input }
            | Op::WeightedSum { input, .. }
            | Op::Pick { input, .. } => vec![input],
            Op::SoftmaxCrossEntropy { logits, .. } => vec![logits],
            Op::Add { a, b } => vec![a, b],
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    retain: bool,
}

/// Recording of one forward pass.
pub struct Tape<T: Real = f32> {
    id: u64,
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by one backward pass, keyed by the variables of the
/// tape that produced them.
pub struct Gradients<T> {
    tape: u64,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of `var`, if it was a parameter leaf or retained node
    /// reachable from the loss.
    pub fn get(&self, var: Var) -> Result<Option<&Tensor<T>>> {
        if var.tape != self.tape {
            return Err(Error::Detached);
        }
        Ok(self.grads.get(var.index).and_then(Option::as_ref))
    }

    pub fn take(&mut self, var: Var) -> Result<Option<Tensor<T>>> {
        if var.tape != self.tape {
            return Err(Error::Detached);
        }
        Ok(self.grads.get_mut(var.index).and_then(Option::take))
    }
}

fn check_finite<T: Real>(t: &Tensor<T>, op: &'static str) -> Result<()> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(op))
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { id: fresh_id(), nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn index(&self, var: Var) -> Result<usize> {
        if var.tape != self.id || var.index >= self.nodes.len() {
            return Err(Error::Detached);
        }
        Ok(var.index)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Result<Var> {
        check_finite(&value, op.name())?;
        let requires_grad = op.inputs().iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node { value, op, requires_grad, retain: false });
        Ok(Var { tape: self.id, index: self.nodes.len() - 1 })
    }

    /// Record a leaf. Leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<Var> {
        check_finite(&value, "leaf")?;
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad, retain: requires_grad });
        Ok(Var { tape: self.id, index: self.nodes.len() - 1 })
    }

    pub fn param(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, false)
    }

    /// Keep the gradient of an interior node (or constant leaf) after backward.
    pub fn retain_grad(&mut self, var: Var) -> Result<()> {
        let i = self.index(var)?;
        self.nodes[i].retain = true;
        Ok(())
    }

    pub fn value(&self, var: Var) -> Result<&Tensor<T>> {
        Ok(&self.nodes[self.index(var)?].value)
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize, padding: usize) -> Result<Var> {
        let (i, w, b) = (self.index(input)?, self.index(weight)?, self.index(bias)?);
        let (out, geometry) = kernels::conv2d_forward(
            &self.nodes[i].value,
            &self.nodes[w].value,
            &self.nodes[b].value,
            stride,
            padding,
        )?;
        self.push(out, Op::Conv2d { input: i, weight: w, bias: b, geometry })
    }

    pub fn maxpool2x2(&mut self, input: Var) -> Result<Var> {
        let i = self.index(input)?;
        let (out, argmax) = kernels::maxpool2x2_forward(&self.nodes[i].value)?;
        self.push(out, Op::MaxPool { input: i, argmax })
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        let i = self.index(input)?;
        let out = kernels::relu_forward(&self.nodes[i].value);
        self.push(out, Op::Relu { input: i })
    }

    /// Inverted dropout. Eval mode returns `input` unchanged; train mode
    /// zeroes each element with probability `rate` and scales survivors
    /// by 1/(1−rate).
    pub fn dropout(&mut self, input: Var, rate: f64, mode: Mode, rng: &mut RngState) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidArgument(format!("dropout rate {rate} outside [0, 1)")));
        }
        let i = self.index(input)?;
        if mode == Mode::Eval || rate == 0.0 {
            return Ok(input);
        }
        let scale = T::of(1.0 / (1.0 - rate));
        let mask: Vec<T> = (0..self.nodes[i].value.len())
            .map(|_| if rng.bernoulli(rate) { T::zero() } else { scale })
            .collect();
        let x = &self.nodes[i].value;
        let data = x.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        self.push(out, Op::Dropout { input: i, mask })
    }

    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let i = self.index(input)?;
        let out = kernels::global_avg_pool_forward(&self.nodes[i].value)?;
        self.push(out, Op::GlobalAvgPool { input: i })
    }

    /// Mean softmax cross-entropy. Returns the scalar loss variable and the
    /// class probabilities.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<(Var, Tensor<T>)> {
        let i = self.index(logits)?;
        let (loss, probs) = kernels::softmax_cross_entropy_forward(&self.nodes[i].value, labels)?;
        let var = self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy { logits: i, labels: labels.to_vec(), probs: probs.clone() },
        )?;
        Ok((var, probs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.index(a)?, self.index(b)?);
        let (x, y) = (&self.nodes[ia].value, &self.nodes[ib].value);
        if x.shape() != y.shape() {
            return Err(Error::shape("add", format!("{:?} vs {:?}", x.shape(), y.shape())));
        }
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p + q).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        self.push(out, Op::Add { a: ia, b: ib })
    }

    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let i = self.index(input)?;
        let out = Tensor::scalar(self.nodes[i].value.sum());
        self.push(out, Op::Sum { input: i })
    }

    /// Scalar Σ wᵢ·xᵢ against constant weights.
    pub fn weighted_sum(&mut self, input: Var, weights: &[T]) -> Result<Var> {
        let i = self.index(input)?;
        let x = &self.nodes[i].value;
        if weights.len() != x.len() {
            return Err(Error::shape(
                "weighted_sum",
                format!("{} weights for {} values", weights.len(), x.len()),
            ));
        }
        let s = x.data().iter().zip(weights).map(|(&a, &b)| a * b).sum();
        self.push(Tensor::scalar(s), Op::WeightedSum { input: i, weights: weights.to_vec() })
    }

    /// Scalar view of one flat element, e.g. a single class logit.
    pub fn pick(&mut self, input: Var, index: usize) -> Result<Var> {
        let i = self.index(input)?;
        let x = &self.nodes[i].value;
        let v = *x
            .data()
            .get(index)
            .ok_or_else(|| Error::shape("pick", format!("index {index} out of {}", x.len())))?;
        self.push(Tensor::scalar(v), Op::Pick { input: i, index })
    }

    /// Reverse pass from scalar `loss`. Gradients are summed at fan-out
    /// points. The tape is cleared afterwards and every variable recorded on
    /// it becomes detached.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        let root = self.index(loss)?;
        if !self.nodes[root].value.is_scalar() {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.nodes[root].value.shape()),
            ));
        }
        let nodes = std::mem::take(&mut self.nodes);
        let tape = self.id;
        self.id = fresh_id();

        // A node needs a gradient if it, or anything it depends on, is a
        // parameter or retained node.
        let mut needs = vec![false; nodes.len()];
        for (k, node) in nodes.iter().enumerate().take(root + 1) {
            needs[k] = node.requires_grad
                || node.retain
                || node.op.inputs().iter().any(|&i| needs[i]);
        }

        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[root] = Some(Tensor::scalar(T::one()));

        for k in (0..=root).rev() {
            let Some(g) = grads[k].take() else { continue };
            if !needs[k] {
                continue;
            }
            let node = &nodes[k];
            check_finite(&g, node.op.name())?;
            let contributions = backward_rule(&nodes, &node.op, &g, &needs)?;
            for (i, gi) in contributions {
                accumulate(&mut grads[i], gi)?;
            }
            if node.retain {
                grads[k] = Some(g);
            }
        }
        for (k, node) in nodes.iter().enumerate() {
            if !node.retain {
                grads[k] = None;
            }
        }
        Ok(Gradients { tape, grads })
    }
}

fn accumulate<T: Real>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) -> Result<()> {
    match slot {
        None => *slot = Some(g),
        Some(acc) => {
            if acc.shape() != g.shape() {
                return Err(Error::shape("backward", "gradient shape mismatch at fan-in"));
            }
            for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a = *a + b;
            }
        }
    }
    Ok(())
}

fn backward_rule<T: Real>(
    nodes: &[Node<T>],
    op: &Op<T>,
    g: &Tensor<T>,
    needs: &[bool],
) -> Result<Vec<(usize, Tensor<T>)>> {
    let mut out = Vec::new();
    match op {
        Op::Leaf => {}
        Op::Conv2d { input, weight, bias, geometry } => {
            let (dx, dw, db) = kernels::conv2d_backward(
                &nodes[*input].value,
                &nodes[*weight].value,
                g,
                geometry,
                needs[*input],
            )?;
            if let Some(dx) = dx {
                out.push((*input, dx));
            }
            if needs[*weight] {
                out.push((*weight, dw));
            }
            if needs[*bias] {
                out.push((*bias, db));
            }
        }
        Op::MaxPool { input, argmax } => {
            let dx = kernels::maxpool2x2_backward(g, argmax, nodes[*input].value.shape())?;
            out.push((*input, dx));
        }
        Op::Relu { input } => {
            out.push((*input, kernels::relu_backward(&nodes[*input].value, g)?));
        }
        Op::Dropout { input, mask } => {
            let data = g.data().iter().zip(mask).map(|(&a, &m)| a * m).collect();
            out.push((*input, Tensor::new(g.shape().to_vec(), data)?));
        }
        Op::GlobalAvgPool { input } => {
            let dx = kernels::global_avg_pool_backward(g, nodes[*input].value.shape())?;
            out.push((*input, dx));
        }
        Op::SoftmaxCrossEntropy { logits, labels, probs } => {
            let dz = kernels::softmax_cross_entropy_backward(probs, labels, g.data()[0])?;
            out.push((*logits, dz));
        }
        Op::Add { a, b } => {
            out.push((*a, g.clone()));
            out.push((*b, g.clone()));
        }
        Op::Sum { input } => {
            out.push((*input, Tensor::full(nodes[*input].value.shape(), g.data()[0])));
        }
        Op::WeightedSum { input, weights } => {
            let s = g.data()[0];
            let data = weights.iter().map(|&w| w * s).collect();
            out.push((*input, Tensor::new(nodes[*input].value.shape().to_vec(), data)?));
        }
        Op::Pick { input, index } => {
            let mut d = Tensor::zeros(nodes[*input].value.shape());
            d.data_mut()[*index] = g.data()[0];
            out.push((*input, d));
        }
    }
    Ok(out.into_iter().filter(|(i, _)| needs[*i]).collect())
}
