//! Reverse-mode automatic differentiation over a recording tape.
//!
//! Every operation appends a node holding its value and whatever it needs
//! for the backward pass. Nodes only reference earlier nodes, so a single
//! reverse sweep over the tape visits them in a valid order.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::nn::{self, ConvGeometry};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EwiseKind {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    Param,
    Add,
    Sub,
    Mul,
    Div,
    AddChannel,
    SubChannel,
    MulChannel,
    Scale,
    AddScalar,
    Sum,
    Mean,
    Relu,
    Trelu,
    Sigmoid,
    Conv,
    BatchNorm,
    MaxPool,
    Upsample,
    Concat,
    SliceChannels,
    BceWithLogits,
}

#[derive(Debug)]
pub(crate) enum Op {
    Leaf,
    Param,
    Binary(OpKind, Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sum(Var),
    Mean(Var),
    Relu(Var),
    Trelu(Var),
    Sigmoid(Var),
    Conv {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        geom: ConvGeometry,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        saved: nn::BnSaved,
    },
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    Upsample {
        input: Var,
        factor: [usize; 3],
    },
    Concat(Var, Var),
    SliceChannels {
        input: Var,
        start: usize,
    },
    BceWithLogits {
        logits: Var,
        target: Tensor,
    },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Param => OpKind::Param,
            Op::Binary(k, ..) => *k,
            Op::Scale(..) => OpKind::Scale,
            Op::AddScalar(..) => OpKind::AddScalar,
            Op::Sum(..) => OpKind::Sum,
            Op::Mean(..) => OpKind::Mean,
            Op::Relu(..) => OpKind::Relu,
            Op::Trelu(..) => OpKind::Trelu,
            Op::Sigmoid(..) => OpKind::Sigmoid,
            Op::Conv { .. } => OpKind::Conv,
            Op::BatchNorm { .. } => OpKind::BatchNorm,
            Op::MaxPool { .. } => OpKind::MaxPool,
            Op::Upsample { .. } => OpKind::Upsample,
            Op::Concat(..) => OpKind::Concat,
            Op::SliceChannels { .. } => OpKind::SliceChannels,
            Op::BceWithLogits { .. } => OpKind::BceWithLogits,
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf | Op::Param => vec![],
            Op::Binary(_, a, b) | Op::Concat(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Relu(a)
            | Op::Trelu(a)
            | Op::Sigmoid(a) => vec![*a],
            Op::Conv {
                input,
                kernel,
                bias,
                ..
            } => {
                let mut v = vec![*input, *kernel];
                v.extend(bias);
                v
            }
            Op::BatchNorm {
                input, gamma, beta, ..
            } => vec![*input, *gamma, *beta],
            Op::MaxPool { input, .. }
            | Op::Upsample { input, .. }
            | Op::SliceChannels { input, .. } => vec![*input],
            Op::BceWithLogits { logits, .. } => vec![*logits],
        }
    }
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
}

#[derive(Debug)]
struct ParamBinding {
    var: Var,
    trainable: bool,
}

/// A recording of one forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: BTreeMap<String, ParamBinding>,
    order: Vec<String>,
    precise: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape whose convolutions accumulate with compensated summation.
    /// Slower, and not bit-identical to [`Tape::new`]; meant for reference
    /// evaluations such as finite differences.
    pub fn precise() -> Self {
        Tape {
            precise: true,
            ..Self::default()
        }
    }

    pub fn is_precise(&self) -> bool {
        self.precise
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub(crate) fn push(&mut self, op: Op, value: Tensor, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name));
        }
        self.nodes.push(Node { op, value });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records a constant input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
        });
        Var(self.nodes.len() - 1)
    }

    /// Binds a named parameter. Binding the same name twice returns the
    /// first node.
    pub fn param(&mut self, name: &str, value: &Tensor, trainable: bool) -> Var {
        if let Some(b) = self.params.get(name) {
            return b.var;
        }
        self.nodes.push(Node {
            op: Op::Param,
            value: value.clone(),
        });
        let var = Var(self.nodes.len() - 1);
        self.params
            .insert(String::from(name), ParamBinding { var, trainable });
        self.order.push(String::from(name));
        var
    }

    pub fn param_var(&self, name: &str) -> Option<Var> {
        self.params.get(name).map(|b| b.var)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Value of a one-element node.
    pub fn scalar(&self, v: Var) -> Result<f64> {
        let t = self.value(v);
        t.item().ok_or_else(|| Error::NonScalarLoss(t.shape().to_vec()))
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    pub fn inputs(&self, v: Var) -> Vec<Var> {
        self.nodes[v.0].op.inputs()
    }

    pub fn ewise(&mut self, kind: EwiseKind, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            let (x, y) = (self.value(a).data(), self.value(b).data());
            let data: Vec<f64> = match kind {
                EwiseKind::Add => x.iter().zip(y).map(|(p, q)| p + q).collect(),
                EwiseKind::Sub => x.iter().zip(y).map(|(p, q)| p - q).collect(),
                EwiseKind::Mul => x.iter().zip(y).map(|(p, q)| p * q).collect(),
            };
            let op_kind = match kind {
                EwiseKind::Add => OpKind::Add,
                EwiseKind::Sub => OpKind::Sub,
                EwiseKind::Mul => OpKind::Mul,
            };
            let t = Tensor::from_parts(sa.to_vec(), data);
            return self.push(Op::Binary(op_kind, a, b), t, "ewise");
        }
        let channels = self.value(a).channels();
        if sb.len() != 1 || channels != Some(sb[0]) {
            return Err(Error::shapes("ewise", sa, sb));
        }
        let batch = *sa.last().unwrap();
        let c = sb[0];
        let w = self.value(b).data();
        let mut out = self.value(a).data().to_vec();
        for (i, v) in out.iter_mut().enumerate() {
            let s = w[(i / batch) % c];
            match kind {
                EwiseKind::Add => *v += s,
                EwiseKind::Sub => *v -= s,
                EwiseKind::Mul => *v *= s,
            }
        }
        let op_kind = match kind {
            EwiseKind::Add => OpKind::AddChannel,
            EwiseKind::Sub => OpKind::SubChannel,
            EwiseKind::Mul => OpKind::MulChannel,
        };
        let t = Tensor::from_parts(sa.to_vec(), out);
        self.push(Op::Binary(op_kind, a, b), t, "ewise")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.ewise(EwiseKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.ewise(EwiseKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.ewise(EwiseKind::Mul, a, b)
    }

    /// Elementwise quotient of equally shaped tensors.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shapes("div", sa, sb));
        }
        let x = self.value(a).data();
        let y = self.value(b).data();
        if y.iter().any(|&q| q == 0.0) {
            return Err(Error::NonFinite("div"));
        }
        let t = Tensor::from_parts(sa.to_vec(), x.iter().zip(y).map(|(p, q)| p / q).collect());
        self.push(Op::Binary(OpKind::Div, a, b), t, "div")
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let t = self.value(a).map(|v| v * factor);
        self.push(Op::Scale(a, factor), t, "scale")
    }

    pub fn add_scalar(&mut self, a: Var, offset: f64) -> Result<Var> {
        let t = self.value(a).map(|v| v + offset);
        self.push(Op::AddScalar(a), t, "add_scalar")
    }

    /// Plain left-to-right sum, or compensated on a precise tape.
    fn total(&self, t: &Tensor) -> f64 {
        if self.precise {
            compensated_sum(t.data().iter().copied())
        } else {
            t.sum()
        }
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let t = Tensor::scalar(self.total(self.value(a)));
        self.push(Op::Sum(a), t, "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let t = Tensor::scalar(self.total(v) / v.len() as f64);
        self.push(Op::Mean(a), t, "mean")
    }

    /// Computes gradients of `loss` with respect to every node it reaches.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(Var(i), &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: Var, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let out = self.value(node);
        match &self.nodes[node.0].op {
            Op::Leaf | Op::Param => {}
            Op::Binary(kind, a, b) => self.backprop_binary(*kind, *a, *b, g, grads),
            Op::Scale(a, f) => accumulate(grads, *a, g.map(|v| v * f)),
            Op::AddScalar(a) => accumulate(grads, *a, g.clone()),
            Op::Sum(a) => {
                let s = g.data()[0];
                accumulate(grads, *a, Tensor::full(self.shape(*a), s));
            }
            Op::Mean(a) => {
                let n = self.value(*a).len() as f64;
                let s = g.data()[0] / n;
                accumulate(grads, *a, Tensor::full(self.shape(*a), s));
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                let d = x
                    .iter()
                    .zip(g.data())
                    .map(|(&z, &gv)| if z > 0.0 { gv } else { 0.0 })
                    .collect();
                accumulate(grads, *a, Tensor::from_parts(g.shape().to_vec(), d));
            }
            Op::Trelu(a) => {
                let x = self.value(*a).data();
                let d = x
                    .iter()
                    .zip(g.data())
                    .map(|(&z, &gv)| gv * nn::trelu_slope(z))
                    .collect();
                accumulate(grads, *a, Tensor::from_parts(g.shape().to_vec(), d));
            }
            Op::Sigmoid(a) => {
                let d = out
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&s, &gv)| gv * s * (1.0 - s))
                    .collect();
                accumulate(grads, *a, Tensor::from_parts(g.shape().to_vec(), d));
            }
            Op::Conv {
                input,
                kernel,
                bias,
                geom,
            } => {
                let grad_bias = bias.is_some();
                let (di, dk, db) =
                    nn::conv_backward(self.value(*input), self.value(*kernel), g, geom, grad_bias);
                accumulate(grads, *input, di);
                accumulate(grads, *kernel, dk);
                if let (Some(b), Some(db)) = (bias, db) {
                    accumulate(grads, *b, db);
                }
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                saved,
            } => {
                let (dx, dgamma, dbeta) = nn::batchnorm_backward(self.value(*gamma), saved, g);
                accumulate(grads, *input, dx);
                accumulate(grads, *gamma, dgamma);
                accumulate(grads, *beta, dbeta);
            }
            Op::MaxPool { input, argmax } => {
                let mut d = self.value(*input).zeros_like();
                let dd = d.data_mut();
                for (&src, &gv) in argmax.iter().zip(g.data()) {
                    dd[src] += gv;
                }
                accumulate(grads, *input, d);
            }
            Op::Upsample { input, factor } => {
                let d = nn::upsample_backward(self.value(*input).shape(), g, *factor);
                accumulate(grads, *input, d);
            }
            Op::Concat(a, b) => {
                let ca = self.value(*a).channels().unwrap();
                let cb = self.value(*b).channels().unwrap();
                accumulate(grads, *a, nn::slice_channels_raw(g, 0, ca));
                accumulate(grads, *b, nn::slice_channels_raw(g, ca, cb));
            }
            Op::SliceChannels { input, start } => {
                let d = nn::scatter_channels(self.value(*input).shape(), g, *start);
                accumulate(grads, *input, d);
            }
            Op::BceWithLogits { logits, target } => {
                let x = self.value(*logits);
                let n = x.len() as f64;
                let s = g.data()[0] / n;
                let d = x
                    .data()
                    .iter()
                    .zip(target.data())
                    .map(|(&z, &t)| s * (nn::sigmoid_scalar(z) - t))
                    .collect();
                accumulate(grads, *logits, Tensor::from_parts(x.shape().to_vec(), d));
            }
        }
    }

    fn backprop_binary(
        &self,
        kind: OpKind,
        a: Var,
        b: Var,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) {
        let (x, y) = (self.value(a), self.value(b));
        let shape = g.shape().to_vec();
        let zip = |f: &dyn Fn(f64, f64, f64) -> f64| -> Tensor {
            let d = x
                .data()
                .iter()
                .zip(y.data())
                .zip(g.data())
                .map(|((&p, &q), &gv)| f(p, q, gv))
                .collect();
            Tensor::from_parts(shape.clone(), d)
        };
        match kind {
            OpKind::Add => {
                accumulate(grads, a, g.clone());
                accumulate(grads, b, g.clone());
            }
            OpKind::Sub => {
                accumulate(grads, a, g.clone());
                accumulate(grads, b, g.map(|v| -v));
            }
            OpKind::Mul => {
                accumulate(grads, a, zip(&|_, q, gv| gv * q));
                accumulate(grads, b, zip(&|p, _, gv| gv * p));
            }
            OpKind::Div => {
                accumulate(grads, a, zip(&|_, q, gv| gv / q));
                accumulate(grads, b, zip(&|p, q, gv| -gv * p / (q * q)));
            }
            OpKind::AddChannel | OpKind::SubChannel | OpKind::MulChannel => {
                let batch = *shape.last().unwrap();
                let c = y.len();
                let w = y.data();
                let mut dw = vec![0.0; c];
                let mut dx = g.data().to_vec();
                for (i, gv) in g.data().iter().enumerate() {
                    let ch = (i / batch) % c;
                    match kind {
                        OpKind::AddChannel => dw[ch] += gv,
                        OpKind::SubChannel => dw[ch] -= gv,
                        _ => {
                            dw[ch] += gv * x.data()[i];
                            dx[i] = gv * w[ch];
                        }
                    }
                }
                accumulate(grads, a, Tensor::from_parts(shape.clone(), dx));
                accumulate(grads, b, Tensor::from_parts(vec![c], dw));
            }
            _ => unreachable!("not a binary op: {kind:?}"),
        }
    }

    /// Smallest distance from any recorded piecewise-linear op input to one
    /// of its kinks: relu/trelu arguments to 0 (and 1 for trelu), and the gap
    /// between the winner and runner-up of every max-pool window whose
    /// winner is nonzero. Exact zeros are produced by clamped activations
    /// whose own margin is already accounted for.
    pub fn kink_margin(&self) -> f64 {
        let mut margin = f64::INFINITY;
        for node in &self.nodes {
            match &node.op {
                Op::Relu(a) => {
                    for &z in self.value(*a).data() {
                        margin = margin.min(z.abs());
                    }
                }
                Op::Trelu(a) => {
                    for &z in self.value(*a).data() {
                        margin = margin.min(z.abs()).min((z - 1.0).abs());
                    }
                }
                Op::MaxPool { input, .. } => {
                    margin = margin.min(nn::maxpool_tie_gap(self.value(*input), node.value.shape()));
                }
                _ => {}
            }
        }
        margin
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, contrib: Tensor) {
    match &mut grads[v.0] {
        Some(g) => {
            for (a, b) in g.data_mut().iter_mut().zip(contrib.data()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(contrib),
    }
}

/// Per-node gradients from one backward sweep.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of a node, or `None` when the loss does not depend on it.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn wrt_or_zeros(&self, tape: &Tape, v: Var) -> Tensor {
        self.wrt(v)
            .cloned()
            .unwrap_or_else(|| tape.value(v).zeros_like())
    }

    /// Gradients of every trainable parameter bound on `tape`, in binding
    /// order. Parameters the loss does not reach get zero tensors.
    pub fn params(&self, tape: &Tape) -> BTreeMap<String, Tensor> {
        tape.order
            .iter()
            .filter_map(|name| {
                let b = &tape.params[name];
                b.trainable
                    .then(|| (name.clone(), self.wrt_or_zeros(tape, b.var)))
            })
            .collect()
    }
}

/// Central-difference gradient estimate of a scalar function.
/// Neumaier summation.
pub fn compensated_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let (mut s, mut c) = (0.0f64, 0.0f64);
    for v in values {
        let n = s + v;
        c += if s.abs() >= v.abs() { (s - n) + v } else { (v - n) + s };
        s = n;
    }
    s + c
}

pub fn finite_diff_grad<F>(mut f: F, x: &Tensor, eps: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if !(eps > 0.0) {
        return Err(Error::invalid("finite_diff_grad", "eps must be positive"));
    }
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let hi = f(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let lo = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !hi.is_finite() || !lo.is_finite() {
            return Err(Error::NonFinite("finite_diff_grad"));
        }
        out.push((hi - lo) / (2.0 * eps));
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

/// Central-difference gradient of `sum(r * f(x))`. The two perturbed
/// outputs are subtracted elementwise before the projection, so rounding
/// scales with the entries that move rather than with the whole sum.
pub fn finite_diff_vjp<F>(mut f: F, x: &Tensor, r: &Tensor, eps: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<Tensor>,
{
    if !(eps > 0.0) {
        return Err(Error::invalid("finite_diff_vjp", "eps must be positive"));
    }
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let hi = f(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let lo = f(&probe)?;
        probe.data_mut()[i] = orig;
        if hi.shape() != r.shape() || lo.shape() != r.shape() {
            return Err(Error::shapes("finite_diff_vjp", hi.shape(), r.shape()));
        }
        if !hi.is_finite() || !lo.is_finite() {
            return Err(Error::NonFinite("finite_diff_vjp"));
        }
        let d = compensated_sum(hi.data().iter().zip(lo.data()).zip(r.data()).map(|((h, l), w)| (h - l) * w));
        out.push(d / (2.0 * eps));
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

/// Worst-case disagreement between an analytic and a numeric gradient.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GradError {
    /// Largest relative error over elements with reference magnitude at
    /// least [`GradError::TINY`].
    pub max_rel: f64,
    /// Largest absolute error over the remaining (tiny) elements.
    pub max_abs_tiny: f64,
}

impl GradError {
    pub const RTOL: f64 = 1e-5;
    pub const ATOL_TINY: f64 = 1e-8;
    pub const TINY: f64 = 1e-6;

    pub fn measure(analytic: &Tensor, numeric: &Tensor) -> Self {
        let mut e = GradError::default();
        for (&a, &n) in analytic.data().iter().zip(numeric.data()) {
            let reference = a.abs().max(n.abs());
            let diff = (a - n).abs();
            if reference < Self::TINY {
                e.max_abs_tiny = e.max_abs_tiny.max(diff);
            } else {
                e.max_rel = e.max_rel.max(diff / reference);
            }
        }
        e
    }

    pub fn merge(self, other: Self) -> Self {
        GradError {
            max_rel: self.max_rel.max(other.max_rel),
            max_abs_tiny: self.max_abs_tiny.max(other.max_abs_tiny),
        }
    }

    pub fn passes(&self) -> bool {
        self.max_rel < Self::RTOL && self.max_abs_tiny < Self::ATOL_TINY
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::tensor_from;

    #[test]
    fn mul_hand_values() {
        let mut tape = Tape::new();
        let a = tape.leaf(tensor_from(&[2], &[1.0, 2.0]).unwrap());
        let b = tape.leaf(tensor_from(&[2], &[3.0, 4.0]).unwrap());
        let c = tape.mul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[3.0, 8.0]);
    }

    #[test]
    fn identities() {
        let mut tape = Tape::new();
        let x = tensor_from(&[3], &[0.5, -1.25, 7.0]).unwrap();
        let xv = tape.leaf(x.clone());
        let z = tape.leaf(x.zeros_like());
        let o = tape.leaf(Tensor::ones(&[3]));
        let s = tape.add(xv, z).unwrap();
        let p = tape.mul(xv, o).unwrap();
        assert_eq!(tape.value(s), &x);
        assert_eq!(tape.value(p), &x);
    }

    #[test]
    fn incompatible_shapes() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[2, 2, 3, 1]));
        let b = tape.leaf(Tensor::zeros(&[2]));
        assert!(matches!(
            tape.add(a, b),
            Err(Error::ShapeMismatch { op: "ewise", .. })
        ));
    }

    #[test]
    fn channel_broadcast() {
        let mut tape = Tape::new();
        // [H=1, W=2, C=2, B=1]
        let a = tape.leaf(tensor_from(&[1, 2, 2, 1], &[1.0, 2.0, 3.0, 4.0]).unwrap());
        let w = tape.leaf(tensor_from(&[2], &[10.0, 100.0]).unwrap());
        let m = tape.mul(a, w).unwrap();
        assert_eq!(tape.value(m).data(), &[10.0, 200.0, 30.0, 400.0]);
    }

    #[test]
    fn linear_gradient_is_input() {
        let mut tape = Tape::new();
        let x = tensor_from(&[3], &[0.3, -1.0, 2.0]).unwrap();
        let w = tape.param("w", &Tensor::ones(&[3]), true);
        let xv = tape.leaf(x.clone());
        let p = tape.mul(w, xv).unwrap();
        let loss = tape.sum(p).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.params(&tape)["w"], x);
    }

    #[test]
    fn square_gradient() {
        let mut tape = Tape::new();
        let w = tape.param("w", &tensor_from(&[2], &[1.0, -2.0]).unwrap(), true);
        let sq = tape.mul(w, w).unwrap();
        let loss = tape.sum(sq).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(w).unwrap().data(), &[2.0, -4.0]);
    }

    #[test]
    fn unreached_param_gets_zeros() {
        let mut tape = Tape::new();
        let w = tape.param("w", &Tensor::ones(&[2]), true);
        let _unused = tape.param("u", &Tensor::ones(&[3]), true);
        let _frozen = tape.param("f", &Tensor::ones(&[3]), false);
        let loss = tape.sum(w).unwrap();
        let g = tape.backward(loss).unwrap().params(&tape);
        assert_eq!(g.len(), 2);
        assert_eq!(g["u"], Tensor::zeros(&[3]));
    }

    #[test]
    fn non_scalar_loss() {
        let mut tape = Tape::new();
        let w = tape.param("w", &Tensor::ones(&[2]), true);
        assert!(matches!(tape.backward(w), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn finite_diff_examples() {
        let x = tensor_from(&[1], &[3.0]).unwrap();
        let g = finite_diff_grad(|t| Ok(t.data().iter().map(|v| v * v).sum()), &x, 1e-6).unwrap();
        assert!((g.data()[0] - 6.0).abs() < 1e-6);

        let g = finite_diff_grad(|_| Ok(4.0), &x, 1e-6).unwrap();
        assert_eq!(g.data(), &[0.0]);

        let z = tensor_from(&[1], &[0.0]).unwrap();
        let g = finite_diff_grad(
            |t| Ok(t.data().iter().map(|&v| 1.0 / (1.0 + libm::exp(-v))).sum()),
            &z,
            1e-6,
        )
        .unwrap();
        assert!((g.data()[0] - 0.25).abs() < 1e-9);
    }

    #[test]
    fn finite_diff_rejects_bad_eps_and_nan() {
        let x = tensor_from(&[1], &[1.0]).unwrap();
        assert!(finite_diff_grad(|_| Ok(0.0), &x, 0.0).is_err());
        assert_eq!(
            finite_diff_grad(|_| Ok(f64::NAN), &x, 1e-3),
            Err(Error::NonFinite("finite_diff_grad"))
        );
    }

    #[test]
    fn division_gradient() {
        let mut tape = Tape::new();
        let a = tape.param("a", &Tensor::scalar(3.0), true);
        let b = tape.param("b", &Tensor::scalar(2.0), true);
        let q = tape.div(a, b).unwrap();
        let g = tape.backward(q).unwrap();
        assert_eq!(g.wrt(a).unwrap().data(), &[0.5]);
        assert_eq!(g.wrt(b).unwrap().data(), &[-0.75]);
    }
}
