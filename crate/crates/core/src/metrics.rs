//! Overlap metrics and selection-sparsity reporting.

use alloc::string::String;
use alloc::vec::Vec;

use crate::data::{stack_samples, unstack, SegSample};
use crate::error::{Error, Result};
use crate::gate::channels_off;
use crate::networks::Model;
use crate::nn::{sigmoid, trelu_scalar};
use crate::tensor::Tensor;

/// 1 where `probs >= threshold`, else 0.
pub fn binarize(probs: &Tensor, threshold: f64) -> Result<Tensor> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::invalid("binarize", "threshold must lie in (0, 1)"));
    }
    Ok(probs.map(|p| if p >= threshold { 1.0 } else { 0.0 }))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }
}

fn is_binary(t: &Tensor) -> bool {
    t.data().iter().all(|&v| v == 0.0 || v == 1.0)
}

pub fn confusion(pred: &Tensor, gt: &Tensor) -> Result<ConfusionCounts> {
    if pred.shape() != gt.shape() {
        return Err(Error::shapes("dice_fpr_fnr", pred.shape(), gt.shape()));
    }
    if !is_binary(pred) || !is_binary(gt) {
        return Err(Error::invalid("dice_fpr_fnr", "inputs must be binary"));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        match (p == 1.0, g == 1.0) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SegMetrics {
    pub dice: f64,
    pub fpr: f64,
    pub fnr: f64,
}

impl From<ConfusionCounts> for SegMetrics {
    /// Empty denominators give dice 1 and rates 0.
    fn from(c: ConfusionCounts) -> Self {
        let ratio = |num: u64, den: u64, empty: f64| if den == 0 { empty } else { num as f64 / den as f64 };
        SegMetrics {
            dice: ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_, 1.0),
            fpr: ratio(c.fp, c.fp + c.tn, 0.0),
            fnr: ratio(c.fn_, c.fn_ + c.tp, 0.0),
        }
    }
}

pub fn dice_fpr_fnr(pred: &Tensor, gt: &Tensor) -> Result<SegMetrics> {
    confusion(pred, gt).map(SegMetrics::from)
}

/// Sample mean and standard deviation (n - 1 denominator; 0 for one value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, libm::sqrt(var))
}

/// Inference-mode predictions thresholded at 0.5, scored per sample.
pub fn evaluate(model: &Model, samples: &[SegSample], batch_size: usize) -> Result<Vec<SegMetrics>> {
    let mut out = Vec::with_capacity(samples.len());
    let refs: Vec<&SegSample> = samples.iter().collect();
    for chunk in refs.chunks(batch_size.max(1)) {
        let (images, masks) = stack_samples(chunk)?;
        let pred = binarize(&sigmoid(&model.predict(&images)?), 0.5)?;
        for j in 0..chunk.len() {
            out.push(dice_fpr_fnr(&unstack(&pred, j)?, &unstack(&masks, j)?)?);
        }
    }
    Ok(out)
}

/// Ten equal bins of `trelu(w)` over `[0, 1]`; value 1 lands in the last.
pub fn weight_histogram(weights: &[f64]) -> [usize; 10] {
    let mut bins = [0; 10];
    for &w in weights {
        let v = trelu_scalar(w);
        bins[((v * 10.0) as usize).min(9)] += 1;
    }
    bins
}

#[derive(Clone, Debug, PartialEq)]
pub struct GateSparsity {
    pub gate: usize,
    pub name: String,
    pub channels: usize,
    pub off_fraction: f64,
    pub histogram: [usize; 10],
}

/// Per-gate share of switched-off channels for every selecting gate.
pub fn sparsity_report(model: &Model) -> Result<Vec<GateSparsity>> {
    let mut out = Vec::new();
    for (i, g) in model.gates().iter().enumerate() {
        if let Some(w) = model.gate_weights(i) {
            out.push(GateSparsity {
                gate: i,
                name: g.name.clone(),
                channels: g.channels,
                off_fraction: channels_off(w.data(), 0.0)?,
                histogram: weight_histogram(w.data()),
            });
        }
    }
    if out.is_empty() {
        return Err(Error::invalid(
            "sparsity_report",
            alloc::format!("{} gates have no selection weights", model.spec().gate_variant),
        ));
    }
    Ok(out)
}
