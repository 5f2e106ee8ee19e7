//! Optimizers, segmentation losses and the training loop.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::seq::SliceRandom;

use crate::autodiff::{Tape, Var};
use crate::data::{stack_samples, SegSample};
use crate::error::{Error, Result};
use crate::gate::channels_off;
use crate::init::stream;
use crate::metrics::{evaluate, mean_std};
use crate::networks::Model;
use crate::tensor::Tensor;

const SHUFFLE_STREAM: u64 = 0x5407_f1e0_0000_0000;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum LossKind {
    #[default]
    Dice,
    Bce,
}

impl LossKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LossKind::Dice => "dice",
            LossKind::Bce => "bce",
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dice" => Ok(LossKind::Dice),
            "bce" => Ok(LossKind::Bce),
            other => Err(Error::invalid("loss", format!("unknown loss {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum OptimizerKind {
    #[default]
    Adadelta,
    SgdMomentum,
}

impl OptimizerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            OptimizerKind::Adadelta => "adadelta",
            OptimizerKind::SgdMomentum => "sgd",
        }
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adadelta" => Ok(OptimizerKind::Adadelta),
            "sgd" | "sgd_momentum" => Ok(OptimizerKind::SgdMomentum),
            other => Err(Error::invalid("optimizer", format!("unknown optimizer {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdadeltaConfig {
    pub lr: f64,
    pub rho: f64,
    pub eps: f64,
    /// Per-iteration inverse-time decay of `lr`.
    pub decay: f64,
}

impl Default for AdadeltaConfig {
    fn default() -> Self {
        AdadeltaConfig {
            lr: 1.0,
            rho: 0.95,
            eps: 1e-8,
            decay: 0.0,
        }
    }
}

/// Running averages `E[g^2]` and `E[dx^2]` of one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdadeltaSlot {
    pub acc_grad: Tensor,
    pub acc_delta: Tensor,
}

impl AdadeltaSlot {
    pub fn zeros_like(param: &Tensor) -> Self {
        AdadeltaSlot {
            acc_grad: param.zeros_like(),
            acc_delta: param.zeros_like(),
        }
    }
}

fn check_grad(op: &'static str, param: &Tensor, grad: &Tensor) -> Result<()> {
    if param.shape() != grad.shape() {
        return Err(Error::shapes(op, param.shape(), grad.shape()));
    }
    if !grad.is_finite() {
        return Err(Error::NonFinite(op));
    }
    Ok(())
}

/// One ADADELTA update. `iterations` counts steps already taken and only
/// matters when `decay > 0`. Returns the applied increment `lr * dx`.
pub fn adadelta_step(
    param: &mut Tensor,
    grad: &Tensor,
    slot: &mut AdadeltaSlot,
    cfg: &AdadeltaConfig,
    iterations: u64,
) -> Result<Tensor> {
    check_grad("adadelta_step", param, grad)?;
    if slot.acc_grad.shape() != param.shape() || slot.acc_delta.shape() != param.shape() {
        return Err(Error::shapes("adadelta_step", param.shape(), slot.acc_grad.shape()));
    }
    let lr = cfg.lr / (1.0 + cfg.decay * iterations as f64);
    let mut applied = param.zeros_like();
    let (rho, eps) = (cfg.rho, cfg.eps);
    let p = param.data_mut();
    let eg = slot.acc_grad.data_mut();
    let ed = slot.acc_delta.data_mut();
    for (i, (&g, out)) in grad.data().iter().zip(applied.data_mut()).enumerate() {
        eg[i] = rho * eg[i] + (1.0 - rho) * g * g;
        let dx = -(libm::sqrt(ed[i] + eps) / libm::sqrt(eg[i] + eps)) * g;
        ed[i] = rho * ed[i] + (1.0 - rho) * dx * dx;
        *out = lr * dx;
        p[i] += *out;
    }
    Ok(applied)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig { lr: 0.01, momentum: 0.9 }
    }
}

/// `v <- momentum v - lr g; p <- p + v`.
pub fn sgd_momentum_step(param: &mut Tensor, grad: &Tensor, velocity: &mut Tensor, cfg: &SgdConfig) -> Result<()> {
    check_grad("sgd_momentum_step", param, grad)?;
    if velocity.shape() != param.shape() {
        return Err(Error::shapes("sgd_momentum_step", param.shape(), velocity.shape()));
    }
    let p = param.data_mut();
    for (i, (&g, v)) in grad.data().iter().zip(velocity.data_mut()).enumerate() {
        *v = cfg.momentum * *v - cfg.lr * g;
        p[i] += *v;
    }
    Ok(())
}

/// Optimizer accumulators keyed `<param>.acc_grad`, `<param>.acc_delta`
/// (ADADELTA) or `<param>.velocity` (SGD), plus the step count.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimizerState {
    pub iterations: u64,
    pub slots: BTreeMap<String, Tensor>,
}

impl OptimizerState {
    fn take(&mut self, key: String, like: &Tensor) -> Result<Tensor> {
        match self.slots.remove(&key) {
            Some(t) if t.shape() == like.shape() => Ok(t),
            Some(t) => Err(Error::shapes("optimizer_state", like.shape(), t.shape())),
            None => Ok(like.zeros_like()),
        }
    }

    /// Applies one update to every parameter in `grads`.
    pub fn step(
        &mut self,
        model: &mut Model,
        grads: &BTreeMap<String, Tensor>,
        kind: OptimizerKind,
        adadelta: &AdadeltaConfig,
        sgd: &SgdConfig,
    ) -> Result<()> {
        for (name, g) in grads {
            let param = model
                .params_mut()
                .value_mut(name)
                .ok_or_else(|| Error::invalid("optimizer", format!("unknown parameter {name:?}")))?;
            match kind {
                OptimizerKind::Adadelta => {
                    let (kg, kd) = (format!("{name}.acc_grad"), format!("{name}.acc_delta"));
                    let mut slot = AdadeltaSlot {
                        acc_grad: self.take(kg.clone(), param)?,
                        acc_delta: self.take(kd.clone(), param)?,
                    };
                    adadelta_step(param, g, &mut slot, adadelta, self.iterations)?;
                    self.slots.insert(kg, slot.acc_grad);
                    self.slots.insert(kd, slot.acc_delta);
                }
                OptimizerKind::SgdMomentum => {
                    let key = format!("{name}.velocity");
                    let mut v = self.take(key.clone(), param)?;
                    sgd_momentum_step(param, g, &mut v, sgd)?;
                    self.slots.insert(key, v);
                }
            }
        }
        self.iterations += 1;
        Ok(())
    }
}

fn check_target(op: &'static str, logits: &Tensor, target: &Tensor) -> Result<()> {
    if logits.shape() != target.shape() {
        return Err(Error::shapes(op, logits.shape(), target.shape()));
    }
    if target.data().iter().any(|&t| t != 0.0 && t != 1.0) {
        return Err(Error::invalid(op, "target must be binary"));
    }
    Ok(())
}

/// Soft Dice loss `1 - (2 sum(p t) + 1) / (sum p + sum t + 1)` with
/// `p = sigmoid(logits)`, pooled over the whole batch.
pub fn dice_loss_var(tape: &mut Tape, logits: Var, target: &Tensor) -> Result<Var> {
    check_target("dice_loss", tape.value(logits), target)?;
    let p = tape.sigmoid(logits)?;
    let t = tape.leaf(target.clone());
    let pt = tape.mul(p, t)?;
    let inter = tape.sum(pt)?;
    let num = tape.scale(inter, 2.0)?;
    let num = tape.add_scalar(num, 1.0)?;
    let sp = tape.sum(p)?;
    let den = tape.add_scalar(sp, target.sum() + 1.0)?;
    let ratio = tape.div(num, den)?;
    let neg = tape.scale(ratio, -1.0)?;
    tape.add_scalar(neg, 1.0)
}

/// Mean binary cross-entropy on logits.
pub fn bce_loss_var(tape: &mut Tape, logits: Var, target: &Tensor) -> Result<Var> {
    check_target("bce_loss", tape.value(logits), target)?;
    tape.bce_with_logits(logits, target)
}

pub fn loss_var(kind: LossKind, tape: &mut Tape, logits: Var, target: &Tensor) -> Result<Var> {
    match kind {
        LossKind::Dice => dice_loss_var(tape, logits, target),
        LossKind::Bce => bce_loss_var(tape, logits, target),
    }
}

pub fn dice_loss(logits: &Tensor, target: &Tensor) -> Result<f64> {
    let mut tape = Tape::new();
    let x = tape.leaf(logits.clone());
    let l = dice_loss_var(&mut tape, x, target)?;
    tape.scalar(l)
}

pub fn bce_loss(logits: &Tensor, target: &Tensor) -> Result<f64> {
    let mut tape = Tape::new();
    let x = tape.leaf(logits.clone());
    let l = bce_loss_var(&mut tape, x, target)?;
    tape.scalar(l)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub loss: LossKind,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub adadelta: AdadeltaConfig,
    pub sgd: SgdConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: OptimizerKind::Adadelta,
            loss: LossKind::Dice,
            epochs: 30,
            batch_size: 8,
            seed: 0,
            adadelta: AdadeltaConfig::default(),
            sgd: SgdConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::invalid("train_config", "epochs must be at least 1"));
        }
        if self.batch_size < 1 {
            return Err(Error::invalid("train_config", "batch_size must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    /// Held-out means; `None` without a validation split.
    pub val_dice: Option<f64>,
    pub val_fpr: Option<f64>,
    pub val_fnr: Option<f64>,
    /// Per gate in model order; `None` for gates without selection.
    pub channels_off: Vec<Option<f64>>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
}

/// Epoch permutation of `0..n`, derived only from the seed and epoch so a
/// resumed run replays it exactly.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream(seed, SHUFFLE_STREAM + epoch as u64));
    order
}

/// Training loop state that survives a checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct Trainer {
    cfg: TrainConfig,
    state: OptimizerState,
    epochs_done: usize,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        Self::resume(cfg, OptimizerState::default(), 0)
    }

    pub fn resume(cfg: TrainConfig, state: OptimizerState, epochs_done: usize) -> Result<Self> {
        cfg.validate()?;
        Ok(Trainer { cfg, state, epochs_done })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn state(&self) -> &OptimizerState {
        &self.state
    }

    pub fn epochs_done(&self) -> usize {
        self.epochs_done
    }

    /// Forward, backward and update on one batch; returns the pre-update
    /// loss.
    pub fn step(&mut self, model: &mut Model, images: &Tensor, masks: &Tensor) -> Result<f64> {
        let mut tape = Tape::new();
        let (fwd, updates) = model.run(&mut tape, images, true)?;
        let loss = loss_var(self.cfg.loss, &mut tape, fwd.logits, masks)?;
        let value = tape.scalar(loss)?;
        let grads = tape.backward(loss)?.params(&tape);
        model.apply_updates(updates);
        let c = &self.cfg;
        self.state.step(model, &grads, c.optimizer, &c.adadelta, &c.sgd)?;
        Ok(value)
    }

    pub fn run_epoch(&mut self, model: &mut Model, train: &[SegSample], val: &[SegSample]) -> Result<EpochRecord> {
        if train.is_empty() {
            return Err(Error::invalid("train", "training set is empty"));
        }
        let epoch = self.epochs_done + 1;
        let order = epoch_order(self.cfg.seed, epoch, train.len());
        let mut total = 0.0;
        let mut batches = 0;
        for (b, idx) in order.chunks(self.cfg.batch_size).enumerate() {
            let refs: Vec<&SegSample> = idx.iter().map(|&i| &train[i]).collect();
            let (images, masks) = stack_samples(&refs)?;
            let loss = match self.step(model, &images, &masks) {
                Ok(l) if l.is_finite() => l,
                Ok(l) => return Err(Error::Diverged { epoch, batch: b + 1, loss: l }),
                Err(Error::NonFinite(_)) => return Err(Error::Diverged { epoch, batch: b + 1, loss: f64::NAN }),
                Err(e) => return Err(e),
            };
            total += loss;
            batches += 1;
        }
        self.epochs_done = epoch;
        let (val_dice, val_fpr, val_fnr) = if val.is_empty() {
            (None, None, None)
        } else {
            let m = evaluate(model, val, self.cfg.batch_size)?;
            let mean = |f: fn(&crate::metrics::SegMetrics) -> f64| {
                Some(mean_std(&m.iter().map(f).collect::<Vec<_>>()).0)
            };
            (mean(|s| s.dice), mean(|s| s.fpr), mean(|s| s.fnr))
        };
        let channels_off = (0..model.gates().len())
            .map(|i| model.gate_weights(i).map(|w| channels_off(w.data(), 0.0)).transpose())
            .collect::<Result<Vec<_>>>()?;
        Ok(EpochRecord {
            epoch,
            train_loss: total / batches as f64,
            val_dice,
            val_fpr,
            val_fnr,
            channels_off,
        })
    }

    /// Runs `epochs` further epochs.
    pub fn fit(&mut self, model: &mut Model, train: &[SegSample], val: &[SegSample], epochs: usize) -> Result<TrainHistory> {
        let mut history = TrainHistory::default();
        for _ in 0..epochs {
            history.records.push(self.run_epoch(model, train, val)?);
        }
        Ok(history)
    }
}

/// Trains for `cfg.epochs` epochs from a fresh optimizer state.
pub fn train(model: &mut Model, train: &[SegSample], val: &[SegSample], cfg: &TrainConfig) -> Result<TrainHistory> {
    let mut trainer = Trainer::new(*cfg)?;
    trainer.fit(model, train, val, cfg.epochs)
}
