//! Model checkpoints.
//!
//! A checkpoint is a UTF-8 header of `key=value` lines ended by an empty
//! line, followed by two binary tables. Each table is a `u32` entry count
//! and then, per entry, a `u32` name length, the name, and one embedded
//! tensor file. The first table holds every parameter in registry order
//! (batch-norm running statistics included), the second the optimizer
//! slots in key order.
//!
//! The shuffle generator is stateless apart from its seed and the epoch
//! counter, so `rng.seed` and `rng.epochs_completed` are its full state.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use satskip_core::networks::{ArchSpec, Model, ARCH_KEYS};
use satskip_core::train::{AdadeltaConfig, OptimizerState, SgdConfig, TrainConfig, Trainer};
use satskip_core::{build_model, Tensor};

use crate::error::{Error, Result};
use crate::tensorfile;

pub const MAGIC_LINE: &str = "satskip-checkpoint 1";

fn header(model: &Model, trainer: &Trainer) -> String {
    let c = trainer.config();
    let mut lines = vec![MAGIC_LINE.to_string()];
    for (k, v) in model.spec().to_pairs() {
        lines.push(format!("{k}={v}"));
    }
    let train: [(&str, String); 10] = [
        ("train.optimizer", c.optimizer.to_string()),
        ("train.loss", c.loss.to_string()),
        ("train.epochs", c.epochs.to_string()),
        ("train.batch_size", c.batch_size.to_string()),
        ("train.adadelta.lr", c.adadelta.lr.to_string()),
        ("train.adadelta.rho", c.adadelta.rho.to_string()),
        ("train.adadelta.eps", c.adadelta.eps.to_string()),
        ("train.adadelta.decay", c.adadelta.decay.to_string()),
        ("train.sgd.lr", c.sgd.lr.to_string()),
        ("train.sgd.momentum", c.sgd.momentum.to_string()),
    ];
    for (k, v) in train {
        lines.push(format!("{k}={v}"));
    }
    lines.push(format!("rng.seed={}", c.seed));
    lines.push(format!("rng.epochs_completed={}", trainer.epochs_done()));
    lines.push(format!("optimizer.iterations={}", trainer.state().iterations));
    let mut out = lines.join("\n");
    out.push_str("\n\n");
    out
}

fn push_table<'a>(out: &mut Vec<u8>, entries: impl ExactSizeIterator<Item = (&'a str, &'a Tensor)>) -> Result<()> {
    let count = u32::try_from(entries.len()).map_err(|_| Error::Format("too many entries".into()))?;
    out.extend_from_slice(&count.to_le_bytes());
    for (name, t) in entries {
        let len = u32::try_from(name.len()).map_err(|_| Error::Format("name too long".into()))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&tensorfile::encode(t)?);
    }
    Ok(())
}

pub fn encode(model: &Model, trainer: &Trainer) -> Result<Vec<u8>> {
    let mut out = header(model, trainer).into_bytes();
    let params = model.params().iter().map(|p| (p.name.as_str(), &p.value));
    push_table(&mut out, params.collect::<Vec<_>>().into_iter())?;
    push_table(&mut out, trainer.state().slots.iter().map(|(k, v)| (k.as_str(), v)))?;
    Ok(out)
}

struct Body<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Body<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Truncated {
                expected: self.pos + n,
                found: self.buf.len(),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn table(&mut self) -> Result<Vec<(String, Tensor)>> {
        let n = self.u32()?;
        let mut out = Vec::with_capacity(n.min(4096));
        for _ in 0..n {
            let len = self.u32()?;
            let name = std::str::from_utf8(self.take(len)?)
                .map_err(|_| Error::Format("entry name is not UTF-8".into()))?
                .to_string();
            let (t, used) = tensorfile::decode_prefix(&self.buf[self.pos..])?;
            self.pos += used;
            out.push((name, t));
        }
        Ok(out)
    }
}

fn field<T: FromStr>(map: &BTreeMap<&str, &str>, key: &str) -> Result<T>
where
    T::Err: Display,
{
    let raw = map.get(key).ok_or_else(|| Error::Header(format!("missing key {key}")))?;
    raw.parse().map_err(|e| Error::Header(format!("{key}={raw}: {e}")))
}

/// Restores a model and its trainer. With `expected`, the stored
/// architecture must match it key for key.
pub fn decode(bytes: &[u8], expected: Option<&ArchSpec>) -> Result<(Model, Trainer)> {
    let end = bytes
        .windows(2)
        .position(|w| w == b"\n\n")
        .ok_or_else(|| Error::Header("no header terminator".into()))?;
    let text = std::str::from_utf8(&bytes[..end]).map_err(|_| Error::Header("header is not UTF-8".into()))?;
    let mut lines = text.lines();
    if lines.next() != Some(MAGIC_LINE) {
        return Err(Error::Header(format!("first line must be {MAGIC_LINE:?}")));
    }
    let mut map = BTreeMap::new();
    for line in lines {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Header(format!("line {line:?} is not key=value")))?;
        if map.insert(k, v).is_some() {
            return Err(Error::Header(format!("duplicate key {k}")));
        }
    }
    let spec = ArchSpec::from_pairs(ARCH_KEYS.iter().filter_map(|&k| map.get(k).map(|v| (k, *v))))?;
    if let Some(want) = expected {
        if let Some(key) = want.first_mismatch(&spec) {
            let value = |s: &ArchSpec| s.to_pairs().into_iter().find(|(k, _)| *k == key).map(|(_, v)| v);
            return Err(Error::ArchMismatch {
                key,
                expected: value(want).unwrap_or_default(),
                found: value(&spec).unwrap_or_default(),
            });
        }
    }
    let cfg = TrainConfig {
        optimizer: field(&map, "train.optimizer")?,
        loss: field(&map, "train.loss")?,
        epochs: field(&map, "train.epochs")?,
        batch_size: field(&map, "train.batch_size")?,
        seed: field(&map, "rng.seed")?,
        adadelta: AdadeltaConfig {
            lr: field(&map, "train.adadelta.lr")?,
            rho: field(&map, "train.adadelta.rho")?,
            eps: field(&map, "train.adadelta.eps")?,
            decay: field(&map, "train.adadelta.decay")?,
        },
        sgd: SgdConfig {
            lr: field(&map, "train.sgd.lr")?,
            momentum: field(&map, "train.sgd.momentum")?,
        },
    };
    let epochs_done: usize = field(&map, "rng.epochs_completed")?;
    let iterations: u64 = field(&map, "optimizer.iterations")?;

    let mut body = Body {
        buf: bytes,
        pos: end + 2,
    };
    let mut model = build_model(&spec, 0)?;
    let mut seen = vec![false; model.params().len()];
    for (name, t) in body.table()? {
        let id = model.params().id(&name).ok_or_else(|| Error::UnknownParameter(name.clone()))?;
        model.params_mut().set(&name, t)?;
        seen[id.index()] = true;
    }
    if let Some(p) = model.params().iter().zip(&seen).find(|(_, s)| !**s) {
        return Err(Error::MissingParameter(p.0.name.clone()));
    }
    let slots: BTreeMap<String, Tensor> = body.table()?.into_iter().collect();
    if body.pos != bytes.len() {
        return Err(Error::TrailingBytes(bytes.len() - body.pos));
    }
    let trainer = Trainer::resume(cfg, OptimizerState { iterations, slots }, epochs_done)?;
    Ok((model, trainer))
}

pub fn save_checkpoint(path: &Path, model: &Model, trainer: &Trainer) -> Result<()> {
    tensorfile::write_atomic(path, &encode(model, trainer)?)
}

pub fn load_checkpoint(path: &Path) -> Result<(Model, Trainer)> {
    decode(&tensorfile::read_file(path)?, None)
}

/// Loads a checkpoint that must have been written for `spec`.
pub fn load_checkpoint_for(path: &Path, spec: &ArchSpec) -> Result<(Model, Trainer)> {
    decode(&tensorfile::read_file(path)?, Some(spec))
}

#[cfg(test)]
mod tests {
    use super::*;
    use satskip_core::networks::Family;
    use satskip_core::{count_params, GateVariant};

    fn fixture() -> (Model, Trainer) {
        let spec = ArchSpec::reference(Family::Unet).with_variant(GateVariant::Sat);
        let mut model = build_model(&spec, 3).unwrap();
        let mut trainer = Trainer::new(TrainConfig::default()).unwrap();
        let x = Tensor::new(vec![8, 8, 1, 2], (0..128).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let y = x.map(|v| if v > 0.0 { 1.0 } else { 0.0 });
        trainer.step(&mut model, &x, &y).unwrap();
        (model, trainer)
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let (model, trainer) = fixture();
        let bytes = encode(&model, &trainer).unwrap();
        let (m2, t2) = decode(&bytes, None).unwrap();
        assert_eq!(count_params(&m2), count_params(&model));
        for (a, b) in model.params().iter().zip(m2.params().iter()) {
            assert_eq!(a.name, b.name);
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.value), bits(&b.value));
        }
        assert_eq!(t2, trainer);
        assert_eq!(encode(&m2, &t2).unwrap(), bytes);
    }

    #[test]
    fn mismatch_names_first_key() {
        let (model, trainer) = fixture();
        let bytes = encode(&model, &trainer).unwrap();
        let mut other = *model.spec();
        other.gate_variant = GateVariant::Org;
        other.base_channels = 4;
        match decode(&bytes, Some(&other)) {
            Err(Error::ArchMismatch { key, .. }) => assert_eq!(key, "base_channels"),
            r => panic!("unexpected {r:?}"),
        }
    }

    #[test]
    fn missing_parameter_is_reported() {
        let (model, trainer) = fixture();
        let first = model.params().iter().next().unwrap().name.clone();
        let full = encode(&model, &trainer).unwrap();
        let head_len = full.windows(2).position(|w| w == b"\n\n").unwrap() + 2;
        let mut bytes = full[..head_len].to_vec();
        let rest: Vec<_> = model.params().iter().skip(1).map(|p| (p.name.as_str(), &p.value)).collect();
        push_table(&mut bytes, rest.into_iter()).unwrap();
        push_table(&mut bytes, trainer.state().slots.iter().map(|(k, v)| (k.as_str(), v))).unwrap();
        assert!(matches!(decode(&bytes, None), Err(Error::MissingParameter(n)) if n == first));
    }

    #[test]
    fn corrupt_header_rejected() {
        let (model, trainer) = fixture();
        let mut bytes = encode(&model, &trainer).unwrap();
        bytes[0] = b'X';
        assert!(matches!(decode(&bytes, None), Err(Error::Header(_))));
    }
}
