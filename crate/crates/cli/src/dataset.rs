//! Dataset directories: `img_NNNN.satt` / `msk_NNNN.satt` pairs and a
//! `manifest.txt` of `key=value` lines.
//!
//! Images are stored as f64 and masks as u8. A file may hold either the
//! bare spatial extents or the full `[spatial.., 1, 1]` sample shape.
//! Directories without a manifest are read by scanning for pairs.

use std::fs;
use std::path::{Path, PathBuf};

use satskip_core::data::{SegSample, SyntheticSpec};
use satskip_core::Tensor;

use crate::error::{Error, Result};
use crate::tensorfile;

pub const MANIFEST: &str = "manifest.txt";

pub fn image_path(dir: &Path, i: usize) -> PathBuf {
    dir.join(format!("img_{i:04}.satt"))
}

pub fn mask_path(dir: &Path, i: usize) -> PathBuf {
    dir.join(format!("msk_{i:04}.satt"))
}

pub fn manifest_text(samples: usize, spec: Option<&SyntheticSpec>) -> String {
    let mut s = format!("samples={samples}\n");
    if let Some(g) = spec {
        s += &format!(
            "rank={}\nextent={}\nshapes={}\nnoise_sigma={}\ncontrast={}\nseed={}\n",
            g.spatial_rank,
            g.extent,
            g.shapes.as_str(),
            g.noise_sigma,
            g.contrast,
            g.seed
        );
    }
    s
}

pub fn save_dataset(dir: &Path, samples: &[SegSample], spec: Option<&SyntheticSpec>) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, s) in samples.iter().enumerate() {
        tensorfile::save_tensor(&image_path(dir, i), &s.image)?;
        tensorfile::write_atomic(&mask_path(dir, i), &tensorfile::encode_u8(&s.mask)?)?;
    }
    tensorfile::write_atomic(&dir.join(MANIFEST), manifest_text(samples.len(), spec).as_bytes())
}

/// Adds the channel and batch axes to bare spatial shapes.
pub fn as_sample(t: Tensor, path: &Path) -> Result<Tensor> {
    let shape = t.shape().to_vec();
    let full = match shape.len() {
        2 | 3 => [shape.as_slice(), &[1, 1]].concat(),
        4 | 5 if shape[shape.len() - 2..] == [1, 1] => shape,
        _ => {
            return Err(Error::Dataset(format!(
                "{}: shape {shape:?} is not a single-channel 2-D or 3-D sample",
                path.display()
            )))
        }
    };
    Ok(Tensor::new(full, t.data().to_vec())?)
}

fn manifest_count(dir: &Path) -> Result<Option<usize>> {
    let path = dir.join(MANIFEST);
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    for line in text.lines() {
        if let Some(v) = line.strip_prefix("samples=") {
            return v
                .parse()
                .map(Some)
                .map_err(|_| Error::Dataset(format!("bad sample count {v:?} in manifest")));
        }
    }
    Err(Error::Dataset("manifest has no samples= line".into()))
}

fn scan_count(dir: &Path) -> Result<usize> {
    let mut n = 0;
    while image_path(dir, n).exists() {
        n += 1;
    }
    Ok(n)
}

pub fn load_dataset(dir: &Path) -> Result<Vec<SegSample>> {
    if !dir.is_dir() {
        return Err(Error::Dataset(format!("{} is not a directory", dir.display())));
    }
    let n = match manifest_count(dir)? {
        Some(n) => n,
        None => scan_count(dir)?,
    };
    if n == 0 {
        return Err(Error::Dataset(format!("{} holds no samples", dir.display())));
    }
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let (ip, mp) = (image_path(dir, i), mask_path(dir, i));
        let image = as_sample(tensorfile::load_tensor(&ip)?, &ip)?;
        let mask = as_sample(tensorfile::load_tensor(&mp)?, &mp)?;
        if image.shape() != mask.shape() {
            return Err(Error::Dataset(format!(
                "sample {i}: image {:?} and mask {:?} differ in shape",
                image.shape(),
                mask.shape()
            )));
        }
        if mask.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Dataset(format!("sample {i}: mask is not binary")));
        }
        if out.first().is_some_and(|f: &SegSample| f.image.shape() != image.shape()) {
            return Err(Error::Dataset(format!("sample {i}: shape differs from sample 0")));
        }
        out.push(SegSample { image, mask });
    }
    Ok(out)
}

/// Splits off the last `fraction` of the samples (rounded down) for
/// validation.
pub fn split_validation(samples: &[SegSample], fraction: f64) -> Result<(&[SegSample], &[SegSample])> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::Dataset(format!("validation fraction {fraction} must lie in [0, 1)")));
    }
    let n_val = (samples.len() as f64 * fraction) as usize;
    let (train, val) = samples.split_at(samples.len() - n_val);
    if train.is_empty() {
        return Err(Error::Dataset("no training samples left after the split".into()));
    }
    Ok((train, val))
}
