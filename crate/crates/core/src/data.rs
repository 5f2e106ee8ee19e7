//! Synthetic binary segmentation data and batch assembly.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::init::stream;
use crate::tensor::{Layout, Tensor};

/// An image and its binary mask, each shaped `[spatial.., 1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SegSample {
    pub image: Tensor,
    pub mask: Tensor,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Blobs,
    Rings,
}

impl ShapeKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ShapeKind::Blobs => "blobs",
            ShapeKind::Rings => "rings",
        }
    }
}

impl core::str::FromStr for ShapeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "blobs" => Ok(ShapeKind::Blobs),
            "rings" => Ok(ShapeKind::Rings),
            other => Err(Error::invalid("synthetic", alloc::format!("unknown shape kind {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub spatial_rank: usize,
    pub extent: usize,
    pub n_samples: usize,
    pub shapes: ShapeKind,
    pub noise_sigma: f64,
    pub contrast: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            spatial_rank: 2,
            extent: 32,
            n_samples: 200,
            shapes: ShapeKind::Blobs,
            noise_sigma: 0.3,
            contrast: 1.0,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    fn validate(&self) -> Result<()> {
        if !(2..=3).contains(&self.spatial_rank) {
            return Err(Error::invalid("synthetic", "spatial_rank must be 2 or 3"));
        }
        if self.extent < 8 {
            return Err(Error::invalid("synthetic", "extent must be at least 8"));
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() || !self.contrast.is_finite() {
            return Err(Error::invalid("synthetic", "noise_sigma must be finite and nonnegative"));
        }
        Ok(())
    }

    fn sample_shape(&self) -> Vec<usize> {
        let mut s = vec![self.extent; self.spatial_rank];
        s.extend([1, 1]);
        s
    }
}

/// Marks every grid point within `radius` of `center` (inclusive) and at
/// least `inner` away from it. Points are integer coordinates.
pub fn paint_shell(mask: &mut Tensor, center: &[f64], inner: f64, radius: f64) {
    let l = Layout::of(mask.shape(), "paint").expect("feature-map layout");
    let (r2, i2) = (radius * radius, inner * inner);
    let data = mask.data_mut();
    for h in 0..l.spatial[0] {
        for w in 0..l.spatial[1] {
            for d in 0..l.spatial[2] {
                let p = [h as f64, w as f64, d as f64];
                let dist2: f64 = (0..l.rank).map(|a| (p[a] - center[a]) * (p[a] - center[a])).sum();
                if dist2 <= r2 && dist2 >= i2 {
                    data[l.pos(h, w, d)] = 1.0;
                }
            }
        }
    }
}

pub fn paint_ball(mask: &mut Tensor, center: &[f64], radius: f64) {
    paint_shell(mask, center, 0.0, radius);
}

/// Deterministic synthetic dataset. All samples come from one generator
/// stream, consumed in sample order.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Vec<SegSample>> {
    spec.validate()?;
    let mut rng = stream(spec.seed, 0x5eed_da7a);
    let noise = Normal::new(0.0, spec.noise_sigma).map_err(|_| Error::invalid("synthetic", "bad noise"))?;
    let shape = spec.sample_shape();
    let e = spec.extent as f64;
    let (rmin, rmax) = ((e / 10.0).max(2.0), (e / 5.0).max(3.0));
    let mut out = Vec::with_capacity(spec.n_samples);
    for _ in 0..spec.n_samples {
        let mut mask = Tensor::zeros(&shape);
        let count = rng.random_range(1..=2usize);
        for _ in 0..count {
            let radius = rng.random_range(rmin..=rmax);
            let reach = libm::ceil(radius) as usize;
            let center: Vec<f64> = (0..spec.spatial_rank)
                .map(|_| rng.random_range(reach..spec.extent - reach) as f64)
                .collect();
            match spec.shapes {
                ShapeKind::Blobs => paint_ball(&mut mask, &center, radius),
                ShapeKind::Rings => paint_shell(&mut mask, &center, radius * 0.5, radius),
            }
        }
        let mut image = mask.map(|m| m * spec.contrast);
        if spec.noise_sigma > 0.0 {
            for v in image.data_mut() {
                *v += noise.sample(&mut rng);
            }
        }
        out.push(SegSample { image, mask });
    }
    Ok(out)
}

/// Stacks per-sample `[spatial.., C, 1]` tensors along the batch axis.
pub fn stack(items: &[&Tensor]) -> Result<Tensor> {
    let first = items.first().ok_or_else(|| Error::invalid("stack", "empty batch"))?;
    let l = first.layout("stack")?;
    if l.batch != 1 {
        return Err(Error::invalid("stack", "items must have batch extent 1"));
    }
    if let Some(bad) = items.iter().find(|t| t.shape() != first.shape()) {
        return Err(Error::shapes("stack", first.shape(), bad.shape()));
    }
    let b = items.len();
    let per = first.len();
    let mut data = vec![0.0; per * b];
    for (j, t) in items.iter().enumerate() {
        for (i, &v) in t.data().iter().enumerate() {
            data[i * b + j] = v;
        }
    }
    let out = Layout::with(l.rank, l.spatial, l.channels, b);
    Ok(Tensor::from_parts(out.shape(), data))
}

/// Extracts batch element `index` as a `[spatial.., C, 1]` tensor.
pub fn unstack(batch: &Tensor, index: usize) -> Result<Tensor> {
    let l = batch.layout("unstack")?;
    if index >= l.batch {
        return Err(Error::invalid("unstack", "batch index out of range"));
    }
    let data = batch.data().iter().skip(index).step_by(l.batch).copied().collect();
    let out = Layout::with(l.rank, l.spatial, l.channels, 1);
    Ok(Tensor::from_parts(out.shape(), data))
}

pub fn stack_samples(samples: &[&SegSample]) -> Result<(Tensor, Tensor)> {
    let images: Vec<&Tensor> = samples.iter().map(|s| &s.image).collect();
    let masks: Vec<&Tensor> = samples.iter().map(|s| &s.mask).collect();
    Ok((stack(&images)?, stack(&masks)?))
}
