//! Dense row-major `f64` tensors.
//!
//! Feature maps follow the layout `[H, W, C, B]` for 2-D data and
//! `[H, W, D, C, B]` for volumes: spatial axes first, then channels, then
//! the batch. The batch index is therefore the fastest-varying one.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

/// Builds a tensor from a shape and row-major values.
pub fn tensor_from(shape: &[usize], values: &[f64]) -> Result<Tensor> {
    Tensor::new(shape.to_vec(), values.to_vec())
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&e| e == 0) {
            return Err(Error::ZeroExtent(shape));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::LengthMismatch {
                shape,
                expected,
                got: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("tensor_from"));
        }
        Ok(Tensor { shape, data })
    }

    /// Construction for kernels that already guarantee the length invariant.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor::from_parts(shape.to_vec(), vec![value; n])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::from_parts(vec![1], vec![value])
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.shape)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Option<f64> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Tensor::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    /// Same data under a new shape with the same element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Tensor::new(shape.to_vec(), self.data.clone())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Channel extent under the `[spatial.., C, B]` convention.
    pub fn channels(&self) -> Option<usize> {
        (self.ndim() >= 2).then(|| self.shape[self.ndim() - 2])
    }

    pub fn layout(&self, op: &'static str) -> Result<Layout> {
        Layout::of(&self.shape, op)
    }
}

/// Geometry of a feature map with 2 or 3 spatial axes. A 2-D map is
/// treated as a volume with depth 1 so kernels share one code path.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Layout {
    pub rank: usize,
    pub spatial: [usize; 3],
    pub channels: usize,
    pub batch: usize,
}

impl Layout {
    pub fn of(shape: &[usize], op: &'static str) -> Result<Self> {
        let rank = match shape.len() {
            4 => 2,
            5 => 3,
            _ => {
                return Err(Error::invalid(
                    op,
                    alloc::format!("expected [H,W,C,B] or [H,W,D,C,B], got {shape:?}"),
                ))
            }
        };
        let mut spatial = [1; 3];
        spatial[..rank].copy_from_slice(&shape[..rank]);
        Ok(Layout {
            rank,
            spatial,
            channels: shape[rank],
            batch: shape[rank + 1],
        })
    }

    pub fn with(rank: usize, spatial: [usize; 3], channels: usize, batch: usize) -> Self {
        Layout {
            rank,
            spatial,
            channels,
            batch,
        }
    }

    pub fn shape(&self) -> Vec<usize> {
        let mut s = self.spatial[..self.rank].to_vec();
        s.push(self.channels);
        s.push(self.batch);
        s
    }

    pub fn positions(&self) -> usize {
        self.spatial.iter().product()
    }

    pub fn numel(&self) -> usize {
        self.positions() * self.channels * self.batch
    }

    /// Flat offset of spatial position `(h, w, d)`, channel 0, batch 0.
    #[inline]
    pub fn pos(&self, h: usize, w: usize, d: usize) -> usize {
        ((h * self.spatial[1] + w) * self.spatial[2] + d) * self.channels * self.batch
    }
}
