//! Rank-4 tensors and the differentiable primitives the heads are built from.
//!
//! Everything is stored as `f64` in batch × channel × height × width order.
//! Convolutions are stride 1 with same-padding, so spatial dims survive
//! every layer of a head unchanged.

mod activation;
mod batchnorm;
mod bilinear;
mod concat;
mod conv;
mod pool;

pub use activation::{relu_backward, relu_forward, sigmoid, sigmoid_backward, sigmoid_forward};
pub use batchnorm::{
    batchnorm_backward, batchnorm_forward, BatchNormCache, BatchNormGrads, BatchNormState, BnMode,
};
pub use bilinear::{bilinear_sample, bilinear_sample_grad, bilinear_taps, BilinearGrad, BilinearTaps};
pub use concat::{concat_channels, split_channels};
pub use conv::{
    conv2d_backward, conv2d_forward, conv2d_forward_naive, matmul_acc, ConvGrads, ConvSpec,
};
pub use pool::{avg_pool3x3_backward, avg_pool3x3_same};

use crate::error::{Error, Result};
use rand::Rng;

/// Dimensions of a [`Tensor4`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct Shape4 {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape4 {
    pub const fn new(batch: usize, channels: usize, height: usize, width: usize) -> Self {
        Self {
            batch,
            channels,
            height,
            width,
        }
    }

    pub fn len(&self) -> usize {
        self.batch * self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    pub fn to_array(self) -> [usize; 4] {
        [self.batch, self.channels, self.height, self.width]
    }

    /// Fails with an error naming the first axis that differs.
    pub fn expect_eq(&self, other: &Shape4) -> Result<()> {
        crate::error::check_dim("batch", self.batch, other.batch)?;
        crate::error::check_dim("channels", self.channels, other.channels)?;
        crate::error::check_dim("height", self.height, other.height)?;
        crate::error::check_dim("width", self.width, other.width)
    }
}

impl std::fmt::Display for Shape4 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "({}, {}, {}, {})",
            self.batch, self.channels, self.height, self.width
        )
    }
}

/// Dense rank-4 array of `f64`, row-major in (B, C, H, W).
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4 {
    shape: Shape4,
    data: Vec<f64>,
}

impl Tensor4 {
    pub fn zeros(shape: Shape4) -> Self {
        Self {
            shape,
            data: vec![0.0; shape.len()],
        }
    }

    pub fn filled(shape: Shape4, value: f64) -> Self {
        Self {
            shape,
            data: vec![value; shape.len()],
        }
    }

    pub fn from_vec(shape: Shape4, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::contract(format!(
                "tensor {shape} needs {} values, got {}",
                shape.len(),
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    /// Uniform samples in `[lo, hi)`.
    pub fn random_uniform<R: Rng + ?Sized>(shape: Shape4, lo: f64, hi: f64, rng: &mut R) -> Self {
        let data = (0..shape.len()).map(|_| rng.gen_range(lo..hi)).collect();
        Self { shape, data }
    }

    pub fn shape(&self) -> Shape4 {
        self.shape
    }

    pub fn batch(&self) -> usize {
        self.shape.batch
    }

    pub fn channels(&self) -> usize {
        self.shape.channels
    }

    pub fn height(&self) -> usize {
        self.shape.height
    }

    pub fn width(&self) -> usize {
        self.shape.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, b: usize, c: usize, y: usize, x: usize) -> usize {
        ((b * self.shape.channels + c) * self.shape.height + y) * self.shape.width + x
    }

    #[inline]
    pub fn at(&self, b: usize, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.index(b, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, b: usize, c: usize, y: usize, x: usize, value: f64) {
        let i = self.index(b, c, y, x);
        self.data[i] = value;
    }

    /// One (H, W) plane.
    pub fn plane(&self, b: usize, c: usize) -> &[f64] {
        let n = self.shape.plane();
        let start = (b * self.shape.channels + c) * n;
        &self.data[start..start + n]
    }

    /// All channels of one batch entry.
    pub fn item(&self, b: usize) -> &[f64] {
        let n = self.shape.channels * self.shape.plane();
        &self.data[b * n..(b + 1) * n]
    }

    pub fn item_mut(&mut self, b: usize) -> &mut [f64] {
        let n = self.shape.channels * self.shape.plane();
        &mut self.data[b * n..(b + 1) * n]
    }

    /// Copies batch entries `indices` into a new tensor, in order.
    pub fn select_batch(&self, indices: &[usize]) -> Result<Tensor4> {
        let mut shape = self.shape;
        shape.batch = indices.len();
        let mut data = Vec::with_capacity(shape.len());
        for &i in indices {
            if i >= self.shape.batch {
                return Err(Error::contract(format!(
                    "batch index {i} out of range for {}",
                    self.shape
                )));
            }
            data.extend_from_slice(self.item(i));
        }
        Tensor4::from_vec(shape, data)
    }

    /// Stacks single-entry-or-larger tensors along the batch axis.
    pub fn stack_batch(parts: &[&Tensor4]) -> Result<Tensor4> {
        let first = parts
            .first()
            .ok_or_else(|| Error::contract("cannot stack zero tensors"))?;
        let mut shape = first.shape;
        shape.batch = 0;
        let mut data = Vec::new();
        for p in parts {
            crate::error::check_dim("channels", first.channels(), p.channels())?;
            crate::error::check_dim("height", first.height(), p.height())?;
            crate::error::check_dim("width", first.width(), p.width())?;
            shape.batch += p.batch();
            data.extend_from_slice(&p.data);
        }
        Tensor4::from_vec(shape, data)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn dot(&self, other: &Tensor4) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor4 {
        Tensor4 {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor4) -> Result<()> {
        self.shape.expect_eq(&other.shape)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn max_abs_diff(&self, other: &Tensor4) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Returns a numeric error naming `what` if any value is NaN or infinite.
    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        if self.all_finite() {
            Ok(())
        } else {
            Err(Error::Numeric(format!("non-finite value in {what}")))
        }
    }
}
