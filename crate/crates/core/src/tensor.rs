//! Dense rank-3 tensor in row-major `(height, width, channels)` order.
//!
//! Images, feature maps, spectra, gradients and (flattened) weight matrices
//! all travel as [`Tensor`]. Channels are the fastest-varying index, so a
//! pixel's channel vector is contiguous.

use std::fmt;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Shape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl Shape {
    pub const fn new(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
        }
    }

    pub const fn scalar() -> Self {
        Self::new(1, 1, 1)
    }

    pub const fn len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub const fn is_scalar(&self) -> bool {
        self.len() == 1
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.height, self.width, self.channels)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self::full(height, width, channels, 0.0)
    }

    pub fn full(height: usize, width: usize, channels: usize, value: f64) -> Self {
        let shape = Shape::new(height, width, channels);
        Self {
            shape,
            data: vec![value; shape.len()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self::full(1, 1, 1, value)
    }

    pub fn zeros_like(other: &Tensor) -> Self {
        Self {
            shape: other.shape,
            data: vec![0.0; other.data.len()],
        }
    }

    /// Builds a tensor from row-major data, rejecting zero-sized dimensions,
    /// length mismatches and non-finite values.
    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        let shape = Shape::new(height, width, channels);
        if shape.is_empty() {
            return Err(Error::InvalidShape(format!("zero-sized tensor {shape}")));
        }
        if data.len() != shape.len() {
            return Err(Error::InvalidShape(format!(
                "{} values for shape {shape}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite);
        }
        Ok(Self { shape, data })
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        Self {
            shape: Shape::new(height, width, channels),
            data,
        }
    }

    pub(crate) fn from_raw(shape: Shape, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.len(), data.len());
        Self { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn height(&self) -> usize {
        self.shape.height
    }

    pub fn width(&self) -> usize {
        self.shape.width
    }

    pub fn channels(&self) -> usize {
        self.shape.channels
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

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, y: usize, x: usize, c: usize) -> usize {
        (y * self.shape.width + x) * self.shape.channels + c
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[self.index(y, x, c)]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, value: f64) {
        let i = self.index(y, x, c);
        self.data[i] = value;
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn ensure_shape(&self, expected: Shape) -> Result<()> {
        if self.shape != expected {
            return Err(Error::ShapeMismatch {
                expected,
                actual: self.shape,
            });
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        other.ensure_shape(self.shape)?;
        Ok(Tensor {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, k: f64) -> Tensor {
        self.map(|v| v * k)
    }

    /// In-place `self += k * other`.
    pub fn add_scaled(&mut self, other: &Tensor, k: f64) -> Result<()> {
        other.ensure_shape(self.shape)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += k * b;
        }
        Ok(())
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor {
        self.map(|v| v.clamp(lo, hi))
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn norm_l2(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        other.ensure_shape(self.shape)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs())))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Single-channel slice `c` as an `H×W×1` tensor.
    pub fn channel(&self, c: usize) -> Tensor {
        Tensor::from_fn(self.height(), self.width(), 1, |y, x, _| self.get(y, x, c))
    }

    /// Per-pixel mean over channels, as `H×W×1`.
    pub fn channel_mean(&self) -> Tensor {
        let c = self.channels();
        let data = self
            .data
            .chunks_exact(c)
            .map(|px| px.iter().sum::<f64>() / c as f64)
            .collect();
        Tensor::from_raw(Shape::new(self.height(), self.width(), 1), data)
    }

    /// Repeats a single-channel tensor across `channels`.
    pub fn broadcast_channels(&self, channels: usize) -> Result<Tensor> {
        if self.channels() == channels {
            return Ok(self.clone());
        }
        if self.channels() != 1 {
            return Err(Error::InvalidShape(format!(
                "cannot broadcast {} channels to {channels}",
                self.channels()
            )));
        }
        let data = self
            .data
            .iter()
            .flat_map(|&v| std::iter::repeat_n(v, channels))
            .collect();
        Ok(Tensor::from_raw(
            Shape::new(self.height(), self.width(), channels),
            data,
        ))
    }

    /// Spatial crop `[y0, y0+h) × [x0, x0+w)`.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Tensor> {
        if y0 + h > self.height() || x0 + w > self.width() || h == 0 || w == 0 {
            return Err(Error::InvalidShape(format!(
                "crop {h}x{w} at ({y0},{x0}) outside {}",
                self.shape
            )));
        }
        Ok(Tensor::from_fn(h, w, self.channels(), |y, x, c| {
            self.get(y0 + y, x0 + x, c)
        }))
    }

    /// Area (box) downsampling by an integer factor; trailing rows/cols that
    /// do not fill a whole block are dropped.
    pub fn downsample_area(&self, factor: usize) -> Result<Tensor> {
        if factor == 0 || self.height() < factor || self.width() < factor {
            return Err(Error::InvalidShape(format!(
                "cannot area-downsample {} by {factor}",
                self.shape
            )));
        }
        let (h, w) = (self.height() / factor, self.width() / factor);
        let norm = 1.0 / (factor * factor) as f64;
        Ok(Tensor::from_fn(h, w, self.channels(), |y, x, c| {
            let mut acc = 0.0;
            for dy in 0..factor {
                for dx in 0..factor {
                    acc += self.get(y * factor + dy, x * factor + dx, c);
                }
            }
            acc * norm
        }))
    }

    /// Nearest-neighbour upsampling by an integer factor.
    pub fn upsample_nearest(&self, factor: usize) -> Tensor {
        Tensor::from_fn(
            self.height() * factor,
            self.width() * factor,
            self.channels(),
            |y, x, c| self.get(y / factor, x / factor, c),
        )
    }
}
