//! Planar floating-point images with an explicit value-range contract.
//!
//! Images are stored channel-first as `(channels, height, width)`. Most of
//! the toolkit works on the default `[0, 1]` range; color spaces with other
//! scales (LAB, the HVI chroma plane) declare their own range.

use ndarray::{Array3, ArrayView2};

use crate::error::{Error, Result};

/// Closed interval the pixel values of an [`ImageTensor`] are expected to lie in.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValueRange {
    pub lo: f32,
    pub hi: f32,
}

impl ValueRange {
    pub const UNIT: ValueRange = ValueRange { lo: 0.0, hi: 1.0 };

    pub fn new(lo: f32, hi: f32) -> Self {
        ValueRange { lo, hi }
    }

    pub fn contains(&self, v: f32) -> bool {
        v >= self.lo && v <= self.hi
    }
}

/// A planar `(C, H, W)` image of finite `f32` samples with a declared range.
#[derive(Debug, Clone)]
pub struct ImageTensor {
    pub data: Array3<f32>,
    pub range: ValueRange,
}

impl ImageTensor {
    /// Wraps raw data after validating finiteness and the declared range.
    pub fn new(data: Array3<f32>, range: ValueRange) -> Result<Self> {
        let img = ImageTensor { data, range };
        img.validate()?;
        Ok(img)
    }

    /// Wraps `[0,1]`-ranged data.
    pub fn unit(data: Array3<f32>) -> Result<Self> {
        Self::new(data, ValueRange::UNIT)
    }

    /// Constructor for internal use by ops that guarantee their contract.
    pub(crate) fn unchecked(data: Array3<f32>, range: ValueRange) -> Self {
        ImageTensor { data, range }
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn channel(&self, c: usize) -> ArrayView2<'_, f32> {
        self.data.index_axis(ndarray::Axis(0), c)
    }

    /// Checks the two image invariants: all values finite, all values in range.
    pub fn validate(&self) -> Result<()> {
        for &v in self.data.iter() {
            if !v.is_finite() {
                return Err(Error::domain("image contains a non-finite value"));
            }
            if !self.range.contains(v) {
                return Err(Error::domain(format!(
                    "value {v} outside declared range [{}, {}]",
                    self.range.lo, self.range.hi
                )));
            }
        }
        Ok(())
    }

    /// Errors unless the image has exactly `n` channels.
    pub fn expect_channels(&self, n: usize) -> Result<()> {
        if self.channels() != n {
            return Err(Error::shape(format!(
                "expected {n} channel(s), got {}",
                self.channels()
            )));
        }
        Ok(())
    }

    /// Errors unless spatial dimensions match `other`.
    pub fn expect_same_dims(&self, other: &ImageTensor) -> Result<()> {
        if self.height() != other.height() || self.width() != other.width() {
            return Err(Error::shape(format!(
                "spatial dims mismatch: {}x{} vs {}x{}",
                self.height(),
                self.width(),
                other.height(),
                other.width()
            )));
        }
        Ok(())
    }
}
