use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Affine map back to source units: `source = value * (max - min) + min`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ValueRange {
    pub min: f64,
    pub max: f64,
}

impl ValueRange {
    pub const UNIT: Self = Self { min: 0.0, max: 1.0 };

    pub fn denormalize(&self, v: f64) -> f64 {
        v * (self.max - self.min) + self.min
    }
}

impl Default for ValueRange {
    fn default() -> Self {
        Self::UNIT
    }
}

/// A `channels x height x width` scalar field with its value-range metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct GridField {
    channels: usize,
    height: usize,
    width: usize,
    values: Vec<f64>,
    pub range: ValueRange,
}

impl GridField {
    pub fn new(channels: usize, height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::ExtentMismatch {
                detail: format!("extents must be positive, got {channels}x{height}x{width}"),
            });
        }
        if values.len() != channels * height * width {
            return Err(Error::ExtentMismatch {
                detail: format!(
                    "{channels}x{height}x{width} field needs {} values, got {}",
                    channels * height * width,
                    values.len()
                ),
            });
        }
        Ok(Self {
            channels,
            height,
            width,
            values,
            range: ValueRange::UNIT,
        })
    }

    pub fn with_range(mut self, range: ValueRange) -> Self {
        self.range = range;
        self
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(channels, height, width, alloc::vec![value; channels * height * width])
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (c, h, w) = t.dims3()?;
        Self::new(c, h, w, t.data().to_vec())
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new([self.channels, self.height, self.width], self.values.clone())
            .expect("extents checked at construction")
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn extents(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.values[(c * self.height + y) * self.width + x]
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.values.len() as f64
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub(crate) fn same_extents(&self, other: &GridField, what: &str) -> Result<()> {
        if self.extents() != other.extents() {
            return Err(Error::ExtentMismatch {
                detail: format!("{what}: {:?} vs {:?}", self.extents(), other.extents()),
            });
        }
        Ok(())
    }
}
