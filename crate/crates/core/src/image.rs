use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::{Error, Result};

/// A float image with values in `[0, 1]`.
///
/// Pixels are stored planar (channel-major, then row-major), which is the
/// layout the convolution kernels consume directly.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl fmt::Display for Dims {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.height, self.width, self.channels)
    }
}

impl Image {
    /// Wraps planar data, checking shape and the `[0, 1]` range.
    pub fn from_planar(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if !(channels == 1 || channels == 3) {
            return Err(Error::shape("1 or 3 channels", channels));
        }
        if height == 0 || width == 0 {
            return Err(Error::shape("nonzero resolution", alloc::format!("{height}x{width}")));
        }
        if data.len() != height * width * channels {
            return Err(Error::shape(height * width * channels, data.len()));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteInput);
        }
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidConfig(alloc::string::String::from(
                "pixel values must lie in [0, 1]",
            )));
        }
        Ok(Self { height, width, channels, data })
    }

    /// Like [`Image::from_planar`] but clamps into `[0, 1]` instead of
    /// rejecting out-of-range values. NaN is still rejected.
    pub fn from_planar_clamped(height: usize, width: usize, channels: usize, mut data: Vec<f64>) -> Result<Self> {
        if data.iter().any(|v| v.is_nan()) {
            return Err(Error::NonFiniteInput);
        }
        for v in &mut data {
            *v = v.clamp(0.0, 1.0);
        }
        Self::from_planar(height, width, channels, data)
    }

    /// Builds an image without range checks. Used where values are produced
    /// by trusted arithmetic and may legitimately need validating later
    /// (for instance test fixtures carrying NaN).
    pub fn from_raw(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), height * width * channels);
        Self { height, width, channels, data }
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        Self::from_raw(height, width, channels, vec![value; height * width * channels])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> Dims {
        Dims { channels: self.channels, height: self.height, width: self.width }
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

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, value: f64) {
        self.data[(c * self.height + y) * self.width + x] = value;
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    pub fn clamp_unit(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    /// Little-endian bytes of every sample, used for golden comparisons and
    /// determinism checks.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.data.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    pub(crate) fn check_dims(&self, expected: Dims) -> Result<()> {
        if self.dims() != expected {
            return Err(Error::shape(expected, self.dims()));
        }
        Ok(())
    }
}

/// Images drawn together with the indices they came from.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBatch {
    pub images: Vec<Image>,
    pub indices: Vec<usize>,
}

impl ImageBatch {
    pub fn new(images: Vec<Image>, indices: Vec<usize>) -> Result<Self> {
        if images.len() != indices.len() {
            return Err(Error::shape(indices.len(), images.len()));
        }
        Ok(Self { images, indices })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}
