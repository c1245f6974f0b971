//! Dense per-channel 2D grids: the real latent tensor and its complex spectrum.

use rustfft::num_complex::Complex64;

use crate::error::{Error, Result};

/// A `channels × height × width` real tensor stored row-major per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentGrid {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

fn checked_len(channels: usize, height: usize, width: usize) -> Result<usize> {
    channels
        .checked_mul(height)
        .and_then(|n| n.checked_mul(width))
        .ok_or_else(|| Error::Size(format!("{channels}x{height}x{width} overflows")))
}

impl LatentGrid {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::Size(format!(
                "grid dims must be non-zero, got {channels}x{height}x{width}"
            )));
        }
        let len = checked_len(channels, height, width)?;
        if data.len() != len {
            return Err(Error::Size(format!(
                "data length {} does not match {channels}x{height}x{width}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite value at index {i}")));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Result<Self> {
        Self::filled(channels, height, width, 0.0)
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Result<Self> {
        let len = checked_len(channels, height, width)?;
        Self::new(channels, height, width, vec![value; len])
    }

    /// Builds a grid by evaluating `f(channel, row, col)` at every position.
    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let len = checked_len(channels, height, width)?;
        let mut data = Vec::with_capacity(len);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self::new(channels, height, width, data)
    }

    /// Internal constructor for values already known to be finite and sized.
    pub(crate) fn from_raw(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), channels * height * width);
        Self {
            channels,
            height,
            width,
            data,
        }
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

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn same_dims(&self, other: &LatentGrid) -> bool {
        self.dims() == other.dims()
    }

    pub(crate) fn ensure_same_dims(&self, other: &LatentGrid, what: &str) -> Result<()> {
        if self.same_dims(other) {
            Ok(())
        } else {
            Err(Error::Size(format!(
                "{what}: {:?} vs {:?}",
                self.dims(),
                other.dims()
            )))
        }
    }

    /// Elementwise `a·self + b·other`.
    pub fn axpby(&self, a: f64, other: &LatentGrid, b: f64) -> Result<LatentGrid> {
        self.ensure_same_dims(other, "axpby")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(x, y)| a * x + b * y)
            .collect();
        LatentGrid::new(self.channels, self.height, self.width, data)
    }

    pub fn add(&self, other: &LatentGrid) -> Result<LatentGrid> {
        self.zip_map(other, |x, y| x + y)
    }

    pub fn sub(&self, other: &LatentGrid) -> Result<LatentGrid> {
        self.zip_map(other, |x, y| x - y)
    }

    pub fn scale(&self, k: f64) -> Result<LatentGrid> {
        self.map(|v| v * k)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<LatentGrid> {
        let data = self.data.iter().map(|&v| f(v)).collect();
        LatentGrid::new(self.channels, self.height, self.width, data)
    }

    pub fn zip_map(&self, other: &LatentGrid, f: impl Fn(f64, f64) -> f64) -> Result<LatentGrid> {
        self.ensure_same_dims(other, "elementwise op")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&x, &y)| f(x, y))
            .collect();
        LatentGrid::new(self.channels, self.height, self.width, data)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &LatentGrid) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn channel_mean(&self, c: usize) -> f64 {
        let ch = self.channel(c);
        ch.iter().sum::<f64>() / ch.len() as f64
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn sum_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    /// Cyclic shift of every channel by (`dy`, `dx`) rows and columns.
    pub fn roll(&self, dy: usize, dx: usize) -> LatentGrid {
        let (h, w) = (self.height, self.width);
        let mut out = vec![0.0; self.data.len()];
        for c in 0..self.channels {
            let base = c * h * w;
            for y in 0..h {
                let ny = (y + dy) % h;
                for x in 0..w {
                    out[base + ny * w + (x + dx) % w] = self.data[base + y * w + x];
                }
            }
        }
        LatentGrid::from_raw(self.channels, h, w, out)
    }
}

/// Complex per-channel frequency coefficients, row-major per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralGrid {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<Complex64>,
    shifted: bool,
}

impl SpectralGrid {
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        data: Vec<Complex64>,
        shifted: bool,
    ) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::Size("spectral dims must be non-zero".into()));
        }
        if data.len() != checked_len(channels, height, width)? {
            return Err(Error::Size(format!(
                "spectral data length {} does not match {channels}x{height}x{width}",
                data.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
            shifted,
        })
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

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    /// True when the DC bin sits at `(height/2, width/2)`.
    pub fn is_shifted(&self) -> bool {
        self.shifted
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Complex64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<Complex64> {
        self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> Complex64 {
        self.data[(c * self.height + y) * self.width + x]
    }
}
