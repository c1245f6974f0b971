//! Exact noise prediction for stationary Gaussian latents.
//!
//! The prior is `z0 = m + f` with `f` a stationary Gaussian field whose DFT
//! has per-bin variance `h·w·p(k)`. Under `z_t = √ᾱ·z0 + √(1−ᾱ)·ε` every
//! frequency bin decouples, and the posterior mean of the noise is
//!
//! ```text
//! E[ε̂(k) | z_t] = √(1−ᾱ) · (Z_t(k) − √ᾱ·M(k)) / (ᾱ·p(k) + 1 − ᾱ)
//! ```
//!
//! where `M` is the transform of the constant mean.

use std::fmt;

use rustfft::num_complex::Complex64;

use super::{Denoiser, DenoiserOutput};
use crate::error::{Error, Result};
use crate::fft::{dft2, idft2_real};
use crate::grid::LatentGrid;
use crate::rng::normal_grid;
use crate::schedule::NoiseSchedule;
use crate::taps::AttentionHook;

/// Power spectrum families, in cycles per image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SpectrumShape {
    /// Per-pixel variance `variance` at every resolution.
    White { variance: f64 },
    /// `amplitude / (1 + (|k|/corner)²)^(exponent/2) + floor`, with `|k|` the
    /// radial frequency index. The decaying part is multiplied by the area
    /// ratio to the native grid so upsampled content keeps its power.
    PowerLaw {
        amplitude: f64,
        corner: f64,
        exponent: f64,
        floor: f64,
    },
}

impl SpectrumShape {
    fn power(&self, ky: f64, kx: f64, area_ratio: f64) -> f64 {
        match *self {
            SpectrumShape::White { variance } => variance,
            SpectrumShape::PowerLaw {
                amplitude,
                corner,
                exponent,
                floor,
            } => {
                let r2 = (ky * ky + kx * kx) / (corner * corner);
                area_ratio * amplitude / (1.0 + r2).powf(exponent / 2.0) + floor
            }
        }
    }
}

impl fmt::Display for SpectrumShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SpectrumShape::White { variance } => write!(f, "white:{variance}"),
            SpectrumShape::PowerLaw {
                amplitude,
                corner,
                exponent,
                floor,
            } => write!(f, "powerlaw:{amplitude}:{corner}:{exponent}:{floor}"),
        }
    }
}

impl std::str::FromStr for SpectrumShape {
    type Err = Error;

    /// `white:<var>` or `powerlaw:<amplitude>:<corner>:<exponent>:<floor>`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        let num = |i: usize| -> Result<f64> {
            parts
                .get(i)
                .and_then(|p| p.parse().ok())
                .ok_or_else(|| Error::Parameter(format!("bad spectrum {s:?}")))
        };
        match parts[0] {
            "white" if parts.len() == 2 => Ok(Self::White { variance: num(1)? }),
            "powerlaw" if parts.len() == 5 => Ok(Self::PowerLaw {
                amplitude: num(1)?,
                corner: num(2)?,
                exponent: num(3)?,
                floor: num(4)?,
            }),
            _ => Err(Error::Parameter(format!("bad spectrum {s:?}"))),
        }
    }
}

/// Signed frequency index of unshifted bin `i` on an axis of length `n`.
pub(crate) fn signed_freq(i: usize, n: usize) -> f64 {
    if i <= n / 2 {
        i as f64
    } else {
        i as f64 - n as f64
    }
}

/// Stationary Gaussian prior with an exact ε-predictor.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianFieldModel {
    channels: usize,
    height: usize,
    width: usize,
    mean: f64,
    power: Vec<f64>,
}

impl GaussianFieldModel {
    /// From an explicit unshifted power spectrum. Entries must be positive and
    /// symmetric under `k → −k` so that the field is real.
    pub fn new(channels: usize, height: usize, width: usize, mean: f64, power: Vec<f64>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 || power.len() != height * width {
            return Err(Error::Size(format!(
                "power spectrum of length {} for {channels}x{height}x{width}",
                power.len()
            )));
        }
        if power.iter().any(|&p| !(p > 0.0) || !p.is_finite()) {
            return Err(Error::Parameter("power spectrum entries must be positive".into()));
        }
        for y in 0..height {
            for x in 0..width {
                let mirror = ((height - y) % height) * width + (width - x) % width;
                if power[y * width + x] != power[mirror] {
                    return Err(Error::Parameter(format!(
                        "power spectrum is not symmetric at bin ({y},{x})"
                    )));
                }
            }
        }
        Ok(Self {
            channels,
            height,
            width,
            mean,
            power,
        })
    }

    pub fn white(channels: usize, height: usize, width: usize, mean: f64, variance: f64) -> Result<Self> {
        Self::new(channels, height, width, mean, vec![variance; height * width])
    }

    /// Prior at `scale_h·native_h × scale_w·native_w` for a spectrum family.
    pub fn at_scale(
        channels: usize,
        native_h: usize,
        native_w: usize,
        scale_h: usize,
        scale_w: usize,
        mean: f64,
        shape: &SpectrumShape,
    ) -> Result<Self> {
        let (h, w) = (native_h * scale_h, native_w * scale_w);
        let area = (scale_h * scale_w) as f64;
        let mut power = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                power.push(shape.power(signed_freq(y, h), signed_freq(x, w), area));
            }
        }
        Self::new(channels, h, w, mean, power)
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// Unshifted per-bin power `p(k)`.
    pub fn power(&self) -> &[f64] {
        &self.power
    }

    /// Draws `z0` from the prior.
    pub fn sample(&self, seed: u64, stream: u64) -> LatentGrid {
        let white = normal_grid(seed, stream, self.channels, self.height, self.width);
        let mut spec = dft2(&white);
        let n = self.height * self.width;
        for plane in spec.data_mut().chunks_exact_mut(n) {
            for (v, p) in plane.iter_mut().zip(&self.power) {
                *v *= p.sqrt();
            }
        }
        idft2_real(&spec)
            .and_then(|g| g.map(|v| v + self.mean))
            .expect("prior sample dims are valid")
    }

    /// Posterior-mean noise estimate `E[ε | z_t]`.
    pub fn analytic_eps(&self, z_t: &LatentGrid, t: usize, sched: &NoiseSchedule) -> Result<LatentGrid> {
        if z_t.dims() != (self.channels, self.height, self.width) {
            return Err(Error::Size(format!(
                "analytic model is {}x{}x{}, input is {:?}",
                self.channels,
                self.height,
                self.width,
                z_t.dims()
            )));
        }
        if t > sched.train_steps() {
            return Err(Error::Parameter(format!("timestep {t} beyond schedule")));
        }
        let ab = sched.alpha_bar(t);
        let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
        let n = self.height * self.width;
        let dc_mean = Complex64::new(self.mean * n as f64, 0.0);
        let mut spec = dft2(z_t);
        for plane in spec.data_mut().chunks_exact_mut(n) {
            for (i, (v, &p)) in plane.iter_mut().zip(&self.power).enumerate() {
                let dev = if i == 0 { *v - dc_mean * sa } else { *v };
                *v = dev * (sn / (ab * p + 1.0 - ab));
            }
        }
        idft2_real(&spec)
    }

    /// Posterior mean `E[z0 | z_t]`, the exact Tweedie estimate.
    pub fn posterior_mean_x0(&self, z_t: &LatentGrid, t: usize, sched: &NoiseSchedule) -> Result<LatentGrid> {
        let eps = self.analytic_eps(z_t, t, sched)?;
        crate::schedule::predict_x0(z_t, &eps, t, sched)
    }
}

impl Denoiser for GaussianFieldModel {
    fn predict(
        &self,
        z_t: &LatentGrid,
        t: usize,
        sched: &NoiseSchedule,
        _hook: Option<&mut dyn AttentionHook>,
    ) -> Result<DenoiserOutput> {
        Ok(DenoiserOutput {
            eps_hat: self.analytic_eps(z_t, t, sched)?,
            attention_calls: 0,
        })
    }

    fn dims(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    fn summary(&self) -> String {
        format!(
            "analytic_gaussian channels={} dims={}x{} mean={}",
            self.channels, self.height, self.width, self.mean
        )
    }
}
