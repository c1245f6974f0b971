//! Spatial upsampling of latent grids.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::grid::LatentGrid;

/// A positive rational scale factor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Ratio {
    pub num: u32,
    pub den: u32,
}

impl Ratio {
    pub fn new(num: u32, den: u32) -> Result<Self> {
        if num == 0 || den == 0 {
            return Err(Error::Parameter(format!("scale {num}/{den} must be positive")));
        }
        Ok(Self { num, den })
    }

    pub fn integer(n: u32) -> Self {
        Self { num: n.max(1), den: 1 }
    }

    pub fn as_f64(self) -> f64 {
        self.num as f64 / self.den as f64
    }

    pub fn is_one(self) -> bool {
        self.num == self.den
    }

    /// `round(len · num/den)` in exact integer arithmetic (ties away from zero).
    pub fn apply(self, len: usize) -> usize {
        let (n, d) = (self.num as u128, self.den as u128);
        ((2 * len as u128 * n + d) / (2 * d)) as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ResampleMode {
    Nearest,
    #[default]
    Bilinear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Alignment {
    AlignCorners,
    #[default]
    HalfPixel,
}

/// How to resample a grid: per-axis scale, interpolation mode and pixel alignment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ResampleSpec {
    pub scale_h: Ratio,
    pub scale_w: Ratio,
    pub mode: ResampleMode,
    pub alignment: Alignment,
}

impl ResampleSpec {
    /// Bilinear, half-pixel aligned, integer per-axis scales.
    pub fn integer(scale_h: u32, scale_w: u32) -> Self {
        Self {
            scale_h: Ratio::integer(scale_h),
            scale_w: Ratio::integer(scale_w),
            mode: ResampleMode::Bilinear,
            alignment: Alignment::HalfPixel,
        }
    }

    pub fn with_mode(mut self, mode: ResampleMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn with_alignment(mut self, alignment: Alignment) -> Self {
        self.alignment = alignment;
        self
    }

    pub fn output_dims(&self, height: usize, width: usize) -> (usize, usize) {
        (self.scale_h.apply(height), self.scale_w.apply(width))
    }
}

impl fmt::Display for ResampleMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ResampleMode::Nearest => "nearest",
            ResampleMode::Bilinear => "bilinear",
        })
    }
}

impl FromStr for ResampleMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nearest" => Ok(Self::Nearest),
            "bilinear" => Ok(Self::Bilinear),
            _ => Err(Error::Parameter(format!("unknown resample mode {s:?}"))),
        }
    }
}

impl fmt::Display for Alignment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Alignment::AlignCorners => "align-corners",
            Alignment::HalfPixel => "half-pixel",
        })
    }
}

impl FromStr for Alignment {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "align-corners" => Ok(Self::AlignCorners),
            "half-pixel" => Ok(Self::HalfPixel),
            _ => Err(Error::Parameter(format!("unknown alignment {s:?}"))),
        }
    }
}

/// Source coordinate of output index `dst` along one axis.
fn source_coord(dst: usize, in_len: usize, out_len: usize, alignment: Alignment) -> f64 {
    match alignment {
        Alignment::AlignCorners => {
            if out_len <= 1 {
                0.0
            } else {
                dst as f64 * (in_len - 1) as f64 / (out_len - 1) as f64
            }
        }
        Alignment::HalfPixel => {
            let s = (dst as f64 + 0.5) * in_len as f64 / out_len as f64 - 0.5;
            s.clamp(0.0, (in_len - 1) as f64)
        }
    }
}

/// Interpolation taps along one axis: `(lo, hi, frac)` per output index.
pub(crate) fn axis_taps(
    in_len: usize,
    out_len: usize,
    mode: ResampleMode,
    alignment: Alignment,
) -> Vec<(usize, usize, f64)> {
    (0..out_len)
        .map(|d| {
            let s = source_coord(d, in_len, out_len, alignment);
            match mode {
                ResampleMode::Nearest => {
                    let i = match alignment {
                        Alignment::AlignCorners => s.round() as usize,
                        Alignment::HalfPixel => {
                            ((d as f64 + 0.5) * in_len as f64 / out_len as f64).floor() as usize
                        }
                    };
                    let i = i.min(in_len - 1);
                    (i, i, 0.0)
                }
                ResampleMode::Bilinear => {
                    let lo = (s.floor() as usize).min(in_len - 1);
                    let hi = (lo + 1).min(in_len - 1);
                    (lo, hi, s - lo as f64)
                }
            }
        })
        .collect()
}

#[inline]
pub(crate) fn lerp(a: f64, b: f64, t: f64) -> f64 {
    // `a + (b - a)·t` keeps constant inputs bit-exact.
    a + (b - a) * t
}

/// Upsamples every channel of `x` according to `spec`.
pub fn upsample(x: &LatentGrid, spec: &ResampleSpec) -> Result<LatentGrid> {
    if spec.scale_h.num < spec.scale_h.den || spec.scale_w.num < spec.scale_w.den {
        return Err(Error::Parameter("upsample scale must be >= 1".into()));
    }
    if spec.scale_h.is_one() && spec.scale_w.is_one() {
        return Ok(x.clone());
    }
    let (c, h, w) = x.dims();
    let (oh, ow) = spec.output_dims(h, w);
    if oh == 0 || ow == 0 {
        return Err(Error::Size(format!("upsample to {oh}x{ow}")));
    }
    let ty = axis_taps(h, oh, spec.mode, spec.alignment);
    let tx = axis_taps(w, ow, spec.mode, spec.alignment);
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let plane = x.channel(ch);
        for &(y0, y1, fy) in &ty {
            let r0 = &plane[y0 * w..(y0 + 1) * w];
            let r1 = &plane[y1 * w..(y1 + 1) * w];
            for &(x0, x1, fx) in &tx {
                let top = lerp(r0[x0], r0[x1], fx);
                let bot = lerp(r1[x0], r1[x1], fx);
                out.push(lerp(top, bot, fy));
            }
        }
    }
    LatentGrid::new(c, oh, ow, out)
}
