//! Frequency modulation: the time-varying high-pass filter and the guidance
//! functions that blend a denoised latent with its diffused counterpart.
//!
//! The filter `K(t)` lives on the DC-centered spectrum. It equals
//! `ρ(t) = t/T` on the open rectangle `|x − x_c| < τ_w/2 ∧ |y − y_c| < τ_h/2`
//! and `1` elsewhere, with `τ_h = h·c·(1−ρ)`, `τ_w = w·c·(1−ρ)` and
//! `(x_c, y_c) = (⌊w/2⌋, ⌊h/2⌋)`.
//!
//! The spectral mix `IDFT(K⊙DFT(z) + (1−K)⊙DFT(z̃))` has the equivalent
//! spatial form `z + κ ⊛ (z̃ − z)` with `κ = IDFT(1 − K)`; both are provided
//! so either can serve as an oracle for the other.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rustfft::num_complex::Complex64;

use crate::error::{Error, Result};
use crate::fft::{band_project, circular_conv, dft2, idft2, idft2_real, ifftshift_real};
use crate::grid::{LatentGrid, SpectralGrid};

pub const DEFAULT_CUTOFF_C: f64 = 0.5;

/// Construction parameters of the high-pass filter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilterParams {
    pub cutoff_c: f64,
    pub total_steps: usize,
    pub height: usize,
    pub width: usize,
}

impl FilterParams {
    pub fn new(cutoff_c: f64, total_steps: usize, height: usize, width: usize) -> Result<Self> {
        let p = Self {
            cutoff_c,
            total_steps,
            height,
            width,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.cutoff_c) {
            return Err(Error::Parameter(format!(
                "cutoff_c {} outside [0, 1]",
                self.cutoff_c
            )));
        }
        if self.total_steps == 0 {
            return Err(Error::Parameter("filter needs T >= 1".into()));
        }
        if self.height == 0 || self.width == 0 {
            return Err(Error::Size("filter dims must be non-zero".into()));
        }
        Ok(())
    }
}

/// The mask `K(t)` in DC-centered layout.
#[derive(Debug, Clone, PartialEq)]
pub struct HighPassFilter {
    height: usize,
    width: usize,
    t: usize,
    inside_value: f64,
    rect_half_h: f64,
    rect_half_w: f64,
    mask: Vec<f64>,
}

impl HighPassFilter {
    /// A filter with an explicit DC-centered mask; used for the identity
    /// extremes and for tests. Entries must lie in `[0, 1]`.
    pub fn from_mask(height: usize, width: usize, mask: Vec<f64>) -> Result<Self> {
        if mask.len() != height * width || mask.is_empty() {
            return Err(Error::Size(format!(
                "mask length {} does not match {height}x{width}",
                mask.len()
            )));
        }
        if mask.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Parameter("mask entries must lie in [0, 1]".into()));
        }
        Ok(Self {
            height,
            width,
            t: 0,
            inside_value: f64::NAN,
            rect_half_h: 0.0,
            rect_half_w: 0.0,
            mask,
        })
    }

    /// Uniform mask: `1` keeps the denoised latent, `0` keeps the diffused one.
    pub fn constant(height: usize, width: usize, value: f64) -> Result<Self> {
        Self::from_mask(height, width, vec![value; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn t(&self) -> usize {
        self.t
    }

    /// ρ(t), the mask value inside the low-frequency rectangle.
    pub fn inside_value(&self) -> f64 {
        self.inside_value
    }

    /// τ_h(t)/2.
    pub fn rect_half_h(&self) -> f64 {
        self.rect_half_h
    }

    /// τ_w(t)/2.
    pub fn rect_half_w(&self) -> f64 {
        self.rect_half_w
    }

    /// DC-centered mask values, row-major.
    pub fn mask(&self) -> &[f64] {
        &self.mask
    }

    pub fn center(&self) -> (usize, usize) {
        (self.height / 2, self.width / 2)
    }

    /// Mask in unshifted layout (DC at `(0, 0)`).
    pub fn unshifted_mask(&self) -> Vec<f64> {
        ifftshift_real(&self.mask, self.height, self.width)
    }

    /// Number of bins that take the inside value.
    pub fn inside_count(&self) -> usize {
        let (cy, cx) = self.center();
        (0..self.height)
            .flat_map(|y| (0..self.width).map(move |x| (y, x)))
            .filter(|&(y, x)| in_rect(y, x, cy, cx, self.rect_half_h, self.rect_half_w))
            .count()
    }

    /// The mask as a single-channel grid, for export and rendering.
    pub fn to_grid(&self) -> LatentGrid {
        LatentGrid::from_raw(1, self.height, self.width, self.mask.clone())
    }
}

#[inline]
fn in_rect(y: usize, x: usize, cy: usize, cx: usize, half_h: f64, half_w: f64) -> bool {
    (x as f64 - cx as f64).abs() < half_w && (y as f64 - cy as f64).abs() < half_h
}

/// Builds `K(t)` for `0 ≤ t ≤ T`.
pub fn make_filter(params: &FilterParams, t: usize) -> Result<HighPassFilter> {
    params.validate()?;
    if t > params.total_steps {
        return Err(Error::Parameter(format!(
            "filter step {t} outside [0, {}]",
            params.total_steps
        )));
    }
    let (h, w) = (params.height, params.width);
    let rho = t as f64 / params.total_steps as f64;
    let tau_h = h as f64 * params.cutoff_c * (1.0 - rho);
    let tau_w = w as f64 * params.cutoff_c * (1.0 - rho);
    let (half_h, half_w) = (tau_h / 2.0, tau_w / 2.0);
    let (cy, cx) = (h / 2, w / 2);
    let mut mask = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            mask.push(if in_rect(y, x, cy, cx, half_h, half_w) {
                rho
            } else {
                1.0
            });
        }
    }
    Ok(HighPassFilter {
        height: h,
        width: w,
        t,
        inside_value: rho,
        rect_half_h: half_h,
        rect_half_w: half_w,
        mask,
    })
}

fn check_mix_dims(z_denoised: &LatentGrid, z_diffused: &LatentGrid, filt: &HighPassFilter) -> Result<()> {
    z_denoised.ensure_same_dims(z_diffused, "fm mix inputs")?;
    if z_denoised.height() != filt.height || z_denoised.width() != filt.width {
        return Err(Error::Size(format!(
            "filter {}x{} does not match grid {}x{}",
            filt.height,
            filt.width,
            z_denoised.height(),
            z_denoised.width()
        )));
    }
    Ok(())
}

/// Spectral mix `IDFT(K⊙DFT(z_denoised) + (1−K)⊙DFT(z_diffused))`.
pub fn fm_mix(
    z_denoised: &LatentGrid,
    z_diffused: &LatentGrid,
    filt: &HighPassFilter,
) -> Result<LatentGrid> {
    check_mix_dims(z_denoised, z_diffused, filt)?;
    let k = filt.unshifted_mask();
    let den = dft2(z_denoised);
    let dif = dft2(z_diffused);
    let (c, h, w) = z_denoised.dims();
    let n = h * w;
    let mut mixed = Vec::with_capacity(c * n);
    for (pd, pf) in den.data().chunks_exact(n).zip(dif.data().chunks_exact(n)) {
        for ((a, b), &kv) in pd.iter().zip(pf).zip(&k) {
            mixed.push(a * kv + b * (1.0 - kv));
        }
    }
    idft2(&SpectralGrid::new(c, h, w, mixed, false)?)
}

/// Unshifted indices `u` on an axis of length `n` whose centered offset
/// `|u − ⌊n/2⌋|` (in shifted layout) is below `half`.
fn band_indices(n: usize, half: f64) -> Vec<usize> {
    let c = n / 2;
    (0..n)
        .filter(|&y| (y as f64 - c as f64).abs() < half)
        .map(|y| (y + n - c) % n)
        .collect()
}

/// Same result as [`fm_mix`], computed as `z + IDFT((1−K)⊙DFT(z̃ − z))`.
///
/// For filters built by [`make_filter`], `1 − K` is the constant `1 − ρ` on
/// the low-frequency rectangle and zero elsewhere, so only the transform
/// lines crossing the rectangle are evaluated. Other masks take the full
/// two-transform route.
pub fn fm_mix_lowpass(
    z_denoised: &LatentGrid,
    z_diffused: &LatentGrid,
    filt: &HighPassFilter,
) -> Result<LatentGrid> {
    check_mix_dims(z_denoised, z_diffused, filt)?;
    let diff = z_diffused.sub(z_denoised)?;
    if filt.inside_value.is_nan() {
        let k = filt.unshifted_mask();
        let (c, h, w) = diff.dims();
        let mut spec = dft2(&diff);
        for plane in spec.data_mut().chunks_exact_mut(h * w) {
            for (v, &kv) in plane.iter_mut().zip(&k) {
                *v *= 1.0 - kv;
            }
        }
        let low = idft2_real(&SpectralGrid::new(c, h, w, spec.into_data(), false)?)?;
        return z_denoised.add(&low);
    }
    let gain = 1.0 - filt.inside_value;
    let rows = band_indices(filt.height, filt.rect_half_h);
    let cols = band_indices(filt.width, filt.rect_half_w);
    if gain == 0.0 || rows.is_empty() || cols.is_empty() {
        return Ok(z_denoised.clone());
    }
    z_denoised.add(&band_project(&diff, &rows, &cols, gain))
}

/// Spatial kernel `κ = Re IDFT(1 − K)` on the unshifted grid.
pub fn filter_to_kernel(filt: &HighPassFilter) -> Result<LatentGrid> {
    let (h, w) = (filt.height, filt.width);
    let data: Vec<Complex64> = filt
        .unshifted_mask()
        .into_iter()
        .map(|k| Complex64::new(1.0 - k, 0.0))
        .collect();
    let spec = SpectralGrid::new(1, h, w, data, false)?;
    idft2(&spec)
}

/// Spatial-domain mix `z_denoised + κ ⊛ (z_diffused − z_denoised)`.
pub fn fm_mix_conv(
    z_denoised: &LatentGrid,
    z_diffused: &LatentGrid,
    filt: &HighPassFilter,
) -> Result<LatentGrid> {
    check_mix_dims(z_denoised, z_diffused, filt)?;
    let kernel = filter_to_kernel(filt)?;
    let update = circular_conv(&z_diffused.sub(z_denoised)?, &kernel)?;
    z_denoised.add(&update)
}

/// Weight on the diffused latent in the skip-residual blend:
/// `((1 + cos(π·(T−t)/T))/2)^alpha_exp`.
pub fn skip_residual_weight(t: usize, total_steps: usize, alpha_exp: f64) -> f64 {
    let phase = PI * (total_steps as f64 - t as f64) / total_steps as f64;
    ((1.0 + phase.cos()) / 2.0).max(0.0).powf(alpha_exp)
}

/// Skip-residual baseline: `c1·z_diffused + (1−c1)·z_denoised`.
pub fn skip_residual_mix(
    z_denoised: &LatentGrid,
    z_diffused: &LatentGrid,
    t: usize,
    total_steps: usize,
    alpha_exp: f64,
) -> Result<LatentGrid> {
    if total_steps == 0 || t > total_steps {
        return Err(Error::Parameter(format!("step {t} outside [0, {total_steps}]")));
    }
    let c1 = skip_residual_weight(t, total_steps, alpha_exp);
    z_diffused.axpby(c1, z_denoised, 1.0 - c1)
}

/// Which guidance function `f_t` steers the high-resolution denoiser.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum GuidanceMode {
    None,
    #[default]
    FrequencyModulation,
    SkipResidual {
        alpha_exp: f64,
    },
}

impl GuidanceMode {
    pub fn label(&self) -> &'static str {
        match self {
            GuidanceMode::None => "none",
            GuidanceMode::FrequencyModulation => "fm",
            GuidanceMode::SkipResidual { .. } => "skip",
        }
    }

    /// Applies `f_t(z̃_t, z_t)` for this mode.
    pub fn apply(
        &self,
        z_denoised: &LatentGrid,
        z_diffused: &LatentGrid,
        t: usize,
        params: &FilterParams,
    ) -> Result<LatentGrid> {
        match *self {
            GuidanceMode::None => Ok(z_denoised.clone()),
            GuidanceMode::FrequencyModulation => {
                fm_mix_lowpass(z_denoised, z_diffused, &make_filter(params, t)?)
            }
            GuidanceMode::SkipResidual { alpha_exp } => {
                skip_residual_mix(z_denoised, z_diffused, t, params.total_steps, alpha_exp)
            }
        }
    }
}

impl fmt::Display for GuidanceMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GuidanceMode::SkipResidual { alpha_exp } => write!(f, "skip:{alpha_exp}"),
            other => f.write_str(other.label()),
        }
    }
}

impl FromStr for GuidanceMode {
    type Err = Error;

    /// Accepts `none`, `fm`, `skip` or `skip:<alpha_exp>`.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "fm" => Ok(Self::FrequencyModulation),
            "skip" => Ok(Self::SkipResidual { alpha_exp: 1.0 }),
            _ => {
                let exp = s
                    .strip_prefix("skip:")
                    .and_then(|e| e.parse::<f64>().ok())
                    .ok_or_else(|| Error::Parameter(format!("unknown guidance {s:?}")))?;
                Ok(Self::SkipResidual { alpha_exp: exp })
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::normal_grid;

    fn params(h: usize, w: usize) -> FilterParams {
        FilterParams::new(0.5, 1000, h, w).unwrap()
    }

    #[test]
    fn filter_at_t_total_is_all_ones() {
        let f = make_filter(&params(8, 8), 1000).unwrap();
        assert_eq!(f.inside_value(), 1.0);
        assert!(f.mask().iter().all(|&v| v == 1.0));
        assert_eq!(f.inside_count(), 0);
    }

    #[test]
    fn filter_at_zero_blocks_central_rectangle() {
        let f = make_filter(&params(8, 8), 0).unwrap();
        // half extents 2: |d| < 2 selects offsets -1..=1 around (4, 4).
        for y in 0..8 {
            for x in 0..8 {
                let inside = (3..=5).contains(&y) && (3..=5).contains(&x);
                assert_eq!(f.mask()[y * 8 + x], if inside { 0.0 } else { 1.0 }, "({y},{x})");
            }
        }
        assert_eq!(f.inside_count(), 9);
    }

    #[test]
    fn filter_half_way_selects_single_bin() {
        let f = make_filter(&params(8, 8), 500).unwrap();
        assert_eq!(f.inside_value(), 0.5);
        assert_eq!(f.rect_half_h(), 1.0);
        let halves: Vec<_> = f.mask().iter().enumerate().filter(|(_, &v)| v == 0.5).collect();
        assert_eq!(halves.len(), 1);
        assert_eq!(halves[0].0, 4 * 8 + 4);
        assert_eq!(f.mask().iter().filter(|&&v| v == 1.0).count(), 63);
    }

    #[test]
    fn filter_step_out_of_range() {
        assert!(make_filter(&params(8, 8), 1001).is_err());
        assert!(FilterParams::new(1.5, 10, 4, 4).is_err());
        assert!(FilterParams::new(0.5, 0, 4, 4).is_err());
    }

    #[test]
    fn unit_mask_keeps_denoised() {
        let a = normal_grid(1, 0, 2, 8, 8);
        let b = normal_grid(2, 0, 2, 8, 8);
        let f = HighPassFilter::constant(8, 8, 1.0).unwrap();
        assert!(fm_mix(&a, &b, &f).unwrap().max_abs_diff(&a) <= 1e-12 * a.max_abs());
        let zero = HighPassFilter::constant(8, 8, 0.0).unwrap();
        assert!(fm_mix(&a, &b, &zero).unwrap().max_abs_diff(&b) <= 1e-12 * b.max_abs());
    }

    #[test]
    fn kernel_extremes() {
        let ones = HighPassFilter::constant(6, 5, 1.0).unwrap();
        assert!(filter_to_kernel(&ones).unwrap().data().iter().all(|&v| v == 0.0));
        let zeros = HighPassFilter::constant(6, 5, 0.0).unwrap();
        let k = filter_to_kernel(&zeros).unwrap();
        for (i, &v) in k.data().iter().enumerate() {
            let want = if i == 0 { 1.0 } else { 0.0 };
            assert!((v - want).abs() < 1e-15);
        }
    }

    #[test]
    fn kernel_sum_is_dc_weight() {
        let f = make_filter(&params(8, 8), 500).unwrap();
        let k = filter_to_kernel(&f).unwrap();
        let sum: f64 = k.data().iter().sum();
        assert!((sum - 0.5).abs() < 1e-14, "{sum}");
    }

    #[test]
    fn conv_mix_extremes() {
        let a = normal_grid(3, 0, 1, 8, 8);
        let b = normal_grid(4, 0, 1, 8, 8);
        let f = make_filter(&params(8, 8), 250).unwrap();
        assert_eq!(fm_mix_conv(&a, &a, &f).unwrap(), a);
        let zero = HighPassFilter::constant(8, 8, 0.0).unwrap();
        assert!(fm_mix_conv(&a, &b, &zero).unwrap().max_abs_diff(&b) < 1e-14);
    }

    #[test]
    fn spectral_and_spatial_mix_agree() {
        for &(h, w) in &[(8, 8), (9, 6), (33, 17)] {
            let a = normal_grid(5, h as u64, 2, h, w);
            let b = normal_grid(6, w as u64, 2, h, w);
            for t in [0, 250, 500, 750, 1000] {
                let f = make_filter(&params(h, w), t).unwrap();
                let s = fm_mix(&a, &b, &f).unwrap();
                let c = fm_mix_conv(&a, &b, &f).unwrap();
                let scale = a.max_abs().max(b.max_abs());
                assert!(s.max_abs_diff(&c) <= 1e-9 * scale, "{h}x{w} t={t}");
            }
        }
    }

    #[test]
    fn lowpass_mix_matches_spectral_mix() {
        for &(h, w, c) in &[(8, 8, 0.5), (9, 6, 0.5), (33, 17, 0.5), (16, 10, 1.0), (5, 12, 0.3), (1, 8, 0.5)] {
            let a = normal_grid(15, h as u64, 3, h, w);
            let b = normal_grid(16, w as u64, 3, h, w);
            let p = FilterParams::new(c, 1000, h, w).unwrap();
            for t in [0, 1, 333, 500, 999, 1000] {
                let f = make_filter(&p, t).unwrap();
                let want = fm_mix(&a, &b, &f).unwrap();
                let got = fm_mix_lowpass(&a, &b, &f).unwrap();
                assert!(got.max_abs_diff(&want) <= 1e-12 * 4.0, "{h}x{w} c={c} t={t}");
            }
        }
        let mask: Vec<f64> = (0..48).map(|i| (i % 7) as f64 / 6.0).collect();
        let mut sym = mask.clone();
        // Symmetrize in unshifted layout so the product stays Hermitian.
        let un = ifftshift_real(&mask, 6, 8);
        let mut un_sym = un.clone();
        for y in 0..6 {
            for x in 0..8 {
                let m = ((6 - y) % 6) * 8 + (8 - x) % 8;
                un_sym[y * 8 + x] = 0.5 * (un[y * 8 + x] + un[m]);
            }
        }
        let back = crate::fft::fftshift(&SpectralGrid::new(
            1,
            6,
            8,
            un_sym.iter().map(|&v| Complex64::new(v, 0.0)).collect(),
            false,
        )
        .unwrap());
        for (d, v) in sym.iter_mut().zip(back.data()) {
            *d = v.re;
        }
        let f = HighPassFilter::from_mask(6, 8, sym).unwrap();
        let a = normal_grid(17, 0, 2, 6, 8);
        let b = normal_grid(18, 0, 2, 6, 8);
        let want = fm_mix(&a, &b, &f).unwrap();
        assert!(fm_mix_lowpass(&a, &b, &f).unwrap().max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn mismatched_filter_rejected() {
        let a = LatentGrid::zeros(1, 8, 8).unwrap();
        let f = make_filter(&params(8, 4), 0).unwrap();
        assert!(matches!(fm_mix(&a, &a, &f), Err(Error::Size(_))));
        assert!(matches!(fm_mix_conv(&a, &a, &f), Err(Error::Size(_))));
    }

    #[test]
    fn skip_residual_endpoints() {
        let a = normal_grid(7, 0, 1, 4, 4);
        let b = normal_grid(8, 0, 1, 4, 4);
        assert_eq!(skip_residual_mix(&a, &b, 100, 100, 1.0).unwrap(), b);
        assert_eq!(skip_residual_mix(&a, &b, 0, 100, 1.0).unwrap(), a);
        let mid = skip_residual_mix(&a, &b, 50, 100, 1.0).unwrap();
        let want = a.axpby(0.5, &b, 0.5).unwrap();
        assert!(mid.max_abs_diff(&want) < 1e-15);
        assert!(skip_residual_mix(&a, &b, 101, 100, 1.0).is_err());
    }

    #[test]
    fn guidance_parses() {
        assert_eq!("fm".parse::<GuidanceMode>().unwrap(), GuidanceMode::FrequencyModulation);
        assert_eq!("none".parse::<GuidanceMode>().unwrap(), GuidanceMode::None);
        assert_eq!(
            "skip:3".parse::<GuidanceMode>().unwrap(),
            GuidanceMode::SkipResidual { alpha_exp: 3.0 }
        );
        assert!("bogus".parse::<GuidanceMode>().is_err());
    }
}
