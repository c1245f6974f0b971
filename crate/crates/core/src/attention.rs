//! Self-attention with an exposed attention matrix, upsampling of attention
//! matrices across resolutions, and the native/high-resolution blend
//! `M̄ = λ·U(M_native, s) + (1−λ)·M_high`.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::resample::{axis_taps, lerp, Alignment, ResampleMode};

pub const DEFAULT_LAMBDA: f64 = 0.7;
pub const DEFAULT_TOKEN_CAP: usize = 4096;
pub const ROW_SUM_TOL: f64 = 1e-6;

/// Dense row-major real matrix (tokens × features).
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }
}

/// A row-stochastic `N×N` attention matrix over an `h×w` token grid.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMatrix {
    spatial_h: usize,
    spatial_w: usize,
    data: Vec<f64>,
}

impl AttentionMatrix {
    /// Validates shape, non-negativity and unit row sums (within [`ROW_SUM_TOL`]).
    pub fn new(spatial_h: usize, spatial_w: usize, data: Vec<f64>) -> Result<Self> {
        let n = spatial_h * spatial_w;
        if n == 0 || data.len() != n * n {
            return Err(Error::Shape(format!(
                "{} entries for a {spatial_h}x{spatial_w} token grid",
                data.len()
            )));
        }
        for (i, row) in data.chunks_exact(n).enumerate() {
            if row.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
                return Err(Error::Numeric(format!("row {i} has a negative or non-finite entry")));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::Numeric(format!("row {i} sums to {s}")));
            }
        }
        Ok(Self {
            spatial_h,
            spatial_w,
            data,
        })
    }

    pub fn uniform(spatial_h: usize, spatial_w: usize) -> Result<Self> {
        let n = spatial_h * spatial_w;
        Self::new(spatial_h, spatial_w, vec![1.0 / n as f64; n * n])
    }

    pub(crate) fn from_raw(spatial_h: usize, spatial_w: usize, data: Vec<f64>) -> Self {
        Self {
            spatial_h,
            spatial_w,
            data,
        }
    }

    pub fn tokens(&self) -> usize {
        self.spatial_h * self.spatial_w
    }

    pub fn spatial_h(&self) -> usize {
        self.spatial_h
    }

    pub fn spatial_w(&self) -> usize {
        self.spatial_w
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let n = self.tokens();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.tokens() + j]
    }

    /// Largest `|row sum − 1|`.
    pub fn max_row_sum_error(&self) -> f64 {
        self.data
            .chunks_exact(self.tokens())
            .map(|r| (r.iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    /// `self · v` for a `N×d` value matrix.
    pub fn apply(&self, v: &Matrix) -> Result<Matrix> {
        let n = self.tokens();
        if v.rows() != n {
            return Err(Error::Shape(format!("{n}-token attention applied to {} rows", v.rows())));
        }
        let d = v.cols();
        let mut out = vec![0.0; n * d];
        for (i, orow) in out.chunks_exact_mut(d).enumerate() {
            for (j, &a) in self.row(i).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, &x) in orow.iter_mut().zip(v.row(j)) {
                    *o += a * x;
                }
            }
        }
        Matrix::new(n, d, out)
    }
}

/// Row-wise `softmax(Q·Kᵀ/√d)` over an `spatial_h × spatial_w` token grid.
pub fn attention_matrix(q: &Matrix, k: &Matrix, spatial_h: usize, spatial_w: usize) -> Result<AttentionMatrix> {
    let n = spatial_h * spatial_w;
    let d = q.cols();
    if d == 0 || k.cols() != d {
        return Err(Error::Shape(format!(
            "query/key feature dims {} and {} must match and be >= 1",
            d,
            k.cols()
        )));
    }
    if q.rows() != n || k.rows() != n {
        return Err(Error::Shape(format!(
            "token grid {spatial_h}x{spatial_w} needs {n} rows, got q={} k={}",
            q.rows(),
            k.rows()
        )));
    }
    let scale = 1.0 / (d as f64).sqrt();
    let mut m = vec![0.0; n * n];
    for (i, row) in m.chunks_exact_mut(n).enumerate() {
        let qi = q.row(i);
        for (j, out) in row.iter_mut().enumerate() {
            *out = qi.iter().zip(k.row(j)).map(|(a, b)| a * b).sum::<f64>() * scale;
        }
        if row.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric(format!("non-finite attention logit in row {i}")));
        }
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            sum += *x;
        }
        for x in row.iter_mut() {
            *x /= sum;
        }
    }
    Ok(AttentionMatrix::from_raw(spatial_h, spatial_w, m))
}

/// `softmax(Q·Kᵀ/√d)·V`, returning the output and the attention matrix.
pub fn softmax_attention(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    spatial_h: usize,
    spatial_w: usize,
) -> Result<(Matrix, AttentionMatrix)> {
    let matrix = attention_matrix(q, k, spatial_h, spatial_w)?;
    let out = matrix.apply(v)?;
    Ok((out, matrix))
}

/// Upsamples an attention matrix by integer per-axis factors.
///
/// Rows are viewed as `(qh, qw, kh, kw)`; both the query and key spatial
/// pairs are bilinearly upsampled (half-pixel alignment), then every row is
/// renormalized to sum to one. `token_cap` bounds the output token count.
pub fn upsample_attention_axes(
    m: &AttentionMatrix,
    scale_h: usize,
    scale_w: usize,
    token_cap: usize,
) -> Result<AttentionMatrix> {
    if scale_h == 0 || scale_w == 0 {
        return Err(Error::Parameter("attention scale must be >= 1".into()));
    }
    let (h, w) = (m.spatial_h, m.spatial_w);
    let (oh, ow) = (h * scale_h, w * scale_w);
    let n_out = oh * ow;
    if n_out > token_cap {
        return Err(Error::Capacity {
            what: "attention tokens",
            requested: n_out,
            cap: token_cap,
        });
    }
    if scale_h == 1 && scale_w == 1 {
        return Ok(m.clone());
    }
    let n = h * w;
    let ty = axis_taps(h, oh, ResampleMode::Bilinear, Alignment::HalfPixel);
    let tx = axis_taps(w, ow, ResampleMode::Bilinear, Alignment::HalfPixel);

    // Key axes first: each source row becomes an oh×ow image.
    let mut key_up = vec![0.0; n * n_out];
    for (src, dst) in m.data.chunks_exact(n).zip(key_up.chunks_exact_mut(n_out)) {
        let mut o = 0;
        for &(y0, y1, fy) in &ty {
            for &(x0, x1, fx) in &tx {
                let top = lerp(src[y0 * w + x0], src[y0 * w + x1], fx);
                let bot = lerp(src[y1 * w + x0], src[y1 * w + x1], fx);
                dst[o] = lerp(top, bot, fy);
                o += 1;
            }
        }
    }

    // Then query axes: interpolate between upsampled source rows.
    let mut out = vec![0.0; n_out * n_out];
    let mut orows = out.chunks_exact_mut(n_out);
    for &(y0, y1, fy) in &ty {
        for &(x0, x1, fx) in &tx {
            let dst = orows.next().expect("row count");
            let r = |y: usize, x: usize| &key_up[(y * w + x) * n_out..(y * w + x + 1) * n_out];
            let (a, b, c, d) = (r(y0, x0), r(y0, x1), r(y1, x0), r(y1, x1));
            let mut sum = 0.0;
            for j in 0..n_out {
                let v = lerp(lerp(a[j], b[j], fx), lerp(c[j], d[j], fx), fy);
                dst[j] = v;
                sum += v;
            }
            for v in dst.iter_mut() {
                *v /= sum;
            }
        }
    }
    AttentionMatrix::new(oh, ow, out)
}

/// Upsamples by the same integer factor on both axes with the default token cap.
pub fn upsample_attention(m: &AttentionMatrix, s: usize) -> Result<AttentionMatrix> {
    upsample_attention_axes(m, s, s, DEFAULT_TOKEN_CAP)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AttnMode {
    Off,
    #[default]
    Modulate,
    /// Replace the high-resolution matrix outright (λ = 1).
    Swap,
}

impl fmt::Display for AttnMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttnMode::Off => "off",
            AttnMode::Modulate => "modulate",
            AttnMode::Swap => "swap",
        })
    }
}

impl FromStr for AttnMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "off" => Ok(Self::Off),
            "modulate" | "am" => Ok(Self::Modulate),
            "swap" => Ok(Self::Swap),
            _ => Err(Error::Parameter(format!("unknown attention mode {s:?}"))),
        }
    }
}

/// Attention-modulation settings for the high-resolution pass.
#[derive(Debug, Clone, PartialEq)]
pub struct AttnModConfig {
    lambda: f64,
    pub mode: AttnMode,
    pub target_blocks: BTreeSet<String>,
    /// Inclusive timestep range where modulation applies; `None` means every step.
    pub step_range: Option<(usize, usize)>,
    pub token_cap: usize,
}

impl Default for AttnModConfig {
    fn default() -> Self {
        Self {
            lambda: DEFAULT_LAMBDA,
            mode: AttnMode::Modulate,
            target_blocks: BTreeSet::from(["up_block_0".to_string()]),
            step_range: None,
            token_cap: DEFAULT_TOKEN_CAP,
        }
    }
}

impl AttnModConfig {
    pub fn off() -> Self {
        Self {
            mode: AttnMode::Off,
            ..Self::default()
        }
    }

    pub fn with_lambda(mut self, lambda: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&lambda) {
            return Err(Error::Parameter(format!("lambda {lambda} outside [0, 1]")));
        }
        self.lambda = lambda;
        Ok(self)
    }

    pub fn with_mode(mut self, mode: AttnMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn with_blocks<I, S>(mut self, blocks: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.target_blocks = blocks.into_iter().map(Into::into).collect();
        self
    }

    /// The configured λ (ignored in swap mode).
    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    /// λ actually used when blending: 1 for swap, 0 for off.
    pub fn effective_lambda(&self) -> f64 {
        match self.mode {
            AttnMode::Off => 0.0,
            AttnMode::Modulate => self.lambda,
            AttnMode::Swap => 1.0,
        }
    }

    /// Whether a block at timestep `t` gets its attention replaced.
    pub fn targets(&self, block: &str, t: usize) -> bool {
        self.mode != AttnMode::Off
            && self.target_blocks.contains(block)
            && self.step_range.map_or(true, |(lo, hi)| (lo..=hi).contains(&t))
    }
}

/// `λ·M_native_up + (1−λ)·M_high`, with λ taken from `cfg`.
pub fn modulate_attention(
    native_up: &AttentionMatrix,
    high: &AttentionMatrix,
    cfg: &AttnModConfig,
) -> Result<AttentionMatrix> {
    if native_up.spatial_h != high.spatial_h || native_up.spatial_w != high.spatial_w {
        return Err(Error::Shape(format!(
            "native {}x{} vs high {}x{} token grids",
            native_up.spatial_h, native_up.spatial_w, high.spatial_h, high.spatial_w
        )));
    }
    if cfg.mode == AttnMode::Off {
        return Ok(high.clone());
    }
    let lambda = cfg.effective_lambda();
    let data = native_up
        .data
        .iter()
        .zip(&high.data)
        .map(|(&a, &b)| lambda * a + (1.0 - lambda) * b)
        .collect();
    Ok(AttentionMatrix::from_raw(high.spatial_h, high.spatial_w, data))
}
