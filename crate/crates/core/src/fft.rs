//! Exact-size 2D DFT/IDFT, spectrum shifts and circular convolution.
//!
//! Forward transforms are unnormalized; the inverse carries the `1/(h·w)`
//! factor. Planning is delegated to `rustfft`, with one planner per thread.

use std::cell::RefCell;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::grid::{LatentGrid, SpectralGrid};

/// Imaginary residue allowed by [`idft2`], relative to the largest real magnitude.
pub const IMAG_RESIDUE_TOL: f64 = 1e-9;

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn plan(len: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
    PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        if inverse {
            p.plan_fft_inverse(len)
        } else {
            p.plan_fft_forward(len)
        }
    })
}

/// Unnormalized in-place 2D transform of `planes` stacked `h×w` planes.
fn transform_planes(buf: &mut [Complex64], h: usize, w: usize, inverse: bool) {
    if w > 1 {
        plan(w, inverse).process(buf);
    }
    if h > 1 {
        let col_fft = plan(h, inverse);
        let mut scratch = vec![Complex64::default(); h * w];
        for plane in buf.chunks_exact_mut(h * w) {
            for y in 0..h {
                for x in 0..w {
                    scratch[x * h + y] = plane[y * w + x];
                }
            }
            col_fft.process(&mut scratch);
            for x in 0..w {
                for y in 0..h {
                    plane[y * w + x] = scratch[x * h + y];
                }
            }
        }
    }
}

/// Row DFTs of a real `h×w` plane, two rows per complex transform.
fn real_rows_forward(src: &[f64], out: &mut [Complex64], h: usize, w: usize) {
    let fft = plan(w, false);
    let mut z = vec![Complex64::default(); w];
    let mut y = 0;
    while y < h {
        if y + 1 < h {
            let (a, b) = (&src[y * w..(y + 1) * w], &src[(y + 1) * w..(y + 2) * w]);
            for ((zv, &re), &im) in z.iter_mut().zip(a).zip(b) {
                *zv = Complex64::new(re, im);
            }
            fft.process(&mut z);
            for k in 0..w {
                let (zk, zc) = (z[k], z[(w - k) % w].conj());
                out[y * w + k] = (zk + zc) * 0.5;
                out[(y + 1) * w + k] = (zk - zc) * Complex64::new(0.0, -0.5);
            }
            y += 2;
        } else {
            let row = &mut out[y * w..(y + 1) * w];
            for (o, &v) in row.iter_mut().zip(&src[y * w..(y + 1) * w]) {
                *o = Complex64::new(v, 0.0);
            }
            fft.process(row);
            y += 1;
        }
    }
}

/// Column transforms of `buf` for the listed columns only.
fn columns(buf: &mut [Complex64], h: usize, w: usize, cols: impl Iterator<Item = usize>, inverse: bool) {
    if h == 1 {
        return;
    }
    let fft = plan(h, inverse);
    let mut col = vec![Complex64::default(); h];
    for kx in cols {
        for (y, v) in col.iter_mut().enumerate() {
            *v = buf[y * w + kx];
        }
        fft.process(&mut col);
        for (y, v) in col.iter().enumerate() {
            buf[y * w + kx] = *v;
        }
    }
}

/// Forward 2D DFT of a real plane. Only columns `0..=w/2` are transformed;
/// the rest follow from `X[−k] = conj(X[k])`.
fn real_plane_forward(src: &[f64], out: &mut [Complex64], h: usize, w: usize) {
    real_rows_forward(src, out, h, w);
    columns(out, h, w, 0..=w / 2, false);
    for ky in 0..h {
        for kx in w / 2 + 1..w {
            out[ky * w + kx] = out[((h - ky) % h) * w + (w - kx)].conj();
        }
    }
}

/// Unnormalized inverse row transforms for rows whose spectra are
/// Hermitian; only entries `0..=w/2` of each row are read. Two rows share
/// one complex transform.
fn hermitian_rows_inverse(buf: &[Complex64], out: &mut [f64], h: usize, w: usize, norm: f64) {
    let fft = plan(w, true);
    let mut z = vec![Complex64::default(); w];
    let half = |row: &[Complex64], k: usize| {
        if k <= w / 2 {
            row[k]
        } else {
            row[w - k].conj()
        }
    };
    let mut y = 0;
    while y < h {
        let a = &buf[y * w..(y + 1) * w];
        if y + 1 < h {
            let b = &buf[(y + 1) * w..(y + 2) * w];
            for (k, zv) in z.iter_mut().enumerate() {
                let (ya, yb) = (half(a, k), half(b, k));
                *zv = ya + Complex64::new(-yb.im, yb.re);
            }
            fft.process(&mut z);
            for (x, zv) in z.iter().enumerate() {
                out[y * w + x] = zv.re * norm;
                out[(y + 1) * w + x] = zv.im * norm;
            }
            y += 2;
        } else {
            for (k, zv) in z.iter_mut().enumerate() {
                *zv = half(a, k);
            }
            fft.process(&mut z);
            for (x, zv) in z.iter().enumerate() {
                out[y * w + x] = zv.re * norm;
            }
            y += 1;
        }
    }
}

/// Inverse 2D DFT of a Hermitian plane straight to real values.
fn hermitian_plane_inverse(spec: &[Complex64], out: &mut [f64], h: usize, w: usize) {
    let mut buf = spec.to_vec();
    columns(&mut buf, h, w, 0..=w / 2, true);
    hermitian_rows_inverse(&buf, out, h, w, 1.0 / (h * w) as f64);
}

/// Per-channel forward 2D DFT, unshifted layout.
pub fn dft2(x: &LatentGrid) -> SpectralGrid {
    let (c, h, w) = x.dims();
    let n = h * w;
    let mut buf = vec![Complex64::default(); c * n];
    for (src, dst) in x.data().chunks_exact(n).zip(buf.chunks_exact_mut(n)) {
        real_plane_forward(src, dst, h, w);
    }
    SpectralGrid::new(c, h, w, buf, false).expect("dims come from a valid grid")
}

/// Inverse transform with `1/(h·w)` scaling, returning the complex result.
pub(crate) fn idft2_complex(spec: &SpectralGrid) -> Vec<Complex64> {
    let (_, h, w) = spec.dims();
    let mut buf = spec.data().to_vec();
    transform_planes(&mut buf, h, w, true);
    let norm = 1.0 / (h * w) as f64;
    for v in &mut buf {
        *v *= norm;
    }
    buf
}

/// Inverse 2D DFT back to a real grid.
///
/// The imaginary part is discarded only when its largest magnitude is within
/// [`IMAG_RESIDUE_TOL`] of the largest real magnitude; anything larger means
/// the spectrum was not conjugate-symmetric.
pub fn idft2(spec: &SpectralGrid) -> Result<LatentGrid> {
    if spec.is_shifted() {
        return Err(Error::Parameter(
            "idft2 expects an unshifted spectrum; call ifftshift first".into(),
        ));
    }
    let (c, h, w) = spec.dims();
    let buf = idft2_complex(spec);
    let (max_re, max_im) = buf.iter().fold((0.0f64, 0.0f64), |(r, i), v| {
        (r.max(v.re.abs()), i.max(v.im.abs()))
    });
    let limit = IMAG_RESIDUE_TOL * max_re;
    if max_im > limit {
        return Err(Error::SpectralAsymmetry {
            residue: max_im,
            limit,
        });
    }
    LatentGrid::new(c, h, w, buf.into_iter().map(|v| v.re).collect())
}

/// Inverse transform of a spectrum that is Hermitian by construction
/// (products of transforms of real grids). Only the non-negative half of
/// each row is read, so the result is real without a residue check.
pub(crate) fn idft2_real(spec: &SpectralGrid) -> Result<LatentGrid> {
    let (c, h, w) = spec.dims();
    let n = h * w;
    let mut data = vec![0.0; c * n];
    for (src, dst) in spec.data().chunks_exact(n).zip(data.chunks_exact_mut(n)) {
        hermitian_plane_inverse(src, dst, h, w);
    }
    LatentGrid::new(c, h, w, data)
}

fn roll_planes<T: Copy>(data: &[T], h: usize, w: usize, dy: usize, dx: usize) -> Vec<T> {
    let mut out = data.to_vec();
    for (src, dst) in data.chunks_exact(h * w).zip(out.chunks_exact_mut(h * w)) {
        for y in 0..h {
            let ny = (y + dy) % h;
            for x in 0..w {
                dst[ny * w + (x + dx) % w] = src[y * w + x];
            }
        }
    }
    out
}

/// Moves the DC bin from `(0, 0)` to `(h/2, w/2)` (floor division).
pub fn fftshift(spec: &SpectralGrid) -> SpectralGrid {
    let (c, h, w) = spec.dims();
    let data = roll_planes(spec.data(), h, w, h / 2, w / 2);
    SpectralGrid::new(c, h, w, data, !spec.is_shifted()).expect("same dims")
}

/// Exact inverse of [`fftshift`], including odd sizes.
pub fn ifftshift(spec: &SpectralGrid) -> SpectralGrid {
    let (c, h, w) = spec.dims();
    let data = roll_planes(spec.data(), h, w, h - h / 2, w - w / 2);
    SpectralGrid::new(c, h, w, data, !spec.is_shifted()).expect("same dims")
}

/// Moves a DC-centered real `h×w` mask back to the unshifted layout.
pub(crate) fn ifftshift_real(mask: &[f64], h: usize, w: usize) -> Vec<f64> {
    roll_planes(mask, h, w, h - h / 2, w - w / 2)
}

/// `IDFT(gain·1_B ⊙ DFT(x))` for a rectangular band `B = rows × cols` of
/// unshifted bins. Only the lines crossing the band are transformed, along
/// whichever axis order touches fewer of them. `B` must be symmetric under
/// `k → −k` for the result to be real; the imaginary part is dropped.
pub(crate) fn band_project(x: &LatentGrid, rows: &[usize], cols: &[usize], gain: f64) -> LatentGrid {
    let (c, h, w) = x.dims();
    let n = h * w;
    let mut out = vec![0.0; c * n];
    let rows_first = h + cols.len() <= w + rows.len();
    let mut tsrc = Vec::new();
    let mut tdst = Vec::new();
    for (src, dst) in x.data().chunks_exact(n).zip(out.chunks_exact_mut(n)) {
        if rows_first {
            band_plane(src, dst, h, w, rows, cols, gain);
        } else {
            tsrc.clear();
            tsrc.extend((0..n).map(|i| src[(i % h) * w + i / h]));
            tdst.resize(n, 0.0);
            band_plane(&tsrc, &mut tdst, w, h, cols, rows, gain);
            for (i, v) in tdst.iter().enumerate() {
                dst[(i % h) * w + i / h] = *v;
            }
        }
    }
    LatentGrid::from_raw(c, h, w, out)
}

/// Rows-first band projection of one `h×w` plane. The band is symmetric,
/// so only its columns in `0..=w/2` are transformed.
fn band_plane(src: &[f64], dst: &mut [f64], h: usize, w: usize, rows: &[usize], cols: &[usize], gain: f64) {
    let mut buf = vec![Complex64::default(); h * w];
    real_rows_forward(src, &mut buf, h, w);
    let half_cols: Vec<usize> = cols.iter().copied().filter(|&k| k <= w / 2).collect();
    columns(&mut buf, h, w, half_cols.iter().copied(), false);

    let mut keep = vec![false; h];
    for &r in rows {
        keep[r] = true;
    }
    let mut back = vec![Complex64::default(); h * w];
    for &kx in &half_cols {
        for ((y, &k), b) in keep.iter().enumerate().zip(back.iter_mut().skip(kx).step_by(w)) {
            if k {
                *b = buf[y * w + kx] * gain;
            }
        }
    }
    columns(&mut back, h, w, half_cols.iter().copied(), true);
    hermitian_rows_inverse(&back, dst, h, w, 1.0 / (h * w) as f64);
}

/// Per-channel circular convolution of `x` with a single-channel kernel of
/// the same spatial size, computed as a product of transforms.
pub fn circular_conv(x: &LatentGrid, kernel: &LatentGrid) -> Result<LatentGrid> {
    if kernel.channels() != 1 || kernel.height() != x.height() || kernel.width() != x.width() {
        return Err(Error::Size(format!(
            "kernel {:?} must be 1x{}x{}",
            kernel.dims(),
            x.height(),
            x.width()
        )));
    }
    let kspec = dft2(kernel);
    let mut xspec = dft2(x);
    let n = x.plane_len();
    for plane in xspec.data_mut().chunks_exact_mut(n) {
        for (v, k) in plane.iter_mut().zip(kspec.data()) {
            *v *= k;
        }
    }
    idft2_real(&xspec)
}
