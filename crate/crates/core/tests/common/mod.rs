//! Reference implementations used as oracles. Everything here is written
//! from the definitions, without going through the crate's transform code.
#![allow(dead_code)]

use std::f64::consts::PI;

use famdiff_core::rng::normal_grid;
use famdiff_core::LatentGrid;
use rand::Rng;

/// Direct `O(n²)` 2D DFT of one real plane, as `(re, im)` pairs.
pub fn naive_dft2(plane: &[f64], h: usize, w: usize) -> Vec<(f64, f64)> {
    let mut out = vec![(0.0, 0.0); h * w];
    for ky in 0..h {
        for kx in 0..w {
            let (mut re, mut im) = (0.0, 0.0);
            for y in 0..h {
                for x in 0..w {
                    let ph = -2.0 * PI * ((ky * y) as f64 / h as f64 + (kx * x) as f64 / w as f64);
                    re += plane[y * w + x] * ph.cos();
                    im += plane[y * w + x] * ph.sin();
                }
            }
            out[ky * w + kx] = (re, im);
        }
    }
    out
}

/// Direct circular convolution `(x ⊛ k)[y, x] = Σ x[a, b]·k[y−a, x−b]`.
pub fn naive_circular_conv(x: &[f64], k: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for xx in 0..w {
            let mut acc = 0.0;
            for a in 0..h {
                for b in 0..w {
                    acc += x[a * w + b] * k[((y + h - a) % h) * w + (xx + w - b) % w];
                }
            }
            out[y * w + xx] = acc;
        }
    }
    out
}

/// High-pass mask value at a DC-centered bin `(y, x)`, evaluated straight
/// from the rectangle definition.
pub fn direct_mask_value(h: usize, w: usize, c: f64, t: usize, big_t: usize, y: usize, x: usize) -> f64 {
    let rho = t as f64 / big_t as f64;
    let dy = (y as f64 - (h / 2) as f64).abs();
    let dx = (x as f64 - (w / 2) as f64).abs();
    let inside = 2.0 * dy < h as f64 * c * (1.0 - rho) && 2.0 * dx < w as f64 * c * (1.0 - rho);
    if inside {
        rho
    } else {
        1.0
    }
}

pub fn direct_mask(h: usize, w: usize, c: f64, t: usize, big_t: usize) -> Vec<f64> {
    (0..h * w)
        .map(|i| direct_mask_value(h, w, c, t, big_t, i / w, i % w))
        .collect()
}

pub fn random_grid(seed: u64, c: usize, h: usize, w: usize) -> LatentGrid {
    normal_grid(seed, 77, c, h, w)
}

/// Random row-stochastic `n×n` matrix with strictly positive entries.
pub fn random_stochastic(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    let mut data: Vec<f64> = (0..n * n).map(|_| rng.random::<f64>() + 1e-3).collect();
    for row in data.chunks_exact_mut(n) {
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= s);
    }
    data
}

/// `max|a − b| / max(max|b|, tiny)`.
pub fn rel_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let num = a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    let den = b.iter().fold(0.0f64, |m, y| m.max(y.abs()));
    num / den.max(f64::MIN_POSITIVE)
}

/// Per-bin mean gain of the deterministic DDIM chain under a Gaussian prior
/// with per-pixel variance `v`: the deviation `z − √ᾱ·m` is multiplied by
/// `[√ᾱ'·√ᾱ·v + √(1−ᾱ')·√(1−ᾱ)] / (ᾱ·v + 1 − ᾱ)` at every step.
pub fn ddim_chain_gain(alpha_bars: &[f64], timesteps: &[usize], v: f64) -> f64 {
    let mut g = 1.0;
    for (i, &t) in timesteps.iter().enumerate() {
        let ab = alpha_bars[t];
        let t_prev = timesteps.get(i + 1).copied().unwrap_or(0);
        let abp = if t_prev == 0 { 1.0 } else { alpha_bars[t_prev] };
        g *= (abp.sqrt() * ab.sqrt() * v + (1.0 - abp).sqrt() * (1.0 - ab).sqrt()) / (ab * v + 1.0 - ab);
    }
    g
}
