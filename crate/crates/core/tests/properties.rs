mod common;

use common::*;
use famdiff_core::attention::{modulate_attention, upsample_attention_axes, DEFAULT_TOKEN_CAP};
use famdiff_core::fft::{circular_conv, dft2, fftshift, idft2, ifftshift};
use famdiff_core::freq::{fm_mix, fm_mix_conv, fm_mix_lowpass, make_filter, FilterParams, GuidanceMode};
use famdiff_core::{AttentionMatrix, AttnModConfig, HighPassFilter, LatentGrid, NoiseSchedule, SpectralGrid};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const T: usize = 1000;

fn grid(seed: u64, c: usize, h: usize, w: usize) -> LatentGrid {
    random_grid(seed, c, h, w)
}

fn inf_norm(x: &[f64]) -> f64 {
    x.iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn roundtrip(seed in any::<u64>(), c in 1usize..3, h in 1usize..20, w in 1usize..20) {
        let x = grid(seed, c, h, w);
        let back = idft2(&dft2(&x)).unwrap();
        prop_assert!(back.max_abs_diff(&x) <= 1e-12 * inf_norm(x.data()));
    }

    #[test]
    fn parseval(seed in any::<u64>(), h in 1usize..20, w in 1usize..20) {
        let x = grid(seed, 1, h, w);
        let s: f64 = dft2(&x).data().iter().map(|v| v.norm_sqr()).sum::<f64>() / (h * w) as f64;
        prop_assert!((x.sum_sq() - s).abs() <= 1e-9 * x.sum_sq());
    }

    #[test]
    fn fft_matches_naive_dft(seed in any::<u64>(), h in 1usize..12, w in 1usize..12) {
        let x = grid(seed, 1, h, w);
        let naive = naive_dft2(x.data(), h, w);
        let fast = dft2(&x);
        let scale = naive.iter().fold(0.0f64, |m, v| m.max(v.0.hypot(v.1)));
        for (a, b) in naive.iter().zip(fast.data()) {
            prop_assert!((a.0 - b.re).hypot(a.1 - b.im) <= 1e-10 * scale);
        }
    }

    #[test]
    fn convolution_theorem_three_paths(seed in any::<u64>(), h in 1usize..12, w in 1usize..12) {
        let x = grid(seed, 1, h, w);
        let k = grid(seed ^ 0xabcd, 1, h, w);
        let fast = circular_conv(&x, &k).unwrap();
        let naive = naive_circular_conv(x.data(), k.data(), h, w);
        let (xs, ks) = (dft2(&x), dft2(&k));
        let prod: Vec<_> = xs.data().iter().zip(ks.data()).map(|(a, b)| a * b).collect();
        let spectral = idft2(&SpectralGrid::new(1, h, w, prod, false).unwrap()).unwrap();
        prop_assert!(rel_diff(fast.data(), &naive) <= 1e-10);
        prop_assert!(rel_diff(spectral.data(), &naive) <= 1e-10);
    }

    #[test]
    fn shift_pair_is_inverse(seed in any::<u64>(), h in 1usize..10, w in 1usize..10) {
        let s = dft2(&grid(seed, 1, h, w));
        let back = ifftshift(&fftshift(&s));
        prop_assert_eq!(back.data(), s.data());
        prop_assert!(!back.is_shifted());
    }

    #[test]
    fn fm_paths_agree(seed in any::<u64>(), h in 1usize..24, w in 1usize..24, t in 0usize..=T, c in 0.0f64..=1.0) {
        let a = grid(seed, 2, h, w);
        let b = grid(seed.wrapping_add(1), 2, h, w);
        let f = make_filter(&FilterParams::new(c, T, h, w).unwrap(), t).unwrap();
        let bound = 1e-9 * inf_norm(a.data()).max(inf_norm(b.data()));
        let spectral = fm_mix(&a, &b, &f).unwrap();
        prop_assert!(fm_mix_conv(&a, &b, &f).unwrap().max_abs_diff(&spectral) <= bound);
        prop_assert!(fm_mix_lowpass(&a, &b, &f).unwrap().max_abs_diff(&spectral) <= bound);
    }

    #[test]
    fn fm_is_jointly_linear(seed in any::<u64>(), h in 2usize..16, w in 2usize..16, t in 0usize..=T,
                            p in -3.0f64..3.0, q in -3.0f64..3.0) {
        let params = FilterParams::new(0.5, T, h, w).unwrap();
        let (z, zd, v, vd) = (grid(seed, 1, h, w), grid(seed ^ 1, 1, h, w), grid(seed ^ 2, 1, h, w), grid(seed ^ 3, 1, h, w));
        let f = |x: &LatentGrid, y: &LatentGrid| GuidanceMode::FrequencyModulation.apply(x, y, t, &params).unwrap();
        let lhs = f(&z.axpby(p, &v, q).unwrap(), &zd.axpby(p, &vd, q).unwrap());
        let rhs = f(&z, &zd).axpby(p, &f(&v, &vd), q).unwrap();
        prop_assert!(lhs.max_abs_diff(&rhs) <= 1e-10 * (1.0 + inf_norm(rhs.data())));
    }

    #[test]
    fn fm_preserves_weighted_dc(seed in any::<u64>(), h in 2usize..20, w in 2usize..20, t in 0usize..T) {
        let f = make_filter(&FilterParams::new(0.5, T, h, w).unwrap(), t).unwrap();
        let (cy, cx) = (h / 2, w / 2);
        // DC sits at the shifted center; it is inside whenever any bin is.
        prop_assume!(f.mask()[cy * w + cx] < 1.0);
        let (a, b) = (grid(seed, 2, h, w), grid(seed ^ 9, 2, h, w));
        let out = fm_mix(&a, &b, &f).unwrap();
        let rho = t as f64 / T as f64;
        for ch in 0..2 {
            let expect = rho * a.channel_mean(ch) + (1.0 - rho) * b.channel_mean(ch);
            prop_assert!((out.channel_mean(ch) - expect).abs() <= 1e-10);
        }
    }

    #[test]
    fn filter_anneals(h in 1usize..40, w in 1usize..40, c in 0.0f64..=1.0, t1 in 0usize..T, dt in 1usize..200) {
        let params = FilterParams::new(c, T, h, w).unwrap();
        let t2 = (t1 + dt).min(T);
        let (a, b) = (make_filter(&params, t1).unwrap(), make_filter(&params, t2).unwrap());
        prop_assert!(b.inside_value() > a.inside_value());
        prop_assert!(b.inside_count() <= a.inside_count());
        prop_assert!(b.mask().iter().zip(a.mask()).all(|(x, y)| x >= y));
        let direct = direct_mask(h, w, c, t1, T);
        prop_assert_eq!(a.mask(), direct.as_slice());
    }

    #[test]
    fn modulation_is_closed_and_monotone(seed in any::<u64>(), sh in 1usize..5, sw in 1usize..5,
                                         l1 in 0.0f64..=1.0, l2 in 0.0f64..=1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = sh * sw;
        let a = AttentionMatrix::new(sh, sw, random_stochastic(&mut rng, n)).unwrap();
        let b = AttentionMatrix::new(sh, sw, random_stochastic(&mut rng, n)).unwrap();
        let (lo, hi) = if l1 <= l2 { (l1, l2) } else { (l2, l1) };
        let m_lo = modulate_attention(&a, &b, &AttnModConfig::default().with_lambda(lo).unwrap()).unwrap();
        let m_hi = modulate_attention(&a, &b, &AttnModConfig::default().with_lambda(hi).unwrap()).unwrap();
        prop_assert!(m_hi.max_row_sum_error() <= 1e-6);
        prop_assert!(m_hi.data().iter().all(|&v| v >= 0.0));
        for ((&x, &y), (&vlo, &vhi)) in a.data().iter().zip(b.data()).zip(m_lo.data().iter().zip(m_hi.data())) {
            // Moving λ up moves each entry from the high-res value toward the native one.
            if x >= y {
                prop_assert!(vhi >= vlo - 1e-15);
            } else {
                prop_assert!(vhi <= vlo + 1e-15);
            }
        }
    }

    #[test]
    fn shared_argmax_survives_blending(seed in any::<u64>(), n in 2usize..10, lam in 0.0f64..=1.0, peak in 0usize..10) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let peak = peak % n;
        let boost = |mut d: Vec<f64>| {
            for row in d.chunks_exact_mut(n) {
                row[peak] += 2.0;
                let s: f64 = row.iter().sum();
                row.iter_mut().for_each(|v| *v /= s);
            }
            d
        };
        let a = AttentionMatrix::new(1, n, boost(random_stochastic(&mut rng, n))).unwrap();
        let b = AttentionMatrix::new(1, n, boost(random_stochastic(&mut rng, n))).unwrap();
        let m = modulate_attention(&a, &b, &AttnModConfig::default().with_lambda(lam).unwrap()).unwrap();
        for i in 0..n {
            let row = m.row(i);
            let arg = (0..n).max_by(|&x, &y| row[x].total_cmp(&row[y])).unwrap();
            prop_assert_eq!(arg, peak);
        }
    }

    #[test]
    fn upsampled_attention_is_row_stochastic(seed in any::<u64>(), sh in 1usize..4, sw in 1usize..4,
                                             s_h in 1usize..4, s_w in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = AttentionMatrix::new(sh, sw, random_stochastic(&mut rng, sh * sw)).unwrap();
        let up = upsample_attention_axes(&m, s_h, s_w, DEFAULT_TOKEN_CAP).unwrap();
        prop_assert_eq!(up.tokens(), sh * s_h * sw * s_w);
        prop_assert!(up.max_row_sum_error() <= 1e-6);
    }
}

#[test]
fn constant_masks_are_identities() {
    let (a, b) = (grid(1, 2, 6, 7), grid(2, 2, 6, 7));
    let ones = HighPassFilter::constant(6, 7, 1.0).unwrap();
    let zeros = HighPassFilter::constant(6, 7, 0.0).unwrap();
    for mix in [fm_mix, fm_mix_conv, fm_mix_lowpass] {
        assert!(mix(&a, &b, &ones).unwrap().max_abs_diff(&a) <= 1e-12);
        assert!(mix(&a, &b, &zeros).unwrap().max_abs_diff(&b) <= 1e-12);
    }
}

#[test]
fn alphas_bar_are_decreasing_products() {
    let s = NoiseSchedule::default_linear();
    let mut prod = 1.0;
    for t in 1..=s.train_steps() {
        prod *= 1.0 - s.beta(t);
        assert!((s.alpha_bar(t) - prod).abs() <= 1e-12 * prod);
        assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
    }
}
