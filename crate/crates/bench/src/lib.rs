//! Shared fixtures for the benchmarks.

use famdiff_core::freq::{make_filter, FilterParams};
use famdiff_core::pipeline::{diffuse_upsampled, generate_native_with, DiffusedSequence};
use famdiff_core::rng::normal_grid;
use famdiff_core::{AttnModConfig, Denoiser, GuidanceMode, HighPassFilter, LatentGrid, Result, RunConfig};

/// Training steps of the default schedule.
pub const TRAIN_STEPS: usize = 1000;

/// Timestep at which kernel benches build their filter.
pub const KERNEL_T: usize = 500;

/// Two random latents and the filter at [`KERNEL_T`], the inputs of every FM mix path.
pub fn mix_inputs(channels: usize, h: usize, w: usize) -> Result<(LatentGrid, LatentGrid, HighPassFilter)> {
    let a = normal_grid(7, 1, channels, h, w);
    let b = normal_grid(7, 2, channels, h, w);
    let f = make_filter(&FilterParams::new(0.5, TRAIN_STEPS, h, w)?, KERNEL_T)?;
    Ok((a, b, f))
}

/// Everything the high-resolution denoising loop needs, built once.
pub struct StepFixture {
    pub cfg: RunConfig,
    pub seq: DiffusedSequence,
    pub denoiser: Box<dyn Denoiser>,
}

impl StepFixture {
    /// Default analytic backend, attention modulation off.
    pub fn new(native: (usize, usize), scale: usize, steps: usize) -> Result<Self> {
        let cfg = RunConfig {
            native_h: native.0,
            native_w: native.1,
            scale_h: scale,
            scale_w: scale,
            steps,
            attn: AttnModConfig::off(),
            ..RunConfig::default()
        };
        cfg.validate()?;
        let native_den = cfg.denoiser.build(cfg.native_h, cfg.native_w, 1, 1)?;
        let pass = generate_native_with(&cfg, native_den.as_ref())?;
        let seq = diffuse_upsampled(&pass.latent, &cfg)?;
        let denoiser = cfg.denoiser.build(cfg.native_h, cfg.native_w, scale, scale)?;
        Ok(Self { cfg, seq, denoiser })
    }

    /// The same fixture under another guidance mode.
    pub fn config_with(&self, guidance: GuidanceMode) -> RunConfig {
        RunConfig {
            guidance,
            ..self.cfg.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use famdiff_core::freq::{fm_mix, fm_mix_lowpass};

    #[test]
    fn fixtures_are_consistent() {
        let (a, b, f) = mix_inputs(2, 8, 12).unwrap();
        assert_eq!(a.dims(), (2, 8, 12));
        assert_ne!(a.data(), b.data());
        assert!(fm_mix(&a, &b, &f).unwrap().max_abs_diff(&fm_mix_lowpass(&a, &b, &f).unwrap()) < 1e-9);

        let fx = StepFixture::new((8, 8), 2, 5).unwrap();
        assert_eq!(fx.seq.timesteps().len(), 5);
        assert_eq!(fx.config_with(GuidanceMode::None).steps, 5);
    }
}
