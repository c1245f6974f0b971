//! Noise-prediction backends.

mod analytic;
mod toy;

use std::collections::BTreeSet;
use std::fmt;

pub use analytic::{GaussianFieldModel, SpectrumShape};
pub use toy::{output_hash, ToyAttentionNet, ToyNetConfig, BLOCK_LABELS};

use crate::error::Result;
use crate::grid::LatentGrid;
use crate::schedule::NoiseSchedule;
use crate::taps::AttentionHook;

/// Result of one denoiser evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserOutput {
    pub eps_hat: LatentGrid,
    /// Number of attention matrices the backend computed (and offered to the hook).
    pub attention_calls: usize,
}

/// A noise estimator ε̂(z_t, t).
pub trait Denoiser: Send + Sync {
    fn predict(
        &self,
        z_t: &LatentGrid,
        t: usize,
        sched: &NoiseSchedule,
        hook: Option<&mut dyn AttentionHook>,
    ) -> Result<DenoiserOutput>;

    /// `(channels, height, width)` the backend is configured for.
    fn dims(&self) -> (usize, usize, usize);

    /// One-line description recorded in run manifests.
    fn summary(&self) -> String;
}

/// Which backend a run uses; both passes of a run share one spec.
#[derive(Debug, Clone, PartialEq)]
pub enum DenoiserSpec {
    AnalyticGaussian {
        channels: usize,
        mean: f64,
        spectrum: SpectrumShape,
    },
    ToyAttentionNet(ToyNetConfig),
}

impl DenoiserSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            DenoiserSpec::AnalyticGaussian { .. } => "analytic",
            DenoiserSpec::ToyAttentionNet(_) => "toy",
        }
    }

    pub fn channels(&self) -> usize {
        match self {
            DenoiserSpec::AnalyticGaussian { channels, .. } => *channels,
            DenoiserSpec::ToyAttentionNet(cfg) => cfg.channels,
        }
    }

    /// Blocks that compute attention; empty for the analytic backend.
    pub fn attention_blocks(&self) -> BTreeSet<String> {
        match self {
            DenoiserSpec::AnalyticGaussian { .. } => BTreeSet::new(),
            DenoiserSpec::ToyAttentionNet(cfg) => cfg.attention_blocks.clone(),
        }
    }

    /// Builds the backend for a `native_h × native_w` latent scaled by
    /// `(scale_h, scale_w)`. Weights and priors are shared across scales.
    pub fn build(
        &self,
        native_h: usize,
        native_w: usize,
        scale_h: usize,
        scale_w: usize,
    ) -> Result<Box<dyn Denoiser>> {
        match self {
            DenoiserSpec::AnalyticGaussian {
                channels,
                mean,
                spectrum,
            } => Ok(Box::new(GaussianFieldModel::at_scale(
                *channels, native_h, native_w, scale_h, scale_w, *mean, spectrum,
            )?)),
            DenoiserSpec::ToyAttentionNet(cfg) => {
                let net = ToyAttentionNet::new(cfg.clone(), native_h, native_w)?;
                Ok(Box::new(net.resolution_adapt(scale_h, scale_w)?))
            }
        }
    }
}

impl fmt::Display for DenoiserSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DenoiserSpec::AnalyticGaussian {
                channels,
                mean,
                spectrum,
            } => write!(f, "analytic(channels={channels},mean={mean},spectrum={spectrum})"),
            DenoiserSpec::ToyAttentionNet(cfg) => write!(f, "{cfg}"),
        }
    }
}
