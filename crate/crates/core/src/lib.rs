//! Resolution scaling for latent diffusion by diffuse-denoise sampling.
//!
//! A latent is first generated at the model's native resolution, upsampled,
//! forward-diffused, and then denoised again at the target resolution. Two
//! guidance mechanisms keep the result faithful to the native sample:
//!
//! - frequency modulation ([`freq`]) replaces the low-frequency band of the
//!   denoised latent with the diffused one, under a time-varying high-pass
//!   mask;
//! - attention modulation ([`attention`], [`taps`]) blends upsampled
//!   native-resolution attention matrices into the high-resolution pass.
//!
//! [`pipeline::run`] composes the stages.

pub mod attention;
pub mod bench;
pub mod denoiser;
pub mod error;
pub mod fft;
pub mod freq;
pub mod grid;
pub mod inspect;
pub mod io;
pub mod pipeline;
pub mod resample;
pub mod rng;
pub mod schedule;
pub mod taps;

pub use attention::{AttentionMatrix, AttnModConfig, AttnMode, Matrix};
pub use denoiser::{Denoiser, DenoiserOutput, DenoiserSpec, GaussianFieldModel, SpectrumShape, ToyAttentionNet, ToyNetConfig};
pub use error::{Error, Result};
pub use freq::{FilterParams, GuidanceMode, HighPassFilter};
pub use grid::{LatentGrid, SpectralGrid};
pub use pipeline::{run, RunArtifacts, RunConfig, Sampler};
pub use resample::{Alignment, ResampleMode, ResampleSpec};
pub use schedule::NoiseSchedule;
pub use taps::{AttentionHook, AttentionRecorder, AttentionReplayer, AttentionStore, TapLog};

/// Crate version recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
