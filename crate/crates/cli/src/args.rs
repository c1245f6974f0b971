use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use famdiff_core::attention::{DEFAULT_LAMBDA, DEFAULT_TOKEN_CAP};
use famdiff_core::bench::{BenchMode, BenchPlan, BenchSize};
use famdiff_core::freq::{FilterParams, DEFAULT_CUTOFF_C};
use famdiff_core::pipeline::{default_analytic_spec, parse_dims, FmApply, Storage, DEFAULT_MEMORY_CAP};
use famdiff_core::schedule::DEFAULT_TRAIN_STEPS;
use famdiff_core::{
    AttnModConfig, AttnMode, DenoiserSpec, GuidanceMode, ResampleMode, Result, RunConfig, Sampler, SpectrumShape,
    ToyNetConfig,
};

#[derive(Parser, Debug)]
#[command(name = "famdiff", version, about = "Diffuse-denoise resolution scaling with frequency and attention modulation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate at native size, then upsample and re-denoise at the target size.
    Run(RunArgs),
    /// Time end-to-end runs per (size, mode) and write a CSV table.
    Bench(BenchArgs),
    /// Render filter masks or attention rows as PGM heatmaps.
    Inspect(InspectArgs),
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Backend {
    /// Closed-form denoiser for a stationary Gaussian prior.
    Analytic,
    /// Small random-weight network with self-attention blocks.
    Toy,
}

fn dims(s: &str) -> Result<(usize, usize)> {
    parse_dims(s)
}

#[derive(Args, Debug, Clone)]
pub struct BackendArgs {
    #[arg(long, value_enum, default_value_t = Backend::Analytic)]
    pub backend: Backend,

    /// Latent channels (analytic default 4, toy default 1).
    #[arg(long)]
    pub channels: Option<usize>,

    /// Prior mean of the analytic backend.
    #[arg(long, default_value_t = 0.0)]
    pub mean: f64,

    /// Prior spectrum: `white:<var>` or `powerlaw:<amp>:<corner>:<exp>:<floor>`.
    #[arg(long, default_value_t = default_spectrum())]
    pub spectrum: SpectrumShape,

    /// Weight seed of the toy network.
    #[arg(long, default_value_t = ToyNetConfig::default().seed)]
    pub net_seed: u64,
}

fn default_spectrum() -> SpectrumShape {
    match default_analytic_spec() {
        DenoiserSpec::AnalyticGaussian { spectrum, .. } => spectrum,
        DenoiserSpec::ToyAttentionNet(_) => unreachable!("default spec is analytic"),
    }
}

impl BackendArgs {
    pub fn spec(&self, token_cap: usize) -> DenoiserSpec {
        match self.backend {
            Backend::Analytic => DenoiserSpec::AnalyticGaussian {
                channels: self.channels.unwrap_or(default_analytic_spec().channels()),
                mean: self.mean,
                spectrum: self.spectrum,
            },
            Backend::Toy => {
                let d = ToyNetConfig::default();
                DenoiserSpec::ToyAttentionNet(ToyNetConfig {
                    seed: self.net_seed,
                    channels: self.channels.unwrap_or(d.channels),
                    token_cap,
                    ..d
                })
            }
        }
    }
}

#[derive(Args, Debug)]
pub struct RunArgs {
    /// Native latent size.
    #[arg(long, value_parser = dims, default_value = "32x32")]
    pub native: (usize, usize),

    /// Integer scale on both axes.
    #[arg(long, default_value_t = 2)]
    pub scale: usize,

    /// Vertical scale (overrides --scale).
    #[arg(long)]
    pub scale_h: Option<usize>,

    /// Horizontal scale (overrides --scale).
    #[arg(long)]
    pub scale_w: Option<usize>,

    #[arg(long, default_value_t = RunConfig::default().steps)]
    pub steps: usize,

    /// `none`, `fm`, `skip` or `skip:<exponent>`.
    #[arg(long, default_value_t = GuidanceMode::FrequencyModulation)]
    pub guidance: GuidanceMode,

    /// Apply the FM mix before each denoiser call (`pre`) or after each step (`post`).
    #[arg(long, default_value_t = FmApply::Pre)]
    pub fm_apply: FmApply,

    /// Weight of the upsampled native attention.
    #[arg(long, default_value_t = DEFAULT_LAMBDA)]
    pub lambda: f64,

    /// Attention modulation: `modulate`, `swap` or `off`.
    #[arg(long, default_value_t = AttnMode::Modulate)]
    pub am: AttnMode,

    /// Attention blocks to modulate, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "up_block_0")]
    pub attn_blocks: Vec<String>,

    /// Restrict modulation to timesteps `LO-HI` (inclusive).
    #[arg(long)]
    pub attn_range: Option<String>,

    /// Largest token count for which dense attention matrices are built.
    #[arg(long, default_value_t = DEFAULT_TOKEN_CAP)]
    pub token_cap: usize,

    /// Cut-off constant of the high-pass filter.
    #[arg(long, default_value_t = DEFAULT_CUTOFF_C)]
    pub cutoff_c: f64,

    #[arg(long, default_value_t = 0)]
    pub seed: u64,

    #[command(flatten)]
    pub backend: BackendArgs,

    #[arg(long, default_value_t = Sampler::Ddim)]
    pub sampler: Sampler,

    #[arg(long, default_value_t = ResampleMode::Bilinear)]
    pub upsample: ResampleMode,

    /// `materialized` keeps every diffused latent; `recompute` re-derives them.
    #[arg(long, default_value_t = Storage::Materialized)]
    pub storage: Storage,

    /// Byte budget for materialized storage.
    #[arg(long, default_value_t = DEFAULT_MEMORY_CAP)]
    pub memory_cap: usize,

    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_range(s: &str) -> Result<(usize, usize)> {
    let bad = || famdiff_core::Error::Parameter(format!("expected LO-HI, got {s:?}"));
    let (lo, hi) = s.split_once('-').ok_or_else(bad)?;
    let (lo, hi) = (lo.parse().map_err(|_| bad())?, hi.parse().map_err(|_| bad())?);
    if lo > hi {
        return Err(bad());
    }
    Ok((lo, hi))
}

impl RunArgs {
    pub fn config(&self) -> Result<RunConfig> {
        let mut attn = AttnModConfig::default()
            .with_lambda(self.lambda)?
            .with_mode(self.am)
            .with_blocks(self.attn_blocks.iter().map(|s| s.trim().to_string()));
        attn.step_range = self.attn_range.as_deref().map(parse_range).transpose()?;
        attn.token_cap = self.token_cap;
        let cfg = RunConfig {
            native_h: self.native.0,
            native_w: self.native.1,
            scale_h: self.scale_h.unwrap_or(self.scale),
            scale_w: self.scale_w.unwrap_or(self.scale),
            steps: self.steps,
            guidance: self.guidance,
            fm_apply: self.fm_apply,
            attn,
            cutoff_c: self.cutoff_c,
            seed: self.seed,
            denoiser: self.backend.spec(self.token_cap),
            sampler: self.sampler,
            upsample_mode: self.upsample,
            storage: self.storage,
            memory_cap: self.memory_cap,
            ..RunConfig::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    /// Sizes as `HxW@S` or `HxW@SHxSW`, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "32x32@2")]
    pub sizes: Vec<BenchSize>,

    /// Modes as `<guidance>[+attn:<mode>]`, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "none,fm")]
    pub modes: Vec<BenchMode>,

    #[arg(long, default_value_t = BenchPlan::default().repeats)]
    pub repeats: usize,

    #[arg(long, default_value_t = BenchPlan::default().warmup)]
    pub warmup: usize,

    #[arg(long, default_value_t = BenchPlan::default().steps)]
    pub steps: usize,

    #[arg(long, default_value_t = 0)]
    pub seed: u64,

    #[command(flatten)]
    pub backend: BackendArgs,

    /// Run configurations concurrently (timings then include contention).
    #[arg(long)]
    pub parallel: bool,

    /// Also time the three FM mix kernels at each high-resolution size.
    #[arg(long)]
    pub kernels: bool,

    /// CSV file to create or append to; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl BenchArgs {
    pub fn plan(&self) -> Result<BenchPlan> {
        let plan = BenchPlan {
            sizes: self.sizes.clone(),
            modes: self.modes.clone(),
            repeats: self.repeats,
            warmup: self.warmup,
            steps: self.steps,
            seed: self.seed,
            denoiser: self.backend.spec(DEFAULT_TOKEN_CAP),
            parallel: self.parallel,
        };
        plan.validate()?;
        Ok(plan)
    }
}

#[derive(Args, Debug)]
#[command(group = clap::ArgGroup::new("what").required(true).args(["filter", "attn"]))]
pub struct InspectArgs {
    /// Render the high-pass mask K(t).
    #[arg(long, requires = "t")]
    pub filter: bool,

    /// Timestep of the mask, or `T` for the last one.
    #[arg(long)]
    pub t: Option<String>,

    /// Mask size.
    #[arg(long, value_parser = dims, default_value = "64x64")]
    pub size: (usize, usize),

    #[arg(long, default_value_t = DEFAULT_CUTOFF_C)]
    pub cutoff_c: f64,

    /// Training steps T of the schedule.
    #[arg(long, default_value_t = DEFAULT_TRAIN_STEPS)]
    pub total_steps: usize,

    /// Render one query row of the attention snapshot of a run.
    #[arg(long, requires_all = ["query", "run"])]
    pub attn: bool,

    /// Query token index on the high-resolution token grid.
    #[arg(long)]
    pub query: Option<usize>,

    /// Run directory written by `famdiff run`.
    #[arg(long)]
    pub run: Option<PathBuf>,

    /// Output file (filter) or directory (attention).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl InspectArgs {
    pub fn filter_params(&self) -> Result<(FilterParams, usize)> {
        let params = FilterParams::new(self.cutoff_c, self.total_steps, self.size.0, self.size.1)?;
        let t = match self.t.as_deref() {
            Some("T") => self.total_steps,
            Some(v) => v
                .parse()
                .map_err(|_| famdiff_core::Error::Parameter(format!("bad timestep {v:?}")))?,
            None => return Err(famdiff_core::Error::Parameter("--filter needs --t".into())),
        };
        if t > self.total_steps {
            return Err(famdiff_core::Error::Parameter(format!(
                "timestep {t} outside [0, {}]",
                self.total_steps
            )));
        }
        Ok((params, t))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> Command {
        Cli::try_parse_from(std::iter::once("famdiff").chain(args.iter().copied())).unwrap().command
    }

    #[test]
    fn run_defaults_match_core_defaults() {
        let Command::Run(a) = parse(&["run", "--out", "x"]) else { panic!() };
        let cfg = a.config().unwrap();
        let d = RunConfig::default();
        assert_eq!((cfg.native_h, cfg.native_w, cfg.scale_h, cfg.scale_w), (d.native_h, d.native_w, 2, 2));
        assert_eq!(cfg.denoiser, d.denoiser);
        assert_eq!(cfg.attn, d.attn);
        assert_eq!((cfg.steps, cfg.guidance, cfg.cutoff_c), (d.steps, d.guidance, d.cutoff_c));
    }

    #[test]
    fn attention_flags_reach_the_config() {
        let Command::Run(a) = parse(&[
            "run", "--out", "x", "--am", "swap", "--attn-blocks", "mid_block,up_block_0", "--attn-range", "200-800",
        ]) else {
            panic!()
        };
        let cfg = a.config().unwrap();
        assert_eq!(cfg.attn.mode, AttnMode::Swap);
        assert_eq!(cfg.attn.target_blocks.len(), 2);
        assert_eq!(cfg.attn.step_range, Some((200, 800)));
        assert!(parse_range("9-3").is_err() && parse_range("9").is_err());
    }

    #[test]
    fn toy_backend_defaults_to_one_channel() {
        let Command::Run(a) = parse(&["run", "--out", "x", "--backend", "toy"]) else { panic!() };
        assert_eq!(a.config().unwrap().denoiser.channels(), 1);
    }
}
