//! Native generation, latent upsampling, forward diffusion and guided
//! high-resolution denoising, composed by [`run`].

use std::borrow::Cow;
use std::fmt;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::attention::{AttnModConfig, AttnMode, AttentionMatrix};
use crate::denoiser::{Denoiser, DenoiserSpec, SpectrumShape};
use crate::error::{Error, Result};
use crate::fft::dft2;
use crate::freq::{FilterParams, GuidanceMode, DEFAULT_CUTOFF_C};
use crate::grid::LatentGrid;
use crate::io::{encode_famlat, render_channels, write_famlat};
use crate::resample::{upsample, ResampleMode, ResampleSpec};
use crate::rng::{derive_seed, normal_grid, streams};
use crate::schedule::{ancestral_step_strided, ddim_step, diffuse_marginal, NoiseSchedule};
use crate::taps::{AttentionHook, AttentionRecorder, AttentionReplayer, AttentionSnapshot, AttentionStore, TapLog};

/// Default budget for a materialized diffused-latent sequence.
pub const DEFAULT_MEMORY_CAP: usize = 1 << 30;
/// Salt mixed into the run seed for the high-resolution pass.
pub const HIGH_SEED_SALT: u64 = 1;
pub const METRICS_CSV_HEADER: &str = "step,t,lf_error,wall_ns,denoiser_calls";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Sampler {
    #[default]
    Ddim,
    Ancestral,
}

/// Where `f_t` sits relative to the denoiser call.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FmApply {
    /// `ε̂ = ε_θ(f_t(z̃_t, z_t), t)`, then step from the guided latent.
    #[default]
    Pre,
    /// Step from `z_t`, then guide the result with `z̃_{t_prev}`.
    Post,
}

/// How the diffused latents `z̃_t` are kept.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Storage {
    #[default]
    Materialized,
    /// Regenerate each `z̃_t` from `z̃_0` and its noise stream on demand.
    Recompute,
}

macro_rules! text_enum {
    ($ty:ty, $what:literal, $($variant:path => $text:literal),+ $(,)?) => {
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($variant => $text),+ })
            }
        }

        impl FromStr for $ty {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($text => Ok($variant),)+
                    _ => Err(Error::Parameter(format!(concat!("unknown ", $what, " {:?}"), s))),
                }
            }
        }
    };
}

text_enum!(Sampler, "sampler", Sampler::Ddim => "ddim", Sampler::Ancestral => "ancestral");
text_enum!(FmApply, "fm placement", FmApply::Pre => "pre", FmApply::Post => "post");
text_enum!(Storage, "storage mode", Storage::Materialized => "materialized", Storage::Recompute => "recompute");

/// Analytic backend used when none is specified: 4 channels, zero mean and a
/// power-law spectrum with most energy at low frequencies.
pub fn default_analytic_spec() -> DenoiserSpec {
    DenoiserSpec::AnalyticGaussian {
        channels: 4,
        mean: 0.0,
        spectrum: SpectrumShape::PowerLaw {
            amplitude: 40.0,
            corner: 2.0,
            exponent: 3.0,
            floor: 0.01,
        },
    }
}

/// Parses `HxW` (also accepts `×`) into `(height, width)`.
pub fn parse_dims(s: &str) -> Result<(usize, usize)> {
    let bad = || Error::Parameter(format!("expected HxW, got {s:?}"));
    let (h, w) = s.split_once(['x', 'X', '×']).ok_or_else(bad)?;
    let h: usize = h.trim().parse().map_err(|_| bad())?;
    let w: usize = w.trim().parse().map_err(|_| bad())?;
    if h == 0 || w == 0 {
        return Err(bad());
    }
    Ok((h, w))
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub native_h: usize,
    pub native_w: usize,
    pub scale_h: usize,
    pub scale_w: usize,
    pub steps: usize,
    pub guidance: GuidanceMode,
    pub fm_apply: FmApply,
    pub attn: AttnModConfig,
    pub cutoff_c: f64,
    pub seed: u64,
    pub denoiser: DenoiserSpec,
    pub sampler: Sampler,
    pub upsample_mode: ResampleMode,
    pub storage: Storage,
    /// Byte budget for [`Storage::Materialized`].
    pub memory_cap: usize,
    pub schedule: NoiseSchedule,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            native_h: 32,
            native_w: 32,
            scale_h: 2,
            scale_w: 2,
            steps: 50,
            guidance: GuidanceMode::FrequencyModulation,
            fm_apply: FmApply::Pre,
            attn: AttnModConfig::default(),
            cutoff_c: DEFAULT_CUTOFF_C,
            seed: 0,
            denoiser: default_analytic_spec(),
            sampler: Sampler::Ddim,
            upsample_mode: ResampleMode::Bilinear,
            storage: Storage::Materialized,
            memory_cap: DEFAULT_MEMORY_CAP,
            schedule: NoiseSchedule::default_linear(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.native_h == 0 || self.native_w == 0 {
            return Err(Error::Size("native dims must be non-zero".into()));
        }
        if self.scale_h == 0 || self.scale_w == 0 {
            return Err(Error::Parameter("scale must be >= 1".into()));
        }
        if self.steps == 0 || self.steps > self.schedule.train_steps() {
            return Err(Error::Parameter(format!(
                "steps {} outside [1, {}]",
                self.steps,
                self.schedule.train_steps()
            )));
        }
        if self.denoiser.channels() == 0 {
            return Err(Error::Size("denoiser needs >= 1 channel".into()));
        }
        AttnModConfig::default().with_lambda(self.attn.lambda())?;
        self.filter_params().validate()
    }

    pub fn high_dims(&self) -> (usize, usize) {
        (self.native_h * self.scale_h, self.native_w * self.scale_w)
    }

    pub fn high_seed(&self) -> u64 {
        derive_seed(self.seed, HIGH_SEED_SALT)
    }

    pub fn filter_params(&self) -> FilterParams {
        let (h, w) = self.high_dims();
        FilterParams {
            cutoff_c: self.cutoff_c,
            total_steps: self.schedule.train_steps(),
            height: h,
            width: w,
        }
    }

    pub fn resample_spec(&self) -> ResampleSpec {
        ResampleSpec::integer(self.scale_h as u32, self.scale_w as u32).with_mode(self.upsample_mode)
    }

    pub fn timesteps(&self) -> Result<Vec<usize>> {
        self.schedule.inference_timesteps(self.steps)
    }

    /// Whether attention matrices are recorded and substituted in this run.
    pub fn attention_active(&self) -> bool {
        self.attn.mode != AttnMode::Off
            && self
                .denoiser
                .attention_blocks()
                .iter()
                .any(|b| self.attn.target_blocks.contains(b))
    }
}

fn sampler_step(
    sampler: Sampler,
    z: &LatentGrid,
    eps: &LatentGrid,
    t: usize,
    t_prev: usize,
    sched: &NoiseSchedule,
    noise_seed: u64,
    noise_stream: u64,
) -> Result<LatentGrid> {
    match sampler {
        Sampler::Ddim => ddim_step(z, eps, t, t_prev, sched),
        Sampler::Ancestral => {
            let (c, h, w) = z.dims();
            let noise = normal_grid(noise_seed, noise_stream, c, h, w);
            ancestral_step_strided(z, eps, t, t_prev, sched, &noise)
        }
    }
}

fn reborrow<'s>(hook: &'s mut Option<&mut dyn AttentionHook>) -> Option<&'s mut dyn AttentionHook> {
    match hook {
        Some(h) => Some(&mut **h),
        None => None,
    }
}

fn prev_timestep(timesteps: &[usize], i: usize) -> usize {
    timesteps.get(i + 1).copied().unwrap_or(0)
}

/// The unguided reverse chain from `z_init` over `timesteps` (descending).
/// Ancestral noise for step `i` comes from `(noise_seed, noise_stream + i)`.
pub fn reverse_chain(
    z_init: &LatentGrid,
    timesteps: &[usize],
    sampler: Sampler,
    den: &dyn Denoiser,
    sched: &NoiseSchedule,
    mut hook: Option<&mut dyn AttentionHook>,
    noise_seed: u64,
    noise_stream: u64,
) -> Result<(LatentGrid, usize)> {
    let mut z = z_init.clone();
    let mut calls = 0;
    for (i, &t) in timesteps.iter().enumerate() {
        let out = den.predict(&z, t, sched, reborrow(&mut hook))?;
        calls += 1;
        z = sampler_step(
            sampler,
            &z,
            &out.eps_hat,
            t,
            prev_timestep(timesteps, i),
            sched,
            noise_seed,
            noise_stream + i as u64,
        )?;
    }
    Ok((z, calls))
}

/// Output of the native-resolution pass.
#[derive(Debug, Clone)]
pub struct NativePass {
    pub latent: LatentGrid,
    /// Attention matrices recorded for the targeted blocks (empty when AM is inactive).
    pub store: AttentionStore,
    pub denoiser_calls: usize,
}

/// Full reverse chain at native resolution from `N(0, I)` noise drawn from
/// the run seed.
pub fn generate_native(cfg: &RunConfig) -> Result<NativePass> {
    cfg.validate()?;
    let den = cfg.denoiser.build(cfg.native_h, cfg.native_w, 1, 1)?;
    generate_native_with(cfg, den.as_ref())
}

pub fn generate_native_with(cfg: &RunConfig, den: &dyn Denoiser) -> Result<NativePass> {
    let c = cfg.denoiser.channels();
    let z_t = normal_grid(cfg.seed, streams::NATIVE_INIT, c, cfg.native_h, cfg.native_w);
    let ts = cfg.timesteps()?;
    let mut recorder = cfg
        .attention_active()
        .then(|| AttentionRecorder::new(cfg.attn.target_blocks.clone()));
    let (latent, calls) = reverse_chain(
        &z_t,
        &ts,
        cfg.sampler,
        den,
        &cfg.schedule,
        recorder.as_mut().map(|r| r as &mut dyn AttentionHook),
        cfg.seed,
        streams::NATIVE_STEP,
    )?;
    Ok(NativePass {
        latent,
        store: recorder.map(AttentionRecorder::into_store).unwrap_or_default(),
        denoiser_calls: calls,
    })
}

/// The forward-diffused upsampled latents `z̃_t` for every scheduled `t`,
/// plus `z̃_0` itself.
#[derive(Debug, Clone)]
pub struct DiffusedSequence {
    z0: LatentGrid,
    timesteps: Vec<usize>,
    seed: u64,
    schedule: NoiseSchedule,
    stored: Option<Vec<LatentGrid>>,
}

impl DiffusedSequence {
    /// `z̃_0 = upsample(z_native)`; step `i` diffuses with noise
    /// `(seed, DIFFUSE + i)`.
    pub fn new(
        z_native: &LatentGrid,
        spec: &ResampleSpec,
        timesteps: Vec<usize>,
        schedule: NoiseSchedule,
        seed: u64,
        storage: Storage,
        memory_cap: usize,
    ) -> Result<Self> {
        let z0 = upsample(z_native, spec)?;
        let mut seq = Self {
            z0,
            timesteps,
            seed,
            schedule,
            stored: None,
        };
        if storage == Storage::Materialized {
            let bytes = seq
                .timesteps
                .len()
                .saturating_mul(seq.z0.data().len())
                .saturating_mul(std::mem::size_of::<f64>());
            if bytes > memory_cap {
                return Err(Error::Capacity {
                    what: "diffused sequence bytes",
                    requested: bytes,
                    cap: memory_cap,
                });
            }
            let all = (0..seq.timesteps.len())
                .into_par_iter()
                .map(|i| seq.compute(i))
                .collect::<Result<Vec<_>>>()?;
            seq.stored = Some(all);
        }
        Ok(seq)
    }

    fn compute(&self, i: usize) -> Result<LatentGrid> {
        let (c, h, w) = self.z0.dims();
        let noise = normal_grid(self.seed, streams::DIFFUSE + i as u64, c, h, w);
        diffuse_marginal(&self.z0, self.timesteps[i], &self.schedule, &noise)
    }

    pub fn upsampled(&self) -> &LatentGrid {
        &self.z0
    }

    pub fn timesteps(&self) -> &[usize] {
        &self.timesteps
    }

    pub fn len(&self) -> usize {
        self.timesteps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timesteps.is_empty()
    }

    pub fn is_materialized(&self) -> bool {
        self.stored.is_some()
    }

    /// `z̃` at scheduled step index `i`.
    pub fn at_index(&self, i: usize) -> Result<Cow<'_, LatentGrid>> {
        if i >= self.timesteps.len() {
            return Err(Error::Parameter(format!("step index {i} beyond {}", self.len())));
        }
        Ok(match &self.stored {
            Some(all) => Cow::Borrowed(&all[i]),
            None => Cow::Owned(self.compute(i)?),
        })
    }

    /// `z̃_t` for `t = 0` or any scheduled timestep.
    pub fn at(&self, t: usize) -> Result<Cow<'_, LatentGrid>> {
        if t == 0 {
            return Ok(Cow::Borrowed(&self.z0));
        }
        let i = self
            .timesteps
            .iter()
            .position(|&s| s == t)
            .ok_or_else(|| Error::Parameter(format!("timestep {t} is not scheduled")))?;
        self.at_index(i)
    }
}

/// Upsamples the native latent and builds its diffused sequence.
pub fn diffuse_upsampled(z_native: &LatentGrid, cfg: &RunConfig) -> Result<DiffusedSequence> {
    if (z_native.height(), z_native.width()) != (cfg.native_h, cfg.native_w) {
        return Err(Error::Size(format!(
            "native latent is {}x{}, config says {}x{}",
            z_native.height(),
            z_native.width(),
            cfg.native_h,
            cfg.native_w
        )));
    }
    DiffusedSequence::new(
        z_native,
        &cfg.resample_spec(),
        cfg.timesteps()?,
        cfg.schedule.clone(),
        cfg.high_seed(),
        cfg.storage,
        cfg.memory_cap,
    )
}

/// One row of the metrics CSV.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepMetric {
    pub step: usize,
    pub t: usize,
    /// [`low_frequency_error`] of the post-step latent against `z̃_{t_prev}`.
    pub lf_error: f64,
    pub wall_ns: u64,
    /// High-resolution denoiser calls so far.
    pub denoiser_calls: usize,
}

pub fn metrics_csv(rows: &[StepMetric]) -> String {
    let mut s = String::from(METRICS_CSV_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(s, "{},{},{:e},{},{}", r.step, r.t, r.lf_error, r.wall_ns, r.denoiser_calls);
    }
    s
}

/// Parses a metrics CSV written by [`metrics_csv`].
pub fn parse_metrics_csv(text: &str) -> Result<Vec<StepMetric>> {
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_CSV_HEADER) {
        return Err(Error::Format("metrics CSV header mismatch".into()));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            let bad = || Error::Format(format!("bad metrics row {l:?}"));
            if f.len() != 5 {
                return Err(bad());
            }
            Ok(StepMetric {
                step: f[0].parse().map_err(|_| bad())?,
                t: f[1].parse().map_err(|_| bad())?,
                lf_error: f[2].parse().map_err(|_| bad())?,
                wall_ns: f[3].parse().map_err(|_| bad())?,
                denoiser_calls: f[4].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

/// Unshifted bins inside the `t = 0` filter rectangle (half extents `n·c/2`).
fn low_band(n: usize, cutoff_c: f64) -> Vec<usize> {
    let half = n as f64 * cutoff_c / 2.0;
    let c = n / 2;
    (0..n)
        .filter(|&y| (y as f64 - c as f64).abs() < half)
        .map(|y| (y + n - c) % n)
        .collect()
}

/// Relative L2 distance `‖Z − R‖/‖R‖` between the DFT coefficients of `z`
/// and `reference`, restricted to the low-frequency rectangle of the filter
/// at `t = 0`.
pub fn low_frequency_error(z: &LatentGrid, reference: &LatentGrid, cutoff_c: f64) -> Result<f64> {
    z.ensure_same_dims(reference, "low-frequency error inputs")?;
    let (_, h, w) = z.dims();
    let (rows, cols) = (low_band(h, cutoff_c), low_band(w, cutoff_c));
    let (a, b) = (dft2(z), dft2(reference));
    let (mut num, mut den) = (0.0, 0.0);
    for (pa, pb) in a.data().chunks_exact(h * w).zip(b.data().chunks_exact(h * w)) {
        for &y in &rows {
            for &x in &cols {
                num += (pa[y * w + x] - pb[y * w + x]).norm_sqr();
                den += pb[y * w + x].norm_sqr();
            }
        }
    }
    if den == 0.0 {
        return Err(Error::Numeric("reference has no low-frequency energy".into()));
    }
    Ok((num / den).sqrt())
}

/// Guidance function `f_t(z_denoised, z_diffused, t)`.
pub type GuideFn<'a> = dyn FnMut(&LatentGrid, &LatentGrid, usize) -> Result<LatentGrid> + 'a;

/// Output of the high-resolution pass.
#[derive(Debug, Clone)]
pub struct HighPass {
    pub latent: LatentGrid,
    pub metrics: Vec<StepMetric>,
    pub denoiser_calls: usize,
}

/// Guided reverse chain from `z̃_T` with the run's guidance mode.
pub fn denoise_guided(
    seq: &DiffusedSequence,
    cfg: &RunConfig,
    den: &dyn Denoiser,
    hook: Option<&mut dyn AttentionHook>,
) -> Result<HighPass> {
    let params = cfg.filter_params();
    let mode = cfg.guidance;
    match mode {
        GuidanceMode::None => denoise_guided_with(seq, cfg, den, hook, None),
        _ => {
            let mut f = |z: &LatentGrid, zd: &LatentGrid, t: usize| mode.apply(z, zd, t, &params);
            denoise_guided_with(seq, cfg, den, hook, Some(&mut f))
        }
    }
}

/// Guided reverse chain with an explicit guidance function (`None` skips
/// guidance entirely).
pub fn denoise_guided_with(
    seq: &DiffusedSequence,
    cfg: &RunConfig,
    den: &dyn Denoiser,
    mut hook: Option<&mut dyn AttentionHook>,
    mut guide: Option<&mut GuideFn<'_>>,
) -> Result<HighPass> {
    let ts = seq.timesteps().to_vec();
    if ts.is_empty() {
        return Err(Error::Parameter("empty timestep schedule".into()));
    }
    let sched = &cfg.schedule;
    let noise_seed = cfg.high_seed();
    let mut z = seq.at_index(0)?.into_owned();
    let mut calls = 0;
    let mut metrics = Vec::with_capacity(ts.len());
    for (i, &t) in ts.iter().enumerate() {
        let t_prev = prev_timestep(&ts, i);
        let diffused = seq.at_index(i)?;
        let diffused_prev = match (cfg.fm_apply, &mut guide) {
            (FmApply::Post, Some(_)) => Some(seq.at(t_prev)?),
            _ => None,
        };

        let start = Instant::now();
        if let (FmApply::Pre, Some(f)) = (cfg.fm_apply, guide.as_mut()) {
            z = f(&z, &diffused, t)?;
        }
        let out = den.predict(&z, t, sched, reborrow(&mut hook))?;
        calls += 1;
        z = sampler_step(
            cfg.sampler,
            &z,
            &out.eps_hat,
            t,
            t_prev,
            sched,
            noise_seed,
            streams::HIGH_STEP + i as u64,
        )?;
        if let (Some(f), Some(zp)) = (guide.as_mut(), &diffused_prev) {
            z = f(&z, zp, t_prev)?;
        }
        let wall_ns = start.elapsed().as_nanos() as u64;

        let reference = seq.at(t_prev)?;
        metrics.push(StepMetric {
            step: i,
            t,
            lf_error: low_frequency_error(&z, &reference, cfg.cutoff_c)?,
            wall_ns,
            denoiser_calls: calls,
        });
    }
    Ok(HighPass {
        latent: z,
        metrics,
        denoiser_calls: calls,
    })
}

/// Everything a run produces.
#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub z_native: LatentGrid,
    pub z_high: LatentGrid,
    pub metrics: Vec<StepMetric>,
    pub tap_log: TapLog,
    pub snapshot: Option<AttentionSnapshot>,
    pub native_calls: usize,
    pub high_calls: usize,
    pub manifest: Manifest,
}

/// Ordered `key = value` run description. Contains no timings, so equal
/// configurations give byte-identical manifests.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Manifest {
    entries: Vec<(String, String)>,
}

impl Manifest {
    pub fn push(&mut self, key: impl Into<String>, value: impl ToString) {
        self.entries.push((key.into(), value.to_string()));
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn entries(&self) -> &[(String, String)] {
        &self.entries
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.entries {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut m = Manifest::default();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once(" = ")
                .ok_or_else(|| Error::Format(format!("bad manifest line {line:?}")))?;
            m.push(k, v);
        }
        Ok(m)
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn build_manifest(
    cfg: &RunConfig,
    native_den: &dyn Denoiser,
    high_den: &dyn Denoiser,
    z_native: &LatentGrid,
    z_high: &LatentGrid,
    native_calls: usize,
    high_calls: usize,
    tap_log: &TapLog,
) -> Result<Manifest> {
    let (hh, hw) = cfg.high_dims();
    let blocks: Vec<&str> = cfg.attn.target_blocks.iter().map(String::as_str).collect();
    let mut m = Manifest::default();
    m.push("famdiff.version", crate::VERSION);
    m.push("seed", cfg.seed);
    m.push("seed.high", cfg.high_seed());
    m.push("rng", "chacha20");
    m.push("native", format!("{}x{}", cfg.native_h, cfg.native_w));
    m.push("scale", format!("{}x{}", cfg.scale_h, cfg.scale_w));
    m.push("high", format!("{hh}x{hw}"));
    m.push("channels", cfg.denoiser.channels());
    m.push("steps", cfg.steps);
    m.push("sampler", cfg.sampler);
    m.push("guidance", cfg.guidance);
    m.push("fm_apply", cfg.fm_apply);
    m.push("cutoff_c", cfg.cutoff_c);
    m.push("attn.mode", cfg.attn.mode);
    m.push("attn.lambda", cfg.attn.lambda());
    m.push("attn.lambda_effective", cfg.attn.effective_lambda());
    m.push("attn.blocks", blocks.join("+"));
    m.push("attn.token_cap", cfg.attn.token_cap);
    m.push("attn.active", cfg.attention_active());
    m.push("upsample", cfg.upsample_mode);
    m.push("storage", cfg.storage);
    m.push("denoiser", &cfg.denoiser);
    m.push("denoiser.native", native_den.summary());
    m.push("denoiser.high", high_den.summary());
    for line in cfg.schedule.header(cfg.steps).lines() {
        if let Some((k, v)) = line.split_once('=') {
            m.push(k.trim(), v.trim());
        }
    }
    m.push("calls.native", native_calls);
    m.push("calls.high", high_calls);
    m.push("taps.events", tap_log.len());
    m.push("sha256.native", sha256_hex(&encode_famlat(z_native)?));
    m.push("sha256.high", sha256_hex(&encode_famlat(z_high)?));
    Ok(m)
}

/// Native pass, upsample + diffuse, guided high-resolution pass.
pub fn run(cfg: &RunConfig) -> Result<RunArtifacts> {
    cfg.validate()?;
    let native_den = cfg.denoiser.build(cfg.native_h, cfg.native_w, 1, 1)?;
    let high_den = cfg
        .denoiser
        .build(cfg.native_h, cfg.native_w, cfg.scale_h, cfg.scale_w)?;

    let native = generate_native_with(cfg, native_den.as_ref())?;
    let seq = diffuse_upsampled(&native.latent, cfg)?;

    let (high, tap_log, snapshot) = if cfg.attention_active() {
        let mut replayer = AttentionReplayer::new(&native.store, cfg.attn.clone(), cfg.scale_h, cfg.scale_w);
        let high = denoise_guided(&seq, cfg, high_den.as_ref(), Some(&mut replayer))?;
        let (log, snap) = replayer.into_parts();
        (high, log, snap)
    } else {
        (denoise_guided(&seq, cfg, high_den.as_ref(), None)?, TapLog::default(), None)
    };

    if high.denoiser_calls != cfg.steps {
        return Err(Error::Numeric(format!(
            "high-resolution pass made {} denoiser calls for {} steps",
            high.denoiser_calls, cfg.steps
        )));
    }
    let mut manifest = build_manifest(
        cfg,
        native_den.as_ref(),
        high_den.as_ref(),
        &native.latent,
        &high.latent,
        native.denoiser_calls,
        high.denoiser_calls,
        &tap_log,
    )?;
    if let Some(snap) = &snapshot {
        manifest.push("attn.snapshot.t", snap.t);
        manifest.push("attn.snapshot.block", &snap.block);
        for (key, m) in [("attn.snapshot.native_grid", &snap.native), ("attn.snapshot.high_grid", &snap.high)] {
            manifest.push(key, format!("{}x{}", m.spatial_h(), m.spatial_w()));
        }
    }
    Ok(RunArtifacts {
        z_native: native.latent,
        z_high: high.latent,
        metrics: high.metrics,
        tap_log,
        snapshot,
        native_calls: native.denoiser_calls,
        high_calls: high.denoiser_calls,
        manifest,
    })
}

/// Fixed output layout of a run directory.
pub mod layout {
    pub const MANIFEST: &str = "manifest.txt";
    pub const METRICS: &str = "metrics.csv";
    pub const NATIVE: &str = "native.famlat";
    pub const HIGH: &str = "high.famlat";
    pub const HIGH_RENDER: &str = "high.pgm";
    pub const TAPS: &str = "taps.csv";
    pub const ATTN_NATIVE: &str = "attn_native.famlat";
    pub const ATTN_HIGH: &str = "attn_high.famlat";
    pub const ATTN_MODULATED: &str = "attn_modulated.famlat";
}

/// Attention matrix as a `1 × N × N` grid for FAMLAT export.
pub fn attention_to_grid(m: &AttentionMatrix) -> LatentGrid {
    let n = m.tokens();
    LatentGrid::from_raw(1, n, n, m.data().to_vec())
}

/// Writes the run into `dir` (created if missing) and returns the paths.
pub fn write_outputs(dir: impl AsRef<Path>, art: &RunArtifacts) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let mut put = |name: &str, bytes: &[u8]| -> Result<()> {
        let p = dir.join(name);
        std::fs::write(&p, bytes)?;
        written.push(p);
        Ok(())
    };
    put(layout::MANIFEST, art.manifest.to_text().as_bytes())?;
    put(layout::METRICS, metrics_csv(&art.metrics).as_bytes())?;
    put(layout::NATIVE, &encode_famlat(&art.z_native)?)?;
    put(layout::HIGH, &encode_famlat(&art.z_high)?)?;
    put(layout::HIGH_RENDER, &render_channels(&art.z_high).encode())?;
    if !art.tap_log.is_empty() {
        put(layout::TAPS, art.tap_log.to_csv().as_bytes())?;
    }
    if let Some(s) = &art.snapshot {
        for (name, m) in [
            (layout::ATTN_NATIVE, &s.native),
            (layout::ATTN_HIGH, &s.high),
            (layout::ATTN_MODULATED, &s.modulated),
        ] {
            let p = dir.join(name);
            write_famlat(&p, &attention_to_grid(m))?;
            written.push(p);
        }
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::ToyNetConfig;

    fn small_cfg() -> RunConfig {
        RunConfig {
            native_h: 8,
            native_w: 8,
            steps: 10,
            seed: 3,
            denoiser: DenoiserSpec::AnalyticGaussian {
                channels: 2,
                mean: 0.5,
                spectrum: SpectrumShape::PowerLaw {
                    amplitude: 20.0,
                    corner: 1.5,
                    exponent: 3.0,
                    floor: 0.01,
                },
            },
            ..RunConfig::default()
        }
    }

    #[test]
    fn dims_parse() {
        assert_eq!(parse_dims("32x64").unwrap(), (32, 64));
        assert_eq!(parse_dims("8×8").unwrap(), (8, 8));
        for bad in ["32", "0x4", "ax4", "4x"] {
            assert!(parse_dims(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn text_enums_roundtrip() {
        for s in ["ddim", "ancestral"] {
            assert_eq!(s.parse::<Sampler>().unwrap().to_string(), s);
        }
        assert_eq!("post".parse::<FmApply>().unwrap(), FmApply::Post);
        assert_eq!("recompute".parse::<Storage>().unwrap(), Storage::Recompute);
        assert!("x".parse::<Sampler>().is_err());
    }

    #[test]
    fn single_step_native_is_one_ddim_step() {
        let cfg = RunConfig {
            steps: 1,
            ..small_cfg()
        };
        let native = generate_native(&cfg).unwrap();
        let den = cfg.denoiser.build(8, 8, 1, 1).unwrap();
        let z_t = normal_grid(cfg.seed, streams::NATIVE_INIT, 2, 8, 8);
        let eps = den.predict(&z_t, 1000, &cfg.schedule, None).unwrap().eps_hat;
        let want = ddim_step(&z_t, &eps, 1000, 0, &cfg.schedule).unwrap();
        assert_eq!(native.latent, want);
        assert_eq!(native.denoiser_calls, 1);
    }

    #[test]
    fn diffused_sequence_modes_agree() {
        let cfg = small_cfg();
        let z = normal_grid(1, 0, 2, 8, 8);
        let a = diffuse_upsampled(&z, &cfg).unwrap();
        let b = diffuse_upsampled(
            &z,
            &RunConfig {
                storage: Storage::Recompute,
                ..cfg.clone()
            },
        )
        .unwrap();
        assert!(a.is_materialized() && !b.is_materialized());
        assert_eq!(a.at(0).unwrap().as_ref(), &upsample(&z, &cfg.resample_spec()).unwrap());
        for &t in a.timesteps() {
            assert_eq!(a.at(t).unwrap(), b.at(t).unwrap());
        }
        assert!(a.at(7).is_err());
    }

    #[test]
    fn memory_cap_enforced() {
        let cfg = RunConfig {
            memory_cap: 1000,
            ..small_cfg()
        };
        let z = normal_grid(1, 0, 2, 8, 8);
        assert!(matches!(
            diffuse_upsampled(&z, &cfg),
            Err(Error::Capacity { requested: 40960, .. })
        ));
        let lazy = RunConfig {
            storage: Storage::Recompute,
            ..cfg
        };
        assert!(diffuse_upsampled(&z, &lazy).is_ok());
    }

    #[test]
    fn unguided_pass_is_plain_chain() {
        let cfg = RunConfig {
            guidance: GuidanceMode::None,
            attn: AttnModConfig::off(),
            ..small_cfg()
        };
        let z = normal_grid(1, 0, 2, 8, 8);
        let seq = diffuse_upsampled(&z, &cfg).unwrap();
        let den = cfg.denoiser.build(8, 8, 2, 2).unwrap();
        let guided = denoise_guided(&seq, &cfg, den.as_ref(), None).unwrap();
        let (plain, calls) = reverse_chain(
            &seq.at_index(0).unwrap(),
            seq.timesteps(),
            cfg.sampler,
            den.as_ref(),
            &cfg.schedule,
            None,
            cfg.high_seed(),
            streams::HIGH_STEP,
        )
        .unwrap();
        assert_eq!(guided.latent, plain);
        assert_eq!(calls, guided.denoiser_calls);
        assert_eq!(guided.metrics.len(), cfg.steps);
    }

    #[test]
    fn zero_mask_tracks_diffused_path() {
        let cfg = small_cfg();
        let z = normal_grid(1, 0, 2, 8, 8);
        let seq = diffuse_upsampled(&z, &cfg).unwrap();
        let den = cfg.denoiser.build(8, 8, 2, 2).unwrap();
        let zero = crate::freq::HighPassFilter::constant(16, 16, 0.0).unwrap();
        let mut f = |zd: &LatentGrid, zf: &LatentGrid, _t: usize| crate::freq::fm_mix(zd, zf, &zero);
        let out = denoise_guided_with(&seq, &cfg, den.as_ref(), None, Some(&mut f)).unwrap();
        // With K ≡ 0 the guided input of every step is exactly z̃_t, so the
        // output is one DDIM step from z̃ at the last scheduled t.
        let last = *seq.timesteps().last().unwrap();
        let zl = seq.at(last).unwrap();
        let eps = den.predict(&zl, last, &cfg.schedule, None).unwrap().eps_hat;
        let want = ddim_step(&zl, &eps, last, 0, &cfg.schedule).unwrap();
        assert!(out.latent.max_abs_diff(&want) < 1e-9);
    }

    #[test]
    fn run_counts_calls_and_is_deterministic() {
        for guidance in [GuidanceMode::None, GuidanceMode::FrequencyModulation, GuidanceMode::SkipResidual { alpha_exp: 1.0 }] {
            let cfg = RunConfig {
                guidance,
                ..small_cfg()
            };
            let a = run(&cfg).unwrap();
            let b = run(&cfg).unwrap();
            assert_eq!(a.high_calls, cfg.steps);
            assert_eq!(a.metrics.last().unwrap().denoiser_calls, cfg.steps);
            assert_eq!(a.manifest.to_text(), b.manifest.to_text());
            assert_eq!(a.z_high, b.z_high);
        }
    }

    #[test]
    fn aspect_ratio_scales() {
        let cfg = RunConfig {
            scale_h: 2,
            scale_w: 4,
            ..small_cfg()
        };
        let art = run(&cfg).unwrap();
        assert_eq!(art.z_high.dims(), (2, 16, 32));
        assert_eq!(art.manifest.get("high"), Some("16x32"));
    }

    #[test]
    fn toy_run_substitutes_every_step() {
        let cfg = RunConfig {
            native_h: 8,
            native_w: 8,
            steps: 4,
            denoiser: DenoiserSpec::ToyAttentionNet(ToyNetConfig::default().with_attention_blocks(["up_block_0"])),
            ..RunConfig::default()
        };
        let art = run(&cfg).unwrap();
        assert_eq!(art.tap_log.len(), 4);
        assert!(art.tap_log.events.iter().all(|e| e.block == "up_block_0" && e.tokens == 256));
        let snap = art.snapshot.unwrap();
        assert_eq!(snap.native.tokens(), 64);
        assert_eq!(snap.modulated.tokens(), 256);
    }

    #[test]
    fn low_frequency_error_basics() {
        let z = normal_grid(9, 0, 1, 16, 16);
        assert_eq!(low_frequency_error(&z, &z, 0.5).unwrap(), 0.0);
        let zero = LatentGrid::zeros(1, 16, 16).unwrap();
        assert!((low_frequency_error(&zero, &z, 0.5).unwrap() - 1.0).abs() < 1e-15);
        // High-frequency-only differences are invisible.
        let checker = LatentGrid::from_fn(1, 16, 16, |_, y, x| if (y + x) % 2 == 0 { 1.0 } else { -1.0 }).unwrap();
        let z2 = z.add(&checker).unwrap();
        assert!(low_frequency_error(&z2, &z, 0.5).unwrap() < 1e-14);
        assert_eq!(low_band(8, 0.5), vec![7, 0, 1]);
    }

    #[test]
    fn manifest_roundtrip_and_metrics_csv() {
        let art = run(&small_cfg()).unwrap();
        let text = art.manifest.to_text();
        assert_eq!(Manifest::parse(&text).unwrap(), art.manifest);
        let csv = metrics_csv(&art.metrics);
        assert_eq!(parse_metrics_csv(&csv).unwrap(), art.metrics);
        assert!(csv.starts_with("step,t,lf_error,wall_ns,denoiser_calls\n"));
    }
}
