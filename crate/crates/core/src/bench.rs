//! Latency harness: repeated end-to-end runs per (size, mode), summarized by
//! median and interquartile range.

use std::fmt;
use std::fmt::Write as _;
use std::fs::OpenOptions;
use std::io::{BufRead, BufReader, Write as _};
use std::path::Path;
use std::str::FromStr;
use std::time::{Duration, Instant};

use rayon::prelude::*;

use crate::attention::AttnModConfig;
use crate::denoiser::{Denoiser, DenoiserSpec};
use crate::error::{Error, Result};
use crate::freq::GuidanceMode;
use crate::freq::{fm_mix, fm_mix_conv, fm_mix_lowpass, make_filter, FilterParams};
use crate::grid::LatentGrid;
use crate::pipeline::{denoise_guided, default_analytic_spec, parse_dims, run, DiffusedSequence, RunConfig};
use crate::rng::normal_grid;

pub const BENCH_SCHEMA: &str = "# famdiff-bench v1";
pub const BENCH_CSV_HEADER: &str = "size,scale,mode,steps,median_ns,iqr_ns,calls";
/// Coarsest timer step the harness accepts.
pub const MAX_TIMER_RESOLUTION: Duration = Duration::from_micros(1);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BenchSize {
    pub native_h: usize,
    pub native_w: usize,
    pub scale_h: usize,
    pub scale_w: usize,
}

impl fmt::Display for BenchSize {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}@{}x{}", self.native_h, self.native_w, self.scale_h, self.scale_w)
    }
}

impl FromStr for BenchSize {
    type Err = Error;

    /// `HxW@S` or `HxW@SHxSW`; a missing scale means 2.
    fn from_str(s: &str) -> Result<Self> {
        let (native, scale) = s.split_once('@').unwrap_or((s, "2"));
        let (native_h, native_w) = parse_dims(native)?;
        let (scale_h, scale_w) = match scale.parse::<usize>() {
            Ok(k) if k > 0 => (k, k),
            _ => parse_dims(scale)?,
        };
        Ok(Self {
            native_h,
            native_w,
            scale_h,
            scale_w,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchMode {
    pub guidance: GuidanceMode,
    pub attn: AttnModConfig,
}

impl fmt::Display for BenchMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}+attn:{}", self.guidance, self.attn.mode)
    }
}

impl FromStr for BenchMode {
    type Err = Error;

    /// `<guidance>` or `<guidance>+attn:<mode>`, e.g. `fm+attn:swap`.
    fn from_str(s: &str) -> Result<Self> {
        let (g, attn) = match s.split_once('+') {
            Some((g, a)) => {
                let mode = a.strip_prefix("attn:").unwrap_or(a);
                (g, AttnModConfig::default().with_mode(mode.parse()?))
            }
            None => (s, AttnModConfig::off()),
        };
        Ok(Self {
            guidance: g.parse()?,
            attn,
        })
    }
}

#[derive(Debug, Clone)]
pub struct BenchPlan {
    pub sizes: Vec<BenchSize>,
    pub modes: Vec<BenchMode>,
    pub repeats: usize,
    pub warmup: usize,
    pub steps: usize,
    pub seed: u64,
    pub denoiser: DenoiserSpec,
    /// Run configurations concurrently; timings then include contention.
    pub parallel: bool,
}

impl Default for BenchPlan {
    fn default() -> Self {
        Self {
            sizes: vec![BenchSize {
                native_h: 32,
                native_w: 32,
                scale_h: 2,
                scale_w: 2,
            }],
            modes: vec![
                BenchMode {
                    guidance: GuidanceMode::None,
                    attn: AttnModConfig::off(),
                },
                BenchMode {
                    guidance: GuidanceMode::FrequencyModulation,
                    attn: AttnModConfig::off(),
                },
            ],
            repeats: 5,
            warmup: 1,
            steps: 50,
            seed: 0,
            denoiser: default_analytic_spec(),
            parallel: false,
        }
    }
}

impl BenchPlan {
    pub fn validate(&self) -> Result<()> {
        if self.repeats < 3 {
            return Err(Error::Parameter(format!("repeats must be >= 3, got {}", self.repeats)));
        }
        if self.warmup < 1 {
            return Err(Error::Parameter("warmup must be >= 1".into()));
        }
        if self.sizes.is_empty() || self.modes.is_empty() {
            return Err(Error::Parameter("bench plan needs at least one size and one mode".into()));
        }
        Ok(())
    }

    fn config(&self, size: &BenchSize, mode: &BenchMode) -> RunConfig {
        RunConfig {
            native_h: size.native_h,
            native_w: size.native_w,
            scale_h: size.scale_h,
            scale_w: size.scale_w,
            steps: self.steps,
            guidance: mode.guidance,
            attn: mode.attn.clone(),
            seed: self.seed,
            denoiser: self.denoiser.clone(),
            ..RunConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub size: String,
    pub scale: String,
    pub mode: String,
    pub steps: usize,
    pub median_ns: u64,
    pub iqr_ns: u64,
    pub calls: usize,
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[u64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    let frac = pos - lo as f64;
    sorted[lo] as f64 * (1.0 - frac) + sorted[hi] as f64 * frac
}

/// `(median, q75 − q25)` of a non-empty sample.
pub fn median_iqr(samples: &[u64]) -> (u64, u64) {
    let mut s = samples.to_vec();
    s.sort_unstable();
    let med = quantile(&s, 0.5).round() as u64;
    let iqr = (quantile(&s, 0.75) - quantile(&s, 0.25)).round() as u64;
    (med, iqr)
}

/// Smallest non-zero step observed on the monotonic clock.
pub fn timer_resolution() -> Duration {
    let mut best = Duration::MAX;
    for _ in 0..200 {
        let a = Instant::now();
        let mut b = Instant::now();
        while b == a {
            b = Instant::now();
        }
        best = best.min(b - a);
    }
    best
}

fn check_timer() -> Result<()> {
    let res = timer_resolution();
    if res > MAX_TIMER_RESOLUTION {
        return Err(Error::Bench(format!("timer resolution {res:?} is coarser than 1µs")));
    }
    Ok(())
}

fn bench_one(plan: &BenchPlan, size: &BenchSize, mode: &BenchMode) -> Result<BenchRow> {
    let cfg = plan.config(size, mode);
    for _ in 0..plan.warmup {
        run(&cfg)?;
    }
    let mut times = Vec::with_capacity(plan.repeats);
    let mut calls = None;
    for _ in 0..plan.repeats {
        let start = Instant::now();
        let art = run(&cfg)?;
        times.push(start.elapsed().as_nanos() as u64);
        if art.high_calls != plan.steps || calls.is_some_and(|c| c != art.high_calls) {
            return Err(Error::Bench(format!(
                "expected {} high-resolution denoiser calls, got {}",
                plan.steps, art.high_calls
            )));
        }
        calls = Some(art.high_calls);
    }
    let (median_ns, iqr_ns) = median_iqr(&times);
    Ok(BenchRow {
        size: format!("{}x{}", size.native_h, size.native_w),
        scale: format!("{}x{}", size.scale_h, size.scale_w),
        mode: mode.to_string(),
        steps: plan.steps,
        median_ns,
        iqr_ns,
        calls: calls.unwrap_or(0),
    })
}

/// Runs every (size, mode) pair of the plan.
pub fn run_bench(plan: &BenchPlan) -> Result<Vec<BenchRow>> {
    plan.validate()?;
    check_timer()?;
    let jobs: Vec<(&BenchSize, &BenchMode)> = plan
        .sizes
        .iter()
        .flat_map(|s| plan.modes.iter().map(move |m| (s, m)))
        .collect();
    if plan.parallel {
        jobs.par_iter().map(|(s, m)| bench_one(plan, s, m)).collect()
    } else {
        jobs.iter().map(|(s, m)| bench_one(plan, s, m)).collect()
    }
}

fn row_line(r: &BenchRow) -> String {
    format!(
        "{},{},{},{},{},{},{}",
        r.size, r.scale, r.mode, r.steps, r.median_ns, r.iqr_ns, r.calls
    )
}

/// Full CSV: schema line, optional caveat comment, header, rows.
pub fn bench_csv(rows: &[BenchRow], parallel: bool) -> String {
    let mut s = format!("{BENCH_SCHEMA}\n");
    if parallel {
        s.push_str("# parallel: configurations ran concurrently; timings include contention\n");
    }
    s.push_str(BENCH_CSV_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(s, "{}", row_line(r));
    }
    s
}

/// Appends rows to `path`, writing the schema and header first if the file
/// is new or empty. An existing file with a different schema is rejected.
pub fn append_bench_csv(path: impl AsRef<Path>, rows: &[BenchRow], parallel: bool) -> Result<()> {
    let path = path.as_ref();
    let existing = path.exists() && std::fs::metadata(path)?.len() > 0;
    if existing {
        let mut first = String::new();
        BufReader::new(std::fs::File::open(path)?).read_line(&mut first)?;
        if first.trim_end() != BENCH_SCHEMA {
            return Err(Error::Format(format!(
                "{} has schema {:?}, expected {BENCH_SCHEMA:?}",
                path.display(),
                first.trim_end()
            )));
        }
        let mut f = OpenOptions::new().append(true).open(path)?;
        if parallel {
            writeln!(f, "# parallel: configurations ran concurrently; timings include contention")?;
        }
        for r in rows {
            writeln!(f, "{}", row_line(r))?;
        }
        Ok(())
    } else {
        std::fs::write(path, bench_csv(rows, parallel))?;
        Ok(())
    }
}

/// Parses data rows from a bench CSV, skipping comments and headers.
pub fn parse_bench_csv(text: &str) -> Result<Vec<BenchRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(BENCH_SCHEMA) {
        return Err(Error::Format("missing bench schema line".into()));
    }
    lines
        .filter(|l| !l.starts_with('#') && *l != BENCH_CSV_HEADER && !l.is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            let bad = || Error::Format(format!("bad bench row {l:?}"));
            if f.len() != 7 {
                return Err(bad());
            }
            Ok(BenchRow {
                size: f[0].into(),
                scale: f[1].into(),
                mode: f[2].into(),
                steps: f[3].parse().map_err(|_| bad())?,
                median_ns: f[4].parse().map_err(|_| bad())?,
                iqr_ns: f[5].parse().map_err(|_| bad())?,
                calls: f[6].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

/// Median per-step wall time of the guided high-resolution pass, taking the
/// median over `repeats` passes of each pass's median step.
pub fn median_step_ns(
    seq: &DiffusedSequence,
    cfg: &RunConfig,
    den: &dyn Denoiser,
    warmup: usize,
    repeats: usize,
) -> Result<u64> {
    for _ in 0..warmup {
        denoise_guided(seq, cfg, den, None)?;
    }
    let mut per_pass = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let pass = denoise_guided(seq, cfg, den, None)?;
        let steps: Vec<u64> = pass.metrics.iter().map(|m| m.wall_ns).collect();
        per_pass.push(median_iqr(&steps).0);
    }
    Ok(median_iqr(&per_pass).0)
}

type MixFn = fn(&LatentGrid, &LatentGrid, &crate::freq::HighPassFilter) -> Result<LatentGrid>;

/// The three FM kernels, timed per call on `channels×h×w` inputs with the
/// filter at `t = T/2`. One row per (size, kernel); `calls` is 0.
pub fn mix_kernel_rows(
    sizes: &[(usize, usize)],
    channels: usize,
    warmup: usize,
    repeats: usize,
) -> Result<Vec<BenchRow>> {
    check_timer()?;
    let kernels: [(&str, MixFn); 3] = [
        ("kernel:fm_mix", fm_mix),
        ("kernel:fm_mix_conv", fm_mix_conv),
        ("kernel:fm_mix_lowpass", fm_mix_lowpass),
    ];
    let mut rows = Vec::new();
    for &(h, w) in sizes {
        let a = normal_grid(1, 0, channels, h, w);
        let b = normal_grid(2, 0, channels, h, w);
        let filt = make_filter(&FilterParams::new(0.5, 1000, h, w)?, 500)?;
        for (name, f) in kernels {
            for _ in 0..warmup {
                f(&a, &b, &filt)?;
            }
            let mut times = Vec::with_capacity(repeats);
            for _ in 0..repeats {
                let start = Instant::now();
                std::hint::black_box(f(&a, &b, &filt)?);
                times.push(start.elapsed().as_nanos() as u64);
            }
            let (median_ns, iqr_ns) = median_iqr(&times);
            rows.push(BenchRow {
                size: format!("{channels}x{h}x{w}"),
                scale: "1x1".into(),
                mode: name.into(),
                steps: 1,
                median_ns,
                iqr_ns,
                calls: 0,
            });
        }
    }
    Ok(rows)
}

/// Median per-step times of two configurations over the same diffused
/// sequence, with passes interleaved so both see the same machine state.
/// Returns `(median_a, median_b, median of per-round b/a ratios)`.
pub fn paired_step_ns(
    seq: &DiffusedSequence,
    cfg_a: &RunConfig,
    cfg_b: &RunConfig,
    den: &dyn Denoiser,
    warmup: usize,
    repeats: usize,
) -> Result<(u64, u64, f64)> {
    let pass_median = |cfg: &RunConfig| -> Result<u64> {
        let pass = denoise_guided(seq, cfg, den, None)?;
        let steps: Vec<u64> = pass.metrics.iter().map(|m| m.wall_ns).collect();
        Ok(median_iqr(&steps).0)
    };
    for _ in 0..warmup {
        pass_median(cfg_a)?;
        pass_median(cfg_b)?;
    }
    let (mut a, mut b, mut ratios) = (Vec::new(), Vec::new(), Vec::new());
    for _ in 0..repeats.max(1) {
        let ta = pass_median(cfg_a)?;
        let tb = pass_median(cfg_b)?;
        ratios.push(tb as f64 / ta.max(1) as f64);
        a.push(ta);
        b.push(tb);
    }
    ratios.sort_by(f64::total_cmp);
    Ok((median_iqr(&a).0, median_iqr(&b).0, ratios[ratios.len() / 2]))
}
