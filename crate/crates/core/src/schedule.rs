//! Noise schedule, forward diffusion and the DDIM / ancestral reverse steps.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::grid::LatentGrid;

pub const DEFAULT_TRAIN_STEPS: usize = 1000;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;

/// β_t for `t = 1..=T` together with the cumulative products ᾱ_t.
///
/// `alphas_bar[0] = 1` and `alphas_bar[t] = Π_{i≤t} (1 − β_i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    beta_start: f64,
    beta_end: f64,
    betas: Vec<f64>,
    alphas_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear β from `beta_start` to `beta_end` inclusive over `train_steps` steps.
    pub fn linear(train_steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if train_steps == 0 {
            return Err(Error::Parameter("schedule needs at least one step".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Parameter(format!(
                "need 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]"
            )));
        }
        let betas: Vec<f64> = if train_steps == 1 {
            vec![beta_start]
        } else {
            let step = (beta_end - beta_start) / (train_steps - 1) as f64;
            (0..train_steps).map(|i| beta_start + step * i as f64).collect()
        };
        let mut alphas_bar = Vec::with_capacity(train_steps + 1);
        alphas_bar.push(1.0);
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alphas_bar.push(acc);
        }
        Ok(Self {
            beta_start,
            beta_end,
            betas,
            alphas_bar,
        })
    }

    pub fn default_linear() -> Self {
        Self::linear(DEFAULT_TRAIN_STEPS, DEFAULT_BETA_START, DEFAULT_BETA_END)
            .expect("default schedule is valid")
    }

    /// Total number of training steps `T`.
    pub fn train_steps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta_start(&self) -> f64 {
        self.beta_start
    }

    pub fn beta_end(&self) -> f64 {
        self.beta_end
    }

    /// β_t for `1 ≤ t ≤ T`.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    /// ᾱ_t for `0 ≤ t ≤ T`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alphas_bar[t]
    }

    pub fn alphas_bar(&self) -> &[f64] {
        &self.alphas_bar
    }

    fn check_step(&self, t: usize, min: usize) -> Result<()> {
        if t < min || t > self.train_steps() {
            Err(Error::Parameter(format!(
                "timestep {t} outside [{min}, {}]",
                self.train_steps()
            )))
        } else {
            Ok(())
        }
    }

    /// Descending inference timesteps for `steps` sampler steps:
    /// `t_i = round(i·T/steps)` for `i = steps..1`.
    pub fn inference_timesteps(&self, steps: usize) -> Result<Vec<usize>> {
        let total = self.train_steps();
        if steps == 0 || steps > total {
            return Err(Error::Parameter(format!(
                "inference steps {steps} must lie in [1, {total}]"
            )));
        }
        Ok((1..=steps)
            .rev()
            .map(|i| (2 * i * total + steps) / (2 * steps))
            .collect())
    }

    /// Text header recorded in run manifests.
    pub fn header(&self, steps: usize) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "schedule.T={}", self.train_steps());
        let _ = writeln!(s, "schedule.beta_start={:e}", self.beta_start);
        let _ = writeln!(s, "schedule.beta_end={:e}", self.beta_end);
        let _ = writeln!(s, "schedule.steps={steps}");
        let _ = writeln!(s, "schedule.stride={}", self.train_steps() as f64 / steps as f64);
        s
    }

    /// Parses a header produced by [`NoiseSchedule::header`]; returns the schedule and step count.
    pub fn from_header(text: &str) -> Result<(Self, usize)> {
        let field = |key: &str| -> Result<&str> {
            text.lines()
                .find_map(|l| l.strip_prefix(key).and_then(|r| r.strip_prefix('=')))
                .ok_or_else(|| Error::Format(format!("missing {key}")))
        };
        let bad = |k: &str| Error::Format(format!("unparsable {k}"));
        let t: usize = field("schedule.T")?.parse().map_err(|_| bad("T"))?;
        let b0: f64 = field("schedule.beta_start")?
            .parse()
            .map_err(|_| bad("beta_start"))?;
        let b1: f64 = field("schedule.beta_end")?.parse().map_err(|_| bad("beta_end"))?;
        let steps: usize = field("schedule.steps")?.parse().map_err(|_| bad("steps"))?;
        Ok((Self::linear(t, b0, b1)?, steps))
    }
}

/// One forward step with an explicit noise rate: `√(1−β)·z + √β·noise`.
pub fn diffuse_with_beta(z_prev: &LatentGrid, beta: f64, noise: &LatentGrid) -> Result<LatentGrid> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::Parameter(format!("beta {beta} outside [0, 1]")));
    }
    z_prev.axpby((1.0 - beta).sqrt(), noise, beta.sqrt())
}

/// Forward kernel q(z_t | z_{t−1}) applied with the given noise draw.
pub fn diffuse_step(
    z_prev: &LatentGrid,
    t: usize,
    sched: &NoiseSchedule,
    noise: &LatentGrid,
) -> Result<LatentGrid> {
    sched.check_step(t, 1)?;
    diffuse_with_beta(z_prev, sched.beta(t), noise)
}

/// Closed-form marginal q(z_t | z_0): `√ᾱ_t·z0 + √(1−ᾱ_t)·noise`.
pub fn diffuse_marginal(
    z0: &LatentGrid,
    t: usize,
    sched: &NoiseSchedule,
    noise: &LatentGrid,
) -> Result<LatentGrid> {
    sched.check_step(t, 0)?;
    z0.ensure_same_dims(noise, "noise")?;
    if t == 0 {
        return Ok(z0.clone());
    }
    let ab = sched.alpha_bar(t);
    z0.axpby(ab.sqrt(), noise, (1.0 - ab).sqrt())
}

/// Clean-latent estimate `ẑ0 = (z_t − √(1−ᾱ_t)·ε̂)/√ᾱ_t`.
pub fn predict_x0(
    z_t: &LatentGrid,
    eps_hat: &LatentGrid,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<LatentGrid> {
    sched.check_step(t, 0)?;
    let ab = sched.alpha_bar(t);
    if ab <= 0.0 {
        return Err(Error::Singularity(format!("alpha_bar[{t}] = 0")));
    }
    let inv = 1.0 / ab.sqrt();
    z_t.axpby(inv, eps_hat, -(1.0 - ab).sqrt() * inv)
}

/// Deterministic DDIM update from `t` to `t_prev < t`.
pub fn ddim_step(
    z_t: &LatentGrid,
    eps_hat: &LatentGrid,
    t: usize,
    t_prev: usize,
    sched: &NoiseSchedule,
) -> Result<LatentGrid> {
    if t_prev >= t {
        return Err(Error::Parameter(format!("need t_prev < t, got {t_prev} >= {t}")));
    }
    sched.check_step(t, 1)?;
    z_t.ensure_same_dims(eps_hat, "eps_hat")?;
    let x0 = predict_x0(z_t, eps_hat, t, sched)?;
    if t_prev == 0 {
        return Ok(x0);
    }
    let ab_prev = sched.alpha_bar(t_prev);
    x0.axpby(ab_prev.sqrt(), eps_hat, (1.0 - ab_prev).sqrt())
}

fn posterior_step(
    z_t: &LatentGrid,
    eps_hat: &LatentGrid,
    t: usize,
    beta: f64,
    last: bool,
    sched: &NoiseSchedule,
    noise: &LatentGrid,
) -> Result<LatentGrid> {
    z_t.ensure_same_dims(eps_hat, "eps_hat")?;
    z_t.ensure_same_dims(noise, "noise")?;
    let ab = sched.alpha_bar(t);
    if ab >= 1.0 {
        return Err(Error::Singularity(format!("alpha_bar[{t}] = 1")));
    }
    let inv_sqrt_alpha = 1.0 / (1.0 - beta).sqrt();
    let mean = z_t.axpby(inv_sqrt_alpha, eps_hat, -inv_sqrt_alpha * beta / (1.0 - ab).sqrt())?;
    if last {
        Ok(mean)
    } else {
        mean.axpby(1.0, noise, beta.sqrt())
    }
}

/// DDPM ancestral step `t → t−1` with posterior variance fixed to β_t.
/// No noise is injected at `t = 1`.
pub fn ancestral_step(
    z_t: &LatentGrid,
    eps_hat: &LatentGrid,
    t: usize,
    sched: &NoiseSchedule,
    noise: &LatentGrid,
) -> Result<LatentGrid> {
    sched.check_step(t, 1)?;
    posterior_step(z_t, eps_hat, t, sched.beta(t), t == 1, sched, noise)
}

/// Ancestral step across a strided gap `t → t_prev`, using the effective
/// rate `1 − ᾱ_t/ᾱ_{t_prev}`. Reduces to [`ancestral_step`] when `t_prev = t − 1`.
pub fn ancestral_step_strided(
    z_t: &LatentGrid,
    eps_hat: &LatentGrid,
    t: usize,
    t_prev: usize,
    sched: &NoiseSchedule,
    noise: &LatentGrid,
) -> Result<LatentGrid> {
    if t_prev >= t {
        return Err(Error::Parameter(format!("need t_prev < t, got {t_prev} >= {t}")));
    }
    sched.check_step(t, 1)?;
    if t_prev + 1 == t {
        return ancestral_step(z_t, eps_hat, t, sched, noise);
    }
    let beta = 1.0 - sched.alpha_bar(t) / sched.alpha_bar(t_prev);
    posterior_step(z_t, eps_hat, t, beta, t_prev == 0, sched, noise)
}
