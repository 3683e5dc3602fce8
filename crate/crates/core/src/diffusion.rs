//! Discrete variance-preserving diffusion: schedule, forward noising, Tweedie
//! posterior-mean prediction, DDIM stepping and a closed-form Gaussian score
//! used to verify samplers without a trained network.
//!
//! Timesteps are 1-based: `t` ranges over `1..=T` and `alpha_bar(0) == 1`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::Real;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        make_schedule(self.steps, self.beta_start, self.beta_end)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

pub fn make_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps < 1 {
        return Err(Error::config("schedule.steps", "must be at least 1"));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::config(
            "schedule.beta_start/beta_end",
            format!("need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"),
        ));
    }
    let beta: Vec<f64> = if steps == 1 {
        vec![beta_start]
    } else {
        (0..steps)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
            .collect()
    };
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let alpha_bar = alpha
        .iter()
        .scan(1.0, |acc, a| {
            *acc *= a;
            Some(*acc)
        })
        .collect();
    Ok(NoiseSchedule { beta, alpha, alpha_bar })
}

impl NoiseSchedule {
    /// Schedule from explicit cumulative products `alpha_bar[t - 1]`.
    pub fn from_alpha_bar(alpha_bar: Vec<f64>) -> Result<Self> {
        if alpha_bar.is_empty() {
            return Err(Error::config("alpha_bar", "empty"));
        }
        let mut prev = 1.0;
        let mut alpha = Vec::with_capacity(alpha_bar.len());
        for &ab in &alpha_bar {
            if !(ab > 0.0 && ab <= prev) {
                return Err(Error::config("alpha_bar", "must be non-increasing in (0, 1]"));
            }
            alpha.push(ab / prev);
            prev = ab;
        }
        let beta = alpha.iter().map(|a| 1.0 - a).collect();
        Ok(NoiseSchedule { beta, alpha, alpha_bar })
    }

    pub fn len(&self) -> usize {
        self.alpha_bar.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alpha_bar.is_empty()
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alpha
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.len() {
            Err(Error::Input(format!("timestep {t} outside 1..={}", self.len())))
        } else {
            Ok(())
        }
    }

    /// `alpha_bar_t` with the `alpha_bar_0 = 1` convention.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }
}

/// Descending timesteps for a strided sampler: `round(j * T / steps)` for
/// `j = 1..=steps`, deduplicated.
pub fn inference_timesteps(t_max: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 {
        return Err(Error::config("steps", "must be at least 1"));
    }
    let mut ts: Vec<usize> = (1..=steps)
        .map(|j| ((j as f64) * t_max as f64 / steps as f64).round() as usize)
        .map(|t| t.clamp(1, t_max))
        .collect();
    ts.dedup();
    ts.reverse();
    Ok(ts)
}

/// `sqrt(alpha_bar_t) * z0 + sqrt(1 - alpha_bar_t) * eps`
pub fn forward_noise<T: Real>(z0: &[T], t: usize, eps: &[T], sched: &NoiseSchedule) -> Result<Vec<T>> {
    sched.check_t(t)?;
    if z0.len() != eps.len() {
        return Err(Error::Shape(format!("z0 {} vs eps {}", z0.len(), eps.len())));
    }
    let ab = sched.alpha_bar(t);
    let (a, b) = (T::of(ab.sqrt()), T::of((1.0 - ab).sqrt()));
    Ok(z0.iter().zip(eps).map(|(&z, &e)| a * z + b * e).collect())
}

/// Tweedie estimate of the clean latent from `z_t` and predicted noise.
pub fn tweedie<T: Real>(z_t: &[T], eps_hat: &[T], t: usize, sched: &NoiseSchedule) -> Result<Vec<T>> {
    sched.check_t(t)?;
    if z_t.len() != eps_hat.len() {
        return Err(Error::Shape(format!("z_t {} vs eps_hat {}", z_t.len(), eps_hat.len())));
    }
    let ab = sched.alpha_bar(t);
    if ab <= 0.0 {
        return Err(Error::Numeric(format!("alpha_bar({t}) = {ab}")));
    }
    let inv = T::of(1.0 / ab.sqrt());
    let b = T::of((1.0 - ab).sqrt());
    Ok(z_t.iter().zip(eps_hat).map(|(&z, &e)| (z - b * e) * inv).collect())
}

/// Noise implied by `z_t` and a clean estimate: the inverse of [`tweedie`]
/// in its second argument.
pub fn eps_from_z0<T: Real>(z_t: &[T], z0: &[T], t: usize, sched: &NoiseSchedule) -> Result<Vec<T>> {
    sched.check_t(t)?;
    if z_t.len() != z0.len() {
        return Err(Error::Shape(format!("z_t {} vs z0 {}", z_t.len(), z0.len())));
    }
    let ab = sched.alpha_bar(t);
    if ab >= 1.0 {
        return Err(Error::Numeric(format!("alpha_bar({t}) = {ab} leaves no noise")));
    }
    let a = T::of(ab.sqrt());
    let inv = T::of(1.0 / (1.0 - ab).sqrt());
    Ok(z_t.iter().zip(z0).map(|(&z, &c)| (z - a * c) * inv).collect())
}

/// DDIM noise scale between `t` and an earlier timestep `prev < t`.
pub fn ddim_sigma_between(t: usize, prev: usize, sched: &NoiseSchedule) -> Result<f64> {
    sched.check_t(t)?;
    if prev >= t {
        return Err(Error::Input(format!("previous timestep {prev} must be below {t}")));
    }
    let (ab_t, ab_prev) = (sched.alpha_bar(t), sched.alpha_bar(prev));
    let ratio = ((1.0 - ab_prev) / (1.0 - ab_t)).max(0.0);
    let decay = (1.0 - ab_t / ab_prev).max(0.0);
    Ok(ratio.sqrt() * decay.sqrt())
}

/// DDIM noise scale for the single step `t -> t - 1`.
pub fn ddim_sigma(t: usize, sched: &NoiseSchedule) -> Result<f64> {
    ddim_sigma_between(t, t - 1, sched)
}

/// One DDIM update from timestep `t` to `prev`:
///
/// `z_prev = sqrt(ab_prev) * z0_hat + sqrt(1 - ab_prev - eta * delta^2) * eps_hat + eta * delta * noise`
///
/// With `eta == 0` the `noise` argument is not read.
#[allow(clippy::too_many_arguments)]
pub fn ddim_step<T: Real>(
    z0_hat: &[T],
    eps_hat: &[T],
    t: usize,
    prev: usize,
    eta: f64,
    noise: &[T],
    sched: &NoiseSchedule,
) -> Result<Vec<T>> {
    if z0_hat.len() != eps_hat.len() {
        return Err(Error::Shape(format!(
            "z0_hat {} vs eps_hat {}",
            z0_hat.len(),
            eps_hat.len()
        )));
    }
    if !(0.0..=1.0).contains(&eta) {
        return Err(Error::Parameter(format!("eta = {eta} outside [0, 1]")));
    }
    let delta = ddim_sigma_between(t, prev, sched)?;
    let ab_prev = sched.alpha_bar(prev);
    let mut radicand = 1.0 - ab_prev - eta * delta * delta;
    if radicand < 0.0 {
        // rounding at the ab_prev == 1 boundary
        if radicand > -1e-12 {
            radicand = 0.0;
        } else {
            return Err(Error::Parameter(format!(
                "negative DDIM radicand {radicand:e} at t = {t}, eta = {eta}"
            )));
        }
    }
    let a = T::of(ab_prev.sqrt());
    let b = T::of(radicand.sqrt());
    if eta == 0.0 {
        return Ok(z0_hat.iter().zip(eps_hat).map(|(&z, &e)| a * z + b * e).collect());
    }
    if noise.len() != z0_hat.len() {
        return Err(Error::Shape(format!(
            "noise {} vs z0_hat {}",
            noise.len(),
            z0_hat.len()
        )));
    }
    let c = T::of(eta * delta);
    Ok(z0_hat
        .iter()
        .zip(eps_hat)
        .zip(noise)
        .map(|((&z, &e), &n)| a * z + b * e + c * n)
        .collect())
}

/// Data distribution `N(mu, sigma0^2 I)`; its exact noise predictor stands in
/// for a trained network when checking samplers.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianOracle {
    pub mu: Vec<f64>,
    pub sigma0: f64,
}

impl GaussianOracle {
    pub fn new(mu: Vec<f64>, sigma0: f64) -> Result<Self> {
        if !(sigma0 > 0.0 && sigma0.is_finite()) {
            return Err(Error::config("sigma0", "must be positive and finite"));
        }
        Ok(GaussianOracle { mu, sigma0 })
    }

    /// `E[z0 | z_t]`.
    pub fn posterior_mean(&self, z_t: &[f64], t: usize, sched: &NoiseSchedule) -> Result<Vec<f64>> {
        sched.check_t(t)?;
        if z_t.len() != self.mu.len() {
            return Err(Error::Shape(format!("z_t {} vs mu {}", z_t.len(), self.mu.len())));
        }
        let ab = sched.alpha_bar(t);
        let s2 = self.sigma0 * self.sigma0;
        let gain = ab.sqrt() * s2 / (ab * s2 + 1.0 - ab);
        Ok(z_t
            .iter()
            .zip(&self.mu)
            .map(|(&z, &m)| m + gain * (z - ab.sqrt() * m))
            .collect())
    }
}

/// Exact optimal noise prediction for Gaussian data.
pub fn oracle_eps(z_t: &[f64], t: usize, oracle: &GaussianOracle, sched: &NoiseSchedule) -> Result<Vec<f64>> {
    let mean = oracle.posterior_mean(z_t, t, sched)?;
    let ab = sched.alpha_bar(t);
    let inv = 1.0 / (1.0 - ab).sqrt();
    Ok(z_t
        .iter()
        .zip(&mean)
        .map(|(&z, &m)| (z - ab.sqrt() * m) * inv)
        .collect())
}

/// Deterministic-or-stochastic DDIM sampling driven by the Gaussian oracle.
pub fn sample_with_oracle(
    z_init: &[f64],
    oracle: &GaussianOracle,
    sched: &NoiseSchedule,
    steps: usize,
    eta: f64,
    mut noise: impl FnMut(usize) -> Vec<f64>,
) -> Result<Vec<f64>> {
    let ts = inference_timesteps(sched.len(), steps)?;
    let mut z = z_init.to_vec();
    for (j, &t) in ts.iter().enumerate() {
        let prev = ts.get(j + 1).copied().unwrap_or(0);
        let eps = oracle_eps(&z, t, oracle, sched)?;
        let z0 = tweedie(&z, &eps, t, sched)?;
        let n = if eta > 0.0 { noise(j) } else { Vec::new() };
        z = ddim_step(&z0, &eps, t, prev, eta, &n, sched)?;
    }
    Ok(z)
}
