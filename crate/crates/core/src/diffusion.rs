//! Noise schedules, the forward noising process, the learned reverse process
//! and ancestral sampling.
//!
//! Timesteps are 1-indexed (`t = 1..=T`) with the convention `alpha_bar(0) = 1`,
//! which makes the posterior variance at `t = 1` exactly zero.

use crate::denoiser::DenoiserParams;
use crate::error::{Error, Result};
use crate::rng::RngState;

/// Noise-schedule coefficients: `beta[t]`, `alpha[t] = 1 - beta[t]` and the
/// cumulative product `alpha_bar[t]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

/// Serializable description of a linear schedule (stored in checkpoints).
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ScheduleConfig {
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            timesteps: 200,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<Schedule> {
        Schedule::linear(self.timesteps, self.beta_start, self.beta_end)
    }
}

impl Schedule {
    /// Linear interpolation from `beta_start` to `beta_end` over `t` steps.
    pub fn linear(t: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if t == 0 {
            return Err(Error::Config("schedule needs at least one timestep".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end <= 1.0) {
            return Err(Error::Config(format!(
                "betas must satisfy 0 < beta_start <= beta_end <= 1, got {beta_start}..{beta_end}"
            )));
        }
        let betas = if t == 1 {
            vec![beta_start]
        } else {
            let step = (beta_end - beta_start) / (t - 1) as f64;
            (0..t).map(|i| beta_start + i as f64 * step).collect()
        };
        Self::from_betas(betas)
    }

    /// Build from explicit per-step betas.
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::Config("schedule needs at least one timestep".into()));
        }
        if betas.iter().any(|&b| !(b > 0.0 && b <= 1.0)) {
            return Err(Error::Config("every beta must lie in (0, 1]".into()));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(betas.len());
        let mut prod = 1.0;
        for &a in &alphas {
            prod *= a;
            alpha_bars.push(prod);
        }
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
        })
    }

    /// Number of timesteps `T`.
    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        false // construction guarantees at least one step
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.len() {
            return Err(Error::Input(format!(
                "timestep {t} out of range 1..={}",
                self.len()
            )));
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// Posterior variance `beta_tilde(t) = (1 - alpha_bar(t-1)) / (1 - alpha_bar(t)) * beta(t)`;
    /// zero at `t = 1` by the `alpha_bar(0) = 1` convention.
    pub fn posterior_variance(&self, t: usize) -> f64 {
        (1.0 - self.alpha_bar(t - 1)) / (1.0 - self.alpha_bar(t)) * self.beta(t)
    }
}

/// One forward (noising) step: `x_t = sqrt(1 - beta_t) x_{t-1} + sqrt(beta_t) eps`.
pub fn forward_step(schedule: &Schedule, x_prev: &[f64], t: usize, eps: &[f64]) -> Result<Vec<f64>> {
    schedule.check_t(t)?;
    if x_prev.len() != eps.len() {
        return Err(Error::Input("x_prev and eps length mismatch".into()));
    }
    let beta = schedule.beta(t);
    let keep = (1.0 - beta).sqrt();
    let add = beta.sqrt();
    Ok(x_prev
        .iter()
        .zip(eps)
        .map(|(x, e)| keep * x + add * e)
        .collect())
}

/// Closed-form marginal of the forward process:
/// `x_t = sqrt(alpha_bar_t) x_0 + sqrt(1 - alpha_bar_t) eps`.
pub fn q_sample(schedule: &Schedule, x0: &[f64], t: usize, eps: &[f64]) -> Result<Vec<f64>> {
    schedule.check_t(t)?;
    if x0.len() != eps.len() {
        return Err(Error::Input("x0 and eps length mismatch".into()));
    }
    let ab = schedule.alpha_bar(t);
    let keep = ab.sqrt();
    let add = (1.0 - ab).sqrt();
    Ok(x0
        .iter()
        .zip(eps)
        .map(|(x, e)| keep * x + add * e)
        .collect())
}

/// One learned reverse step. `z` is the injected standard normal, ignored at
/// `t = 1` where the step is deterministic.
pub fn reverse_step(
    params: &DenoiserParams,
    schedule: &Schedule,
    x_t: &[f64],
    t: usize,
    c: usize,
    z: &[f64],
) -> Result<Vec<f64>> {
    schedule.check_t(t)?;
    if z.len() != x_t.len() {
        return Err(Error::Input("x_t and z length mismatch".into()));
    }
    let eps_hat = params.forward(x_t, t, c)?;
    if eps_hat.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!(
            "non-finite noise prediction at timestep {t}"
        )));
    }
    let beta = schedule.beta(t);
    let coef = beta / (1.0 - schedule.alpha_bar(t)).sqrt();
    let inv_sqrt_alpha = 1.0 / schedule.alpha(t).sqrt();
    let sigma = schedule.posterior_variance(t).sqrt();
    let mut out = Vec::with_capacity(x_t.len());
    for i in 0..x_t.len() {
        let mean = inv_sqrt_alpha * (x_t[i] - coef * eps_hat[i]);
        out.push(if t > 1 { mean + sigma * z[i] } else { mean });
    }
    Ok(out)
}

/// Ancestral sampling: start from pure noise and apply the learned reverse
/// step from `t = T` down to `t = 1`. Deterministic given the rng state.
pub fn sample(
    params: &DenoiserParams,
    schedule: &Schedule,
    c: usize,
    rng: &mut RngState,
) -> Result<Vec<f64>> {
    let d = params.arch().data_dim;
    let mut x = rng.gaussian_vec(d);
    let zeros = vec![0.0; d];
    for t in (1..=schedule.len()).rev() {
        let z = if t > 1 { rng.gaussian_vec(d) } else { zeros.clone() };
        x = reverse_step(params, schedule, &x, t, c, &z)?;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite sample value at timestep {t}"
            )));
        }
    }
    Ok(x)
}
