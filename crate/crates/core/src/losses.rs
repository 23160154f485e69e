//! Objective functions: per-sample noise-prediction MSE, the Bradley–Terry
//! preference probability, the preference pair loss over policy/reference
//! error gaps (shared verbatim by the self-supervised and pre-ranked paths),
//! the implicit-reward diagnostic and the combined objective.
//!
//! Squared prediction errors are mean-reduced over dimensions so the scale
//! factor `C` stays dimension-independent. The reference model never
//! receives gradient.

use crate::denoiser::{sigmoid, DenoiserParams, ParamGrads, Tape};
use crate::diffusion::{q_sample, Schedule};
use crate::downgrade::PreferencePair;
use crate::error::{Error, Result};

/// Which objective a training run optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Sft,
    Sudo,
    Dpo,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Sft => "sft",
            Method::Sudo => "sudo",
            Method::Dpo => "dpo",
        }
    }

    pub fn code(&self) -> u8 {
        match self {
            Method::Sft => 0,
            Method::Sudo => 1,
            Method::Dpo => 2,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Method::Sft),
            1 => Ok(Method::Sudo),
            2 => Ok(Method::Dpo),
            _ => Err(Error::Input(format!("unknown method code {code}"))),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sft" => Ok(Method::Sft),
            "sudo" => Ok(Method::Sudo),
            "dpo" => Ok(Method::Dpo),
            _ => Err(Error::Input(format!("unknown method {s:?}"))),
        }
    }
}

/// Loss weights: the preference scale `C`, the MSE weight and the pair-loss
/// weight of the combined objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub method: Method,
    /// Scale factor inside the preference sigmoid (`--c`), -2500 by default.
    pub scale_c: f64,
    /// Weight of the MSE term (`--lambda1`).
    pub lambda1: f64,
    /// Weight of the preference term (`--lambda2`).
    pub lambda2: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            method: Method::Sudo,
            scale_c: -2500.0,
            lambda1: 0.5,
            lambda2: 0.5,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda1 >= 0.0 && self.lambda1.is_finite()) {
            return Err(Error::Config("lambda1 must be finite and >= 0".into()));
        }
        if !(self.lambda2 >= 0.0 && self.lambda2.is_finite()) {
            return Err(Error::Config("lambda2 must be finite and >= 0".into()));
        }
        if !self.scale_c.is_finite() {
            return Err(Error::Config("c must be finite".into()));
        }
        if self.method != Method::Sft && self.scale_c == 0.0 {
            return Err(Error::Config(
                "c must be non-zero for the sudo/dpo methods".into(),
            ));
        }
        Ok(())
    }
}

/// The four mean-reduced squared prediction errors of one pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairErrors {
    /// Policy error on the noised winner.
    pub policy_win: f64,
    /// Policy error on the noised loser.
    pub policy_lose: f64,
    /// Reference error on the noised winner.
    pub ref_win: f64,
    /// Reference error on the noised loser.
    pub ref_lose: f64,
}

/// Per-pair diagnostics emitted into the metrics stream.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairDiagnostics {
    pub errors: PairErrors,
    pub inner: f64,
}

/// Mean over dimensions of squared differences.
pub fn mse_loss(eps_hat: &[f64], eps: &[f64]) -> Result<f64> {
    if eps_hat.len() != eps.len() || eps_hat.is_empty() {
        return Err(Error::Input(format!(
            "mse_loss needs equal non-empty lengths, got {} and {}",
            eps_hat.len(),
            eps.len()
        )));
    }
    let sum: f64 = eps_hat
        .iter()
        .zip(eps)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(sum / eps_hat.len() as f64)
}

/// Probability that the first reward wins under a Bradley–Terry model:
/// the logistic sigmoid of the reward difference.
pub fn bradley_terry(r_w: f64, r_l: f64) -> f64 {
    sigmoid(r_w - r_l)
}

/// Argument of the preference sigmoid:
/// `C * [(e_w_policy - e_l_policy) - (e_w_ref - e_l_ref)]`.
pub fn preference_inner(pe: &PairErrors, scale_c: f64) -> f64 {
    scale_c * ((pe.policy_win - pe.policy_lose) - (pe.ref_win - pe.ref_lose))
}

/// `-log(sigmoid(inner))`, evaluated as `softplus(-inner)` so magnitudes up
/// to +-1e4 and far beyond stay finite.
pub fn logsig_loss(inner: f64) -> f64 {
    let x = -inner;
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Per-sample implicit reward diagnostic: `(C / 2) * (e_policy - e_ref)`.
pub fn implicit_reward(e_policy: f64, e_ref: f64, scale_c: f64) -> f64 {
    0.5 * scale_c * (e_policy - e_ref)
}

/// Combined objective: `lambda1 * mse + lambda2 * sudo`.
pub fn combined_loss(mse: f64, sudo: f64, cfg: &LossConfig) -> f64 {
    cfg.lambda1 * mse + cfg.lambda2 * sudo
}

/// Everything the forward half of a pair evaluation produces; enough to
/// assemble any mixture of the MSE and preference terms and to run the
/// backward sweep without recomputing activations.
pub(crate) struct PairForward {
    pub tape_w: Tape,
    pub tape_l: Tape,
    pub eps_hat_w: Vec<f64>,
    pub eps_hat_l: Vec<f64>,
    pub errors: PairErrors,
    pub inner: f64,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn pair_forward(
    policy: &DenoiserParams,
    reference: &DenoiserParams,
    condition: u32,
    x_w: &[f64],
    x_l: &[f64],
    t: usize,
    eps_w: &[f64],
    eps_l: &[f64],
    schedule: &Schedule,
    scale_c: f64,
) -> Result<PairForward> {
    let c = condition as usize;
    let xt_w = q_sample(schedule, x_w, t, eps_w)?;
    let xt_l = q_sample(schedule, x_l, t, eps_l)?;
    let (eps_hat_w, tape_w) = policy.forward_tape(&xt_w, t, c)?;
    let (eps_hat_l, tape_l) = policy.forward_tape(&xt_l, t, c)?;
    let ref_w = reference.forward(&xt_w, t, c)?;
    let ref_l = reference.forward(&xt_l, t, c)?;
    let errors = PairErrors {
        policy_win: mse_loss(&eps_hat_w, eps_w)?,
        policy_lose: mse_loss(&eps_hat_l, eps_l)?,
        ref_win: mse_loss(&ref_w, eps_w)?,
        ref_lose: mse_loss(&ref_l, eps_l)?,
    };
    for e in [
        errors.policy_win,
        errors.policy_lose,
        errors.ref_win,
        errors.ref_lose,
    ] {
        if !e.is_finite() {
            return Err(Error::Numeric("non-finite pair error".into()));
        }
    }
    let inner = preference_inner(&errors, scale_c);
    if !inner.is_finite() {
        return Err(Error::Numeric("non-finite preference argument".into()));
    }
    Ok(PairForward {
        tape_w,
        tape_l,
        eps_hat_w,
        eps_hat_l,
        errors,
        inner,
    })
}

/// Backward sweep of `mse_weight * e_w_policy + pair_weight * logsig_loss(inner)`.
/// Only the two policy error terms carry gradient; the chain rule through the
/// outer term uses `d(-log sigma(u))/du = sigma(u) - 1`.
pub(crate) fn pair_backward(
    policy: &DenoiserParams,
    pf: &PairForward,
    eps_w: &[f64],
    eps_l: &[f64],
    scale_c: f64,
    mse_weight: f64,
    pair_weight: f64,
    grads: &mut ParamGrads,
) {
    let d = eps_w.len() as f64;
    let outer = pair_weight * (sigmoid(pf.inner) - 1.0) * scale_c;
    let coef_w = 2.0 * (mse_weight + outer) / d;
    let coef_l = 2.0 * (-outer) / d;
    let up_w: Vec<f64> = pf
        .eps_hat_w
        .iter()
        .zip(eps_w)
        .map(|(a, b)| coef_w * (a - b))
        .collect();
    let up_l: Vec<f64> = pf
        .eps_hat_l
        .iter()
        .zip(eps_l)
        .map(|(a, b)| coef_l * (a - b))
        .collect();
    policy.backward(&pf.tape_w, &up_w, grads);
    policy.backward(&pf.tape_l, &up_l, grads);
}

#[allow(clippy::too_many_arguments)]
fn pair_loss_impl(
    policy: &DenoiserParams,
    reference: &DenoiserParams,
    condition: u32,
    x_w: &[f64],
    x_l: &[f64],
    t: usize,
    eps_w: &[f64],
    eps_l: &[f64],
    schedule: &Schedule,
    cfg: &LossConfig,
) -> Result<(f64, ParamGrads, PairDiagnostics)> {
    cfg.validate()?;
    let pf = pair_forward(
        policy, reference, condition, x_w, x_l, t, eps_w, eps_l, schedule, cfg.scale_c,
    )?;
    let loss = logsig_loss(pf.inner);
    let mut grads = ParamGrads::zeros(policy.arch());
    pair_backward(policy, &pf, eps_w, eps_l, cfg.scale_c, 0.0, 1.0, &mut grads);
    Ok((
        loss,
        grads,
        PairDiagnostics {
            errors: pf.errors,
            inner: pf.inner,
        },
    ))
}

/// Preference loss for a self-generated pair.
pub fn sudo_pair_loss(
    policy: &DenoiserParams,
    reference: &DenoiserParams,
    pair: &PreferencePair,
    schedule: &Schedule,
    cfg: &LossConfig,
) -> Result<(f64, ParamGrads, PairDiagnostics)> {
    pair_loss_impl(
        policy,
        reference,
        pair.condition,
        &pair.x_w,
        &pair.x_sl,
        pair.t,
        &pair.eps_w,
        &pair.eps_sl,
        schedule,
        cfg,
    )
}

/// Preference loss for an externally-ranked pair. Identical computation to
/// [`sudo_pair_loss`], sharing the exact code path.
#[allow(clippy::too_many_arguments)]
pub fn dpo_pair_loss(
    policy: &DenoiserParams,
    reference: &DenoiserParams,
    condition: u32,
    x_w: &[f64],
    x_l: &[f64],
    t: usize,
    eps_w: &[f64],
    eps_l: &[f64],
    schedule: &Schedule,
    cfg: &LossConfig,
) -> Result<(f64, ParamGrads, PairDiagnostics)> {
    pair_loss_impl(
        policy, reference, condition, x_w, x_l, t, eps_w, eps_l, schedule, cfg,
    )
}
