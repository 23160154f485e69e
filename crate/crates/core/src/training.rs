//! Optimizer, warmup, the fine-tuning loop for the three methods, gradient
//! checking against finite differences, and checkpoint serialization.
//!
//! Everything downstream of a `TrainConfig` is a pure function of the seed:
//! the batch stream, pair construction and parameter updates run in index
//! order, so reruns are bit-identical on the same platform.

use std::fmt::Write as _;
use std::path::Path;

use crate::data::Dataset;
use crate::denoiser::{Architecture, DenoiserParams, ParamGrads};
use crate::diffusion::{q_sample, Schedule, ScheduleConfig};
use crate::downgrade::{downgrade_random_image, make_pair, DowngradeStrategy, PreferencePair};
use crate::error::{Error, Result};
use crate::io::{write_atomic, Reader, Writer};
use crate::losses::{logsig_loss, mse_loss, pair_backward, pair_forward, LossConfig, Method};
use crate::rng::RngState;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SUDC";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const METRICS_HEADER: &str =
    "step,lr,loss_total,loss_mse,loss_sudo,inner_mean,e_w_theta,e_l_theta,grad_norm";

/// Adam accumulators, shape-congruent with the parameter buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl OptimState {
    pub fn new(n_params: usize) -> Self {
        Self {
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            step: 0,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// Full description of a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub loss: LossConfig,
    pub arch: Architecture,
    pub schedule: ScheduleConfig,
    pub steps: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub warmup_frac: f64,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub downgrade: DowngradeStrategy,
    pub share_noise: bool,
}

impl TrainConfig {
    /// Desk-scale defaults for a given architecture: 25% linear warmup and a
    /// constant learning rate of 1e-3 afterwards.
    pub fn new(arch: Architecture) -> Self {
        Self {
            loss: LossConfig::default(),
            arch,
            schedule: ScheduleConfig::default(),
            steps: 1000,
            batch_size: 64,
            base_lr: 1e-3,
            warmup_frac: 0.25,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.0,
            downgrade: DowngradeStrategy::default(),
            share_noise: false,
        }
    }

    pub fn method(&self) -> Method {
        self.loss.method
    }

    pub fn validate(&self, dataset: &Dataset) -> Result<()> {
        self.arch.validate()?;
        self.loss.validate()?;
        if self.steps == 0 {
            return Err(Error::Config("steps must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.warmup_frac) {
            return Err(Error::Config("warmup fraction must lie in [0, 1]".into()));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1)")));
            }
        }
        if self.arch.n_conditions != dataset.n_conditions() {
            return Err(Error::Config(format!(
                "architecture has {} conditions, dataset has {}",
                self.arch.n_conditions,
                dataset.n_conditions()
            )));
        }
        if self.arch.data_dim != dataset.value_len() {
            return Err(Error::Config(format!(
                "architecture dimension {} does not match record length {}",
                self.arch.data_dim,
                dataset.value_len()
            )));
        }
        if self.uses_pairs() {
            self.downgrade.validate_for(dataset)?;
        }
        Ok(())
    }

    /// Whether the run builds preference pairs. A sudo run with a zero pair
    /// weight degenerates to the plain-MSE path and draws no pair noise, so
    /// it follows the sft trajectory exactly.
    fn uses_pairs(&self) -> bool {
        match self.method() {
            Method::Sft => false,
            Method::Sudo => self.loss.lambda2 != 0.0,
            Method::Dpo => true,
        }
    }
}

/// Linear-warmup learning rate: ramps over `ceil(warmup_frac * total_steps)`
/// steps, constant at `base_lr` afterwards.
pub fn lr_at(step: usize, total_steps: usize, base_lr: f64, warmup_frac: f64) -> f64 {
    debug_assert!(step < total_steps);
    let warmup_steps = (warmup_frac * total_steps as f64).ceil() as usize;
    if warmup_steps == 0 {
        return base_lr;
    }
    base_lr * (((step + 1) as f64 / warmup_steps as f64).min(1.0))
}

/// One bias-corrected Adam update with decoupled weight decay (applied as
/// `p *= 1 - lr * weight_decay` before the Adam delta).
#[allow(clippy::too_many_arguments)]
pub fn adam_step(
    params: &mut DenoiserParams,
    grads: &ParamGrads,
    state: &mut OptimState,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
) -> Result<()> {
    let n = params.values().len();
    if grads.values().len() != n || state.m.len() != n || state.v.len() != n {
        return Err(Error::Internal(format!(
            "optimizer shape mismatch: params {n}, grads {}, moments {}",
            grads.values().len(),
            state.m.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);
    let p = params.values_mut();
    let g = grads.values();
    for i in 0..n {
        p[i] *= 1.0 - lr * weight_decay;
        state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * g[i];
        state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * g[i] * g[i];
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

/// Frozen deep copy of the current parameters; never updated afterwards.
pub fn snapshot_ref(params: &DenoiserParams) -> DenoiserParams {
    params.clone()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrainMeta {
    pub method: Method,
    pub step: u64,
    pub seed: u64,
}

/// Architecture, schedule, parameters, optional optimizer state and run
/// metadata; the unit of model persistence.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub schedule: ScheduleConfig,
    pub params: DenoiserParams,
    pub optim: Option<OptimState>,
    pub meta: TrainMeta,
}

impl Checkpoint {
    pub fn arch(&self) -> &Architecture {
        self.params.arch()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let arch = self.params.arch();
        let mut w = Writer::new();
        w.bytes(CHECKPOINT_MAGIC);
        w.u32(CHECKPOINT_VERSION);
        w.u32(arch.data_dim as u32);
        w.u32(arch.n_conditions as u32);
        w.u32(arch.time_dim as u32);
        w.u32(arch.cond_dim as u32);
        w.u32(arch.hidden.len() as u32);
        for &h in &arch.hidden {
            w.u32(h as u32);
        }
        w.u32(self.schedule.timesteps as u32);
        w.f64(self.schedule.beta_start);
        w.f64(self.schedule.beta_end);
        w.u8(self.meta.method.code());
        w.u64(self.meta.step);
        w.u64(self.meta.seed);
        w.f64_slice(self.params.values());
        match &self.optim {
            None => w.u8(0),
            Some(st) => {
                w.u8(1);
                w.u64(st.step);
                w.f64_slice(&st.m);
                w.f64_slice(&st.v);
            }
        }
        w.into_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let mut r = Reader::new(bytes);
        r.magic(CHECKPOINT_MAGIC, "checkpoint")?;
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(r.fail(format!("unsupported checkpoint version {version}")));
        }
        let data_dim = r.u32()? as usize;
        let n_conditions = r.u32()? as usize;
        let time_dim = r.u32()? as usize;
        let cond_dim = r.u32()? as usize;
        let n_hidden = r.u32()? as usize;
        let mut hidden = Vec::with_capacity(n_hidden);
        for _ in 0..n_hidden {
            hidden.push(r.u32()? as usize);
        }
        let arch = Architecture::new(data_dim, n_conditions, time_dim, cond_dim, hidden)
            .map_err(|e| r.fail(format!("invalid architecture: {e}")))?;
        let schedule = ScheduleConfig {
            timesteps: r.u32()? as usize,
            beta_start: r.f64()?,
            beta_end: r.f64()?,
        };
        schedule
            .build()
            .map_err(|e| r.fail(format!("invalid schedule: {e}")))?;
        let method = Method::from_code(r.u8()?).map_err(|e| r.fail(e.to_string()))?;
        let step = r.u64()?;
        let seed = r.u64()?;
        let values = r.f64_vec(arch.param_count())?;
        let params = DenoiserParams::from_values(arch, values)
            .map_err(|e| r.fail(format!("invalid parameters: {e}")))?;
        let optim = match r.u8()? {
            0 => None,
            1 => {
                let ostep = r.u64()?;
                let n = params.values().len();
                Some(OptimState {
                    m: r.f64_vec(n)?,
                    v: r.f64_vec(n)?,
                    step: ostep,
                })
            }
            flag => return Err(r.fail(format!("unknown optimizer flag {flag}"))),
        };
        r.expect_end()?;
        Ok(Checkpoint {
            schedule,
            params,
            optim,
            meta: TrainMeta { method, step, seed },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes)
    }
}

/// One batch element: either a plain noised winner (sft path) or a full
/// preference pair.
enum BatchItem {
    Plain {
        condition: u32,
        x0: Vec<f64>,
        t: usize,
        eps: Vec<f64>,
    },
    Pair(PreferencePair),
}

/// Per-step batch means emitted into the metrics stream.
#[derive(Debug, Clone, Copy, Default)]
pub struct StepStats {
    pub loss_total: f64,
    pub loss_mse: f64,
    pub loss_sudo: f64,
    pub inner_mean: f64,
    pub e_w_theta: f64,
    pub e_l_theta: f64,
}

fn draw_plain(dataset: &Dataset, schedule: &Schedule, rng: &mut RngState) -> BatchItem {
    let idx = rng.index(dataset.len());
    let rec = dataset.record(idx);
    let t = 1 + rng.index(schedule.len());
    let eps = rng.gaussian_vec(rec.values.len());
    BatchItem::Plain {
        condition: rec.label,
        x0: rec.values.clone(),
        t,
        eps,
    }
}

fn draw_batch(
    cfg: &TrainConfig,
    dataset: &Dataset,
    schedule: &Schedule,
    ranked_pairs: &[(usize, usize)],
    rng: &mut RngState,
) -> Result<Vec<BatchItem>> {
    let mut items = Vec::with_capacity(cfg.batch_size);
    for _ in 0..cfg.batch_size {
        let item = match cfg.method() {
            Method::Sft => draw_plain(dataset, schedule, rng),
            Method::Sudo => {
                if cfg.loss.lambda2 == 0.0 {
                    draw_plain(dataset, schedule, rng)
                } else {
                    let idx = rng.index(dataset.len());
                    BatchItem::Pair(make_pair(
                        dataset,
                        idx,
                        cfg.downgrade,
                        schedule,
                        rng,
                        cfg.share_noise,
                    )?)
                }
            }
            Method::Dpo => {
                let (w, l) = ranked_pairs[rng.index(ranked_pairs.len())];
                let winner = dataset.record(w);
                let loser = dataset.record(l);
                let t = 1 + rng.index(schedule.len());
                let eps_w = rng.gaussian_vec(winner.values.len());
                let eps_sl = if cfg.share_noise {
                    eps_w.clone()
                } else {
                    rng.gaussian_vec(winner.values.len())
                };
                BatchItem::Pair(PreferencePair {
                    condition: winner.label,
                    x_w: winner.values.clone(),
                    x_sl: loser.values.clone(),
                    t,
                    eps_w,
                    eps_sl,
                    strategy: DowngradeStrategy::RandomImage {
                        allow_same_label: false,
                    },
                })
            }
        };
        items.push(item);
    }
    Ok(items)
}

/// Evaluate the configured total loss on a batch; when `grads` is given,
/// accumulate the batch-mean gradient into it (index order, deterministic).
fn batch_loss(
    policy: &DenoiserParams,
    reference: &DenoiserParams,
    items: &[BatchItem],
    schedule: &Schedule,
    cfg: &TrainConfig,
    mut grads: Option<&mut ParamGrads>,
) -> Result<StepStats> {
    let method = cfg.method();
    let inv_batch = 1.0 / items.len() as f64;
    // Per-item weight on the plain-MSE path: raw for sft, lambda1 for a
    // sudo run whose pair term is disabled.
    let plain_weight = match method {
        Method::Sft => 1.0,
        _ => cfg.loss.lambda1,
    };
    let mut stats = StepStats::default();
    for item in items {
        match item {
            BatchItem::Plain {
                condition,
                x0,
                t,
                eps,
            } => {
                let x_t = q_sample(schedule, x0, *t, eps)?;
                let (eps_hat, tape) = policy.forward_tape(&x_t, *t, *condition as usize)?;
                let e = mse_loss(&eps_hat, eps)?;
                stats.loss_total += plain_weight * e;
                stats.loss_mse += e;
                stats.e_w_theta += e;
                if let Some(g) = grads.as_deref_mut() {
                    let coef = 2.0 * plain_weight * inv_batch / eps.len() as f64;
                    let upstream: Vec<f64> = eps_hat
                        .iter()
                        .zip(eps)
                        .map(|(a, b)| coef * (a - b))
                        .collect();
                    policy.backward(&tape, &upstream, g);
                }
            }
            BatchItem::Pair(pair) => {
                let pf = pair_forward(
                    policy,
                    reference,
                    pair.condition,
                    &pair.x_w,
                    &pair.x_sl,
                    pair.t,
                    &pair.eps_w,
                    &pair.eps_sl,
                    schedule,
                    cfg.loss.scale_c,
                )?;
                let pair_loss = logsig_loss(pf.inner);
                let (mse_w, pair_w) = match method {
                    Method::Dpo => (0.0, 1.0),
                    _ => (cfg.loss.lambda1, cfg.loss.lambda2),
                };
                stats.loss_total += mse_w * pf.errors.policy_win + pair_w * pair_loss;
                stats.loss_mse += pf.errors.policy_win;
                stats.loss_sudo += pair_loss;
                stats.inner_mean += pf.inner;
                stats.e_w_theta += pf.errors.policy_win;
                stats.e_l_theta += pf.errors.policy_lose;
                if let Some(g) = grads.as_deref_mut() {
                    pair_backward(
                        policy,
                        &pf,
                        &pair.eps_w,
                        &pair.eps_sl,
                        cfg.loss.scale_c,
                        mse_w * inv_batch,
                        pair_w * inv_batch,
                        g,
                    );
                }
            }
        }
    }
    stats.loss_total *= inv_batch;
    stats.loss_mse *= inv_batch;
    stats.loss_sudo *= inv_batch;
    stats.inner_mean *= inv_batch;
    stats.e_w_theta *= inv_batch;
    stats.e_l_theta *= inv_batch;
    Ok(stats)
}

/// Fixed, oracle-ranked pair set for the dpo method: each record is a winner
/// and a different-label record is its loser, chosen once before step 0.
fn ranked_pairs(dataset: &Dataset, rng: &mut RngState) -> Result<Vec<(usize, usize)>> {
    (0..dataset.len())
        .map(|w| {
            let (_x, l) = downgrade_random_image(dataset, w, rng, false)?;
            Ok((w, l))
        })
        .collect()
}

/// Run the full loop in memory; returns the final checkpoint and the metrics
/// CSV. Deterministic from the config seed.
pub fn train_core(cfg: &TrainConfig, dataset: &Dataset) -> Result<(Checkpoint, String)> {
    cfg.validate(dataset)?;
    let schedule = cfg.schedule.build()?;
    let mut rng = RngState::new(cfg.seed);
    let init_seed = rng.next_u64();
    let mut policy = DenoiserParams::init(&cfg.arch, init_seed)?;
    let reference = snapshot_ref(&policy);
    let mut optim = OptimState::new(policy.values().len());
    let pairs = if cfg.method() == Method::Dpo {
        ranked_pairs(dataset, &mut rng)?
    } else {
        Vec::new()
    };
    let mut metrics = String::with_capacity(64 * (cfg.steps + 1));
    metrics.push_str(METRICS_HEADER);
    metrics.push('\n');
    for step in 0..cfg.steps {
        let lr = lr_at(step, cfg.steps, cfg.base_lr, cfg.warmup_frac);
        let items = draw_batch(cfg, dataset, &schedule, &pairs, &mut rng)?;
        let mut grads = ParamGrads::zeros(&cfg.arch);
        let stats = batch_loss(&policy, &reference, &items, &schedule, cfg, Some(&mut grads))?;
        if !stats.loss_total.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss at step {step}")));
        }
        let grad_norm = grads.l2_norm();
        adam_step(
            &mut policy,
            &grads,
            &mut optim,
            lr,
            cfg.beta1,
            cfg.beta2,
            cfg.adam_eps,
            cfg.weight_decay,
        )?;
        let _ = writeln!(
            metrics,
            "{step},{lr},{},{},{},{},{},{},{grad_norm}",
            stats.loss_total,
            stats.loss_mse,
            stats.loss_sudo,
            stats.inner_mean,
            stats.e_w_theta,
            stats.e_l_theta,
        );
    }
    let ckpt = Checkpoint {
        schedule: cfg.schedule,
        params: policy,
        optim: Some(optim),
        meta: TrainMeta {
            method: cfg.method(),
            step: cfg.steps as u64,
            seed: cfg.seed,
        },
    };
    Ok((ckpt, metrics))
}

/// Train and persist: checkpoint and metrics CSV are written atomically.
pub fn train(
    cfg: &TrainConfig,
    dataset: &Dataset,
    out_ckpt: &Path,
    metrics_path: &Path,
) -> Result<Checkpoint> {
    let (ckpt, metrics) = train_core(cfg, dataset)?;
    write_atomic(metrics_path, metrics.as_bytes())?;
    ckpt.save(out_ckpt)?;
    Ok(ckpt)
}

/// Central-difference oracle: max over coordinates of
/// `|fd - analytic| / max(1, |analytic|)`.
pub fn finite_diff_max_rel_err<F>(mut f: F, x0: &[f64], analytic: &[f64], h: f64) -> f64
where
    F: FnMut(&[f64]) -> f64,
{
    assert_eq!(x0.len(), analytic.len());
    let mut x = x0.to_vec();
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + h;
        let fp = f(&x);
        x[i] = orig - h;
        let fm = f(&x);
        x[i] = orig;
        let fd = (fp - fm) / (2.0 * h);
        let err = (fd - analytic[i]).abs() / analytic[i].abs().max(1.0);
        worst = worst.max(err);
    }
    worst
}

/// Compare the analytic gradient of the configured total loss on one frozen
/// batch against central finite differences over every parameter.
///
/// The policy is initialized from the seed and then randomly offset so the
/// check runs at a generic point rather than exactly at the reference.
pub fn grad_check(cfg: &TrainConfig, dataset: &Dataset, seed: u64, h: f64) -> Result<f64> {
    cfg.validate(dataset)?;
    let schedule = cfg.schedule.build()?;
    let mut rng = RngState::new(seed);
    let init_seed = rng.next_u64();
    let mut policy = DenoiserParams::init(&cfg.arch, init_seed)?;
    let reference = snapshot_ref(&policy);
    for v in policy.values_mut() {
        *v += 0.05 * (2.0 * rng.uniform01() - 1.0);
    }
    let pairs = if cfg.method() == Method::Dpo {
        ranked_pairs(dataset, &mut rng)?
    } else {
        Vec::new()
    };
    let items = draw_batch(cfg, dataset, &schedule, &pairs, &mut rng)?;
    let mut grads = ParamGrads::zeros(&cfg.arch);
    batch_loss(&policy, &reference, &items, &schedule, cfg, Some(&mut grads))?;
    let arch = cfg.arch.clone();
    let loss_of = |values: &[f64]| -> f64 {
        let p = DenoiserParams::from_values(arch.clone(), values.to_vec())
            .expect("perturbed parameter buffer stays valid");
        batch_loss(&p, &reference, &items, &schedule, cfg, None)
            .expect("loss evaluation on perturbed parameters")
            .loss_total
    };
    Ok(finite_diff_max_rel_err(
        loss_of,
        policy.values(),
        grads.values(),
        h,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::GmSpec;
    use std::f64::consts::LN_2;

    fn small_dataset(k: usize, n: usize, seed: u64) -> Dataset {
        let spec = GmSpec::circle(k, 2, 0.5, 4.0).unwrap();
        Dataset::gaussian_mixture(&spec, n, seed).unwrap()
    }

    fn small_config(k: usize) -> TrainConfig {
        let arch = Architecture::new(2, k, 4, 3, vec![12, 12]).unwrap();
        let mut cfg = TrainConfig::new(arch);
        cfg.schedule = ScheduleConfig {
            timesteps: 12,
            beta_start: 1e-3,
            beta_end: 0.15,
        };
        cfg.steps = 5;
        cfg.batch_size = 8;
        cfg
    }

    #[test]
    fn lr_warmup_shape() {
        // total=100, frac=0.25 -> 25 warmup steps.
        assert_eq!(lr_at(24, 100, 1e-3, 0.25), 1e-3);
        let lr11 = lr_at(11, 100, 1e-3, 0.25);
        assert!((lr11 - 4.8e-4).abs() < 1e-18);
        assert_eq!(lr_at(99, 100, 1e-3, 0.25), 1e-3);
        assert_eq!(lr_at(0, 100, 1e-3, 0.0), 1e-3);
        // Non-decreasing over warmup, constant after.
        let mut prev = 0.0;
        for s in 0..100 {
            let lr = lr_at(s, 100, 1e-3, 0.25);
            assert!(lr >= prev);
            prev = lr;
            if s >= 25 {
                assert_eq!(lr, 1e-3);
            }
        }
    }

    #[test]
    fn adam_zero_gradient_is_identity() {
        let arch = Architecture::new(1, 1, 2, 1, vec![2]).unwrap();
        let mut params = DenoiserParams::init(&arch, 1).unwrap();
        let before = params.clone();
        let grads = ParamGrads::zeros(&arch);
        let mut st = OptimState::new(params.values().len());
        adam_step(&mut params, &grads, &mut st, 0.1, 0.9, 0.999, 1e-8, 0.0).unwrap();
        assert_eq!(params, before);
    }

    #[test]
    fn adam_first_step_hand_value() {
        // Scalar parameter at 0 with gradient 1 and lr 0.1: both moment
        // corrections cancel exactly, delta = -0.1 / (1 + 1e-8).
        let arch = Architecture::new(1, 1, 2, 1, vec![1]).unwrap();
        let mut params = DenoiserParams::zeros(&arch).unwrap();
        let mut grads = ParamGrads::zeros(&arch);
        grads.values_mut()[0] = 1.0;
        let mut st = OptimState::new(params.values().len());
        adam_step(&mut params, &grads, &mut st, 0.1, 0.9, 0.999, 1e-8, 0.0).unwrap();
        let want = -0.1 / (1.0 + 1e-8);
        assert!((params.values()[0] - want).abs() < 1e-15);
        assert!((params.values()[0] - (-0.0999999990)).abs() < 1e-9);
    }

    #[test]
    fn adam_is_deterministic() {
        let arch = Architecture::new(2, 2, 4, 2, vec![6]).unwrap();
        let run = || {
            let mut params = DenoiserParams::init(&arch, 3).unwrap();
            let mut grads = ParamGrads::zeros(&arch);
            for (i, g) in grads.values_mut().iter_mut().enumerate() {
                *g = (i as f64 - 10.0) * 0.01;
            }
            let mut st = OptimState::new(params.values().len());
            for _ in 0..25 {
                adam_step(&mut params, &grads, &mut st, 1e-3, 0.9, 0.999, 1e-8, 0.01).unwrap();
            }
            params
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn snapshot_is_frozen_copy() {
        let arch = Architecture::new(2, 2, 4, 2, vec![6]).unwrap();
        let mut params = DenoiserParams::init(&arch, 3).unwrap();
        let snap = snapshot_ref(&params);
        assert_eq!(snap, params);
        for v in params.values_mut() {
            *v += 1.0;
        }
        assert_ne!(snap, params);
    }

    #[test]
    fn checkpoint_roundtrip() {
        let dataset = small_dataset(3, 32, 5);
        let mut cfg = small_config(3);
        cfg.seed = 9;
        let (ckpt, _metrics) = train_core(&cfg, &dataset).unwrap();
        let bytes = ckpt.to_bytes();
        let loaded = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(ckpt, loaded);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.sudc");
        ckpt.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ckpt);
    }

    #[test]
    fn checkpoint_rejects_corruption() {
        let dataset = small_dataset(2, 16, 1);
        let mut cfg = small_config(2);
        cfg.steps = 1;
        let (ckpt, _) = train_core(&cfg, &dataset).unwrap();
        let mut bytes = ckpt.to_bytes();
        bytes[1] = b'?';
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(Error::Format { offset: 0, .. })
        ));
        let short = &ckpt.to_bytes()[..40];
        assert!(matches!(
            Checkpoint::from_bytes(short),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn training_is_deterministic() {
        let dataset = small_dataset(3, 64, 8);
        let mut cfg = small_config(3);
        cfg.loss.method = Method::Sudo;
        cfg.seed = 77;
        let (c1, m1) = train_core(&cfg, &dataset).unwrap();
        let (c2, m2) = train_core(&cfg, &dataset).unwrap();
        assert_eq!(m1, m2);
        assert_eq!(c1.to_bytes(), c2.to_bytes());
    }

    #[test]
    fn sudo_step0_loss_is_ln2() {
        let dataset = small_dataset(3, 64, 8);
        let mut cfg = small_config(3);
        cfg.loss.method = Method::Sudo;
        let (_ckpt, metrics) = train_core(&cfg, &dataset).unwrap();
        let first = metrics.lines().nth(1).unwrap();
        let fields: Vec<&str> = first.split(',').collect();
        let loss_sudo: f64 = fields[4].parse().unwrap();
        assert!((loss_sudo - LN_2).abs() <= 1e-12, "loss_sudo {loss_sudo}");
    }

    #[test]
    fn sft_step0_loss_near_one() {
        // Zero-initialized net: expected per-sample error is E||eps||^2 / d = 1;
        // the batch mean fluctuates with std sqrt(2 / (d * B)).
        let dataset = small_dataset(4, 256, 3);
        let mut cfg = small_config(4);
        cfg.loss.method = Method::Sft;
        cfg.batch_size = 64;
        let (_ckpt, metrics) = train_core(&cfg, &dataset).unwrap();
        let first = metrics.lines().nth(1).unwrap();
        let fields: Vec<&str> = first.split(',').collect();
        let loss_mse: f64 = fields[3].parse().unwrap();
        let tol = 3.0 * (2.0f64 / (2.0 * 64.0)).sqrt();
        assert!((loss_mse - 1.0).abs() <= tol, "loss_mse {loss_mse}");
    }

    #[test]
    fn metrics_row_count() {
        let dataset = small_dataset(2, 32, 2);
        let mut cfg = small_config(2);
        cfg.steps = 7;
        let (_ckpt, metrics) = train_core(&cfg, &dataset).unwrap();
        let lines: Vec<&str> = metrics.lines().collect();
        assert_eq!(lines.len(), 8);
        assert_eq!(lines[0], METRICS_HEADER);
    }

    #[test]
    fn reference_stays_fixed_during_training() {
        // The reference is the init-time snapshot; re-deriving it from the
        // same seed after training must reproduce it bit-for-bit.
        let dataset = small_dataset(2, 32, 4);
        let mut cfg = small_config(2);
        cfg.loss.method = Method::Sudo;
        cfg.seed = 123;
        let (ckpt, _metrics) = train_core(&cfg, &dataset).unwrap();
        let mut rng = RngState::new(cfg.seed);
        let init_seed = rng.next_u64();
        let reference = DenoiserParams::init(&cfg.arch, init_seed).unwrap();
        assert_ne!(ckpt.params, reference);
        let again = DenoiserParams::init(&cfg.arch, init_seed).unwrap();
        assert_eq!(reference, again);
    }

    #[test]
    fn sft_and_disabled_sudo_share_trajectories() {
        let dataset = small_dataset(3, 64, 6);
        let mut sft = small_config(3);
        sft.loss.method = Method::Sft;
        sft.loss.lambda1 = 1.0;
        sft.loss.lambda2 = 0.0;
        sft.steps = 20;
        let mut sudo = sft.clone();
        sudo.loss.method = Method::Sudo;
        let (c1, _m1) = train_core(&sft, &dataset).unwrap();
        let (c2, _m2) = train_core(&sudo, &dataset).unwrap();
        assert_eq!(c1.params, c2.params);
    }

    #[test]
    fn dpo_training_runs_and_differs_from_sudo() {
        let dataset = small_dataset(3, 64, 6);
        let mut cfg = small_config(3);
        cfg.loss.method = Method::Dpo;
        cfg.steps = 10;
        let (dpo_ckpt, metrics) = train_core(&cfg, &dataset).unwrap();
        assert_eq!(metrics.lines().count(), 11);
        let mut sudo_cfg = cfg.clone();
        sudo_cfg.loss.method = Method::Sudo;
        let (sudo_ckpt, _m) = train_core(&sudo_cfg, &dataset).unwrap();
        assert_ne!(dpo_ckpt.params, sudo_ckpt.params);
    }

    #[test]
    fn grad_check_linear_probe_is_nearly_exact() {
        // Central differences are exact for affine objectives up to rounding.
        let a: Vec<f64> = (0..20).map(|i| (i as f64) * 0.37 - 3.0).collect();
        let x0: Vec<f64> = (0..20).map(|i| (i as f64) * 0.11 - 1.0).collect();
        let f = |x: &[f64]| -> f64 { x.iter().zip(&a).map(|(xi, ai)| xi * ai).sum() };
        let err = finite_diff_max_rel_err(f, &x0, &a, 1e-5);
        assert!(err < 1e-9, "err {err}");
    }

    #[test]
    fn grad_check_stationary_point_of_mse() {
        // Zero-initialized params with zero target noise sit at a stationary
        // point: both analytic and central-difference gradients vanish.
        let arch = Architecture::new(2, 1, 2, 1, vec![4]).unwrap();
        let params = DenoiserParams::zeros(&arch).unwrap();
        let analytic = vec![0.0; params.values().len()];
        let x_t = [0.3, -0.4];
        let eps = [0.0, 0.0];
        let f = |values: &[f64]| -> f64 {
            let p = DenoiserParams::from_values(arch.clone(), values.to_vec()).unwrap();
            let y = p.forward(&x_t, 1, 0).unwrap();
            mse_loss(&y, &eps).unwrap()
        };
        let mut x = params.values().to_vec();
        let h = 1e-5;
        for i in 0..x.len() {
            let orig = x[i];
            x[i] = orig + h;
            let fp = f(&x);
            x[i] = orig - h;
            let fm = f(&x);
            x[i] = orig;
            let fd = (fp - fm) / (2.0 * h);
            assert!((fd - analytic[i]).abs() <= 1e-8, "coordinate {i}: {fd}");
        }
    }

    #[test]
    fn grad_check_all_methods_under_tolerance() {
        let dataset = small_dataset(3, 48, 10);
        let mut cfg = small_config(3);
        assert!(cfg.arch.param_count() <= 2000);
        cfg.batch_size = 6;
        for (method, l1, l2) in [
            (Method::Sft, 0.5, 0.5),
            (Method::Sudo, 0.0, 1.0),
            (Method::Sudo, 0.5, 0.5),
            (Method::Dpo, 0.5, 0.5),
        ] {
            cfg.loss.method = method;
            cfg.loss.lambda1 = l1;
            cfg.loss.lambda2 = l2;
            let err = grad_check(&cfg, &dataset, 42, 1e-5).unwrap();
            assert!(
                err < 1e-5,
                "method {:?} l1={l1} l2={l2}: max rel err {err}",
                method
            );
        }
    }

    #[test]
    fn nan_loss_aborts_with_step_number() {
        let dataset = small_dataset(2, 16, 1);
        let mut cfg = small_config(2);
        cfg.base_lr = 1e150; // drives parameters non-finite within a step
        cfg.loss.method = Method::Sft;
        cfg.steps = 10;
        match train_core(&cfg, &dataset) {
            Err(Error::Numeric(msg)) => assert!(msg.contains("step"), "msg: {msg}"),
            Err(Error::Input(_)) => {} // non-finite sample rejected at forward
            other => panic!("expected numeric failure, got {other:?}"),
        }
    }

    #[test]
    fn incompatible_strategy_is_config_error() {
        let dataset = small_dataset(2, 16, 1); // vector kind
        let mut cfg = small_config(2);
        cfg.loss.method = Method::Sudo;
        cfg.downgrade = DowngradeStrategy::Blur { factor: 4 };
        assert!(matches!(
            train_core(&cfg, &dataset),
            Err(Error::Config(_))
        ));
    }
}
