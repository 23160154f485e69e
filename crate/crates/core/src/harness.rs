//! Paired-seed evaluation against the analytic alignment oracle, and the
//! downgrade ablation that pits each variant against a plain-MSE baseline.
//!
//! Both models in a comparison consume the identical noise stream (shared
//! initial noise and per-step injections), so score differences come from the
//! parameters alone. Ties count as half a win, which calibrates any model
//! against itself at exactly 50%.

use std::fmt::Write as _;

use crate::data::{DataSpec, Dataset};
use crate::diffusion::sample;
use crate::downgrade::DowngradeStrategy;
use crate::error::{Error, Result};
use crate::losses::Method;
use crate::rng::RngState;
use crate::training::{train_core, Checkpoint, TrainConfig};

/// Outcome of one paired comparison between checkpoints A and B.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EvalReport {
    pub n_pairs: usize,
    pub n_per_condition: usize,
    pub seed: u64,
    /// Percentage of pairs A wins, ties counted as half.
    pub win_rate_a: f64,
    pub mean_score_a: f64,
    pub mean_score_b: f64,
    pub per_condition_mean_a: Vec<f64>,
    pub per_condition_mean_b: Vec<f64>,
}

/// Alignment of a generated sample with its condition: the exact class
/// posterior for mixture data, or the template correlation mapped to [0, 1]
/// for grid data.
pub fn alignment_score(x0: &[f64], condition: u32, spec: &DataSpec) -> Result<f64> {
    match spec {
        DataSpec::Gm(gm) => {
            if condition as usize >= gm.n_components() {
                return Err(Error::Input(format!(
                    "condition {condition} out of range (K = {})",
                    gm.n_components()
                )));
            }
            if x0.len() != gm.dim() {
                return Err(Error::Input(format!(
                    "sample has dimension {}, spec expects {}",
                    x0.len(),
                    gm.dim()
                )));
            }
            Ok(gm.posterior(x0)[condition as usize])
        }
        DataSpec::Pattern(p) => {
            let template = p.template(condition)?;
            if x0.len() != template.len() {
                return Err(Error::Input(format!(
                    "sample has {} pixels, spec expects {}",
                    x0.len(),
                    template.len()
                )));
            }
            Ok((pearson(x0, &template) + 1.0) / 2.0)
        }
    }
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in a.iter().zip(b) {
        let dx = x - ma;
        let dy = y - mb;
        cov += dx * dy;
        va += dx * dx;
        vb += dy * dy;
    }
    if va == 0.0 || vb == 0.0 {
        return 0.0;
    }
    cov / (va.sqrt() * vb.sqrt())
}

/// Win rate in percent from half-win units, computed symmetrically so that
/// `win_rate(w) + win_rate(total - w)` is exactly 100.
fn percent_from_half_wins(half_wins: u64, n_pairs: usize) -> f64 {
    let q = 2 * n_pairs as u64;
    if 2 * half_wins <= q {
        100.0 * half_wins as f64 / q as f64
    } else {
        100.0 - 100.0 * (q - half_wins) as f64 / q as f64
    }
}

/// Score-sequence comparison: 1 per win, 0.5 per tie, as a percentage.
pub fn win_rate(scores_a: &[f64], scores_b: &[f64]) -> f64 {
    assert_eq!(scores_a.len(), scores_b.len());
    assert!(!scores_a.is_empty());
    let mut half_wins = 0u64;
    for (a, b) in scores_a.iter().zip(scores_b) {
        if a > b {
            half_wins += 2;
        } else if a == b {
            half_wins += 1;
        }
    }
    percent_from_half_wins(half_wins, scores_a.len())
}

/// Same-seed paired comparison: for each condition and replicate, derive one
/// noise stream from (seed, condition, replicate) and feed the identical
/// stream to both samplers before scoring against the oracle.
pub fn paired_eval(
    a: &Checkpoint,
    b: &Checkpoint,
    spec: &DataSpec,
    n_per_condition: usize,
    seed: u64,
) -> Result<EvalReport> {
    if n_per_condition == 0 {
        return Err(Error::Input("need at least one replicate per condition".into()));
    }
    let arch_a = a.arch();
    let arch_b = b.arch();
    if arch_a.data_dim != arch_b.data_dim || arch_a.n_conditions != arch_b.n_conditions {
        return Err(Error::Config(format!(
            "incompatible checkpoints: ({}, K={}) vs ({}, K={})",
            arch_a.data_dim, arch_a.n_conditions, arch_b.data_dim, arch_b.n_conditions
        )));
    }
    let k = arch_a.n_conditions;
    let sched_a = a.schedule.build()?;
    let sched_b = b.schedule.build()?;
    let root = RngState::new(seed);
    let mut half_wins = 0u64;
    let mut per_cond_a = Vec::with_capacity(k);
    let mut per_cond_b = Vec::with_capacity(k);
    let mut total_a = 0.0;
    let mut total_b = 0.0;
    for c in 0..k {
        let cond_rng = root.child(c as u64);
        let mut sum_a = 0.0;
        let mut sum_b = 0.0;
        for i in 0..n_per_condition {
            let cell = cond_rng.child(i as u64);
            let mut rng_a = cell;
            let mut rng_b = cell;
            let xa = sample(&a.params, &sched_a, c, &mut rng_a)?;
            let xb = sample(&b.params, &sched_b, c, &mut rng_b)?;
            let sa = alignment_score(&xa, c as u32, spec)?;
            let sb = alignment_score(&xb, c as u32, spec)?;
            if sa > sb {
                half_wins += 2;
            } else if sa == sb {
                half_wins += 1;
            }
            sum_a += sa;
            sum_b += sb;
        }
        per_cond_a.push(sum_a / n_per_condition as f64);
        per_cond_b.push(sum_b / n_per_condition as f64);
        total_a += sum_a;
        total_b += sum_b;
    }
    let n_pairs = k * n_per_condition;
    Ok(EvalReport {
        n_pairs,
        n_per_condition,
        seed,
        win_rate_a: percent_from_half_wins(half_wins, n_pairs),
        mean_score_a: total_a / n_pairs as f64,
        mean_score_b: total_b / n_pairs as f64,
        per_condition_mean_a: per_cond_a,
        per_condition_mean_b: per_cond_b,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub method: String,
    pub applicable: bool,
    pub median_alignment: f64,
    pub median_win_rate_vs_sft: f64,
}

/// Four fixed rows: the sft baseline and the three downgrade variants,
/// medians across seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,applicable,median_alignment,median_win_rate_vs_sft\n");
        for row in &self.rows {
            if row.applicable {
                let _ = writeln!(
                    out,
                    "{},yes,{},{}",
                    row.method, row.median_alignment, row.median_win_rate_vs_sft
                );
            } else {
                let _ = writeln!(out, "{},no,na,na", row.method);
            }
        }
        out
    }
}

pub fn median(values: &mut Vec<f64>) -> f64 {
    assert!(!values.is_empty());
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Train an sft baseline and one sudo model per downgrade strategy for every
/// seed, compare each variant against the matching baseline with paired
/// sampling, and report per-row medians. Strategies that do not apply to the
/// dataset kind are kept as inapplicable rows.
pub fn run_ablation(
    dataset: &Dataset,
    base: &TrainConfig,
    seeds: &[u64],
    n_per_condition: usize,
) -> Result<AblationTable> {
    if seeds.is_empty() {
        return Err(Error::Input("need at least one seed".into()));
    }
    let strategies: [(&str, DowngradeStrategy); 3] = [
        (
            "blur",
            DowngradeStrategy::Blur {
                factor: crate::downgrade::DEFAULT_BLUR_FACTOR,
            },
        ),
        (
            "random_grid",
            DowngradeStrategy::RandomGrid {
                grid_count: crate::downgrade::DEFAULT_GRID_COUNT,
            },
        ),
        (
            "random_image",
            DowngradeStrategy::RandomImage {
                allow_same_label: false,
            },
        ),
    ];
    let mut sft_scores = Vec::new();
    let mut variant_scores: Vec<Vec<f64>> = vec![Vec::new(); 3];
    let mut variant_wins: Vec<Vec<f64>> = vec![Vec::new(); 3];
    for &seed in seeds {
        let mut sft_cfg = base.clone();
        sft_cfg.loss.method = Method::Sft;
        sft_cfg.seed = seed;
        let (sft_ckpt, _m) = train_core(&sft_cfg, dataset)?;
        let self_rep = paired_eval(&sft_ckpt, &sft_ckpt, dataset.spec(), n_per_condition, seed)?;
        sft_scores.push(self_rep.mean_score_a);
        for (slot, (_name, strategy)) in strategies.iter().enumerate() {
            if strategy.validate_for(dataset).is_err() {
                continue;
            }
            let mut cfg = base.clone();
            cfg.loss.method = Method::Sudo;
            cfg.downgrade = *strategy;
            cfg.seed = seed;
            let (ckpt, _m) = train_core(&cfg, dataset)?;
            let rep = paired_eval(&ckpt, &sft_ckpt, dataset.spec(), n_per_condition, seed)?;
            variant_scores[slot].push(rep.mean_score_a);
            variant_wins[slot].push(rep.win_rate_a);
        }
    }
    let mut rows = vec![AblationRow {
        method: "sft".into(),
        applicable: true,
        median_alignment: median(&mut sft_scores),
        median_win_rate_vs_sft: 50.0,
    }];
    for (slot, (name, _strategy)) in strategies.iter().enumerate() {
        if variant_scores[slot].is_empty() {
            rows.push(AblationRow {
                method: (*name).into(),
                applicable: false,
                median_alignment: f64::NAN,
                median_win_rate_vs_sft: f64::NAN,
            });
        } else {
            rows.push(AblationRow {
                method: (*name).into(),
                applicable: true,
                median_alignment: median(&mut variant_scores[slot]),
                median_win_rate_vs_sft: median(&mut variant_wins[slot]),
            });
        }
    }
    Ok(AblationTable { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{GmSpec, PatternSpec};
    use crate::denoiser::Architecture;
    use crate::diffusion::ScheduleConfig;

    fn tiny_checkpoint(seed: u64, k: usize) -> Checkpoint {
        let spec = GmSpec::circle(k, 2, 0.5, 4.0).unwrap();
        let dataset = Dataset::gaussian_mixture(&spec, 32, seed).unwrap();
        let arch = Architecture::new(2, k, 4, 3, vec![8]).unwrap();
        let mut cfg = TrainConfig::new(arch);
        cfg.schedule = ScheduleConfig {
            timesteps: 8,
            beta_start: 1e-3,
            beta_end: 0.1,
        };
        cfg.steps = 3;
        cfg.batch_size = 4;
        cfg.loss.method = Method::Sft;
        cfg.seed = seed;
        train_core(&cfg, &dataset).unwrap().0
    }

    #[test]
    fn alignment_scores_on_mixture_data() {
        let gm = GmSpec::circle(2, 2, 0.25, 4.0).unwrap();
        let spec = DataSpec::Gm(gm.clone());
        // At a component mean of a well-separated mixture the posterior
        // saturates.
        let s = alignment_score(gm.mean(0), 0, &spec).unwrap();
        assert!(s >= 1.0 - 1e-10);
        // At the midpoint of a symmetric two-component mixture it is 1/2.
        let mid: Vec<f64> = gm
            .mean(0)
            .iter()
            .zip(gm.mean(1))
            .map(|(a, b)| 0.5 * (a + b))
            .collect();
        let s = alignment_score(&mid, 0, &spec).unwrap();
        assert!((s - 0.5).abs() < 1e-12);
    }

    #[test]
    fn alignment_score_on_own_template_is_one() {
        let p = PatternSpec::new(4, 8, 0.1).unwrap();
        let spec = DataSpec::Pattern(p.clone());
        for c in 0..4 {
            let tpl = p.template(c).unwrap();
            let s = alignment_score(&tpl, c, &spec).unwrap();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn win_rate_hand_count() {
        let a = [0.9, 0.2, 0.6];
        let b = [0.5, 0.2, 0.7];
        assert_eq!(win_rate(&a, &b), 50.0);
        assert_eq!(win_rate(&[1.0, 1.0], &[0.0, 0.0]), 100.0);
        assert_eq!(win_rate(&[0.0, 0.0], &[1.0, 1.0]), 0.0);
    }

    #[test]
    fn win_rate_swap_identity_exact() {
        let mut rng = RngState::new(17);
        for n in [1usize, 2, 3, 7, 100, 333] {
            let a: Vec<f64> = (0..n).map(|_| rng.uniform01()).collect();
            let b: Vec<f64> = (0..n)
                .map(|i| if i % 5 == 0 { a[i] } else { rng.uniform01() })
                .collect();
            let ab = win_rate(&a, &b);
            let ba = win_rate(&b, &a);
            assert_eq!(ab + ba, 100.0, "n={n} ab={ab} ba={ba}");
        }
    }

    #[test]
    fn paired_eval_self_comparison_is_fifty() {
        let ckpt = tiny_checkpoint(5, 3);
        let spec = DataSpec::Gm(GmSpec::circle(3, 2, 0.5, 4.0).unwrap());
        let rep = paired_eval(&ckpt, &ckpt, &spec, 7, 99).unwrap();
        assert_eq!(rep.win_rate_a, 50.0);
        assert_eq!(rep.n_pairs, 21);
        assert_eq!(rep.mean_score_a, rep.mean_score_b);
    }

    #[test]
    fn paired_eval_swap_identity() {
        let a = tiny_checkpoint(5, 3);
        let b = tiny_checkpoint(6, 3);
        let spec = DataSpec::Gm(GmSpec::circle(3, 2, 0.5, 4.0).unwrap());
        let ab = paired_eval(&a, &b, &spec, 5, 7).unwrap();
        let ba = paired_eval(&b, &a, &spec, 5, 7).unwrap();
        assert_eq!(ab.win_rate_a + ba.win_rate_a, 100.0);
        assert_eq!(ab.mean_score_a, ba.mean_score_b);
    }

    #[test]
    fn paired_eval_rejects_incompatible_checkpoints() {
        let a = tiny_checkpoint(5, 3);
        let b = tiny_checkpoint(5, 2);
        let spec = DataSpec::Gm(GmSpec::circle(3, 2, 0.5, 4.0).unwrap());
        assert!(paired_eval(&a, &b, &spec, 3, 1).is_err());
    }

    #[test]
    fn report_json_fixed_key_order_roundtrip() {
        let ckpt = tiny_checkpoint(8, 2);
        let spec = DataSpec::Gm(GmSpec::circle(2, 2, 0.5, 4.0).unwrap());
        let rep = paired_eval(&ckpt, &ckpt, &spec, 3, 4).unwrap();
        let emitted = serde_json::to_string(&rep).unwrap();
        let emitted_again = serde_json::to_string(&rep).unwrap();
        assert_eq!(emitted, emitted_again);
        let parsed: EvalReport = serde_json::from_str(&emitted).unwrap();
        assert_eq!(parsed, rep);
        assert_eq!(serde_json::to_string(&parsed).unwrap(), emitted);
        // Keys are emitted in declaration order.
        let win_pos = emitted.find("win_rate_a").unwrap();
        let mean_pos = emitted.find("mean_score_a").unwrap();
        assert!(win_pos < mean_pos);
    }

    #[test]
    fn median_odd_and_even() {
        assert_eq!(median(&mut vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut vec![4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn ablation_structure_and_determinism() {
        let spec = GmSpec::circle(2, 2, 0.5, 4.0).unwrap();
        let dataset = Dataset::gaussian_mixture(&spec, 48, 3).unwrap();
        let arch = Architecture::new(2, 2, 4, 3, vec![8]).unwrap();
        let mut base = TrainConfig::new(arch);
        base.schedule = ScheduleConfig {
            timesteps: 8,
            beta_start: 1e-3,
            beta_end: 0.1,
        };
        base.steps = 4;
        base.batch_size = 4;
        let table = run_ablation(&dataset, &base, &[1, 2, 3], 3).unwrap();
        assert_eq!(table.rows.len(), 4);
        let names: Vec<&str> = table.rows.iter().map(|r| r.method.as_str()).collect();
        assert_eq!(names, ["sft", "blur", "random_grid", "random_image"]);
        // Vector data: the two grid strategies are inapplicable.
        assert!(!table.rows[1].applicable);
        assert!(!table.rows[2].applicable);
        assert!(table.rows[3].applicable);
        assert_eq!(table.rows[0].median_win_rate_vs_sft, 50.0);

        let again = run_ablation(&dataset, &base, &[1, 2, 3], 3).unwrap();
        assert_eq!(table.to_csv(), again.to_csv());
    }
}
