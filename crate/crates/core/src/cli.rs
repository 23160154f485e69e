//! Command-line interface: data generation, training, sampling, paired
//! evaluation, the downgrade ablation and gradient checking.
//!
//! Every command writes its outputs atomically and prints a single JSON
//! summary line to stdout on success. Exit codes: 0 success, 1 usage error,
//! 2 I/O or file-format error, 3 numeric failure, 4 gradient-check tolerance
//! exceeded.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use crate::data::{Dataset, GmSpec};
use crate::denoiser::Architecture;
use crate::diffusion::{sample, ScheduleConfig};
use crate::downgrade::DowngradeStrategy;
use crate::error::{Error, Result};
use crate::harness::{paired_eval, run_ablation};
use crate::io::write_atomic;
use crate::losses::Method;
use crate::rng::{parse_seed, RngState};
use crate::training::{grad_check, Checkpoint, TrainConfig};

#[derive(Parser)]
#[command(
    name = "sudodiff",
    version,
    about = "Desk-scale lab for preference-based fine-tuning of conditional diffusion models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum KindArg {
    Gm,
    Grid,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum MethodArg {
    Sft,
    Sudo,
    Dpo,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Method {
        match m {
            MethodArg::Sft => Method::Sft,
            MethodArg::Sudo => Method::Sudo,
            MethodArg::Dpo => Method::Dpo,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum DowngradeArg {
    RandomImage,
    Blur,
    Grid,
}

fn seed_value(s: &str) -> std::result::Result<u64, String> {
    parse_seed(s).map_err(|e| e.to_string())
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset (Gaussian mixture or pattern grids).
    GenData {
        #[arg(long, value_enum)]
        kind: KindArg,
        /// Number of conditions / classes.
        #[arg(long)]
        k: usize,
        /// Vector dimension (gm kind).
        #[arg(long)]
        d: Option<usize>,
        /// Grid side length (grid kind).
        #[arg(long)]
        side: Option<usize>,
        /// Number of records.
        #[arg(long)]
        n: usize,
        /// Component std (gm) or pixel noise std (grid).
        #[arg(long, default_value_t = 0.5)]
        sigma: f64,
        /// Radius of the component layout (gm kind).
        #[arg(long, default_value_t = 4.0)]
        radius: f64,
        #[arg(long, value_parser = seed_value)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fine-tune a model on a dataset file.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        method: MethodArg,
        #[arg(long, value_enum, default_value = "random-image")]
        downgrade: DowngradeArg,
        #[arg(long, default_value_t = 4)]
        blur_factor: usize,
        #[arg(long, default_value_t = 8)]
        grid_count: usize,
        /// Preference scale factor.
        #[arg(long, default_value_t = -2500.0, allow_hyphen_values = true)]
        c: f64,
        /// MSE term weight.
        #[arg(long, default_value_t = 0.5)]
        lambda1: f64,
        /// Preference term weight.
        #[arg(long, default_value_t = 0.5)]
        lambda2: f64,
        #[arg(long, default_value_t = 1000)]
        steps: usize,
        /// Pairs (or samples) per step.
        #[arg(long, default_value_t = 64)]
        batch: usize,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        #[arg(long, default_value_t = 0.25)]
        warmup_frac: f64,
        #[arg(long, default_value_t = 0.0)]
        weight_decay: f64,
        #[arg(long, value_parser = seed_value)]
        seed: u64,
        /// Reuse the winner noise for the loser side.
        #[arg(long)]
        share_noise: bool,
        /// Let random-image losers share the winner's label.
        #[arg(long)]
        allow_same_label: bool,
        /// Hidden layer widths.
        #[arg(long, value_delimiter = ',', default_value = "64,64")]
        hidden: Vec<usize>,
        /// Time-embedding width (even).
        #[arg(long, default_value_t = 8)]
        dt: usize,
        /// Condition-embedding width.
        #[arg(long, default_value_t = 4)]
        dc: usize,
        #[arg(long, default_value_t = 200)]
        timesteps: usize,
        #[arg(long, default_value_t = 1e-4)]
        beta_start: f64,
        #[arg(long, default_value_t = 0.02)]
        beta_end: f64,
        #[arg(long)]
        out_ckpt: PathBuf,
        #[arg(long)]
        metrics: PathBuf,
    },
    /// Draw samples from a checkpoint into a CSV file.
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        /// Condition to sample.
        #[arg(long)]
        cond: u32,
        #[arg(long)]
        n: usize,
        #[arg(long, value_parser = seed_value)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Paired same-noise comparison of two checkpoints.
    Eval {
        #[arg(long)]
        ckpt_a: PathBuf,
        #[arg(long)]
        ckpt_b: PathBuf,
        /// Dataset file providing the scoring spec.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 128)]
        n_per_cond: usize,
        #[arg(long, value_parser = seed_value)]
        seed: u64,
        /// Output JSON report path.
        #[arg(long)]
        report: PathBuf,
    },
    /// Train the sft baseline plus every applicable downgrade variant and
    /// tabulate median win rates.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        steps: usize,
        #[arg(long, value_delimiter = ',', value_parser = seed_value)]
        seeds: Vec<u64>,
        #[arg(long, default_value_t = 64)]
        batch: usize,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        #[arg(long, default_value_t = 128)]
        n_per_cond: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare analytic gradients against central finite differences for the
    /// sft, pure-preference and combined objectives on a small model.
    Gradcheck {
        #[arg(long, value_parser = seed_value)]
        seed: u64,
        #[arg(long, default_value_t = 1e-5)]
        h: f64,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
}

fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::Input(_) => 1,
        Error::Io(_) | Error::Format { .. } => 2,
        Error::Numeric(_) | Error::Internal(_) => 3,
    }
}

fn default_arch(dataset: &Dataset, dt: usize, dc: usize, hidden: Vec<usize>) -> Result<Architecture> {
    Architecture::new(dataset.value_len(), dataset.n_conditions(), dt, dc, hidden)
}

fn last_metric(metrics_csv: &str, column: usize) -> Option<f64> {
    metrics_csv
        .lines()
        .last()
        .and_then(|line| line.split(',').nth(column))
        .and_then(|v| v.parse().ok())
}

/// Run one parsed command; returns the JSON summary line and the exit code.
fn run_command(command: Command) -> Result<(String, i32)> {
    match command {
        Command::GenData {
            kind,
            k,
            d,
            side,
            n,
            sigma,
            radius,
            seed,
            out,
        } => {
            let dataset = match kind {
                KindArg::Gm => {
                    let d = d.ok_or_else(|| Error::Input("--d is required for --kind gm".into()))?;
                    let spec = GmSpec::circle(k, d, sigma, radius)?;
                    Dataset::gaussian_mixture(&spec, n, seed)?
                }
                KindArg::Grid => {
                    let side =
                        side.ok_or_else(|| Error::Input("--side is required for --kind grid".into()))?;
                    Dataset::pattern_grid(k, side, n, sigma, seed)?
                }
            };
            dataset.save(&out)?;
            let summary = json!({
                "command": "gen-data",
                "kind": dataset.kind().name(),
                "k": dataset.n_conditions(),
                "dim": dataset.dim(),
                "n": dataset.len(),
                "out": out.display().to_string(),
            });
            Ok((summary.to_string(), 0))
        }
        Command::Train {
            data,
            method,
            downgrade,
            blur_factor,
            grid_count,
            c,
            lambda1,
            lambda2,
            steps,
            batch,
            lr,
            warmup_frac,
            weight_decay,
            seed,
            share_noise,
            allow_same_label,
            hidden,
            dt,
            dc,
            timesteps,
            beta_start,
            beta_end,
            out_ckpt,
            metrics,
        } => {
            let dataset = Dataset::load(&data)?;
            let arch = default_arch(&dataset, dt, dc, hidden)?;
            let mut cfg = TrainConfig::new(arch);
            cfg.loss.method = method.into();
            cfg.loss.scale_c = c;
            cfg.loss.lambda1 = lambda1;
            cfg.loss.lambda2 = lambda2;
            cfg.schedule = ScheduleConfig {
                timesteps,
                beta_start,
                beta_end,
            };
            cfg.steps = steps;
            cfg.batch_size = batch;
            cfg.base_lr = lr;
            cfg.warmup_frac = warmup_frac;
            cfg.weight_decay = weight_decay;
            cfg.seed = seed;
            cfg.share_noise = share_noise;
            cfg.downgrade = match downgrade {
                DowngradeArg::RandomImage => DowngradeStrategy::RandomImage { allow_same_label },
                DowngradeArg::Blur => DowngradeStrategy::Blur {
                    factor: blur_factor,
                },
                DowngradeArg::Grid => DowngradeStrategy::RandomGrid { grid_count },
            };
            let (ckpt, metrics_csv) = crate::training::train_core(&cfg, &dataset)?;
            write_atomic(&metrics, metrics_csv.as_bytes())?;
            ckpt.save(&out_ckpt)?;
            let summary = json!({
                "command": "train",
                "method": cfg.method().name(),
                "steps": steps,
                "seed": seed,
                "final_loss_total": last_metric(&metrics_csv, 2),
                "out_ckpt": out_ckpt.display().to_string(),
                "metrics": metrics.display().to_string(),
            });
            Ok((summary.to_string(), 0))
        }
        Command::Sample {
            ckpt,
            cond,
            n,
            seed,
            out,
        } => {
            let checkpoint = Checkpoint::load(&ckpt)?;
            if cond as usize >= checkpoint.arch().n_conditions {
                return Err(Error::Input(format!(
                    "condition {cond} out of range (K = {})",
                    checkpoint.arch().n_conditions
                )));
            }
            if n == 0 {
                return Err(Error::Input("need at least one sample".into()));
            }
            let schedule = checkpoint.schedule.build()?;
            let mut rng = RngState::new(seed);
            let mut rows = Vec::with_capacity(n);
            for _ in 0..n {
                let x0 = sample(&checkpoint.params, &schedule, cond as usize, &mut rng)?;
                rows.push((cond, x0));
            }
            let csv = Dataset::rows_to_csv(&rows, checkpoint.arch().data_dim);
            write_atomic(&out, csv.as_bytes())?;
            let summary = json!({
                "command": "sample",
                "cond": cond,
                "n": n,
                "seed": seed,
                "out": out.display().to_string(),
            });
            Ok((summary.to_string(), 0))
        }
        Command::Eval {
            ckpt_a,
            ckpt_b,
            data,
            n_per_cond,
            seed,
            report,
        } => {
            let a = Checkpoint::load(&ckpt_a)?;
            let b = Checkpoint::load(&ckpt_b)?;
            let dataset = Dataset::load(&data)?;
            let rep = paired_eval(&a, &b, dataset.spec(), n_per_cond, seed)?;
            let mut report_json = serde_json::to_string(&rep)
                .map_err(|e| Error::Internal(format!("report serialization: {e}")))?;
            report_json.push('\n');
            write_atomic(&report, report_json.as_bytes())?;
            let summary = json!({
                "command": "eval",
                "win_rate_a": rep.win_rate_a,
                "mean_score_a": rep.mean_score_a,
                "mean_score_b": rep.mean_score_b,
                "n_pairs": rep.n_pairs,
                "report": report.display().to_string(),
            });
            Ok((summary.to_string(), 0))
        }
        Command::Ablate {
            data,
            steps,
            seeds,
            batch,
            lr,
            n_per_cond,
            out,
        } => {
            let dataset = Dataset::load(&data)?;
            let arch = default_arch(&dataset, 8, 4, vec![64, 64])?;
            let mut base = TrainConfig::new(arch);
            base.steps = steps;
            base.batch_size = batch;
            base.base_lr = lr;
            let table = run_ablation(&dataset, &base, &seeds, n_per_cond)?;
            write_atomic(&out, table.to_csv().as_bytes())?;
            let summary = json!({
                "command": "ablate",
                "rows": table.rows.len(),
                "seeds": seeds,
                "out": out.display().to_string(),
            });
            Ok((summary.to_string(), 0))
        }
        Command::Gradcheck { seed, h, tol } => {
            let spec = GmSpec::circle(2, 2, 0.5, 4.0)?;
            let mut data_rng = RngState::new(seed);
            let dataset = Dataset::gaussian_mixture(&spec, 64, data_rng.next_u64())?;
            let arch = Architecture::new(2, 2, 4, 3, vec![16, 16])?;
            let mut cfg = TrainConfig::new(arch);
            cfg.batch_size = 8;
            let mut worst = 0.0f64;
            let mut per_method = serde_json::Map::new();
            for (name, method, l1, l2) in [
                ("sft", Method::Sft, 0.5, 0.5),
                ("sudo", Method::Sudo, 0.0, 1.0),
                ("combined", Method::Sudo, 0.5, 0.5),
            ] {
                cfg.loss.method = method;
                cfg.loss.lambda1 = l1;
                cfg.loss.lambda2 = l2;
                let err = grad_check(&cfg, &dataset, seed, h)?;
                per_method.insert(name.into(), json!(err));
                worst = worst.max(err);
            }
            let summary = json!({
                "command": "gradcheck",
                "h": h,
                "tol": tol,
                "max_rel_err": worst,
                "per_method": per_method,
            });
            let code = if worst <= tol { 0 } else { 4 };
            Ok((summary.to_string(), code))
        }
    }
}

/// Parse and run; returns the process exit code. The JSON summary goes to
/// stdout on success and to stderr when a tolerance gate fails.
pub fn cli_run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(err) => {
            use clap::error::ErrorKind;
            let code = match err.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = err.print();
            return code;
        }
    };
    match run_command(cli.command) {
        Ok((summary, 0)) => {
            println!("{summary}");
            0
        }
        Ok((summary, code)) => {
            eprintln!("{summary}");
            code
        }
        Err(err) => {
            eprintln!("error: {err}");
            exit_code(&err)
        }
    }
}
