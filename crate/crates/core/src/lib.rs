//! Desk-scale training and evaluation lab for conditional diffusion models.
//!
//! The crate implements and compares three fine-tuning objectives on small
//! synthetic conditional datasets: plain noise-prediction MSE (`sft`), direct
//! preference optimization on pre-ranked pairs (`dpo`), and self-supervised
//! preference optimization with self-generated losing samples (`sudo`).
//! Everything runs in f64 on the CPU with hand-rolled reverse-mode gradients
//! and is bit-reproducible from a seed.

pub mod data;
pub mod denoiser;
pub mod diffusion;
pub mod downgrade;
pub mod error;
pub mod harness;
pub mod losses;
pub mod rng;
pub mod training;

mod cli;
mod io;

pub use cli::cli_run;
pub use error::{Error, Result};
