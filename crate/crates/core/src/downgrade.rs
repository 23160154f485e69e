//! Self-supervised construction of losing samples.
//!
//! Each preference pair keeps a real record as its winner and manufactures
//! the loser from it: swap in a record with a different label, blur the grid
//! by block-average pooling, or swap two random grid cells.

use crate::data::{Dataset, DatasetKind};
use crate::diffusion::Schedule;
use crate::error::{Error, Result};
use crate::rng::RngState;

pub const DEFAULT_BLUR_FACTOR: usize = 4;
pub const DEFAULT_GRID_COUNT: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DowngradeStrategy {
    /// Replace the sample with another record, preferring a different label
    /// unless `allow_same_label` is set.
    RandomImage { allow_same_label: bool },
    /// Average-pool `factor x factor` blocks, then nearest-neighbor upsample.
    Blur { factor: usize },
    /// Swap the contents of two random cells of a `grid_count x grid_count`
    /// partition.
    RandomGrid { grid_count: usize },
}

impl Default for DowngradeStrategy {
    fn default() -> Self {
        DowngradeStrategy::RandomImage {
            allow_same_label: false,
        }
    }
}

impl DowngradeStrategy {
    pub fn kind_name(&self) -> &'static str {
        match self {
            DowngradeStrategy::RandomImage { .. } => "random-image",
            DowngradeStrategy::Blur { .. } => "blur",
            DowngradeStrategy::RandomGrid { .. } => "grid",
        }
    }

    /// Check strategy parameters against a dataset.
    pub fn validate_for(&self, dataset: &Dataset) -> Result<()> {
        match *self {
            DowngradeStrategy::RandomImage { .. } => {
                if dataset.len() < 2 {
                    return Err(Error::Input(
                        "no distinct sample available (dataset has fewer than 2 records)".into(),
                    ));
                }
            }
            DowngradeStrategy::Blur { factor } => {
                if factor < 2 {
                    return Err(Error::Config(format!("blur factor must be >= 2, got {factor}")));
                }
                if dataset.kind() != DatasetKind::Grid {
                    return Err(Error::Config(
                        "blur downgrade needs grid-kind data".into(),
                    ));
                }
                if dataset.dim() % factor != 0 {
                    return Err(Error::Config(format!(
                        "side {} not divisible by blur factor {factor}",
                        dataset.dim()
                    )));
                }
            }
            DowngradeStrategy::RandomGrid { grid_count } => {
                if grid_count < 2 {
                    return Err(Error::Config(format!(
                        "grid count must be >= 2, got {grid_count}"
                    )));
                }
                if dataset.kind() != DatasetKind::Grid {
                    return Err(Error::Config(
                        "grid downgrade needs grid-kind data".into(),
                    ));
                }
                if dataset.dim() % grid_count != 0 {
                    return Err(Error::Config(format!(
                        "side {} not divisible by grid count {grid_count}",
                        dataset.dim()
                    )));
                }
            }
        }
        Ok(())
    }
}

/// One training pair: condition, winner, self-generated loser, the shared
/// timestep and each side's noise.
#[derive(Debug, Clone, PartialEq)]
pub struct PreferencePair {
    pub condition: u32,
    pub x_w: Vec<f64>,
    pub x_sl: Vec<f64>,
    pub t: usize,
    pub eps_w: Vec<f64>,
    pub eps_sl: Vec<f64>,
    pub strategy: DowngradeStrategy,
}

/// Pick a record other than the winner, preferring a different label: up to
/// `dataset.len()` rejection attempts, then any index other than the winner.
pub fn downgrade_random_image(
    dataset: &Dataset,
    winner_index: usize,
    rng: &mut RngState,
    allow_same_label: bool,
) -> Result<(Vec<f64>, usize)> {
    let n = dataset.len();
    if n < 2 {
        return Err(Error::Input(
            "no distinct sample available (dataset has fewer than 2 records)".into(),
        ));
    }
    if winner_index >= n {
        return Err(Error::Input(format!(
            "winner index {winner_index} out of range (n = {n})"
        )));
    }
    let winner_label = dataset.record(winner_index).label;
    if !allow_same_label {
        for _ in 0..n {
            let idx = rng.index(n);
            if idx != winner_index && dataset.record(idx).label != winner_label {
                return Ok((dataset.record(idx).values.clone(), idx));
            }
        }
    }
    loop {
        let idx = rng.index(n);
        if idx != winner_index {
            return Ok((dataset.record(idx).values.clone(), idx));
        }
    }
}

/// Average-pool each `factor x factor` block and fill the block with its mean.
pub fn downgrade_blur(x: &[f64], side: usize, factor: usize) -> Result<Vec<f64>> {
    if factor < 2 {
        return Err(Error::Input(format!("blur factor must be >= 2, got {factor}")));
    }
    if side == 0 || x.len() != side * side {
        return Err(Error::Input(format!(
            "expected a {side}x{side} grid, got {} values",
            x.len()
        )));
    }
    if side % factor != 0 {
        return Err(Error::Input(format!(
            "side {side} not divisible by blur factor {factor}"
        )));
    }
    let blocks = side / factor;
    let inv = 1.0 / (factor * factor) as f64;
    let mut out = vec![0.0; x.len()];
    for bi in 0..blocks {
        for bj in 0..blocks {
            // Shifted summation: exact on constant blocks, which makes
            // repeated blurring a fixed point.
            let base = x[(bi * factor) * side + bj * factor];
            let mut sum = 0.0;
            for i in 0..factor {
                for j in 0..factor {
                    sum += x[(bi * factor + i) * side + bj * factor + j] - base;
                }
            }
            let mean = base + sum * inv;
            for i in 0..factor {
                for j in 0..factor {
                    out[(bi * factor + i) * side + bj * factor + j] = mean;
                }
            }
        }
    }
    Ok(out)
}

pub(crate) fn swap_cells(x: &mut [f64], side: usize, grid_count: usize, a: usize, b: usize) {
    let cell = side / grid_count;
    let (ai, aj) = (a / grid_count, a % grid_count);
    let (bi, bj) = (b / grid_count, b % grid_count);
    for i in 0..cell {
        for j in 0..cell {
            let pa = (ai * cell + i) * side + aj * cell + j;
            let pb = (bi * cell + i) * side + bj * cell + j;
            x.swap(pa, pb);
        }
    }
}

/// Partition into `grid_count^2` cells and swap the contents of two distinct
/// uniformly chosen cells.
pub fn downgrade_random_grid(
    x: &[f64],
    side: usize,
    grid_count: usize,
    rng: &mut RngState,
) -> Result<Vec<f64>> {
    if grid_count < 2 {
        return Err(Error::Input(format!(
            "grid count must be >= 2, got {grid_count}"
        )));
    }
    if side == 0 || x.len() != side * side {
        return Err(Error::Input(format!(
            "expected a {side}x{side} grid, got {} values",
            x.len()
        )));
    }
    if side % grid_count != 0 {
        return Err(Error::Input(format!(
            "side {side} not divisible by grid count {grid_count}"
        )));
    }
    let cells = grid_count * grid_count;
    let a = rng.index(cells);
    let b = loop {
        let b = rng.index(cells);
        if b != a {
            break b;
        }
    };
    let mut out = x.to_vec();
    swap_cells(&mut out, side, grid_count, a, b);
    Ok(out)
}

/// Assemble a full preference pair for one winner record. Draw order: loser
/// construction, timestep, winner noise, loser noise (skipped when shared).
pub fn make_pair(
    dataset: &Dataset,
    winner_index: usize,
    strategy: DowngradeStrategy,
    schedule: &Schedule,
    rng: &mut RngState,
    share_noise: bool,
) -> Result<PreferencePair> {
    strategy.validate_for(dataset)?;
    if winner_index >= dataset.len() {
        return Err(Error::Input(format!(
            "winner index {winner_index} out of range (n = {})",
            dataset.len()
        )));
    }
    let rec = dataset.record(winner_index);
    let x_w = rec.values.clone();
    let x_sl = match strategy {
        DowngradeStrategy::RandomImage { allow_same_label } => {
            downgrade_random_image(dataset, winner_index, rng, allow_same_label)?.0
        }
        DowngradeStrategy::Blur { factor } => downgrade_blur(&x_w, dataset.dim(), factor)?,
        DowngradeStrategy::RandomGrid { grid_count } => {
            downgrade_random_grid(&x_w, dataset.dim(), grid_count, rng)?
        }
    };
    let t = 1 + rng.index(schedule.len());
    let eps_w = rng.gaussian_vec(x_w.len());
    let eps_sl = if share_noise {
        eps_w.clone()
    } else {
        rng.gaussian_vec(x_w.len())
    };
    Ok(PreferencePair {
        condition: rec.label,
        x_w,
        x_sl,
        t,
        eps_w,
        eps_sl,
        strategy,
    })
}
