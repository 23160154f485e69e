//! Synthetic conditional datasets and their analytic scoring oracles.
//!
//! Two record kinds stand in for (caption, image) pairs at desk scale:
//! labelled Gaussian-mixture vectors, whose exact class posterior doubles as
//! the alignment scorer, and labelled binary pattern grids (stripes,
//! checkerboard, center square) that give the image-style downgrades
//! something spatial to chew on.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::io::{write_atomic, Reader, Writer};
use crate::rng::RngState;

pub const DATASET_MAGIC: &[u8; 4] = b"SUD1";
pub const DATASET_VERSION: u32 = 1;

/// Gaussian-mixture specification: `K` isotropic components with shared
/// standard deviation and uniform weights.
#[derive(Debug, Clone, PartialEq)]
pub struct GmSpec {
    n_components: usize,
    dim: usize,
    means: Vec<Vec<f64>>,
    sigma: f64,
}

impl GmSpec {
    /// Standard placement: components on a circle of `radius` for `dim = 2`,
    /// evenly spaced on `[-radius, radius]` for `dim = 1`, and scaled axis
    /// unit vectors for higher dimensions.
    pub fn circle(n_components: usize, dim: usize, sigma: f64, radius: f64) -> Result<Self> {
        if n_components == 0 || dim == 0 {
            return Err(Error::Config("need K >= 1 and d >= 1".into()));
        }
        if !(radius > 0.0) {
            return Err(Error::Config("radius must be positive".into()));
        }
        let means = (0..n_components)
            .map(|c| match dim {
                1 => {
                    if n_components == 1 {
                        vec![0.0]
                    } else {
                        vec![radius * (2.0 * c as f64 / (n_components - 1) as f64 - 1.0)]
                    }
                }
                2 => {
                    let angle = 2.0 * std::f64::consts::PI * c as f64 / n_components as f64;
                    vec![radius * angle.cos(), radius * angle.sin()]
                }
                _ => {
                    let mut m = vec![0.0; dim];
                    m[c % dim] = radius * (1.0 + (c / dim) as f64);
                    m
                }
            })
            .collect();
        Self::with_means(means, sigma)
    }

    pub fn with_means(means: Vec<Vec<f64>>, sigma: f64) -> Result<Self> {
        if means.is_empty() {
            return Err(Error::Config("need at least one component".into()));
        }
        let dim = means[0].len();
        if dim == 0 || means.iter().any(|m| m.len() != dim) {
            return Err(Error::Config("component means must share a dimension >= 1".into()));
        }
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::Config("sigma must be positive and finite".into()));
        }
        for i in 0..means.len() {
            for j in i + 1..means.len() {
                if means[i] == means[j] {
                    return Err(Error::Config(format!("components {i} and {j} share a mean")));
                }
            }
        }
        Ok(Self {
            n_components: means.len(),
            dim,
            means,
            sigma,
        })
    }

    pub fn n_components(&self) -> usize {
        self.n_components
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn mean(&self, c: usize) -> &[f64] {
        &self.means[c]
    }

    /// Exact class posterior `p(c | x)` under uniform component weights,
    /// normalized through log-sum-exp so far-away queries cannot underflow
    /// to an unnormalized vector.
    pub fn posterior(&self, x: &[f64]) -> Vec<f64> {
        let inv = 1.0 / (2.0 * self.sigma * self.sigma);
        let logs: Vec<f64> = self
            .means
            .iter()
            .map(|m| {
                let d2: f64 = m.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum();
                -d2 * inv
            })
            .collect();
        let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut ps: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = ps.iter().sum();
        for p in &mut ps {
            *p /= total;
        }
        ps
    }
}

/// Free-function form of the posterior oracle.
pub fn posterior(spec: &GmSpec, x: &[f64]) -> Vec<f64> {
    spec.posterior(x)
}

/// Pattern-grid specification: class templates over a `side x side` grid
/// with additive Gaussian pixel noise.
#[derive(Debug, Clone, PartialEq)]
pub struct PatternSpec {
    n_classes: usize,
    side: usize,
    noise_sigma: f64,
}

impl PatternSpec {
    pub fn new(n_classes: usize, side: usize, noise_sigma: f64) -> Result<Self> {
        if n_classes == 0 || n_classes > 4 {
            return Err(Error::Config(format!(
                "pattern grids support 1..=4 classes, got {n_classes}"
            )));
        }
        if side < 4 {
            return Err(Error::Config(format!("side must be >= 4, got {side}")));
        }
        if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
            return Err(Error::Config("noise sigma must be finite and >= 0".into()));
        }
        Ok(Self {
            n_classes,
            side,
            noise_sigma,
        })
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn noise_sigma(&self) -> f64 {
        self.noise_sigma
    }

    /// Binary class template: 0 horizontal stripes, 1 vertical stripes,
    /// 2 checkerboard `(i + j) mod 2`, 3 centered square.
    pub fn template(&self, class: u32) -> Result<Vec<f64>> {
        if class as usize >= self.n_classes {
            return Err(Error::Input(format!(
                "class {class} out of range (K = {})",
                self.n_classes
            )));
        }
        let side = self.side;
        let q = side / 4;
        let mut out = vec![0.0; side * side];
        for i in 0..side {
            for j in 0..side {
                let v = match class {
                    0 => (i % 2) as f64,
                    1 => (j % 2) as f64,
                    2 => ((i + j) % 2) as f64,
                    _ => {
                        if (q..side - q).contains(&i) && (q..side - q).contains(&j) {
                            1.0
                        } else {
                            0.0
                        }
                    }
                };
                out[i * side + j] = v;
            }
        }
        Ok(out)
    }
}

/// Generating-distribution description carried alongside the records; this is
/// what makes analytic alignment scoring possible after a reload.
#[derive(Debug, Clone, PartialEq)]
pub enum DataSpec {
    Gm(GmSpec),
    Pattern(PatternSpec),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    Vector,
    Grid,
}

impl DatasetKind {
    pub fn name(&self) -> &'static str {
        match self {
            DatasetKind::Vector => "vector",
            DatasetKind::Grid => "grid",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub label: u32,
    pub values: Vec<f64>,
}

/// Labelled synthetic samples plus their generating spec.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    kind: DatasetKind,
    /// `d` for vector data, `side` for grid data.
    dim: usize,
    n_conditions: usize,
    records: Vec<Record>,
    spec: DataSpec,
}

impl Dataset {
    /// Draw `n` labelled samples from the mixture: a uniform label, then an
    /// isotropic Gaussian around that component's mean.
    pub fn gaussian_mixture(spec: &GmSpec, n: usize, seed: u64) -> Result<Dataset> {
        if n == 0 {
            return Err(Error::Config("dataset needs at least one record".into()));
        }
        let mut rng = RngState::new(seed);
        let mut records = Vec::with_capacity(n);
        for _ in 0..n {
            let label = rng.index(spec.n_components) as u32;
            let mean = spec.mean(label as usize);
            let values = (0..spec.dim)
                .map(|j| mean[j] + spec.sigma * rng.gaussian())
                .collect();
            records.push(Record { label, values });
        }
        Ok(Dataset {
            kind: DatasetKind::Vector,
            dim: spec.dim,
            n_conditions: spec.n_components,
            records,
            spec: DataSpec::Gm(spec.clone()),
        })
    }

    /// Draw `n` labelled pattern grids: a uniform class, then the class
    /// template plus per-pixel Gaussian noise.
    pub fn pattern_grid(
        n_classes: usize,
        side: usize,
        n: usize,
        noise_sigma: f64,
        seed: u64,
    ) -> Result<Dataset> {
        let spec = PatternSpec::new(n_classes, side, noise_sigma)?;
        if n == 0 {
            return Err(Error::Config("dataset needs at least one record".into()));
        }
        let mut rng = RngState::new(seed);
        let mut records = Vec::with_capacity(n);
        for _ in 0..n {
            let label = rng.index(n_classes) as u32;
            let mut values = spec.template(label)?;
            for v in &mut values {
                *v += noise_sigma * rng.gaussian();
            }
            records.push(Record { label, values });
        }
        Ok(Dataset {
            kind: DatasetKind::Grid,
            dim: side,
            n_conditions: n_classes,
            records,
            spec: DataSpec::Pattern(spec),
        })
    }

    pub fn kind(&self) -> DatasetKind {
        self.kind
    }

    /// `d` for vector data, `side` for grid data.
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Length of each record's value vector (`d`, or `side^2` for grids).
    pub fn value_len(&self) -> usize {
        match self.kind {
            DatasetKind::Vector => self.dim,
            DatasetKind::Grid => self.dim * self.dim,
        }
    }

    pub fn n_conditions(&self) -> usize {
        self.n_conditions
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn record(&self, i: usize) -> &Record {
        &self.records[i]
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn spec(&self) -> &DataSpec {
        &self.spec
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = Writer::new();
        w.bytes(DATASET_MAGIC);
        w.u32(DATASET_VERSION);
        w.u8(match self.kind {
            DatasetKind::Vector => 0,
            DatasetKind::Grid => 1,
        });
        w.u32(self.dim as u32);
        w.u32(self.n_conditions as u32);
        w.u64(self.records.len() as u64);
        let mut spec = Writer::new();
        match &self.spec {
            DataSpec::Gm(gm) => {
                spec.f64(gm.sigma);
                for m in &gm.means {
                    spec.f64_slice(m);
                }
            }
            DataSpec::Pattern(p) => {
                spec.f64(p.noise_sigma);
            }
        }
        w.u32(spec.len() as u32);
        let spec_bytes = spec.into_bytes();
        w.bytes(&spec_bytes);
        for rec in &self.records {
            w.u32(rec.label);
            w.f64_slice(&rec.values);
        }
        write_atomic(path, &w.into_bytes())
    }

    pub fn load(path: &Path) -> Result<Dataset> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes)
    }

    fn from_bytes(bytes: &[u8]) -> Result<Dataset> {
        let mut r = Reader::new(bytes);
        r.magic(DATASET_MAGIC, "dataset")?;
        let version = r.u32()?;
        if version != DATASET_VERSION {
            return Err(r.fail(format!("unsupported dataset version {version}")));
        }
        let kind = match r.u8()? {
            0 => DatasetKind::Vector,
            1 => DatasetKind::Grid,
            k => return Err(r.fail(format!("unknown dataset kind {k}"))),
        };
        let dim = r.u32()? as usize;
        let n_conditions = r.u32()? as usize;
        let n = r.u64()? as usize;
        if n == 0 {
            return Err(r.fail("dataset holds zero records"));
        }
        if dim == 0 || n_conditions == 0 {
            return Err(r.fail("dimension and condition count must be >= 1"));
        }
        let spec_len = r.u32()? as usize;
        let spec_start = r.pos() as usize;
        let spec = match kind {
            DatasetKind::Vector => {
                let expect = 8 + 8 * n_conditions * dim;
                if spec_len != expect {
                    return Err(r.fail(format!(
                        "mixture spec block is {spec_len} bytes, expected {expect}"
                    )));
                }
                let sigma = r.f64()?;
                let mut means = Vec::with_capacity(n_conditions);
                for _ in 0..n_conditions {
                    means.push(r.f64_vec(dim)?);
                }
                DataSpec::Gm(GmSpec::with_means(means, sigma).map_err(|e| Error::Format {
                    offset: spec_start as u64,
                    msg: format!("invalid mixture spec: {e}"),
                })?)
            }
            DatasetKind::Grid => {
                if spec_len != 8 {
                    return Err(r.fail(format!(
                        "pattern spec block is {spec_len} bytes, expected 8"
                    )));
                }
                let noise_sigma = r.f64()?;
                DataSpec::Pattern(PatternSpec::new(n_conditions, dim, noise_sigma).map_err(
                    |e| Error::Format {
                        offset: spec_start as u64,
                        msg: format!("invalid pattern spec: {e}"),
                    },
                )?)
            }
        };
        let value_len = match kind {
            DatasetKind::Vector => dim,
            DatasetKind::Grid => dim * dim,
        };
        let mut records = Vec::with_capacity(n);
        for _ in 0..n {
            let label_at = r.pos();
            let label = r.u32()?;
            if label as usize >= n_conditions {
                return Err(Error::Format {
                    offset: label_at,
                    msg: format!("label {label} out of range (K = {n_conditions})"),
                });
            }
            records.push(Record {
                label,
                values: r.f64_vec(value_len)?,
            });
        }
        r.expect_end()?;
        Ok(Dataset {
            kind,
            dim,
            n_conditions,
            records,
            spec,
        })
    }

    /// Samples as CSV: header `condition,x_1,...,x_d`, one row per record.
    pub fn rows_to_csv(rows: &[(u32, Vec<f64>)], value_len: usize) -> String {
        let mut out = String::from("condition");
        for j in 1..=value_len {
            let _ = write!(out, ",x_{j}");
        }
        out.push('\n');
        for (label, values) in rows {
            let _ = write!(out, "{label}");
            for v in values {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn mixture_component_means_monte_carlo() {
        let spec = GmSpec::circle(3, 2, 0.5, 4.0).unwrap();
        let data = Dataset::gaussian_mixture(&spec, 100_000, 7).unwrap();
        let mut sums = vec![vec![0.0f64; 2]; 3];
        let mut counts = vec![0usize; 3];
        for rec in data.records() {
            counts[rec.label as usize] += 1;
            for j in 0..2 {
                sums[rec.label as usize][j] += rec.values[j];
            }
        }
        for c in 0..3 {
            let n_c = counts[c] as f64;
            let tol = 3.0 * spec.sigma() / n_c.sqrt();
            for j in 0..2 {
                let mean = sums[c][j] / n_c;
                assert!(
                    (mean - spec.mean(c)[j]).abs() <= tol,
                    "component {c} axis {j}: {mean} vs {}",
                    spec.mean(c)[j]
                );
            }
        }
    }

    #[test]
    fn single_component_all_labels_zero() {
        let spec = GmSpec::circle(1, 2, 0.5, 4.0).unwrap();
        let data = Dataset::gaussian_mixture(&spec, 100, 3).unwrap();
        assert!(data.records().iter().all(|r| r.label == 0));
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = GmSpec::circle(4, 2, 0.5, 4.0).unwrap();
        let a = Dataset::gaussian_mixture(&spec, 250, 11).unwrap();
        let b = Dataset::gaussian_mixture(&spec, 250, 11).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn posterior_symmetry_and_saturation() {
        let spec = GmSpec::with_means(vec![vec![-1.0, 0.0], vec![1.0, 0.0]], 0.5).unwrap();
        let p = spec.posterior(&[0.0, 0.0]);
        assert!((p[0] - 0.5).abs() < 1e-12);
        assert!((p[1] - 0.5).abs() < 1e-12);

        let single = GmSpec::circle(1, 2, 0.3, 4.0).unwrap();
        assert_eq!(single.posterior(&[9.0, -4.0]), vec![1.0]);

        // Means 8 sigma apart: posterior at a mean is within 1e-10 of 1.
        let sep = GmSpec::with_means(vec![vec![0.0], vec![8.0 * 0.5]], 0.5).unwrap();
        let p = sep.posterior(&[0.0]);
        assert!(p[0] >= 1.0 - 1e-10, "p = {}", p[0]);
    }

    #[test]
    fn posterior_survives_underflowing_exponents() {
        // Distances large enough that every raw exponent underflows to zero.
        let spec = GmSpec::with_means(vec![vec![0.0, 0.0], vec![3.0, 0.0]], 0.05).unwrap();
        let p = spec.posterior(&[2000.0, 0.0]);
        let total: f64 = p.iter().sum();
        assert!((total - 1.0).abs() <= 1e-12, "sum = {total}");
        assert!(p.iter().all(|v| v.is_finite()));
        assert!(p[1] > p[0]);
    }

    #[test]
    fn pattern_templates() {
        let spec = PatternSpec::new(4, 8, 0.0).unwrap();
        let checker = spec.template(2).unwrap();
        for i in 0..8 {
            for j in 0..8 {
                assert_eq!(checker[i * 8 + j], ((i + j) % 2) as f64);
            }
        }
        let data = Dataset::pattern_grid(4, 8, 40, 0.0, 5).unwrap();
        for rec in data.records() {
            let tpl = spec.template(rec.label).unwrap();
            assert_eq!(rec.values, tpl);
        }
        assert!(Dataset::pattern_grid(5, 8, 10, 0.0, 1).is_err());
        assert!(Dataset::pattern_grid(2, 3, 10, 0.0, 1).is_err());
    }

    #[test]
    fn save_load_roundtrip_both_kinds() {
        let dir = tempfile::tempdir().unwrap();
        let spec = GmSpec::circle(4, 2, 0.5, 4.0).unwrap();
        let gm = Dataset::gaussian_mixture(&spec, 64, 9).unwrap();
        let path = dir.path().join("gm.sud");
        gm.save(&path).unwrap();
        let loaded = Dataset::load(&path).unwrap();
        assert_eq!(gm, loaded);

        let grid = Dataset::pattern_grid(3, 8, 32, 0.1, 2).unwrap();
        let gpath = dir.path().join("grid.sud");
        grid.save(&gpath).unwrap();
        assert_eq!(grid, Dataset::load(&gpath).unwrap());
    }

    #[test]
    fn corrupt_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let spec = GmSpec::circle(2, 2, 0.5, 4.0).unwrap();
        let data = Dataset::gaussian_mixture(&spec, 4, 1).unwrap();
        let path = dir.path().join("data.sud");
        data.save(&path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        match Dataset::load(&path) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn zero_record_file_is_rejected() {
        let mut w = Writer::new();
        w.bytes(DATASET_MAGIC);
        w.u32(DATASET_VERSION);
        w.u8(0);
        w.u32(2);
        w.u32(1);
        w.u64(0);
        w.u32(8 + 16);
        w.f64(0.5);
        w.f64_slice(&[0.0, 0.0]);
        let bytes = w.into_bytes();
        assert!(matches!(
            Dataset::from_bytes(&bytes),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn truncated_payload_reports_offset() {
        let dir = tempfile::tempdir().unwrap();
        let spec = GmSpec::circle(2, 2, 0.5, 4.0).unwrap();
        let data = Dataset::gaussian_mixture(&spec, 4, 1).unwrap();
        let path = dir.path().join("data.sud");
        data.save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let cut = &bytes[..bytes.len() - 5];
        match Dataset::from_bytes(cut) {
            Err(Error::Format { offset, .. }) => assert!(offset as usize <= cut.len()),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    proptest! {
        #[test]
        fn prop_posterior_normalized(
            x0 in -50.0f64..50.0,
            x1 in -50.0f64..50.0,
            sigma in 0.05f64..2.0,
        ) {
            let spec = GmSpec::circle(4, 2, sigma, 4.0).unwrap();
            let p = spec.posterior(&[x0, x1]);
            let total: f64 = p.iter().sum();
            prop_assert!((total - 1.0).abs() <= 1e-12);
            prop_assert!(p.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
