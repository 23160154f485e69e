//! Deterministic, seedable random streams.
//!
//! Every stochastic choice in the crate — noise draws, batch sampling,
//! downgrade selection, evaluation streams — goes through [`RngState`], so a
//! run is bit-reproducible from its seed. The generator is splitmix64 with
//! Box–Muller normals; both are trivial to reproduce bit-for-bit in any
//! language, which keeps frozen test vectors portable.

use crate::error::{Error, Result};

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// Seedable PRNG state. It is a plain value: copy it to fork an identical
/// stream, never share it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RngState {
    state: u64,
    cached_gaussian: Option<f64>,
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        Self {
            state: seed,
            cached_gaussian: None,
        }
    }

    /// Raw state word, exposed for stream-accounting tests.
    pub fn state(&self) -> u64 {
        self.state
    }

    /// Next raw 64-bit value (splitmix64).
    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN_GAMMA);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform draw in `[0, 1)` with 53-bit resolution.
    pub fn uniform01(&mut self) -> f64 {
        unit_f64(self.next_u64())
    }

    /// Standard normal draw via Box–Muller. Each pair of outputs consumes
    /// exactly two uniform draws; the second value is cached and returned by
    /// the following call.
    pub fn gaussian(&mut self) -> f64 {
        if let Some(z) = self.cached_gaussian.take() {
            return z;
        }
        let mut u1 = self.uniform01();
        if u1 == 0.0 {
            u1 = 2f64.powi(-53);
        }
        let u2 = self.uniform01();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.cached_gaussian = Some(r * theta.sin());
        r * theta.cos()
    }

    pub fn gaussian_vec(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.gaussian()).collect()
    }

    /// Uniform index in `[0, n)`.
    pub fn index(&mut self, n: usize) -> usize {
        assert!(n > 0, "index() needs a non-empty range");
        (self.next_u64() % n as u64) as usize
    }

    /// Deterministic child stream for a labelled substream (worker index,
    /// condition, replicate, ...): one splitmix64 step on `state ^ label`
    /// seeds the child.
    pub fn child(&self, label: u64) -> RngState {
        let mut mixer = RngState::new(self.state ^ label);
        let seed = mixer.next_u64();
        RngState::new(seed)
    }
}

/// Map raw bits to `[0, 1)`: top 53 bits scaled by 2^-53.
pub(crate) fn unit_f64(bits: u64) -> f64 {
    (bits >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Parse a seed given as decimal or 0x-prefixed hex.
pub fn parse_seed(s: &str) -> Result<u64> {
    let s = s.trim();
    if let Some(hex) = s.strip_prefix("0x").or_else(|| s.strip_prefix("0X")) {
        u64::from_str_radix(hex, 16).map_err(|e| Error::Input(format!("bad hex seed {s:?}: {e}")))
    } else {
        s.parse()
            .map_err(|e| Error::Input(format!("bad seed {s:?}: {e}")))
    }
}
