//! Conditional noise-prediction network.
//!
//! A small SiLU MLP maps `[x_t | time embedding | condition embedding]` to a
//! predicted noise vector. The same parameter struct serves as the trainable
//! policy and as the frozen reference. Gradients are computed by hand-rolled
//! reverse mode over the exact forward computation, so they can be checked
//! against central finite differences to tight tolerances.

use crate::error::{Error, Result};
use crate::rng::RngState;

/// Numerically stable logistic sigmoid.
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn silu(z: f64) -> f64 {
    z * sigmoid(z)
}

fn silu_grad(z: f64) -> f64 {
    let s = sigmoid(z);
    s * (1.0 + z * (1.0 - s))
}

/// Network shape: data dimension, number of conditions, embedding widths and
/// hidden layer widths. The activation is fixed to SiLU.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Architecture {
    pub data_dim: usize,
    pub n_conditions: usize,
    /// Width of the sinusoidal time embedding; must be even.
    pub time_dim: usize,
    /// Width of the learned per-condition embedding.
    pub cond_dim: usize,
    pub hidden: Vec<usize>,
}

impl Architecture {
    pub fn new(
        data_dim: usize,
        n_conditions: usize,
        time_dim: usize,
        cond_dim: usize,
        hidden: Vec<usize>,
    ) -> Result<Self> {
        let arch = Self {
            data_dim,
            n_conditions,
            time_dim,
            cond_dim,
            hidden,
        };
        arch.validate()?;
        Ok(arch)
    }

    pub fn validate(&self) -> Result<()> {
        if self.data_dim == 0 || self.n_conditions == 0 || self.cond_dim == 0 {
            return Err(Error::Config(
                "data_dim, n_conditions and cond_dim must all be >= 1".into(),
            ));
        }
        if self.time_dim == 0 || self.time_dim % 2 != 0 {
            return Err(Error::Config(format!(
                "time embedding width must be even and >= 2, got {}",
                self.time_dim
            )));
        }
        if self.hidden.iter().any(|&w| w == 0) {
            return Err(Error::Config("hidden layer widths must be >= 1".into()));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.data_dim + self.time_dim + self.cond_dim
    }

    /// `(fan_in, fan_out)` of every linear layer, input side first.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden.len() + 1);
        let mut prev = self.input_dim();
        for &h in &self.hidden {
            dims.push((prev, h));
            prev = h;
        }
        dims.push((prev, self.data_dim));
        dims
    }

    pub fn param_count(&self) -> usize {
        self.layer_dims()
            .iter()
            .map(|&(i, o)| i * o + o)
            .sum::<usize>()
            + self.n_conditions * self.cond_dim
    }

    pub(crate) fn layout(&self) -> ParamLayout {
        let mut layers = Vec::with_capacity(self.hidden.len() + 1);
        let mut off = 0usize;
        for (fan_in, fan_out) in self.layer_dims() {
            let w_off = off;
            let b_off = w_off + fan_in * fan_out;
            off = b_off + fan_out;
            layers.push(LayerSlot {
                w_off,
                b_off,
                fan_in,
                fan_out,
            });
        }
        ParamLayout {
            layers,
            cond_off: off,
            total: off + self.n_conditions * self.cond_dim,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct LayerSlot {
    pub w_off: usize,
    pub b_off: usize,
    pub fan_in: usize,
    pub fan_out: usize,
}

/// Flat-buffer offsets: per-layer `[W row-major | b]` blocks followed by the
/// condition embedding table.
pub(crate) struct ParamLayout {
    pub layers: Vec<LayerSlot>,
    pub cond_off: usize,
    pub total: usize,
}

/// Sinusoidal embedding of an integer timestep: `dt/2` sine components
/// followed by `dt/2` cosine components at frequencies `10000^(-2i/dt)`.
pub fn time_embedding(t: usize, time_dim: usize) -> Result<Vec<f64>> {
    if time_dim == 0 || time_dim % 2 != 0 {
        return Err(Error::Config(format!(
            "time embedding width must be even and >= 2, got {time_dim}"
        )));
    }
    let half = time_dim / 2;
    let mut emb = vec![0.0; time_dim];
    for i in 0..half {
        let freq = 10_000f64.powf(-2.0 * i as f64 / time_dim as f64);
        let phase = t as f64 * freq;
        emb[i] = phase.sin();
        emb[half + i] = phase.cos();
    }
    Ok(emb)
}

/// All learnable weights: hidden/output layers plus the condition table,
/// stored as one flat f64 buffer (see [`ParamLayout`]).
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserParams {
    arch: Architecture,
    values: Vec<f64>,
}

/// Gradient buffer shape-congruent with [`DenoiserParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    values: Vec<f64>,
}

impl ParamGrads {
    pub fn zeros(arch: &Architecture) -> Self {
        Self {
            values: vec![0.0; arch.param_count()],
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn l2_norm(&self) -> f64 {
        self.values.iter().map(|g| g * g).sum::<f64>().sqrt()
    }
}

/// Activation record of one forward pass, kept for the backward sweep.
pub struct Tape {
    input: Vec<f64>,
    /// Pre-activations of each hidden layer.
    pre: Vec<Vec<f64>>,
    /// Post-activations of each hidden layer.
    post: Vec<Vec<f64>>,
    condition: usize,
}

impl DenoiserParams {
    /// Initialize: Glorot-uniform hidden weights, zero biases, N(0, 0.02^2)
    /// condition embeddings, and a zero output layer so the fresh network
    /// predicts exactly zero noise.
    pub fn init(arch: &Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let layout = arch.layout();
        let mut values = vec![0.0; layout.total];
        let mut rng = RngState::new(seed);
        let last = layout.layers.len() - 1;
        for (l, slot) in layout.layers.iter().enumerate() {
            if l == last {
                continue; // output layer stays zero
            }
            let limit = (6.0 / (slot.fan_in + slot.fan_out) as f64).sqrt();
            for w in &mut values[slot.w_off..slot.w_off + slot.fan_in * slot.fan_out] {
                *w = (2.0 * rng.uniform01() - 1.0) * limit;
            }
        }
        for v in &mut values[layout.cond_off..layout.total] {
            *v = 0.02 * rng.gaussian();
        }
        Ok(Self {
            arch: arch.clone(),
            values,
        })
    }

    pub fn zeros(arch: &Architecture) -> Result<Self> {
        arch.validate()?;
        Ok(Self {
            values: vec![0.0; arch.param_count()],
            arch: arch.clone(),
        })
    }

    /// Rebuild from a flat buffer (checkpoint load, finite differences).
    pub fn from_values(arch: Architecture, values: Vec<f64>) -> Result<Self> {
        arch.validate()?;
        if values.len() != arch.param_count() {
            return Err(Error::Config(format!(
                "parameter buffer has {} values, architecture needs {}",
                values.len(),
                arch.param_count()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite parameter value".into()));
        }
        Ok(Self { arch, values })
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn cond_embedding(&self, c: usize) -> &[f64] {
        let layout = self.arch.layout();
        let off = layout.cond_off + c * self.arch.cond_dim;
        &self.values[off..off + self.arch.cond_dim]
    }

    fn assemble_input(&self, x_t: &[f64], t: usize, c: usize) -> Result<Vec<f64>> {
        if c >= self.arch.n_conditions {
            return Err(Error::Input(format!(
                "condition {c} out of range (K = {})",
                self.arch.n_conditions
            )));
        }
        if x_t.len() != self.arch.data_dim {
            return Err(Error::Input(format!(
                "sample has dimension {}, expected {}",
                x_t.len(),
                self.arch.data_dim
            )));
        }
        if x_t.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("non-finite sample value".into()));
        }
        let emb = time_embedding(t, self.arch.time_dim)?;
        let mut input = Vec::with_capacity(self.arch.input_dim());
        input.extend_from_slice(x_t);
        input.extend_from_slice(&emb);
        input.extend_from_slice(self.cond_embedding(c));
        Ok(input)
    }

    fn affine(&self, slot: &LayerSlot, input: &[f64]) -> Vec<f64> {
        let w = &self.values[slot.w_off..slot.w_off + slot.fan_in * slot.fan_out];
        let b = &self.values[slot.b_off..slot.b_off + slot.fan_out];
        let mut out = Vec::with_capacity(slot.fan_out);
        for o in 0..slot.fan_out {
            let row = &w[o * slot.fan_in..(o + 1) * slot.fan_in];
            let mut acc = b[o];
            for (wi, xi) in row.iter().zip(input) {
                acc += wi * xi;
            }
            out.push(acc);
        }
        out
    }

    /// Predicted noise for `(x_t, t, c)`. Pure function of params and inputs.
    pub fn forward(&self, x_t: &[f64], t: usize, c: usize) -> Result<Vec<f64>> {
        let layout = self.arch.layout();
        let mut act = self.assemble_input(x_t, t, c)?;
        let last = layout.layers.len() - 1;
        for (l, slot) in layout.layers.iter().enumerate() {
            let mut z = self.affine(slot, &act);
            if l != last {
                for v in &mut z {
                    *v = silu(*v);
                }
            }
            act = z;
        }
        Ok(act)
    }

    /// Forward pass that records the activations needed by [`Self::backward`].
    /// The returned prediction is bit-identical to [`Self::forward`].
    pub fn forward_tape(&self, x_t: &[f64], t: usize, c: usize) -> Result<(Vec<f64>, Tape)> {
        let layout = self.arch.layout();
        let input = self.assemble_input(x_t, t, c)?;
        let n_hidden = layout.layers.len() - 1;
        let mut pre = Vec::with_capacity(n_hidden);
        let mut post = Vec::with_capacity(n_hidden);
        let mut act = input.clone();
        for slot in &layout.layers[..n_hidden] {
            let z = self.affine(slot, &act);
            let a: Vec<f64> = z.iter().map(|&v| silu(v)).collect();
            pre.push(z);
            act = a.clone();
            post.push(a);
        }
        let out = self.affine(&layout.layers[n_hidden], &act);
        Ok((
            out,
            Tape {
                input,
                pre,
                post,
                condition: c,
            },
        ))
    }

    /// Reverse-mode sweep: accumulates d<upstream, output>/dparams into
    /// `grads` and returns the gradient with respect to `x_t`.
    pub fn backward(&self, tape: &Tape, upstream: &[f64], grads: &mut ParamGrads) -> Vec<f64> {
        let layout = self.arch.layout();
        debug_assert_eq!(grads.values.len(), layout.total);
        debug_assert_eq!(upstream.len(), self.arch.data_dim);
        let mut delta = upstream.to_vec();
        for l in (0..layout.layers.len()).rev() {
            let slot = layout.layers[l];
            let a_in: &[f64] = if l == 0 { &tape.input } else { &tape.post[l - 1] };
            let g = &mut grads.values;
            for o in 0..slot.fan_out {
                let d = delta[o];
                g[slot.b_off + o] += d;
                let row = slot.w_off + o * slot.fan_in;
                for (i, &ai) in a_in.iter().enumerate() {
                    g[row + i] += d * ai;
                }
            }
            let w = &self.values[slot.w_off..slot.w_off + slot.fan_in * slot.fan_out];
            let mut prev = vec![0.0; slot.fan_in];
            for o in 0..slot.fan_out {
                let d = delta[o];
                let row = &w[o * slot.fan_in..(o + 1) * slot.fan_in];
                for (p, wi) in prev.iter_mut().zip(row) {
                    *p += wi * d;
                }
            }
            if l > 0 {
                for (p, &z) in prev.iter_mut().zip(&tape.pre[l - 1]) {
                    *p *= silu_grad(z);
                }
            }
            delta = prev;
        }
        // delta now spans [x | time embedding | condition embedding]
        let cond_off =
            layout.cond_off + tape.condition * self.arch.cond_dim;
        let tail = self.arch.data_dim + self.arch.time_dim;
        for j in 0..self.arch.cond_dim {
            grads.values[cond_off + j] += delta[tail + j];
        }
        delta.truncate(self.arch.data_dim);
        delta
    }

    /// Convenience wrapper: one forward pass plus one backward sweep into a
    /// fresh gradient buffer.
    pub fn forward_backward(
        &self,
        x_t: &[f64],
        t: usize,
        c: usize,
        upstream: &[f64],
    ) -> Result<(Vec<f64>, ParamGrads, Vec<f64>)> {
        let (out, tape) = self.forward_tape(x_t, t, c)?;
        let mut grads = ParamGrads::zeros(&self.arch);
        let grad_x = self.backward(&tape, upstream, &mut grads);
        Ok((out, grads, grad_x))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_arch() -> Architecture {
        Architecture::new(2, 3, 4, 3, vec![8, 8]).unwrap()
    }

    #[test]
    fn param_count_matches_analytic_formula() {
        // (14*32+32) + (32*32+32) + (32*2+2) + 4*4 = 1618
        let arch = Architecture::new(2, 4, 8, 4, vec![32, 32]).unwrap();
        assert_eq!(
            arch.param_count(),
            (14 * 32 + 32) + (32 * 32 + 32) + (32 * 2 + 2) + 4 * 4
        );
        assert_eq!(arch.param_count(), 1618);
    }

    #[test]
    fn invalid_architectures_are_rejected() {
        assert!(Architecture::new(2, 3, 5, 3, vec![8]).is_err()); // odd dt
        assert!(Architecture::new(0, 3, 4, 3, vec![8]).is_err());
        assert!(Architecture::new(2, 3, 4, 3, vec![0]).is_err());
    }

    #[test]
    fn time_embedding_at_zero_and_one() {
        let emb = time_embedding(0, 6).unwrap();
        assert_eq!(&emb[..3], &[0.0, 0.0, 0.0]);
        assert_eq!(&emb[3..], &[1.0, 1.0, 1.0]);

        let emb = time_embedding(1, 2).unwrap();
        assert!((emb[0] - 1f64.sin()).abs() < 1e-15);
        assert!((emb[1] - 1f64.cos()).abs() < 1e-15);

        assert!(time_embedding(3, 5).is_err());
    }

    #[test]
    fn time_embedding_components_bounded() {
        for t in [0usize, 1, 7, 199, 100_000] {
            for &v in &time_embedding(t, 16).unwrap() {
                assert!((-1.0..=1.0).contains(&v));
            }
        }
    }

    #[test]
    fn zero_output_layer_predicts_zero() {
        let arch = small_arch();
        let params = DenoiserParams::init(&arch, 11).unwrap();
        let out = params.forward(&[0.3, -1.2], 5, 2).unwrap();
        assert_eq!(out, vec![0.0, 0.0]);
    }

    #[test]
    fn init_is_deterministic() {
        let arch = small_arch();
        let a = DenoiserParams::init(&arch, 123).unwrap();
        let b = DenoiserParams::init(&arch, 123).unwrap();
        assert_eq!(a, b);
        let c = DenoiserParams::init(&arch, 124).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn single_neuron_silu_chain() {
        // d=1, dt=2, dc=1, hidden=[1]; all weights 1, biases 0, condition
        // embedding 0.5. Input at t=0, x=0.25 concatenates to
        // [0.25, 0, 1, 0.5]; hidden pre-activation is 1.75 and the output is
        // silu(1.75) = 1.75 * sigmoid(1.75).
        let arch = Architecture::new(1, 1, 2, 1, vec![1]).unwrap();
        let mut values = vec![0.0; arch.param_count()];
        // layer 0: 4 weights + 1 bias; layer 1: 1 weight + 1 bias; cond: 1
        values[0..4].fill(1.0);
        values[5] = 1.0; // output weight
        values[7] = 0.5; // condition embedding
        let params = DenoiserParams::from_values(arch, values).unwrap();
        let out = params.forward(&[0.25], 0, 0).unwrap();
        let expected = 1.75 * (1.0 / (1.0 + (-1.75f64).exp()));
        assert!((out[0] - expected).abs() < 1e-15, "got {}", out[0]);
        assert!((expected - 1.490_917_403_444_543).abs() < 1e-12);
    }

    #[test]
    fn forward_rejects_bad_inputs() {
        let arch = small_arch();
        let params = DenoiserParams::init(&arch, 1).unwrap();
        assert!(params.forward(&[0.0, 0.0], 1, 99).is_err());
        assert!(params.forward(&[0.0], 1, 0).is_err());
        assert!(params.forward(&[f64::NAN, 0.0], 1, 0).is_err());
    }

    #[test]
    fn forward_is_deterministic_and_matches_tape() {
        let arch = small_arch();
        let mut params = DenoiserParams::init(&arch, 9).unwrap();
        // Make the output layer non-zero so the check is non-trivial.
        let n = params.values().len();
        let mut rng = RngState::new(4);
        for v in params.values_mut().iter_mut().take(n) {
            *v += 0.1 * (2.0 * rng.uniform01() - 1.0);
        }
        let x = [0.7, -0.4];
        let a = params.forward(&x, 17, 1).unwrap();
        let b = params.forward(&x, 17, 1).unwrap();
        let (c, _tape) = params.forward_tape(&x, 17, 1).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, c);
    }

    #[test]
    fn backward_zero_upstream_gives_zero_grads() {
        let arch = small_arch();
        let params = DenoiserParams::init(&arch, 3).unwrap();
        let (_out, grads, grad_x) = params
            .forward_backward(&[0.2, 0.1], 3, 0, &[0.0, 0.0])
            .unwrap();
        assert!(grads.values().iter().all(|&g| g == 0.0));
        assert!(grad_x.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn backward_is_linear_in_upstream() {
        let arch = small_arch();
        let mut params = DenoiserParams::init(&arch, 31).unwrap();
        let mut rng = RngState::new(8);
        for v in params.values_mut() {
            *v += 0.2 * (2.0 * rng.uniform01() - 1.0);
        }
        let x = [0.5, -0.25];
        let u1 = [0.3, -1.1];
        let u2 = [-0.7, 0.4];
        let sum: Vec<f64> = u1.iter().zip(&u2).map(|(a, b)| a + b).collect();
        let (_y, g1, _) = params.forward_backward(&x, 4, 2, &u1).unwrap();
        let (_y, g2, _) = params.forward_backward(&x, 4, 2, &u2).unwrap();
        let (_y, gsum, _) = params.forward_backward(&x, 4, 2, &sum).unwrap();
        for ((a, b), s) in g1.values().iter().zip(g2.values()).zip(gsum.values()) {
            assert!((a + b - s).abs() <= 1e-12 * (1.0 + s.abs()));
        }
    }

    #[test]
    fn gradients_match_central_finite_differences() {
        // <= 2000-parameter net, h = 1e-5, tolerance 1e-6 relative to
        // max(1, |g|) per the finite-difference oracle.
        let arch = Architecture::new(2, 3, 4, 3, vec![12, 12]).unwrap();
        assert!(arch.param_count() <= 2000);
        let mut params = DenoiserParams::init(&arch, 77).unwrap();
        let mut rng = RngState::new(5);
        for v in params.values_mut() {
            *v += 0.3 * (2.0 * rng.uniform01() - 1.0);
        }
        let x = [0.4, -0.9];
        let upstream = [1.3, -0.8];
        let t = 9;
        let c = 1;
        let (_y, grads, grad_x) = params.forward_backward(&x, t, c, &upstream).unwrap();

        let h = 1e-5;
        let objective = |p: &DenoiserParams, xv: &[f64]| -> f64 {
            let y = p.forward(xv, t, c).unwrap();
            y.iter().zip(&upstream).map(|(a, b)| a * b).sum()
        };
        let mut worst: f64 = 0.0;
        let base = params.values().to_vec();
        for i in 0..base.len() {
            let mut vals = base.clone();
            vals[i] = base[i] + h;
            let fp = objective(
                &DenoiserParams::from_values(arch.clone(), vals.clone()).unwrap(),
                &x,
            );
            vals[i] = base[i] - h;
            let fm = objective(&DenoiserParams::from_values(arch.clone(), vals).unwrap(), &x);
            let fd = (fp - fm) / (2.0 * h);
            let err = (fd - grads.values()[i]).abs() / grads.values()[i].abs().max(1.0);
            worst = worst.max(err);
        }
        // Gradient with respect to the input, same oracle.
        for j in 0..x.len() {
            let mut xv = x.to_vec();
            xv[j] = x[j] + h;
            let fp = objective(&params, &xv);
            xv[j] = x[j] - h;
            let fm = objective(&params, &xv);
            let fd = (fp - fm) / (2.0 * h);
            let err = (fd - grad_x[j]).abs() / grad_x[j].abs().max(1.0);
            worst = worst.max(err);
        }
        assert!(worst < 1e-6, "max relative error {worst}");
    }
}
