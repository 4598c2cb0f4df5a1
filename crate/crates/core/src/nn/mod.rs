//! Feed-forward networks with hand-written reverse-mode gradients.
//!
//! Parameters live in one flat vector, layer by layer: the row-major weight
//! matrix (`out × in`) followed by the bias. The same layout is used by the
//! optimizer and by the checkpoint format.

pub mod adam;
pub mod checkpoint;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use adam::{AdamConfig, ParamTape};

use crate::error::{check_dim, DcaError, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Silu,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Silu => x / (1.0 + (-x).exp()),
        }
    }

    fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Silu => {
                let s = 1.0 / (1.0 + (-x).exp());
                s * (1.0 + x * (1.0 - s))
            }
        }
    }
}

/// Sinusoidal embedding of an integer timestep: `[sin(t·f_i)…, cos(t·f_i)…]`
/// with `f_i = 10000^(−i/(width/2))`.
pub fn time_embedding(t: usize, width: usize) -> Vec<f64> {
    let half = width / 2;
    let mut out = vec![0.0; width];
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        out[i] = arg.sin();
        out[half + i] = arg.cos();
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    widths: Vec<usize>,
    activation: Activation,
    time_embed: Option<usize>,
    params: Vec<f64>,
}

/// Intermediate values of one forward pass, consumed by the backward pass.
#[derive(Debug, Clone)]
pub struct Trace {
    /// `acts[0]` is the input feature vector (including any time embedding);
    /// `acts[l + 1]` is the output of layer `l`.
    acts: Vec<Vec<f64>>,
    /// Pre-activations of the hidden layers.
    pre: Vec<Vec<f64>>,
}

impl Trace {
    pub fn output(&self) -> &[f64] {
        self.acts.last().expect("trace has at least one layer")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub params: Vec<f64>,
    pub input: Vec<f64>,
}

pub(crate) fn param_count(widths: &[usize]) -> Option<usize> {
    widths.windows(2).try_fold(0usize, |acc, w| {
        w[0].checked_mul(w[1])?.checked_add(w[1])?.checked_add(acc)
    })
}

impl Mlp {
    /// He-style uniform initialization, zero biases.
    pub fn new(
        input_dim: usize,
        hidden: &[usize],
        output_dim: usize,
        activation: Activation,
        time_embed: Option<usize>,
        seed: u64,
    ) -> Result<Self> {
        let mut widths = vec![input_dim + time_embed.unwrap_or(0)];
        widths.extend_from_slice(hidden);
        widths.push(output_dim);
        let n = param_count(&widths)
            .ok_or_else(|| DcaError::InvalidArgument("network too large".into()))?;
        let mut net = Self::from_parts(widths, activation, time_embed, vec![0.0; n])?;
        let mut r = rng::stream(seed, "mlp-init", 0);
        let mut off = 0;
        for l in 0..net.widths.len() - 1 {
            let (fan_in, fan_out) = (net.widths[l], net.widths[l + 1]);
            let bound = (6.0 / fan_in as f64).sqrt();
            for w in &mut net.params[off..off + fan_in * fan_out] {
                *w = r.random_range(-bound..bound);
            }
            off += fan_in * fan_out + fan_out;
        }
        Ok(net)
    }

    pub fn from_parts(
        widths: Vec<usize>,
        activation: Activation,
        time_embed: Option<usize>,
        params: Vec<f64>,
    ) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(DcaError::InvalidArgument(format!("bad layer widths {widths:?}")));
        }
        if let Some(e) = time_embed {
            if e == 0 || e % 2 != 0 || e >= widths[0] {
                return Err(DcaError::InvalidArgument(format!(
                    "time embedding width {e} must be even, positive and below the input width {}",
                    widths[0]
                )));
            }
        }
        let n = param_count(&widths)
            .ok_or_else(|| DcaError::InvalidArgument("network too large".into()))?;
        check_dim(n, params.len())?;
        if params.iter().any(|p| !p.is_finite()) {
            return Err(DcaError::InvalidArgument("non-finite parameter".into()));
        }
        Ok(Self { widths, activation, time_embed, params })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn time_embed(&self) -> Option<usize> {
        self.time_embed
    }

    /// Width of the caller-supplied input (embedding excluded).
    pub fn input_dim(&self) -> usize {
        self.widths[0] - self.time_embed.unwrap_or(0)
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// Same shape and activation.
    pub fn same_architecture(&self, other: &Mlp) -> bool {
        self.widths == other.widths
            && self.activation == other.activation
            && self.time_embed == other.time_embed
    }

    /// FNV-1a over the parameter bit patterns.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for p in &self.params {
            for b in p.to_bits().to_le_bytes() {
                h = (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        h
    }

    fn features(&self, input: &[f64], t: Option<usize>) -> Result<Vec<f64>> {
        check_dim(self.input_dim(), input.len())?;
        match (self.time_embed, t) {
            (None, None) => Ok(input.to_vec()),
            (Some(width), Some(t)) => {
                let mut f = input.to_vec();
                f.extend(time_embedding(t, width));
                Ok(f)
            }
            _ => Err(DcaError::MissingTimestep),
        }
    }

    pub fn trace(&self, input: &[f64], t: Option<usize>) -> Result<Trace> {
        let layers = self.widths.len() - 1;
        let mut acts = Vec::with_capacity(layers + 1);
        let mut pre = Vec::with_capacity(layers.saturating_sub(1));
        acts.push(self.features(input, t)?);
        let mut off = 0;
        for l in 0..layers {
            let (n_in, n_out) = (self.widths[l], self.widths[l + 1]);
            let w = &self.params[off..off + n_in * n_out];
            let b = &self.params[off + n_in * n_out..off + n_in * n_out + n_out];
            let x = &acts[l];
            let z: Vec<f64> = (0..n_out)
                .map(|o| {
                    let row = &w[o * n_in..(o + 1) * n_in];
                    b[o] + row.iter().zip(x).map(|(a, c)| a * c).sum::<f64>()
                })
                .collect();
            off += n_in * n_out + n_out;
            if l + 1 < layers {
                let a = z.iter().map(|v| self.activation.apply(*v)).collect();
                pre.push(z);
                acts.push(a);
            } else {
                acts.push(z);
            }
        }
        Ok(Trace { acts, pre })
    }

    pub fn forward(&self, input: &[f64], t: Option<usize>) -> Result<Vec<f64>> {
        Ok(self.trace(input, t)?.acts.pop().unwrap())
    }

    /// Reverse pass for `⟨output, cotangent⟩`. Parameter gradients are added
    /// into `param_grad` when given; the input gradient is returned.
    pub fn backward_from(
        &self,
        trace: &Trace,
        cotangent: &[f64],
        mut param_grad: Option<&mut [f64]>,
    ) -> Result<Vec<f64>> {
        check_dim(self.output_dim(), cotangent.len())?;
        if let Some(g) = param_grad.as_deref() {
            check_dim(self.params.len(), g.len())?;
        }
        if trace.acts.len() != self.widths.len() || trace.acts[0].len() != self.widths[0] {
            return Err(DcaError::DimensionMismatch {
                expected: self.widths.len(),
                got: trace.acts.len(),
            });
        }
        let layers = self.widths.len() - 1;
        let mut offsets = Vec::with_capacity(layers);
        let mut off = 0;
        for l in 0..layers {
            offsets.push(off);
            off += self.widths[l] * self.widths[l + 1] + self.widths[l + 1];
        }
        let mut delta = cotangent.to_vec();
        for l in (0..layers).rev() {
            let (n_in, n_out) = (self.widths[l], self.widths[l + 1]);
            let off = offsets[l];
            let x = &trace.acts[l];
            if let Some(g) = param_grad.as_deref_mut() {
                for o in 0..n_out {
                    let d = delta[o];
                    if d != 0.0 {
                        let row = &mut g[off + o * n_in..off + (o + 1) * n_in];
                        for (gi, xi) in row.iter_mut().zip(x) {
                            *gi += d * xi;
                        }
                    }
                    g[off + n_in * n_out + o] += d;
                }
            }
            let w = &self.params[off..off + n_in * n_out];
            let mut prev = vec![0.0; n_in];
            for o in 0..n_out {
                let d = delta[o];
                if d != 0.0 {
                    for (p, wi) in prev.iter_mut().zip(&w[o * n_in..(o + 1) * n_in]) {
                        *p += d * wi;
                    }
                }
            }
            if l > 0 {
                for (p, z) in prev.iter_mut().zip(&trace.pre[l - 1]) {
                    *p *= self.activation.derivative(*z);
                }
            }
            delta = prev;
        }
        delta.truncate(self.input_dim());
        Ok(delta)
    }

    /// Exact gradients of `⟨net(input, t), cotangent⟩`.
    pub fn backward(&self, input: &[f64], t: Option<usize>, cotangent: &[f64]) -> Result<Gradients> {
        let trace = self.trace(input, t)?;
        let mut params = vec![0.0; self.params.len()];
        let input = self.backward_from(&trace, cotangent, Some(&mut params))?;
        Ok(Gradients { params, input })
    }
}
