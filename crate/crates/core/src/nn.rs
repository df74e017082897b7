//! Small fully-connected networks with hand-written reverse mode.
//!
//! Parameters live in one flat vector. For each layer, in order, the weights
//! are stored row-major as `out x in`, followed by the `out` biases. Hidden
//! layers use `tanh`; each output unit has its own [`OutputHead`].

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Squashing applied to one raw output unit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputHead {
    Identity,
    /// Logistic sigmoid, range (0, 1).
    UnitInterval,
    /// Softplus, range (0, inf).
    Positive,
}

// sigmoid(±36) stays strictly inside (0, 1) in f64.
const UNIT_CLAMP: f64 = 36.0;

impl OutputHead {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            OutputHead::Identity => z,
            OutputHead::UnitInterval => sigmoid(z.clamp(-UNIT_CLAMP, UNIT_CLAMP)),
            OutputHead::Positive => softplus(z),
        }
    }

    #[inline]
    fn derivative(self, z: f64, y: f64) -> f64 {
        match self {
            OutputHead::Identity => 1.0,
            OutputHead::UnitInterval => {
                if z.abs() > UNIT_CLAMP {
                    0.0
                } else {
                    y * (1.0 - y)
                }
            }
            OutputHead::Positive => sigmoid(z),
        }
    }
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn softplus(z: f64) -> f64 {
    if z > 30.0 {
        z + (-z).exp()
    } else {
        z.exp().ln_1p()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub layer_sizes: Vec<usize>,
    pub heads: Vec<OutputHead>,
}

impl MlpSpec {
    pub fn new(layer_sizes: Vec<usize>, heads: Vec<OutputHead>) -> Result<Self> {
        if layer_sizes.len() < 3 {
            return Err(Error::config(
                "layer_sizes",
                "need input, at least one hidden layer, and output",
            ));
        }
        if layer_sizes.contains(&0) {
            return Err(Error::config("layer_sizes", "every layer needs >= 1 unit"));
        }
        let out = *layer_sizes.last().unwrap();
        if heads.len() != out {
            return Err(Error::ShapeMismatch {
                what: "output heads",
                expected: out,
                got: heads.len(),
            });
        }
        Ok(Self { layer_sizes, heads })
    }

    /// Input, hidden layers, and `outputs` units that all share `head`.
    pub fn with_hidden(input: usize, hidden: &[usize], outputs: usize, head: OutputHead) -> Result<Self> {
        Self::with_heads(input, hidden, vec![head; outputs])
    }

    pub fn with_heads(input: usize, hidden: &[usize], heads: Vec<OutputHead>) -> Result<Self> {
        let mut sizes = Vec::with_capacity(hidden.len() + 2);
        sizes.push(input);
        sizes.extend_from_slice(hidden);
        sizes.push(heads.len());
        Self::new(sizes, heads)
    }

    pub fn input_size(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_size(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn param_count(&self) -> usize {
        self.layer_sizes
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }
}

/// Intermediate values of one forward pass, consumed by [`Mlp::backward`].
#[derive(Debug, Clone)]
pub struct Trace {
    /// `acts[0]` is the input, then each hidden layer after `tanh`.
    acts: Vec<Vec<f64>>,
    /// Raw output before the heads.
    raw: Vec<f64>,
    pub output: Vec<f64>,
}

/// Parameter and input gradients from one backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub params: Vec<f64>,
    pub input: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub spec: MlpSpec,
    pub params: Vec<f64>,
}

impl Mlp {
    pub fn zeros(spec: MlpSpec) -> Self {
        let params = vec![0.0; spec.param_count()];
        Self { spec, params }
    }

    /// Fan-in scaled uniform weights, zero biases. The last layer is drawn
    /// from `±output_scale` instead.
    pub fn init<R: Rng + ?Sized>(spec: MlpSpec, output_scale: f64, rng: &mut R) -> Self {
        let mut net = Self::zeros(spec);
        let layers = net.spec.layer_sizes.len() - 1;
        let mut off = 0;
        for l in 0..layers {
            let (fan_in, fan_out) = (net.spec.layer_sizes[l], net.spec.layer_sizes[l + 1]);
            let bound = if l + 1 == layers {
                output_scale
            } else {
                1.0 / (fan_in as f64).sqrt()
            };
            for w in &mut net.params[off..off + fan_in * fan_out] {
                *w = rng.random_range(-bound..=bound);
            }
            off += fan_in * fan_out + fan_out;
        }
        net
    }

    pub fn from_params(spec: MlpSpec, params: Vec<f64>) -> Result<Self> {
        if params.len() != spec.param_count() {
            return Err(Error::ShapeMismatch {
                what: "parameter vector",
                expected: spec.param_count(),
                got: params.len(),
            });
        }
        Ok(Self { spec, params })
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_trace(input)?.output)
    }

    pub fn forward_trace(&self, input: &[f64]) -> Result<Trace> {
        let sizes = &self.spec.layer_sizes;
        if input.len() != sizes[0] {
            return Err(Error::ShapeMismatch {
                what: "network input",
                expected: sizes[0],
                got: input.len(),
            });
        }
        let layers = sizes.len() - 1;
        let mut acts = Vec::with_capacity(layers);
        acts.push(input.to_vec());
        let mut off = 0;
        let mut raw = Vec::new();
        for l in 0..layers {
            let (n_in, n_out) = (sizes[l], sizes[l + 1]);
            let w = &self.params[off..off + n_in * n_out];
            let b = &self.params[off + n_in * n_out..off + n_in * n_out + n_out];
            let x = acts.last().unwrap();
            let mut z: Vec<f64> = b.to_vec();
            for (j, zj) in z.iter_mut().enumerate() {
                let row = &w[j * n_in..(j + 1) * n_in];
                *zj += row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
            }
            off += n_in * n_out + n_out;
            if l + 1 == layers {
                raw = z;
            } else {
                z.iter_mut().for_each(|v| *v = v.tanh());
                acts.push(z);
            }
        }
        let output = raw
            .iter()
            .zip(&self.spec.heads)
            .map(|(&z, h)| h.apply(z))
            .collect();
        Ok(Trace { acts, raw, output })
    }

    /// Reverse pass for `upstream = dL/d(output)`. Parameter gradients are
    /// accumulated into `param_grad` when given; the input gradient is
    /// returned.
    pub fn backward(
        &self,
        trace: &Trace,
        upstream: &[f64],
        mut param_grad: Option<&mut [f64]>,
    ) -> Result<Vec<f64>> {
        let sizes = &self.spec.layer_sizes;
        let n_outputs = self.spec.output_size();
        if upstream.len() != n_outputs {
            return Err(Error::ShapeMismatch {
                what: "upstream gradient",
                expected: n_outputs,
                got: upstream.len(),
            });
        }
        if let Some(g) = param_grad.as_deref() {
            if g.len() != self.params.len() {
                return Err(Error::ShapeMismatch {
                    what: "parameter gradient buffer",
                    expected: self.params.len(),
                    got: g.len(),
                });
            }
        }
        let layers = sizes.len() - 1;
        // dL/dz for the current layer's pre-activation.
        let mut delta: Vec<f64> = upstream
            .iter()
            .zip(&self.spec.heads)
            .zip(trace.raw.iter().zip(&trace.output))
            .map(|((&u, h), (&z, &y))| u * h.derivative(z, y))
            .collect();
        let mut end = self.params.len();
        for l in (0..layers).rev() {
            let (n_in, n_out) = (sizes[l], sizes[l + 1]);
            let start = end - (n_in * n_out + n_out);
            let w = &self.params[start..start + n_in * n_out];
            let x = &trace.acts[l];
            if let Some(g) = param_grad.as_deref_mut() {
                let (gw, gb) = g[start..end].split_at_mut(n_in * n_out);
                for (j, &d) in delta.iter().enumerate() {
                    if d == 0.0 {
                        continue;
                    }
                    gb[j] += d;
                    for (gwi, &xi) in gw[j * n_in..(j + 1) * n_in].iter_mut().zip(x) {
                        *gwi += d * xi;
                    }
                }
            }
            let mut dx = vec![0.0; n_in];
            for (j, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                for (dxi, &wji) in dx.iter_mut().zip(&w[j * n_in..(j + 1) * n_in]) {
                    *dxi += d * wji;
                }
            }
            if l > 0 {
                // through tanh of the previous hidden layer
                for (dxi, &h) in dx.iter_mut().zip(x) {
                    *dxi *= 1.0 - h * h;
                }
            }
            delta = dx;
            end = start;
        }
        Ok(delta)
    }

    /// Forward then backward for a single input.
    pub fn gradients(&self, input: &[f64], upstream: &[f64]) -> Result<Gradients> {
        let trace = self.forward_trace(input)?;
        let mut params = vec![0.0; self.params.len()];
        let input = self.backward(&trace, upstream, Some(&mut params))?;
        Ok(Gradients { params, input })
    }
}

/// Adaptive-moment first-order optimizer. Minimizes: callers doing ascent
/// pass the negated gradient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(n_params: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::ShapeMismatch {
                what: "optimizer state",
                expected: self.m.len(),
                got: params.len().max(grads.len()),
            });
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let step = self.lr * bc2.sqrt() / bc1;
        for ((p, &g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *p -= step * *m / (v.sqrt() + self.eps * bc2.sqrt());
        }
        Ok(())
    }
}

/// Rescales `grads` in place so its L2 norm is at most `max_norm`. Returns
/// the norm before clipping.
pub fn clip_grad_norm(grads: &mut [f64], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        grads.iter_mut().for_each(|g| *g *= s);
    }
    norm
}
