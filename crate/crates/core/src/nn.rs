//! Dense feed-forward networks with hand-written backpropagation.
//!
//! Parameters live in a flat [`ParamVector`] whose layout names each weight
//! matrix and bias. A network ([`Mlp`]) only carries its shape; the same
//! network can be evaluated against any compatible parameter vector, which
//! keeps hypothetical (look-ahead) parameters cheap.
//!
//! Only three derivatives are needed by the learners and they are all
//! provided here: the policy score `∇ log π(a|o)`, and vector-Jacobian
//! products of the bounded incentive head.

use std::fs;
use std::io;
use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// One named block of a [`ParamVector`], stored row-major.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub offset: usize,
    pub shape: (usize, usize),
}

impl Segment {
    pub fn len(&self) -> usize {
        self.shape.0 * self.shape.1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

pub type Layout = Arc<Vec<Segment>>;

fn layout_len(layout: &[Segment]) -> usize {
    layout.last().map_or(0, |s| s.offset + s.len())
}

/// Flat parameter (or gradient) vector with a named segment layout.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamVector {
    values: Vec<f64>,
    layout: Layout,
}

impl ParamVector {
    pub fn zeros(layout: Layout) -> Self {
        let n = layout_len(&layout);
        ParamVector {
            values: vec![0.0; n],
            layout,
        }
    }

    pub fn from_values(values: Vec<f64>, layout: Layout) -> Self {
        assert_eq!(values.len(), layout_len(&layout), "value count does not match layout");
        ParamVector { values, layout }
    }

    pub fn zeros_like(&self) -> Self {
        ParamVector {
            values: vec![0.0; self.values.len()],
            layout: Arc::clone(&self.layout),
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn segment(&self, name: &str) -> Option<&[f64]> {
        self.layout
            .iter()
            .find(|s| s.name == name)
            .map(|s| &self.values[s.range()])
    }

    pub fn dot(&self, other: &ParamVector) -> f64 {
        assert_eq!(self.len(), other.len(), "dot of mismatched vectors");
        self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    /// `self += scale * other`
    pub fn add_scaled(&mut self, scale: f64, other: &ParamVector) {
        assert_eq!(self.len(), other.len(), "add of mismatched vectors");
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += scale * b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.values.iter_mut().for_each(|v| *v *= factor);
    }

    pub fn scaled(&self, factor: f64) -> ParamVector {
        let mut out = self.clone();
        out.scale(factor);
        out
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Concatenate two vectors, prefixing segment names.
    pub fn concat(first: &ParamVector, first_prefix: &str, second: &ParamVector, second_prefix: &str) -> ParamVector {
        let mut layout = Vec::with_capacity(first.layout.len() + second.layout.len());
        for s in first.layout.iter() {
            layout.push(Segment {
                name: format!("{first_prefix}.{}", s.name),
                offset: s.offset,
                shape: s.shape,
            });
        }
        let shift = first.len();
        for s in second.layout.iter() {
            layout.push(Segment {
                name: format!("{second_prefix}.{}", s.name),
                offset: s.offset + shift,
                shape: s.shape,
            });
        }
        let mut values = first.values.clone();
        values.extend_from_slice(&second.values);
        ParamVector::from_values(values, Arc::new(layout))
    }

    /// Write the values as little-endian `f64` to `bin_path` and the layout
    /// as JSON to `json_path`.
    pub fn save(&self, bin_path: &Path, json_path: &Path) -> io::Result<()> {
        let mut bytes = Vec::with_capacity(self.values.len() * 8);
        for v in &self.values {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(bin_path, bytes)?;
        let sidecar = LayoutSidecar {
            dtype: "f64le".to_string(),
            len: self.values.len(),
            segments: self.layout.as_ref().clone(),
        };
        let json = serde_json::to_string_pretty(&sidecar).map_err(io::Error::other)?;
        fs::write(json_path, json)
    }

    pub fn load(bin_path: &Path, json_path: &Path) -> io::Result<ParamVector> {
        let sidecar: LayoutSidecar = serde_json::from_str(&fs::read_to_string(json_path)?).map_err(io::Error::other)?;
        let bytes = fs::read(bin_path)?;
        if sidecar.dtype != "f64le" || bytes.len() != sidecar.len * 8 {
            return Err(io::Error::new(
                io::ErrorKind::InvalidData,
                "parameter file does not match its layout sidecar",
            ));
        }
        if layout_len(&sidecar.segments) != sidecar.len {
            return Err(io::Error::new(
                io::ErrorKind::InvalidData,
                "layout segments do not cover the parameter vector",
            ));
        }
        let values = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        Ok(ParamVector::from_values(values, Arc::new(sidecar.segments)))
    }
}

#[derive(Serialize, Deserialize)]
struct LayoutSidecar {
    dtype: String,
    len: usize,
    segments: Vec<Segment>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    Softmax,
    /// Outputs `r_max * sigmoid(z)`, strictly inside `(0, r_max)`.
    BoundedIncentive {
        r_max: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub output_dim: usize,
    #[serde(default)]
    pub activation: Activation,
    pub head: Head,
    /// Weight of the uniform distribution mixed into a softmax head, so
    /// every action keeps probability at least `exploration / n_actions`.
    #[serde(default)]
    pub exploration: f64,
}

pub const DEFAULT_HIDDEN: [usize; 2] = [64, 32];
pub const DEFAULT_R_MAX: f64 = 2.0;

impl NetConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden.contains(&0) {
            return Err("all layer widths must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.exploration) {
            return Err(format!("exploration must lie in [0, 1), got {}", self.exploration));
        }
        if let Head::BoundedIncentive { r_max } = self.head {
            if !(r_max > 0.0 && r_max.is_finite()) {
                return Err(format!("r_max must be positive, got {r_max}"));
            }
        }
        Ok(())
    }

    fn dims(&self) -> Vec<usize> {
        let mut dims = Vec::with_capacity(self.hidden.len() + 2);
        dims.push(self.input_dim);
        dims.extend_from_slice(&self.hidden);
        dims.push(self.output_dim);
        dims
    }
}

/// Per-layer inputs recorded during a forward pass. Entry `l` is the input
/// of layer `l`; for `l > 0` it is the ReLU output of layer `l - 1`.
#[derive(Clone, Debug)]
pub struct Trace {
    inputs: Vec<Vec<f64>>,
    output: Vec<f64>,
}

impl Trace {
    /// Raw (pre-head) outputs.
    pub fn output(&self) -> &[f64] {
        &self.output
    }
}

/// A dense network shape: `input -> hidden... -> output`, ReLU between layers.
#[derive(Clone, Debug)]
pub struct Mlp {
    config: NetConfig,
    dims: Vec<usize>,
    layout: Layout,
}

impl Mlp {
    pub fn new(config: NetConfig) -> Self {
        config.validate().expect("invalid network config");
        let dims = config.dims();
        let mut layout = Vec::new();
        let mut offset = 0;
        for l in 0..dims.len() - 1 {
            let (fan_in, fan_out) = (dims[l], dims[l + 1]);
            layout.push(Segment {
                name: format!("layer{l}.weight"),
                offset,
                shape: (fan_out, fan_in),
            });
            offset += fan_in * fan_out;
            layout.push(Segment {
                name: format!("layer{l}.bias"),
                offset,
                shape: (fan_out, 1),
            });
            offset += fan_out;
        }
        Mlp {
            config,
            dims,
            layout: Arc::new(layout),
        }
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn n_params(&self) -> usize {
        layout_len(&self.layout)
    }

    pub fn input_dim(&self) -> usize {
        self.config.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.config.output_dim
    }

    fn r_max(&self) -> f64 {
        match self.config.head {
            Head::BoundedIncentive { r_max } => r_max,
            Head::Softmax => panic!("softmax network has no incentive bound"),
        }
    }

    /// Weights ~ N(0, 1/fan_in), biases zero.
    pub fn init_params(&self, seed: u64) -> ParamVector {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamVector::zeros(Arc::clone(&self.layout));
        for l in 0..self.dims.len() - 1 {
            let fan_in = self.dims[l];
            let normal = Normal::new(0.0, 1.0 / (fan_in as f64).sqrt()).expect("valid std");
            let seg = &self.layout[2 * l];
            for v in &mut params.values[seg.range()] {
                *v = normal.sample(&mut rng);
            }
        }
        params
    }

    fn check_params(&self, params: &ParamVector) {
        assert_eq!(
            params.len(),
            self.n_params(),
            "parameter vector does not fit this network"
        );
    }

    pub fn forward_trace(&self, params: &ParamVector, input: &[f64]) -> Trace {
        self.check_params(params);
        assert_eq!(input.len(), self.config.input_dim, "input dimension mismatch");
        let n_layers = self.dims.len() - 1;
        let mut inputs = Vec::with_capacity(n_layers);
        let mut x = input.to_vec();
        for l in 0..n_layers {
            let (fan_in, fan_out) = (self.dims[l], self.dims[l + 1]);
            let w = &params.values[self.layout[2 * l].range()];
            let b = &params.values[self.layout[2 * l + 1].range()];
            let mut z = b.to_vec();
            for (o, zo) in z.iter_mut().enumerate() {
                let row = &w[o * fan_in..(o + 1) * fan_in];
                *zo += row.iter().zip(&x).map(|(wi, xi)| wi * xi).sum::<f64>();
            }
            debug_assert_eq!(z.len(), fan_out);
            if l + 1 < n_layers {
                z.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            inputs.push(std::mem::replace(&mut x, z));
        }
        Trace { inputs, output: x }
    }

    /// Accumulate `scale * J^T d_out` into `grad`, where `J` is the Jacobian
    /// of the raw outputs with respect to the parameters.
    pub fn backward_into(
        &self,
        params: &ParamVector,
        trace: &Trace,
        d_out: &[f64],
        scale: f64,
        grad: &mut ParamVector,
    ) {
        assert_eq!(d_out.len(), self.config.output_dim, "cotangent dimension mismatch");
        assert_eq!(grad.len(), self.n_params(), "gradient does not fit this network");
        let n_layers = self.dims.len() - 1;
        let mut delta: Vec<f64> = d_out.iter().map(|d| d * scale).collect();
        for l in (0..n_layers).rev() {
            let fan_in = self.dims[l];
            let x = &trace.inputs[l];
            let w_seg = self.layout[2 * l].range();
            let b_seg = self.layout[2 * l + 1].range();
            {
                let gw = &mut grad.values[w_seg.clone()];
                for (o, d) in delta.iter().enumerate() {
                    if *d == 0.0 {
                        continue;
                    }
                    let row = &mut gw[o * fan_in..(o + 1) * fan_in];
                    for (g, xi) in row.iter_mut().zip(x) {
                        *g += d * xi;
                    }
                }
            }
            for (g, d) in grad.values[b_seg].iter_mut().zip(&delta) {
                *g += d;
            }
            if l == 0 {
                break;
            }
            let w = &params.values[w_seg];
            let mut prev = vec![0.0; fan_in];
            for (o, d) in delta.iter().enumerate() {
                if *d == 0.0 {
                    continue;
                }
                let row = &w[o * fan_in..(o + 1) * fan_in];
                for (p, wi) in prev.iter_mut().zip(row) {
                    *p += d * wi;
                }
            }
            // ReLU derivative: the layer input is positive iff its pre-activation was.
            for (p, xi) in prev.iter_mut().zip(x) {
                if *xi <= 0.0 {
                    *p = 0.0;
                }
            }
            delta = prev;
        }
    }

    /// Action distribution of a softmax policy head.
    pub fn policy_forward(&self, params: &ParamVector, obs: &[f64]) -> Vec<f64> {
        self.action_probs(&self.forward_trace(params, obs))
    }

    /// Action distribution for a recorded forward pass.
    pub fn action_probs(&self, trace: &Trace) -> Vec<f64> {
        let probs = softmax(trace.output());
        let eps = self.config.exploration;
        if eps == 0.0 {
            return probs;
        }
        let floor = eps / probs.len() as f64;
        probs.into_iter().map(|p| (1.0 - eps) * p + floor).collect()
    }

    /// `∇_params log π(action | obs)`.
    pub fn score(&self, params: &ParamVector, obs: &[f64], action: usize) -> ParamVector {
        let trace = self.forward_trace(params, obs);
        self.score_from_trace(params, &trace, action)
    }

    pub fn score_from_trace(&self, params: &ParamVector, trace: &Trace, action: usize) -> ParamVector {
        assert!(action < self.config.output_dim, "action {action} out of range");
        let probs = softmax(trace.output());
        let mut d: Vec<f64> = probs.iter().map(|p| -p).collect();
        d[action] += 1.0;
        let eps = self.config.exploration;
        // d log q_a / d logits = (1 - ε) p_a / q_a * (e_a - p) for the mixture q
        let scale = if eps == 0.0 {
            1.0
        } else {
            let p = probs[action];
            (1.0 - eps) * p / ((1.0 - eps) * p + eps / probs.len() as f64)
        };
        let mut grad = params.zeros_like();
        self.backward_into(params, trace, &d, scale, &mut grad);
        grad
    }

    /// Incentives `r_max * sigmoid(z)`, one per recipient.
    pub fn incentive_forward(&self, params: &ParamVector, input: &[f64]) -> Vec<f64> {
        let r_max = self.r_max();
        self.forward_trace(params, input)
            .output()
            .iter()
            .map(|z| r_max * sigmoid(*z))
            .collect()
    }

    /// `∇_params ⟨incentive_forward(params, input), cotangent⟩`.
    pub fn incentive_vjp(&self, params: &ParamVector, input: &[f64], cotangent: &[f64]) -> ParamVector {
        let mut grad = params.zeros_like();
        self.incentive_vjp_into(params, input, cotangent, 1.0, &mut grad);
        grad
    }

    /// Accumulating form of [`Mlp::incentive_vjp`].
    pub fn incentive_vjp_into(
        &self,
        params: &ParamVector,
        input: &[f64],
        cotangent: &[f64],
        scale: f64,
        grad: &mut ParamVector,
    ) {
        assert_eq!(
            cotangent.len(),
            self.config.output_dim,
            "one cotangent entry per recipient"
        );
        if cotangent.iter().all(|c| *c == 0.0) || scale == 0.0 {
            return;
        }
        let r_max = self.r_max();
        let trace = self.forward_trace(params, input);
        let d: Vec<f64> = trace
            .output()
            .iter()
            .zip(cotangent)
            .map(|(z, c)| {
                let s = sigmoid(*z);
                c * r_max * s * (1.0 - s)
            })
            .collect();
        self.backward_into(params, &trace, &d, scale, grad);
    }
}

/// Numerically stabilised softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    logits.iter().map(|z| z - lse).collect()
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}
