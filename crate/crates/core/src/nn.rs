//! Dense feed-forward networks with exact reverse-mode gradients and Adam.
//!
//! A network is an [`MlpSpec`] (the immutable shape) plus a [`ParamBundle`]
//! (weights, biases and any named trainable scalars such as a log-partition
//! estimate). Hidden layers apply the spec's activation; the output layer is
//! affine.
//!
//! Weights are stored row-major with shape `(out_dim, in_dim)`. Batched
//! inputs are row-major `(rows, in_dim)` matrices; one-hot inputs can be
//! passed as active indices so the first layer becomes a column gather.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_dim, Error, Result};

const LEAKY_SLOPE: f64 = 0.01;
const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    LeakyRelu,
    Gelu,
}

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::LeakyRelu => {
                if z > 0.0 {
                    z
                } else {
                    LEAKY_SLOPE * z
                }
            }
            Activation::Gelu => 0.5 * z * (1.0 + libm::erf(z * std::f64::consts::FRAC_1_SQRT_2)),
        }
    }

    #[inline]
    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::LeakyRelu => {
                if z > 0.0 {
                    1.0
                } else {
                    LEAKY_SLOPE
                }
            }
            Activation::Gelu => {
                let cdf = 0.5 * (1.0 + libm::erf(z * std::f64::consts::FRAC_1_SQRT_2));
                cdf + z * FRAC_1_SQRT_2PI * (-0.5 * z * z).exp()
            }
        }
    }
}

/// Shape of a multilayer perceptron.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    input_dim: usize,
    hidden_dims: Vec<usize>,
    output_dim: usize,
    activation: Activation,
}

impl MlpSpec {
    pub fn new(
        input_dim: usize,
        hidden_dims: Vec<usize>,
        output_dim: usize,
        activation: Activation,
    ) -> Result<Self> {
        if input_dim == 0 || output_dim == 0 || hidden_dims.iter().any(|&h| h == 0) {
            return Err(Error::InvalidConfig(format!(
                "network dims must be >= 1 (input {input_dim}, hidden {hidden_dims:?}, output {output_dim})"
            )));
        }
        Ok(Self {
            input_dim,
            hidden_dims,
            output_dim,
            activation,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn hidden_dims(&self) -> &[usize] {
        &self.hidden_dims
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    /// `(in_dim, out_dim)` of every affine layer, input to output.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 2);
        dims.push(self.input_dim);
        dims.extend_from_slice(&self.hidden_dims);
        dims.push(self.output_dim);
        dims.windows(2).map(|w| (w[0], w[1])).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    in_dim: usize,
    out_dim: usize,
    /// Row-major `(out_dim, in_dim)`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Layer {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            in_dim,
            out_dim,
            weight: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
        }
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }
}

/// Trainable parameters of one network plus named extra scalars.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamBundle {
    pub layers: Vec<Layer>,
    pub scalars: BTreeMap<String, f64>,
}

impl ParamBundle {
    pub fn zeros(spec: &MlpSpec) -> Self {
        Self {
            layers: spec
                .layer_shapes()
                .into_iter()
                .map(|(i, o)| Layer::zeros(i, o))
                .collect(),
            scalars: BTreeMap::new(),
        }
    }

    /// Uniform fan-in initialisation of weights, zero biases.
    pub fn init<R: Rng + ?Sized>(spec: &MlpSpec, rng: &mut R) -> Self {
        let mut params = Self::zeros(spec);
        for layer in &mut params.layers {
            let bound = 1.0 / (layer.in_dim as f64).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
            for w in &mut layer.weight {
                *w = dist.sample(rng);
            }
        }
        params
    }

    /// Same shape with every entry (including scalars) set to zero.
    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| Layer::zeros(l.in_dim, l.out_dim))
                .collect(),
            scalars: self.scalars.keys().map(|k| (k.clone(), 0.0)).collect(),
        }
    }

    pub fn with_scalar(mut self, name: &str, value: f64) -> Self {
        self.scalars.insert(name.to_owned(), value);
        self
    }

    pub fn scalar(&self, name: &str) -> Option<f64> {
        self.scalars.get(name).copied()
    }

    pub fn scalar_mut(&mut self, name: &str) -> Option<&mut f64> {
        self.scalars.get_mut(name)
    }

    pub fn fill_zero(&mut self) {
        for layer in &mut self.layers {
            layer.weight.iter_mut().for_each(|w| *w = 0.0);
            layer.bias.iter_mut().for_each(|b| *b = 0.0);
        }
        self.scalars.values_mut().for_each(|s| *s = 0.0);
    }

    pub fn check_shape(&self, spec: &MlpSpec) -> Result<()> {
        let shapes = spec.layer_shapes();
        ensure_dim("layer count", shapes.len(), self.layers.len())?;
        for ((i, o), layer) in shapes.into_iter().zip(&self.layers) {
            ensure_dim("layer input", i, layer.in_dim)?;
            ensure_dim("layer output", o, layer.out_dim)?;
            ensure_dim("weight length", i * o, layer.weight.len())?;
            ensure_dim("bias length", o, layer.bias.len())?;
        }
        Ok(())
    }

    fn check_same_shape(&self, other: &ParamBundle) -> Result<()> {
        ensure_dim("layer count", self.layers.len(), other.layers.len())?;
        for (a, b) in self.layers.iter().zip(&other.layers) {
            ensure_dim("weight length", a.weight.len(), b.weight.len())?;
            ensure_dim("bias length", a.bias.len(), b.bias.len())?;
        }
        ensure_dim("scalar count", self.scalars.len(), other.scalars.len())?;
        for key in self.scalars.keys() {
            if !other.scalars.contains_key(key) {
                return Err(Error::InvalidState(format!("missing scalar `{key}`")));
            }
        }
        Ok(())
    }

    /// Number of trainable values.
    pub fn len(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum::<usize>()
            + self.scalars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Names the first non-finite entry, if any.
    pub fn first_non_finite(&self) -> Option<String> {
        for (li, layer) in self.layers.iter().enumerate() {
            if let Some(k) = layer.weight.iter().position(|v| !v.is_finite()) {
                return Some(format!("layer{li}.weight[{k}]"));
            }
            if let Some(k) = layer.bias.iter().position(|v| !v.is_finite()) {
                return Some(format!("layer{li}.bias[{k}]"));
            }
        }
        self.scalars
            .iter()
            .find(|(_, v)| !v.is_finite())
            .map(|(k, _)| format!("scalar {k}"))
    }

    /// Textual checkpoint: one `name count` header line followed by a line
    /// of space-separated values per tensor. Values use shortest round-trip
    /// decimal formatting so reading back is exact.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut push = |name: String, values: &[f64]| {
            let _ = writeln!(out, "{name} {}", values.len());
            let line: Vec<String> = values.iter().map(|v| format!("{v:?}")).collect();
            let _ = writeln!(out, "{}", line.join(" "));
        };
        for (li, layer) in self.layers.iter().enumerate() {
            push(format!("layer.{li}.weight.{}x{}", layer.out_dim, layer.in_dim), &layer.weight);
            push(format!("layer.{li}.bias"), &layer.bias);
        }
        for (k, v) in &self.scalars {
            push(format!("scalar.{k}"), std::slice::from_ref(v));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let mut layers: Vec<Layer> = Vec::new();
        let mut scalars = BTreeMap::new();
        let bad = |msg: String| Error::InvalidState(format!("checkpoint: {msg}"));
        while let Some(header) = lines.next() {
            let mut parts = header.split_whitespace();
            let name = parts.next().ok_or_else(|| bad("empty header".into()))?;
            let count: usize = parts
                .next()
                .and_then(|c| c.parse().ok())
                .ok_or_else(|| bad(format!("bad count in `{header}`")))?;
            let values: Vec<f64> = lines
                .next()
                .ok_or_else(|| bad(format!("missing values for `{name}`")))?
                .split_whitespace()
                .map(|v| v.parse::<f64>().map_err(|e| bad(format!("{name}: {e}"))))
                .collect::<Result<_>>()?;
            if values.len() != count {
                return Err(bad(format!("{name}: expected {count} values, got {}", values.len())));
            }
            let fields: Vec<&str> = name.split('.').collect();
            match fields.as_slice() {
                ["layer", _, "weight", shape] => {
                    let (o, i) = shape
                        .split_once('x')
                        .and_then(|(o, i)| Some((o.parse::<usize>().ok()?, i.parse::<usize>().ok()?)))
                        .ok_or_else(|| bad(format!("bad shape in `{name}`")))?;
                    if o * i != count {
                        return Err(bad(format!("{name}: shape does not match count")));
                    }
                    layers.push(Layer {
                        in_dim: i,
                        out_dim: o,
                        weight: values,
                        bias: Vec::new(),
                    });
                }
                ["layer", _, "bias"] => {
                    let layer = layers
                        .last_mut()
                        .ok_or_else(|| bad(format!("`{name}` before its weight")))?;
                    if layer.out_dim != count {
                        return Err(bad(format!("{name}: bias length mismatch")));
                    }
                    layer.bias = values;
                }
                ["scalar", rest @ ..] if count == 1 => {
                    scalars.insert(rest.join("."), values[0]);
                }
                _ => return Err(bad(format!("unknown entry `{name}`"))),
            }
        }
        Ok(Self { layers, scalars })
    }
}

/// A batch of network inputs.
#[derive(Debug, Clone, Copy)]
pub enum BatchInput<'a> {
    /// Row-major `(rows, input_dim)` matrix.
    Dense { data: &'a [f64], rows: usize },
    /// Each row has exactly `per_row` active (value 1) input indices.
    OneHot { indices: &'a [usize], per_row: usize },
}

impl BatchInput<'_> {
    pub fn rows(&self) -> usize {
        match *self {
            BatchInput::Dense { rows, .. } => rows,
            BatchInput::OneHot { indices, per_row } => {
                if per_row == 0 {
                    0
                } else {
                    indices.len() / per_row
                }
            }
        }
    }

    fn validate(&self, input_dim: usize) -> Result<()> {
        match *self {
            BatchInput::Dense { data, rows } => ensure_dim("dense batch input", rows * input_dim, data.len()),
            BatchInput::OneHot { indices, per_row } => {
                if per_row == 0 || indices.len() % per_row != 0 {
                    return Err(Error::InvalidState("one-hot batch is ragged".into()));
                }
                if let Some(&bad) = indices.iter().find(|&&i| i >= input_dim) {
                    return Err(Error::DimensionMismatch {
                        context: "one-hot index",
                        expected: input_dim,
                        actual: bad,
                    });
                }
                Ok(())
            }
        }
    }

    fn to_owned(self) -> OwnedInput {
        match self {
            BatchInput::Dense { data, rows } => OwnedInput::Dense {
                data: data.to_vec(),
                rows,
            },
            BatchInput::OneHot { indices, per_row } => OwnedInput::OneHot {
                indices: indices.to_vec(),
                per_row,
            },
        }
    }
}

#[derive(Debug, Clone)]
enum OwnedInput {
    Dense { data: Vec<f64>, rows: usize },
    OneHot { indices: Vec<usize>, per_row: usize },
}

impl OwnedInput {
    fn borrow(&self) -> BatchInput<'_> {
        match self {
            OwnedInput::Dense { data, rows } => BatchInput::Dense { data, rows: *rows },
            OwnedInput::OneHot { indices, per_row } => BatchInput::OneHot {
                indices,
                per_row: *per_row,
            },
        }
    }
}

/// Activations cached by a forward pass, consumed by [`Mlp::backward_tape`].
#[derive(Debug, Clone)]
pub struct Tape {
    rows: usize,
    input: OwnedInput,
    /// Pre-activations of every layer; the last entry is the network output.
    pre: Vec<Vec<f64>>,
    /// Post-activations of the hidden layers.
    post: Vec<Vec<f64>>,
}

impl Tape {
    pub fn rows(&self) -> usize {
        self.rows
    }

    /// Row-major `(rows, output_dim)` network output.
    pub fn output(&self) -> &[f64] {
        self.pre.last().map(Vec::as_slice).unwrap_or(&[])
    }
}

/// `c = a · b + beta · c` with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    if k > 0 {
        assert!((m - 1) * rsa + (k - 1) * csa < a.len());
        assert!((k - 1) * rsb + (n - 1) * csb < b.len());
    }
    assert!((m - 1) * rsc + (n - 1) * csc < c.len());
    // SAFETY: the asserts above bound every index touched by dgemm.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// `out = input · Wᵀ + b` for one layer.
fn affine(layer: &Layer, input: BatchInput<'_>, out: &mut Vec<f64>) {
    let rows = input.rows();
    let (i_dim, o_dim) = (layer.in_dim, layer.out_dim);
    out.clear();
    out.reserve(rows * o_dim);
    for _ in 0..rows {
        out.extend_from_slice(&layer.bias);
    }
    match input {
        BatchInput::Dense { data, .. } => {
            gemm(rows, i_dim, o_dim, data, (i_dim, 1), &layer.weight, (1, i_dim), 1.0, out, (o_dim, 1));
        }
        BatchInput::OneHot { indices, per_row } => {
            for (r, active) in indices.chunks(per_row).enumerate() {
                let row = &mut out[r * o_dim..(r + 1) * o_dim];
                for &col in active {
                    for (j, y) in row.iter_mut().enumerate() {
                        *y += layer.weight[j * i_dim + col];
                    }
                }
            }
        }
    }
}

/// A network: its shape and parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    spec: MlpSpec,
    pub params: ParamBundle,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(spec: MlpSpec, rng: &mut R) -> Self {
        let params = ParamBundle::init(&spec, rng);
        Self { spec, params }
    }

    pub fn from_params(spec: MlpSpec, params: ParamBundle) -> Result<Self> {
        params.check_shape(&spec)?;
        Ok(Self { spec, params })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    /// Single-input forward pass.
    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        forward(&self.spec, &self.params, input)
    }

    /// Batched forward pass without caching activations.
    pub fn forward_batch(&self, input: BatchInput<'_>) -> Result<Vec<f64>> {
        input.validate(self.spec.input_dim)?;
        let act = self.spec.activation;
        let mut cur = Vec::new();
        let mut next = Vec::new();
        let last = self.params.layers.len() - 1;
        for (li, layer) in self.params.layers.iter().enumerate() {
            if li == 0 {
                affine(layer, input, &mut next);
            } else {
                affine(layer, BatchInput::Dense { data: &cur, rows: input.rows() }, &mut next);
            }
            if li < last {
                next.iter_mut().for_each(|z| *z = act.apply(*z));
            }
            std::mem::swap(&mut cur, &mut next);
        }
        Ok(cur)
    }

    /// Batched forward pass that records what the backward pass needs.
    pub fn forward_tape(&self, input: BatchInput<'_>) -> Result<Tape> {
        input.validate(self.spec.input_dim)?;
        let rows = input.rows();
        let act = self.spec.activation;
        let n_layers = self.params.layers.len();
        let mut pre = Vec::with_capacity(n_layers);
        let mut post: Vec<Vec<f64>> = Vec::with_capacity(n_layers - 1);
        for (li, layer) in self.params.layers.iter().enumerate() {
            let mut z = Vec::new();
            if li == 0 {
                affine(layer, input, &mut z);
            } else {
                affine(layer, BatchInput::Dense { data: &post[li - 1], rows }, &mut z);
            }
            if li + 1 < n_layers {
                post.push(z.iter().map(|&v| act.apply(v)).collect());
            }
            pre.push(z);
        }
        Ok(Tape {
            rows,
            input: input.to_owned(),
            pre,
            post,
        })
    }

    /// Accumulates `∂(upstream · output)/∂params` into `grads` and returns the
    /// gradient with respect to a dense input (`None` for one-hot input).
    pub fn backward_tape(
        &self,
        tape: &Tape,
        upstream: &[f64],
        grads: &mut ParamBundle,
    ) -> Result<Option<Vec<f64>>> {
        let rows = tape.rows;
        ensure_dim("upstream gradient", rows * self.spec.output_dim, upstream.len())?;
        grads.check_shape(&self.spec)?;
        let act = self.spec.activation;
        let mut delta = upstream.to_vec();
        for li in (0..self.params.layers.len()).rev() {
            let layer = &self.params.layers[li];
            let (i_dim, o_dim) = (layer.in_dim, layer.out_dim);
            let g = &mut grads.layers[li];
            for r in 0..rows {
                for (b, d) in g.bias.iter_mut().zip(&delta[r * o_dim..(r + 1) * o_dim]) {
                    *b += d;
                }
            }
            let layer_input = if li == 0 {
                tape.input.borrow()
            } else {
                BatchInput::Dense {
                    data: &tape.post[li - 1],
                    rows,
                }
            };
            match layer_input {
                BatchInput::Dense { data, .. } => {
                    // dW (o×i) += deltaᵀ (o×rows) · input (rows×i)
                    gemm(o_dim, rows, i_dim, &delta, (1, o_dim), data, (i_dim, 1), 1.0, &mut g.weight, (i_dim, 1));
                }
                BatchInput::OneHot { indices, per_row } => {
                    for (r, active) in indices.chunks(per_row).enumerate() {
                        let d = &delta[r * o_dim..(r + 1) * o_dim];
                        for &col in active {
                            for (j, dj) in d.iter().enumerate() {
                                g.weight[j * i_dim + col] += dj;
                            }
                        }
                    }
                }
            }
            let needs_input_grad = li > 0 || matches!(layer_input, BatchInput::Dense { .. });
            if !needs_input_grad {
                return Ok(None);
            }
            // d_input (rows×i) = delta (rows×o) · W (o×i)
            let mut d_in = vec![0.0; rows * i_dim];
            gemm(rows, o_dim, i_dim, &delta, (o_dim, 1), &layer.weight, (i_dim, 1), 0.0, &mut d_in, (i_dim, 1));
            if li > 0 {
                for (d, &z) in d_in.iter_mut().zip(&tape.pre[li - 1]) {
                    *d *= act.derivative(z);
                }
            }
            delta = d_in;
        }
        Ok(Some(delta))
    }

    /// Single-input backward pass: parameter gradient and input gradient.
    pub fn backward(&self, input: &[f64], upstream: &[f64]) -> Result<(ParamBundle, Vec<f64>)> {
        backward(&self.spec, &self.params, input, upstream)
    }
}

pub fn forward(spec: &MlpSpec, params: &ParamBundle, input: &[f64]) -> Result<Vec<f64>> {
    ensure_dim("network input", spec.input_dim, input.len())?;
    params.check_shape(spec)?;
    let net = Mlp {
        spec: spec.clone(),
        params: params.clone(),
    };
    net.forward_batch(BatchInput::Dense { data: input, rows: 1 })
}

pub fn backward(
    spec: &MlpSpec,
    params: &ParamBundle,
    input: &[f64],
    upstream: &[f64],
) -> Result<(ParamBundle, Vec<f64>)> {
    ensure_dim("network input", spec.input_dim, input.len())?;
    ensure_dim("upstream gradient", spec.output_dim, upstream.len())?;
    params.check_shape(spec)?;
    let net = Mlp {
        spec: spec.clone(),
        params: params.clone(),
    };
    let tape = net.forward_tape(BatchInput::Dense { data: input, rows: 1 })?;
    let mut grads = params.zeros_like();
    let d_in = net
        .backward_tape(&tape, upstream, &mut grads)?
        .expect("dense input yields an input gradient");
    Ok((grads, d_in))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Step sizes for the two parameter groups.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LearningRates {
    pub layers: f64,
    pub scalars: f64,
}

impl LearningRates {
    pub fn uniform(lr: f64) -> Self {
        Self {
            layers: lr,
            scalars: lr,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub first: ParamBundle,
    pub second: ParamBundle,
    pub step_count: u64,
}

#[inline]
fn adam_update(p: &mut f64, g: f64, m: &mut f64, v: &mut f64, lr: f64, cfg: &AdamConfig, c1: f64, c2: f64) {
    *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
    *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
    let m_hat = *m / c1;
    let v_hat = *v / c2;
    *p -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
}

impl AdamState {
    pub fn new(params: &ParamBundle, config: AdamConfig) -> Self {
        Self {
            config,
            first: params.zeros_like(),
            second: params.zeros_like(),
            step_count: 0,
        }
    }

    /// One bias-corrected Adam update. Fails without touching anything if a
    /// gradient entry is non-finite.
    pub fn step(&mut self, params: &mut ParamBundle, grads: &ParamBundle, lr: LearningRates) -> Result<()> {
        params.check_same_shape(grads)?;
        params.check_same_shape(&self.first)?;
        if let Some(name) = grads.first_non_finite() {
            return Err(Error::NonFinite(format!("gradient of {name}")));
        }
        self.step_count += 1;
        let cfg = self.config;
        let t = self.step_count as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        for (li, layer) in params.layers.iter_mut().enumerate() {
            let (gl, ml, vl) = (&grads.layers[li], &mut self.first.layers[li], &mut self.second.layers[li]);
            for k in 0..layer.weight.len() {
                adam_update(&mut layer.weight[k], gl.weight[k], &mut ml.weight[k], &mut vl.weight[k], lr.layers, &cfg, c1, c2);
            }
            for k in 0..layer.bias.len() {
                adam_update(&mut layer.bias[k], gl.bias[k], &mut ml.bias[k], &mut vl.bias[k], lr.layers, &cfg, c1, c2);
            }
        }
        for (name, p) in params.scalars.iter_mut() {
            let g = grads.scalars[name];
            let m = self.first.scalars.get_mut(name).expect("shape checked");
            let v = self.second.scalars.get_mut(name).expect("shape checked");
            adam_update(p, g, m, v, lr.scalars, &cfg, c1, c2);
        }
        Ok(())
    }
}

/// Single-learning-rate convenience wrapper around [`AdamState::step`].
pub fn adam_step(params: &mut ParamBundle, grads: &ParamBundle, state: &mut AdamState, lr: f64) -> Result<()> {
    state.step(params, grads, LearningRates::uniform(lr))
}
