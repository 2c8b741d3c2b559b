//! Feed-forward Q-network: 22 inputs, two rectified hidden layers of 20 and
//! 10 units, 5 linear outputs (one per action).
//!
//! Weights are stored row-major as `[fan_in][fan_out]`, so
//! `weights[i * fan_out + j]` connects input `i` to unit `j`.

use std::fmt::Write as _;
use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{Action, OBS_DIM};
use crate::error::{Error, Result};

pub const LAYER_SIZES: [usize; 4] = [OBS_DIM, 20, 10, Action::COUNT];

pub type QValues = [f64; Action::COUNT];

const SNAPSHOT_MAGIC: &str = "qnet";
const SNAPSHOT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub fan_in: usize,
    pub fan_out: usize,
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

impl Dense {
    fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            fan_in,
            fan_out,
            weights: vec![0.0; fan_in * fan_out],
            biases: vec![0.0; fan_out],
        }
    }

    fn same_shape(&self, other: &Dense) -> bool {
        self.fan_in == other.fan_in
            && self.fan_out == other.fan_out
            && self.weights.len() == other.weights.len()
            && self.biases.len() == other.biases.len()
    }

    fn affine(&self, input: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&self.biases);
        for (i, &x) in input.iter().enumerate() {
            if x == 0.0 {
                continue;
            }
            let row = &self.weights[i * self.fan_out..(i + 1) * self.fan_out];
            for (o, w) in out.iter_mut().zip(row) {
                *o += x * w;
            }
        }
    }
}

/// Parameters of one Q-network (used for both the online and target copy).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkParams {
    pub layers: Vec<Dense>,
}

/// Gradients with the same shapes as [`NetworkParams`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradientSet {
    pub layers: Vec<Dense>,
}

fn zero_layers() -> Vec<Dense> {
    LAYER_SIZES
        .windows(2)
        .map(|w| Dense::zeros(w[0], w[1]))
        .collect()
}

fn check_shapes(a: &[Dense], b: &[Dense]) -> Result<()> {
    if a.len() != b.len() || a.iter().zip(b).any(|(x, y)| !x.same_shape(y)) {
        return Err(Error::Shape("layer shapes differ".into()));
    }
    Ok(())
}

impl NetworkParams {
    pub fn zeros() -> Self {
        Self {
            layers: zero_layers(),
        }
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.biases.len())
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        self.values().all(f64::is_finite)
    }

    /// All parameters in snapshot order: per layer, weights then biases.
    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(l.biases.iter()).copied())
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> + '_ {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weights.iter_mut().chain(l.biases.iter_mut()))
    }

    pub fn max_abs_diff(&self, other: &NetworkParams) -> f64 {
        self.values()
            .zip(other.values())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    fn check_layout(&self) -> Result<()> {
        check_shapes(&self.layers, &zero_layers())
    }
}

impl GradientSet {
    pub fn zeros() -> Self {
        Self {
            layers: zero_layers(),
        }
    }

    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(l.biases.iter()).copied())
    }

    fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> + '_ {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weights.iter_mut().chain(l.biases.iter_mut()))
    }

    pub fn add_assign(&mut self, other: &GradientSet) -> Result<()> {
        check_shapes(&self.layers, &other.layers)?;
        for (a, b) in self.values_mut().zip(other.values()) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.values_mut() {
            *g *= factor;
        }
    }

    /// Elementwise clip to `[-limit, limit]`.
    pub fn clip(&mut self, limit: f64) {
        for g in self.values_mut() {
            *g = g.clamp(-limit, limit);
        }
    }

    pub fn is_zero(&self) -> bool {
        self.values().all(|g| g == 0.0)
    }
}

/// Uniform `[-sqrt(6 / fan_in), sqrt(6 / fan_in)]` weights, zero biases.
pub fn init_network(seed: u64) -> NetworkParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = NetworkParams::zeros();
    for layer in &mut params.layers {
        let limit = (6.0 / layer.fan_in as f64).sqrt();
        for w in &mut layer.weights {
            *w = rng.random_range(-limit..=limit);
        }
    }
    params
}

/// Activations kept from a forward pass for backpropagation.
struct Trace {
    /// Post-activation output of each layer, input first.
    activations: Vec<Vec<f64>>,
}

fn forward_trace(params: &NetworkParams, obs: &[f64]) -> Result<Trace> {
    if obs.len() != LAYER_SIZES[0] {
        return Err(Error::InputLength {
            expected: LAYER_SIZES[0],
            got: obs.len(),
        });
    }
    let last = params.layers.len() - 1;
    let mut activations = Vec::with_capacity(params.layers.len() + 1);
    activations.push(obs.to_vec());
    for (k, layer) in params.layers.iter().enumerate() {
        let mut out = vec![0.0; layer.fan_out];
        layer.affine(activations.last().unwrap(), &mut out);
        if k != last {
            for z in &mut out {
                *z = z.max(0.0);
            }
        }
        activations.push(out);
    }
    Ok(Trace { activations })
}

pub fn forward(params: &NetworkParams, obs: &[f64]) -> Result<QValues> {
    let trace = forward_trace(params, obs)?;
    let out = trace.activations.last().unwrap();
    let mut q = [0.0; Action::COUNT];
    q.copy_from_slice(out);
    Ok(q)
}

/// Squared TD error `(target - Q(obs, action))^2` and its gradient with
/// respect to every parameter.
pub fn backward(
    params: &NetworkParams,
    obs: &[f64],
    action: usize,
    td_target: f64,
) -> Result<(f64, GradientSet)> {
    if action >= Action::COUNT {
        return Err(Error::Shape(format!("action index {action} out of range")));
    }
    let trace = forward_trace(params, obs)?;
    let q = trace.activations.last().unwrap()[action];
    let err = td_target - q;
    let loss = err * err;

    let mut grads = GradientSet::zeros();
    let n_layers = params.layers.len();
    // dL/d(pre-activation) of the current layer
    let mut delta = vec![0.0; Action::COUNT];
    delta[action] = -2.0 * err;

    for k in (0..n_layers).rev() {
        let layer = &params.layers[k];
        let input = &trace.activations[k];
        let g = &mut grads.layers[k];
        g.biases.copy_from_slice(&delta);
        for (i, &x) in input.iter().enumerate() {
            let row = &mut g.weights[i * layer.fan_out..(i + 1) * layer.fan_out];
            for (gw, d) in row.iter_mut().zip(&delta) {
                *gw = x * d;
            }
        }
        if k == 0 {
            break;
        }
        let mut prev = vec![0.0; layer.fan_in];
        for (i, p) in prev.iter_mut().enumerate() {
            // rectifier derivative from the stored post-activation
            if input[i] > 0.0 {
                let row = &layer.weights[i * layer.fan_out..(i + 1) * layer.fan_out];
                *p = row.iter().zip(&delta).map(|(w, d)| w * d).sum();
            }
        }
        delta = prev;
    }
    Ok((loss, grads))
}

/// `params - lr * grads`, elementwise.
pub fn sgd_step(params: &NetworkParams, grads: &GradientSet, lr: f64) -> Result<NetworkParams> {
    let mut next = params.clone();
    apply_gradients(&mut next, grads, lr)?;
    Ok(next)
}

pub fn apply_gradients(params: &mut NetworkParams, grads: &GradientSet, lr: f64) -> Result<()> {
    check_shapes(&params.layers, &grads.layers)?;
    for (p, g) in params.values_mut().zip(grads.values()) {
        *p -= lr * g;
    }
    Ok(())
}

/// Central finite-difference gradients of the squared TD error. Only calls
/// [`forward`], so it is independent of the backpropagation path.
///
/// `L(+eps) - L(-eps)` is evaluated as `(q- - q+)(2t - q+ - q-)`, the same
/// difference of squares factored, so a large loss does not drown small
/// gradient entries in rounding noise.
pub fn finite_difference_gradients(
    params: &NetworkParams,
    obs: &[f64],
    action: usize,
    td_target: f64,
    eps: f64,
) -> Result<GradientSet> {
    let q_at = |p: &NetworkParams| -> Result<f64> { Ok(forward(p, obs)?[action]) };
    let mut probe = params.clone();
    let mut grads = GradientSet::zeros();
    for k in 0..probe.layers.len() {
        for bias in [false, true] {
            let len = tensor(&probe.layers[k], bias).len();
            for idx in 0..len {
                let original = tensor(&probe.layers[k], bias)[idx];
                tensor_mut(&mut probe.layers[k], bias)[idx] = original + eps;
                let up = q_at(&probe)?;
                tensor_mut(&mut probe.layers[k], bias)[idx] = original - eps;
                let down = q_at(&probe)?;
                tensor_mut(&mut probe.layers[k], bias)[idx] = original;
                let diff = (down - up) * (2.0 * td_target - up - down);
                tensor_mut(&mut grads.layers[k], bias)[idx] = diff / (2.0 * eps);
            }
        }
    }
    Ok(grads)
}

fn tensor(layer: &Dense, bias: bool) -> &[f64] {
    if bias {
        &layer.biases
    } else {
        &layer.weights
    }
}

fn tensor_mut(layer: &mut Dense, bias: bool) -> &mut [f64] {
    if bias {
        &mut layer.biases
    } else {
        &mut layer.weights
    }
}

/// Largest `|a - b| / max(|a|, |b|, floor)` over all gradient entries.
pub fn max_relative_error(a: &GradientSet, b: &GradientSet, floor: f64) -> f64 {
    a.values()
        .zip(b.values())
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Writes the portable text snapshot:
///
/// ```text
/// qnet 1
/// layers 22 20 10 5
/// w0 <22*20 values, row-major [fan_in][fan_out]>
/// b0 <20 values>
/// w1 ...
/// ```
///
/// Values use the shortest decimal form that round-trips exactly.
pub fn write_snapshot<W: Write>(params: &NetworkParams, mut out: W) -> Result<()> {
    params.check_layout()?;
    writeln!(out, "{SNAPSHOT_MAGIC} {SNAPSHOT_VERSION}")?;
    let sizes: Vec<String> = LAYER_SIZES.iter().map(|s| s.to_string()).collect();
    writeln!(out, "layers {}", sizes.join(" "))?;
    for (k, layer) in params.layers.iter().enumerate() {
        writeln!(out, "w{k} {}", join_values(&layer.weights))?;
        writeln!(out, "b{k} {}", join_values(&layer.biases))?;
    }
    Ok(())
}

fn join_values(values: &[f64]) -> String {
    let mut s = String::with_capacity(values.len() * 20);
    for (i, v) in values.iter().enumerate() {
        if i > 0 {
            s.push(' ');
        }
        write!(s, "{v:?}").unwrap();
    }
    s
}

pub fn read_snapshot<R: BufRead>(input: R) -> Result<NetworkParams> {
    let bad = |detail: String| Error::format("weight snapshot", detail);
    let mut lines = input.lines();
    let mut next_line = |what: &str| -> Result<String> {
        lines
            .next()
            .transpose()?
            .ok_or_else(|| bad(format!("missing {what} line")))
    };

    let header = next_line("header")?;
    if header.trim() != format!("{SNAPSHOT_MAGIC} {SNAPSHOT_VERSION}") {
        return Err(bad(format!("unsupported header '{header}'")));
    }
    let sizes_line = next_line("layers")?;
    let sizes: Vec<usize> = sizes_line
        .strip_prefix("layers ")
        .ok_or_else(|| bad("expected 'layers'".into()))?
        .split_whitespace()
        .map(|t| t.parse().map_err(|_| bad(format!("bad layer size '{t}'"))))
        .collect::<Result<_>>()?;
    if sizes != LAYER_SIZES {
        return Err(bad(format!("layer sizes {sizes:?}, expected {LAYER_SIZES:?}")));
    }

    let mut params = NetworkParams::zeros();
    for (k, layer) in params.layers.iter_mut().enumerate() {
        for (tag, dest) in [("w", &mut layer.weights), ("b", &mut layer.biases)] {
            let line = next_line(&format!("{tag}{k}"))?;
            let mut tokens = line.split_whitespace();
            let name = tokens.next().unwrap_or("");
            if name != format!("{tag}{k}") {
                return Err(bad(format!("expected {tag}{k}, found '{name}'")));
            }
            let values: Vec<f64> = tokens
                .map(|t| t.parse().map_err(|_| bad(format!("bad number '{t}'"))))
                .collect::<Result<_>>()?;
            if values.len() != dest.len() {
                return Err(bad(format!(
                    "{tag}{k} has {} values, expected {}",
                    values.len(),
                    dest.len()
                )));
            }
            dest.copy_from_slice(&values);
        }
    }
    if !params.is_finite() {
        return Err(bad("non-finite parameter".into()));
    }
    Ok(params)
}
