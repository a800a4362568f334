//! Dense feed-forward networks with manual backpropagation.
//!
//! Every hidden block is `fc -> group norm -> ReLU -> dropout`; the output block
//! is `fc -> final activation`. All arithmetic is `f64` and batch-major: a batch
//! is an `(n, dim)` matrix with one sample per row.
//!
//! Dropout is inverted (kept units are scaled by `1 / (1 - p)` at train time), so
//! eval mode applies no correction and never touches the random source.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::sync::atomic::{AtomicU64, Ordering};

use crate::{Error, Result};

/// Variance floor used by group normalization.
pub const GROUP_NORM_EPS: f64 = 1e-5;

static NEXT_VERSION: AtomicU64 = AtomicU64::new(1);

fn fresh_version() -> u64 {
    NEXT_VERSION.fetch_add(1, Ordering::Relaxed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinalActivation {
    /// Rectifier; every output is `>= 0`.
    NonNeg,
    Identity,
    /// Logistic sigmoid.
    Squash,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    /// Shape `(out_dim, in_dim)`.
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl DenseLayer {
    pub fn new(weights: Array2<f64>, bias: Array1<f64>) -> Result<Self> {
        if weights.nrows() != bias.len() {
            return Err(Error::contract(format!(
                "dense layer has {} weight rows but {} biases",
                weights.nrows(),
                bias.len()
            )));
        }
        if weights.iter().chain(bias.iter()).any(|v| !v.is_finite()) {
            return Err(Error::contract("dense layer parameters must be finite"));
        }
        Ok(Self { weights, bias })
    }

    /// Glorot-uniform weights in `±sqrt(6 / (fan_in + fan_out))`, zero bias.
    pub fn glorot<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let weights = Array2::from_shape_fn((out_dim, in_dim), |_| rng.random_range(-limit..=limit));
        Self {
            weights,
            bias: Array1::zeros(out_dim),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.nrows()
    }
}

/// Per-layer activation cache recorded by a forward pass.
#[derive(Debug, Clone)]
struct LayerCache {
    input: Array2<f64>,
    /// Hidden layers: group-normalized pre-activations. Output layer: raw pre-activations.
    pre: Array2<f64>,
    /// Hidden layers only: `1 / sqrt(var + eps)` for each (row, group).
    inv_std: Option<Array2<f64>>,
    /// Hidden layers in train mode with dropout: `0` or `1 / (1 - p)`.
    dropout_scale: Option<Array2<f64>>,
}

/// Everything `backward` needs from a matching `forward` call.
#[derive(Debug, Clone)]
pub struct Tape {
    version: u64,
    caches: Vec<LayerCache>,
    output: Array2<f64>,
}

impl Tape {
    pub fn output(&self) -> &Array2<f64> {
        &self.output
    }

    pub fn batch_size(&self) -> usize {
        self.output.nrows()
    }
}

/// Parameter gradients, shaped like the network's layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<DenseLayer>,
}

impl Gradients {
    pub fn zeros_like(net: &MlpNetwork) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| DenseLayer {
                    weights: Array2::zeros(l.weights.raw_dim()),
                    bias: Array1::zeros(l.bias.len()),
                })
                .collect(),
        }
    }

    pub fn slices(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| {
                [
                    l.weights.as_slice().expect("standard layout"),
                    l.bias.as_slice().expect("standard layout"),
                ]
            })
            .collect()
    }

    pub fn max_abs(&self) -> f64 {
        self.slices()
            .into_iter()
            .flatten()
            .fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    /// `self += other`.
    pub fn accumulate(&mut self, other: &Gradients) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weights += &b.weights;
            a.bias += &b.bias;
        }
    }
}

/// A dense MLP: hidden blocks `fc -> GN -> ReLU -> dropout`, then `fc -> final activation`.
#[derive(Debug, Clone)]
pub struct MlpNetwork {
    layers: Vec<DenseLayer>,
    /// `None` disables group normalization.
    norm_groups: Option<usize>,
    dropout_rate: f64,
    final_activation: FinalActivation,
    version: u64,
}

impl PartialEq for MlpNetwork {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers
            && self.norm_groups == other.norm_groups
            && self.dropout_rate == other.dropout_rate
            && self.final_activation == other.final_activation
    }
}

impl MlpNetwork {
    /// Builds a randomly initialized network with layer widths `dims`
    /// (`dims[0]` is the input width, the last entry the output width).
    pub fn new<R: Rng + ?Sized>(
        dims: &[usize],
        norm_groups: Option<usize>,
        dropout_rate: f64,
        final_activation: FinalActivation,
        rng: &mut R,
    ) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::contract(format!("invalid layer widths {dims:?}")));
        }
        let layers = dims
            .windows(2)
            .map(|w| DenseLayer::glorot(w[0], w[1], rng))
            .collect();
        Self::from_layers(layers, norm_groups, dropout_rate, final_activation)
    }

    pub fn from_layers(
        layers: Vec<DenseLayer>,
        norm_groups: Option<usize>,
        dropout_rate: f64,
        final_activation: FinalActivation,
    ) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::contract("network needs at least one layer"));
        }
        for (k, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::contract(format!(
                    "layer {k} outputs {} but layer {} expects {}",
                    pair[0].out_dim(),
                    k + 1,
                    pair[1].in_dim()
                )));
            }
        }
        if !(0.0..1.0).contains(&dropout_rate) {
            return Err(Error::contract(format!(
                "dropout rate {dropout_rate} outside [0, 1)"
            )));
        }
        if let Some(g) = norm_groups {
            for (k, l) in layers[..layers.len() - 1].iter().enumerate() {
                if g == 0 || l.out_dim() % g != 0 {
                    return Err(Error::contract(format!(
                        "{g} norm groups do not divide hidden layer {k} width {}",
                        l.out_dim()
                    )));
                }
            }
        }
        Ok(Self {
            layers,
            norm_groups,
            dropout_rate,
            final_activation,
            version: fresh_version(),
        })
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    /// Mutable access to the parameters. Invalidates outstanding tapes.
    pub fn layers_mut(&mut self) -> &mut [DenseLayer] {
        self.version = fresh_version();
        &mut self.layers
    }

    /// Flat mutable views of every parameter tensor, in `Gradients::slices` order.
    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.version = fresh_version();
        self.layers
            .iter_mut()
            .flat_map(|l| {
                [
                    l.weights.as_slice_mut().expect("standard layout"),
                    l.bias.as_slice_mut().expect("standard layout"),
                ]
            })
            .collect()
    }

    pub fn param_lens(&self) -> Vec<usize> {
        self.layers
            .iter()
            .flat_map(|l| [l.weights.len(), l.bias.len()])
            .collect()
    }

    pub fn norm_groups(&self) -> Option<usize> {
        self.norm_groups
    }

    pub fn dropout_rate(&self) -> f64 {
        self.dropout_rate
    }

    pub fn final_activation(&self) -> FinalActivation {
        self.final_activation
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    /// Single-sample forward pass.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        input: &[f64],
        mode: Mode,
        rng: &mut R,
    ) -> Result<(Vec<f64>, Tape)> {
        let x =
            ArrayView2::from_shape((1, input.len()), input).map_err(|e| Error::contract(e.to_string()))?;
        let (out, tape) = self.forward_batch(x, mode, rng)?;
        Ok((out.row(0).to_vec(), tape))
    }

    /// Eval-mode forward pass without a tape. Consumes no randomness.
    pub fn predict(&self, input: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.run(input, Mode::Eval, None::<&mut rand_chacha::ChaCha8Rng>, false)
            .map(|(out, _)| out)
    }

    pub fn forward_batch<R: Rng + ?Sized>(
        &self,
        input: ArrayView2<f64>,
        mode: Mode,
        rng: &mut R,
    ) -> Result<(Array2<f64>, Tape)> {
        let (out, caches) = self.run(input, mode, Some(rng), true)?;
        Ok((
            out.clone(),
            Tape {
                version: self.version,
                caches,
                output: out,
            },
        ))
    }

    fn run<R: Rng + ?Sized>(
        &self,
        input: ArrayView2<f64>,
        mode: Mode,
        mut rng: Option<&mut R>,
        record: bool,
    ) -> Result<(Array2<f64>, Vec<LayerCache>)> {
        if input.ncols() != self.input_dim() {
            return Err(Error::contract(format!(
                "input width {} does not match network input {}",
                input.ncols(),
                self.input_dim()
            )));
        }
        let last = self.layers.len() - 1;
        let mut caches = Vec::with_capacity(if record { self.layers.len() } else { 0 });
        let mut x = input.to_owned();
        for (k, layer) in self.layers.iter().enumerate() {
            let mut z = x.dot(&layer.weights.t());
            z += &layer.bias;
            if z.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("pre-activation of layer {k}")));
            }
            if k == last {
                let out = z.mapv(|v| activate(self.final_activation, v));
                if record {
                    caches.push(LayerCache {
                        input: x,
                        pre: z,
                        inv_std: None,
                        dropout_scale: None,
                    });
                }
                return Ok((out, caches));
            }
            let inv_std = match self.norm_groups {
                Some(g) => Some(group_norm_rows(&mut z, g)),
                None => None,
            };
            let mut a = z.mapv(|v| v.max(0.0));
            let mut dropout_scale = None;
            if mode == Mode::Train && self.dropout_rate > 0.0 {
                let rng = rng
                    .as_deref_mut()
                    .ok_or_else(|| Error::contract("train mode requires a random source"))?;
                let keep = 1.0 / (1.0 - self.dropout_rate);
                let p = self.dropout_rate;
                let mask =
                    Array2::from_shape_fn(a.raw_dim(), |_| if rng.random::<f64>() < p { 0.0 } else { keep });
                a *= &mask;
                dropout_scale = Some(mask);
            }
            if record {
                caches.push(LayerCache {
                    input: std::mem::replace(&mut x, a),
                    pre: z,
                    inv_std,
                    dropout_scale,
                });
            } else {
                x = a;
            }
        }
        unreachable!("loop returns at the output layer")
    }

    /// Gradients of `sum(out_grad ⊙ output)` with respect to every parameter,
    /// plus the gradient with respect to the network input.
    pub fn backward(&self, tape: &Tape, out_grad: ArrayView2<f64>) -> Result<(Gradients, Array2<f64>)> {
        if tape.version != self.version {
            return Err(Error::contract(
                "stale tape: network parameters changed since the forward pass",
            ));
        }
        if tape.caches.len() != self.layers.len() || out_grad.dim() != tape.output.dim() {
            return Err(Error::contract(format!(
                "output gradient shape {:?} does not match tape output {:?}",
                out_grad.dim(),
                tape.output.dim()
            )));
        }
        let last = self.layers.len() - 1;
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut delta = out_grad.to_owned();
        for k in (0..self.layers.len()).rev() {
            let cache = &tape.caches[k];
            let layer = &self.layers[k];
            let dz = if k == last {
                let mut d = delta;
                ndarray::Zip::from(&mut d)
                    .and(&cache.pre)
                    .for_each(|g, &z| *g *= activation_slope(self.final_activation, z));
                d
            } else {
                let mut d = delta;
                if let Some(mask) = &cache.dropout_scale {
                    d *= mask;
                }
                // ReLU on the normalized value.
                ndarray::Zip::from(&mut d).and(&cache.pre).for_each(|g, &n| {
                    if n <= 0.0 {
                        *g = 0.0
                    }
                });
                match (&cache.inv_std, self.norm_groups) {
                    (Some(inv_std), Some(groups)) => {
                        group_norm_backward_rows(&cache.pre, inv_std, &d, groups)
                    }
                    _ => d,
                }
            };
            let weights = dz.t().dot(&cache.input);
            let bias = dz.sum_axis(Axis(0));
            delta = dz.dot(&layer.weights);
            grads.push(DenseLayer { weights, bias });
        }
        grads.reverse();
        Ok((Gradients { layers: grads }, delta))
    }
}

fn activate(act: FinalActivation, z: f64) -> f64 {
    match act {
        FinalActivation::NonNeg => z.max(0.0),
        FinalActivation::Identity => z,
        FinalActivation::Squash => sigmoid(z),
    }
}

fn activation_slope(act: FinalActivation, z: f64) -> f64 {
    match act {
        FinalActivation::NonNeg => {
            if z > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        FinalActivation::Identity => 1.0,
        FinalActivation::Squash => {
            let s = sigmoid(z);
            s * (1.0 - s)
        }
    }
}

pub fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^t)` without overflow.
pub fn softplus(t: f64) -> f64 {
    t.max(0.0) + (-t.abs()).exp().ln_1p()
}

/// Normalizes each group of `x` to zero mean and unit variance (no affine terms).
pub fn group_norm(x: &[f64], groups: usize) -> Result<Vec<f64>> {
    if groups == 0 || x.len() % groups != 0 {
        return Err(Error::contract(format!(
            "{groups} groups do not divide length {}",
            x.len()
        )));
    }
    let mut z =
        Array2::from_shape_vec((1, x.len()), x.to_vec()).map_err(|e| Error::contract(e.to_string()))?;
    group_norm_rows(&mut z, groups);
    Ok(z.into_raw_vec_and_offset().0)
}

/// In-place row-wise group norm; returns `1 / sqrt(var + eps)` per (row, group).
fn group_norm_rows(z: &mut Array2<f64>, groups: usize) -> Array2<f64> {
    let width = z.ncols() / groups;
    let mut inv_std = Array2::zeros((z.nrows(), groups));
    for (mut row, mut inv_row) in z.rows_mut().into_iter().zip(inv_std.rows_mut()) {
        for g in 0..groups {
            let mut chunk = row.slice_mut(ndarray::s![g * width..(g + 1) * width]);
            let mean = chunk.sum() / width as f64;
            let var = chunk.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / width as f64;
            let inv = 1.0 / (var + GROUP_NORM_EPS).sqrt();
            chunk.mapv_inplace(|v| (v - mean) * inv);
            inv_row[g] = inv;
        }
    }
    inv_std
}

/// Backward through row-wise group norm given normalized outputs `normed`.
fn group_norm_backward_rows(
    normed: &Array2<f64>,
    inv_std: &Array2<f64>,
    grad: &Array2<f64>,
    groups: usize,
) -> Array2<f64> {
    let width = normed.ncols() / groups;
    let n = width as f64;
    let mut out = Array2::zeros(grad.raw_dim());
    for r in 0..grad.nrows() {
        for g in 0..groups {
            let range = g * width..(g + 1) * width;
            let y = normed.slice(ndarray::s![r, range.clone()]);
            let dy = grad.slice(ndarray::s![r, range.clone()]);
            let mean_dy = dy.sum() / n;
            let mean_dy_y = dy.dot(&y) / n;
            let inv = inv_std[[r, g]];
            let mut o = out.slice_mut(ndarray::s![r, range]);
            ndarray::Zip::from(&mut o)
                .and(&dy)
                .and(&y)
                .for_each(|o, &d, &yy| *o = inv * (d - mean_dy - yy * mean_dy_y));
        }
    }
    out
}

/// Learning-rate optimizer state for one network.
pub trait Optimizer {
    fn step(&mut self, params: Vec<&mut [f64]>, grads: &[&[f64]]) -> Result<()>;
    fn learning_rate(&self) -> f64;
    fn set_learning_rate(&mut self, lr: f64);
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
    pub step_count: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(param_lens: &[usize], lr: f64) -> Self {
        Self {
            first_moment: param_lens.iter().map(|&n| vec![0.0; n]).collect(),
            second_moment: param_lens.iter().map(|&n| vec![0.0; n]).collect(),
            step_count: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn for_network(net: &MlpNetwork, lr: f64) -> Self {
        Self::new(&net.param_lens(), lr)
    }
}

fn check_shapes(moments: &[Vec<f64>], params: &[&mut [f64]], grads: &[&[f64]]) -> Result<()> {
    let ok = params.len() == moments.len()
        && grads.len() == moments.len()
        && moments
            .iter()
            .zip(params.iter())
            .zip(grads.iter())
            .all(|((m, p), g)| m.len() == p.len() && g.len() == p.len());
    if ok {
        Ok(())
    } else {
        Err(Error::contract(
            "optimizer state, parameters and gradients differ in shape",
        ))
    }
}

/// One Adam update of `params` in place.
pub fn adam_step(params: Vec<&mut [f64]>, grads: &[&[f64]], state: &mut AdamState) -> Result<()> {
    check_shapes(&state.first_moment, &params, grads)?;
    state.step_count += 1;
    let t = state.step_count as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    for (((p, g), m), v) in params
        .into_iter()
        .zip(grads)
        .zip(state.first_moment.iter_mut())
        .zip(state.second_moment.iter_mut())
    {
        for i in 0..p.len() {
            m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g[i];
            v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p[i] -= state.lr * m_hat / (v_hat.sqrt() + state.eps);
        }
    }
    Ok(())
}

impl Optimizer for AdamState {
    fn step(&mut self, params: Vec<&mut [f64]>, grads: &[&[f64]]) -> Result<()> {
        adam_step(params, grads, self)
    }

    fn learning_rate(&self) -> f64 {
        self.lr
    }

    fn set_learning_rate(&mut self, lr: f64) {
        self.lr = lr;
    }
}

/// SGD with heavy-ball momentum and L2 weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct SgdState {
    pub velocity: Vec<Vec<f64>>,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl SgdState {
    pub fn new(param_lens: &[usize], lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Self {
            velocity: param_lens.iter().map(|&n| vec![0.0; n]).collect(),
            lr,
            momentum,
            weight_decay,
        }
    }
}

impl Optimizer for SgdState {
    fn step(&mut self, params: Vec<&mut [f64]>, grads: &[&[f64]]) -> Result<()> {
        check_shapes(&self.velocity, &params, grads)?;
        for ((p, g), vel) in params.into_iter().zip(grads).zip(self.velocity.iter_mut()) {
            for i in 0..p.len() {
                let d = g[i] + self.weight_decay * p[i];
                vel[i] = self.momentum * vel[i] + d;
                p[i] -= self.lr * vel[i];
            }
        }
        Ok(())
    }

    fn learning_rate(&self) -> f64 {
        self.lr
    }

    fn set_learning_rate(&mut self, lr: f64) {
        self.lr = lr;
    }
}

/// Applies one optimizer step to `net` using `grads`.
pub fn apply_update(net: &mut MlpNetwork, grads: &Gradients, opt: &mut dyn Optimizer) -> Result<()> {
    let g = grads.slices();
    opt.step(net.param_slices_mut(), &g)
}
