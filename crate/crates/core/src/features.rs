//! Feature extractors `h = φ(x)` with `dim h = dim x`.
//!
//! [`SparseAutoencoder`] is a dense encoder/decoder pair with a label-prediction
//! head on the code, trained on reconstruction + label regression + L1 sparsity.
//! Its rectified encoder makes every feature nonnegative, so the L1 term is the
//! feature mean. [`ClassifierExtractor`] is the class-label counterpart: an
//! equal-width rectified body under a softmax head trained with cross-entropy.

use std::path::Path;

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{network_from_tensors, network_tensors, Checkpoint, NetworkMeta, Tensor};
use crate::nn::{apply_update, AdamState, FinalActivation, Gradients, MlpNetwork, Mode, Optimizer, SgdState};
use crate::{Error, Result};

/// Maps inputs to equal-dimension features.
pub trait FeatureExtractor: Send + Sync {
    fn input_dim(&self) -> usize;

    fn extract_batch(&self, x: ArrayView2<f64>) -> Result<Array2<f64>>;

    fn extract(&self, x: &[f64]) -> Result<Vec<f64>> {
        let v = row_view(x)?;
        Ok(self.extract_batch(v)?.row(0).to_vec())
    }
}

/// Predicts a normalized label from an input.
pub trait LabelPredictor: Send + Sync {
    fn predict_batch(&self, x: ArrayView2<f64>) -> Result<Vec<f64>>;

    fn predict(&self, x: &[f64]) -> Result<f64> {
        Ok(self.predict_batch(row_view(x)?)?[0])
    }
}

fn row_view(x: &[f64]) -> Result<ArrayView2<'_, f64>> {
    ArrayView2::from_shape((1, x.len()), x).map_err(|e| Error::contract(e.to_string()))
}

fn check_width(x: ArrayView2<f64>, dim: usize) -> Result<()> {
    if x.ncols() != dim {
        return Err(Error::contract(format!(
            "input has {} columns, extractor expects {dim}",
            x.ncols()
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdentityExtractor {
    pub dim: usize,
}

impl FeatureExtractor for IdentityExtractor {
    fn input_dim(&self) -> usize {
        self.dim
    }

    fn extract_batch(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        check_width(x, self.dim)?;
        Ok(x.to_owned())
    }
}

/// Per-sample SAE loss `‖x - x̂‖²/D + (y - ŷ)² + λ′ ‖h‖₁/D`.
pub fn sae_loss(x: &[f64], x_hat: &[f64], y: f64, y_hat: f64, h: &[f64], lambda_prime: f64) -> Result<f64> {
    let d = x.len();
    if d == 0 || x_hat.len() != d || h.len() != d {
        return Err(Error::contract(format!(
            "sae_loss needs equal nonzero lengths, got x {d}, x_hat {}, h {}",
            x_hat.len(),
            h.len()
        )));
    }
    let rec: f64 = x.iter().zip(x_hat).map(|(a, b)| (a - b).powi(2)).sum();
    let l1: f64 = h.iter().map(|v| v.abs()).sum();
    Ok(rec / d as f64 + (y - y_hat).powi(2) + lambda_prime * l1 / d as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SaeMeta {
    kind: String,
    input_dim: usize,
    encoder: NetworkMeta,
    decoder: NetworkMeta,
    predictor: NetworkMeta,
}

/// Per-coordinate affine input map `(x - shift) / scale`, the analogue of
/// normalizing image pixels before they enter the network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputScaling {
    pub shift: Vec<f64>,
    pub scale: Vec<f64>,
}

impl InputScaling {
    pub fn identity(dim: usize) -> Self {
        Self {
            shift: vec![0.0; dim],
            scale: vec![1.0; dim],
        }
    }

    /// Column means and population standard deviations; constant columns keep scale 1.
    pub fn fit(x: ArrayView2<f64>) -> Result<Self> {
        if x.nrows() == 0 {
            return Err(Error::contract("cannot fit input scaling on zero rows"));
        }
        let mut shift = Vec::with_capacity(x.ncols());
        let mut scale = Vec::with_capacity(x.ncols());
        for col in x.columns() {
            let v = col.to_vec();
            let sd = crate::stats::population_sd(&v);
            shift.push(crate::stats::mean(&v));
            scale.push(if sd > 0.0 && sd.is_finite() { sd } else { 1.0 });
        }
        Self::new(shift, scale)
    }

    pub fn new(shift: Vec<f64>, scale: Vec<f64>) -> Result<Self> {
        if shift.len() != scale.len()
            || shift.iter().any(|v| !v.is_finite())
            || scale.iter().any(|v| !(v.is_finite() && *v > 0.0))
        {
            return Err(Error::contract(
                "input scaling needs finite shifts and positive scales",
            ));
        }
        Ok(Self { shift, scale })
    }

    pub fn dim(&self) -> usize {
        self.shift.len()
    }

    pub fn apply(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut z = x.to_owned();
        for (j, mut col) in z.columns_mut().into_iter().enumerate() {
            let (a, b) = (self.shift[j], self.scale[j]);
            col.mapv_inplace(|v| (v - a) / b);
        }
        z
    }

    pub fn invert(&self, z: ArrayView2<f64>) -> Array2<f64> {
        let mut x = z.to_owned();
        for (j, mut col) in x.columns_mut().into_iter().enumerate() {
            let (a, b) = (self.shift[j], self.scale[j]);
            col.mapv_inplace(|v| v * b + a);
        }
        x
    }
}

/// Dense SAE: encoder `D -> 4D -> D` (rectified), decoder `D -> 4D -> D`,
/// predictor `D -> 64 -> 1` (rectified). Inputs pass through `input` first and
/// the decoder reconstructs the scaled input.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseAutoencoder {
    pub input: InputScaling,
    pub encoder: MlpNetwork,
    pub decoder: MlpNetwork,
    pub predictor: MlpNetwork,
}

/// Gradients of the batch SAE loss for each sub-network.
#[derive(Debug, Clone)]
pub struct SaeGradients {
    pub encoder: Gradients,
    pub decoder: Gradients,
    pub predictor: Gradients,
}

/// Batch SAE loss split into its parts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SaeLossParts {
    pub total: f64,
    pub reconstruction: f64,
    pub label: f64,
    pub sparsity: f64,
}

impl SparseAutoencoder {
    pub fn init(dim: usize, seed: u64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::contract("SAE input dimension must be positive"));
        }
        let mut rng = crate::seed::derive_rng(seed, "sae-init", None);
        let wide = 4 * dim;
        Ok(Self {
            input: InputScaling::identity(dim),
            encoder: MlpNetwork::new(&[dim, wide, dim], None, 0.0, FinalActivation::NonNeg, &mut rng)?,
            decoder: MlpNetwork::new(&[dim, wide, dim], None, 0.0, FinalActivation::Identity, &mut rng)?,
            predictor: MlpNetwork::new(&[dim, 64, 1], None, 0.0, FinalActivation::NonNeg, &mut rng)?,
        })
    }

    pub fn from_parts(encoder: MlpNetwork, decoder: MlpNetwork, predictor: MlpNetwork) -> Result<Self> {
        let d = encoder.input_dim();
        if encoder.output_dim() != d {
            return Err(Error::contract("SAE encoder must preserve dimension"));
        }
        if encoder.final_activation() != FinalActivation::NonNeg
            || predictor.final_activation() != FinalActivation::NonNeg
        {
            return Err(Error::contract(
                "SAE encoder and predictor must end in a rectifier",
            ));
        }
        if decoder.input_dim() != d || decoder.output_dim() != d {
            return Err(Error::contract("SAE decoder must map D -> D"));
        }
        if predictor.input_dim() != d || predictor.output_dim() != 1 {
            return Err(Error::contract("SAE predictor must map D -> 1"));
        }
        Ok(Self {
            input: InputScaling::identity(d),
            encoder,
            decoder,
            predictor,
        })
    }

    pub fn with_input_scaling(mut self, input: InputScaling) -> Result<Self> {
        if input.dim() != self.dim() {
            return Err(Error::contract("input scaling dimension differs from the SAE"));
        }
        self.input = input;
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.encoder.input_dim()
    }

    /// Reconstruction mapped back to input units.
    pub fn reconstruct(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        let h = self.extract_batch(x)?;
        Ok(self.input.invert(self.decoder.predict(h.view())?.view()))
    }

    /// Batch loss and gradients; reconstruction error is measured on the scaled
    /// input. All three networks are dropout-free, so the forward pass is
    /// deterministic.
    pub fn loss_and_grads(
        &self,
        x: ArrayView2<f64>,
        y: &[f64],
        lambda_prime: f64,
    ) -> Result<(SaeLossParts, SaeGradients)> {
        check_width(x, self.dim())?;
        if x.nrows() != y.len() || y.is_empty() {
            return Err(Error::contract(format!(
                "{} inputs but {} labels",
                x.nrows(),
                y.len()
            )));
        }
        let b = y.len() as f64;
        let d = self.dim() as f64;
        let mut none = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let x = self.input.apply(x);
        let (h, enc_tape) = self.encoder.forward_batch(x.view(), Mode::Eval, &mut none)?;
        let (x_hat, dec_tape) = self.decoder.forward_batch(h.view(), Mode::Eval, &mut none)?;
        let (y_hat, pred_tape) = self.predictor.forward_batch(h.view(), Mode::Eval, &mut none)?;

        let diff = &x_hat - &x;
        let reconstruction = diff.iter().map(|v| v * v).sum::<f64>() / (d * b);
        let label = y
            .iter()
            .zip(y_hat.column(0))
            .map(|(a, p)| (a - p).powi(2))
            .sum::<f64>()
            / b;
        let sparsity = lambda_prime * h.iter().map(|v| v.abs()).sum::<f64>() / (d * b);
        let total = reconstruction + label + sparsity;
        if !total.is_finite() {
            return Err(Error::NonFinite("SAE loss".into()));
        }

        let dec_out = diff.mapv(|v| 2.0 * v / (d * b));
        let (dec_grads, mut h_grad) = self.decoder.backward(&dec_tape, dec_out.view())?;
        let mut pred_out = y_hat.clone();
        pred_out
            .column_mut(0)
            .iter_mut()
            .zip(y)
            .for_each(|(p, t)| *p = 2.0 * (*p - t) / b);
        let (pred_grads, h_grad_pred) = self.predictor.backward(&pred_tape, pred_out.view())?;
        h_grad += &h_grad_pred;
        h_grad.zip_mut_with(&h, |g, &hv| {
            if hv > 0.0 {
                *g += lambda_prime / (d * b);
            }
        });
        let (enc_grads, _) = self.encoder.backward(&enc_tape, h_grad.view())?;
        Ok((
            SaeLossParts {
                total,
                reconstruction,
                label,
                sparsity,
            },
            SaeGradients {
                encoder: enc_grads,
                decoder: dec_grads,
                predictor: pred_grads,
            },
        ))
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let meta = SaeMeta {
            kind: "sae".into(),
            input_dim: self.dim(),
            encoder: NetworkMeta::of(&self.encoder),
            decoder: NetworkMeta::of(&self.decoder),
            predictor: NetworkMeta::of(&self.predictor),
        };
        let d = self.dim();
        let mut tensors = vec![
            Tensor {
                name: "input.shift".into(),
                dims: vec![d],
                data: self.input.shift.clone(),
            },
            Tensor {
                name: "input.scale".into(),
                dims: vec![d],
                data: self.input.scale.clone(),
            },
        ];
        tensors.extend(network_tensors("encoder", &self.encoder));
        tensors.extend(network_tensors("decoder", &self.decoder));
        tensors.extend(network_tensors("predictor", &self.predictor));
        Ok(Checkpoint {
            tensors,
            metadata: serde_json::to_value(meta)?,
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let meta: SaeMeta = serde_json::from_value(ckpt.metadata.clone())
            .map_err(|e| Error::Checkpoint(format!("SAE metadata: {e}")))?;
        if meta.kind != "sae" {
            return Err(Error::Mismatch(format!(
                "expected an sae checkpoint, found `{}`",
                meta.kind
            )));
        }
        let sae = Self::from_parts(
            network_from_tensors(ckpt, "encoder", &meta.encoder)?,
            network_from_tensors(ckpt, "decoder", &meta.decoder)?,
            network_from_tensors(ckpt, "predictor", &meta.predictor)?,
        )
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
        let vector = |name: &str| -> Result<Vec<f64>> { Ok(ckpt.tensor(name)?.data.clone()) };
        let input = InputScaling::new(vector("input.shift")?, vector("input.scale")?)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        let sae = sae
            .with_input_scaling(input)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        if sae.dim() != meta.input_dim {
            return Err(Error::Checkpoint(
                "SAE input_dim disagrees with its tensors".into(),
            ));
        }
        Ok(sae)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

impl FeatureExtractor for SparseAutoencoder {
    fn input_dim(&self) -> usize {
        self.dim()
    }

    fn extract_batch(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        check_width(x, self.dim())?;
        self.encoder.predict(self.input.apply(x).view())
    }
}

impl LabelPredictor for SparseAutoencoder {
    fn predict_batch(&self, x: ArrayView2<f64>) -> Result<Vec<f64>> {
        let h = self.extract_batch(x)?;
        Ok(self.predictor.predict(h.view())?.column(0).to_vec())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    /// Momentum SGD with weight decay.
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SaeTrainConfig {
    pub lambda_prime: f64,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    /// The learning rate is multiplied by `lr_decay_factor` every `lr_decay_every` epochs.
    pub lr_decay_every: usize,
    pub lr_decay_factor: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for SaeTrainConfig {
    fn default() -> Self {
        Self {
            lambda_prime: 1e-3,
            optimizer: OptimizerKind::Sgd,
            lr: 0.01,
            lr_decay_every: 50,
            lr_decay_factor: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 256,
            epochs: 200,
            seed: 0,
        }
    }
}

impl SaeTrainConfig {
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if self.lr_decay_every == 0 {
            return self.lr;
        }
        self.lr * self.lr_decay_factor.powi((epoch / self.lr_decay_every) as i32)
    }

    fn optimizers(&self, sae: &SparseAutoencoder) -> Vec<Box<dyn Optimizer>> {
        [&sae.encoder, &sae.decoder, &sae.predictor]
            .into_iter()
            .map(|net| -> Box<dyn Optimizer> {
                match self.optimizer {
                    OptimizerKind::Sgd => Box::new(SgdState::new(
                        &net.param_lens(),
                        self.lr,
                        self.momentum,
                        self.weight_decay,
                    )),
                    OptimizerKind::Adam => Box::new(AdamState::for_network(net, self.lr)),
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SaeLossRecord {
    pub iteration: usize,
    pub epoch: usize,
    pub loss: SaeLossParts,
    pub lr: f64,
}

/// Trains a freshly initialized SAE (seeded by `cfg.seed`).
pub fn train_sae(
    x: ArrayView2<f64>,
    y: &[f64],
    cfg: &SaeTrainConfig,
) -> Result<(SparseAutoencoder, Vec<SaeLossRecord>)> {
    let mut sae = SparseAutoencoder::init(x.ncols(), cfg.seed)?.with_input_scaling(InputScaling::fit(x)?)?;
    let z = sae.input.apply(x);
    let h = activate_rectified_units(&mut sae.encoder, z.view(), None);
    activate_rectified_units(&mut sae.decoder, h.view(), None);
    if y.len() == x.nrows() {
        activate_rectified_units(&mut sae.predictor, h.view(), Some(y));
    }
    train_sae_from(sae, x, y, cfg)
}

/// Data-dependent init: shifts every rectified unit so that it is active on
/// 90% of `x`. With a 2-D code a unit that starts dead on all of the data never
/// receives gradient, which the zero-bias init makes common. With `target`, the
/// single output unit is instead matched to the target's mean and spread, so
/// the first steps do not overshoot and kill it. Returns the network output on
/// `x`. Only for networks without normalization.
fn activate_rectified_units(net: &mut MlpNetwork, x: ArrayView2<f64>, target: Option<&[f64]>) -> Array2<f64> {
    let n_layers = net.layers().len();
    let rectified_output = net.final_activation() == FinalActivation::NonNeg;
    let mut a = x.to_owned();
    for (k, layer) in net.layers_mut().iter_mut().enumerate() {
        let mut z = a.dot(&layer.weights.t()) + &layer.bias;
        let last = k + 1 == n_layers;
        if let (true, Some(t), 1) = (last, target, z.ncols()) {
            let col = z.column(0).to_vec();
            let sd = crate::stats::population_sd(&col);
            let gain = if sd > 0.0 {
                crate::stats::population_sd(t) / sd
            } else {
                1.0
            };
            layer.weights.mapv_inplace(|w| w * gain);
            layer.bias[0] = crate::stats::mean(t) - gain * (crate::stats::mean(&col) - layer.bias[0]);
            z = a.dot(&layer.weights.t()) + &layer.bias;
            if rectified_output {
                z.mapv_inplace(|v| v.max(0.0));
            }
        } else if !last || rectified_output {
            for (j, mut col) in z.columns_mut().into_iter().enumerate() {
                let q = crate::stats::quantile(&col.to_vec(), 0.1);
                layer.bias[j] -= q;
                col -= q;
            }
            z.mapv_inplace(|v| v.max(0.0));
        }
        a = z;
    }
    a
}

pub fn train_sae_from(
    mut sae: SparseAutoencoder,
    x: ArrayView2<f64>,
    y: &[f64],
    cfg: &SaeTrainConfig,
) -> Result<(SparseAutoencoder, Vec<SaeLossRecord>)> {
    check_width(x, sae.dim())?;
    if x.nrows() != y.len() || y.is_empty() {
        return Err(Error::contract(
            "SAE training needs one label per nonempty input row",
        ));
    }
    if !(cfg.lambda_prime >= 0.0) || cfg.batch_size == 0 {
        return Err(Error::contract(
            "SAE config needs lambda_prime >= 0 and a positive batch",
        ));
    }
    if y.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::contract("SAE labels must be normalized to [0, 1]"));
    }
    let mut rng = crate::seed::derive_rng(cfg.seed, "sae-train", None);
    let mut opts = cfg.optimizers(&sae);
    let mut order: Vec<usize> = (0..y.len()).collect();
    let m = cfg.batch_size.min(y.len());
    let mut history = Vec::new();
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        opts.iter_mut().for_each(|o| o.set_learning_rate(lr));
        order.shuffle(&mut rng);
        for chunk in order.chunks(m) {
            let iteration = history.len();
            let xb = x.select(Axis(0), chunk);
            let yb: Vec<f64> = chunk.iter().map(|&i| y[i]).collect();
            let (loss, g) = sae
                .loss_and_grads(xb.view(), &yb, cfg.lambda_prime)
                .map_err(|e| match e {
                    Error::NonFinite(w) => Error::NonFinite(format!("{w} at iteration {iteration}")),
                    other => other,
                })?;
            apply_update(&mut sae.encoder, &g.encoder, opts[0].as_mut())?;
            apply_update(&mut sae.decoder, &g.decoder, opts[1].as_mut())?;
            apply_update(&mut sae.predictor, &g.predictor, opts[2].as_mut())?;
            history.push(SaeLossRecord {
                iteration,
                epoch,
                loss,
                lr,
            });
        }
    }
    Ok((sae, history))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ClassifierMeta {
    kind: String,
    input_dim: usize,
    num_classes: usize,
    body: NetworkMeta,
    head: NetworkMeta,
}

/// Equal-width rectified body `D -> 4D -> D` under a linear softmax head.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierExtractor {
    pub body: MlpNetwork,
    pub head: MlpNetwork,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierTrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for ClassifierTrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 256,
            epochs: 30,
            seed: 0,
        }
    }
}

impl ClassifierExtractor {
    pub fn init(dim: usize, num_classes: usize, seed: u64) -> Result<Self> {
        if dim == 0 || num_classes < 2 {
            return Err(Error::contract(
                "classifier needs dim > 0 and at least two classes",
            ));
        }
        let mut rng = crate::seed::derive_rng(seed, "classifier-init", None);
        Ok(Self {
            body: MlpNetwork::new(&[dim, 4 * dim, dim], None, 0.0, FinalActivation::NonNeg, &mut rng)?,
            head: MlpNetwork::new(
                &[dim, num_classes],
                None,
                0.0,
                FinalActivation::Identity,
                &mut rng,
            )?,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.head.output_dim()
    }

    /// Mean cross-entropy and gradients for a batch of integer class labels.
    pub fn loss_and_grads(&self, x: ArrayView2<f64>, classes: &[f64]) -> Result<(f64, Gradients, Gradients)> {
        check_width(x, self.body.input_dim())?;
        let c = self.num_classes();
        if classes.len() != x.nrows() || classes.is_empty() {
            return Err(Error::contract("one class label per nonempty input row"));
        }
        let mut none = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let (h, body_tape) = self.body.forward_batch(x, Mode::Eval, &mut none)?;
        let (logits, head_tape) = self.head.forward_batch(h.view(), Mode::Eval, &mut none)?;
        let b = classes.len() as f64;
        let mut grad = Array2::zeros(logits.raw_dim());
        let mut loss = 0.0;
        for (i, &k) in classes.iter().enumerate() {
            if k.fract() != 0.0 || k < 0.0 || k >= c as f64 {
                return Err(Error::contract(format!("class label {k} outside 0..{c}")));
            }
            let row = logits.row(i);
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
            loss += mx + z.ln() - row[k as usize];
            for j in 0..c {
                let p = (row[j] - mx).exp() / z;
                grad[[i, j]] = (p - if j == k as usize { 1.0 } else { 0.0 }) / b;
            }
        }
        let (head_g, h_grad) = self.head.backward(&head_tape, grad.view())?;
        let (body_g, _) = self.body.backward(&body_tape, h_grad.view())?;
        Ok((loss / b, body_g, head_g))
    }

    pub fn predict_classes(&self, x: ArrayView2<f64>) -> Result<Vec<usize>> {
        let h = self.extract_batch(x)?;
        let logits = self.head.predict(h.view())?;
        Ok(logits
            .rows()
            .into_iter()
            .map(|r| {
                r.iter()
                    .enumerate()
                    .max_by(|a, b| a.1.total_cmp(b.1))
                    .map(|(j, _)| j)
                    .unwrap_or(0)
            })
            .collect())
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let meta = ClassifierMeta {
            kind: "classifier".into(),
            input_dim: self.body.input_dim(),
            num_classes: self.num_classes(),
            body: NetworkMeta::of(&self.body),
            head: NetworkMeta::of(&self.head),
        };
        let mut tensors = network_tensors("body", &self.body);
        tensors.extend(network_tensors("head", &self.head));
        Ok(Checkpoint {
            tensors,
            metadata: serde_json::to_value(meta)?,
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let meta: ClassifierMeta = serde_json::from_value(ckpt.metadata.clone())
            .map_err(|e| Error::Checkpoint(format!("classifier metadata: {e}")))?;
        if meta.kind != "classifier" {
            return Err(Error::Mismatch(format!(
                "expected a classifier checkpoint, found `{}`",
                meta.kind
            )));
        }
        Ok(Self {
            body: network_from_tensors(ckpt, "body", &meta.body)?,
            head: network_from_tensors(ckpt, "head", &meta.head)?,
        })
    }
}

impl FeatureExtractor for ClassifierExtractor {
    fn input_dim(&self) -> usize {
        self.body.input_dim()
    }

    fn extract_batch(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        check_width(x, self.input_dim())?;
        self.body.predict(x)
    }
}

pub fn train_classifier(
    x: ArrayView2<f64>,
    classes: &[f64],
    num_classes: usize,
    cfg: &ClassifierTrainConfig,
) -> Result<(ClassifierExtractor, Vec<f64>)> {
    let mut clf = ClassifierExtractor::init(x.ncols(), num_classes, cfg.seed)?;
    let mut rng = crate::seed::derive_rng(cfg.seed, "classifier-train", None);
    let mut opt_body = AdamState::for_network(&clf.body, cfg.lr);
    let mut opt_head = AdamState::for_network(&clf.head, cfg.lr);
    let mut order: Vec<usize> = (0..classes.len()).collect();
    let m = cfg.batch_size.max(1).min(classes.len().max(1));
    let mut history = Vec::new();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(m) {
            let xb = x.select(Axis(0), chunk);
            let cb: Vec<f64> = chunk.iter().map(|&i| classes[i]).collect();
            let (loss, gb, gh) = clf.loss_and_grads(xb.view(), &cb)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!(
                    "classifier loss at iteration {}",
                    history.len()
                )));
            }
            apply_update(&mut clf.body, &gb, &mut opt_body)?;
            apply_update(&mut clf.head, &gh, &mut opt_head)?;
            history.push(loss);
        }
    }
    Ok((clf, history))
}

/// Any of the supported extractors behind one type.
#[derive(Debug, Clone, PartialEq)]
pub enum Extractor {
    Identity(IdentityExtractor),
    Sae(SparseAutoencoder),
    Classifier(ClassifierExtractor),
}

impl FeatureExtractor for Extractor {
    fn input_dim(&self) -> usize {
        match self {
            Self::Identity(e) => e.input_dim(),
            Self::Sae(e) => e.input_dim(),
            Self::Classifier(e) => e.input_dim(),
        }
    }

    fn extract_batch(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        match self {
            Self::Identity(e) => e.extract_batch(x),
            Self::Sae(e) => e.extract_batch(x),
            Self::Classifier(e) => e.extract_batch(x),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sae_loss_examples() {
        assert_eq!(
            sae_loss(&[1.0, 2.0], &[1.0, 2.0], 0.3, 0.3, &[0.0, 0.0], 1e-3).unwrap(),
            0.0
        );
        let v = sae_loss(&[0.0; 4], &[0.0; 4], 0.5, 0.5, &[1.0; 4], 1e-3).unwrap();
        assert!((v - 1e-3).abs() < 1e-15);
        assert_eq!(
            sae_loss(&[1.0, 0.0], &[0.0, 0.0], 2.0, 1.0, &[0.0, 0.0], 0.0).unwrap(),
            1.5
        );
        assert!(sae_loss(&[1.0], &[1.0, 2.0], 0.0, 0.0, &[0.0], 0.0).is_err());
    }

    #[test]
    fn identity_extractor_passes_through() {
        let e = IdentityExtractor { dim: 2 };
        assert_eq!(e.extract(&[0.2, -0.7]).unwrap(), vec![0.2, -0.7]);
        assert!(e.extract(&[1.0]).is_err());
    }

    #[test]
    fn sae_checkpoint_round_trip() {
        let sae = SparseAutoencoder::init(3, 9).unwrap();
        let back = SparseAutoencoder::from_checkpoint(&sae.to_checkpoint().unwrap()).unwrap();
        assert_eq!(back, sae);
    }

    #[test]
    fn batch_loss_matches_per_sample_mean() {
        let sae = SparseAutoencoder::init(3, 2).unwrap();
        let x = ndarray::array![[0.1, 0.5, -0.3], [1.0, 0.0, 0.2]];
        let y = [0.2, 0.9];
        let (parts, _) = sae.loss_and_grads(x.view(), &y, 1e-2).unwrap();
        let h = sae.extract_batch(x.view()).unwrap();
        let xh = sae.reconstruct(x.view()).unwrap();
        let yh = sae.predict_batch(x.view()).unwrap();
        let per: f64 = (0..2)
            .map(|i| {
                sae_loss(
                    x.row(i).as_slice().unwrap(),
                    xh.row(i).as_slice().unwrap(),
                    y[i],
                    yh[i],
                    h.row(i).as_slice().unwrap(),
                    1e-2,
                )
                .unwrap()
            })
            .sum::<f64>()
            / 2.0;
        assert!((parts.total - per).abs() < 1e-12);
    }
}
