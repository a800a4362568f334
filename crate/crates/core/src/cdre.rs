//! Conditional density-ratio estimation in feature space.
//!
//! A [`RatioModel`] concatenates a feature vector `h` with an embedding of its
//! label `y` and maps the pair through a rectified MLP to `ψ(h|y) >= 0`. It is
//! trained by minimizing the conditional Softplus loss plus `λ (mean ψ_fake - 1)²`,
//! whose population minimizer is `q_r(h|y) / q_g(h|y)`.

use std::f64::consts::PI;
use std::path::Path;

use ndarray::{s, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{network_from_tensors, network_tensors, Checkpoint, NetworkMeta};
use crate::nn::{apply_update, sigmoid, softplus, AdamState, FinalActivation, MlpNetwork, Mode};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum ConditionEmbedding {
    OneHot {
        num_classes: usize,
    },
    /// `[sin(s_k π y), cos(s_k π y)]` for each frequency scale `s_k`; `y ∈ [0, 1]`.
    Continuous {
        scales: Vec<f64>,
    },
}

impl ConditionEmbedding {
    /// Eight octave frequencies `1, 2, ..., 128`, sixteen features.
    pub fn octaves() -> Self {
        Self::Continuous {
            scales: (0..8).map(|k| f64::from(1u32 << k)).collect(),
        }
    }

    pub fn width(&self) -> usize {
        match self {
            Self::OneHot { num_classes } => *num_classes,
            Self::Continuous { scales } => 2 * scales.len(),
        }
    }

    pub fn embed_into(&self, y: f64, out: &mut [f64]) -> Result<()> {
        match self {
            Self::OneHot { num_classes } => {
                if y.fract() != 0.0 || y < 0.0 || y >= *num_classes as f64 {
                    return Err(Error::contract(format!(
                        "class label {y} outside 0..{num_classes}"
                    )));
                }
                out.fill(0.0);
                out[y as usize] = 1.0;
            }
            Self::Continuous { scales } => {
                if !(0.0..=1.0).contains(&y) {
                    return Err(Error::contract(format!("normalized label {y} outside [0, 1]")));
                }
                for (k, s) in scales.iter().enumerate() {
                    let a = s * PI * y;
                    out[2 * k] = a.sin();
                    out[2 * k + 1] = a.cos();
                }
            }
        }
        Ok(())
    }

    pub fn embed(&self, y: f64) -> Result<Vec<f64>> {
        let mut v = vec![0.0; self.width()];
        self.embed_into(y, &mut v)?;
        Ok(v)
    }
}

/// Affine map of raw labels onto `[0, 1]` fitted to the training labels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelNorm {
    pub min: f64,
    pub max: f64,
}

impl LabelNorm {
    pub const IDENTITY: Self = Self { min: 0.0, max: 1.0 };

    pub fn fit(labels: &[f64]) -> Result<Self> {
        let min = labels.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = labels.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if !(min.is_finite() && max.is_finite()) || max <= min {
            return Err(Error::contract(
                "label normalization needs two distinct finite labels",
            ));
        }
        Ok(Self { min, max })
    }

    pub fn apply(&self, y: f64) -> f64 {
        (y - self.min) / (self.max - self.min)
    }

    pub fn invert(&self, u: f64) -> f64 {
        self.min + u * (self.max - self.min)
    }
}

/// Hidden widths, normalization and dropout of the ratio MLP.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioArchitecture {
    pub hidden: Vec<usize>,
    pub norm_groups: Option<usize>,
    pub dropout: f64,
}

impl RatioArchitecture {
    /// Full-width MLP-5: 2048, 1024, 512, 256, 128.
    pub fn mlp5() -> Self {
        Self {
            hidden: vec![2048, 1024, 512, 256, 128],
            norm_groups: Some(8),
            dropout: 0.5,
        }
    }

    /// Five hidden blocks sized for low-dimensional features on a CPU.
    pub fn compact() -> Self {
        Self {
            hidden: vec![128, 128, 64, 64, 32],
            norm_groups: Some(8),
            dropout: 0.5,
        }
    }
}

impl Default for RatioArchitecture {
    fn default() -> Self {
        Self::compact()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RatioMeta {
    kind: String,
    feature_dim: usize,
    embedding: ConditionEmbedding,
    label_norm: LabelNorm,
    network: NetworkMeta,
}

/// `ψ(h|y)`: label embedding concatenated with the features at the input, rectified output.
#[derive(Debug, Clone, PartialEq)]
pub struct RatioModel {
    feature_dim: usize,
    embedding: ConditionEmbedding,
    label_norm: LabelNorm,
    net: MlpNetwork,
}

impl RatioModel {
    pub fn new<R: rand::Rng + ?Sized>(
        feature_dim: usize,
        embedding: ConditionEmbedding,
        label_norm: LabelNorm,
        arch: &RatioArchitecture,
        rng: &mut R,
    ) -> Result<Self> {
        let mut dims = vec![feature_dim + embedding.width()];
        dims.extend_from_slice(&arch.hidden);
        dims.push(1);
        let net = MlpNetwork::new(
            &dims,
            arch.norm_groups,
            arch.dropout,
            FinalActivation::NonNeg,
            rng,
        )?;
        Self::from_network(feature_dim, embedding, label_norm, net)
    }

    pub fn from_network(
        feature_dim: usize,
        embedding: ConditionEmbedding,
        label_norm: LabelNorm,
        net: MlpNetwork,
    ) -> Result<Self> {
        if net.input_dim() != feature_dim + embedding.width() || net.output_dim() != 1 {
            return Err(Error::contract(format!(
                "ratio network maps {} -> {}, expected {} -> 1",
                net.input_dim(),
                net.output_dim(),
                feature_dim + embedding.width()
            )));
        }
        if net.final_activation() != FinalActivation::NonNeg {
            return Err(Error::contract("ratio network must end in a rectifier"));
        }
        Ok(Self {
            feature_dim,
            embedding,
            label_norm,
            net,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn embedding(&self) -> &ConditionEmbedding {
        &self.embedding
    }

    pub fn label_norm(&self) -> LabelNorm {
        self.label_norm
    }

    pub fn network(&self) -> &MlpNetwork {
        &self.net
    }

    pub fn network_mut(&mut self) -> &mut MlpNetwork {
        &mut self.net
    }

    fn embed_label(&self, y: f64) -> Result<Vec<f64>> {
        match self.embedding {
            ConditionEmbedding::OneHot { .. } => self.embedding.embed(y),
            ConditionEmbedding::Continuous { .. } => {
                let u = self.label_norm.apply(y);
                // Absorb rounding at the ends of the training range.
                let u = if (-1e-12..0.0).contains(&u) {
                    0.0
                } else if (1.0..1.0 + 1e-12).contains(&u) {
                    1.0
                } else {
                    u
                };
                self.embedding.embed(u)
            }
        }
    }

    /// Network input rows `[h, embed(y)]`.
    pub fn inputs(&self, features: ArrayView2<f64>, labels: &[f64]) -> Result<Array2<f64>> {
        if features.ncols() != self.feature_dim {
            return Err(Error::contract(format!(
                "features have {} columns, model expects {}",
                features.ncols(),
                self.feature_dim
            )));
        }
        if features.nrows() != labels.len() {
            return Err(Error::contract(format!(
                "{} feature rows but {} labels",
                features.nrows(),
                labels.len()
            )));
        }
        let mut x = Array2::zeros((labels.len(), self.net.input_dim()));
        x.slice_mut(s![.., ..self.feature_dim]).assign(&features);
        // Consecutive rows usually share a label, so reuse the last embedding.
        let mut cached: Option<(f64, Vec<f64>)> = None;
        for (i, &y) in labels.iter().enumerate() {
            let e = match &cached {
                Some((cy, e)) if cy.to_bits() == y.to_bits() => e.clone(),
                _ => {
                    let e = self.embed_label(y)?;
                    cached = Some((y, e.clone()));
                    e
                }
            };
            x.row_mut(i)
                .slice_mut(s![self.feature_dim..])
                .iter_mut()
                .zip(&e)
                .for_each(|(d, v)| *d = *v);
        }
        Ok(x)
    }

    /// Eval-mode scores for a batch of `(h, y)` pairs.
    pub fn score_batch(&self, features: ArrayView2<f64>, labels: &[f64]) -> Result<Vec<f64>> {
        let x = self.inputs(features, labels)?;
        Ok(self.net.predict(x.view())?.column(0).to_vec())
    }

    pub fn score(&self, h: &[f64], y: f64) -> Result<f64> {
        let v = ArrayView2::from_shape((1, h.len()), h).map_err(|e| Error::contract(e.to_string()))?;
        Ok(self.score_batch(v, &[y])?[0])
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let meta = RatioMeta {
            kind: "ratio_model".into(),
            feature_dim: self.feature_dim,
            embedding: self.embedding.clone(),
            label_norm: self.label_norm,
            network: NetworkMeta::of(&self.net),
        };
        Ok(Checkpoint {
            tensors: network_tensors("ratio", &self.net),
            metadata: serde_json::to_value(meta)?,
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let meta: RatioMeta = serde_json::from_value(ckpt.metadata.clone())
            .map_err(|e| Error::Checkpoint(format!("ratio model metadata: {e}")))?;
        if meta.kind != "ratio_model" {
            return Err(Error::Mismatch(format!(
                "expected a ratio_model checkpoint, found `{}`",
                meta.kind
            )));
        }
        let net = network_from_tensors(ckpt, "ratio", &meta.network)?;
        Self::from_network(meta.feature_dim, meta.embedding, meta.label_norm, net)
            .map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

fn nonempty(xs: &[f64], what: &str) -> Result<()> {
    if xs.is_empty() {
        Err(Error::contract(format!("{what} must be nonempty")))
    } else {
        Ok(())
    }
}

/// Empirical conditional Softplus loss.
pub fn csp_loss(fake_scores: &[f64], real_scores: &[f64]) -> Result<f64> {
    nonempty(fake_scores, "fake scores")?;
    nonempty(real_scores, "real scores")?;
    let fake = fake_scores
        .iter()
        .map(|&s| sigmoid(s) * s - softplus(s))
        .sum::<f64>()
        / fake_scores.len() as f64;
    let real = real_scores.iter().map(|&s| sigmoid(s)).sum::<f64>() / real_scores.len() as f64;
    Ok(fake - real)
}

/// `(mean(fake_scores) - 1)²`.
pub fn penalty(fake_scores: &[f64]) -> Result<f64> {
    nonempty(fake_scores, "fake scores")?;
    let m = fake_scores.iter().sum::<f64>() / fake_scores.len() as f64;
    Ok((m - 1.0).powi(2))
}

/// Value and score gradients of `csp_loss + lambda * penalty`.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveGrad {
    pub csp: f64,
    pub penalty: f64,
    pub value: f64,
    pub fake: Vec<f64>,
    pub real: Vec<f64>,
}

pub fn objective_grad(fake_scores: &[f64], real_scores: &[f64], lambda: f64) -> Result<ObjectiveGrad> {
    let csp = csp_loss(fake_scores, real_scores)?;
    let pen = penalty(fake_scores)?;
    let ng = fake_scores.len() as f64;
    let nr = real_scores.len() as f64;
    let mean = fake_scores.iter().sum::<f64>() / ng;
    let pen_grad = lambda * 2.0 * (mean - 1.0) / ng;
    let fake = fake_scores
        .iter()
        .map(|&s| {
            let p = sigmoid(s);
            p * (1.0 - p) * s / ng + pen_grad
        })
        .collect();
    let real = real_scores
        .iter()
        .map(|&s| {
            let p = sigmoid(s);
            -p * (1.0 - p) / nr
        })
        .collect();
    Ok(ObjectiveGrad {
        csp,
        penalty: pen,
        value: csp + lambda * pen,
        fake,
        real,
    })
}

/// Labeled real features.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub features: Array2<f64>,
    pub labels: Vec<f64>,
}

impl FeatureSet {
    pub fn new(features: Array2<f64>, labels: Vec<f64>) -> Result<Self> {
        if features.nrows() != labels.len() {
            return Err(Error::contract(format!(
                "{} feature rows but {} labels",
                features.nrows(),
                labels.len()
            )));
        }
        Ok(Self { features, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }
}

/// Source of fake features conditional on labels.
pub trait FakeFeatureSource {
    fn feature_dim(&self) -> usize;
    /// One fake feature row per requested label, in order.
    fn draw(&mut self, labels: &[f64], rng: &mut dyn RngCore) -> Result<Array2<f64>>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CdreTrainConfig {
    pub lambda: f64,
    pub lr: f64,
    /// Epochs at which the learning rate is multiplied by `lr_decay_factor`.
    pub lr_decay_epochs: Vec<usize>,
    pub lr_decay_factor: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for CdreTrainConfig {
    fn default() -> Self {
        Self {
            lambda: 1e-2,
            lr: 1e-4,
            lr_decay_epochs: vec![80, 150],
            lr_decay_factor: 0.1,
            batch_size: 256,
            epochs: 200,
            seed: 0,
        }
    }
}

impl CdreTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=0.1).contains(&self.lambda) {
            return Err(Error::contract(format!(
                "lambda {} outside [0, 0.1]",
                self.lambda
            )));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::contract("learning rate must be finite and >= 0"));
        }
        if self.batch_size == 0 {
            return Err(Error::contract("batch size must be positive"));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let decays = self.lr_decay_epochs.iter().filter(|&&e| epoch >= e).count();
        self.lr * self.lr_decay_factor.powi(decays as i32)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: usize,
    pub epoch: usize,
    pub objective: f64,
    pub csp: f64,
    pub penalty: f64,
    pub lr: f64,
}

/// Minibatch training with Adam. Each iteration pairs `m` real samples with `m`
/// fresh fakes drawn at the same labels; an epoch is `⌈N_r / m⌉` iterations.
pub fn train_cdre(
    real: &FeatureSet,
    fake_source: &mut dyn FakeFeatureSource,
    mut model: RatioModel,
    cfg: &CdreTrainConfig,
) -> Result<(RatioModel, Vec<LossRecord>)> {
    cfg.validate()?;
    if real.is_empty() {
        return Err(Error::contract("real training set is empty"));
    }
    if real.dim() != model.feature_dim || fake_source.feature_dim() != model.feature_dim {
        return Err(Error::contract(format!(
            "feature dimensions differ: real {}, fake {}, model {}",
            real.dim(),
            fake_source.feature_dim(),
            model.feature_dim
        )));
    }
    let mut rng = crate::seed::derive_rng(cfg.seed, "cdre-train", None);
    let mut adam = AdamState::for_network(&model.net, cfg.lr);
    let n = real.len();
    let m = cfg.batch_size.min(n);
    let per_epoch = n.div_ceil(m);
    let mut order: Vec<usize> = (0..n).collect();
    let mut history = Vec::with_capacity(per_epoch * cfg.epochs);
    for epoch in 0..cfg.epochs {
        adam.lr = cfg.lr_at(epoch);
        order.shuffle(&mut rng);
        for chunk in order.chunks(m) {
            let iteration = history.len();
            let labels: Vec<f64> = chunk.iter().map(|&i| real.labels[i]).collect();
            let fake = fake_source.draw(&labels, &mut rng)?;
            if fake.dim() != (labels.len(), model.feature_dim) {
                return Err(Error::contract(format!(
                    "fake source returned shape {:?} for {} labels",
                    fake.dim(),
                    labels.len()
                )));
            }
            let real_rows = real.features.select(Axis(0), chunk);
            let both = ndarray::concatenate(Axis(0), &[real_rows.view(), fake.view()]).expect("same width");
            let both_labels: Vec<f64> = labels.iter().chain(&labels).copied().collect();
            let x = model.inputs(both.view(), &both_labels)?;
            let (out, tape) = model
                .net
                .forward_batch(x.view(), Mode::Train, &mut rng)
                .map_err(|e| at_iteration(e, iteration))?;
            let scores = out.column(0).to_vec();
            let (real_s, fake_s) = scores.split_at(chunk.len());
            let g = objective_grad(fake_s, real_s, cfg.lambda)?;
            if !g.value.is_finite() {
                return Err(Error::NonFinite(format!(
                    "cDRE objective at iteration {iteration}"
                )));
            }
            let out_grad =
                Array2::from_shape_vec((scores.len(), 1), g.real.iter().chain(&g.fake).copied().collect())
                    .expect("one gradient per score");
            let (grads, _) = model.net.backward(&tape, out_grad.view())?;
            apply_update(&mut model.net, &grads, &mut adam)?;
            history.push(LossRecord {
                iteration,
                epoch,
                objective: g.value,
                csp: g.csp,
                penalty: g.penalty,
                lr: adam.lr,
            });
        }
        if epoch % 10 == 0 || epoch + 1 == cfg.epochs {
            if let Some(last) = history.last() {
                log::debug!("cdre epoch {epoch}: objective {:.6}", last.objective);
            }
        }
    }
    Ok((model, history))
}

fn at_iteration(e: Error, iteration: usize) -> Error {
    match e {
        Error::NonFinite(what) => Error::NonFinite(format!("{what} at iteration {iteration}")),
        other => other,
    }
}
