//! Synthetic conditional distributions with closed-form densities.
//!
//! A [`ConditionalGaussianTask`] pairs a "real" conditional family `p_r(x|y)` with
//! a "fake" family `p_g(x|y)` standing in for a trained conditional generator.
//! Both are mixtures over `A` categorical attributes; attribute `k` shifts the
//! mean by `offsets[k]`. Means are affine in the label position `u ∈ [0, 1]`.
//!
//! The fake family may be label-inconsistent: a draw requested at `y` is
//! generated at `t = clip(u + ε, 0, 1)` with `ε ~ N(0, (label_noise_sd · scale_k)²)`
//! and records `t` as its actual label. Because the mean is affine in `t`, the
//! resulting density is still closed form: a Gaussian integral over the unclipped
//! part plus two point masses at the clip boundaries.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngCore};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::{Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LabelSpace {
    /// Class indices `0..count`; class `k` sits at position `k / (count - 1)`.
    Classes { count: usize },
    /// Continuous labels in `[0, 1]` with `train_labels` evenly spaced training labels.
    Interval { train_labels: usize },
}

/// `mean(u) = intercept + u · slope`.
#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
pub struct AffineMean {
    pub intercept: Vec<f64>,
    pub slope: Vec<f64>,
}

impl AffineMean {
    pub fn at(&self, u: f64) -> Vec<f64> {
        self.intercept
            .iter()
            .zip(&self.slope)
            .map(|(a, b)| a + u * b)
            .collect()
    }
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
pub struct AttributeMixture {
    pub real_weights: Vec<f64>,
    pub fake_weights: Vec<f64>,
    /// One mean offset per attribute.
    pub offsets: Vec<Vec<f64>>,
    /// Per-attribute multiplier on `label_noise_sd`; all ones when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_scale: Option<Vec<f64>>,
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
pub struct TaskSpec {
    pub dim: usize,
    pub label_space: LabelSpace,
    pub real_mean: AffineMean,
    pub fake_mean: AffineMean,
    /// Identity when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub real_cov: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fake_cov: Option<Vec<Vec<f64>>>,
    pub attributes: AttributeMixture,
    #[serde(default)]
    pub label_noise_sd: f64,
}

fn stacked_offsets(spacing: f64) -> Vec<Vec<f64>> {
    (0..5).map(|k| vec![0.0, spacing * (k as f64 - 2.0)]).collect()
}

impl TaskSpec {
    /// Default 2-D class benchmark: 10 classes, real mean `(2u - 1, 0)`,
    /// fake mean shifted by `(0.5, 0.3)`, five attributes with uniform real
    /// weights and fake weights `(0.6, 0.1, 0.1, 0.1, 0.1)`.
    pub fn class_benchmark() -> Self {
        Self {
            dim: 2,
            label_space: LabelSpace::Classes { count: 10 },
            real_mean: AffineMean {
                intercept: vec![-1.0, 0.0],
                slope: vec![2.0, 0.0],
            },
            fake_mean: AffineMean {
                intercept: vec![-0.5, 0.3],
                slope: vec![2.0, 0.0],
            },
            real_cov: None,
            fake_cov: None,
            attributes: AttributeMixture {
                real_weights: vec![0.2; 5],
                fake_weights: vec![0.6, 0.1, 0.1, 0.1, 0.1],
                offsets: stacked_offsets(1.0),
                noise_scale: None,
            },
            label_noise_sd: 0.0,
        }
    }

    /// Continuous benchmark: 60 training labels on `[0, 1]`, the label encoded
    /// along the first axis with slope 10, label drift `sd = 0.1` scaled by
    /// `0.4` for the dominant fake attribute and `1.5` for the minority ones.
    pub fn continuous_benchmark() -> Self {
        Self {
            dim: 2,
            label_space: LabelSpace::Interval { train_labels: 60 },
            real_mean: AffineMean {
                intercept: vec![0.0, 0.0],
                slope: vec![10.0, 0.0],
            },
            fake_mean: AffineMean {
                intercept: vec![0.0, 0.5],
                slope: vec![10.0, 0.0],
            },
            real_cov: None,
            fake_cov: None,
            attributes: AttributeMixture {
                real_weights: vec![0.2; 5],
                fake_weights: vec![0.6, 0.1, 0.1, 0.1, 0.1],
                offsets: stacked_offsets(1.0),
                noise_scale: Some(vec![0.4, 1.5, 1.5, 1.5, 1.5]),
            },
            label_noise_sd: 0.1,
        }
    }

    /// One-dimensional, single-attribute task: real `N(real_mu, 1)`, fake `N(fake_mu, 1)`
    /// at every one of `classes` labels.
    pub fn gaussian_1d(real_mu: f64, fake_mu: f64, classes: usize) -> Self {
        Self {
            dim: 1,
            label_space: LabelSpace::Classes { count: classes },
            real_mean: AffineMean {
                intercept: vec![real_mu],
                slope: vec![0.0],
            },
            fake_mean: AffineMean {
                intercept: vec![fake_mu],
                slope: vec![0.0],
            },
            real_cov: None,
            fake_cov: None,
            attributes: AttributeMixture {
                real_weights: vec![1.0],
                fake_weights: vec![1.0],
                offsets: vec![vec![0.0]],
                noise_scale: None,
            },
            label_noise_sd: 0.0,
        }
    }
}

/// One draw from a conditional family.
#[derive(Debug, Clone, PartialEq)]
pub struct Draw {
    pub features: Vec<f64>,
    /// Actual label; differs from the requested one only for label-inconsistent fakes.
    pub label: f64,
    pub attribute: usize,
}

/// Anything that produces input-space samples conditional on a label.
pub trait ConditionalGenerator: Sync {
    fn dim(&self) -> usize;
    fn generate(&self, label: f64, n: usize, rng: &mut dyn RngCore) -> Result<Vec<Draw>>;
}

#[derive(Debug, Clone)]
struct Gaussian {
    chol: DMatrix<f64>,
    precision: DMatrix<f64>,
    /// `-(d/2) ln 2π - ½ ln|Σ|`.
    log_norm: f64,
}

impl Gaussian {
    fn new(cov: &DMatrix<f64>, which: &str) -> Result<Self> {
        let d = cov.nrows();
        let chol = cov
            .clone()
            .cholesky()
            .ok_or_else(|| Error::contract(format!("{which} covariance is not SPD")))?;
        let l = chol.l();
        let log_det = 2.0 * l.diagonal().iter().map(|v| v.ln()).sum::<f64>();
        Ok(Self {
            precision: chol.inverse(),
            chol: l,
            log_norm: -0.5 * d as f64 * LN_2PI - 0.5 * log_det,
        })
    }

    fn quad(&self, r: &DVector<f64>) -> f64 {
        r.dot(&(&self.precision * r))
    }

    fn log_pdf(&self, h: &DVector<f64>, mean: &DVector<f64>) -> f64 {
        self.log_norm - 0.5 * self.quad(&(h - mean))
    }
}

fn cov_matrix(dim: usize, cov: &Option<Vec<Vec<f64>>>, which: &str) -> Result<DMatrix<f64>> {
    match cov {
        None => Ok(DMatrix::identity(dim, dim)),
        Some(rows) => {
            if rows.len() != dim || rows.iter().any(|r| r.len() != dim) {
                return Err(Error::contract(format!("{which} covariance must be {dim}x{dim}")));
            }
            let m = DMatrix::from_fn(dim, dim, |i, j| rows[i][j]);
            if (&m - m.transpose()).abs().max() > 1e-12 {
                return Err(Error::contract(format!("{which} covariance is not symmetric")));
            }
            Ok(m)
        }
    }
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Upper tail `Q(x) = 1 - Φ(x)`.
fn upper_tail(x: f64) -> f64 {
    0.5 * erfc(x / std::f64::consts::SQRT_2)
}

pub fn normal_cdf(x: f64) -> f64 {
    upper_tail(-x)
}

/// `ln(Φ(b) - Φ(a))` for `a <= b`, accurate in both tails.
fn log_normal_mass(a: f64, b: f64) -> f64 {
    if a >= b {
        return f64::NEG_INFINITY;
    }
    if a > 0.0 {
        (upper_tail(a) - upper_tail(b)).ln()
    } else if b < 0.0 {
        (upper_tail(-b) - upper_tail(-a)).ln()
    } else {
        (-(upper_tail(b) + upper_tail(-a))).ln_1p()
    }
}

fn categorical(weights: &[f64], rng: &mut dyn RngCore) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (k, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return k;
        }
    }
    weights.len() - 1
}

/// Validated task with precomputed Cholesky factors.
#[derive(Debug, Clone)]
pub struct ConditionalGaussianTask {
    spec: TaskSpec,
    real: Gaussian,
    fake: Gaussian,
    noise_sds: Vec<f64>,
}

impl ConditionalGaussianTask {
    pub fn new(spec: TaskSpec) -> Result<Self> {
        let d = spec.dim;
        if d == 0 {
            return Err(Error::contract("task dimension must be positive"));
        }
        for (name, m) in [("real_mean", &spec.real_mean), ("fake_mean", &spec.fake_mean)] {
            if m.intercept.len() != d || m.slope.len() != d {
                return Err(Error::contract(format!("{name} must have {d} components")));
            }
        }
        let att = &spec.attributes;
        let a = att.offsets.len();
        if a == 0 || att.real_weights.len() != a || att.fake_weights.len() != a {
            return Err(Error::contract(
                "attribute weights and offsets must agree in count",
            ));
        }
        if att.offsets.iter().any(|o| o.len() != d) {
            return Err(Error::contract(format!(
                "attribute offsets must have {d} components"
            )));
        }
        for (name, w) in [("real", &att.real_weights), ("fake", &att.fake_weights)] {
            if w.iter().any(|&v| v < 0.0) || (w.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return Err(Error::contract(format!("{name} attribute weights must sum to 1")));
            }
        }
        if !(spec.label_noise_sd >= 0.0 && spec.label_noise_sd.is_finite()) {
            return Err(Error::contract("label_noise_sd must be finite and >= 0"));
        }
        match spec.label_space {
            LabelSpace::Classes { count } => {
                if count == 0 {
                    return Err(Error::contract("class task needs at least one class"));
                }
                if spec.label_noise_sd > 0.0 {
                    return Err(Error::contract("label noise applies to interval tasks only"));
                }
            }
            LabelSpace::Interval { train_labels } => {
                if train_labels < 2 {
                    return Err(Error::contract(
                        "interval task needs at least two training labels",
                    ));
                }
            }
        }
        let scales = att.noise_scale.clone().unwrap_or_else(|| vec![1.0; a]);
        if scales.len() != a || scales.iter().any(|s| *s < 0.0) {
            return Err(Error::contract(
                "noise_scale needs one nonnegative entry per attribute",
            ));
        }
        let noise_sds = scales.iter().map(|s| s * spec.label_noise_sd).collect();
        let real = Gaussian::new(&cov_matrix(d, &spec.real_cov, "real")?, "real")?;
        let fake = Gaussian::new(&cov_matrix(d, &spec.fake_cov, "fake")?, "fake")?;
        Ok(Self {
            spec,
            real,
            fake,
            noise_sds,
        })
    }

    pub fn spec(&self) -> &TaskSpec {
        &self.spec
    }

    pub fn dim(&self) -> usize {
        self.spec.dim
    }

    pub fn num_attributes(&self) -> usize {
        self.spec.attributes.offsets.len()
    }

    pub fn is_classes(&self) -> bool {
        matches!(self.spec.label_space, LabelSpace::Classes { .. })
    }

    /// Labels that carry real training data.
    pub fn train_labels(&self) -> Vec<f64> {
        match self.spec.label_space {
            LabelSpace::Classes { count } => (0..count).map(|k| k as f64).collect(),
            LabelSpace::Interval { train_labels } => (0..train_labels)
                .map(|i| i as f64 / (train_labels - 1) as f64)
                .collect(),
        }
    }

    /// Position of label `y` on `[0, 1]`, validating membership in the label space.
    pub fn position(&self, y: f64) -> Result<f64> {
        match self.spec.label_space {
            LabelSpace::Classes { count } => {
                if y.fract() != 0.0 || y < 0.0 || y >= count as f64 {
                    return Err(Error::contract(format!("class label {y} outside 0..{count}")));
                }
                Ok(if count == 1 { 0.0 } else { y / (count - 1) as f64 })
            }
            LabelSpace::Interval { .. } => {
                if !(0.0..=1.0).contains(&y) {
                    return Err(Error::contract(format!("label {y} outside [0, 1]")));
                }
                Ok(y)
            }
        }
    }

    fn label_at(&self, position: f64) -> f64 {
        match self.spec.label_space {
            LabelSpace::Classes { count } if count > 1 => position * (count - 1) as f64,
            LabelSpace::Classes { .. } => 0.0,
            LabelSpace::Interval { .. } => position,
        }
    }

    fn draw(
        &self,
        gauss: &Gaussian,
        mean_fn: &AffineMean,
        weights: &[f64],
        noisy: bool,
        y: f64,
        n: usize,
        rng: &mut dyn RngCore,
    ) -> Result<Vec<Draw>> {
        let u = self.position(y)?;
        let d = self.spec.dim;
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let k = categorical(weights, rng);
            let mut t = u;
            let sd = if noisy { self.noise_sds[k] } else { 0.0 };
            if sd > 0.0 {
                let eps: f64 = rng.sample(StandardNormal);
                t = (u + sd * eps).clamp(0.0, 1.0);
            }
            let z = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
            let noise = &gauss.chol * z;
            let mean = mean_fn.at(t);
            let features = (0..d)
                .map(|i| mean[i] + self.spec.attributes.offsets[k][i] + noise[i])
                .collect();
            out.push(Draw {
                features,
                label: if sd > 0.0 { self.label_at(t) } else { y },
                attribute: k,
            });
        }
        Ok(out)
    }

    pub fn sample_real(&self, y: f64, n: usize, rng: &mut dyn RngCore) -> Result<Vec<Draw>> {
        let w = self.spec.attributes.real_weights.clone();
        self.draw(&self.real, &self.spec.real_mean, &w, false, y, n, rng)
    }

    pub fn sample_fake(&self, y: f64, n: usize, rng: &mut dyn RngCore) -> Result<Vec<Draw>> {
        let w = self.spec.attributes.fake_weights.clone();
        self.draw(&self.fake, &self.spec.fake_mean, &w, true, y, n, rng)
    }

    fn check_dim(&self, h: &[f64]) -> Result<DVector<f64>> {
        if h.len() != self.spec.dim {
            return Err(Error::contract(format!(
                "feature length {} does not match task dimension {}",
                h.len(),
                self.spec.dim
            )));
        }
        Ok(DVector::from_column_slice(h))
    }

    fn offset_mean(&self, mean_fn: &AffineMean, u: f64, k: usize) -> DVector<f64> {
        let m = mean_fn.at(u);
        DVector::from_fn(self.spec.dim, |i, _| m[i] + self.spec.attributes.offsets[k][i])
    }

    pub fn log_real_density(&self, h: &[f64], y: f64) -> Result<f64> {
        let hv = self.check_dim(h)?;
        let u = self.position(y)?;
        let terms: Vec<f64> = self
            .spec
            .attributes
            .real_weights
            .iter()
            .enumerate()
            .filter(|(_, w)| **w > 0.0)
            .map(|(k, w)| {
                w.ln()
                    + self
                        .real
                        .log_pdf(&hv, &self.offset_mean(&self.spec.real_mean, u, k))
            })
            .collect();
        Ok(log_sum_exp(&terms))
    }

    pub fn log_fake_density(&self, h: &[f64], y: f64) -> Result<f64> {
        let hv = self.check_dim(h)?;
        let u = self.position(y)?;
        let slope = DVector::from_column_slice(&self.spec.fake_mean.slope);
        let p_slope = &self.fake.precision * &slope;
        let slope_quad = slope.dot(&p_slope);
        let mut terms = Vec::new();
        for (k, &w) in self.spec.attributes.fake_weights.iter().enumerate() {
            if w <= 0.0 {
                continue;
            }
            let lw = w.ln();
            let mean = self.offset_mean(&self.spec.fake_mean, u, k);
            let s = self.noise_sds[k];
            if s == 0.0 {
                terms.push(lw + self.fake.log_pdf(&hv, &mean));
                continue;
            }
            // ε over [-u, 1-u] keeps t = u + ε unclipped.
            let r = &hv - &mean;
            let a = slope_quad + 1.0 / (s * s);
            let c = p_slope.dot(&r);
            let centre = c / a;
            let sa = a.sqrt();
            let interior = self.fake.log_norm - 0.5 * self.fake.quad(&r) + c * c / (2.0 * a)
                - 0.5 * (s * s * a).ln()
                + log_normal_mass(sa * (-u - centre), sa * (1.0 - u - centre));
            terms.push(lw + interior);
            let below = log_normal_mass(f64::NEG_INFINITY, -u / s);
            if below > f64::NEG_INFINITY {
                let m0 = self.offset_mean(&self.spec.fake_mean, 0.0, k);
                terms.push(lw + below + self.fake.log_pdf(&hv, &m0));
            }
            let above = log_normal_mass((1.0 - u) / s, f64::INFINITY);
            if above > f64::NEG_INFINITY {
                let m1 = self.offset_mean(&self.spec.fake_mean, 1.0, k);
                terms.push(lw + above + self.fake.log_pdf(&hv, &m1));
            }
        }
        Ok(log_sum_exp(&terms))
    }

    /// `p_r(h|y) / p_g(h|y)`.
    pub fn true_ratio(&self, h: &[f64], y: f64) -> Result<f64> {
        Ok((self.log_real_density(h, y)? - self.log_fake_density(h, y)?).exp())
    }
}

/// The task's fake family as a generator.
impl ConditionalGenerator for ConditionalGaussianTask {
    fn dim(&self) -> usize {
        self.spec.dim
    }

    fn generate(&self, label: f64, n: usize, rng: &mut dyn RngCore) -> Result<Vec<Draw>> {
        self.sample_fake(label, n, rng)
    }
}

/// Box-kernel density-ratio estimate from raw samples, for tasks of dimension ≤ 2.
///
/// Independent of the closed-form densities: it only uses the samplers.
#[derive(Debug, Clone)]
pub struct BruteForceOracle {
    real: Vec<Vec<f64>>,
    fake: Vec<Vec<f64>>,
    half_width: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct BruteForceSpec {
    pub samples: usize,
    /// Half side length of the counting box around the query point.
    pub half_width: f64,
    pub seed: u64,
}

impl Default for BruteForceSpec {
    fn default() -> Self {
        Self {
            samples: 1_000_000,
            half_width: 0.05,
            seed: 0,
        }
    }
}

fn sorted_by_first(mut v: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
    v.sort_by(|a, b| a[0].total_cmp(&b[0]));
    v
}

impl BruteForceOracle {
    pub fn new(task: &ConditionalGaussianTask, y: f64, spec: BruteForceSpec) -> Result<Self> {
        if task.dim() > 2 {
            return Err(Error::Unsupported(format!(
                "brute-force ratio needs dimension <= 2, task has {}",
                task.dim()
            )));
        }
        let mut rng = crate::seed::derive_rng(spec.seed, "brute-force", Some(y));
        let real = task.sample_real(y, spec.samples, &mut rng)?;
        let fake = task.sample_fake(y, spec.samples, &mut rng)?;
        Ok(Self {
            real: sorted_by_first(real.into_iter().map(|d| d.features).collect()),
            fake: sorted_by_first(fake.into_iter().map(|d| d.features).collect()),
            half_width: spec.half_width,
        })
    }

    fn count(points: &[Vec<f64>], h: &[f64], hw: f64) -> usize {
        let lo = points.partition_point(|p| p[0] < h[0] - hw);
        let hi = points.partition_point(|p| p[0] <= h[0] + hw);
        points[lo..hi]
            .iter()
            .filter(|p| p.iter().zip(h).skip(1).all(|(a, b)| (a - b).abs() <= hw))
            .count()
    }

    pub fn ratio(&self, h: &[f64]) -> Result<f64> {
        let cr = Self::count(&self.real, h, self.half_width) as f64 / self.real.len() as f64;
        let cg = Self::count(&self.fake, h, self.half_width) as f64 / self.fake.len() as f64;
        if cg == 0.0 {
            return Err(Error::contract(format!("no fake samples near {h:?}")));
        }
        Ok(cr / cg)
    }
}

pub fn brute_force_ratio(
    task: &ConditionalGaussianTask,
    h: &[f64],
    y: f64,
    spec: BruteForceSpec,
) -> Result<f64> {
    BruteForceOracle::new(task, y, spec)?.ratio(h)
}
