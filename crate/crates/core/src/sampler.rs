//! Conditional rejection sampling guided by a density-ratio model.
//!
//! For one label `y`, proposals come from the generator (optionally passed
//! through a vicinity filter on predicted labels). A burn-in pass estimates
//! `M = max ψ`; afterwards each proposal updates `M ← max(M, ψ)` and is accepted
//! with probability `ψ / M`.

use std::collections::{HashMap, VecDeque};

use ndarray::{Array2, ArrayView2};
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::cdre::{FakeFeatureSource, RatioModel};
use crate::features::{FeatureExtractor, LabelPredictor};
use crate::synthetic::{ConditionalGaussianTask, ConditionalGenerator};
use crate::{Error, Result};

/// Scores feature rows that were all generated at label `y`.
pub trait RatioScorer: Sync {
    fn score_batch(&self, features: ArrayView2<f64>, y: f64) -> Result<Vec<f64>>;
}

impl RatioScorer for RatioModel {
    fn score_batch(&self, features: ArrayView2<f64>, y: f64) -> Result<Vec<f64>> {
        RatioModel::score_batch(self, features, &vec![y; features.nrows()])
    }
}

/// `ψ ≡ c`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstantRatio(pub f64);

impl RatioScorer for ConstantRatio {
    fn score_batch(&self, features: ArrayView2<f64>, _y: f64) -> Result<Vec<f64>> {
        Ok(vec![self.0; features.nrows()])
    }
}

/// The closed-form ratio of a synthetic task; features must be the raw inputs.
#[derive(Debug, Clone, Copy)]
pub struct OracleRatio<'a>(pub &'a ConditionalGaussianTask);

impl RatioScorer for OracleRatio<'_> {
    fn score_batch(&self, features: ArrayView2<f64>, y: f64) -> Result<Vec<f64>> {
        features
            .rows()
            .into_iter()
            .map(|r| self.0.true_ratio(&r.to_vec(), y))
            .collect()
    }
}

/// Keeps samples whose predicted label lies in `[y - ζ, y + ζ]`.
#[derive(Clone, Copy)]
pub struct VicinityFilter<'a> {
    /// `f64::INFINITY` disables filtering.
    pub zeta: f64,
    pub predictor: &'a dyn LabelPredictor,
}

impl<'a> VicinityFilter<'a> {
    pub fn new(zeta: f64, predictor: &'a dyn LabelPredictor) -> Result<Self> {
        if zeta.is_nan() || zeta < 0.0 {
            return Err(Error::contract(format!("zeta must be >= 0, got {zeta}")));
        }
        Ok(Self { zeta, predictor })
    }

    pub fn disabled(&self) -> bool {
        self.zeta == f64::INFINITY
    }

    pub fn admits(&self, predicted: f64, y: f64) -> bool {
        (predicted - y).abs() <= self.zeta
    }
}

/// Indices (in order) of the rows of `x` that pass the filter, with the
/// predicted label of every row (`None` when the filter is disabled).
pub fn filter_vicinity(
    x: ArrayView2<f64>,
    filter: &VicinityFilter<'_>,
    y: f64,
) -> Result<(Vec<usize>, Option<Vec<f64>>)> {
    if filter.disabled() {
        return Ok(((0..x.nrows()).collect(), None));
    }
    let predicted = filter.predictor.predict_batch(x)?;
    let keep = predicted
        .iter()
        .enumerate()
        .filter(|(_, &p)| filter.admits(p, y))
        .map(|(i, _)| i)
        .collect();
    Ok((keep, Some(predicted)))
}

fn distinct_sorted(labels: &[f64]) -> Result<Vec<f64>> {
    if labels.iter().any(|v| !v.is_finite()) {
        return Err(Error::contract("labels must be finite"));
    }
    let mut v = labels.to_vec();
    v.sort_by(f64::total_cmp);
    v.dedup();
    if v.len() < 2 {
        return Err(Error::contract("need at least two distinct labels"));
    }
    Ok(v)
}

/// Largest gap between consecutive sorted distinct labels.
pub fn kappa_base(labels: &[f64]) -> Result<f64> {
    let v = distinct_sorted(labels)?;
    Ok(v.windows(2).map(|w| w[1] - w[0]).fold(0.0, f64::max))
}

/// `ζ = 3 · m_κ · κ_base`.
pub fn default_zeta(labels: &[f64], m_kappa: f64) -> Result<f64> {
    if !(m_kappa > 0.0 && m_kappa.is_finite()) {
        return Err(Error::contract(format!(
            "m_kappa must be positive, got {m_kappa}"
        )));
    }
    Ok(3.0 * m_kappa * kappa_base(labels)?)
}

/// One proposal after feature extraction (and filtering, if active).
#[derive(Debug, Clone, PartialEq)]
pub struct Proposal {
    pub input: Vec<f64>,
    pub features: Vec<f64>,
    pub predicted: Option<f64>,
    /// Label the generator actually used.
    pub actual_label: f64,
    pub attribute: usize,
}

/// Generator draws at one label, mapped to features and filtered.
pub struct ProposalStream<'a> {
    generator: &'a dyn ConditionalGenerator,
    extractor: &'a dyn FeatureExtractor,
    filter: Option<VicinityFilter<'a>>,
    label: f64,
    chunk: usize,
    buffer: VecDeque<Proposal>,
    raw_draws: usize,
}

impl<'a> ProposalStream<'a> {
    pub fn new(
        generator: &'a dyn ConditionalGenerator,
        extractor: &'a dyn FeatureExtractor,
        filter: Option<VicinityFilter<'a>>,
        label: f64,
    ) -> Result<Self> {
        if generator.dim() != extractor.input_dim() {
            return Err(Error::contract(format!(
                "generator dimension {} does not match extractor input {}",
                generator.dim(),
                extractor.input_dim()
            )));
        }
        Ok(Self {
            generator,
            extractor,
            filter: filter.filter(|f| !f.disabled()),
            label,
            chunk: 256,
            buffer: VecDeque::new(),
            raw_draws: 0,
        })
    }

    /// Generator draws consumed so far, including ones the filter rejected.
    pub fn raw_draws(&self) -> usize {
        self.raw_draws
    }

    fn refill(&mut self, rng: &mut dyn RngCore) -> Result<()> {
        let draws = self.generator.generate(self.label, self.chunk, rng)?;
        self.raw_draws += draws.len();
        let d = self.generator.dim();
        let x = Array2::from_shape_vec(
            (draws.len(), d),
            draws.iter().flat_map(|s| s.features.iter().copied()).collect(),
        )
        .map_err(|e| Error::contract(e.to_string()))?;
        let (keep, predicted) = match &self.filter {
            Some(f) => filter_vicinity(x.view(), f, self.label)?,
            None => ((0..draws.len()).collect(), None),
        };
        if keep.is_empty() {
            return Ok(());
        }
        let kept = x.select(ndarray::Axis(0), &keep);
        let h = self.extractor.extract_batch(kept.view())?;
        for (row, &i) in keep.iter().enumerate() {
            self.buffer.push_back(Proposal {
                input: draws[i].features.clone(),
                features: h.row(row).to_vec(),
                predicted: predicted.as_ref().map(|p| p[i]),
                actual_label: draws[i].label,
                attribute: draws[i].attribute,
            });
        }
        Ok(())
    }

    /// Up to `n` proposals, stopping early once `max_raw` generator draws are used.
    pub fn take(&mut self, n: usize, max_raw: usize, rng: &mut dyn RngCore) -> Result<Vec<Proposal>> {
        while self.buffer.len() < n && self.raw_draws < max_raw {
            self.refill(rng)?;
        }
        let k = n.min(self.buffer.len());
        Ok(self.buffer.drain(..k).collect())
    }
}

/// State of one label's rejection sampler.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerSession {
    pub label: f64,
    /// Current normalizer `M`; never decreases.
    pub max_ratio: f64,
    pub burn_in: usize,
    pub accepted: usize,
    pub proposed: usize,
    /// Keep `M` at its burn-in value instead of raising it online.
    pub frozen: bool,
    /// Proposals whose ratio exceeded a frozen `M`.
    pub exceedances: usize,
}

impl SamplerSession {
    pub fn new(label: f64, max_ratio: f64, burn_in: usize, frozen: bool) -> Result<Self> {
        if !(max_ratio > 0.0 && max_ratio.is_finite()) {
            return Err(Error::contract(format!(
                "M must be positive and finite, got {max_ratio}"
            )));
        }
        Ok(Self {
            label,
            max_ratio,
            burn_in,
            accepted: 0,
            proposed: 0,
            frozen,
            exceedances: 0,
        })
    }

    /// Applies one accept/reject decision with uniform draw `u ∈ [0, 1)`.
    pub fn decide(&mut self, ratio: f64, u: f64) -> Result<bool> {
        if !(ratio >= 0.0 && ratio.is_finite()) {
            return Err(Error::NonFinite(format!("ratio {ratio} at label {}", self.label)));
        }
        if ratio > self.max_ratio {
            if self.frozen {
                self.exceedances += 1;
            } else {
                self.max_ratio = ratio;
            }
        }
        let p = (ratio / self.max_ratio).min(1.0);
        assert!(
            (0.0..=1.0).contains(&p),
            "acceptance probability {p} outside [0, 1]"
        );
        self.proposed += 1;
        let accept = u < p;
        if accept {
            self.accepted += 1;
        }
        Ok(accept)
    }

    pub fn acceptance_rate(&self) -> f64 {
        if self.proposed == 0 {
            0.0
        } else {
            self.accepted as f64 / self.proposed as f64
        }
    }
}

fn proposal_features(props: &[Proposal]) -> Array2<f64> {
    let d = props.first().map_or(0, |p| p.features.len());
    Array2::from_shape_vec(
        (props.len(), d),
        props.iter().flat_map(|p| p.features.iter().copied()).collect(),
    )
    .expect("equal feature lengths")
}

/// Maximum ratio over `n_prime` fresh proposals; the proposals are discarded.
pub fn burn_in_max(
    scorer: &dyn RatioScorer,
    stream: &mut ProposalStream<'_>,
    n_prime: usize,
    max_raw: usize,
    rng: &mut dyn RngCore,
) -> Result<f64> {
    if n_prime == 0 {
        return Err(Error::contract("burn-in needs at least one draw"));
    }
    let mut m = 0.0_f64;
    let mut seen = 0;
    while seen < n_prime {
        let props = stream.take((n_prime - seen).min(4096), max_raw, rng)?;
        if props.is_empty() {
            return Err(Error::BudgetExhausted {
                label: stream.label,
                accepted: 0,
                proposed: seen,
                rate: 0.0,
            });
        }
        seen += props.len();
        for r in scorer.score_batch(proposal_features(&props).view(), stream.label)? {
            if !r.is_finite() || r < 0.0 {
                return Err(Error::NonFinite(format!(
                    "burn-in ratio at label {}",
                    stream.label
                )));
            }
            m = m.max(r);
        }
    }
    if m == 0.0 {
        return Err(Error::DegenerateModel {
            label: stream.label,
            draws: n_prime,
        });
    }
    Ok(m)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AcceptedSample {
    pub proposal: Proposal,
    pub ratio: f64,
    /// Position of this sample in the proposal sequence (0-based).
    pub proposal_index: usize,
}

/// Draws proposals until `n_target` are accepted or `max_raw` generator draws
/// have been spent.
pub fn rejection_sample(
    scorer: &dyn RatioScorer,
    stream: &mut ProposalStream<'_>,
    n_target: usize,
    session: &mut SamplerSession,
    max_raw: usize,
    rng: &mut dyn RngCore,
) -> Result<Vec<AcceptedSample>> {
    if n_target == 0 {
        return Err(Error::contract("n_target must be positive"));
    }
    let start_raw = stream.raw_draws();
    let limit = start_raw.saturating_add(max_raw);
    let mut out = Vec::with_capacity(n_target);
    while out.len() < n_target {
        let want = (2 * (n_target - out.len())).clamp(64, 4096);
        let props = stream.take(want, limit, rng)?;
        if props.is_empty() {
            return Err(Error::BudgetExhausted {
                label: session.label,
                accepted: session.accepted,
                proposed: session.proposed,
                rate: session.acceptance_rate(),
            });
        }
        let ratios = scorer.score_batch(proposal_features(&props).view(), session.label)?;
        for (p, r) in props.into_iter().zip(ratios) {
            let index = session.proposed;
            let u: f64 = rng.random();
            if session.decide(r, u)? {
                out.push(AcceptedSample {
                    proposal: p,
                    ratio: r,
                    proposal_index: index,
                });
                if out.len() == n_target {
                    break;
                }
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerSettings {
    /// Burn-in draws `N′`.
    pub burn_in: usize,
    /// Generator draws allowed per label, as a multiple of `n_target`.
    pub budget_factor: usize,
    pub frozen_m: bool,
}

impl Default for SamplerSettings {
    fn default() -> Self {
        Self {
            burn_in: 10_000,
            budget_factor: 1000,
            frozen_m: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelSamples {
    pub session: SamplerSession,
    pub samples: Vec<AcceptedSample>,
    /// Generator draws spent after burn-in.
    pub raw_draws: usize,
}

/// Runs burn-in and rejection sampling for one label from its own seed.
#[allow(clippy::too_many_arguments)]
pub fn sample_label(
    generator: &dyn ConditionalGenerator,
    extractor: &dyn FeatureExtractor,
    scorer: &dyn RatioScorer,
    filter: Option<VicinityFilter<'_>>,
    label: f64,
    n_target: usize,
    settings: &SamplerSettings,
    master_seed: u64,
) -> Result<LabelSamples> {
    let mut rng = crate::seed::derive_rng(master_seed, "sample", Some(label));
    let mut stream = ProposalStream::new(generator, extractor, filter, label)?;
    let budget = settings
        .budget_factor
        .saturating_mul(n_target)
        .max(settings.burn_in);
    let m = burn_in_max(scorer, &mut stream, settings.burn_in, budget, &mut rng)?;
    let mut session = SamplerSession::new(label, m, settings.burn_in, settings.frozen_m)?;
    let before = stream.raw_draws();
    let samples = rejection_sample(
        scorer,
        &mut stream,
        n_target,
        &mut session,
        settings.budget_factor.saturating_mul(n_target),
        &mut rng,
    )?;
    Ok(LabelSamples {
        session,
        samples,
        raw_draws: stream.raw_draws() - before,
    })
}

/// Independent per-label sessions; a failing label does not stop the others.
#[allow(clippy::too_many_arguments)]
pub fn run_conditional_subsampling(
    generator: &dyn ConditionalGenerator,
    extractor: &dyn FeatureExtractor,
    scorer: &dyn RatioScorer,
    filter: Option<VicinityFilter<'_>>,
    labels: &[f64],
    n_target: usize,
    settings: &SamplerSettings,
    master_seed: u64,
    threads: usize,
) -> Vec<(f64, Result<LabelSamples>)> {
    let run = |y: f64| {
        sample_label(
            generator,
            extractor,
            scorer,
            filter,
            y,
            n_target,
            settings,
            master_seed,
        )
    };
    let threads = threads.max(1).min(labels.len().max(1));
    if threads == 1 {
        return labels.iter().map(|&y| (y, run(y))).collect();
    }
    let mut results: Vec<Option<Result<LabelSamples>>> = (0..labels.len()).map(|_| None).collect();
    std::thread::scope(|scope| {
        let chunk = labels.len().div_ceil(threads);
        let handles: Vec<_> = labels
            .chunks(chunk)
            .map(|ls| scope.spawn(move || ls.iter().map(|&y| run(y)).collect::<Vec<_>>()))
            .collect();
        let mut i = 0;
        for h in handles {
            for r in h.join().expect("sampling worker panicked") {
                results[i] = Some(r);
                i += 1;
            }
        }
    });
    labels
        .iter()
        .zip(results)
        .map(|(&y, r)| (y, r.expect("every label processed")))
        .collect()
}

/// Fresh generator draws at the requested labels, mapped to features.
pub struct GeneratorFeatureSource<'a> {
    pub generator: &'a dyn ConditionalGenerator,
    pub extractor: &'a dyn FeatureExtractor,
}

impl FakeFeatureSource for GeneratorFeatureSource<'_> {
    fn feature_dim(&self) -> usize {
        self.extractor.input_dim()
    }

    fn draw(&mut self, labels: &[f64], rng: &mut dyn RngCore) -> Result<Array2<f64>> {
        let d = self.generator.dim();
        let mut x = Array2::zeros((labels.len(), d));
        let mut i = 0;
        while i < labels.len() {
            // Generate runs of equal labels together.
            let mut j = i + 1;
            while j < labels.len() && labels[j].to_bits() == labels[i].to_bits() {
                j += 1;
            }
            for (k, s) in self
                .generator
                .generate(labels[i], j - i, rng)?
                .into_iter()
                .enumerate()
            {
                x.row_mut(i + k)
                    .iter_mut()
                    .zip(&s.features)
                    .for_each(|(a, b)| *a = *b);
            }
            i = j;
        }
        self.extractor.extract_batch(x.view())
    }
}

/// Pre-generated, vicinity-filtered fake features for each training label.
/// Draws sample uniformly with replacement from the pool of the requested label.
pub struct FilteredFakePool {
    pools: HashMap<u64, Array2<f64>>,
    dim: usize,
}

impl FilteredFakePool {
    #[allow(clippy::too_many_arguments)]
    pub fn build(
        generator: &dyn ConditionalGenerator,
        extractor: &dyn FeatureExtractor,
        filter: VicinityFilter<'_>,
        labels: &[f64],
        pool_size: usize,
        budget_factor: usize,
        master_seed: u64,
    ) -> Result<Self> {
        if pool_size == 0 {
            return Err(Error::contract("pool size must be positive"));
        }
        let mut pools = HashMap::new();
        for &y in labels {
            if pools.contains_key(&y.to_bits()) {
                continue;
            }
            let mut rng = crate::seed::derive_rng(master_seed, "fake-pool", Some(y));
            let mut stream = ProposalStream::new(generator, extractor, Some(filter), y)?;
            let props = stream.take(pool_size, budget_factor.saturating_mul(pool_size), &mut rng)?;
            if props.len() < pool_size {
                return Err(Error::BudgetExhausted {
                    label: y,
                    accepted: props.len(),
                    proposed: stream.raw_draws(),
                    rate: props.len() as f64 / stream.raw_draws().max(1) as f64,
                });
            }
            pools.insert(y.to_bits(), proposal_features(&props));
        }
        Ok(Self {
            pools,
            dim: extractor.input_dim(),
        })
    }
}

impl FakeFeatureSource for FilteredFakePool {
    fn feature_dim(&self) -> usize {
        self.dim
    }

    fn draw(&mut self, labels: &[f64], rng: &mut dyn RngCore) -> Result<Array2<f64>> {
        let mut out = Array2::zeros((labels.len(), self.dim));
        for (i, y) in labels.iter().enumerate() {
            let pool = self
                .pools
                .get(&y.to_bits())
                .ok_or_else(|| Error::contract(format!("no filtered fake pool for label {y}")))?;
            let k = rng.random_range(0..pool.nrows());
            out.row_mut(i).assign(&pool.row(k));
        }
        Ok(out)
    }
}
