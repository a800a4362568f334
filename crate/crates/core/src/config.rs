//! Experiment configuration (one JSON document) and the bundled presets.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cdre::{CdreTrainConfig, ConditionEmbedding, RatioArchitecture};
use crate::features::{OptimizerKind, SaeTrainConfig};
use crate::sampler::{default_zeta, SamplerSettings};
use crate::synthetic::{ConditionalGaussianTask, LabelSpace, TaskSpec};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractorChoice {
    #[default]
    Identity,
    Sae,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SaeStage {
    pub train: SaeTrainConfig,
    /// Real training samples per training label.
    pub real_per_label: usize,
}

impl Default for SaeStage {
    fn default() -> Self {
        Self {
            train: SaeTrainConfig::default(),
            real_per_label: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RatioStage {
    pub architecture: RatioArchitecture,
    pub train: CdreTrainConfig,
    pub real_per_label: usize,
}

impl Default for RatioStage {
    fn default() -> Self {
        Self {
            architecture: RatioArchitecture::default(),
            train: CdreTrainConfig::default(),
            real_per_label: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterConfig {
    pub enabled: bool,
    /// Explicit vicinity half-width in normalized label units; when absent the
    /// rule of thumb `3 · m_kappa · κ_base` over the training labels is used.
    /// The string `"inf"` turns filtering off.
    #[serde(with = "zeta_json", skip_serializing_if = "Option::is_none")]
    pub zeta: Option<f64>,
    pub m_kappa: f64,
    /// Filtered fakes pooled per label for training, as a multiple of the batch size.
    pub pool_factor: usize,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            zeta: None,
            m_kappa: 2.0,
            pool_factor: 50,
        }
    }
}

/// JSON has no infinity, so an unbounded vicinity is written as `"inf"`.
mod zeta_json {
    use serde::{Deserialize, Deserializer, Serializer};

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Number(f64),
        Text(String),
    }

    pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(z) if z.is_infinite() => s.serialize_str("inf"),
            Some(z) => s.serialize_f64(*z),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
        match Option::<Raw>::deserialize(d)? {
            None => Ok(None),
            Some(Raw::Number(z)) => Ok(Some(z)),
            Some(Raw::Text(t)) if matches!(t.as_str(), "inf" | "infinity") => Ok(Some(f64::INFINITY)),
            Some(Raw::Text(t)) => Err(serde::de::Error::custom(format!(
                "zeta must be a number or \"inf\", got \"{t}\""
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerStage {
    pub burn_in: usize,
    pub budget_factor: usize,
    pub frozen_m: bool,
    pub filter: FilterConfig,
    pub n_target: usize,
}

impl Default for SamplerStage {
    fn default() -> Self {
        let s = SamplerSettings::default();
        Self {
            burn_in: s.burn_in,
            budget_factor: s.budget_factor,
            frozen_m: s.frozen_m,
            filter: FilterConfig::default(),
            n_target: 500,
        }
    }
}

impl SamplerStage {
    pub fn settings(&self) -> SamplerSettings {
        SamplerSettings {
            burn_in: self.burn_in,
            budget_factor: self.budget_factor,
            frozen_m: self.frozen_m,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalStage {
    /// Fresh real samples per label used as the Fréchet reference.
    pub real_per_label: usize,
}

impl Default for EvalStage {
    fn default() -> Self {
        Self { real_per_label: 2000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: TaskSpec,
    #[serde(default)]
    pub extractor: ExtractorChoice,
    /// Defaults to one-hot for class tasks and octave sinusoids for interval tasks.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<ConditionEmbedding>,
    #[serde(default)]
    pub sae: SaeStage,
    #[serde(default)]
    pub ratio: RatioStage,
    #[serde(default)]
    pub sampler: SamplerStage,
    /// Defaults to every training label.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels_of_interest: Option<Vec<f64>>,
    #[serde(default)]
    pub eval: EvalStage,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

fn backticked(msg: &str) -> Option<&str> {
    let start = msg.find('`')? + 1;
    let len = msg[start..].find('`')?;
    Some(&msg[start..start + len])
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let msg = e.inner().to_string();
            let key = match (msg.starts_with("missing field"), backticked(&msg)) {
                (true, Some(field)) if path == "." => field.to_string(),
                (true, Some(field)) => format!("{path}.{field}"),
                _ => path,
            };
            Error::config(key, msg)
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config("config", format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn task(&self) -> Result<ConditionalGaussianTask> {
        ConditionalGaussianTask::new(self.task.clone()).map_err(|e| Error::config("task", e.to_string()))
    }

    pub fn embedding(&self) -> ConditionEmbedding {
        self.embedding.clone().unwrap_or(match self.task.label_space {
            LabelSpace::Classes { count } => ConditionEmbedding::OneHot { num_classes: count },
            LabelSpace::Interval { .. } => ConditionEmbedding::octaves(),
        })
    }

    pub fn labels_of_interest(&self) -> Result<Vec<f64>> {
        match &self.labels_of_interest {
            Some(l) => Ok(l.clone()),
            None => Ok(self.task()?.train_labels()),
        }
    }

    /// Whether a vicinity filter applies: enabled with a finite `ζ`.
    pub fn filter_active(&self) -> bool {
        self.sampler.filter.enabled && self.sampler.filter.zeta != Some(f64::INFINITY)
    }

    /// Whether an SAE is needed, for features or for the filter's label predictor.
    pub fn needs_sae(&self) -> bool {
        self.extractor == ExtractorChoice::Sae || self.filter_active()
    }

    /// Vicinity half-width in normalized label units; `∞` when filtering is off.
    pub fn zeta(&self) -> Result<f64> {
        if !self.filter_active() {
            return Ok(f64::INFINITY);
        }
        match self.sampler.filter.zeta {
            Some(z) => Ok(z),
            None => {
                let task = self.task()?;
                let labels: Vec<f64> = task
                    .train_labels()
                    .iter()
                    .map(|&y| task.position(y))
                    .collect::<Result<_>>()?;
                default_zeta(&labels, self.sampler.filter.m_kappa)
                    .map_err(|e| Error::config("sampler.filter.m_kappa", e.to_string()))
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let task = self.task()?;
        for y in self.labels_of_interest()? {
            task.position(y)
                .map_err(|e| Error::config("labels_of_interest", e.to_string()))?;
        }
        if self.labels_of_interest()?.is_empty() {
            return Err(Error::config("labels_of_interest", "no labels to sample"));
        }
        if self.sampler.n_target == 0 {
            return Err(Error::config("sampler.n_target", "must be positive"));
        }
        if self.sampler.burn_in == 0 {
            return Err(Error::config("sampler.burn_in", "must be positive"));
        }
        if self.sampler.budget_factor == 0 {
            return Err(Error::config("sampler.budget_factor", "must be positive"));
        }
        if self.ratio.real_per_label == 0 {
            return Err(Error::config("ratio.real_per_label", "must be positive"));
        }
        if self.needs_sae() && self.sae.real_per_label == 0 {
            return Err(Error::config("sae.real_per_label", "must be positive"));
        }
        if self.eval.real_per_label <= task.dim() {
            return Err(Error::config(
                "eval.real_per_label",
                "needs more samples than the feature dimension",
            ));
        }
        self.ratio
            .train
            .validate()
            .map_err(|e| Error::config("ratio.train", e.to_string()))?;
        let width_ok = match (&self.embedding(), &self.task.label_space) {
            (ConditionEmbedding::OneHot { num_classes }, LabelSpace::Classes { count }) => {
                num_classes == count
            }
            (ConditionEmbedding::Continuous { scales }, LabelSpace::Interval { .. }) => !scales.is_empty(),
            _ => false,
        };
        if !width_ok {
            return Err(Error::config(
                "embedding",
                "embedding does not match the task's label space",
            ));
        }
        if let Some(z) = self.sampler.filter.zeta {
            if z.is_nan() || z < 0.0 {
                return Err(Error::config("sampler.filter.zeta", "must be >= 0"));
            }
        }
        if self.filter_active() {
            if !matches!(self.task.label_space, LabelSpace::Interval { .. }) {
                return Err(Error::config(
                    "sampler.filter.enabled",
                    "vicinity filtering applies to interval label spaces",
                ));
            }
            if self.sampler.filter.pool_factor == 0 {
                return Err(Error::config("sampler.filter.pool_factor", "must be positive"));
            }
            self.zeta()?;
        }
        Ok(())
    }
}

pub const PRESETS: [&str; 3] = ["class10", "continuous60", "continuous60-nofilter"];

/// Ratio training settings shared by the presets: compact network, raised learning rate.
fn compact_ratio(real_per_label: usize, epochs: usize) -> RatioStage {
    RatioStage {
        architecture: RatioArchitecture {
            hidden: vec![64; 5],
            norm_groups: Some(8),
            dropout: 0.1,
        },
        train: CdreTrainConfig {
            lr: 1e-3,
            lr_decay_epochs: vec![epochs * 2 / 5, epochs * 3 / 4],
            epochs,
            ..CdreTrainConfig::default()
        },
        real_per_label,
    }
}

pub fn preset(name: &str) -> Result<ExperimentConfig> {
    let cfg = match name {
        "class10" => ExperimentConfig {
            task: TaskSpec::class_benchmark(),
            extractor: ExtractorChoice::Identity,
            embedding: None,
            sae: SaeStage::default(),
            ratio: compact_ratio(2000, 100),
            sampler: SamplerStage {
                n_target: 1000,
                ..SamplerStage::default()
            },
            labels_of_interest: None,
            eval: EvalStage::default(),
            seed: 2024,
            output_dir: None,
        },
        "continuous60" | "continuous60-nofilter" => ExperimentConfig {
            task: TaskSpec::continuous_benchmark(),
            extractor: ExtractorChoice::Identity,
            embedding: None,
            sae: SaeStage {
                // Momentum SGD at the default rate kills units of the 2-D code on some seeds.
                train: SaeTrainConfig {
                    optimizer: OptimizerKind::Adam,
                    lr: 1e-3,
                    epochs: 100,
                    lr_decay_every: 40,
                    ..SaeTrainConfig::default()
                },
                real_per_label: 200,
            },
            ratio: compact_ratio(100, 200),
            sampler: SamplerStage {
                n_target: 200,
                filter: FilterConfig {
                    enabled: name == "continuous60",
                    ..FilterConfig::default()
                },
                ..SamplerStage::default()
            },
            labels_of_interest: None,
            eval: EvalStage { real_per_label: 500 },
            seed: 2024,
            output_dir: None,
        },
        other => {
            return Err(Error::config(
                "preset",
                format!("unknown preset `{other}`; available: {}", PRESETS.join(", ")),
            ))
        }
    };
    cfg.validate()?;
    Ok(cfg)
}
