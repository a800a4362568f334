//! Experiment stages: train-sae, train-cdre, sample, evaluate, and the
//! end-to-end benchmark. Every stage reads its inputs from and writes its
//! outputs to one artifact directory; a missing upstream artifact is an error,
//! never a silent retrain.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::cdre::{train_cdre, FeatureSet, LabelNorm, LossRecord, RatioModel};
use crate::checkpoint::Checkpoint;
use crate::config::{preset, ExperimentConfig, ExtractorChoice};
use crate::features::{train_sae, Extractor, FeatureExtractor, IdentityExtractor, SparseAutoencoder};
use crate::metrics::{
    diversity_entropy, fmt_f64, frechet_moments, label_score, EvaluationReport, GaussianMoments, MeanSd,
    ReportRow, METRIC_COLUMNS,
};
use crate::sampler::{
    run_conditional_subsampling, ConstantRatio, FilteredFakePool, GeneratorFeatureSource, LabelSamples,
    RatioScorer, VicinityFilter,
};
use crate::seed::{derive_rng, derive_seed};
use crate::synthetic::{ConditionalGaussianTask, LabelSpace};
use crate::{Error, Result};

/// File layout of one artifact directory.
#[derive(Debug, Clone)]
pub struct Artifacts {
    pub dir: PathBuf,
}

impl Artifacts {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn sae(&self) -> PathBuf {
        self.dir.join("sae.ckpt")
    }

    pub fn sae_history(&self) -> PathBuf {
        self.dir.join("sae_history.csv")
    }

    pub fn ratio(&self, tag: &str) -> PathBuf {
        self.dir.join(format!("{tag}.ckpt"))
    }

    pub fn ratio_history(&self, tag: &str) -> PathBuf {
        self.dir.join(format!("{tag}_history.csv"))
    }

    pub fn samples(&self, name: &str) -> PathBuf {
        self.dir.join("samples").join(name)
    }

    fn ensure(&self) -> Result<()> {
        fs::create_dir_all(&self.dir)?;
        Ok(())
    }
}

/// `per_label` real draws at every training label, seeded per label.
pub fn real_training_set(
    task: &ConditionalGaussianTask,
    per_label: usize,
    seed: u64,
) -> Result<(Array2<f64>, Vec<f64>)> {
    let mut values = Vec::new();
    let mut labels = Vec::new();
    for y in task.train_labels() {
        let mut rng = derive_rng(seed, "real-train", Some(y));
        for d in task.sample_real(y, per_label, &mut rng)? {
            values.extend(d.features);
            labels.push(y);
        }
    }
    let x = Array2::from_shape_vec((labels.len(), task.dim()), values)
        .map_err(|e| Error::contract(e.to_string()))?;
    Ok((x, labels))
}

fn write_csv(path: &Path, header: &[String], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(header).map_err(csv_err)?;
    for r in rows {
        w.write_record(&r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Schema(format!("{other:?}")),
    }
}

fn strings(xs: &[&str]) -> Vec<String> {
    xs.iter().map(|s| s.to_string()).collect()
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

pub fn load_sae(art: &Artifacts) -> Result<SparseAutoencoder> {
    SparseAutoencoder::load(&art.sae())
}

/// The configured feature extractor; SAE weights come from the artifact directory.
pub fn load_extractor(cfg: &ExperimentConfig, art: &Artifacts) -> Result<Extractor> {
    let dim = cfg.task.dim;
    match cfg.extractor {
        ExtractorChoice::Identity => Ok(Extractor::Identity(IdentityExtractor { dim })),
        ExtractorChoice::Sae => {
            let sae = load_sae(art)?;
            if sae.dim() != dim {
                return Err(Error::Mismatch(format!(
                    "SAE checkpoint has dimension {}, task has {dim}",
                    sae.dim()
                )));
            }
            Ok(Extractor::Sae(sae))
        }
    }
}

pub fn train_sae_stage(cfg: &ExperimentConfig, art: &Artifacts) -> Result<SparseAutoencoder> {
    art.ensure()?;
    let task = cfg.task()?;
    let (x, labels) = real_training_set(&task, cfg.sae.real_per_label, cfg.seed)?;
    let positions = labels
        .iter()
        .map(|&y| task.position(y))
        .collect::<Result<Vec<_>>>()?;
    let mut tc = cfg.sae.train.clone();
    tc.seed = derive_seed(cfg.seed, "sae", None);
    let (sae, history) = train_sae(x.view(), &positions, &tc)?;
    sae.save(&art.sae())?;
    write_csv(
        &art.sae_history(),
        &strings(&[
            "iteration",
            "epoch",
            "lr",
            "total",
            "reconstruction",
            "label",
            "sparsity",
        ]),
        history.iter().map(|r| {
            vec![
                r.iteration.to_string(),
                r.epoch.to_string(),
                fmt_f64(r.lr),
                fmt_f64(r.loss.total),
                fmt_f64(r.loss.reconstruction),
                fmt_f64(r.loss.label),
                fmt_f64(r.loss.sparsity),
            ]
        }),
    )?;
    Ok(sae)
}

/// How a ratio model was trained; stored in its checkpoint metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingContext {
    pub filter_enabled: bool,
    /// `None` when filtering is off.
    pub zeta: Option<f64>,
    pub extractor: ExtractorChoice,
}

impl TrainingContext {
    pub fn of(cfg: &ExperimentConfig) -> Result<Self> {
        let zeta = cfg.zeta()?;
        Ok(Self {
            filter_enabled: cfg.filter_active(),
            zeta: zeta.is_finite().then_some(zeta),
            extractor: cfg.extractor,
        })
    }
}

fn write_cdre_history(path: &Path, history: &[LossRecord]) -> Result<()> {
    write_csv(
        path,
        &strings(&["iteration", "epoch", "lr", "objective", "csp", "penalty"]),
        history.iter().map(|r| {
            vec![
                r.iteration.to_string(),
                r.epoch.to_string(),
                fmt_f64(r.lr),
                fmt_f64(r.objective),
                fmt_f64(r.csp),
                fmt_f64(r.penalty),
            ]
        }),
    )
}

fn label_norm_for(task: &ConditionalGaussianTask) -> Result<LabelNorm> {
    match task.spec().label_space {
        LabelSpace::Classes { .. } => Ok(LabelNorm::IDENTITY),
        LabelSpace::Interval { .. } => LabelNorm::fit(&task.train_labels()),
    }
}

/// Trains a ratio model under `tag`. With the filter on, fakes come from a
/// per-label pool of vicinity-filtered draws; otherwise fresh generator draws.
pub fn train_cdre_stage(cfg: &ExperimentConfig, art: &Artifacts, tag: &str) -> Result<RatioModel> {
    art.ensure()?;
    let task = cfg.task()?;
    let extractor = load_extractor(cfg, art)?;
    let (x, labels) = real_training_set(&task, cfg.ratio.real_per_label, cfg.seed)?;
    let real = FeatureSet::new(extractor.extract_batch(x.view())?, labels)?;
    let mut init_rng = derive_rng(cfg.seed, "ratio-init", None);
    let model = RatioModel::new(
        task.dim(),
        cfg.embedding(),
        label_norm_for(&task)?,
        &cfg.ratio.architecture,
        &mut init_rng,
    )?;
    let mut tc = cfg.ratio.train.clone();
    tc.seed = derive_seed(cfg.seed, "cdre", None);
    let (model, history) = if cfg.filter_active() {
        let sae = load_sae(art)?;
        let filter = VicinityFilter::new(cfg.zeta()?, &sae)?;
        let mut pool = FilteredFakePool::build(
            &task,
            &extractor,
            filter,
            &task.train_labels(),
            cfg.sampler.filter.pool_factor * tc.batch_size,
            cfg.sampler.budget_factor,
            derive_seed(cfg.seed, "pool", None),
        )?;
        train_cdre(&real, &mut pool, model, &tc)?
    } else {
        let mut source = GeneratorFeatureSource {
            generator: &task,
            extractor: &extractor,
        };
        train_cdre(&real, &mut source, model, &tc)?
    };
    let mut ckpt = model.to_checkpoint()?;
    ckpt.metadata["training"] = serde_json::to_value(TrainingContext::of(cfg)?)?;
    ckpt.save(&art.ratio(tag))?;
    write_cdre_history(&art.ratio_history(tag), &history)?;
    Ok(model)
}

/// Loads a ratio model and checks it against the configuration, including the
/// filter coupling between training and sampling.
pub fn load_ratio_for(cfg: &ExperimentConfig, art: &Artifacts, tag: &str) -> Result<RatioModel> {
    let ckpt = Checkpoint::load(&art.ratio(tag))?;
    let model = RatioModel::from_checkpoint(&ckpt)?;
    if model.feature_dim() != cfg.task.dim {
        return Err(Error::Mismatch(format!(
            "ratio model expects {}-dimensional features, task has {}",
            model.feature_dim(),
            cfg.task.dim
        )));
    }
    if *model.embedding() != cfg.embedding() {
        return Err(Error::Mismatch(
            "ratio model embedding differs from the configuration".into(),
        ));
    }
    let trained: TrainingContext = serde_json::from_value(ckpt.metadata["training"].clone())
        .map_err(|_| Error::Mismatch("ratio checkpoint lacks its training context".into()))?;
    let wanted = TrainingContext::of(cfg)?;
    let zeta_eq = match (trained.zeta, wanted.zeta) {
        (Some(a), Some(b)) => (a - b).abs() <= 1e-12,
        (None, None) => true,
        _ => false,
    };
    if trained.filter_enabled != wanted.filter_enabled || !zeta_eq {
        return Err(Error::Mismatch(format!(
            "ratio model was trained with filter={} zeta={:?} but sampling uses filter={} zeta={:?}",
            trained.filter_enabled, trained.zeta, wanted.filter_enabled, wanted.zeta
        )));
    }
    if trained.extractor != wanted.extractor {
        return Err(Error::Mismatch(
            "ratio model was trained on a different extractor".into(),
        ));
    }
    Ok(model)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Raw generator output.
    Baseline,
    /// Ratio-guided rejection sampling, filtered if the configuration says so.
    CdrRs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelSummary {
    pub label: f64,
    pub file: String,
    pub accepted: usize,
    pub proposed: usize,
    pub acceptance_rate: f64,
    pub max_ratio: f64,
    pub raw_draws: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// Set when the label ran out of proposal budget.
    #[serde(default)]
    pub budget_exhausted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleSummary {
    pub method: Method,
    pub filter_enabled: bool,
    pub zeta: Option<f64>,
    pub labels: Vec<LabelSummary>,
}

impl SampleSummary {
    pub fn failures(&self) -> impl Iterator<Item = &LabelSummary> {
        self.labels.iter().filter(|l| l.error.is_some())
    }
}

pub const SUMMARY_FILE: &str = "summary.json";
pub const TIMING_FILE: &str = "timing.json";

fn sample_file_name(i: usize) -> String {
    format!("label_{i:03}.csv")
}

fn write_samples(path: &Path, label: f64, res: &LabelSamples, filtered: bool, dim: usize) -> Result<()> {
    let mut header: Vec<String> = (0..dim).map(|j| format!("f{j}")).collect();
    header.push("label".into());
    if filtered {
        header.push("predicted_label".into());
    }
    header.extend(strings(&[
        "ratio",
        "acceptance_index",
        "actual_label",
        "attribute",
    ]));
    write_csv(
        path,
        &header,
        res.samples.iter().map(|s| {
            let mut row: Vec<String> = s.proposal.features.iter().map(|&v| fmt_f64(v)).collect();
            row.push(fmt_f64(label));
            if filtered {
                row.push(s.proposal.predicted.map(fmt_f64).unwrap_or_default());
            }
            row.push(fmt_f64(s.ratio));
            row.push(s.proposal_index.to_string());
            row.push(fmt_f64(s.proposal.actual_label));
            row.push(s.proposal.attribute.to_string());
            row
        }),
    )
}

/// Samples every label of interest into `samples/<name>/`. Per-label failures
/// are recorded in the summary rather than aborting the run.
pub fn sample_stage(
    cfg: &ExperimentConfig,
    art: &Artifacts,
    ratio_tag: &str,
    method: Method,
    name: &str,
    threads: usize,
) -> Result<SampleSummary> {
    let task = cfg.task()?;
    let extractor = load_extractor(cfg, art)?;
    let labels = cfg.labels_of_interest()?;
    let filtered = method == Method::CdrRs && cfg.filter_active();
    let model;
    let sae;
    let mut filter = None;
    let scorer: &dyn RatioScorer = match method {
        Method::Baseline => &ConstantRatio(1.0),
        Method::CdrRs => {
            model = load_ratio_for(cfg, art, ratio_tag)?;
            if filtered {
                sae = load_sae(art)?;
                filter = Some(VicinityFilter::new(cfg.zeta()?, &sae)?);
            }
            &model
        }
    };
    let mut settings = cfg.sampler.settings();
    if method == Method::Baseline {
        // A constant ratio accepts everything; burn-in would only waste draws.
        settings.burn_in = 1;
    }
    let started = Instant::now();
    let results = run_conditional_subsampling(
        &task,
        &extractor,
        scorer,
        filter,
        &labels,
        cfg.sampler.n_target,
        &settings,
        derive_seed(cfg.seed, name, None),
        threads,
    );
    let wall = started.elapsed();
    log::info!("sampled {} labels for `{name}` in {wall:.2?}", labels.len());
    let dir = art.samples(name);
    if dir.exists() {
        fs::remove_dir_all(&dir)?;
    }
    fs::create_dir_all(&dir)?;
    let mut rows = Vec::new();
    for (i, (y, res)) in results.into_iter().enumerate() {
        let file = sample_file_name(i);
        let row = match res {
            Ok(r) => {
                write_samples(&dir.join(&file), y, &r, filtered, task.dim())?;
                LabelSummary {
                    label: y,
                    file,
                    accepted: r.session.accepted,
                    proposed: r.session.proposed,
                    acceptance_rate: r.session.acceptance_rate(),
                    max_ratio: r.session.max_ratio,
                    raw_draws: r.raw_draws,
                    error: None,
                    budget_exhausted: false,
                }
            }
            Err(e) => {
                log::error!("label {y}: {e}");
                let (accepted, proposed, rate) = match &e {
                    Error::BudgetExhausted {
                        accepted,
                        proposed,
                        rate,
                        ..
                    } => (*accepted, *proposed, *rate),
                    _ => (0, 0, 0.0),
                };
                LabelSummary {
                    label: y,
                    file: String::new(),
                    accepted,
                    proposed,
                    acceptance_rate: rate,
                    max_ratio: 0.0,
                    raw_draws: 0,
                    budget_exhausted: matches!(e, Error::BudgetExhausted { .. }),
                    error: Some(e.to_string()),
                }
            }
        };
        rows.push(row);
    }
    let zeta = if filtered { Some(cfg.zeta()?) } else { None };
    let summary = SampleSummary {
        method,
        filter_enabled: filtered,
        zeta,
        labels: rows,
    };
    write_json(&dir.join(SUMMARY_FILE), &summary)?;
    // Kept apart from the summary so that the summary stays reproducible byte for byte.
    write_json(
        &dir.join(TIMING_FILE),
        &serde_json::json!({ "wall_seconds": wall.as_secs_f64() }),
    )?;
    Ok(summary)
}

/// One parsed sample file.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleFile {
    pub features: Vec<Vec<f64>>,
    pub label: f64,
    pub actual_labels: Vec<f64>,
    pub attributes: Vec<usize>,
    pub ratios: Vec<f64>,
}

fn column(headers: &csv::StringRecord, name: &str, file: &Path) -> Result<usize> {
    headers
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| Error::Schema(format!("{} lacks column `{name}`", file.display())))
}

fn parse_cell<T: std::str::FromStr>(rec: &csv::StringRecord, i: usize, name: &str, file: &Path) -> Result<T> {
    rec.get(i)
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Schema(format!("{}: bad value in column `{name}`", file.display())))
}

pub fn read_sample_file(path: &Path, dim: usize) -> Result<SampleFile> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let headers = r.headers().map_err(csv_err)?.clone();
    let fcols = (0..dim)
        .map(|j| column(&headers, &format!("f{j}"), path))
        .collect::<Result<Vec<_>>>()?;
    let lc = column(&headers, "label", path)?;
    let rc = column(&headers, "ratio", path)?;
    let ac = column(&headers, "actual_label", path)?;
    let tc = column(&headers, "attribute", path)?;
    column(&headers, "acceptance_index", path)?;
    let mut out = SampleFile {
        features: Vec::new(),
        label: f64::NAN,
        actual_labels: Vec::new(),
        attributes: Vec::new(),
        ratios: Vec::new(),
    };
    for rec in r.records() {
        let rec = rec.map_err(csv_err)?;
        out.features.push(
            fcols
                .iter()
                .enumerate()
                .map(|(j, &c)| parse_cell(&rec, c, &format!("f{j}"), path))
                .collect::<Result<_>>()?,
        );
        out.label = parse_cell(&rec, lc, "label", path)?;
        out.ratios.push(parse_cell(&rec, rc, "ratio", path)?);
        out.actual_labels
            .push(parse_cell(&rec, ac, "actual_label", path)?);
        out.attributes.push(parse_cell(&rec, tc, "attribute", path)?);
    }
    Ok(out)
}

/// Per-label metrics of a sample directory against fresh real draws.
pub fn evaluate_dir(cfg: &ExperimentConfig, art: &Artifacts, dir: &Path) -> Result<EvaluationReport> {
    let task = cfg.task()?;
    let extractor = load_extractor(cfg, art)?;
    let summary_path = dir.join(SUMMARY_FILE);
    if !summary_path.exists() {
        return Err(Error::MissingArtifact(summary_path));
    }
    let summary: SampleSummary = serde_json::from_str(&fs::read_to_string(&summary_path)?)
        .map_err(|e| Error::Schema(format!("{}: {e}", summary_path.display())))?;
    let mut rows = Vec::new();
    for entry in &summary.labels {
        let y = entry.label;
        if let Some(err) = &entry.error {
            rows.push(ReportRow {
                label: y,
                fid: None,
                diversity: f64::NAN,
                label_score: f64::NAN,
                acceptance_rate: entry.acceptance_rate,
                flag: Some(format!("sampling failed: {err}")),
            });
            continue;
        }
        let file = read_sample_file(&dir.join(&entry.file), task.dim())?;
        if file.features.is_empty() {
            return Err(Error::Schema(format!("{} has no rows", entry.file)));
        }
        let mut rng = derive_rng(cfg.seed, "eval-real", Some(y));
        let real_draws = task.sample_real(y, cfg.eval.real_per_label, &mut rng)?;
        let real_x = Array2::from_shape_vec(
            (real_draws.len(), task.dim()),
            real_draws.into_iter().flat_map(|d| d.features).collect(),
        )
        .map_err(|e| Error::contract(e.to_string()))?;
        let real_h: Vec<Vec<f64>> = extractor
            .extract_batch(real_x.view())?
            .rows()
            .into_iter()
            .map(|r| r.to_vec())
            .collect();
        let pos = task.position(y)?;
        let actual = file
            .actual_labels
            .iter()
            .map(|&a| task.position(a))
            .collect::<Result<Vec<_>>>()?;
        let (fid, flag) = match GaussianMoments::fit(&file.features)
            .and_then(|f| frechet_moments(&f, &GaussianMoments::fit(&real_h)?))
        {
            Ok(v) => (Some(v), None),
            Err(e) => (None, Some(format!("fid unavailable: {e}"))),
        };
        rows.push(ReportRow {
            label: y,
            fid,
            diversity: diversity_entropy(&file.attributes, task.num_attributes())?,
            label_score: label_score(&actual, &vec![pos; actual.len()])?,
            acceptance_rate: entry.acceptance_rate,
            flag,
        });
    }
    Ok(EvaluationReport::new(rows))
}

fn write_report(dir: &Path, stem: &str, report: &EvaluationReport) -> Result<()> {
    fs::write(dir.join(format!("{stem}.csv")), report.to_csv())?;
    write_json(&dir.join(format!("{stem}.json")), report)
}

fn metric_means(r: &EvaluationReport) -> [f64; 4] {
    let a = r.aggregate;
    [
        a.fid.mean,
        a.diversity.mean,
        a.label_score.mean,
        a.acceptance_rate.mean,
    ]
}

/// Reports for both directories plus a comparison table (`subsampled - baseline`).
pub fn evaluate_stage(
    cfg: &ExperimentConfig,
    art: &Artifacts,
    baseline: &Path,
    subsampled: &Path,
    out: &Path,
) -> Result<(EvaluationReport, EvaluationReport)> {
    fs::create_dir_all(out)?;
    let b = evaluate_dir(cfg, art, baseline)?;
    let s = evaluate_dir(cfg, art, subsampled)?;
    write_report(out, "report_baseline", &b)?;
    write_report(out, "report_subsampled", &s)?;
    let (bm, sm) = (metric_means(&b), metric_means(&s));
    let mut header = vec!["row".to_string()];
    header.extend(METRIC_COLUMNS.iter().map(|s| s.to_string()));
    let row = |name: &str, v: [f64; 4]| {
        let mut r = vec![name.to_string()];
        r.extend(v.iter().map(|&x| fmt_f64(x)));
        r
    };
    let delta = [0, 1, 2, 3].map(|i| sm[i] - bm[i]);
    write_csv(
        &out.join("comparison.csv"),
        &header,
        [row("baseline", bm), row("subsampled", sm), row("delta", delta)],
    )?;
    Ok((b, s))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub method: String,
    pub metric: String,
    pub mean: f64,
    pub sd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkSummary {
    pub preset: String,
    pub seed: u64,
    pub records: Vec<MetricRecord>,
    /// Labels whose sampling failed, per method.
    pub failures: BTreeMap<String, Vec<f64>>,
}

impl BenchmarkSummary {
    pub fn metric(&self, method: &str, metric: &str) -> Option<MeanSd> {
        self.records
            .iter()
            .find(|r| r.method == method && r.metric == metric)
            .map(|r| MeanSd {
                mean: r.mean,
                sd: r.sd,
            })
    }
}

pub const BASELINE: &str = "Baseline";
pub const CDR_RS: &str = "cDR-RS";
pub const CDR_RS_FILTER: &str = "cDR-RS (Filter)";
pub const CDR_RS_NO_FILTER: &str = "cDR-RS (No filter)";

/// Runs train -> sample -> evaluate for a preset. Interval-label presets compare
/// the baseline with both filtered and unfiltered subsampling.
pub fn run_benchmark(
    preset_name: &str,
    out: &Path,
    seed: Option<u64>,
    threads: usize,
) -> Result<BenchmarkSummary> {
    let mut cfg = preset(preset_name)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    run_benchmark_config(preset_name, &cfg, out, threads)
}

pub fn run_benchmark_config(
    name: &str,
    cfg: &ExperimentConfig,
    out: &Path,
    threads: usize,
) -> Result<BenchmarkSummary> {
    let art = Artifacts::new(out);
    art.ensure()?;
    fs::write(out.join("config.json"), cfg.to_json()? + "\n")?;
    let interval = matches!(cfg.task.label_space, LabelSpace::Interval { .. });
    let variants: Vec<(&str, &str, ExperimentConfig)> = if interval {
        let mut on = cfg.clone();
        on.sampler.filter.enabled = true;
        let mut off = cfg.clone();
        off.sampler.filter.enabled = false;
        vec![
            (CDR_RS_FILTER, "cdr-rs-filter", on),
            (CDR_RS_NO_FILTER, "cdr-rs-nofilter", off),
        ]
    } else {
        vec![(CDR_RS, "cdr-rs", cfg.clone())]
    };
    let mut timing = BTreeMap::new();
    if variants.iter().any(|(_, _, c)| c.needs_sae()) {
        let t = Instant::now();
        train_sae_stage(cfg, &art)?;
        timing.insert("train-sae".to_string(), t.elapsed().as_secs_f64());
    }
    let mut methods = Vec::new();
    let t = Instant::now();
    let base = sample_stage(cfg, &art, "", Method::Baseline, "baseline", threads)?;
    timing.insert("sample:baseline".to_string(), t.elapsed().as_secs_f64());
    methods.push((BASELINE.to_string(), "baseline".to_string(), cfg.clone(), base));
    for (display, tag, vcfg) in variants {
        let t = Instant::now();
        train_cdre_stage(&vcfg, &art, tag)?;
        timing.insert(format!("train-cdre:{tag}"), t.elapsed().as_secs_f64());
        let t = Instant::now();
        let s = sample_stage(&vcfg, &art, tag, Method::CdrRs, tag, threads)?;
        timing.insert(format!("sample:{tag}"), t.elapsed().as_secs_f64());
        methods.push((display.to_string(), tag.to_string(), vcfg, s));
    }
    let mut records = Vec::new();
    let mut failures = BTreeMap::new();
    for (display, tag, vcfg, summary) in &methods {
        let report = evaluate_dir(vcfg, &art, &art.samples(tag))?;
        write_report(out, &format!("report_{tag}"), &report)?;
        let a = report.aggregate;
        for (metric, v) in METRIC_COLUMNS
            .iter()
            .zip([a.fid, a.diversity, a.label_score, a.acceptance_rate])
        {
            records.push(MetricRecord {
                method: display.clone(),
                metric: metric.to_string(),
                mean: v.mean,
                sd: v.sd,
            });
        }
        let failed: Vec<f64> = summary.failures().map(|l| l.label).collect();
        if !failed.is_empty() {
            failures.insert(display.clone(), failed);
        }
    }
    let summary = BenchmarkSummary {
        preset: name.to_string(),
        seed: cfg.seed,
        records,
        failures,
    };
    write_json(&out.join("summary.json"), &summary)?;
    write_csv(
        &out.join("summary.csv"),
        &strings(&["method", "metric", "mean", "sd"]),
        summary
            .records
            .iter()
            .map(|r| vec![r.method.clone(), r.metric.clone(), fmt_f64(r.mean), fmt_f64(r.sd)]),
    )?;
    // Wall-clock times vary between runs, so they stay out of the deterministic outputs.
    let timing_text: String = timing.iter().map(|(k, v)| format!("{k}\t{v:.3}s\n")).collect();
    fs::write(out.join("timing.txt"), timing_text)?;
    Ok(summary)
}
