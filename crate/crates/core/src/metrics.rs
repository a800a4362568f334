//! Label Score, Diversity, and Fréchet distance between Gaussian moment fits.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::stats::{mean, population_sd};
use crate::{Error, Result};

/// Mean absolute difference between predicted and conditioning labels.
pub fn label_score(predicted: &[f64], conditioning: &[f64]) -> Result<f64> {
    if predicted.is_empty() || predicted.len() != conditioning.len() {
        return Err(Error::contract(format!(
            "label_score needs equal nonempty lengths, got {} and {}",
            predicted.len(),
            conditioning.len()
        )));
    }
    Ok(predicted
        .iter()
        .zip(conditioning)
        .map(|(p, c)| (p - c).abs())
        .sum::<f64>()
        / predicted.len() as f64)
}

/// Shannon entropy (natural log) of the empirical category frequencies.
pub fn diversity_entropy(ids: &[usize], num_categories: usize) -> Result<f64> {
    if ids.is_empty() {
        return Err(Error::contract("diversity needs at least one sample"));
    }
    let mut counts = vec![0usize; num_categories];
    for &i in ids {
        *counts
            .get_mut(i)
            .ok_or_else(|| Error::contract(format!("category {i} outside 0..{num_categories}")))? += 1;
    }
    let n = ids.len() as f64;
    Ok(-counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            p * p.ln()
        })
        .sum::<f64>())
}

/// Sample mean and unbiased covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMoments {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianMoments {
    /// Needs at least `dim + 1` rows.
    pub fn fit(rows: &[Vec<f64>]) -> Result<Self> {
        let d = rows.first().map_or(0, Vec::len);
        if d == 0 || rows.len() < d + 1 {
            return Err(Error::contract(format!(
                "{} samples cannot fit a {d}-dimensional covariance",
                rows.len()
            )));
        }
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::contract("rows differ in length"));
        }
        let n = rows.len() as f64;
        let mut mu = DVector::zeros(d);
        for r in rows {
            mu += DVector::from_column_slice(r);
        }
        mu /= n;
        let mut cov = DMatrix::zeros(d, d);
        for r in rows {
            let c = DVector::from_column_slice(r) - &mu;
            cov += &c * c.transpose();
        }
        cov /= n - 1.0;
        Ok(Self { mean: mu, cov })
    }
}

fn sqrt_psd(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let eig = SymmetricEigen::new(m.clone());
    if let Some(&bad) = eig.eigenvalues.iter().find(|&&v| v < -1e-8) {
        return Err(Error::contract(format!("{what} has negative eigenvalue {bad}")));
    }
    let s = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&s) * eig.eigenvectors.transpose())
}

/// `‖μ₁ - μ₂‖² + tr(Σ₁ + Σ₂ - 2 (Σ₁^{1/2} Σ₂ Σ₁^{1/2})^{1/2})`.
pub fn frechet_gaussian(
    mean1: &DVector<f64>,
    cov1: &DMatrix<f64>,
    mean2: &DVector<f64>,
    cov2: &DMatrix<f64>,
) -> Result<f64> {
    let d = mean1.len();
    if mean2.len() != d || cov1.shape() != (d, d) || cov2.shape() != (d, d) {
        return Err(Error::contract("Fréchet distance inputs differ in dimension"));
    }
    for (c, name) in [(cov1, "first covariance"), (cov2, "second covariance")] {
        if (c - c.transpose()).abs().max() > 1e-9 * (1.0 + c.abs().max()) {
            return Err(Error::contract(format!("{name} is not symmetric")));
        }
    }
    let s1 = sqrt_psd(cov1, "first covariance")?;
    let mut inner = &s1 * cov2 * &s1;
    inner = (&inner + inner.transpose()) * 0.5;
    let eig = SymmetricEigen::new(inner);
    if let Some(&bad) = eig.eigenvalues.iter().find(|&&v| v < -1e-8) {
        return Err(Error::contract(format!(
            "covariance product has negative eigenvalue {bad}"
        )));
    }
    let tr_sqrt: f64 = eig.eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    let dm = mean1 - mean2;
    Ok((dm.dot(&dm) + cov1.trace() + cov2.trace() - 2.0 * tr_sqrt).max(0.0))
}

pub fn frechet_moments(a: &GaussianMoments, b: &GaussianMoments) -> Result<f64> {
    frechet_gaussian(&a.mean, &a.cov, &b.mean, &b.cov)
}

/// Fake and real features at one label.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelGroup {
    pub label: f64,
    pub fake: Vec<Vec<f64>>,
    pub real: Vec<Vec<f64>>,
}

/// Per-label Fréchet distances; `Err` rows mark labels with too few samples.
pub fn intra_fid(groups: &[LabelGroup]) -> Vec<(f64, std::result::Result<f64, String>)> {
    groups
        .iter()
        .map(|g| {
            let r = GaussianMoments::fit(&g.fake)
                .and_then(|f| Ok((f, GaussianMoments::fit(&g.real)?)))
                .and_then(|(f, r)| frechet_moments(&f, &r))
                .map_err(|e| e.to_string());
            (g.label, r)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub label: f64,
    pub fid: Option<f64>,
    pub diversity: f64,
    pub label_score: f64,
    pub acceptance_rate: f64,
    /// Why this row is excluded from the aggregate, if it is.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flag: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanSd {
    pub mean: f64,
    pub sd: f64,
}

impl MeanSd {
    fn of(xs: &[f64]) -> Self {
        if xs.is_empty() {
            return Self {
                mean: f64::NAN,
                sd: f64::NAN,
            };
        }
        Self {
            mean: mean(xs),
            sd: population_sd(xs),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub fid: MeanSd,
    pub diversity: MeanSd,
    pub label_score: MeanSd,
    pub acceptance_rate: MeanSd,
}

/// Per-label rows plus mean and standard deviation over unflagged rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub per_label: Vec<ReportRow>,
    pub aggregate: Aggregate,
}

pub const METRIC_COLUMNS: [&str; 4] = ["fid", "diversity", "label_score", "acceptance_rate"];

impl EvaluationReport {
    pub fn new(per_label: Vec<ReportRow>) -> Self {
        let aggregate = Self::aggregate_of(&per_label);
        Self { per_label, aggregate }
    }

    fn aggregate_of(rows: &[ReportRow]) -> Aggregate {
        let ok: Vec<&ReportRow> = rows.iter().filter(|r| r.flag.is_none()).collect();
        let col =
            |f: &dyn Fn(&ReportRow) -> Option<f64>| -> Vec<f64> { ok.iter().filter_map(|r| f(r)).collect() };
        Aggregate {
            fid: MeanSd::of(&col(&|r| r.fid)),
            diversity: MeanSd::of(&col(&|r| Some(r.diversity))),
            label_score: MeanSd::of(&col(&|r| Some(r.label_score))),
            acceptance_rate: MeanSd::of(&col(&|r| Some(r.acceptance_rate))),
        }
    }

    /// Whether the stored aggregate equals one recomputed from the rows.
    pub fn aggregate_consistent(&self) -> bool {
        let fresh = Self::aggregate_of(&self.per_label);
        let same = |a: MeanSd, b: MeanSd| {
            let eq = |x: f64, y: f64| (x.is_nan() && y.is_nan()) || (x - y).abs() <= 1e-12 * (1.0 + x.abs());
            eq(a.mean, b.mean) && eq(a.sd, b.sd)
        };
        same(fresh.fid, self.aggregate.fid)
            && same(fresh.diversity, self.aggregate.diversity)
            && same(fresh.label_score, self.aggregate.label_score)
            && same(fresh.acceptance_rate, self.aggregate.acceptance_rate)
    }

    /// One row per label, then `mean` and `sd` footer rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("label,fid,diversity,label_score,acceptance_rate,flag\n");
        for r in &self.per_label {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                fmt_f64(r.label),
                r.fid.map(fmt_f64).unwrap_or_default(),
                fmt_f64(r.diversity),
                fmt_f64(r.label_score),
                fmt_f64(r.acceptance_rate),
                r.flag.as_deref().unwrap_or("").replace([',', '\n'], ";")
            );
        }
        let a = &self.aggregate;
        for (name, pick) in [("mean", 0), ("sd", 1)] {
            let v = |m: MeanSd| fmt_f64(if pick == 0 { m.mean } else { m.sd });
            let _ = writeln!(
                s,
                "{name},{},{},{},{},",
                v(a.fid),
                v(a.diversity),
                v(a.label_score),
                v(a.acceptance_rate)
            );
        }
        s
    }
}

/// Shortest decimal that round-trips to the same `f64`.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}
