//! Respondent datasets (CSV), membership priors, topic-model hyperparameters
//! and prediction profiles (JSON).

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelSpec, PeriodBatch, Respondent};
use crate::predictive::Profile;
use crate::topic::{laplace_theta_posterior, DocumentCounts, LogisticNormalPosterior, SharedCovariance, StmHyper};

use super::config::IoBlock;

fn parse_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Parse { source_name: path.display().to_string(), message: message.into() }
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| parse_err(path, e.to_string()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| parse_err(path, e.to_string()))?;
    std::fs::write(path, text)?;
    Ok(())
}

fn matrix_from_rows(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>> {
    let n = rows.len();
    let m = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != m) {
        return Err(Error::Contract(format!("{what}: rows have unequal lengths")));
    }
    Ok(DMatrix::from_fn(n, m, |i, j| rows[i][j]))
}

fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

/// Reads a dataset with a header row. Columns are found by name, so their
/// order in the file is free; rows keep file order.
pub fn read_dataset(path: &Path, spec: &ModelSpec, io: &IoBlock) -> Result<Vec<Respondent>> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path).map_err(|e| parse_err(path, e.to_string()))?;
    let headers = reader.headers().map_err(|e| parse_err(path, e.to_string()))?.clone();
    let find = |name: &str| {
        headers.iter().position(|h| h == name).ok_or_else(|| parse_err(path, format!("missing column '{name}'")))
    };
    let period_col = find(&io.period_column)?;
    let cov_cols = io.covariate_columns.iter().map(|c| find(c)).collect::<Result<Vec<_>>>()?;
    let resp_cols = io.response_columns.iter().map(|c| find(c)).collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let line = i + 2;
        let record = record.map_err(|e| parse_err(path, e.to_string()))?;
        let field = |c: usize| record.get(c).unwrap_or("");
        let bad = |c: usize, e: &dyn std::fmt::Display| parse_err(path, format!("line {line}, column '{}': {e}", &headers[c]));
        let period: u32 = field(period_col).parse().map_err(|e| bad(period_col, &e))?;
        let covariates = cov_cols.iter().map(|&c| field(c).parse::<f64>().map_err(|e| bad(c, &e))).collect::<Result<Vec<_>>>()?;
        let responses = resp_cols.iter().map(|&c| field(c).parse::<usize>().map_err(|e| bad(c, &e))).collect::<Result<Vec<_>>>()?;
        let r = Respondent { covariates, responses, period };
        spec.validate_respondent(&r).map_err(|e| parse_err(path, format!("line {line}: {e}")))?;
        rows.push(r);
    }
    Ok(rows)
}

pub fn write_dataset(path: &Path, batches: &[PeriodBatch], io: &IoBlock) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| parse_err(path, e.to_string()))?;
    let header: Vec<&str> =
        std::iter::once(io.period_column.as_str()).chain(io.covariate_columns.iter().map(String::as_str)).chain(io.response_columns.iter().map(String::as_str)).collect();
    w.write_record(&header).map_err(|e| parse_err(path, e.to_string()))?;
    for b in batches {
        for r in &b.respondents {
            let row: Vec<String> = std::iter::once(b.period.to_string())
                .chain(r.covariates.iter().map(|v| v.to_string()))
                .chain(r.responses.iter().map(|v| v.to_string()))
                .collect();
            w.write_record(&row).map_err(|e| parse_err(path, e.to_string()))?;
        }
    }
    w.flush()?;
    Ok(())
}

/// One respondent's posterior over `η`: a mean with either its own covariance
/// or the name of a shared one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PosteriorRecord {
    pub mean: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cov: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shared: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MembershipPriorFile {
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub shared: BTreeMap<String, Vec<Vec<f64>>>,
    pub records: Vec<PosteriorRecord>,
}

impl PosteriorRecord {
    fn build(&self, shared: &BTreeMap<String, Arc<SharedCovariance>>) -> Result<LogisticNormalPosterior> {
        let mean = DVector::from_vec(self.mean.clone());
        match (&self.cov, &self.shared) {
            (Some(cov), None) => LogisticNormalPosterior::new(mean, matrix_from_rows(cov, "eta covariance")?),
            (None, Some(name)) => {
                let cov = shared.get(name).ok_or_else(|| Error::Contract(format!("unknown shared covariance '{name}'")))?;
                LogisticNormalPosterior::with_shared(mean, cov.clone())
            }
            _ => Err(Error::Contract("a posterior record needs exactly one of 'cov' and 'shared'".into())),
        }
    }
}

impl MembershipPriorFile {
    pub fn build(&self) -> Result<Vec<LogisticNormalPosterior>> {
        let shared = self
            .shared
            .iter()
            .map(|(name, rows)| Ok((name.clone(), SharedCovariance::new(matrix_from_rows(rows, name)?)?)))
            .collect::<Result<BTreeMap<_, _>>>()?;
        self.records.iter().map(|r| r.build(&shared)).collect()
    }

    /// Encodes posteriors, naming each distinct shared covariance once.
    pub fn from_posteriors(posteriors: &[LogisticNormalPosterior]) -> Self {
        let mut names: Vec<(*const SharedCovariance, String)> = Vec::new();
        let mut file = Self::default();
        for p in posteriors {
            let ptr = Arc::as_ptr(p.shared_cov());
            let name = match names.iter().find(|(q, _)| *q == ptr) {
                Some((_, n)) => n.clone(),
                None => {
                    let n = format!("cov{}", names.len());
                    file.shared.insert(n.clone(), matrix_rows(p.cov()));
                    names.push((ptr, n.clone()));
                    n
                }
            };
            file.records.push(PosteriorRecord { mean: p.mean().iter().copied().collect(), cov: None, shared: Some(name) });
        }
        file
    }
}

pub fn read_membership_priors(path: &Path) -> Result<Vec<LogisticNormalPosterior>> {
    let file: MembershipPriorFile = read_json(path)?;
    file.build().map_err(|e| parse_err(path, e.to_string()))
}

pub fn write_membership_priors(path: &Path, posteriors: &[LogisticNormalPosterior]) -> Result<()> {
    write_json(path, &MembershipPriorFile::from_posteriors(posteriors))
}

/// Groups respondents (with their membership priors, row-aligned) into
/// per-period batches in increasing period order.
pub fn assemble_batches(rows: Vec<Respondent>, priors: Vec<LogisticNormalPosterior>, spec: &ModelSpec) -> Result<Vec<PeriodBatch>> {
    if rows.len() != priors.len() {
        return Err(Error::Contract(format!("{} respondents but {} membership priors", rows.len(), priors.len())));
    }
    let mut by_period: BTreeMap<u32, (Vec<Respondent>, Vec<LogisticNormalPosterior>)> = BTreeMap::new();
    for (r, p) in rows.into_iter().zip(priors) {
        let slot = by_period.entry(r.period).or_default();
        slot.0.push(r);
        slot.1.push(p);
    }
    by_period
        .into_iter()
        .map(|(period, (rs, ps))| {
            let b = PeriodBatch::new(period, rs, ps)?;
            b.validate(spec)?;
            Ok(b)
        })
        .collect()
}

/// Topic-model hyperparameters with `Γ` given as sparse triplets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StmHyperFile {
    pub topics: usize,
    pub vocabulary: usize,
    /// `(K−1) × U`.
    pub lambda: Vec<Vec<f64>>,
    /// `(K−1) × (K−1)`.
    pub psi: Vec<Vec<f64>>,
    /// `(topic, word, probability)`, 0-based.
    pub gamma: Vec<(usize, usize, f64)>,
}

impl StmHyperFile {
    pub fn build(&self) -> Result<StmHyper> {
        let lambda = matrix_from_rows(&self.lambda, "lambda")?;
        let psi = matrix_from_rows(&self.psi, "psi")?;
        StmHyper::from_triplets(self.topics, self.vocabulary, &self.gamma, lambda, psi)
    }
}

pub fn read_stm_hyper(path: &Path) -> Result<StmHyper> {
    let file: StmHyperFile = read_json(path)?;
    file.build().map_err(|e| parse_err(path, e.to_string()))
}

/// A profile either carries its membership posterior or the document counts
/// and socio-economic covariates to derive it from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileRecord {
    pub label: String,
    pub covariates: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub posterior: Option<PosteriorRecord>,
    /// `(word, count)` pairs, 0-based word indices.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub document: Option<Vec<(usize, u32)>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub socio: Option<Vec<f64>>,
}

impl ProfileRecord {
    pub fn build(&self, hyper: Option<&StmHyper>) -> Result<Profile> {
        let membership_prior = match (&self.posterior, &self.document, &self.socio) {
            (Some(post), None, None) => post.build(&BTreeMap::new())?,
            (None, document, Some(v)) => {
                let hyper = hyper.ok_or_else(|| {
                    Error::Contract(format!("profile '{}' needs topic-model hyperparameters (io.hyper)", self.label))
                })?;
                let doc = DocumentCounts::new(document.clone().unwrap_or_default());
                laplace_theta_posterior(&doc, v, hyper)?
            }
            _ => {
                return Err(Error::Contract(format!(
                    "profile '{}' needs either 'posterior' or 'socio' (with optional 'document')",
                    self.label
                )))
            }
        };
        Ok(Profile { label: self.label.clone(), covariates: self.covariates.clone(), membership_prior })
    }
}

pub fn read_profiles(path: &Path, hyper: Option<&StmHyper>) -> Result<Vec<Profile>> {
    let records: Vec<ProfileRecord> = read_json(path)?;
    records.iter().map(|r| r.build(hyper)).collect::<Result<_>>().map_err(|e| parse_err(path, e.to_string()))
}
