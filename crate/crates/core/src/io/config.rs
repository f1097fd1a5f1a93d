//! Run configuration: a TOML file with `model`, `prior`, `filter`, `io` and
//! `report` blocks. Everything except `model` has defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{ModelSpec, OutcomeSpec};
use crate::prior::{CoefficientPrior, PriorKind, RandomWalkSpec, ShrinkagePriorSpec};
use crate::smc::{FilterConfig, FilterContext};

use super::data::{read_membership_priors, read_stm_hyper};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelBlock {
    pub groups: usize,
    /// Covariates including any intercept column.
    pub covariates: usize,
    pub outcomes: Vec<OutcomeSpec>,
}

impl ModelBlock {
    fn validation_errors(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.groups == 0 {
            errs.push("model: groups must be at least 1".into());
        }
        if self.groups > u16::MAX as usize {
            errs.push(format!("model: at most {} groups are supported", u16::MAX));
        }
        if self.covariates == 0 {
            errs.push("model: covariates must be at least 1".into());
        }
        if self.outcomes.is_empty() {
            errs.push("model: at least one outcome is required".into());
        }
        for (i, o) in self.outcomes.iter().enumerate() {
            if let Err(e) = OutcomeSpec::new(o.name.clone(), o.thresholds().to_vec()) {
                errs.push(format!("model.outcomes[{i}]: {e}"));
            }
            if self.outcomes[..i].iter().any(|p| p.name == o.name) {
                errs.push(format!("model.outcomes[{i}]: duplicate outcome name '{}'", o.name));
            }
        }
        errs
    }

    pub fn spec(&self) -> Result<ModelSpec> {
        ModelSpec::new(self.outcomes.clone(), self.covariates, self.groups)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorBlock {
    pub prior_kind: PriorKind,
    pub mu_neg: f64,
    pub mu_pos: f64,
    pub sigma_neg: f64,
    pub sigma_zero: f64,
    pub sigma_pos: f64,
    pub xi: f64,
    pub init_weights: [f64; 3],
    /// Used only with `prior_kind = "gaussian_rw"`.
    pub random_walk: RandomWalkSpec,
}

impl Default for PriorBlock {
    fn default() -> Self {
        Self::from_spec(&ShrinkagePriorSpec::default())
    }
}

impl PriorBlock {
    pub fn from_spec(s: &ShrinkagePriorSpec) -> Self {
        Self {
            prior_kind: PriorKind::default(),
            mu_neg: s.mu_neg,
            mu_pos: s.mu_pos,
            sigma_neg: s.sigma_neg,
            sigma_zero: s.sigma_zero,
            sigma_pos: s.sigma_pos,
            xi: s.xi,
            init_weights: s.init_weights,
            random_walk: RandomWalkSpec::default(),
        }
    }

    pub fn shrinkage(&self) -> ShrinkagePriorSpec {
        ShrinkagePriorSpec {
            mu_neg: self.mu_neg,
            mu_pos: self.mu_pos,
            sigma_neg: self.sigma_neg,
            sigma_zero: self.sigma_zero,
            sigma_pos: self.sigma_pos,
            xi: self.xi,
            init_weights: self.init_weights,
        }
    }

    fn validation_errors(&self) -> Vec<String> {
        match self.prior_kind {
            PriorKind::NonlocalSas => self.shrinkage().validation_errors(),
            PriorKind::GaussianRw => {
                let rw = self.random_walk;
                if rw.initial_sd > 0.0 && rw.step_sd > 0.0 && rw.initial_sd.is_finite() && rw.step_sd.is_finite() {
                    Vec::new()
                } else {
                    vec![format!("prior.random_walk: standard deviations must be positive, got {rw:?}")]
                }
            }
        }
    }

    pub fn build(&self) -> Result<CoefficientPrior> {
        CoefficientPrior::from_config(self.prior_kind, &self.shrinkage(), self.random_walk)
    }
}

/// Input files and dataset column names. Relative paths are resolved against
/// the directory of the configuration file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IoBlock {
    pub period_column: String,
    /// Defaults to `x1..xQ`.
    pub covariate_columns: Vec<String>,
    /// Defaults to the outcome names.
    pub response_columns: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub priors: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hyper: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub profiles: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportBlock {
    /// Central mass of the reported credible bands.
    pub band_level: f64,
    pub draws_per_particle: usize,
    /// Profile label that relative risks are taken against; the first
    /// profile when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub baseline: Option<String>,
}

impl Default for ReportBlock {
    fn default() -> Self {
        Self { band_level: 0.9, draws_per_particle: 1, baseline: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelBlock,
    #[serde(default)]
    pub prior: PriorBlock,
    #[serde(default)]
    pub filter: FilterConfig,
    #[serde(default)]
    pub io: IoBlock,
    #[serde(default)]
    pub report: ReportBlock,
}

impl RunConfig {
    /// Parses TOML text without touching the filesystem. Paths stay as
    /// written and defaults are not yet filled.
    pub fn from_toml(text: &str, source_name: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse { source_name: source_name.into(), message: e.to_string() })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Parse { source_name: "run configuration".into(), message: e.to_string() })
    }

    /// Fills column-name defaults.
    pub fn fill_defaults(&mut self) {
        if self.io.period_column.is_empty() {
            self.io.period_column = "period".into();
        }
        if self.io.covariate_columns.is_empty() {
            self.io.covariate_columns = (1..=self.model.covariates).map(|i| format!("x{i}")).collect();
        }
        if self.io.response_columns.is_empty() {
            self.io.response_columns = self.model.outcomes.iter().map(|o| o.name.clone()).collect();
        }
    }

    fn resolve_paths(&mut self, base: &Path) {
        for p in [&mut self.io.data, &mut self.io.priors, &mut self.io.hyper, &mut self.io.profiles].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }

    /// Every problem found, checking files and cross-file dimensions too.
    pub fn validation_errors(&self) -> Vec<String> {
        let mut errs = self.model.validation_errors();
        errs.extend(self.prior.validation_errors());
        errs.extend(self.filter.validation_errors());
        let io = &self.io;
        if io.covariate_columns.len() != self.model.covariates {
            errs.push(format!(
                "io.covariate_columns lists {} columns but model.covariates = {}",
                io.covariate_columns.len(),
                self.model.covariates
            ));
        }
        if io.response_columns.len() != self.model.outcomes.len() {
            errs.push(format!(
                "io.response_columns lists {} columns but the model has {} outcomes",
                io.response_columns.len(),
                self.model.outcomes.len()
            ));
        }
        let mut names: Vec<&String> = std::iter::once(&io.period_column).chain(&io.covariate_columns).chain(&io.response_columns).collect();
        names.sort();
        if names.windows(2).any(|w| w[0] == w[1]) {
            errs.push("io: column names must be distinct".into());
        }
        for (key, path) in [("data", &io.data), ("priors", &io.priors), ("hyper", &io.hyper), ("profiles", &io.profiles)] {
            if let Some(p) = path {
                if !p.is_file() {
                    errs.push(format!("io.{key}: file {} does not exist", p.display()));
                }
            }
        }
        if let Some(p) = io.hyper.as_ref().filter(|p| p.is_file()) {
            match read_stm_hyper(p) {
                Ok(h) if h.topics() != self.model.groups => errs.push(format!(
                    "model.groups = {} but hyper file {} has {} topics",
                    self.model.groups,
                    p.display(),
                    h.topics()
                )),
                Ok(_) => {}
                Err(e) => errs.push(format!("io.hyper: {e}")),
            }
        }
        if let Some(p) = io.priors.as_ref().filter(|p| p.is_file()) {
            match read_membership_priors(p) {
                Ok(priors) => {
                    if let Some(bad) = priors.iter().find(|q| q.groups() != self.model.groups) {
                        errs.push(format!(
                            "model.groups = {} but membership priors file {} has K = {}",
                            self.model.groups,
                            p.display(),
                            bad.groups()
                        ));
                    }
                }
                Err(e) => errs.push(format!("io.priors: {e}")),
            }
        }
        let r = &self.report;
        if !(r.band_level > 0.0 && r.band_level < 1.0) {
            errs.push(format!("report.band_level must lie in (0, 1), got {}", r.band_level));
        }
        if r.draws_per_particle == 0 {
            errs.push("report.draws_per_particle must be at least 1".into());
        }
        errs
    }

    pub fn validate(&self) -> Result<()> {
        let errs = self.validation_errors();
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    /// SHA-256 over the blocks that determine filter output (model, prior,
    /// filter), as lowercase hex. File locations and report settings do not
    /// enter.
    pub fn fingerprint(&self) -> String {
        let canonical = serde_json::to_vec(&(&self.model, &self.prior, &self.filter)).expect("config serializes");
        hex::encode(Sha256::digest(&canonical))
    }

    pub fn context(&self) -> Result<FilterContext> {
        Ok(FilterContext { spec: self.model.spec()?, prior: self.prior.build()?, config: self.filter.clone() })
    }
}

/// Reads, completes and validates a run configuration, logging the effective
/// result.
pub fn load_run_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)?;
    let mut cfg = RunConfig::from_toml(&text, &path.display().to_string())?;
    cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")));
    cfg.fill_defaults();
    cfg.validate()?;
    log::info!("effective configuration from {}:\n{}", path.display(), cfg.to_toml()?);
    Ok(cfg)
}
