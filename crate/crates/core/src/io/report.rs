//! Risk and relative-risk tables, predictive pmf files and the run manifest.

use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::ModelSpec;
use crate::predictive::{credible_band, profile_predictive_detailed, relative_risk, risk_probability, PredictivePmf, Profile};
use crate::smc::PeriodState;

use super::config::ReportBlock;
use super::snapshot::SNAPSHOT_VERSION;

/// `P(y_p > cutpoint)` for one profile and period, with a band over the
/// per-particle values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskRow {
    pub period: u32,
    pub profile: String,
    pub outcome: String,
    pub cutpoint: usize,
    pub risk: f64,
    pub band_lower: f64,
    pub band_upper: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelativeRiskRow {
    pub period: u32,
    pub profile: String,
    pub baseline: String,
    pub outcome: String,
    pub cutpoint: usize,
    pub relative_risk: f64,
    pub band_lower: f64,
    pub band_upper: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Report {
    pub risks: Vec<RiskRow>,
    pub relative_risks: Vec<RelativeRiskRow>,
}

impl Report {
    pub fn extend(&mut self, other: Report) {
        self.risks.extend(other.risks);
        self.relative_risks.extend(other.relative_risks);
    }
}

/// Risks at every cutpoint of every outcome for each profile, and relative
/// risks of every other profile against the baseline.
pub fn period_report<R: Rng + ?Sized>(
    state: &PeriodState,
    profiles: &[Profile],
    spec: &ModelSpec,
    cfg: &ReportBlock,
    rng: &mut R,
) -> Result<Report> {
    let mut report = Report::default();
    if profiles.is_empty() {
        return Ok(report);
    }
    let baseline = match &cfg.baseline {
        Some(label) => profiles
            .iter()
            .position(|p| &p.label == label)
            .ok_or_else(|| Error::Contract(format!("baseline profile '{label}' is not among the profiles")))?,
        None => 0,
    };
    let pool = state.merged();
    let predictions = profiles
        .iter()
        .map(|p| profile_predictive_detailed(p, &pool, spec, cfg.draws_per_particle, rng))
        .collect::<Result<Vec<_>>>()?;
    for (o, outcome) in spec.outcomes.iter().enumerate() {
        for cut in 1..outcome.categories() {
            let base_particles = predictions[baseline].particle_risks(o, cut)?;
            let base_risk = risk_probability(&predictions[baseline].pmf, o, cut)?;
            for (i, (profile, pred)) in profiles.iter().zip(&predictions).enumerate() {
                let particles = pred.particle_risks(o, cut)?;
                let risk = risk_probability(&pred.pmf, o, cut)?;
                let (lo, hi) = credible_band(&particles, cfg.band_level)?;
                report.risks.push(RiskRow {
                    period: state.period,
                    profile: profile.label.clone(),
                    outcome: outcome.name.clone(),
                    cutpoint: cut,
                    risk,
                    band_lower: lo,
                    band_upper: hi,
                });
                if i == baseline {
                    continue;
                }
                let ratios = particles
                    .iter()
                    .zip(&base_particles)
                    .filter(|(_, b)| **b > 0.0)
                    .map(|(a, b)| a / b)
                    .collect::<Vec<_>>();
                let (lo, hi) = if ratios.is_empty() { (f64::NAN, f64::NAN) } else { credible_band(&ratios, cfg.band_level)? };
                report.relative_risks.push(RelativeRiskRow {
                    period: state.period,
                    profile: profile.label.clone(),
                    baseline: profiles[baseline].label.clone(),
                    outcome: outcome.name.clone(),
                    cutpoint: cut,
                    relative_risk: relative_risk(risk, base_risk).unwrap_or(f64::NAN),
                    band_lower: lo,
                    band_upper: hi,
                });
            }
        }
    }
    Ok(report)
}

fn csv_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Parse { source_name: path.display().to_string(), message: e.to_string() }
}

fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `risk.csv` and `relative_risk.csv` into `dir` unless the report is
/// empty; returns the files written.
pub fn write_report(dir: &Path, report: &Report) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    if report.risks.is_empty() {
        return Ok(written);
    }
    let risk = dir.join("risk.csv");
    write_rows(&risk, &report.risks)?;
    written.push(risk);
    let rr = dir.join("relative_risk.csv");
    write_rows(&rr, &report.relative_risks)?;
    written.push(rr);
    Ok(written)
}

/// Writes a risk table to an explicit path and its relative risks next to it
/// as `<stem>_relative_risk.csv`.
pub fn write_report_at(path: &Path, report: &Report) -> Result<PathBuf> {
    write_rows(path, &report.risks)?;
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "risk".into());
    let rr = path.with_file_name(format!("{stem}_relative_risk.csv"));
    write_rows(&rr, &report.relative_risks)?;
    Ok(rr)
}

/// A pmf as CSV: one column per outcome (1-based categories) plus `mass`,
/// rows in lattice order.
pub fn write_pmf_csv(path: &Path, pmf: &PredictivePmf, spec: &ModelSpec) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut header: Vec<String> = spec.outcomes.iter().map(|o| o.name.clone()).collect();
    header.push("mass".into());
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    let mut y = vec![1usize; pmf.categories.len()];
    for &m in &pmf.mass {
        let mut row: Vec<String> = y.iter().map(usize::to_string).collect();
        row.push(format!("{m:e}"));
        w.write_record(&row).map_err(|e| csv_err(path, e))?;
        for p in (0..y.len()).rev() {
            y[p] += 1;
            if y[p] <= pmf.categories[p] {
                break;
            }
            y[p] = 1;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_pmf_csv(path: &Path) -> Result<PredictivePmf> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let width = reader.headers().map_err(|e| csv_err(path, e))?.len();
    if width < 2 {
        return Err(csv_err(path, "a pmf file needs outcome columns and a mass column"));
    }
    let p = width - 1;
    let mut categories = vec![0usize; p];
    let mut cells = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let parse_cat = |j: usize| rec[j].trim().parse::<usize>().map_err(|e| csv_err(path, format!("line {}: {e}", i + 2)));
        let y = (0..p).map(parse_cat).collect::<Result<Vec<_>>>()?;
        let m: f64 = rec[p].trim().parse().map_err(|e| csv_err(path, format!("line {}: {e}", i + 2)))?;
        for (c, &v) in categories.iter_mut().zip(&y) {
            *c = (*c).max(v);
        }
        cells.push((y, m));
    }
    let mut mass = vec![f64::NAN; categories.iter().product()];
    let probe = PredictivePmf { categories: categories.clone(), mass: Vec::new(), draws: 0 };
    for (y, m) in cells {
        let idx = probe.index(&y).map_err(|e| csv_err(path, e))?;
        mass[idx] = m;
    }
    if mass.iter().any(|m| m.is_nan()) {
        return Err(csv_err(path, "pmf file does not cover the whole outcome lattice"));
    }
    PredictivePmf::new(categories, mass, 0).map_err(|e| csv_err(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeriodTiming {
    pub period: u32,
    pub observations: usize,
    pub wall_clock_seconds: f64,
}

/// Enough to reproduce a run: the seed, what went in, and what build ran it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub package_version: String,
    pub snapshot_version: u32,
    pub seed: u64,
    pub config_fingerprint: String,
    /// SHA-256 over the input files, in argument order.
    pub data_hash: String,
    /// SHA-256 over the fingerprint and the data hash.
    pub run_hash: String,
    pub periods: Vec<PeriodTiming>,
    pub outputs: Vec<String>,
}

impl Manifest {
    pub fn new(seed: u64, config_fingerprint: String, data_hash: String) -> Self {
        let run_hash = hex::encode(Sha256::digest(format!("{config_fingerprint}:{data_hash}").as_bytes()));
        Self {
            package_version: env!("CARGO_PKG_VERSION").into(),
            snapshot_version: SNAPSHOT_VERSION,
            seed,
            config_fingerprint,
            data_hash,
            run_hash,
            periods: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(self).map_err(|e| csv_err(&path, e))?;
        std::fs::write(&path, text)?;
        Ok(path)
    }
}

/// SHA-256 over the contents of `paths`, each prefixed with its length.
pub fn hash_files(paths: &[&Path]) -> Result<String> {
    let mut h = Sha256::new();
    for p in paths {
        let bytes = std::fs::read(p)?;
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(hex::encode(h.finalize()))
}
