//! Synthetic two-period scenarios: sparse coefficients with a Gaussian
//! transition, Dirichlet group weights and ordered-probit responses.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Bernoulli, Distribution, Gamma, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::model::{latent_mean, CoefficientArray, ModelSpec, OutcomeSpec, PeriodBatch, Respondent};
use crate::topic::{sample_membership, LogisticNormalPosterior, SharedCovariance};

/// Variance of first-period coefficients before thresholding.
pub const INITIAL_VARIANCE: f64 = 2.0;
/// Variance of the second-period coefficients around the first.
pub const TRANSITION_VARIANCE: f64 = 0.5;

/// Two outcomes with three categories and two with four.
pub fn default_outcomes() -> Vec<OutcomeSpec> {
    vec![
        OutcomeSpec::new("y1", vec![-0.5, 0.5]).expect("valid thresholds"),
        OutcomeSpec::new("y2", vec![-0.5, 0.5]).expect("valid thresholds"),
        OutcomeSpec::new("y3", vec![-0.75, 0.0, 0.75]).expect("valid thresholds"),
        OutcomeSpec::new("y4", vec![-0.75, 0.0, 0.75]).expect("valid thresholds"),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    /// Respondents in each period.
    pub n_per_period: Vec<usize>,
    /// Covariates including the intercept.
    pub q: usize,
    pub k: usize,
    /// Fraction ς of coefficients set exactly to zero in each period.
    pub sparsity: f64,
    pub replications: usize,
    pub seed: u64,
    #[serde(default = "default_outcomes")]
    pub outcomes: Vec<OutcomeSpec>,
    /// Standard deviation of the entries of each true `η̄_n`.
    #[serde(default = "one")]
    pub eta_sd: f64,
    /// `Σ_η = eta_cov_scale · I`, the covariance handed to the filter.
    #[serde(default = "half")]
    pub eta_cov_scale: f64,
}

fn one() -> f64 {
    1.0
}

fn half() -> f64 {
    0.5
}

impl ScenarioSpec {
    pub fn new(n_per_period: Vec<usize>, q: usize, k: usize, sparsity: f64, replications: usize, seed: u64) -> Self {
        Self {
            n_per_period,
            q,
            k,
            sparsity,
            replications,
            seed,
            outcomes: default_outcomes(),
            eta_sd: 1.0,
            eta_cov_scale: 0.5,
        }
    }

    pub fn validation_errors(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.n_per_period.is_empty() {
            errs.push("scenario: at least one period is required".into());
        }
        if self.q == 0 || self.k < 2 {
            errs.push(format!("scenario: need q >= 1 and k >= 2, got q={} k={}", self.q, self.k));
        }
        if !(self.sparsity >= 0.0 && self.sparsity < 1.0) {
            errs.push(format!("scenario: sparsity must lie in [0, 1), got {}", self.sparsity));
        }
        if self.replications == 0 {
            errs.push("scenario: replications must be positive".into());
        }
        if self.outcomes.is_empty() {
            errs.push("scenario: at least one outcome is required".into());
        }
        if !(self.eta_sd >= 0.0 && self.eta_cov_scale >= 0.0) {
            errs.push("scenario: eta_sd and eta_cov_scale must be nonnegative".into());
        }
        errs
    }

    pub fn model_spec(&self) -> Result<ModelSpec> {
        ModelSpec::new(self.outcomes.clone(), self.q, self.k)
    }
}

/// Everything fixed across replications of a scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTruth {
    /// Thresholded coefficients per period.
    pub coefficients: Vec<CoefficientArray>,
    /// The same arrays before thresholding.
    pub raw_coefficients: Vec<CoefficientArray>,
    /// Covariates per period, one row per respondent.
    pub covariates: Vec<Vec<Vec<f64>>>,
    /// True 0-based groups per period.
    pub memberships: Vec<Vec<usize>>,
    pub theta_bar: Vec<Vec<Vec<f64>>>,
    pub eta_bar: Vec<Vec<Vec<f64>>>,
    /// Membership priors handed to the filter: logistic normal at `η̄_n`.
    pub membership_priors: Vec<Vec<LogisticNormalPosterior>>,
}

/// Sets the `⌈ς·n⌉` entries of smallest magnitude to zero.
pub fn threshold_smallest(values: &mut [f64], sparsity: f64) -> usize {
    let n = values.len();
    let m = ((sparsity * n as f64) - 1e-9).ceil().max(0.0) as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].abs().total_cmp(&values[b].abs()));
    for &i in order.iter().take(m.min(n)) {
        values[i] = 0.0;
    }
    m.min(n)
}

/// Normalized independent Gamma(α_k, 1) draws.
fn sample_dirichlet<R: Rng + ?Sized>(alpha: &[f64], rng: &mut R) -> std::result::Result<Vec<f64>, String> {
    let mut out = Vec::with_capacity(alpha.len());
    for &a in alpha {
        out.push(Gamma::new(a, 1.0).map_err(|e| format!("dirichlet parameter {a}: {e}"))?.sample(rng));
    }
    let total: f64 = out.iter().sum();
    if !(total > 0.0) {
        return Err("dirichlet draw underflowed".into());
    }
    out.iter_mut().for_each(|v| *v /= total);
    Ok(out)
}

/// Draws covariates, coefficients, group weights and memberships.
pub fn generate_truth<R: Rng + ?Sized>(spec: &ScenarioSpec, rng: &mut R) -> Result<SyntheticTruth> {
    let errs = spec.validation_errors();
    if !errs.is_empty() {
        return Err(Error::Config(errs));
    }
    let (k, q, p) = (spec.k, spec.q, spec.outcomes.len());
    let size = k * q * p;
    let coin = Bernoulli::new(0.5).map_err(|e| contract(e.to_string()))?;
    let initial = Normal::new(0.0, INITIAL_VARIANCE.sqrt()).map_err(|e| contract(e.to_string()))?;
    let step_sd = TRANSITION_VARIANCE.sqrt();
    let cov = SharedCovariance::new(DMatrix::identity(k - 1, k - 1) * spec.eta_cov_scale)?;

    let mut coefficients = Vec::new();
    let mut raw_coefficients = Vec::new();
    let mut covariates = Vec::new();
    let mut memberships = Vec::new();
    let mut theta_bar = Vec::new();
    let mut eta_bar = Vec::new();
    let mut membership_priors = Vec::new();
    for (t, &n) in spec.n_per_period.iter().enumerate() {
        let raw: Vec<f64> = match coefficients.last() {
            None => (0..size).map(|_| initial.sample(rng)).collect(),
            Some(prev) => {
                let prev: &CoefficientArray = prev;
                prev.values().iter().map(|&b| b + step_sd * rng.sample::<f64, _>(StandardNormal)).collect()
            }
        };
        let mut thresholded = raw.clone();
        threshold_smallest(&mut thresholded, spec.sparsity);
        raw_coefficients.push(CoefficientArray::from_values(k, q, p, raw)?);
        coefficients.push(CoefficientArray::from_values(k, q, p, thresholded)?);

        let mut xs = Vec::with_capacity(n);
        let mut ss = Vec::with_capacity(n);
        let mut thetas = Vec::with_capacity(n);
        let mut etas = Vec::with_capacity(n);
        let mut priors = Vec::with_capacity(n);
        for _ in 0..n {
            let mut x = vec![1.0];
            x.extend((1..q).map(|_| if coin.sample(rng) { 1.0 } else { 0.0 }));
            let eta: Vec<f64> = (0..k - 1).map(|_| spec.eta_sd * rng.sample::<f64, _>(StandardNormal)).collect();
            let mut alpha: Vec<f64> = eta.iter().map(|e| e.exp()).collect();
            alpha.push(1.0);
            let theta = sample_dirichlet(&alpha, rng).map_err(|e| contract(format!("period {}: {e}", t + 1)))?;
            ss.push(sample_membership(&theta, rng));
            priors.push(LogisticNormalPosterior::with_shared(DVector::from_vec(eta.clone()), Arc::clone(&cov))?);
            xs.push(x);
            thetas.push(theta);
            etas.push(eta);
        }
        covariates.push(xs);
        memberships.push(ss);
        theta_bar.push(thetas);
        eta_bar.push(etas);
        membership_priors.push(priors);
    }
    Ok(SyntheticTruth { coefficients, raw_coefficients, covariates, memberships, theta_bar, eta_bar, membership_priors })
}

/// Draws one replication of responses given the truth; periods are numbered
/// from 1.
pub fn generate_responses<R: Rng + ?Sized>(truth: &SyntheticTruth, spec: &ModelSpec, rng: &mut R) -> Result<Vec<PeriodBatch>> {
    let mut batches = Vec::with_capacity(truth.coefficients.len());
    for (t, b) in truth.coefficients.iter().enumerate() {
        let period = t as u32 + 1;
        let mut respondents = Vec::with_capacity(truth.covariates[t].len());
        for (x, &s) in truth.covariates[t].iter().zip(&truth.memberships[t]) {
            let mu = latent_mean(x, b, s)?;
            let responses = spec
                .outcomes
                .iter()
                .zip(mu)
                .map(|(o, m)| {
                    let z = m + rng.sample::<f64, _>(StandardNormal);
                    1 + o.thresholds().iter().filter(|&&tau| z > tau).count()
                })
                .collect();
            respondents.push(Respondent { covariates: x.clone(), responses, period });
        }
        batches.push(PeriodBatch::new(period, respondents, truth.membership_priors[t].clone())?);
    }
    Ok(batches)
}

/// A scenario's truth plus `replications` independent response draws.
pub fn generate_scenario<R: Rng + ?Sized>(
    spec: &ScenarioSpec,
    rng: &mut R,
) -> Result<(SyntheticTruth, Vec<Vec<PeriodBatch>>)> {
    let truth = generate_truth(spec, rng)?;
    let model = spec.model_spec()?;
    let reps = (0..spec.replications).map(|_| generate_responses(&truth, &model, rng)).collect::<Result<_>>()?;
    Ok((truth, reps))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scenario() -> ScenarioSpec {
        ScenarioSpec::new(vec![20, 25], 3, 5, 0.2, 2, 11)
    }

    #[test]
    fn zero_fraction_matches_ceiling() {
        let spec = scenario();
        let truth = generate_truth(&spec, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        for b in &truth.coefficients {
            let zeros = b.values().iter().filter(|v| **v == 0.0).count();
            assert_eq!(zeros, 12);
        }
        let mut v = vec![3.0, -1.0, 2.0, 0.5, -4.0, 6.0, 7.0];
        assert_eq!(threshold_smallest(&mut v, 0.3), 3);
        assert_eq!(v, vec![3.0, 0.0, 0.0, 0.0, -4.0, 6.0, 7.0]);
    }

    #[test]
    fn no_sparsity_keeps_every_entry() {
        let mut spec = scenario();
        spec.sparsity = 0.0;
        let truth = generate_truth(&spec, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert!(truth.coefficients.iter().all(|b| b.values().iter().all(|v| *v != 0.0)));
    }

    #[test]
    fn generation_is_reproducible_and_well_formed() {
        let spec = scenario();
        let (t1, r1) = generate_scenario(&spec, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let (t2, r2) = generate_scenario(&spec, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(t1, t2);
        assert_eq!(r1.len(), 2);
        let model = spec.model_spec().unwrap();
        for (a, b) in r1.iter().zip(&r2) {
            for (ba, bb) in a.iter().zip(b) {
                ba.validate(&model).unwrap();
                assert_eq!(ba.respondents, bb.respondents);
            }
        }
        assert_eq!(r1[0][1].len(), 25);
        assert!(t1.covariates[0].iter().all(|x| x[0] == 1.0 && x[1..].iter().all(|v| *v == 0.0 || *v == 1.0)));
        for theta in t1.theta_bar.iter().flatten() {
            assert!((theta.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn invalid_spec_lists_every_problem() {
        let mut spec = scenario();
        spec.k = 1;
        spec.sparsity = 1.5;
        match generate_truth(&spec, &mut ChaCha8Rng::seed_from_u64(0)) {
            Err(Error::Config(errs)) => assert_eq!(errs.len(), 2),
            other => panic!("unexpected {other:?}"),
        }
    }
}
