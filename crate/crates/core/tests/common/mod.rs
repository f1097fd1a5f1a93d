#![allow(dead_code)]

use dynprobit::model::{ModelSpec, OutcomeSpec, PeriodBatch};
use dynprobit::oracle::{brute_force_posterior, discrete_kl, CoefficientGrid, OraclePosterior};
use dynprobit::predictive::{profile_predictive, Profile};
use dynprobit::prior::{CoefficientPrior, NonlocalPrior, ShrinkagePriorSpec};
use dynprobit::smc::{run_parallel_instances, FilterConfig, FilterContext, PeriodState, PreparedBatch};
use dynprobit::synthetic::{generate_scenario, ScenarioSpec};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Two groups, an intercept only, one three-category outcome, six
/// respondents per period.
pub fn tiny_scenario(seed: u64) -> ScenarioSpec {
    let mut spec = ScenarioSpec::new(vec![6, 6], 1, 2, 0.2, 1, seed);
    spec.outcomes = vec![OutcomeSpec::new("y", vec![-0.5, 0.5]).unwrap()];
    spec
}

pub fn tiny_data(seed: u64) -> (ModelSpec, Vec<PeriodBatch>) {
    let scenario = tiny_scenario(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (_, mut reps) = generate_scenario(&scenario, &mut rng).unwrap();
    (scenario.model_spec().unwrap(), reps.remove(0))
}

pub fn nonlocal_prior() -> CoefficientPrior {
    CoefficientPrior::Nonlocal(NonlocalPrior::new(ShrinkagePriorSpec::default()).unwrap())
}

pub fn run_filter(spec: &ModelSpec, batches: &[PeriodBatch], config: FilterConfig) -> (FilterContext, Vec<PeriodState>) {
    let ctx = FilterContext { spec: spec.clone(), prior: nonlocal_prior(), config };
    let prepared: Vec<PreparedBatch> = batches.iter().map(|b| PreparedBatch::new(b, spec).unwrap()).collect();
    let states = run_parallel_instances(&ctx, &prepared).unwrap();
    (ctx, states)
}

/// Profiles built from the last period's respondents.
pub fn last_period_profiles(batches: &[PeriodBatch]) -> Vec<Profile> {
    let last = batches.last().unwrap();
    last.respondents
        .iter()
        .zip(&last.membership_priors)
        .enumerate()
        .map(|(i, (r, prior))| Profile {
            label: format!("respondent {i}"),
            covariates: r.covariates.clone(),
            membership_prior: prior.clone(),
        })
        .collect()
}

/// Mean KL from the oracle predictive to the filter's predictive over the
/// last period's respondents.
pub fn mean_kl_to_oracle(spec: &ModelSpec, batches: &[PeriodBatch], state: &PeriodState, grid: &CoefficientGrid, seed: u64) -> f64 {
    let oracle = brute_force_posterior(spec, &nonlocal_prior(), batches, grid).unwrap();
    mean_kl_to(&oracle, spec, batches, state, seed)
}

/// As [`mean_kl_to_oracle`] with a precomputed oracle.
pub fn mean_kl_to(oracle: &OraclePosterior, spec: &ModelSpec, batches: &[PeriodBatch], state: &PeriodState, seed: u64) -> f64 {
    let pool = state.merged();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let profiles = last_period_profiles(batches);
    let total: f64 = profiles
        .iter()
        .map(|p| {
            let exact = oracle.predictive(&p.covariates, &p.membership_prior).unwrap();
            let approx = profile_predictive(p, &pool, spec, &mut rng).unwrap();
            discrete_kl(&exact, &approx).unwrap().nats
        })
        .sum();
    total / profiles.len() as f64
}

pub fn mean_month_end_ess(state: &PeriodState) -> f64 {
    state.diagnostics.iter().map(|d| d.month_end_ess).sum::<f64>() / state.diagnostics.len() as f64
}

/// Two-sided Kolmogorov–Smirnov statistic of `sample` against `cdf`.
pub fn ks_statistic(sample: &mut [f64], cdf: impl Fn(f64) -> f64) -> f64 {
    sample.sort_by(f64::total_cmp);
    let n = sample.len() as f64;
    sample
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

/// Asymptotic KS critical value at level 0.01.
pub fn ks_critical_001(n: usize) -> f64 {
    1.627_6 / (n as f64).sqrt()
}
