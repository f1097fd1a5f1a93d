//! The slow-route rejuvenation move on a single coefficient leaves its target
//! invariant: a long chain's histogram matches a grid evaluation of the
//! target.

mod common;

use common::nonlocal_prior;
use dynprobit::model::{CoefficientArray, ModelSpec, OutcomeSpec, PeriodBatch, Respondent};
use dynprobit::smc::{log_rejuvenation_target, rejuvenate, FilterConfig, FilterContext, Particle, PreparedBatch, PreviousPool};
use dynprobit::topic::LogisticNormalPosterior;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const SWEEPS: usize = 10_000;
const BURN_IN: usize = 500;
const LO: f64 = -4.0;
const HI: f64 = 4.0;
const BINS: usize = 32;

fn setup(responses: &[usize]) -> (FilterContext, PreparedBatch) {
    let spec = ModelSpec::new(vec![OutcomeSpec::new("y", vec![-0.5, 0.5]).unwrap()], 1, 1).unwrap();
    let respondents: Vec<Respondent> = responses.iter().map(|&y| Respondent { covariates: vec![1.0], responses: vec![y], period: 1 }).collect();
    let priors = vec![LogisticNormalPosterior::single_group(); respondents.len()];
    let batch = PeriodBatch::new(1, respondents, priors).unwrap();
    let prepared = PreparedBatch::new(&batch, &spec).unwrap();
    let ctx = FilterContext { spec, prior: nonlocal_prior(), config: FilterConfig::default() };
    (ctx, prepared)
}

fn array(b: f64) -> CoefficientArray {
    CoefficientArray::from_values(1, 1, 1, vec![b]).unwrap()
}

/// Total variation between the chain's histogram and the target's bin
/// masses, both restricted to `[LO, HI]`.
fn chain_tv(responses: &[usize], previous: Option<&PreviousPool>, seed: u64) -> f64 {
    let (ctx, batch) = setup(responses);
    let order: Vec<usize> = (0..batch.len()).collect();
    let pos = order.len() - 1;

    let fine = 200;
    let width = (HI - LO) / BINS as f64;
    let mut exact = vec![0.0; BINS];
    for (bin, slot) in exact.iter_mut().enumerate() {
        for i in 0..fine {
            let b = LO + width * (bin as f64 + (i as f64 + 0.5) / fine as f64);
            *slot += log_rejuvenation_target(&ctx, &array(b), &batch, &order, pos, 0, previous).unwrap().exp();
        }
    }
    let total: f64 = exact.iter().sum();
    exact.iter_mut().for_each(|v| *v /= total);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut particle = Particle { coefficients: array(0.5), memberships: vec![0; batch.len()], log_weight: 0.0 };
    let mut counts = vec![0usize; BINS];
    let mut kept = 0;
    for sweep in 0..BURN_IN + SWEEPS {
        rejuvenate(&ctx, &mut particle, &batch, &order, pos, previous, &mut rng).unwrap();
        if sweep < BURN_IN {
            continue;
        }
        let b = particle.coefficients.values()[0];
        if (LO..HI).contains(&b) {
            counts[((b - LO) / width) as usize] += 1;
            kept += 1;
        }
    }
    exact.iter().zip(&counts).map(|(e, &c)| (e - c as f64 / kept as f64).abs()).sum::<f64>() / 2.0
}

#[test]
fn chain_matches_first_period_target() {
    let tv = chain_tv(&[3, 3, 1, 2], None, 11);
    assert!(tv < 0.05, "total variation {tv}");
}

#[test]
fn chain_matches_pooled_prior_target() {
    let prior = nonlocal_prior();
    let previous = PreviousPool::new(&prior, &[array(0.0), array(1.5), array(-0.8), array(2.1)]).unwrap();
    let tv = chain_tv(&[3, 2, 3], Some(&previous), 12);
    assert!(tv < 0.05, "total variation {tv}");
}
