//! Sequential Monte Carlo over periods: transition-prior propagation, one
//! observation at a time weighting and resampling, Metropolis–Hastings
//! rejuvenation of the active group slice, and independent parallel
//! instances merged after label alignment.

mod filter;
mod parallel;
mod relabel;
mod resample;

use serde::{Deserialize, Serialize};

use crate::model::CoefficientArray;

pub use filter::{
    between_month_step, log_rejuvenation_target, rejuvenate, update_memberships, within_month_filter,
    FilterContext, InstanceDiagnostics, PreparedBatch, PreviousPool, RunTag,
};
pub use parallel::{align_pools, derive_seed, run_parallel_instances, step_period, PeriodState};
pub use relabel::{alignment_permutation, optimal_assignment, relabel};
pub use resample::{compute_weights, effective_sample_size, resample, Resampler};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterConfig {
    /// Particles per instance (J).
    pub particles_per_instance: usize,
    /// Independent instances (M).
    pub instances: usize,
    /// Resample when ESS ≤ threshold · J.
    pub ess_threshold: f64,
    /// MH sweeps after each observation.
    pub rejuvenation_sweeps: usize,
    /// Sweeps per observation in a period filtered from the initial prior.
    pub first_period_sweeps: usize,
    /// Probability that a proposal redraws the slice from the initial prior
    /// rather than jittering it.
    pub proposal_mix: f64,
    /// Initial jitter scale.
    pub jitter_sd: f64,
    /// Adapt the jitter scale between observations toward
    /// `target_acceptance`.
    pub adapt_jitter: bool,
    pub target_acceptance: f64,
    pub resampler: Resampler,
    /// Previous-period particles (H) averaged in the Monte-Carlo prior.
    pub prior_pool_size: usize,
    /// Align group labels across particles and instances at period end.
    pub relabel: bool,
    pub seed: u64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            particles_per_instance: 150,
            instances: 30,
            ess_threshold: 1.0,
            rejuvenation_sweeps: 1,
            first_period_sweeps: 3,
            proposal_mix: 0.5,
            jitter_sd: 0.1,
            adapt_jitter: true,
            target_acceptance: 0.3,
            resampler: Resampler::Systematic,
            prior_pool_size: 64,
            relabel: false,
            seed: 1,
        }
    }
}

impl FilterConfig {
    pub fn validation_errors(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.particles_per_instance < 2 {
            errs.push(format!("filter: particles_per_instance must be at least 2, got {}", self.particles_per_instance));
        }
        if self.instances < 1 {
            errs.push("filter: instances must be at least 1".into());
        }
        if !(self.ess_threshold > 0.0 && self.ess_threshold <= 1.0) {
            errs.push(format!("filter: ess_threshold must lie in (0, 1], got {}", self.ess_threshold));
        }
        if !(0.0..=1.0).contains(&self.proposal_mix) {
            errs.push(format!("filter: proposal_mix must lie in [0, 1], got {}", self.proposal_mix));
        }
        if !(self.jitter_sd > 0.0 && self.jitter_sd.is_finite()) {
            errs.push(format!("filter: jitter_sd must be positive, got {}", self.jitter_sd));
        }
        if !(self.target_acceptance > 0.0 && self.target_acceptance < 1.0) {
            errs.push(format!("filter: target_acceptance must lie in (0, 1), got {}", self.target_acceptance));
        }
        if self.prior_pool_size < 1 {
            errs.push("filter: prior_pool_size must be at least 1".into());
        }
        errs
    }

    /// Sweeps per observation for a period; `initial` marks a period
    /// filtered from the initial prior.
    pub fn sweeps(&self, initial: bool) -> usize {
        if initial && self.rejuvenation_sweeps > 0 {
            self.first_period_sweeps.max(self.rejuvenation_sweeps)
        } else {
            self.rejuvenation_sweeps
        }
    }
}

/// Coefficients plus the memberships of the current batch (0-based groups,
/// in batch order).
#[derive(Debug, Clone, PartialEq)]
pub struct Particle {
    pub coefficients: CoefficientArray,
    pub memberships: Vec<u16>,
    pub log_weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParticlePool {
    pub particles: Vec<Particle>,
    pub period: u32,
    pub rng_seed: u64,
    pub instance_id: u32,
}

impl ParticlePool {
    pub fn new(particles: Vec<Particle>, period: u32, rng_seed: u64, instance_id: u32) -> Self {
        Self { particles, period, rng_seed, instance_id }
    }

    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    pub fn weights(&self) -> Vec<f64> {
        let lw: Vec<f64> = self.particles.iter().map(|p| p.log_weight).collect();
        compute_weights(&lw)
    }

    /// Weighted mean of the coefficient arrays.
    pub fn mean_coefficients(&self) -> Option<CoefficientArray> {
        let first = self.particles.first()?;
        let (k, q, p) = first.coefficients.dims();
        let mut mean = CoefficientArray::zeros(k, q, p);
        for (part, w) in self.particles.iter().zip(self.weights()) {
            for (m, v) in mean.values_mut().iter_mut().zip(part.coefficients.values()) {
                *m += w * v;
            }
        }
        Some(mean)
    }

    /// ESS of the weights after merging particles with bit-identical
    /// coefficients; with uniform weights this counts distinct particles.
    pub fn distinct_ess(&self) -> f64 {
        let mut classes: std::collections::BTreeMap<Vec<u64>, f64> = std::collections::BTreeMap::new();
        for (part, w) in self.particles.iter().zip(self.weights()) {
            let key: Vec<u64> = part.coefficients.values().iter().map(|v| v.to_bits()).collect();
            *classes.entry(key).or_insert(0.0) += w;
        }
        1.0 / classes.values().map(|w| w * w).sum::<f64>()
    }
}
