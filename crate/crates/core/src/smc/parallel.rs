//! Independent filter instances per period, label alignment and merging.

use rand::seq::index::sample as sample_indices;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{contract, Error, Result};
use crate::model::CoefficientArray;

use super::filter::{between_month_step, FilterContext, InstanceDiagnostics, PreparedBatch, PreviousPool};
use super::relabel::relabel;
use super::ParticlePool;

/// Alignment passes against the running mean when no reference exists yet.
const REFERENCE_ITERATIONS: usize = 10;

/// Seed of one instance in one period, mixed from the run seed so that
/// neighbouring counters give unrelated streams.
pub fn derive_seed(base: u64, period: u32, instance: u32) -> u64 {
    let mut z = base ^ ((period as u64) << 32 | instance as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    for _ in 0..2 {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^= z >> 31;
    }
    z
}

/// Every instance pool after filtering one period, plus the label reference
/// the next period aligns to.
#[derive(Debug, Clone, PartialEq)]
pub struct PeriodState {
    pub period: u32,
    pub pools: Vec<ParticlePool>,
    pub reference: Option<CoefficientArray>,
    pub diagnostics: Vec<InstanceDiagnostics>,
}

impl PeriodState {
    pub fn particle_count(&self) -> usize {
        self.pools.iter().map(ParticlePool::len).sum()
    }

    /// All instance pools concatenated.
    pub fn merged(&self) -> ParticlePool {
        let particles = self.pools.iter().flat_map(|p| p.particles.iter().cloned()).collect();
        ParticlePool::new(particles, self.period, 0, 0)
    }

    pub fn coefficient_arrays(&self) -> impl Iterator<Item = &CoefficientArray> {
        self.pools.iter().flat_map(|p| p.particles.iter().map(|q| &q.coefficients))
    }
}

fn mean_of(pools: &[ParticlePool]) -> Option<CoefficientArray> {
    let first = pools.iter().find_map(|p| p.particles.first())?;
    let (k, q, p) = first.coefficients.dims();
    let mut mean = CoefficientArray::zeros(k, q, p);
    let mut count = 0usize;
    for part in pools.iter().flat_map(|p| &p.particles) {
        for (m, v) in mean.values_mut().iter_mut().zip(part.coefficients.values()) {
            *m += v;
        }
        count += 1;
    }
    mean.values_mut().iter_mut().for_each(|m| *m /= count as f64);
    Some(mean)
}

/// Aligns every pool to `reference`, or, without one, to the mean of the
/// first instance grown from its first particle. Returns the reference used.
pub fn align_pools(pools: &mut [ParticlePool], reference: Option<&CoefficientArray>) -> Option<CoefficientArray> {
    let reference = match reference {
        Some(r) => r.clone(),
        None => {
            let first = pools.first_mut()?;
            relabel(first, None);
            let mut current = mean_of(std::slice::from_ref(first))?;
            for _ in 0..REFERENCE_ITERATIONS {
                relabel(first, Some(&current));
                let next = mean_of(std::slice::from_ref(first))?;
                if next == current {
                    break;
                }
                current = next;
            }
            current
        }
    };
    for pool in pools.iter_mut() {
        relabel(pool, Some(&reference));
    }
    Some(reference)
}

/// Filters one period across all instances. Each instance propagates its own
/// previous pool and uses a Monte-Carlo prior built from its own random
/// subsample of the merged previous particles.
pub fn step_period(ctx: &FilterContext, prev: Option<&PeriodState>, batch: &PreparedBatch) -> Result<PeriodState> {
    let cfg = &ctx.config;
    let errors = cfg.validation_errors();
    if !errors.is_empty() {
        return Err(Error::Config(errors));
    }
    if let Some(prev) = prev {
        if prev.pools.len() != cfg.instances {
            return Err(contract(format!(
                "previous period has {} instances, configuration expects {}",
                prev.pools.len(),
                cfg.instances
            )));
        }
        if batch.period() <= prev.period {
            return Err(contract(format!(
                "period {} does not follow period {}",
                batch.period(),
                prev.period
            )));
        }
    }
    let merged: Vec<CoefficientArray> = prev.map(|p| p.coefficient_arrays().cloned().collect()).unwrap_or_default();

    let run = |m: usize| -> Result<(ParticlePool, InstanceDiagnostics)> {
        let id = m as u32;
        let seed = derive_seed(cfg.seed, batch.period(), id);
        let wrap = |e: Error| Error::Instance { instance: id, seed, source: Box::new(e) };
        let previous = if merged.is_empty() {
            None
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(1);
            let h = cfg.prior_pool_size.min(merged.len());
            let mut idx = sample_indices(&mut rng, merged.len(), h).into_vec();
            idx.sort_unstable();
            let chosen: Vec<CoefficientArray> = idx.into_iter().map(|i| merged[i].clone()).collect();
            Some(PreviousPool::new(&ctx.prior, &chosen).map_err(wrap)?)
        };
        let pool_prev = prev.map(|p| &p.pools[m]);
        between_month_step(ctx, pool_prev, batch, previous.as_ref(), id, seed).map_err(wrap)
    };
    let results: Vec<Result<(ParticlePool, InstanceDiagnostics)>> = (0..cfg.instances).into_par_iter().map(run).collect();

    let mut pools = Vec::with_capacity(cfg.instances);
    let mut diagnostics = Vec::with_capacity(cfg.instances);
    for r in results {
        let (pool, diag) = r?;
        pools.push(pool);
        diagnostics.push(diag);
    }
    let reference = if cfg.relabel {
        align_pools(&mut pools, prev.and_then(|p| p.reference.as_ref()))
    } else {
        None
    };
    for d in &diagnostics {
        log::debug!(
            "period {} instance {}: min ess {:.1}, {} resamples, acceptance {:.3}, month-end ess {:.1}",
            d.period,
            d.instance_id,
            d.min_ess,
            d.resamples,
            d.acceptance_rate(),
            d.month_end_ess
        );
    }
    Ok(PeriodState { period: batch.period(), pools, reference, diagnostics })
}

/// Filters a stream of periods from the initial prior, returning the state
/// after each one.
pub fn run_parallel_instances(ctx: &FilterContext, batches: &[PreparedBatch]) -> Result<Vec<PeriodState>> {
    let mut states: Vec<PeriodState> = Vec::with_capacity(batches.len());
    for batch in batches {
        let next = step_period(ctx, states.last(), batch)?;
        log::info!(
            "period {}: {} observations, {} particles",
            batch.period(),
            batch.len(),
            next.particle_count()
        );
        states.push(next);
    }
    Ok(states)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::smc::filter::tests::{tiny_batch, tiny_context};
    use crate::smc::FilterConfig;

    #[test]
    fn seeds_differ_across_counters() {
        let mut seen = std::collections::HashSet::new();
        for t in 0..20 {
            for m in 0..20 {
                assert!(seen.insert(derive_seed(1, t, m)));
            }
        }
        assert_ne!(derive_seed(1, 1, 0), derive_seed(2, 1, 0));
    }

    #[test]
    fn single_instance_matches_direct_run() {
        let cfg = FilterConfig { particles_per_instance: 12, instances: 1, relabel: false, ..Default::default() };
        let ctx = tiny_context(2, cfg);
        let batch = PreparedBatch::new(&tiny_batch(&ctx, 6, 2), &ctx.spec).unwrap();
        let state = step_period(&ctx, None, &batch).unwrap();
        let seed = derive_seed(ctx.config.seed, 1, 0);
        let (direct, _) = between_month_step(&ctx, None, &batch, None, 0, seed).unwrap();
        assert_eq!(state.pools[0], direct);
    }

    #[test]
    fn two_periods_are_reproducible() {
        let cfg = FilterConfig { particles_per_instance: 10, instances: 3, prior_pool_size: 7, ..Default::default() };
        let ctx = tiny_context(2, cfg);
        let b1 = PreparedBatch::new(&tiny_batch(&ctx, 5, 2), &ctx.spec).unwrap();
        let mut raw2 = tiny_batch(&ctx, 5, 3);
        raw2.period = 2;
        raw2.respondents.iter_mut().for_each(|r| r.period = 2);
        let b2 = PreparedBatch::new(&raw2, &ctx.spec).unwrap();
        let a = run_parallel_instances(&ctx, &[b1.clone(), b2.clone()]).unwrap();
        let b = run_parallel_instances(&ctx, &[b1, b2.clone()]).unwrap();
        assert_eq!(a, b);
        // Resuming from the stored first-period state reproduces the second.
        let resumed = step_period(&ctx, Some(&a[0]), &b2).unwrap();
        assert_eq!(resumed, a[1]);
        assert_eq!(a[1].particle_count(), 30);
    }

    #[test]
    fn out_of_order_period_is_rejected() {
        let cfg = FilterConfig { particles_per_instance: 4, instances: 1, ..Default::default() };
        let ctx = tiny_context(2, cfg);
        let b1 = PreparedBatch::new(&tiny_batch(&ctx, 3, 2), &ctx.spec).unwrap();
        let s1 = step_period(&ctx, None, &b1).unwrap();
        assert!(step_period(&ctx, Some(&s1), &b1).is_err());
    }
}
