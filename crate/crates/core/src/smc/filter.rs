//! One instance of the within-period filter.
//!
//! Each particle carries, besides its coefficients and memberships, caches
//! that make a rejuvenation proposal cost independent of the number of groups:
//! the per-observation mixture likelihoods `mix_m = Σ_k θ̄_mk L(y_m | B_k)` of
//! the observations already absorbed, and the per-group log prior terms
//! against each previous-period particle. A proposal touches one group slice,
//! so only that group's terms are re-evaluated.
//!
//! The move at observation `n` leaves invariant
//! `p̂(B | past) · Π_{m<n} mix_m(B) · L(y_n | B, s_n)`: earlier memberships
//! are marginalized while the current one, which selects the slice to move,
//! is conditioned on. Month-end membership draws are exact Gibbs updates, so
//! the stale memberships of earlier observations are never read.

use std::collections::HashMap;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{contract, Error, Result};
use crate::model::{slice_loglik, CoefficientArray, ModelSpec, PeriodBatch, LOG_LIK_FLOOR};
use crate::normal::log_sum_exp;
use crate::prior::{CoefficientPrior, EntryKernels, PrevState};
use crate::topic::sample_membership;

use super::resample::{compute_weights, effective_sample_size, reproduce, resample};
use super::{FilterConfig, Particle, ParticlePool};

/// Smallest positive likelihood kept in linear space; `ln` of it is about
/// [`LOG_LIK_FLOOR`].
const LIK_FLOOR: f64 = 5e-324;
const JITTER_GAIN: f64 = 1.0;
const JITTER_MIN: f64 = 1e-4;
const JITTER_MAX: f64 = 10.0;

/// Everything the filter needs that does not change within a run.
#[derive(Debug, Clone)]
pub struct FilterContext {
    pub spec: ModelSpec,
    pub prior: CoefficientPrior,
    pub config: FilterConfig,
}

/// A period's respondents laid out for the filter, with the expected group
/// weights `θ̄_n = E[θ_n]` of each membership prior. Shared by all instances.
#[derive(Debug, Clone)]
pub struct PreparedBatch {
    period: u32,
    len: usize,
    covariates: Vec<f64>,
    responses: Vec<usize>,
    theta_bar: Vec<f64>,
    q: usize,
    p: usize,
    k: usize,
}

impl PreparedBatch {
    pub fn new(batch: &PeriodBatch, spec: &ModelSpec) -> Result<Self> {
        batch.validate(spec)?;
        let (q, p, k) = (spec.covariate_count, spec.outcome_count(), spec.group_count);
        let mut covariates = Vec::with_capacity(batch.len() * q);
        let mut responses = Vec::with_capacity(batch.len() * p);
        let mut theta_bar = Vec::with_capacity(batch.len() * k);
        for (r, post) in batch.respondents.iter().zip(&batch.membership_priors) {
            covariates.extend_from_slice(&r.covariates);
            responses.extend_from_slice(&r.responses);
            theta_bar.extend(post.expected_theta());
        }
        Ok(Self { period: batch.period, len: batch.len(), covariates, responses, theta_bar, q, p, k })
    }

    pub fn period(&self) -> u32 {
        self.period
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn covariates(&self, n: usize) -> &[f64] {
        &self.covariates[n * self.q..(n + 1) * self.q]
    }

    /// 1-based categories.
    pub fn responses(&self, n: usize) -> &[usize] {
        &self.responses[n * self.p..(n + 1) * self.p]
    }

    pub fn theta_bar(&self, n: usize) -> &[f64] {
        &self.theta_bar[n * self.k..(n + 1) * self.k]
    }
}

/// Previous-period particles in the form the transition density needs.
#[derive(Debug, Clone)]
pub struct PreviousPool {
    states: Vec<PrevState>,
    rows: usize,
    entries: usize,
    /// Previous values at which the transition weights fell back to a hard
    /// assignment.
    pub fallbacks: usize,
}

impl PreviousPool {
    pub fn new(prior: &CoefficientPrior, arrays: &[CoefficientArray]) -> Result<Self> {
        let first = arrays.first().ok_or_else(|| contract("previous pool must be nonempty"))?;
        let entries = first.values().len();
        let mut states = Vec::with_capacity(arrays.len() * entries);
        let mut fallbacks = 0;
        for a in arrays {
            if a.dims() != first.dims() {
                return Err(contract("previous pool arrays have differing dimensions"));
            }
            for &b in a.values() {
                if let CoefficientPrior::Nonlocal(p) = prior {
                    fallbacks += p.transition_weights(b).fallback as usize;
                }
                states.push(prior.prev_state(b));
            }
        }
        Ok(Self { states, rows: arrays.len(), entries, fallbacks })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }
}

/// Log prior of coefficient arrays: product of initial densities, or the
/// Monte-Carlo transition average over a previous pool.
#[derive(Clone, Copy)]
enum PriorTarget<'a> {
    Initial,
    Pool(&'a PreviousPool),
}

impl PriorTarget<'_> {
    fn rows(&self) -> usize {
        match self {
            Self::Initial => 1,
            Self::Pool(p) => p.rows,
        }
    }

    /// Log prior factor of group `k`'s slice against each row.
    fn slice_terms(&self, prior: &CoefficientPrior, k: usize, slice: &[f64], kern: &mut Vec<EntryKernels>, out: &mut [f64]) {
        match self {
            Self::Initial => out[0] = slice.iter().map(|&b| prior.ln_initial_density(b)).sum(),
            Self::Pool(pool) => {
                kern.clear();
                kern.extend(slice.iter().map(|&b| prior.entry_kernels(b)));
                let base = k * slice.len();
                for (h, slot) in out.iter_mut().enumerate() {
                    let states = &pool.states[h * pool.entries + base..h * pool.entries + base + slice.len()];
                    let mut acc = LogProduct::new();
                    for (kr, st) in kern.iter().zip(states) {
                        acc.push(prior.density_from(kr, st));
                    }
                    *slot = acc.value();
                }
            }
        }
    }
}

/// `ln v`, floored at [`LOG_LIK_FLOOR`] (also for `v = 0`).
#[inline]
fn floored_ln(v: f64) -> f64 {
    if v > 0.0 {
        v.ln().max(LOG_LIK_FLOOR)
    } else {
        LOG_LIK_FLOOR
    }
}

/// `ln Π v_i` accumulated mostly in linear space.
struct LogProduct {
    acc: f64,
    ln: f64,
}

impl LogProduct {
    #[inline]
    fn new() -> Self {
        Self { acc: 1.0, ln: 0.0 }
    }

    #[inline]
    fn push(&mut self, v: f64) {
        if v < 1e-100 || v > 1e100 {
            self.ln += v.max(LIK_FLOOR).ln();
            return;
        }
        self.acc *= v;
        if !(1e-200..=1e200).contains(&self.acc) {
            self.ln += self.acc.ln();
            self.acc = 1.0;
        }
    }

    #[inline]
    fn value(&self) -> f64 {
        self.ln + self.acc.ln()
    }
}

fn ln_prior_from_terms(terms: &[f64], rows: usize, groups: usize, scratch: &mut Vec<f64>) -> f64 {
    scratch.clear();
    scratch.extend((0..rows).map(|h| terms[h * groups..(h + 1) * groups].iter().sum::<f64>()));
    log_sum_exp(scratch) - (rows as f64).ln()
}

/// Observation order of one instance with covariate patterns deduplicated, so
/// cell probabilities are computed once per distinct covariate row.
struct Layout {
    order: Vec<usize>,
    patterns: Vec<f64>,
    /// Patterns seen among positions `0..=i`.
    seen: Vec<usize>,
    /// Per position and outcome: index of the observed cell in a table.
    cell_index: Vec<u32>,
    /// Position-major `θ̄`.
    theta: Vec<f64>,
    /// Group-major `θ̄`.
    theta_by_group: Vec<f64>,
}

impl Layout {
    fn new(batch: &PreparedBatch, order: Vec<usize>, spec: &ModelSpec) -> Self {
        let (q, p, k) = (batch.q, batch.p, batch.k);
        let mut ids: HashMap<Vec<u64>, usize> = HashMap::new();
        let mut patterns = Vec::new();
        let mut seen = Vec::with_capacity(order.len());
        let mut cell_index = Vec::with_capacity(order.len() * p);
        let mut theta = Vec::with_capacity(order.len() * k);
        let mut offsets = Vec::with_capacity(p);
        let mut total = 0;
        for o in &spec.outcomes {
            offsets.push(total);
            total += o.categories();
        }
        for &n in &order {
            let x = batch.covariates(n);
            let key: Vec<u64> = x.iter().map(|v| v.to_bits()).collect();
            let next = ids.len();
            let id = *ids.entry(key).or_insert_with(|| {
                patterns.extend_from_slice(x);
                next
            });
            seen.push(ids.len());
            for (off, &y) in offsets.iter().zip(batch.responses(n)) {
                cell_index.push((id * total + off + y - 1) as u32);
            }
            theta.extend_from_slice(batch.theta_bar(n));
        }
        debug_assert_eq!(patterns.len(), ids.len() * q);
        let n = order.len();
        let theta_by_group = (0..k * n).map(|i| theta[(i % n) * k + i / n]).collect();
        Self { order, patterns, seen, cell_index, theta, theta_by_group }
    }
}

/// Cell probabilities of every outcome under one group slice for patterns
/// `from..to`; row `a` of the table holds `Σ_p C_p` values.
fn extend_table(spec: &ModelSpec, patterns: &[f64], from: usize, to: usize, slice: &[f64], mu: &mut [f64], out: &mut Vec<f64>) {
    let q = spec.covariate_count;
    let width: usize = spec.outcomes.iter().map(|o| o.categories()).sum();
    out.resize(to * width, 0.0);
    for a in from..to {
        crate::model::latent_mean_into(&patterns[a * q..(a + 1) * q], slice, mu);
        let mut off = a * width;
        for (o, &m) in spec.outcomes.iter().zip(mu.iter()) {
            let c = o.categories();
            o.cell_probabilities(m, &mut out[off..off + c]);
            off += c;
        }
    }
}

/// Likelihood (linear) of every outcome of one respondent under one slice.
fn likelihood(x: &[f64], y: &[usize], slice: &[f64], spec: &ModelSpec, mu: &mut [f64]) -> f64 {
    crate::model::latent_mean_into(x, slice, mu);
    spec.outcomes.iter().zip(mu.iter()).zip(y).map(|((o, &m), &c)| o.cell_unchecked(m, c)).product()
}

/// Per-particle state during a period.
#[derive(Clone)]
struct Work {
    coeff: Vec<f64>,
    /// Memberships by position in the instance order.
    s: Vec<u16>,
    mix: Vec<f64>,
    /// Rows × groups log prior factors.
    terms: Vec<f64>,
    /// Per group, cell tables over a prefix of the layout's patterns; shared
    /// between resampled copies until one of them moves the group.
    tables: Vec<Arc<Vec<f64>>>,
    ln_prior: f64,
    ln_mix_sum: f64,
    log_weight: f64,
}

/// Draws a replacement slice; returns the log proposal-density correction
/// `ln q(old | new) − ln q(new | old)` and whether the slice was jittered.
fn propose_slice<R: Rng + ?Sized>(
    prior: &CoefficientPrior,
    proposal_mix: f64,
    jitter_sd: f64,
    old: &[f64],
    new: &mut [f64],
    rng: &mut R,
) -> Result<(f64, bool)> {
    let independent = rng.random::<f64>() < proposal_mix;
    let mut correction = 0.0;
    if independent {
        for (n, &o) in new.iter_mut().zip(old) {
            *n = prior.sample_initial(rng)?;
            correction += prior.ln_initial_density(o) - prior.ln_initial_density(*n);
        }
    } else {
        for (n, &o) in new.iter_mut().zip(old) {
            *n = o + jitter_sd * rng.sample::<f64, _>(StandardNormal);
        }
    }
    Ok((correction, !independent))
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct InstanceDiagnostics {
    pub period: u32,
    pub instance_id: u32,
    pub seed: u64,
    pub observations: usize,
    pub min_ess: f64,
    pub resamples: usize,
    pub proposals: usize,
    pub acceptances: usize,
    /// ESS after merging duplicate particles, at period end.
    pub month_end_ess: f64,
    pub prior_fallbacks: usize,
}

impl InstanceDiagnostics {
    pub fn acceptance_rate(&self) -> f64 {
        if self.proposals == 0 {
            0.0
        } else {
            self.acceptances as f64 / self.proposals as f64
        }
    }
}

struct Engine<'a> {
    ctx: &'a FilterContext,
    target: PriorTarget<'a>,
    layout: Layout,
    qp: usize,
    k: usize,
    rows: usize,
    width: usize,
    table_new: Vec<f64>,
    mix_new: Vec<f64>,
    pending: Vec<(usize, f64)>,
    row_new: Vec<f64>,
    row_sums: Vec<f64>,
    kern: Vec<EntryKernels>,
    slice_new: Vec<f64>,
    mu: Vec<f64>,
    jitter_sd: f64,
    /// Jitter proposals and acceptances since the last adaptation.
    jitter_tries: usize,
    jitter_hits: usize,
}

impl<'a> Engine<'a> {
    fn new(ctx: &'a FilterContext, target: PriorTarget<'a>, layout: Layout) -> Self {
        let spec = &ctx.spec;
        let qp = spec.covariate_count * spec.outcome_count();
        let rows = target.rows();
        let n = layout.order.len();
        Self {
            ctx,
            target,
            layout,
            qp,
            k: spec.group_count,
            rows,
            width: spec.outcomes.iter().map(|o| o.categories()).sum(),
            table_new: Vec::new(),
            mix_new: vec![0.0; n],
            pending: Vec::new(),
            row_new: vec![0.0; rows],
            row_sums: Vec::with_capacity(rows),
            kern: Vec::with_capacity(qp),
            slice_new: vec![0.0; qp],
            mu: vec![0.0; spec.outcome_count()],
            jitter_sd: ctx.config.jitter_sd,
            jitter_tries: 0,
            jitter_hits: 0,
        }
    }

    fn init_work(&mut self, coeff: Vec<f64>, s: Vec<u16>) -> Work {
        let mut terms = vec![0.0; self.rows * self.k];
        for k in 0..self.k {
            let slice = &coeff[k * self.qp..(k + 1) * self.qp];
            self.target.slice_terms(&self.ctx.prior, k, slice, &mut self.kern, &mut self.row_new);
            for h in 0..self.rows {
                terms[h * self.k + k] = self.row_new[h];
            }
        }
        let ln_prior = ln_prior_from_terms(&terms, self.rows, self.k, &mut self.row_sums);
        Work {
            coeff,
            s,
            mix: vec![0.0; self.layout.order.len()],
            terms,
            tables: vec![Arc::new(Vec::new()); self.k],
            ln_prior,
            ln_mix_sum: 0.0,
            log_weight: 0.0,
        }
    }

    #[inline]
    fn table_lik(&self, table: &[f64], pos: usize) -> f64 {
        let p = self.mu.len();
        self.layout.cell_index[pos * p..(pos + 1) * p].iter().map(|&i| table[i as usize]).product()
    }

    /// Extends group `g`'s cached table to the first `npat` patterns.
    fn ensure_table(&mut self, w: &mut Work, g: usize, npat: usize) {
        let have = w.tables[g].len() / self.width;
        if have < npat {
            let slice = &w.coeff[g * self.qp..(g + 1) * self.qp];
            let table = Arc::make_mut(&mut w.tables[g]);
            extend_table(&self.ctx.spec, &self.layout.patterns, have, npat, slice, &mut self.mu, table);
        }
    }

    /// `Σ_{g≠k} θ̄_mg L(y_m | B_g)` from the cached tables; `k` out of range
    /// gives the full mixture.
    fn mixture_without(&self, w: &Work, m: usize, k: usize) -> f64 {
        let theta = &self.layout.theta[m * self.k..(m + 1) * self.k];
        let mut total = 0.0;
        for (g, &t) in theta.iter().enumerate() {
            if g != k && t > 0.0 {
                total += t * self.table_lik(&w.tables[g], m);
            }
        }
        total
    }

    /// One Metropolis–Hastings proposal on the slice of the group holding
    /// observation `pos`. Returns whether it was accepted.
    fn mh_move<R: Rng + ?Sized>(&mut self, w: &mut Work, pos: usize, rng: &mut R) -> Result<bool> {
        let k = w.s[pos] as usize;
        let (qp, groups, rows) = (self.qp, self.k, self.rows);
        let spec = &self.ctx.spec;
        let (correction, jittered) = {
            let old = &w.coeff[k * qp..(k + 1) * qp];
            propose_slice(&self.ctx.prior, self.ctx.config.proposal_mix, self.jitter_sd, old, &mut self.slice_new, rng)?
        };

        self.target.slice_terms(&self.ctx.prior, k, &self.slice_new, &mut self.kern, &mut self.row_new);
        self.row_sums.clear();
        for h in 0..rows {
            let row = &w.terms[h * groups..(h + 1) * groups];
            self.row_sums.push(row.iter().sum::<f64>() - row[k] + self.row_new[h]);
        }
        let ln_prior_new = log_sum_exp(&self.row_sums) - (rows as f64).ln();

        let npat = self.layout.seen[pos];
        self.ensure_table(w, k, npat);
        extend_table(spec, &self.layout.patterns, 0, npat, &self.slice_new, &mut self.mu, &mut self.table_new);

        let ln_mix_new = {
            let n = self.layout.order.len();
            let p = self.mu.len();
            let theta_k = &self.layout.theta_by_group[k * n..k * n + pos];
            let cells = &self.layout.cell_index[..pos * p];
            let (told, tnew) = (&w.tables[k][..], &self.table_new[..]);
            let out = &mut self.mix_new[..pos];
            self.pending.clear();
            let mut acc = 1.0f64;
            let mut ln = 0.0f64;
            for (m, ((&t, idx), (&current, slot))) in theta_k
                .iter()
                .zip(cells.chunks_exact(p))
                .zip(w.mix[..pos].iter().zip(out.iter_mut()))
                .enumerate()
            {
                let v = if t == 0.0 {
                    current
                } else {
                    let (mut l_old, mut l_new) = (1.0, 1.0);
                    for &i in idx {
                        l_old *= told[i as usize];
                        l_new *= tnew[i as usize];
                    }
                    let rest = current - t * l_old;
                    if rest < 1e-9 * current {
                        // The moved group dominates this mixture; the rest is
                        // rebuilt exactly below.
                        self.pending.push((m, l_new));
                        continue;
                    }
                    rest + t * l_new
                };
                *slot = v;
                if v < 1e-100 {
                    ln += v.max(LIK_FLOOR).ln();
                } else {
                    acc *= v;
                    if acc < 1e-200 {
                        ln += acc.ln();
                        acc = 1.0;
                    }
                }
            }
            let pending = std::mem::take(&mut self.pending);
            for &(m, l_new) in &pending {
                let t = self.layout.theta[m * groups + k];
                let v = self.mixture_without(w, m, k) + t * l_new;
                self.mix_new[m] = v;
                ln += v.max(LIK_FLOOR).ln();
            }
            self.pending = pending;
            ln + acc.ln()
        };
        let ln_cur_old = floored_ln(self.table_lik(&w.tables[k], pos));
        let ln_cur_new = floored_ln(self.table_lik(&self.table_new, pos));

        let log_alpha = (ln_prior_new + ln_mix_new + ln_cur_new) - (w.ln_prior + w.ln_mix_sum + ln_cur_old) + correction;
        let u: f64 = rng.random();
        let accept = log_alpha >= 0.0 || u.ln() < log_alpha;
        if jittered {
            self.jitter_tries += 1;
            self.jitter_hits += accept as usize;
        }
        if accept {
            w.coeff[k * qp..(k + 1) * qp].copy_from_slice(&self.slice_new);
            w.tables[k] = Arc::new(self.table_new.clone());
            w.mix[..pos].copy_from_slice(&self.mix_new[..pos]);
            for h in 0..rows {
                w.terms[h * groups + k] = self.row_new[h];
            }
            w.ln_prior = ln_prior_new;
            w.ln_mix_sum = ln_mix_new;
        }
        Ok(accept)
    }

    /// Adds observation `pos` to the particle's mixture cache.
    fn absorb(&mut self, w: &mut Work, pos: usize) {
        let npat = self.layout.seen[pos];
        for g in 0..self.k {
            self.ensure_table(w, g, npat);
        }
        let v = self.mixture_without(w, pos, usize::MAX);
        w.mix[pos] = v;
        w.ln_mix_sum += v.max(LIK_FLOOR).ln();
    }

    /// Nudges the jitter scale toward the target acceptance rate using the
    /// moves made since the last call. The scale only changes between
    /// observations, so each move is made with a fixed kernel.
    fn adapt_jitter(&mut self) {
        let cfg = &self.ctx.config;
        if !cfg.adapt_jitter || self.jitter_tries == 0 {
            return;
        }
        let rate = self.jitter_hits as f64 / self.jitter_tries as f64;
        self.jitter_sd = (self.jitter_sd * (JITTER_GAIN * (rate - cfg.target_acceptance)).exp()).clamp(JITTER_MIN, JITTER_MAX);
        self.jitter_tries = 0;
        self.jitter_hits = 0;
    }

    /// Floored log-likelihood of observation `pos` under its own group.
    fn conditional_loglik(&mut self, w: &mut Work, pos: usize) -> f64 {
        let k = w.s[pos] as usize;
        self.ensure_table(w, k, self.layout.seen[pos]);
        floored_ln(self.table_lik(&w.tables[k], pos))
    }
}

/// Identifies one instance-period run in diagnostics and errors.
#[derive(Debug, Clone, Copy)]
pub struct RunTag {
    pub period: u32,
    pub instance_id: u32,
    pub seed: u64,
}

/// Filters one period for one instance from particles already drawn from the
/// prior. `order` is the observation order (a permutation of the batch);
/// `previous` is the Monte-Carlo prior pool, or `None` for the initial prior.
pub fn within_month_filter(
    ctx: &FilterContext,
    particles: Vec<Particle>,
    batch: &PreparedBatch,
    previous: Option<&PreviousPool>,
    order: Vec<usize>,
    tag: RunTag,
    rng: &mut ChaCha8Rng,
) -> Result<(ParticlePool, InstanceDiagnostics)> {
    let cfg = &ctx.config;
    let j_count = particles.len();
    if j_count == 0 {
        return Err(contract("within-period filter needs at least one particle"));
    }
    let n = batch.len();
    let mut sorted = order.clone();
    sorted.sort_unstable();
    if sorted != (0..n).collect::<Vec<_>>() {
        return Err(contract("observation order is not a permutation of the batch"));
    }
    for part in &particles {
        ctx.spec.check_coefficients(&part.coefficients)?;
        if part.memberships.len() != n {
            return Err(contract(format!(
                "particle has {} memberships for a batch of {n}",
                part.memberships.len()
            )));
        }
    }

    let target = previous.map_or(PriorTarget::Initial, PriorTarget::Pool);
    let layout = Layout::new(batch, order, &ctx.spec);
    let mut engine = Engine::new(ctx, target, layout);
    let mut works: Vec<Work> = particles
        .into_iter()
        .map(|p| {
            let s = engine.layout.order.iter().map(|&o| p.memberships[o]).collect();
            engine.init_work(p.coefficients.into_values(), s)
        })
        .collect();

    let mut diag = InstanceDiagnostics {
        period: tag.period,
        instance_id: tag.instance_id,
        seed: tag.seed,
        observations: n,
        min_ess: j_count as f64,
        prior_fallbacks: previous.map_or(0, |p| p.fallbacks),
        ..Default::default()
    };
    let sweeps = cfg.sweeps(previous.is_none());
    let mut lls = vec![0.0; j_count];

    for pos in 0..n {
        for (ll, w) in lls.iter_mut().zip(works.iter_mut()) {
            *ll = engine.conditional_loglik(w, pos);
        }
        if lls.iter().all(|&l| l <= LOG_LIK_FLOOR) {
            return Err(Error::Degenerate {
                period: tag.period,
                instance: tag.instance_id,
                observation: pos,
                row: engine.layout.order[pos],
            });
        }
        for (w, ll) in works.iter_mut().zip(&lls) {
            w.log_weight += ll;
        }
        let lw: Vec<f64> = works.iter().map(|w| w.log_weight).collect();
        let weights = compute_weights(&lw);
        let ess = effective_sample_size(&weights);
        diag.min_ess = diag.min_ess.min(ess);
        if ess <= cfg.ess_threshold * j_count as f64 * (1.0 + 1e-12) {
            let ancestors = resample(&weights, j_count, rng, cfg.resampler);
            works = reproduce(works, &ancestors);
            works.iter_mut().for_each(|w| w.log_weight = 0.0);
            diag.resamples += 1;
        }
        for _ in 0..sweeps {
            for w in works.iter_mut() {
                diag.proposals += 1;
                if engine.mh_move(w, pos, rng)? {
                    diag.acceptances += 1;
                }
            }
        }
        engine.adapt_jitter();
        for w in works.iter_mut() {
            engine.absorb(w, pos);
        }
        log::trace!(
            "period {} instance {} observation {pos}: ess {ess:.1}",
            tag.period,
            tag.instance_id
        );
    }

    // Hand off an unweighted pool.
    let lw: Vec<f64> = works.iter().map(|w| w.log_weight).collect();
    if lw.iter().any(|&l| l != lw[0]) {
        let ancestors = resample(&compute_weights(&lw), j_count, rng, cfg.resampler);
        works = reproduce(works, &ancestors);
        diag.resamples += 1;
    }

    // Month-end memberships, drawn exactly from p(s = g | B, y) ∝ θ̄_g L(y | B_g).
    let total_patterns = engine.layout.seen.last().copied().unwrap_or(0);
    let mut probs = vec![0.0; engine.k];
    for w in works.iter_mut() {
        for g in 0..engine.k {
            engine.ensure_table(w, g, total_patterns);
        }
        for pos in 0..n {
            let theta = &engine.layout.theta[pos * engine.k..(pos + 1) * engine.k];
            for (g, slot) in probs.iter_mut().enumerate() {
                *slot = if theta[g] > 0.0 {
                    theta[g].ln() + floored_ln(engine.table_lik(&w.tables[g], pos))
                } else {
                    f64::NEG_INFINITY
                };
            }
            w.s[pos] = sample_membership(&compute_weights(&probs), rng) as u16;
        }
    }

    let (k, q, p) = (ctx.spec.group_count, ctx.spec.covariate_count, ctx.spec.outcome_count());
    let mut out = Vec::with_capacity(j_count);
    for w in works {
        let mut memberships = vec![0u16; n];
        for (pos, &o) in engine.layout.order.iter().enumerate() {
            memberships[o] = w.s[pos];
        }
        out.push(Particle {
            coefficients: CoefficientArray::from_values(k, q, p, w.coeff)?,
            memberships,
            log_weight: 0.0,
        });
    }
    let pool = ParticlePool::new(out, tag.period, tag.seed, tag.instance_id);
    diag.month_end_ess = pool.distinct_ess();
    log::debug!(
        "period {} instance {}: final jitter scale {:.4}",
        tag.period,
        tag.instance_id,
        engine.jitter_sd
    );
    Ok((pool, diag))
}

/// Redraws every membership from `p(s_n = k | B, y_n) ∝ θ̄_nk L(y_n | B_k)`,
/// with the group weights integrated over the membership prior.
pub fn update_memberships<R: Rng + ?Sized>(
    pool: &mut ParticlePool,
    batch: &PreparedBatch,
    spec: &ModelSpec,
    rng: &mut R,
) -> Result<()> {
    let k = spec.group_count;
    let mut mu = vec![0.0; spec.outcome_count()];
    let mut probs = vec![0.0; k];
    for part in &mut pool.particles {
        spec.check_coefficients(&part.coefficients)?;
        if part.memberships.len() != batch.len() {
            return Err(contract("membership vector does not match the batch"));
        }
        for n in 0..batch.len() {
            let (x, y, theta) = (batch.covariates(n), batch.responses(n), batch.theta_bar(n));
            for (g, slot) in probs.iter_mut().enumerate() {
                *slot = if theta[g] > 0.0 {
                    theta[g].ln() + slice_loglik(x, y, part.coefficients.group_slice(g), spec, &mut mu)
                } else {
                    f64::NEG_INFINITY
                };
            }
            let w = compute_weights(&probs);
            part.memberships[n] = sample_membership(&w, rng) as u16;
        }
    }
    Ok(())
}

/// Propagates one instance from its previous-period pool (or the initial
/// prior), draws memberships, permutes the observation order and filters.
pub fn between_month_step(
    ctx: &FilterContext,
    pool_prev: Option<&ParticlePool>,
    batch: &PreparedBatch,
    previous: Option<&PreviousPool>,
    instance_id: u32,
    seed: u64,
) -> Result<(ParticlePool, InstanceDiagnostics)> {
    let cfg = &ctx.config;
    let j_count = cfg.particles_per_instance;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (k, q, p) = (ctx.spec.group_count, ctx.spec.covariate_count, ctx.spec.outcome_count());
    if let Some(prev) = pool_prev {
        if prev.len() != j_count {
            return Err(contract(format!(
                "previous pool has {} particles, configuration expects {j_count}",
                prev.len()
            )));
        }
    }
    let n = batch.len();
    let mut particles = Vec::with_capacity(j_count);
    for j in 0..j_count {
        let mut values = vec![0.0; k * q * p];
        match pool_prev {
            Some(prev) => {
                let from = &prev.particles[j].coefficients;
                ctx.spec.check_coefficients(from)?;
                for (v, &b) in values.iter_mut().zip(from.values()) {
                    *v = ctx.prior.sample_transition(b, &mut rng)?;
                }
            }
            None => {
                for v in values.iter_mut() {
                    *v = ctx.prior.sample_initial(&mut rng)?;
                }
            }
        }
        let memberships = (0..n).map(|i| sample_membership(batch.theta_bar(i), &mut rng) as u16).collect();
        particles.push(Particle {
            coefficients: CoefficientArray::from_values(k, q, p, values)?,
            memberships,
            log_weight: 0.0,
        });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let tag = RunTag { period: batch.period(), instance_id, seed };
    within_month_filter(ctx, particles, batch, previous, order, tag, &mut rng)
}

/// `ln p̂(B) + Σ_{m<pos} ln mix_m(B) + ln L(y_pos | B, s_pos)` evaluated from
/// scratch; the quantity the cached filter moves leave invariant.
pub fn log_rejuvenation_target(
    ctx: &FilterContext,
    coefficients: &CoefficientArray,
    batch: &PreparedBatch,
    order: &[usize],
    pos: usize,
    active_group: usize,
    previous: Option<&PreviousPool>,
) -> Result<f64> {
    let spec = &ctx.spec;
    spec.check_coefficients(coefficients)?;
    if pos >= order.len() || active_group >= spec.group_count {
        return Err(contract("position or group out of range"));
    }
    let ln_prior = match previous {
        None => coefficients.values().iter().map(|&b| ctx.prior.ln_initial_density(b)).sum(),
        Some(pool) => {
            let mut rows = Vec::with_capacity(pool.rows);
            for h in 0..pool.rows {
                let ln: f64 = coefficients
                    .values()
                    .iter()
                    .zip(&pool.states[h * pool.entries..(h + 1) * pool.entries])
                    .map(|(&b, st)| ctx.prior.density_from(&ctx.prior.entry_kernels(b), st).max(LIK_FLOOR).ln())
                    .sum();
                rows.push(ln);
            }
            log_sum_exp(&rows) - (pool.rows as f64).ln()
        }
    };
    let mut mu = vec![0.0; spec.outcome_count()];
    let mut total = ln_prior;
    for &n in &order[..pos] {
        let mix: f64 = batch
            .theta_bar(n)
            .iter()
            .enumerate()
            .map(|(g, &t)| t * likelihood(batch.covariates(n), batch.responses(n), coefficients.group_slice(g), spec, &mut mu))
            .sum();
        total += mix.max(LIK_FLOOR).ln();
    }
    let n = order[pos];
    total += slice_loglik(batch.covariates(n), batch.responses(n), coefficients.group_slice(active_group), spec, &mut mu);
    Ok(total)
}

/// One rejuvenation move for a single particle, computed from scratch: the
/// slice of the group holding observation `order[pos]` is redrawn from the
/// initial prior or jittered, and accepted with the Metropolis–Hastings
/// probability for [`log_rejuvenation_target`].
#[allow(clippy::too_many_arguments)]
pub fn rejuvenate<R: Rng + ?Sized>(
    ctx: &FilterContext,
    particle: &mut Particle,
    batch: &PreparedBatch,
    order: &[usize],
    pos: usize,
    previous: Option<&PreviousPool>,
    rng: &mut R,
) -> Result<bool> {
    let k = *particle
        .memberships
        .get(order[pos])
        .ok_or_else(|| contract("particle memberships do not cover the batch"))? as usize;
    let current = log_rejuvenation_target(ctx, &particle.coefficients, batch, order, pos, k, previous)?;
    let mut proposal = particle.coefficients.clone();
    let (correction, _) = {
        let old = particle.coefficients.group_slice(k);
        propose_slice(&ctx.prior, ctx.config.proposal_mix, ctx.config.jitter_sd, old, proposal.group_slice_mut(k), rng)?
    };
    let candidate = log_rejuvenation_target(ctx, &proposal, batch, order, pos, k, previous)?;
    let log_alpha = candidate - current + correction;
    let u: f64 = rng.random();
    let accept = log_alpha >= 0.0 || u.ln() < log_alpha;
    if accept {
        particle.coefficients = proposal;
    }
    Ok(accept)
}
