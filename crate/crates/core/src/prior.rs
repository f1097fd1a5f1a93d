//! Dynamic non-local spike-and-slab prior on each regression coefficient.
//!
//! Given the previous value `b`, a coefficient is drawn from
//!
//! ```text
//! π₀(b) N(β; 0, σ₀²) + π₋₁(b) g₋₁(β) + π₁(b) g₁(β),
//! g_l(β) = ω(β; ξ) N(β; μ_l, σ_l²) / c_l,   ω(β; ξ) = 1 − exp(−(β/ξ)²),
//! ```
//!
//! where the weights are the three kernels evaluated at `b` and renormalized.
//! The slab kernels vanish at the origin, so the prior separates negligible
//! effects from clearly negative or positive ones. At the first period fixed
//! weights replace `π(b)`.

use std::hash::{DefaultHasher, Hash, Hasher};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::model::CoefficientArray;
use crate::normal::{self, log_sum_exp};
use crate::quadrature::QuadratureOptions;

/// Proposal cap for the slab rejection sampler.
pub const MAX_REJECTION_PROPOSALS: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShrinkagePriorSpec {
    pub mu_neg: f64,
    pub mu_pos: f64,
    pub sigma_neg: f64,
    pub sigma_zero: f64,
    pub sigma_pos: f64,
    pub xi: f64,
    /// First-period weights `(π₋₁, π₀, π₁)`.
    pub init_weights: [f64; 3],
}

impl Default for ShrinkagePriorSpec {
    fn default() -> Self {
        Self {
            mu_neg: -1.5,
            mu_pos: 1.5,
            sigma_neg: 0.75,
            sigma_zero: 0.1,
            sigma_pos: 0.75,
            xi: 2.0,
            init_weights: [0.25, 0.5, 0.25],
        }
    }
}

impl ShrinkagePriorSpec {
    pub fn validation_errors(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if !(self.mu_neg < 0.0 && self.mu_pos > 0.0) {
            errs.push(format!("prior: need mu_neg < 0 < mu_pos, got ({}, {})", self.mu_neg, self.mu_pos));
        }
        for (name, v) in [
            ("sigma_neg", self.sigma_neg),
            ("sigma_zero", self.sigma_zero),
            ("sigma_pos", self.sigma_pos),
            ("xi", self.xi),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                errs.push(format!("prior: {name} must be positive and finite, got {v}"));
            }
        }
        let w = self.init_weights;
        if w.iter().any(|v| !(*v >= 0.0)) || (w.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            errs.push(format!("prior: init_weights must lie on the simplex, got {w:?}"));
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

    fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for v in [self.mu_neg, self.mu_pos, self.sigma_neg, self.sigma_pos, self.xi] {
            v.to_bits().hash(&mut h);
        }
        h.finish()
    }

    fn slab(&self, side: Side) -> (f64, f64) {
        match side {
            Side::Negative => (self.mu_neg, self.sigma_neg),
            Side::Positive => (self.mu_pos, self.sigma_pos),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Negative,
    Positive,
}

/// Normalizing constants `c₋₁`, `c₁` of the weighted slab kernels, tied to
/// the hyperparameters they were computed from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SlabNormalization {
    pub c_neg: f64,
    pub c_pos: f64,
    fingerprint: u64,
}

impl SlabNormalization {
    pub fn check(&self, spec: &ShrinkagePriorSpec) -> Result<()> {
        if self.fingerprint != spec.fingerprint() {
            return Err(contract("slab normalization is stale for this prior spec"));
        }
        Ok(())
    }

    fn constant(&self, side: Side) -> f64 {
        match side {
            Side::Negative => self.c_neg,
            Side::Positive => self.c_pos,
        }
    }
}

/// `ω(β; ξ) = 1 − exp(−(β/ξ)²)`.
#[inline]
pub fn omega(beta: f64, xi: f64) -> f64 {
    let r = beta / xi;
    -(-r * r).exp_m1()
}

/// `c = ∫ ω(β; ξ) N(β; μ, σ²) dβ = 1 − ξ/√(ξ²+2σ²) · exp(−μ²/(ξ²+2σ²))`,
/// rearranged as a sum of two nonnegative terms so small constants keep full
/// relative precision.
pub fn normalization_closed_form(mu: f64, sigma: f64, xi: f64) -> f64 {
    let u = 2.0 * sigma * sigma / (xi * xi);
    let root = (1.0 + u).sqrt();
    let one_minus_ratio = u / ((1.0 + root) * root);
    let a = mu * mu / (xi * xi + 2.0 * sigma * sigma);
    one_minus_ratio + (-(-a).exp_m1()) / root
}

/// Same constant by adaptive quadrature over `μ ± 12σ`.
pub fn normalization_quadrature(mu: f64, sigma: f64, xi: f64) -> Result<f64> {
    let lo = mu - 12.0 * sigma;
    let hi = mu + 12.0 * sigma;
    let mut points = vec![lo];
    // ω dips to zero over a window of width ~ξ around the origin.
    for b in [-4.0 * xi, -xi, 0.0, xi, 4.0 * xi] {
        if b > lo && b < hi {
            points.push(b);
        }
    }
    points.push(mu.clamp(lo, hi));
    points.push(hi);
    points.sort_by(f64::total_cmp);
    points.dedup();
    let opts = QuadratureOptions { rel_tol: 1e-10, abs_tol: 0.0, max_intervals: 5000 };
    let r = crate::quadrature::integrate_with_breaks(|b| omega(b, xi) * normal::pdf(b, mu, sigma), &points, opts)?;
    if r.error > 1e-10 * r.value.abs() {
        return Err(Error::Numeric(format!("normalizing constant quadrature error {:e}", r.error)));
    }
    Ok(r.value)
}

/// Computes both slab constants in closed form and confirms each against
/// quadrature.
pub fn compute_normalization(spec: &ShrinkagePriorSpec) -> Result<SlabNormalization> {
    spec.validate()?;
    let mut out = [0.0; 2];
    for (slot, side) in out.iter_mut().zip([Side::Negative, Side::Positive]) {
        let (mu, sigma) = spec.slab(side);
        let closed = normalization_closed_form(mu, sigma, spec.xi);
        let quad = normalization_quadrature(mu, sigma, spec.xi)?;
        if (closed - quad).abs() > 1e-9 * closed.max(1e-300) {
            return Err(Error::Numeric(format!(
                "slab constant mismatch for {side:?}: closed form {closed:e}, quadrature {quad:e}"
            )));
        }
        *slot = closed;
    }
    Ok(SlabNormalization { c_neg: out[0], c_pos: out[1], fingerprint: spec.fingerprint() })
}

/// `g_l(β) = ω(β; ξ) N(β; μ_l, σ_l²) / c_l`.
pub fn slab_kernel_density(beta: f64, side: Side, spec: &ShrinkagePriorSpec, norm: &SlabNormalization) -> Result<f64> {
    norm.check(spec)?;
    let (mu, sigma) = spec.slab(side);
    Ok(omega(beta, spec.xi) * normal::pdf(beta, mu, sigma) / norm.constant(side))
}

/// Mixture weights `(π₋₁, π₀, π₁)` after normalization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransitionWeights {
    pub weights: [f64; 3],
    /// All three kernels vanished at `β_prev`; mass went to the nearest mode.
    pub fallback: bool,
}

#[inline]
fn ln_omega(beta: f64, xi: f64) -> f64 {
    omega(beta, xi).ln()
}

/// Prior with its normalization and cached log constants; the hot-path type
/// used by the filter.
#[derive(Debug, Clone)]
pub struct NonlocalPrior {
    spec: ShrinkagePriorSpec,
    norm: SlabNormalization,
    ln_c: [f64; 2],
    ln_init: [f64; 3],
}

impl NonlocalPrior {
    pub fn new(spec: ShrinkagePriorSpec) -> Result<Self> {
        let norm = compute_normalization(&spec)?;
        Ok(Self {
            ln_c: [norm.c_neg.ln(), norm.c_pos.ln()],
            ln_init: spec.init_weights.map(f64::ln),
            spec,
            norm,
        })
    }

    pub fn spec(&self) -> &ShrinkagePriorSpec {
        &self.spec
    }

    pub fn normalization(&self) -> &SlabNormalization {
        &self.norm
    }

    /// Log kernel values `(ln g₋₁, ln N(0, σ₀²), ln g₁)` at `β`.
    #[inline]
    pub fn ln_kernels(&self, beta: f64) -> [f64; 3] {
        let s = &self.spec;
        let lw = ln_omega(beta, s.xi);
        [
            lw + normal::ln_pdf(beta, s.mu_neg, s.sigma_neg) - self.ln_c[0],
            normal::ln_pdf(beta, 0.0, s.sigma_zero),
            lw + normal::ln_pdf(beta, s.mu_pos, s.sigma_pos) - self.ln_c[1],
        ]
    }

    /// Kernel densities `(g₋₁, N(0, σ₀²), g₁)` at `β`.
    #[inline]
    pub fn kernels(&self, beta: f64) -> [f64; 3] {
        self.ln_kernels(beta).map(f64::exp)
    }

    pub fn transition_weights(&self, beta_prev: f64) -> TransitionWeights {
        let lk = self.ln_kernels(beta_prev);
        let total = log_sum_exp(&lk);
        if !total.is_finite() {
            // Only reachable for non-finite β_prev.
            let mut weights = [0.0; 3];
            let idx = if beta_prev.is_nan() || beta_prev.abs() < 1.0 {
                1
            } else if beta_prev < 0.0 {
                0
            } else {
                2
            };
            weights[idx] = 1.0;
            return TransitionWeights { weights, fallback: true };
        }
        let mut weights = lk.map(|v| (v - total).exp());
        let sum: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= sum);
        TransitionWeights { weights, fallback: false }
    }

    #[inline]
    pub fn mix(weights: &[f64; 3], kernels: &[f64; 3]) -> f64 {
        weights[0] * kernels[0] + weights[1] * kernels[1] + weights[2] * kernels[2]
    }

    pub fn transition_density(&self, beta: f64, beta_prev: f64) -> f64 {
        Self::mix(&self.transition_weights(beta_prev).weights, &self.kernels(beta))
    }

    pub fn ln_initial_density(&self, beta: f64) -> f64 {
        let lk = self.ln_kernels(beta);
        log_sum_exp(&[lk[0] + self.ln_init[0], lk[1] + self.ln_init[1], lk[2] + self.ln_init[2]])
    }

    fn sample_mixture<R: Rng + ?Sized>(&self, weights: &[f64; 3], rng: &mut R) -> Result<f64> {
        let u: f64 = rng.random();
        let component = if u < weights[0] {
            0
        } else if u < weights[0] + weights[1] {
            1
        } else {
            2
        };
        match component {
            1 => Ok(self.spec.sigma_zero * rng.sample::<f64, _>(StandardNormal)),
            0 => self.sample_slab(Side::Negative, rng),
            _ => self.sample_slab(Side::Positive, rng),
        }
    }

    /// Draws from `g_l` by proposing `N(μ_l, σ_l²)` and accepting with
    /// probability `ω(β; ξ)`; the acceptance rate is `c_l`.
    pub fn sample_slab<R: Rng + ?Sized>(&self, side: Side, rng: &mut R) -> Result<f64> {
        let (mu, sigma) = self.spec.slab(side);
        for _ in 0..MAX_REJECTION_PROPOSALS {
            let z: f64 = rng.sample(StandardNormal);
            let beta = mu + sigma * z;
            let u: f64 = rng.random();
            if u < omega(beta, self.spec.xi) {
                return Ok(beta);
            }
        }
        Err(Error::Numeric(format!(
            "slab rejection sampler exceeded {MAX_REJECTION_PROPOSALS} proposals"
        )))
    }

    pub fn sample_initial<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<f64> {
        self.sample_mixture(&self.spec.init_weights, rng)
    }

    pub fn sample_transition<R: Rng + ?Sized>(&self, beta_prev: f64, rng: &mut R) -> Result<f64> {
        let w = self.transition_weights(beta_prev);
        self.sample_mixture(&w.weights, rng)
    }
}

/// Mixture weights at `β_prev`.
pub fn transition_weights(
    beta_prev: f64,
    spec: &ShrinkagePriorSpec,
    norm: &SlabNormalization,
) -> Result<TransitionWeights> {
    norm.check(spec)?;
    Ok(prior_for(spec, norm).transition_weights(beta_prev))
}

/// `p(β | β_prev)`.
pub fn transition_density(beta: f64, beta_prev: f64, spec: &ShrinkagePriorSpec, norm: &SlabNormalization) -> Result<f64> {
    norm.check(spec)?;
    Ok(prior_for(spec, norm).transition_density(beta, beta_prev))
}

pub fn sample_initial<R: Rng + ?Sized>(spec: &ShrinkagePriorSpec, rng: &mut R) -> Result<f64> {
    let norm = compute_normalization(spec)?;
    prior_for(spec, &norm).sample_initial(rng)
}

pub fn sample_transition<R: Rng + ?Sized>(
    beta_prev: f64,
    spec: &ShrinkagePriorSpec,
    norm: &SlabNormalization,
    rng: &mut R,
) -> Result<f64> {
    norm.check(spec)?;
    prior_for(spec, norm).sample_transition(beta_prev, rng)
}

fn prior_for(spec: &ShrinkagePriorSpec, norm: &SlabNormalization) -> NonlocalPrior {
    NonlocalPrior {
        ln_c: [norm.c_neg.ln(), norm.c_pos.ln()],
        ln_init: spec.init_weights.map(f64::ln),
        spec: spec.clone(),
        norm: *norm,
    }
}

/// Gaussian random-walk alternative for low-dimensional runs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RandomWalkSpec {
    pub initial_sd: f64,
    pub step_sd: f64,
}

impl Default for RandomWalkSpec {
    fn default() -> Self {
        Self { initial_sd: 1.0, step_sd: 0.25 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PriorKind {
    #[default]
    NonlocalSas,
    GaussianRw,
}

/// Per-coefficient prior used by the filter.
#[derive(Debug, Clone)]
pub enum CoefficientPrior {
    Nonlocal(NonlocalPrior),
    RandomWalk(RandomWalkSpec),
}

/// What the transition density needs to know about a previous value.
#[derive(Debug, Clone, Copy)]
pub enum PrevState {
    Weights([f64; 3]),
    Mean(f64),
}

/// What the transition density needs to know about the new value.
#[derive(Debug, Clone, Copy)]
pub enum EntryKernels {
    Kernels([f64; 3]),
    Value(f64),
}

impl CoefficientPrior {
    pub fn from_config(kind: PriorKind, spec: &ShrinkagePriorSpec, rw: RandomWalkSpec) -> Result<Self> {
        match kind {
            PriorKind::NonlocalSas => Ok(Self::Nonlocal(NonlocalPrior::new(spec.clone())?)),
            PriorKind::GaussianRw => {
                if !(rw.initial_sd > 0.0 && rw.step_sd > 0.0) {
                    return Err(contract("random-walk prior needs positive standard deviations"));
                }
                Ok(Self::RandomWalk(rw))
            }
        }
    }

    pub fn ln_initial_density(&self, beta: f64) -> f64 {
        match self {
            Self::Nonlocal(p) => p.ln_initial_density(beta),
            Self::RandomWalk(rw) => normal::ln_pdf(beta, 0.0, rw.initial_sd),
        }
    }

    pub fn transition_density(&self, beta: f64, beta_prev: f64) -> f64 {
        match self {
            Self::Nonlocal(p) => p.transition_density(beta, beta_prev),
            Self::RandomWalk(rw) => normal::pdf(beta, beta_prev, rw.step_sd),
        }
    }

    pub fn prev_state(&self, beta_prev: f64) -> PrevState {
        match self {
            Self::Nonlocal(p) => PrevState::Weights(p.transition_weights(beta_prev).weights),
            Self::RandomWalk(_) => PrevState::Mean(beta_prev),
        }
    }

    #[inline]
    pub fn entry_kernels(&self, beta: f64) -> EntryKernels {
        match self {
            Self::Nonlocal(p) => EntryKernels::Kernels(p.kernels(beta)),
            Self::RandomWalk(_) => EntryKernels::Value(beta),
        }
    }

    /// Transition density from precomputed pieces.
    #[inline]
    pub fn density_from(&self, kernels: &EntryKernels, prev: &PrevState) -> f64 {
        match (self, kernels, prev) {
            (_, EntryKernels::Kernels(k), PrevState::Weights(w)) => NonlocalPrior::mix(w, k),
            (Self::RandomWalk(rw), EntryKernels::Value(b), PrevState::Mean(m)) => normal::pdf(*b, *m, rw.step_sd),
            _ => unreachable!("kernel and state kinds come from the same prior"),
        }
    }

    pub fn sample_initial<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<f64> {
        match self {
            Self::Nonlocal(p) => p.sample_initial(rng),
            Self::RandomWalk(rw) => Ok(rw.initial_sd * rng.sample::<f64, _>(StandardNormal)),
        }
    }

    pub fn sample_transition<R: Rng + ?Sized>(&self, beta_prev: f64, rng: &mut R) -> Result<f64> {
        match self {
            Self::Nonlocal(p) => p.sample_transition(beta_prev, rng),
            Self::RandomWalk(rw) => Ok(beta_prev + rw.step_sd * rng.sample::<f64, _>(StandardNormal)),
        }
    }

    /// Sum of entrywise log initial densities.
    pub fn ln_initial_array(&self, values: &[f64]) -> f64 {
        values.iter().map(|&b| self.ln_initial_density(b)).sum()
    }

    /// Monte-Carlo prior `log[(1/H) Σ_h Π_e p(β_e | β_e^{(h)})]`.
    pub fn marginal_prior_density(&self, beta: &CoefficientArray, prev_pool: &[CoefficientArray]) -> Result<f64> {
        if prev_pool.is_empty() {
            return Err(contract("marginal prior density needs a nonempty previous pool"));
        }
        let kernels: Vec<EntryKernels> = beta.values().iter().map(|&b| self.entry_kernels(b)).collect();
        let mut per_particle = Vec::with_capacity(prev_pool.len());
        for prev in prev_pool {
            if prev.dims() != beta.dims() {
                return Err(contract("previous pool particle dimensions differ from the evaluated array"));
            }
            let ln: f64 = kernels
                .iter()
                .zip(prev.values())
                .map(|(k, &b)| self.density_from(k, &self.prev_state(b)).ln())
                .sum();
            per_particle.push(ln);
        }
        Ok(log_sum_exp(&per_particle) - (prev_pool.len() as f64).ln())
    }
}

/// Spec-level entry point for the Monte-Carlo marginal prior.
pub fn marginal_prior_density(
    beta: &CoefficientArray,
    prev_pool: &[CoefficientArray],
    spec: &ShrinkagePriorSpec,
    norm: &SlabNormalization,
) -> Result<f64> {
    norm.check(spec)?;
    CoefficientPrior::Nonlocal(prior_for(spec, norm)).marginal_prior_density(beta, prev_pool)
}

/// `∫ p(β | β_prev) dβ` by quadrature with breakpoints at the spike and both
/// slab modes; used as a normalization check.
pub fn transition_mass(prior: &NonlocalPrior, beta_prev: f64, rel_tol: f64) -> Result<f64> {
    let s = prior.spec();
    let w = prior.transition_weights(beta_prev).weights;
    let lo = (s.mu_neg - 14.0 * s.sigma_neg).min(-14.0 * s.sigma_zero);
    let hi = (s.mu_pos + 14.0 * s.sigma_pos).max(14.0 * s.sigma_zero);
    let mut points = vec![lo, s.mu_neg, -4.0 * s.sigma_zero, 0.0, 4.0 * s.sigma_zero, s.mu_pos, hi];
    points.sort_by(f64::total_cmp);
    points.dedup();
    let opts = QuadratureOptions { rel_tol, abs_tol: 0.0, max_intervals: 10_000 };
    let r = crate::quadrature::integrate_with_breaks(|b| NonlocalPrior::mix(&w, &prior.kernels(b)), &points, opts)?;
    Ok(r.value)
}
