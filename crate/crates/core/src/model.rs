//! Ordered-probit mixture likelihood.
//!
//! Respondent `n` in group `k` has latent `z_n ~ N_P(x_n B_k, I_P)`; outcome `p`
//! falls in category `c` (1-based) when `τ_{p,c-1} < z_{np} <= τ_{p,c}`. The
//! latent vector is integrated out analytically, so every likelihood here is a
//! product of normal-CDF differences.

use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::normal;
use crate::topic::LogisticNormalPosterior;

/// Log-likelihoods never go below this value; anything at the floor means the
/// cell probabilities underflowed.
pub const LOG_LIK_FLOOR: f64 = -745.0;

/// Tolerance used when checking that a weight vector lies on the simplex.
pub const SIMPLEX_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeSpec {
    pub name: String,
    thresholds: Vec<f64>,
}

impl OutcomeSpec {
    pub fn new(name: impl Into<String>, thresholds: Vec<f64>) -> Result<Self> {
        let name = name.into();
        if thresholds.is_empty() {
            return Err(contract(format!("outcome {name}: at least one threshold (two categories) required")));
        }
        if thresholds.iter().any(|t| !t.is_finite()) {
            return Err(contract(format!("outcome {name}: thresholds must be finite")));
        }
        if thresholds.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(contract(format!("outcome {name}: thresholds must be strictly increasing")));
        }
        Ok(Self { name, thresholds })
    }

    pub fn thresholds(&self) -> &[f64] {
        &self.thresholds
    }

    pub fn categories(&self) -> usize {
        self.thresholds.len() + 1
    }

    /// `Φ(τ_c − μ) − Φ(τ_{c−1} − μ)` for 1-based category `c`.
    pub fn cell_probability(&self, mu: f64, category: usize) -> Result<f64> {
        if category == 0 || category > self.categories() {
            return Err(contract(format!(
                "outcome {}: category {category} outside 1..={}",
                self.name,
                self.categories()
            )));
        }
        Ok(self.cell_unchecked(mu, category))
    }

    #[inline]
    pub(crate) fn cell_unchecked(&self, mu: f64, category: usize) -> f64 {
        let lower = if category == 1 { f64::NEG_INFINITY } else { self.thresholds[category - 2] - mu };
        let upper = if category == self.categories() { f64::INFINITY } else { self.thresholds[category - 1] - mu };
        normal::interval_mass(lower, upper)
    }

    /// Fills `out` (length `categories()`) with the full cell pmf at mean `mu`.
    /// One normal tail is evaluated per threshold, always on the side where it
    /// is small, and each cell is formed from whichever pair of tails avoids
    /// cancellation.
    pub fn cell_probabilities(&self, mu: f64, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.categories());
        let last = self.thresholds.len();
        let mut prev: Option<(f64, f64)> = None; // (z, small tail) of the lower threshold
        for (c, slot) in out.iter_mut().enumerate() {
            let upper = (c < last).then(|| {
                let z = self.thresholds[c] - mu;
                (z, if z < 0.0 { normal::cdf(z) } else { normal::sf(z) })
            });
            let cell = match (prev, upper) {
                (None, Some((z, t))) => if z < 0.0 { t } else { 1.0 - t },
                (Some((z, t)), None) => if z < 0.0 { 1.0 - t } else { t },
                (Some((zl, tl)), Some((zu, tu))) => {
                    if zl >= 0.0 {
                        tl - tu
                    } else if zu < 0.0 {
                        tu - tl
                    } else {
                        1.0 - tl - tu
                    }
                }
                (None, None) => 1.0,
            };
            *slot = cell.max(0.0);
            prev = upper;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub outcomes: Vec<OutcomeSpec>,
    pub covariate_count: usize,
    pub group_count: usize,
}

impl ModelSpec {
    pub fn new(outcomes: Vec<OutcomeSpec>, covariate_count: usize, group_count: usize) -> Result<Self> {
        if outcomes.is_empty() || covariate_count == 0 || group_count == 0 {
            return Err(contract("model needs P >= 1 outcomes, Q >= 1 covariates and K >= 1 groups"));
        }
        Ok(Self { outcomes, covariate_count, group_count })
    }

    pub fn outcome_count(&self) -> usize {
        self.outcomes.len()
    }

    /// Size of the outcome lattice `Π_p C_p`.
    pub fn lattice_size(&self) -> usize {
        self.outcomes.iter().map(OutcomeSpec::categories).product()
    }

    pub fn validate_respondent(&self, r: &Respondent) -> Result<()> {
        if r.covariates.len() != self.covariate_count {
            return Err(contract(format!(
                "respondent has {} covariates, model expects {}",
                r.covariates.len(),
                self.covariate_count
            )));
        }
        if r.responses.len() != self.outcomes.len() {
            return Err(contract(format!(
                "respondent has {} responses, model expects {}",
                r.responses.len(),
                self.outcomes.len()
            )));
        }
        for (p, (&y, spec)) in r.responses.iter().zip(&self.outcomes).enumerate() {
            if y == 0 || y > spec.categories() {
                return Err(contract(format!(
                    "response {y} for outcome {p} ({}) outside 1..={}",
                    spec.name,
                    spec.categories()
                )));
            }
        }
        if r.covariates.iter().any(|v| !v.is_finite()) {
            return Err(contract("respondent covariates must be finite"));
        }
        Ok(())
    }

    pub fn check_coefficients(&self, b: &CoefficientArray) -> Result<()> {
        if b.groups != self.group_count || b.covariates != self.covariate_count || b.outcomes != self.outcomes.len() {
            return Err(contract(format!(
                "coefficient array is {}x{}x{}, model is {}x{}x{}",
                b.groups,
                b.covariates,
                b.outcomes,
                self.group_count,
                self.covariate_count,
                self.outcomes.len()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Respondent {
    pub covariates: Vec<f64>,
    /// 1-based ordinal levels, one per outcome.
    pub responses: Vec<usize>,
    pub period: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PeriodBatch {
    pub period: u32,
    pub respondents: Vec<Respondent>,
    pub membership_priors: Vec<LogisticNormalPosterior>,
}

impl PeriodBatch {
    pub fn new(
        period: u32,
        respondents: Vec<Respondent>,
        membership_priors: Vec<LogisticNormalPosterior>,
    ) -> Result<Self> {
        if respondents.len() != membership_priors.len() {
            return Err(contract(format!(
                "batch has {} respondents but {} membership priors",
                respondents.len(),
                membership_priors.len()
            )));
        }
        if let Some(r) = respondents.iter().find(|r| r.period != period) {
            return Err(contract(format!("respondent from period {} in batch for period {period}", r.period)));
        }
        Ok(Self { period, respondents, membership_priors })
    }

    pub fn len(&self) -> usize {
        self.respondents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.respondents.is_empty()
    }

    pub fn validate(&self, spec: &ModelSpec) -> Result<()> {
        for r in &self.respondents {
            spec.validate_respondent(r)?;
        }
        for post in &self.membership_priors {
            if post.groups() != spec.group_count {
                return Err(contract(format!(
                    "membership prior describes {} groups, model has {}",
                    post.groups(),
                    spec.group_count
                )));
            }
        }
        Ok(())
    }
}

/// `K × Q × P` regression coefficients, stored so that each group's `Q × P`
/// slice is contiguous.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientArray {
    groups: usize,
    covariates: usize,
    outcomes: usize,
    values: Vec<f64>,
}

impl CoefficientArray {
    pub fn zeros(groups: usize, covariates: usize, outcomes: usize) -> Self {
        Self { groups, covariates, outcomes, values: vec![0.0; groups * covariates * outcomes] }
    }

    pub fn for_spec(spec: &ModelSpec) -> Self {
        Self::zeros(spec.group_count, spec.covariate_count, spec.outcome_count())
    }

    pub fn from_values(groups: usize, covariates: usize, outcomes: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != groups * covariates * outcomes {
            return Err(contract(format!(
                "{} values cannot fill a {groups}x{covariates}x{outcomes} array",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(contract("coefficients must be finite"));
        }
        Ok(Self { groups, covariates, outcomes, values })
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.groups, self.covariates, self.outcomes)
    }

    pub fn groups(&self) -> usize {
        self.groups
    }

    pub fn slice_len(&self) -> usize {
        self.covariates * self.outcomes
    }

    #[inline]
    pub fn index(&self, k: usize, q: usize, p: usize) -> usize {
        (k * self.covariates + q) * self.outcomes + p
    }

    #[inline]
    pub fn get(&self, k: usize, q: usize, p: usize) -> f64 {
        self.values[self.index(k, q, p)]
    }

    #[inline]
    pub fn set(&mut self, k: usize, q: usize, p: usize, v: f64) {
        let i = self.index(k, q, p);
        self.values[i] = v;
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// The `Q × P` block of group `k` (row-major in `q`).
    #[inline]
    pub fn group_slice(&self, k: usize) -> &[f64] {
        let n = self.slice_len();
        &self.values[k * n..(k + 1) * n]
    }

    #[inline]
    pub fn group_slice_mut(&mut self, k: usize) -> &mut [f64] {
        let n = self.slice_len();
        &mut self.values[k * n..(k + 1) * n]
    }

    /// Reorders groups so that new group `g` holds old group `perm[g]`.
    pub fn permute_groups(&self, perm: &[usize]) -> Self {
        let mut out = self.clone();
        for (g, &src) in perm.iter().enumerate() {
            out.group_slice_mut(g).copy_from_slice(self.group_slice(src));
        }
        out
    }
}

/// `x · B_k`: mean of the latent vector for a respondent in group `k`.
pub fn latent_mean(x: &[f64], b: &CoefficientArray, k: usize) -> Result<Vec<f64>> {
    if x.len() != b.covariates {
        return Err(contract(format!("covariate vector has length {}, array expects {}", x.len(), b.covariates)));
    }
    if k >= b.groups {
        return Err(contract(format!("group {k} outside 0..{}", b.groups)));
    }
    let mut out = vec![0.0; b.outcomes];
    latent_mean_into(x, b.group_slice(k), &mut out);
    Ok(out)
}

/// Unchecked kernel for `x · slice` where `slice` is a `Q × P` block.
#[inline]
pub(crate) fn latent_mean_into(x: &[f64], slice: &[f64], out: &mut [f64]) {
    let p_count = out.len();
    out.iter_mut().for_each(|v| *v = 0.0);
    for (q, &xq) in x.iter().enumerate() {
        if xq == 0.0 {
            continue;
        }
        let row = &slice[q * p_count..(q + 1) * p_count];
        for (o, &beta) in out.iter_mut().zip(row) {
            *o += xq * beta;
        }
    }
}

/// Log-likelihood of one slice for a respondent, without validation.
#[inline]
pub(crate) fn slice_loglik(x: &[f64], y: &[usize], slice: &[f64], spec: &ModelSpec, scratch: &mut [f64]) -> f64 {
    latent_mean_into(x, slice, scratch);
    let mut total = 0.0;
    for ((&mu, &yp), outcome) in scratch.iter().zip(y).zip(&spec.outcomes) {
        let cell = outcome.cell_unchecked(mu, yp);
        if cell <= 0.0 {
            return LOG_LIK_FLOOR;
        }
        total += cell.ln();
    }
    total.max(LOG_LIK_FLOOR)
}

/// `Σ_p log P(y_np | μ_p)` for group `k`, floored at [`LOG_LIK_FLOOR`].
pub fn respondent_loglik(r: &Respondent, b: &CoefficientArray, k: usize, spec: &ModelSpec) -> Result<f64> {
    spec.validate_respondent(r)?;
    spec.check_coefficients(b)?;
    if k >= b.groups {
        return Err(contract(format!("group {k} outside 0..{}", b.groups)));
    }
    let mut scratch = vec![0.0; spec.outcome_count()];
    Ok(slice_loglik(&r.covariates, &r.responses, b.group_slice(k), spec, &mut scratch))
}

pub fn check_simplex(theta: &[f64], expected_len: usize) -> Result<()> {
    if theta.len() != expected_len {
        return Err(contract(format!("weight vector has length {}, expected {expected_len}", theta.len())));
    }
    if theta.iter().any(|t| !(*t >= -SIMPLEX_TOL) || !t.is_finite()) {
        return Err(contract("weight vector has negative or non-finite entries"));
    }
    let sum: f64 = theta.iter().sum();
    if (sum - 1.0).abs() > SIMPLEX_TOL {
        return Err(contract(format!("weight vector sums to {sum}, not 1")));
    }
    Ok(())
}

/// `log Σ_k θ_k exp(ℓ_k)` with the memberships integrated out.
pub fn marginal_loglik(r: &Respondent, b: &CoefficientArray, theta: &[f64], spec: &ModelSpec) -> Result<f64> {
    spec.validate_respondent(r)?;
    spec.check_coefficients(b)?;
    check_simplex(theta, b.groups)?;
    let mut scratch = vec![0.0; spec.outcome_count()];
    let terms: Vec<f64> = theta
        .iter()
        .enumerate()
        .map(|(k, &t)| {
            if t <= 0.0 {
                f64::NEG_INFINITY
            } else {
                t.ln() + slice_loglik(&r.covariates, &r.responses, b.group_slice(k), spec, &mut scratch)
            }
        })
        .collect();
    Ok(normal::log_sum_exp(&terms))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn binary(thr: f64) -> OutcomeSpec {
        OutcomeSpec::new("y", vec![thr]).unwrap()
    }

    fn three() -> OutcomeSpec {
        OutcomeSpec::new("three", vec![-0.5, 0.5]).unwrap()
    }

    fn four() -> OutcomeSpec {
        OutcomeSpec::new("four", vec![-0.75, 0.0, 0.75]).unwrap()
    }

    #[test]
    fn outcome_spec_rejects_unordered_thresholds() {
        assert!(OutcomeSpec::new("bad", vec![0.5, 0.5]).is_err());
        assert!(OutcomeSpec::new("bad", vec![]).is_err());
        assert!(OutcomeSpec::new("bad", vec![1.0, -1.0]).is_err());
    }

    #[test]
    fn latent_mean_examples() {
        let b = CoefficientArray::from_values(2, 3, 2, (0..12).map(|v| v as f64 * 0.1).collect()).unwrap();
        assert_eq!(latent_mean(&[0.0; 3], &b, 1).unwrap(), vec![0.0, 0.0]);

        let b = CoefficientArray::from_values(1, 1, 2, vec![0.3, -0.2]).unwrap();
        assert_eq!(latent_mean(&[1.0], &b, 0).unwrap(), vec![0.3, -0.2]);

        let b = CoefficientArray::from_values(1, 2, 1, vec![0.5, 0.25]).unwrap();
        assert_eq!(latent_mean(&[1.0, 1.0], &b, 0).unwrap(), vec![0.75]);

        assert!(latent_mean(&[1.0], &b, 0).is_err());
        assert!(latent_mean(&[1.0, 1.0], &b, 1).is_err());
    }

    #[test]
    fn cell_probability_examples() {
        assert_eq!(binary(0.0).cell_probability(0.0, 2).unwrap(), 0.5);
        // Φ(0.5) − Φ(−0.5), 50-digit reference.
        let v = three().cell_probability(0.0, 2).unwrap();
        assert!((v - 0.382_924_922_548_026_2).abs() < 1e-15);
        let want = [
            0.226_627_352_376_868_2,
            0.273_372_647_623_131_8,
            0.273_372_647_623_131_8,
            0.226_627_352_376_868_2,
        ];
        for (c, w) in want.iter().enumerate() {
            let got = four().cell_probability(0.0, c + 1).unwrap();
            assert!((got - w).abs() < 1e-15, "c={} got {got}", c + 1);
        }
        assert!(three().cell_probability(0.0, 0).is_err());
        assert!(three().cell_probability(0.0, 4).is_err());
    }

    fn respondent(x: Vec<f64>, y: Vec<usize>) -> Respondent {
        Respondent { covariates: x, responses: y, period: 1 }
    }

    #[test]
    fn respondent_loglik_examples() {
        let spec = ModelSpec::new(vec![binary(0.0)], 1, 1).unwrap();
        let b = CoefficientArray::for_spec(&spec);
        let ll = respondent_loglik(&respondent(vec![1.0], vec![1]), &b, 0, &spec).unwrap();
        assert!((ll - 0.5f64.ln()).abs() < 1e-15);

        let spec = ModelSpec::new(vec![binary(0.0), three()], 1, 3).unwrap();
        let b = CoefficientArray::for_spec(&spec);
        let r = respondent(vec![1.0], vec![2, 2]);
        let ll = respondent_loglik(&r, &b, 0, &spec).unwrap();
        assert!((ll - (-1.653_063_514_255_567_6)).abs() < 1e-14);
        for k in 1..3 {
            assert_eq!(respondent_loglik(&r, &b, k, &spec).unwrap(), ll);
        }
    }

    #[test]
    fn respondent_loglik_floors_underflow() {
        let spec = ModelSpec::new(vec![binary(0.0)], 1, 1).unwrap();
        let b = CoefficientArray::from_values(1, 1, 1, vec![60.0]).unwrap();
        let ll = respondent_loglik(&respondent(vec![1.0], vec![1]), &b, 0, &spec).unwrap();
        assert_eq!(ll, LOG_LIK_FLOOR);
    }

    #[test]
    fn respondent_loglik_rejects_bad_category() {
        let spec = ModelSpec::new(vec![binary(0.0)], 1, 1).unwrap();
        let b = CoefficientArray::for_spec(&spec);
        assert!(respondent_loglik(&respondent(vec![1.0], vec![3]), &b, 0, &spec).is_err());
    }

    #[test]
    fn marginal_loglik_examples() {
        let spec = ModelSpec::new(vec![three()], 1, 2).unwrap();
        let r = respondent(vec![1.0], vec![3]);
        let b = CoefficientArray::from_values(2, 1, 1, vec![0.4, -0.7]).unwrap();
        let l0 = respondent_loglik(&r, &b, 0, &spec).unwrap().exp();
        let l1 = respondent_loglik(&r, &b, 1, &spec).unwrap().exp();
        let m = marginal_loglik(&r, &b, &[0.5, 0.5], &spec).unwrap();
        assert!((m - (0.5 * l0 + 0.5 * l1).ln()).abs() < 1e-14);

        let single = ModelSpec::new(vec![three()], 1, 1).unwrap();
        let b1 = CoefficientArray::from_values(1, 1, 1, vec![0.4]).unwrap();
        assert_eq!(
            marginal_loglik(&r, &b1, &[1.0], &single).unwrap(),
            respondent_loglik(&r, &b1, 0, &single).unwrap()
        );

        let same = CoefficientArray::from_values(2, 1, 1, vec![0.4, 0.4]).unwrap();
        let m = marginal_loglik(&r, &same, &[0.3, 0.7], &spec).unwrap();
        assert!((m - respondent_loglik(&r, &same, 0, &spec).unwrap()).abs() < 1e-15);

        assert!(marginal_loglik(&r, &b, &[0.5, 0.6], &spec).is_err());
    }

    #[test]
    fn marginal_loglik_arithmetic_mean_of_point_two_and_point_four() {
        // Binary outcome, category 2: P = 1 − Φ(−μ) = Φ(μ); pick μ = Φ⁻¹(0.2), Φ⁻¹(0.4).
        let spec = ModelSpec::new(vec![binary(0.0)], 1, 2).unwrap();
        let mu_02 = -0.841_621_233_572_914_2;
        let mu_04 = -0.253_347_103_135_799_7;
        let b = CoefficientArray::from_values(2, 1, 1, vec![mu_02, mu_04]).unwrap();
        let r = respondent(vec![1.0], vec![2]);
        let m = marginal_loglik(&r, &b, &[0.5, 0.5], &spec).unwrap();
        assert!((m - 0.3f64.ln()).abs() < 1e-13, "{m}");
    }

    proptest! {
        #[test]
        fn cells_sum_to_one(mu in -40.0f64..40.0, t0 in -3.0f64..0.0, gap in 0.01f64..3.0, gap2 in 0.01f64..3.0) {
            let spec = OutcomeSpec::new("p", vec![t0, t0 + gap, t0 + gap + gap2]).unwrap();
            let total: f64 = (1..=4).map(|c| spec.cell_probability(mu, c).unwrap()).sum();
            prop_assert!((total - 1.0).abs() <= 1e-12);
        }

        #[test]
        fn batched_cells_match_single_cells(mu in -40.0f64..40.0, t0 in -3.0f64..0.0, gap in 0.01f64..3.0, gap2 in 0.01f64..3.0) {
            let spec = OutcomeSpec::new("p", vec![t0, t0 + gap, t0 + gap + gap2]).unwrap();
            let mut out = [0.0; 4];
            spec.cell_probabilities(mu, &mut out);
            for (c, &v) in out.iter().enumerate() {
                let single = spec.cell_probability(mu, c + 1).unwrap();
                prop_assert!((v - single).abs() <= 1e-15 + 1e-12 * single, "cell {} {} {}", c + 1, v, single);
            }
        }

        #[test]
        fn extreme_cells_are_monotone(mu in -6.0f64..6.0, d in 0.001f64..2.0) {
            let spec = four();
            prop_assert!(spec.cell_probability(mu + d, 4).unwrap() >= spec.cell_probability(mu, 4).unwrap());
            prop_assert!(spec.cell_probability(mu + d, 1).unwrap() <= spec.cell_probability(mu, 1).unwrap());
        }

        #[test]
        fn marginal_lies_between_component_extremes(
            b in proptest::collection::vec(-2.0f64..2.0, 6),
            w in proptest::collection::vec(0.01f64..1.0, 3),
            y in 1usize..=3,
        ) {
            let spec = ModelSpec::new(vec![three()], 2, 3).unwrap();
            let arr = CoefficientArray::from_values(3, 2, 1, b).unwrap();
            let total: f64 = w.iter().sum();
            let theta: Vec<f64> = w.iter().map(|v| v / total).collect();
            let r = respondent(vec![1.0, 0.5], vec![y]);
            let lls: Vec<f64> = (0..3).map(|k| respondent_loglik(&r, &arr, k, &spec).unwrap()).collect();
            let m = marginal_loglik(&r, &arr, &theta, &spec).unwrap();
            let lo = lls.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = lls.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(m >= lo - 1e-12 && m <= hi + 1e-12);
        }

        #[test]
        fn loglik_invariant_under_outcome_permutation(b in proptest::collection::vec(-2.0f64..2.0, 4), y1 in 1usize..=3, y2 in 1usize..=4) {
            let spec = ModelSpec::new(vec![three(), four()], 2, 1).unwrap();
            let swapped = ModelSpec::new(vec![four(), three()], 2, 1).unwrap();
            let arr = CoefficientArray::from_values(1, 2, 2, b.clone()).unwrap();
            // Swap the p axis: new (q, p) = old (q, 1 − p).
            let arr_sw = CoefficientArray::from_values(1, 2, 2, vec![b[1], b[0], b[3], b[2]]).unwrap();
            let r = respondent(vec![1.0, -0.3], vec![y1, y2]);
            let r_sw = respondent(vec![1.0, -0.3], vec![y2, y1]);
            let a = respondent_loglik(&r, &arr, 0, &spec).unwrap();
            let c = respondent_loglik(&r_sw, &arr_sw, 0, &swapped).unwrap();
            prop_assert!((a - c).abs() < 1e-12);
        }
    }
}
