//! Exact posterior and predictive on a coefficient grid, for instances small
//! enough to enumerate, and the discrete KL divergence between pmfs.

use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::model::{latent_mean_into, CoefficientArray, ModelSpec, PeriodBatch};
use crate::normal::{self, log_sum_exp};
use crate::predictive::{accumulate_lattice, PredictivePmf};
use crate::prior::CoefficientPrior;
use crate::quadrature::{integrate_with_breaks, QuadratureOptions};
use crate::topic::LogisticNormalPosterior;

/// Largest `K^{ΣN} · G^{KQP}` the oracle accepts.
pub const ORACLE_COST_BOUND: f64 = 1e8;
/// Floor applied to the second pmf where the first has mass.
pub const KL_FLOOR: f64 = 1e-12;

/// Uniform grid shared by every free coefficient.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoefficientGrid {
    pub lo: f64,
    pub hi: f64,
    pub points: usize,
}

impl Default for CoefficientGrid {
    fn default() -> Self {
        Self { lo: -4.5, hi: 4.5, points: 61 }
    }
}

impl CoefficientGrid {
    pub fn nodes(&self) -> Vec<f64> {
        let h = self.spacing();
        (0..self.points).map(|i| self.lo + i as f64 * h).collect()
    }

    /// Node spacing; a single-node grid is a point mass and reports 1.
    pub fn spacing(&self) -> f64 {
        if self.points == 1 {
            1.0
        } else {
            (self.hi - self.lo) / (self.points - 1) as f64
        }
    }

    /// Same range with `2(G−1)+1` points, so existing nodes are kept.
    pub fn refined(&self) -> Self {
        Self { points: 2 * (self.points - 1) + 1, ..*self }
    }

    fn validate(&self) -> Result<()> {
        let ordered = if self.points == 1 { self.hi >= self.lo } else { self.hi > self.lo };
        if self.points == 0 || !ordered || !self.lo.is_finite() || !self.hi.is_finite() {
            return Err(contract(format!("invalid coefficient grid {self:?}")));
        }
        Ok(())
    }
}

/// `E[θ_1]` for two groups, by adaptive quadrature of the logistic function
/// against the Gaussian law of `η`.
pub fn two_group_mean(post: &LogisticNormalPosterior) -> Result<[f64; 2]> {
    if post.groups() != 2 {
        return Err(contract("two_group_mean needs a two-group prior"));
    }
    let m = post.mean()[0];
    let var = post.cov()[(0, 0)];
    let logistic = |e: f64| if e >= 0.0 { 1.0 / (1.0 + (-e).exp()) } else { e.exp() / (1.0 + e.exp()) };
    let t = if var <= 0.0 {
        logistic(m)
    } else {
        let sd = var.sqrt();
        let opts = QuadratureOptions { rel_tol: 1e-13, abs_tol: 1e-15, ..Default::default() };
        let breaks: Vec<f64> = (-12..=12).map(|i| m + sd * i as f64).collect();
        integrate_with_breaks(|e| logistic(e) * normal::pdf(e, m, sd), &breaks, opts)?.value
    };
    Ok([t, 1.0 - t])
}

fn group_means(post: &LogisticNormalPosterior) -> Result<Vec<f64>> {
    if post.groups() == 2 {
        Ok(two_group_mean(post)?.to_vec())
    } else {
        Ok(post.expected_theta())
    }
}

/// Grid posterior of the last period's coefficients.
#[derive(Debug, Clone)]
pub struct OraclePosterior {
    spec: ModelSpec,
    nodes: Vec<f64>,
    dims: usize,
    /// Normalized mass per grid point, mixed radix with the first array entry
    /// most significant.
    pub weights: Vec<f64>,
    pub period: u32,
}

fn grid_point(index: usize, nodes: &[f64], dims: usize, out: &mut [f64]) {
    let g = nodes.len();
    let mut rest = index;
    for e in (0..dims).rev() {
        out[e] = nodes[rest % g];
        rest /= g;
    }
}

/// `ln Π_n Σ_k θ̄_nk L(y_n | B_k)` at every grid point.
fn log_likelihood_grid(spec: &ModelSpec, batch: &PeriodBatch, nodes: &[f64], dims: usize) -> Result<Vec<f64>> {
    let thetas: Vec<Vec<f64>> = batch.membership_priors.iter().map(group_means).collect::<Result<_>>()?;
    let (k, qp) = (spec.group_count, spec.covariate_count * spec.outcome_count());
    let total = nodes.len().pow(dims as u32);
    let mut out = vec![0.0; total];
    let mut b = vec![0.0; dims];
    let mut mu = vec![0.0; spec.outcome_count()];
    for (i, slot) in out.iter_mut().enumerate() {
        grid_point(i, nodes, dims, &mut b);
        let mut ll = 0.0;
        for (r, theta) in batch.respondents.iter().zip(&thetas) {
            let mut mix = 0.0;
            for g in 0..k {
                latent_mean_into(&r.covariates, &b[g * qp..(g + 1) * qp], &mut mu);
                let lik: f64 = spec
                    .outcomes
                    .iter()
                    .zip(&mu)
                    .zip(&r.responses)
                    .map(|((o, &m), &c)| o.cell_probability(m, c))
                    .product::<Result<f64>>()?;
                mix += theta[g] * lik;
            }
            ll += mix.ln();
        }
        *slot = ll;
    }
    Ok(out)
}

/// Applies `matrix[a][b]` along axis `axis` of a `G^dims` tensor.
fn contract_axis(tensor: &[f64], matrix: &[f64], g: usize, dims: usize, axis: usize) -> Vec<f64> {
    let stride = g.pow((dims - 1 - axis) as u32);
    let mut out = vec![0.0; tensor.len()];
    for (i, slot) in out.iter_mut().enumerate() {
        let a = (i / stride) % g;
        let base = i - a * stride;
        let row = &matrix[a * g..(a + 1) * g];
        *slot = row.iter().enumerate().map(|(b, m)| m * tensor[base + b * stride]).sum();
    }
    out
}

fn normalize_log(log_w: &[f64]) -> Vec<f64> {
    let z = log_sum_exp(log_w);
    log_w.iter().map(|l| (l - z).exp()).collect()
}

/// Exact (up to the grid) filtering posterior of the last batch's period.
/// Coefficients live on `grid`; memberships are summed out exactly, which is
/// equivalent to enumerating all `K^{N_t}` assignments since respondents are
/// conditionally independent given the coefficients.
pub fn brute_force_posterior(
    spec: &ModelSpec,
    prior: &CoefficientPrior,
    batches: &[PeriodBatch],
    grid: &CoefficientGrid,
) -> Result<OraclePosterior> {
    grid.validate()?;
    let last = batches.last().ok_or_else(|| contract("oracle needs at least one batch"))?;
    let dims = spec.group_count * spec.covariate_count * spec.outcome_count();
    let n_total: usize = batches.iter().map(PeriodBatch::len).sum();
    let cost = (spec.group_count as f64).powi(n_total as i32) * (grid.points as f64).powi(dims as i32);
    if cost > ORACLE_COST_BOUND {
        return Err(Error::OracleCost { cost, bound: ORACLE_COST_BOUND });
    }
    for b in batches {
        b.validate(spec)?;
    }
    let nodes = grid.nodes();
    let g = nodes.len();
    let h = grid.spacing();

    let mut log_w = vec![0.0; g.pow(dims as u32)];
    let mut b = vec![0.0; dims];
    for (i, slot) in log_w.iter_mut().enumerate() {
        grid_point(i, &nodes, dims, &mut b);
        *slot = b.iter().map(|&v| prior.ln_initial_density(v)).sum();
    }
    let transition: Vec<f64> = (0..g * g).map(|ab| prior.transition_density(nodes[ab / g], nodes[ab % g]) * h).collect();

    for (t, batch) in batches.iter().enumerate() {
        if t > 0 {
            let mut w = normalize_log(&log_w);
            for axis in 0..dims {
                w = contract_axis(&w, &transition, g, dims, axis);
            }
            log_w = w.iter().map(|v| v.ln()).collect();
        }
        let ll = log_likelihood_grid(spec, batch, &nodes, dims)?;
        log_w.iter_mut().zip(&ll).for_each(|(w, l)| *w += l);
    }
    Ok(OraclePosterior { spec: spec.clone(), nodes, dims, weights: normalize_log(&log_w), period: last.period })
}

impl OraclePosterior {
    pub fn grid_size(&self) -> usize {
        self.weights.len()
    }

    pub fn posterior_mean(&self) -> CoefficientArray {
        let mut mean = vec![0.0; self.dims];
        let mut b = vec![0.0; self.dims];
        for (i, &w) in self.weights.iter().enumerate() {
            grid_point(i, &self.nodes, self.dims, &mut b);
            mean.iter_mut().zip(&b).for_each(|(m, v)| *m += w * v);
        }
        let (k, q, p) = (self.spec.group_count, self.spec.covariate_count, self.spec.outcome_count());
        CoefficientArray::from_values(k, q, p, mean).expect("grid nodes are finite")
    }

    /// Posterior predictive pmf for covariates `x` with group weights
    /// `E[θ]` of `membership_prior`.
    pub fn predictive(&self, x: &[f64], membership_prior: &LogisticNormalPosterior) -> Result<PredictivePmf> {
        let spec = &self.spec;
        if x.len() != spec.covariate_count || membership_prior.groups() != spec.group_count {
            return Err(contract("profile does not match the oracle model"));
        }
        let theta = group_means(membership_prior)?;
        let categories: Vec<usize> = spec.outcomes.iter().map(|o| o.categories()).collect();
        let qp = spec.covariate_count * spec.outcome_count();
        let mut mass = vec![0.0; categories.iter().product()];
        let mut b = vec![0.0; self.dims];
        let mut mu = vec![0.0; spec.outcome_count()];
        let mut cells: Vec<Vec<f64>> = categories.iter().map(|&c| vec![0.0; c]).collect();
        for (i, &w) in self.weights.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            grid_point(i, &self.nodes, self.dims, &mut b);
            for (gk, &t) in theta.iter().enumerate() {
                latent_mean_into(x, &b[gk * qp..(gk + 1) * qp], &mut mu);
                for ((o, &m), cell) in spec.outcomes.iter().zip(&mu).zip(cells.iter_mut()) {
                    for (c, v) in cell.iter_mut().enumerate() {
                        *v = o.cell_probability(m, c + 1)?;
                    }
                }
                let refs: Vec<&[f64]> = cells.iter().map(Vec::as_slice).collect();
                accumulate_lattice(&refs, w * t, &mut mass);
            }
        }
        let total: f64 = mass.iter().sum();
        mass.iter_mut().for_each(|m| *m /= total);
        PredictivePmf::new(categories, mass, 0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Divergence {
    pub nats: f64,
    /// Lattice points where `q` was floored.
    pub floored: usize,
}

/// `Σ p log(p / q)` over a shared finite support.
pub fn discrete_kl(p: &PredictivePmf, q: &PredictivePmf) -> Result<Divergence> {
    if p.categories != q.categories {
        return Err(contract(format!(
            "pmf supports differ: {:?} vs {:?}",
            p.categories, q.categories
        )));
    }
    let mut nats = 0.0;
    let mut floored = 0;
    for (&a, &b) in p.mass.iter().zip(&q.mass) {
        if a > 0.0 {
            let b = if b < KL_FLOOR {
                floored += 1;
                KL_FLOOR
            } else {
                b
            };
            nats += a * (a / b).ln();
        }
    }
    Ok(Divergence { nats: nats.max(0.0), floored })
}
