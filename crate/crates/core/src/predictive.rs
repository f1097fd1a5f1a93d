//! Filtered predictive distributions for hypothetical respondents.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::model::{latent_mean_into, ModelSpec};
use crate::smc::ParticlePool;
use crate::topic::LogisticNormalPosterior;

/// A hypothetical respondent: covariates plus a membership prior.
#[derive(Debug, Clone, PartialEq)]
pub struct Profile {
    pub label: String,
    pub covariates: Vec<f64>,
    pub membership_prior: LogisticNormalPosterior,
}

/// Probability mass over the lattice of outcome vectors `Π_p {1..C_p}`,
/// stored row-major with the first outcome varying slowest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictivePmf {
    pub categories: Vec<usize>,
    pub mass: Vec<f64>,
    /// θ draws (one per particle and repetition) behind the estimate.
    pub draws: usize,
}

impl PredictivePmf {
    pub fn new(categories: Vec<usize>, mass: Vec<f64>, draws: usize) -> Result<Self> {
        let size: usize = categories.iter().product();
        if categories.iter().any(|&c| c < 2) || mass.len() != size {
            return Err(contract(format!(
                "pmf with {} masses does not fit categories {categories:?}",
                mass.len()
            )));
        }
        if mass.iter().any(|m| !(*m >= 0.0)) {
            return Err(contract("pmf masses must be nonnegative"));
        }
        let total: f64 = mass.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(contract(format!("pmf masses sum to {total}")));
        }
        Ok(Self { categories, mass, draws })
    }

    pub fn len(&self) -> usize {
        self.mass.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mass.is_empty()
    }

    /// Lattice index of a 1-based outcome vector.
    pub fn index(&self, y: &[usize]) -> Result<usize> {
        if y.len() != self.categories.len() {
            return Err(contract("outcome vector length does not match the pmf"));
        }
        let mut idx = 0;
        for (&c, &v) in self.categories.iter().zip(y) {
            if v == 0 || v > c {
                return Err(contract(format!("category {v} outside 1..={c}")));
            }
            idx = idx * c + (v - 1);
        }
        Ok(idx)
    }

    pub fn probability(&self, y: &[usize]) -> Result<f64> {
        Ok(self.mass[self.index(y)?])
    }

    /// Marginal pmf of outcome `p` (index 0 is category 1).
    pub fn marginal(&self, p: usize) -> Result<Vec<f64>> {
        let c = *self.categories.get(p).ok_or_else(|| contract(format!("outcome {p} out of range")))?;
        let inner: usize = self.categories[p + 1..].iter().product();
        let mut out = vec![0.0; c];
        for (i, m) in self.mass.iter().enumerate() {
            out[(i / inner) % c] += m;
        }
        Ok(out)
    }
}

/// Adds `weight × Π_p cells[p][y_p]` to every lattice point of `out`.
pub(crate) fn accumulate_lattice(cells: &[&[f64]], weight: f64, out: &mut [f64]) {
    let mut counter = vec![0usize; cells.len()];
    for slot in out.iter_mut() {
        let mut v = weight;
        for (c, &i) in cells.iter().zip(&counter) {
            v *= c[i];
        }
        *slot += v;
        for p in (0..cells.len()).rev() {
            counter[p] += 1;
            if counter[p] < cells[p].len() {
                break;
            }
            counter[p] = 0;
        }
    }
}

/// Predictive pmf plus the per-particle marginal pmfs behind it.
#[derive(Debug, Clone, PartialEq)]
pub struct ProfilePrediction {
    pub pmf: PredictivePmf,
    /// Per particle, the concatenated marginal pmfs of every outcome.
    pub marginals: Vec<Vec<f64>>,
    offsets: Vec<usize>,
}

impl ProfilePrediction {
    /// Per-particle probability that outcome `p` lies above `cutpoint`.
    pub fn particle_risks(&self, p: usize, cutpoint: usize) -> Result<Vec<f64>> {
        let c = *self.pmf.categories.get(p).ok_or_else(|| contract(format!("outcome {p} out of range")))?;
        check_cutpoint(cutpoint, c)?;
        let off = self.offsets[p];
        Ok(self.marginals.iter().map(|m| m[off + cutpoint..off + c].iter().sum()).collect())
    }
}

fn check_profile(profile: &Profile, spec: &ModelSpec) -> Result<()> {
    if profile.covariates.len() != spec.covariate_count {
        return Err(contract(format!(
            "profile '{}' has {} covariates, model expects {}",
            profile.label,
            profile.covariates.len(),
            spec.covariate_count
        )));
    }
    if profile.membership_prior.groups() != spec.group_count {
        return Err(contract(format!(
            "profile '{}' membership prior has {} groups, model has {}",
            profile.label,
            profile.membership_prior.groups(),
            spec.group_count
        )));
    }
    Ok(())
}

/// Averages the mixture pmf `Σ_k θ_k Π_p P(y_p | x, B_k)` over the pool, with
/// `draws_per_particle` fresh θ draws from the profile's prior per particle.
pub fn profile_predictive_detailed<R: Rng + ?Sized>(
    profile: &Profile,
    pool: &ParticlePool,
    spec: &ModelSpec,
    draws_per_particle: usize,
    rng: &mut R,
) -> Result<ProfilePrediction> {
    check_profile(profile, spec)?;
    if pool.is_empty() || draws_per_particle == 0 {
        return Err(contract("predictive needs a nonempty pool and at least one draw"));
    }
    let (k, p) = (spec.group_count, spec.outcome_count());
    let categories: Vec<usize> = spec.outcomes.iter().map(|o| o.categories()).collect();
    let mut offsets = Vec::with_capacity(p);
    let mut width = 0;
    for &c in &categories {
        offsets.push(width);
        width += c;
    }
    let mut mass = vec![0.0; categories.iter().product()];
    let mut particle_mass = vec![0.0; mass.len()];
    let mut group_cells = vec![0.0; k * width];
    let mut mu = vec![0.0; p];
    let mut theta = vec![0.0; k];
    let mut z = vec![0.0; k];
    let mut marginals = Vec::with_capacity(pool.len());
    let weights = pool.weights();
    for (part, &w) in pool.particles.iter().zip(&weights) {
        spec.check_coefficients(&part.coefficients)?;
        for g in 0..k {
            latent_mean_into(&profile.covariates, part.coefficients.group_slice(g), &mut mu);
            for (o, (&m, &off)) in spec.outcomes.iter().zip(mu.iter().zip(&offsets)) {
                o.cell_probabilities(m, &mut group_cells[g * width + off..g * width + off + o.categories()]);
            }
        }
        particle_mass.iter_mut().for_each(|v| *v = 0.0);
        let mut marginal = vec![0.0; width];
        let share = 1.0 / draws_per_particle as f64;
        for _ in 0..draws_per_particle {
            profile.membership_prior.sample_theta_into(rng, &mut z, &mut theta);
            for (g, &t) in theta.iter().enumerate() {
                if t == 0.0 {
                    continue;
                }
                let row = &group_cells[g * width..(g + 1) * width];
                let cells: Vec<&[f64]> = offsets.iter().zip(&categories).map(|(&off, &c)| &row[off..off + c]).collect();
                accumulate_lattice(&cells, t * share, &mut particle_mass);
                for (m, v) in marginal.iter_mut().zip(row) {
                    *m += t * share * v;
                }
            }
        }
        for (a, v) in mass.iter_mut().zip(&particle_mass) {
            *a += w * v;
        }
        marginals.push(marginal);
    }
    let total: f64 = mass.iter().sum();
    mass.iter_mut().for_each(|m| *m /= total);
    let pmf = PredictivePmf::new(categories, mass, pool.len() * draws_per_particle)?;
    Ok(ProfilePrediction { pmf, marginals, offsets })
}

/// Filtered predictive pmf of a profile with one θ draw per particle.
pub fn profile_predictive<R: Rng + ?Sized>(
    profile: &Profile,
    pool: &ParticlePool,
    spec: &ModelSpec,
    rng: &mut R,
) -> Result<PredictivePmf> {
    Ok(profile_predictive_detailed(profile, pool, spec, 1, rng)?.pmf)
}

fn check_cutpoint(cutpoint: usize, categories: usize) -> Result<()> {
    if cutpoint == 0 || cutpoint >= categories {
        return Err(contract(format!("cutpoint {cutpoint} outside 1..{categories}")));
    }
    Ok(())
}

/// Probability that outcome `p` (0-based) exceeds category `cutpoint`.
pub fn risk_probability(pmf: &PredictivePmf, p: usize, cutpoint: usize) -> Result<f64> {
    let marginal = pmf.marginal(p)?;
    check_cutpoint(cutpoint, marginal.len())?;
    Ok(marginal[cutpoint..].iter().sum::<f64>().clamp(0.0, 1.0))
}

pub fn relative_risk(target: f64, baseline: f64) -> Result<f64> {
    if !(baseline > 0.0) {
        return Err(contract(format!("relative risk needs a positive baseline, got {baseline}")));
    }
    Ok(target / baseline)
}

/// Linear-interpolation quantile of sorted data at level `q`.
fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Central interval holding `level` of the values, from linearly interpolated
/// empirical quantiles.
pub fn credible_band(values: &[f64], level: f64) -> Result<(f64, f64)> {
    if values.is_empty() || !(level > 0.0 && level < 1.0) {
        return Err(contract("credible band needs values and a level in (0, 1)"));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let tail = (1.0 - level) / 2.0;
    Ok((quantile_sorted(&sorted, tail), quantile_sorted(&sorted, 1.0 - tail)))
}
