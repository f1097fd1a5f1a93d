//! Topic-model membership priors.
//!
//! Each respondent's group weights `θ` follow a logistic-normal law: a
//! Gaussian `η ∈ ℝ^{K−1}` pushed through the softmax with the K-th group as
//! reference (`η_K ≡ 0`). The topic model supplies either the posterior of `η`
//! directly or the hyperparameters `(Γ, Λ, Ψ)` from which a Laplace
//! approximation is built here.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{contract, Error, Result};
use crate::quadrature::gauss_hermite;

/// Floor applied to topic-word probabilities loaded from sparse files.
pub const GAMMA_FLOOR: f64 = 1e-12;

const SYMMETRY_TOL: f64 = 1e-12;
const PSD_TOL: f64 = 1e-10;

/// Symmetric square root of a PSD matrix; tiny negative eigenvalues within
/// `PSD_TOL` are clamped to zero.
fn symmetric_sqrt(cov: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let d = cov.nrows();
    if d == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }
    let eig = SymmetricEigen::new(cov.clone());
    let min = eig.eigenvalues.min();
    if min < -PSD_TOL {
        return Err(Error::Numeric(format!(
            "covariance is not positive semi-definite: eigenvalues {:?}",
            eig.eigenvalues.as_slice()
        )));
    }
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    let v = &eig.eigenvectors;
    Ok(v * DMatrix::from_diagonal(&roots) * v.transpose())
}

fn check_symmetric(m: &DMatrix<f64>, what: &str) -> Result<()> {
    if !m.is_square() {
        return Err(contract(format!("{what} must be square, got {}x{}", m.nrows(), m.ncols())));
    }
    for i in 0..m.nrows() {
        for j in 0..i {
            if (m[(i, j)] - m[(j, i)]).abs() > SYMMETRY_TOL {
                return Err(contract(format!("{what} is not symmetric at ({i}, {j})")));
            }
        }
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(contract(format!("{what} has non-finite entries")));
    }
    Ok(())
}

/// A covariance together with its symmetric square root, shareable between
/// many posteriors.
#[derive(Debug, Clone, PartialEq)]
pub struct SharedCovariance {
    cov: DMatrix<f64>,
    sqrt: DMatrix<f64>,
}

impl SharedCovariance {
    pub fn new(cov: DMatrix<f64>) -> Result<Arc<Self>> {
        check_symmetric(&cov, "eta covariance")?;
        let sqrt = symmetric_sqrt(&cov)?;
        Ok(Arc::new(Self { cov, sqrt }))
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn sqrt_factor(&self) -> &DMatrix<f64> {
        &self.sqrt
    }
}

/// Gaussian posterior of `η` for one respondent.
#[derive(Debug, Clone, PartialEq)]
pub struct LogisticNormalPosterior {
    mean: DVector<f64>,
    cov: Arc<SharedCovariance>,
}

impl LogisticNormalPosterior {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let cov = SharedCovariance::new(cov)?;
        Self::with_shared(mean, cov)
    }

    pub fn with_shared(mean: DVector<f64>, cov: Arc<SharedCovariance>) -> Result<Self> {
        if cov.cov.nrows() != mean.len() {
            return Err(contract(format!(
                "eta mean has length {} but covariance is {}x{}",
                mean.len(),
                cov.cov.nrows(),
                cov.cov.ncols()
            )));
        }
        if mean.iter().any(|v| !v.is_finite()) {
            return Err(contract("eta mean has non-finite entries"));
        }
        Ok(Self { mean, cov })
    }

    /// Point mass at `softmax_embed(mean)`.
    pub fn degenerate(mean: DVector<f64>) -> Result<Self> {
        let d = mean.len();
        Self::new(mean, DMatrix::zeros(d, d))
    }

    /// Prior for the single-group model: `θ = (1)` with certainty.
    pub fn single_group() -> Self {
        Self {
            mean: DVector::zeros(0),
            cov: Arc::new(SharedCovariance { cov: DMatrix::zeros(0, 0), sqrt: DMatrix::zeros(0, 0) }),
        }
    }

    pub fn groups(&self) -> usize {
        self.mean.len() + 1
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov.cov
    }

    pub fn shared_cov(&self) -> &Arc<SharedCovariance> {
        &self.cov
    }

    fn is_point_mass(&self) -> bool {
        self.cov.sqrt.iter().all(|v| *v == 0.0)
    }

    /// Draws `η` into `eta`, using `z` as scratch for standard normals.
    pub fn sample_eta_into<R: Rng + ?Sized>(&self, rng: &mut R, z: &mut [f64], eta: &mut [f64]) {
        let d = self.mean.len();
        for zi in z.iter_mut().take(d) {
            *zi = rng.sample(StandardNormal);
        }
        let l = &self.cov.sqrt;
        for i in 0..d {
            let mut acc = self.mean[i];
            for j in 0..d {
                acc += l[(i, j)] * z[j];
            }
            eta[i] = acc;
        }
    }

    /// Draws `θ` into `theta` (length K) using `z` (length ≥ K−1) as scratch.
    pub fn sample_theta_into<R: Rng + ?Sized>(&self, rng: &mut R, z: &mut [f64], theta: &mut [f64]) {
        let d = self.mean.len();
        let (eta, last) = theta.split_at_mut(d);
        self.sample_eta_into(rng, z, eta);
        last[0] = 0.0;
        softmax_in_place(theta);
    }

    /// `E[θ]` under this posterior: tensor Gauss–Hermite for up to three free
    /// dimensions, a fixed-seed antithetic Monte-Carlo average beyond that.
    pub fn expected_theta(&self) -> Vec<f64> {
        let d = self.mean.len();
        let k = d + 1;
        if d == 0 {
            return vec![1.0];
        }
        if self.is_point_mass() {
            return softmax_embed(self.mean.as_slice());
        }
        let mut acc = vec![0.0; k];
        let mut eta = vec![0.0; d];
        let mut theta = vec![0.0; k];
        let l = &self.cov.sqrt;
        let mut accumulate = |z: &[f64], w: f64, acc: &mut [f64]| {
            for i in 0..d {
                eta[i] = self.mean[i] + (0..d).map(|j| l[(i, j)] * z[j]).sum::<f64>();
            }
            theta[..d].copy_from_slice(&eta);
            theta[d] = 0.0;
            softmax_in_place(&mut theta);
            for (a, t) in acc.iter_mut().zip(&theta) {
                *a += w * t;
            }
        };
        if d <= 3 {
            let n = [48, 20, 10][d - 1];
            let (x, w) = gauss_hermite(n);
            let mut idx = vec![0usize; d];
            let mut z = vec![0.0; d];
            loop {
                let mut weight = 1.0;
                for (zi, &i) in z.iter_mut().zip(&idx) {
                    *zi = x[i];
                    weight *= w[i];
                }
                accumulate(&z, weight, &mut acc);
                let mut pos = 0;
                loop {
                    idx[pos] += 1;
                    if idx[pos] < n {
                        break;
                    }
                    idx[pos] = 0;
                    pos += 1;
                    if pos == d {
                        break;
                    }
                }
                if pos == d {
                    break;
                }
            }
        } else {
            const DRAWS: usize = 4096;
            let mut rng = ChaCha8Rng::seed_from_u64(0x7e7a_5eed);
            let mut z = vec![0.0; d];
            let w = 1.0 / DRAWS as f64;
            for _ in 0..DRAWS / 2 {
                for zi in z.iter_mut() {
                    *zi = rng.sample(StandardNormal);
                }
                accumulate(&z, w, &mut acc);
                z.iter_mut().for_each(|v| *v = -*v);
                accumulate(&z, w, &mut acc);
            }
        }
        let s: f64 = acc.iter().sum();
        acc.iter_mut().for_each(|a| *a /= s);
        acc
    }
}

/// Softmax over `v` in place (max-shifted).
fn softmax_in_place(v: &mut [f64]) {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for x in v.iter_mut() {
        *x = (*x - m).exp();
        s += *x;
    }
    for x in v.iter_mut() {
        *x /= s;
    }
}

/// Maps `η` (length K−1) to `θ` (length K) with `η_K = 0`.
pub fn softmax_embed(eta: &[f64]) -> Vec<f64> {
    let mut theta = Vec::with_capacity(eta.len() + 1);
    theta.extend_from_slice(eta);
    theta.push(0.0);
    softmax_in_place(&mut theta);
    theta
}

pub fn sample_theta<R: Rng + ?Sized>(post: &LogisticNormalPosterior, rng: &mut R) -> Vec<f64> {
    let d = post.mean.len();
    let mut z = vec![0.0; d];
    let mut theta = vec![0.0; d + 1];
    post.sample_theta_into(rng, &mut z, &mut theta);
    theta
}

/// Draws a 0-based group index with probability `θ_k`.
pub fn sample_membership<R: Rng + ?Sized>(theta: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random::<f64>() * theta.iter().sum::<f64>();
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (k, &t) in theta.iter().enumerate() {
        if t > 0.0 {
            last_positive = k;
        }
        acc += t;
        if u < acc {
            return k;
        }
    }
    last_positive
}

/// Bag-of-words document as (vocabulary index, count) pairs.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DocumentCounts {
    pub entries: Vec<(usize, u32)>,
}

impl DocumentCounts {
    pub fn new(entries: Vec<(usize, u32)>) -> Self {
        Self { entries }
    }

    pub fn total(&self) -> f64 {
        self.entries.iter().map(|e| e.1 as f64).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.iter().all(|e| e.1 == 0)
    }
}

/// Topic-model hyperparameters: topic-word matrix `Γ` (K × H), prior mean
/// map `Λ` ((K−1) × U) and prior covariance `Ψ`.
#[derive(Debug, Clone, PartialEq)]
pub struct StmHyper {
    gamma: DMatrix<f64>,
    lambda: DMatrix<f64>,
    psi: DMatrix<f64>,
}

impl StmHyper {
    pub fn new(gamma: DMatrix<f64>, lambda: DMatrix<f64>, psi: DMatrix<f64>) -> Result<Self> {
        let k = gamma.nrows();
        if k == 0 || gamma.ncols() == 0 {
            return Err(contract("topic-word matrix must be nonempty"));
        }
        for (t, row) in gamma.row_iter().enumerate() {
            if row.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
                return Err(contract(format!("topic {t}: word probabilities must be finite and nonnegative")));
            }
            let s: f64 = row.sum();
            if (s - 1.0).abs() > 1e-9 {
                return Err(contract(format!("topic {t}: word probabilities sum to {s}")));
            }
        }
        if lambda.nrows() != k - 1 {
            return Err(contract(format!("lambda has {} rows, expected {}", lambda.nrows(), k - 1)));
        }
        if psi.nrows() != k - 1 {
            return Err(contract(format!("psi is {}x{}, expected {}x{}", psi.nrows(), psi.ncols(), k - 1, k - 1)));
        }
        check_symmetric(&psi, "psi")?;
        symmetric_sqrt(&psi)?;
        Ok(Self { gamma, lambda, psi })
    }

    /// Builds `Γ` from sparse (topic, word, probability) triplets; entries
    /// below `GAMMA_FLOOR` (including absent ones) are floored and each row
    /// renormalized.
    pub fn from_triplets(
        topics: usize,
        vocabulary: usize,
        triplets: &[(usize, usize, f64)],
        lambda: DMatrix<f64>,
        psi: DMatrix<f64>,
    ) -> Result<Self> {
        let mut gamma = DMatrix::<f64>::zeros(topics, vocabulary);
        for &(t, w, p) in triplets {
            if t >= topics || w >= vocabulary {
                return Err(contract(format!("gamma triplet ({t}, {w}) outside {topics}x{vocabulary}")));
            }
            if !(p >= 0.0 && p.is_finite()) {
                return Err(contract(format!("gamma triplet ({t}, {w}) has invalid probability {p}")));
            }
            gamma[(t, w)] += p;
        }
        for mut row in gamma.row_iter_mut() {
            row.iter_mut().for_each(|v| *v = v.max(GAMMA_FLOOR));
            let s = row.sum();
            row /= s;
        }
        Self::new(gamma, lambda, psi)
    }

    pub fn topics(&self) -> usize {
        self.gamma.nrows()
    }

    pub fn vocabulary(&self) -> usize {
        self.gamma.ncols()
    }

    pub fn covariate_dim(&self) -> usize {
        self.lambda.ncols()
    }

    pub fn gamma(&self) -> &DMatrix<f64> {
        &self.gamma
    }

    pub fn lambda(&self) -> &DMatrix<f64> {
        &self.lambda
    }

    pub fn psi(&self) -> &DMatrix<f64> {
        &self.psi
    }

    /// Prior mean of `η` for covariates `v`: the (K−1)-vector `Λ v`.
    pub fn prior_mean(&self, v: &[f64]) -> Result<DVector<f64>> {
        if v.len() != self.lambda.ncols() {
            return Err(contract(format!(
                "socio covariate vector has length {}, expected {}",
                v.len(),
                self.lambda.ncols()
            )));
        }
        Ok(&self.lambda * DVector::from_column_slice(v))
    }

    fn check_doc(&self, doc: &DocumentCounts) -> Result<()> {
        if let Some(&(w, _)) = doc.entries.iter().find(|e| e.0 >= self.vocabulary()) {
            return Err(contract(format!("word index {w} outside vocabulary of {}", self.vocabulary())));
        }
        Ok(())
    }
}

/// `log p(w | θ) = Σ_i c_i log Σ_k θ_k Γ_{k,i}`; `-inf` when an observed word
/// has zero probability under every topic.
pub fn word_loglik(doc: &DocumentCounts, theta: &[f64], hyper: &StmHyper) -> Result<f64> {
    hyper.check_doc(doc)?;
    if theta.len() != hyper.topics() {
        return Err(contract(format!("theta has length {}, expected {}", theta.len(), hyper.topics())));
    }
    let mut total = 0.0;
    for &(w, c) in &doc.entries {
        if c == 0 {
            continue;
        }
        let p: f64 = theta.iter().enumerate().map(|(k, t)| t * hyper.gamma[(k, w)]).sum();
        total += c as f64 * p.ln();
    }
    Ok(total)
}

/// Log posterior of `η` (up to a constant) with its analytic gradient and
/// Hessian.
pub struct LaplaceObjective<'a> {
    doc: &'a DocumentCounts,
    hyper: &'a StmHyper,
    prior_mean: DVector<f64>,
    psi_inv: DMatrix<f64>,
}

impl<'a> LaplaceObjective<'a> {
    pub fn new(doc: &'a DocumentCounts, v: &[f64], hyper: &'a StmHyper) -> Result<Self> {
        hyper.check_doc(doc)?;
        let prior_mean = hyper.prior_mean(v)?;
        let psi_inv = hyper
            .psi
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Numeric("psi is singular; the Laplace objective needs an invertible prior covariance".into()))?
            .inverse();
        Ok(Self { doc, hyper, prior_mean, psi_inv })
    }

    pub fn prior_mean(&self) -> &DVector<f64> {
        &self.prior_mean
    }

    fn dim(&self) -> usize {
        self.prior_mean.len()
    }

    pub fn value(&self, eta: &DVector<f64>) -> f64 {
        let theta = softmax_embed(eta.as_slice());
        let diff = eta - &self.prior_mean;
        let quad = diff.dot(&(&self.psi_inv * &diff));
        let mut ll = 0.0;
        for &(w, c) in &self.doc.entries {
            let p: f64 = theta.iter().enumerate().map(|(k, t)| t * self.hyper.gamma[(k, w)]).sum();
            ll += c as f64 * p.ln();
        }
        ll - 0.5 * quad
    }

    /// Returns `(value, gradient, hessian)`.
    pub fn evaluate(&self, eta: &DVector<f64>) -> (f64, DVector<f64>, DMatrix<f64>) {
        let d = self.dim();
        let theta = softmax_embed(eta.as_slice());
        let diff = eta - &self.prior_mean;
        let prec_diff = &self.psi_inv * &diff;
        let mut value = -0.5 * diff.dot(&prec_diff);
        let mut grad = -prec_diff;
        let mut hess = -self.psi_inv.clone();
        let mut phi = vec![0.0; d + 1];
        let mut total = 0.0;
        for &(w, c) in &self.doc.entries {
            if c == 0 {
                continue;
            }
            let c = c as f64;
            total += c;
            let mut s = 0.0;
            for (k, p) in phi.iter_mut().enumerate() {
                *p = theta[k] * self.hyper.gamma[(k, w)];
                s += *p;
            }
            value += c * s.ln();
            phi.iter_mut().for_each(|p| *p /= s);
            for j in 0..d {
                grad[j] += c * phi[j];
                hess[(j, j)] += c * phi[j];
                for l in 0..d {
                    hess[(j, l)] -= c * phi[j] * phi[l];
                }
            }
        }
        for j in 0..d {
            grad[j] -= total * theta[j];
            hess[(j, j)] -= total * theta[j];
            for l in 0..d {
                hess[(j, l)] += total * theta[j] * theta[l];
            }
        }
        (value, grad, hess)
    }
}

/// Outcome of the Laplace fit with diagnostics.
#[derive(Debug, Clone)]
pub struct LaplaceFit {
    pub posterior: LogisticNormalPosterior,
    pub mode: DVector<f64>,
    pub gradient_norm: f64,
    pub iterations: usize,
    /// The negative Hessian was not positive definite and `1e-8·I` was added.
    pub regularized: bool,
}

const LAPLACE_MAX_ITER: usize = 500;
const LAPLACE_GRAD_TOL: f64 = 1e-6;

/// Laplace approximation to the posterior of `η` given a document and
/// socio covariates. The mode is found by BFGS with Armijo backtracking,
/// started at the prior mean with the analytic Hessian as the initial
/// curvature; the covariance is the inverse negative Hessian at the mode.
pub fn laplace_fit(doc: &DocumentCounts, v: &[f64], hyper: &StmHyper) -> Result<LaplaceFit> {
    let obj = LaplaceObjective::new(doc, v, hyper)?;
    let d = obj.dim();
    if doc.is_empty() || d == 0 {
        let posterior = LogisticNormalPosterior::new(obj.prior_mean.clone(), hyper.psi.clone())?;
        return Ok(LaplaceFit {
            mode: obj.prior_mean.clone(),
            posterior,
            gradient_norm: 0.0,
            iterations: 0,
            regularized: false,
        });
    }

    // Minimize the negative objective.
    let mut x = obj.prior_mean.clone();
    let (mut f, mut g, h) = obj.evaluate(&x);
    f = -f;
    g = -g;
    let mut inv_h = (-h).cholesky().map(|c| c.inverse()).unwrap_or_else(|| DMatrix::identity(d, d));
    let mut trace = Vec::new();
    let mut iterations = 0;
    while g.norm() > LAPLACE_GRAD_TOL {
        if iterations == LAPLACE_MAX_ITER {
            return Err(Error::Numeric(format!(
                "Laplace mode search did not converge in {LAPLACE_MAX_ITER} iterations; last gradient norms {:?}",
                &trace[trace.len().saturating_sub(5)..]
            )));
        }
        iterations += 1;
        let mut dir = -(&inv_h * &g);
        let mut slope = g.dot(&dir);
        if slope >= 0.0 {
            inv_h = DMatrix::identity(d, d);
            dir = -g.clone();
            slope = g.dot(&dir);
        }
        let mut step = 1.0;
        let (x_new, f_new, g_new) = loop {
            let cand = &x + step * &dir;
            let (fv, gv, _) = obj.evaluate(&cand);
            let fv = -fv;
            if fv.is_finite() && fv <= f + 1e-4 * step * slope {
                break (cand, fv, -gv);
            }
            step *= 0.5;
            if step < 1e-20 {
                return Err(Error::Numeric(format!(
                    "Laplace line search failed at iteration {iterations} (gradient norm {:e})",
                    g.norm()
                )));
            }
        };
        let s = &x_new - &x;
        let y = &g_new - &g;
        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() {
            let rho = 1.0 / sy;
            let eye = DMatrix::<f64>::identity(d, d);
            let left = &eye - rho * &s * y.transpose();
            let right = &eye - rho * &y * s.transpose();
            inv_h = &left * &inv_h * &right + rho * &s * s.transpose();
        }
        x = x_new;
        f = f_new;
        g = g_new;
        trace.push(g.norm());
    }

    let (_, grad, hess) = obj.evaluate(&x);
    let neg = -hess;
    let (cov, regularized) = match neg.clone().cholesky() {
        Some(c) => (c.inverse(), false),
        None => {
            log::warn!("Laplace Hessian not negative definite at the mode; regularizing");
            let reg = neg + DMatrix::identity(d, d) * 1e-8;
            let c = reg
                .cholesky()
                .ok_or_else(|| Error::Numeric("Laplace Hessian singular even after regularization".into()))?;
            (c.inverse(), true)
        }
    };
    let cov = (&cov + cov.transpose()) * 0.5;
    Ok(LaplaceFit {
        posterior: LogisticNormalPosterior::new(x.clone(), cov)?,
        mode: x,
        gradient_norm: grad.norm(),
        iterations,
        regularized,
    })
}

pub fn laplace_theta_posterior(doc: &DocumentCounts, v: &[f64], hyper: &StmHyper) -> Result<LogisticNormalPosterior> {
    Ok(laplace_fit(doc, v, hyper)?.posterior)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn two_topic_hyper() -> StmHyper {
        let gamma = DMatrix::from_row_slice(2, 3, &[0.5, 0.3, 0.2, 0.01, 0.29, 0.7]);
        StmHyper::new(gamma, DMatrix::from_row_slice(1, 2, &[0.2, -0.4]), DMatrix::from_element(1, 1, 1.0)).unwrap()
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax_embed(&[0.0, 0.0, 0.0]), vec![0.25; 4]);
        assert_eq!(softmax_embed(&[0.0]), vec![0.5, 0.5]);
        let t = softmax_embed(&[2f64.ln(), 0.0]);
        assert!((t[0] - 0.5).abs() < 1e-15 && (t[1] - 0.25).abs() < 1e-15 && (t[2] - 0.25).abs() < 1e-15);
        let t = softmax_embed(&[800.0, -800.0]);
        assert!(t.iter().all(|v| v.is_finite()));
        assert_eq!(softmax_embed(&[]), vec![1.0]);
    }

    #[test]
    fn zero_covariance_sampling_is_deterministic() {
        let post = LogisticNormalPosterior::degenerate(DVector::from_vec(vec![0.3, -0.2])).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let want = softmax_embed(&[0.3, -0.2]);
        for _ in 0..5 {
            assert_eq!(sample_theta(&post, &mut rng), want);
        }
        let post = LogisticNormalPosterior::degenerate(DVector::zeros(3)).unwrap();
        assert_eq!(sample_theta(&post, &mut rng), vec![0.25; 4]);
        assert_eq!(post.expected_theta(), vec![0.25; 4]);
    }

    #[test]
    fn eta_draws_center_on_mean() {
        let cov = DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 0.5]);
        let post = LogisticNormalPosterior::new(DVector::from_vec(vec![0.5, -1.0]), cov).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 100_000;
        let (mut z, mut eta) = (vec![0.0; 2], vec![0.0; 2]);
        let mut sums = [0.0; 2];
        let mut cross = 0.0;
        for _ in 0..n {
            post.sample_eta_into(&mut rng, &mut z, &mut eta);
            sums[0] += eta[0];
            sums[1] += eta[1];
            cross += (eta[0] - 0.5) * (eta[1] + 1.0);
        }
        assert!((sums[0] / n as f64 - 0.5).abs() < 4.0 * (1.0 / n as f64).sqrt());
        assert!((sums[1] / n as f64 + 1.0).abs() < 4.0 * (0.5 / n as f64).sqrt());
        assert!((cross / n as f64 - 0.3).abs() < 0.02);
    }

    #[test]
    fn non_psd_covariance_reports_eigenvalues() {
        let cov = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        let err = LogisticNormalPosterior::new(DVector::zeros(2), cov).unwrap_err();
        assert!(err.to_string().contains("eigenvalues"));
    }

    #[test]
    fn membership_draws() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            assert_eq!(sample_membership(&[0.0, 1.0, 0.0], &mut rng), 1);
        }
        let n = 100_000;
        let hits = (0..n).filter(|_| sample_membership(&[0.7, 0.3], &mut rng) == 0).count();
        let sd = (0.7 * 0.3 / n as f64).sqrt();
        assert!((hits as f64 / n as f64 - 0.7).abs() < 4.0 * sd);
    }

    #[test]
    fn expected_theta_matches_monte_carlo() {
        let cov = DMatrix::from_row_slice(2, 2, &[0.8, 0.2, 0.2, 0.4]);
        let post = LogisticNormalPosterior::new(DVector::from_vec(vec![0.4, -0.3]), cov).unwrap();
        let exact = post.expected_theta();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 200_000;
        let mut acc = [0.0; 3];
        for _ in 0..n {
            let t = sample_theta(&post, &mut rng);
            acc.iter_mut().zip(&t).for_each(|(a, t)| *a += t);
        }
        for k in 0..3 {
            assert!((acc[k] / n as f64 - exact[k]).abs() < 2e-3, "{k}");
        }
        // Higher dimensions use the seeded Monte-Carlo path.
        let post = LogisticNormalPosterior::new(DVector::zeros(4), DMatrix::identity(4, 4)).unwrap();
        let e = post.expected_theta();
        assert!((e.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(e, post.expected_theta());
    }

    #[test]
    fn word_loglik_examples() {
        let h = two_topic_hyper();
        assert_eq!(word_loglik(&DocumentCounts::default(), &[0.5, 0.5], &h).unwrap(), 0.0);
        let gamma = DMatrix::from_row_slice(2, 1, &[0.1, 0.3]);
        // Rows need not be normalized for this arithmetic; build directly.
        let h2 = StmHyper { gamma, lambda: DMatrix::zeros(1, 1), psi: DMatrix::identity(1, 1) };
        let v = word_loglik(&DocumentCounts::new(vec![(0, 1)]), &[0.5, 0.5], &h2).unwrap();
        assert!((v - 0.2f64.ln()).abs() < 1e-15);

        let single = StmHyper::new(
            DMatrix::from_row_slice(1, 2, &[0.25, 0.75]),
            DMatrix::zeros(0, 1),
            DMatrix::zeros(0, 0),
        )
        .unwrap();
        let v = word_loglik(&DocumentCounts::new(vec![(0, 2), (1, 3)]), &[1.0], &single).unwrap();
        assert!((v - (2.0 * 0.25f64.ln() + 3.0 * 0.75f64.ln())).abs() < 1e-14);

        assert!(word_loglik(&DocumentCounts::new(vec![(7, 1)]), &[0.5, 0.5], &h).is_err());
    }

    #[test]
    fn gamma_triplets_are_floored_and_renormalized() {
        let h = StmHyper::from_triplets(
            2,
            3,
            &[(0, 0, 0.5), (0, 1, 0.5), (1, 2, 1.0)],
            DMatrix::zeros(1, 1),
            DMatrix::identity(1, 1),
        )
        .unwrap();
        assert!(h.gamma()[(0, 2)] > 0.0);
        for row in h.gamma().row_iter() {
            assert!((row.sum() - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn empty_document_returns_prior_exactly() {
        let h = two_topic_hyper();
        let post = laplace_theta_posterior(&DocumentCounts::default(), &[1.0, 0.5], &h).unwrap();
        assert_eq!(post.mean()[0], 0.2 * 1.0 - 0.4 * 0.5);
        assert_eq!(post.cov(), h.psi());
    }

    #[test]
    fn repeated_word_pushes_mode_to_favored_topic() {
        let gamma = DMatrix::from_row_slice(2, 2, &[0.5, 0.5, 0.01, 0.99]);
        let h = StmHyper::new(gamma, DMatrix::zeros(1, 1), DMatrix::identity(1, 1)).unwrap();
        let doc = DocumentCounts::new(vec![(0, 1000)]);
        let fit = laplace_fit(&doc, &[1.0], &h).unwrap();
        let theta = softmax_embed(fit.mode.as_slice());
        assert!(theta[0] > 0.99, "{theta:?}");
        assert!(fit.gradient_norm < 1e-6);
        assert!(!fit.regularized);

        // 1-D grid search on the same objective.
        let obj = LaplaceObjective::new(&doc, &[1.0], &h).unwrap();
        let best = (0..=200_000)
            .map(|i| -5.0 + 15.0 * i as f64 / 200_000.0)
            .max_by(|a, b| obj.value(&DVector::from_element(1, *a)).total_cmp(&obj.value(&DVector::from_element(1, *b))))
            .unwrap();
        assert!((best - fit.mode[0]).abs() < 1e-3);
    }

    #[test]
    fn prior_only_objective_is_concave() {
        let h = two_topic_hyper();
        let doc = DocumentCounts::default();
        let obj = LaplaceObjective::new(&doc, &[0.0, 0.0], &h).unwrap();
        let (_, _, hess) = obj.evaluate(&DVector::from_element(1, 0.7));
        assert!(hess.symmetric_eigenvalues().iter().all(|v| *v < 0.0));
    }

    proptest! {
        #[test]
        fn softmax_is_positive_simplex(eta in proptest::collection::vec(-30.0f64..30.0, 0..6)) {
            let t = softmax_embed(&eta);
            prop_assert!((t.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(t.iter().all(|v| *v > 0.0));
        }

        #[test]
        fn splitting_counts_preserves_word_loglik(w in 0usize..3, a in 0.05f64..0.95) {
            let h = two_topic_hyper();
            let theta = [a, 1.0 - a];
            let merged = word_loglik(&DocumentCounts::new(vec![(w, 2)]), &theta, &h).unwrap();
            let split = word_loglik(&DocumentCounts::new(vec![(w, 1), (w, 1)]), &theta, &h).unwrap();
            prop_assert!((merged - split).abs() < 1e-14);
        }
    }
}
