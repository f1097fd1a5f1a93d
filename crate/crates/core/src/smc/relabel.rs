//! Label alignment: each particle's groups are permuted to best match a
//! reference coefficient array, solved exactly as a linear assignment.

use crate::model::CoefficientArray;

use super::ParticlePool;

/// Minimum-cost perfect matching on a square cost matrix (row-major, `n × n`).
/// Returns `assign[row] = column`. Shortest augmenting paths with potentials.
pub fn optimal_assignment(cost: &[f64], n: usize) -> Vec<usize> {
    assert_eq!(cost.len(), n * n, "cost matrix must be square");
    // 1-based arrays with a virtual column 0.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut matched_row = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        matched_row[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = matched_row[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[matched_row[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if matched_row[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            matched_row[j0] = matched_row[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0; n];
    for j in 1..=n {
        assign[matched_row[j] - 1] = j - 1;
    }
    assign
}

/// Permutation `perm` with `perm[g]` = the particle group that should become
/// group `g`, minimizing the summed squared distance to `reference`.
pub fn alignment_permutation(coefficients: &CoefficientArray, reference: &CoefficientArray) -> Vec<usize> {
    let k = coefficients.groups();
    let mut cost = vec![0.0; k * k];
    for g in 0..k {
        let target = reference.group_slice(g);
        for h in 0..k {
            cost[g * k + h] = target
                .iter()
                .zip(coefficients.group_slice(h))
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
        }
    }
    optimal_assignment(&cost, k)
}

/// Aligns every particle to `reference`, permuting coefficients and
/// memberships together. With no reference the first particle is used.
pub fn relabel(pool: &mut ParticlePool, reference: Option<&CoefficientArray>) {
    let Some(first) = pool.particles.first() else {
        return;
    };
    let reference = reference.cloned().unwrap_or_else(|| first.coefficients.clone());
    for particle in &mut pool.particles {
        let perm = alignment_permutation(&particle.coefficients, &reference);
        if perm.iter().enumerate().all(|(g, &h)| g == h) {
            continue;
        }
        particle.coefficients = particle.coefficients.permute_groups(&perm);
        let mut inverse = vec![0u16; perm.len()];
        for (g, &h) in perm.iter().enumerate() {
            inverse[h] = g as u16;
        }
        for s in &mut particle.memberships {
            *s = inverse[*s as usize];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::smc::Particle;
    use proptest::prelude::*;

    fn brute_force(cost: &[f64], n: usize) -> f64 {
        fn rec(cost: &[f64], n: usize, row: usize, used: &mut Vec<bool>) -> f64 {
            if row == n {
                return 0.0;
            }
            let mut best = f64::INFINITY;
            for j in 0..n {
                if !used[j] {
                    used[j] = true;
                    best = best.min(cost[row * n + j] + rec(cost, n, row + 1, used));
                    used[j] = false;
                }
            }
            best
        }
        rec(cost, n, 0, &mut vec![false; n])
    }

    #[test]
    fn swapped_particle_is_realigned() {
        let a = CoefficientArray::from_values(2, 1, 2, vec![1.0, 2.0, -1.0, 0.5]).unwrap();
        let swapped = a.permute_groups(&[1, 0]);
        let mut pool = ParticlePool::new(
            vec![
                Particle { coefficients: a.clone(), memberships: vec![0, 1, 1], log_weight: 0.0 },
                Particle { coefficients: swapped, memberships: vec![1, 0, 0], log_weight: 0.0 },
            ],
            1,
            0,
            0,
        );
        relabel(&mut pool, None);
        assert_eq!(pool.particles[0].coefficients, pool.particles[1].coefficients);
        assert_eq!(pool.particles[0].memberships, pool.particles[1].memberships);
    }

    #[test]
    fn aligned_pool_keeps_identity() {
        let a = CoefficientArray::from_values(3, 1, 1, vec![-2.0, 0.0, 2.0]).unwrap();
        let b = CoefficientArray::from_values(3, 1, 1, vec![-1.9, 0.1, 2.2]).unwrap();
        assert_eq!(alignment_permutation(&b, &a), vec![0, 1, 2]);
    }

    proptest! {
        #[test]
        fn assignment_is_optimal(n in 1usize..6, raw in proptest::collection::vec(0.0f64..10.0, 36)) {
            let cost: Vec<f64> = raw[..n * n].to_vec();
            let assign = optimal_assignment(&cost, n);
            let mut seen = vec![false; n];
            for &j in &assign { prop_assert!(!seen[j]); seen[j] = true; }
            let total: f64 = assign.iter().enumerate().map(|(i, &j)| cost[i * n + j]).sum();
            prop_assert!((total - brute_force(&cost, n)).abs() < 1e-9);
        }
    }
}
