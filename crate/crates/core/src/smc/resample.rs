//! Weight normalization, effective sample size and resampling schemes.

use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Resampler {
    #[default]
    Systematic,
    Multinomial,
}

/// Normalized weights from log-weights (max-shifted).
pub fn compute_weights(log_weights: &[f64]) -> Vec<f64> {
    let max = log_weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        let n = log_weights.len();
        return vec![1.0 / n as f64; n];
    }
    let mut w: Vec<f64> = log_weights.iter().map(|l| (l - max).exp()).collect();
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// `1 / Σ w_j²`.
pub fn effective_sample_size(weights: &[f64]) -> f64 {
    1.0 / weights.iter().map(|w| w * w).sum::<f64>()
}

/// Draws `count` ancestor indices (sorted ascending) from normalized weights.
pub fn resample<R: Rng + ?Sized>(weights: &[f64], count: usize, rng: &mut R, scheme: Resampler) -> Vec<usize> {
    match scheme {
        Resampler::Systematic => {
            let u: f64 = rng.random();
            let n = count as f64;
            let mut out = Vec::with_capacity(count);
            let mut cum = 0.0;
            let mut i = 0;
            let last = weights.len() - 1;
            for m in 0..count {
                let point = (m as f64 + u) / n;
                while i < last && cum + weights[i] <= point {
                    cum += weights[i];
                    i += 1;
                }
                out.push(i);
            }
            out
        }
        Resampler::Multinomial => {
            let mut cum = Vec::with_capacity(weights.len());
            let mut acc = 0.0;
            for w in weights {
                acc += w;
                cum.push(acc);
            }
            let mut out: Vec<usize> = (0..count)
                .map(|_| {
                    let u = rng.random::<f64>() * acc;
                    cum.partition_point(|&c| c <= u).min(weights.len() - 1)
                })
                .collect();
            out.sort_unstable();
            out
        }
    }
}

/// Rebuilds a population from sorted ancestor indices, moving each parent into
/// its last offspring slot so only duplicates are cloned.
pub(crate) fn reproduce<T: Clone>(population: Vec<T>, ancestors: &[usize]) -> Vec<T> {
    let mut remaining = vec![0usize; population.len()];
    for &a in ancestors {
        remaining[a] += 1;
    }
    let mut slots: Vec<Option<T>> = population.into_iter().map(Some).collect();
    ancestors
        .iter()
        .map(|&a| {
            remaining[a] -= 1;
            if remaining[a] == 0 {
                slots[a].take().expect("parent moved before its last offspring")
            } else {
                slots[a].as_ref().expect("parent present").clone()
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn weight_examples() {
        assert_eq!(compute_weights(&[0.3; 4]), vec![0.25; 4]);
        let w = compute_weights(&[3f64.ln(), 0.0]);
        assert!((w[0] - 0.75).abs() < 1e-15 && (w[1] - 0.25).abs() < 1e-15);
        let shifted = compute_weights(&[3f64.ln() + 900.0, 900.0]);
        assert!(w.iter().zip(&shifted).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn ess_examples() {
        assert!((effective_sample_size(&[0.25; 4]) - 4.0).abs() < 1e-12);
        assert_eq!(effective_sample_size(&[1.0, 0.0, 0.0]), 1.0);
        assert!((effective_sample_size(&[0.5, 0.5, 0.0, 0.0]) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn systematic_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(resample(&[0.2; 5], 5, &mut rng, Resampler::Systematic), vec![0, 1, 2, 3, 4]);
        assert_eq!(resample(&[1.0, 0.0, 0.0], 3, &mut rng, Resampler::Systematic), vec![0, 0, 0]);
        assert_eq!(resample(&[0.0, 0.0, 1.0], 3, &mut rng, Resampler::Systematic), vec![2, 2, 2]);
    }

    #[test]
    fn reproduce_moves_and_clones() {
        let pop = vec!["a".to_string(), "b".to_string(), "c".to_string()];
        assert_eq!(reproduce(pop, &[0, 0, 2]), vec!["a", "a", "c"]);
    }

    proptest! {
        #[test]
        fn systematic_offspring_counts_are_floor_or_ceil(
            raw in proptest::collection::vec(0.0f64..1.0, 2..40),
            seed in any::<u64>(),
            count in 2usize..60,
        ) {
            let s: f64 = raw.iter().sum();
            prop_assume!(s > 1e-6);
            let w: Vec<f64> = raw.iter().map(|r| r / s).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let anc = resample(&w, count, &mut rng, Resampler::Systematic);
            prop_assert_eq!(anc.len(), count);
            let mut counts = vec![0usize; w.len()];
            for a in anc { counts[a] += 1; }
            for (c, wj) in counts.iter().zip(&w) {
                let e = wj * count as f64;
                prop_assert!((*c as f64) >= e.floor() - 1e-9 && (*c as f64) <= e.ceil() + 1e-9, "{} vs {}", c, e);
            }
        }

        #[test]
        fn normalized_weights_sum_to_one(lw in proptest::collection::vec(-800.0f64..800.0, 1..50)) {
            let w = compute_weights(&lw);
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let ess = effective_sample_size(&w);
            prop_assert!(ess >= 1.0 - 1e-12 && ess <= lw.len() as f64 + 1e-9);
        }
    }
}
