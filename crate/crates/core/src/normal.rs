//! Standard-normal kernels shared by every likelihood in the crate.
//!
//! The CDF goes through `libm::erfc` (the FreeBSD rational
//! approximation). Tails are evaluated on the side where the result is small
//! so that differences of CDFs stay accurate far from the origin.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use libm::erfc;

/// `ln(1 / sqrt(2π))`.
pub const LN_INV_SQRT_2PI: f64 = -0.918_938_533_204_672_8;

/// Standard normal CDF.
#[inline]
pub fn cdf(x: f64) -> f64 {
    if x.is_nan() {
        return f64::NAN;
    }
    0.5 * erfc(-x * FRAC_1_SQRT_2)
}

/// Standard normal survival function `1 - Φ(x)`, accurate in the upper tail.
#[inline]
pub fn sf(x: f64) -> f64 {
    cdf(-x)
}

/// `Φ(b) - Φ(a)` for `a <= b`, computed on the tail where both terms are small.
#[inline]
pub fn interval_mass(a: f64, b: f64) -> f64 {
    debug_assert!(a <= b || a.is_nan() || b.is_nan());
    if a >= 0.0 {
        (sf(a) - sf(b)).max(0.0)
    } else {
        (cdf(b) - cdf(a)).max(0.0)
    }
}

#[inline]
pub fn pdf(x: f64, mean: f64, sd: f64) -> f64 {
    let z = (x - mean) / sd;
    (-0.5 * z * z).exp() / (sd * (2.0 * PI).sqrt())
}

#[inline]
pub fn ln_pdf(x: f64, mean: f64, sd: f64) -> f64 {
    let z = (x - mean) / sd;
    LN_INV_SQRT_2PI - sd.ln() - 0.5 * z * z
}

/// Numerically stable `ln Σ exp(v)`; returns `-inf` for empty or all `-inf` input.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    let sum: f64 = values.iter().map(|v| (v - max).exp()).sum();
    max + sum.ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    // Reference values from a 50-digit evaluation of Φ.
    const TABLE: &[(f64, f64)] = &[
        (-38.0, 2.885_428_360_068_784_3e-316),
        (-20.0, 2.753_624_118_606_233_7e-89),
        (-8.5, 9.479_534_822_203_318_4e-18),
        (-5.0, 2.866_515_718_791_939_1e-7),
        (-2.0, 0.022_750_131_948_179_207),
        (-1.0, 0.158_655_253_931_457_05),
        (-0.5, 0.308_537_538_725_986_9),
        (0.0, 0.5),
        (0.3, 0.617_911_422_188_952_6),
        (0.75, 0.773_372_647_623_131_8),
        (1.0, 0.841_344_746_068_542_9),
        (2.5, 0.993_790_334_674_223_9),
        (5.0, 0.999_999_713_348_428_1),
        (8.5, 0.999_999_999_999_999_9),
    ];

    #[test]
    fn cdf_matches_high_precision_reference() {
        for &(x, expected) in TABLE {
            let got = cdf(x);
            assert!((got - expected).abs() <= 1e-15, "Φ({x}) = {got}, want {expected}");
            if x < -1.0 {
                assert!(((got - expected) / expected).abs() < 1e-13, "relative error at {x}");
            }
        }
    }

    #[test]
    fn interval_mass_is_accurate_in_upper_tail() {
        // Φ(9) - Φ(8.5) is ~1e-17, far below the cancellation floor of 1 - Φ.
        let m = interval_mass(8.5, 9.0);
        let want = 9.479_534_822_203_318_4e-18 - sf(9.0);
        assert!((m - want).abs() / want < 1e-12);
    }

    #[test]
    fn log_sum_exp_handles_infinities() {
        assert_eq!(log_sum_exp(&[]), f64::NEG_INFINITY);
        assert_eq!(log_sum_exp(&[f64::NEG_INFINITY, f64::NEG_INFINITY]), f64::NEG_INFINITY);
        let v = log_sum_exp(&[1000.0, 1000.0]);
        assert!((v - (1000.0 + 2f64.ln())).abs() < 1e-12);
    }
}
