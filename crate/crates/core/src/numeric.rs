//! Small numeric helpers shared across the crate: reproducible reductions,
//! seeded RNG derivation, and standard distribution quantiles.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, Continuous, ContinuousCDF, Normal};

/// Pairwise (tree) summation in a fixed order.
///
/// Used for every statistical reduction so that results are bitwise
/// reproducible regardless of how work was scheduled, with better error
/// growth than naive left-to-right summation.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    const LEAF: usize = 32;
    if values.len() <= LEAF {
        let mut acc = 0.0;
        for v in values {
            acc += v;
        }
        return acc;
    }
    let mid = values.len() / 2;
    pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
}

/// Pairwise mean; 0 on empty input.
pub fn pairwise_mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    pairwise_sum(values) / values.len() as f64
}

/// Pairwise sum over a strided view of a flattened (n x d) matrix:
/// sums column `col` out of `d`.
pub fn pairwise_sum_col(flat: &[f64], d: usize, col: usize) -> f64 {
    debug_assert!(col < d);
    sum_strided(flat, d, col, flat.len() / d)
}

fn sum_strided(flat: &[f64], d: usize, col: usize, n: usize) -> f64 {
    const LEAF: usize = 32;
    if n <= LEAF {
        let mut acc = 0.0;
        for i in 0..n {
            acc += flat[i * d + col];
        }
        return acc;
    }
    let mid = n / 2;
    sum_strided(flat, d, col, mid) + sum_strided(&flat[mid * d..], d, col, n - mid)
}

/// `(1 - alpha)`-quantile of the standard normal distribution.
pub fn normal_quantile(one_minus_alpha_tail: f64) -> f64 {
    let n = Normal::new(0.0, 1.0).expect("standard normal");
    n.inverse_cdf(one_minus_alpha_tail)
}

/// `(1 - alpha)`-quantile of the chi-squared distribution with `d` degrees
/// of freedom. The library inverse is only ~1e-5 accurate, so it is refined
/// by Newton steps on the exact CDF.
pub fn chi2_quantile(one_minus_alpha: f64, d: usize) -> f64 {
    let c = ChiSquared::new(d as f64).expect("chi-squared dof");
    let mut x = c.inverse_cdf(one_minus_alpha);
    for _ in 0..60 {
        let dens = c.pdf(x);
        if !(dens > 0.0) {
            break;
        }
        let step = (c.cdf(x) - one_minus_alpha) / dens;
        x -= step;
        if step.abs() < 1e-13 * x.abs().max(1.0) {
            break;
        }
    }
    x
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    let n = Normal::new(0.0, 1.0).expect("standard normal");
    n.cdf(x)
}

/// Derives an independent stream seed from a master seed and a counter.
///
/// SplitMix64 finalizer; replicate/fold seeds must not collide or correlate
/// when units run in parallel and in arbitrary order.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    let mut z = master ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seeded RNG with a platform-independent stream.
pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Empirical quantile: smallest order statistic `y` with `F_hat(y) >= q`.
///
/// Matches the inf-type inverse CDF used throughout. Input need not be
/// sorted; returns None on empty input.
pub fn empirical_quantile(values: &[f64], q: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
    let n = sorted.len();
    let rank = (q * n as f64).ceil() as usize;
    let idx = rank.max(1).min(n) - 1;
    Some(sorted[idx])
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn pairwise_matches_naive_on_small_inputs() {
        let v: Vec<f64> = (0..1000).map(|i| (i as f64).sin()).collect();
        let naive: f64 = v.iter().sum();
        assert_relative_eq!(pairwise_sum(&v), naive, epsilon = 1e-9);
    }

    #[test]
    fn strided_column_sum() {
        // 3 rows x 2 cols: [[1,10],[2,20],[3,30]]
        let flat = [1.0, 10.0, 2.0, 20.0, 3.0, 30.0];
        assert_eq!(pairwise_sum_col(&flat, 2, 0), 6.0);
        assert_eq!(pairwise_sum_col(&flat, 2, 1), 60.0);
    }

    #[test]
    fn standard_quantiles() {
        assert_relative_eq!(normal_quantile(0.95), 1.6448536269514722, epsilon = 1e-8);
        assert_relative_eq!(normal_quantile(0.975), 1.959963984540054, epsilon = 1e-8);
        assert_relative_eq!(chi2_quantile(0.95, 2), 5.991464547107979, epsilon = 1e-6);
    }

    #[test]
    fn chi2_one_dof_is_squared_normal() {
        let z = normal_quantile(0.975);
        assert_relative_eq!(chi2_quantile(0.95, 1), z * z, epsilon = 1e-6);
    }

    #[test]
    fn derive_seed_changes_with_index() {
        let a = derive_seed(7, 0);
        let b = derive_seed(7, 1);
        assert_ne!(a, b);
        assert_eq!(a, derive_seed(7, 0));
    }

    #[test]
    fn empirical_quantile_inf_convention() {
        let v = [3.0, 1.0, 2.0, 4.0];
        assert_eq!(empirical_quantile(&v, 0.5), Some(2.0));
        assert_eq!(empirical_quantile(&v, 0.25), Some(1.0));
        assert_eq!(empirical_quantile(&v, 0.75), Some(3.0));
        assert_eq!(empirical_quantile(&v, 1.0), Some(4.0));
        assert_eq!(empirical_quantile(&[], 0.5), None);
    }
}
