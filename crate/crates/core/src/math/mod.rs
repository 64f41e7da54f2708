//! Shared numerical utilities: percentiles, stable log-sum-exp, and standard
//! normal helpers used across reporting and inference.

mod bessel;
pub mod optim;

pub use bessel::bessel_k;

use statrs::distribution::{ContinuousCDF, Normal};

/// Two-sided 95% credible-interval z-value pinned by the reporting convention.
pub const Z_95: f64 = 1.959964;
/// Two-sided 90% credible-interval z-value pinned by the reporting convention.
pub const Z_90: f64 = 1.644854;

/// Linear-interpolation percentile (the "type 7" convention): with the sample
/// sorted ascending, the `p` quantile sits at rank `h = (n - 1) p + 1` and is
/// interpolated linearly between the neighbouring order statistics.
///
/// `p` must lie in `[0, 1]` and `values` must be non-empty with finite
/// entries; panics otherwise (callers validate data upstream).
pub fn percentile_type7(values: &[f64], p: f64) -> f64 {
    assert!(!values.is_empty(), "percentile of an empty sample");
    assert!((0.0..=1.0).contains(&p), "percentile level {p} outside [0, 1]");
    assert!(
        values.iter().all(|v| v.is_finite()),
        "percentile of a sample with non-finite entries"
    );
    let mut sorted = values.to_vec();
    sorted.sort_unstable_by(f64::total_cmp);
    let n = sorted.len();
    let h = (n as f64 - 1.0) * p;
    let lo = h.floor() as usize;
    let frac = h - lo as f64;
    if lo + 1 >= n {
        sorted[n - 1]
    } else {
        sorted[lo] + frac * (sorted[lo + 1] - sorted[lo])
    }
}

/// Quartile cut points (25th, 50th, 75th percentiles) under the same
/// convention as [`percentile_type7`].
pub fn quartile_cuts(values: &[f64]) -> [f64; 3] {
    [
        percentile_type7(values, 0.25),
        percentile_type7(values, 0.50),
        percentile_type7(values, 0.75),
    ]
}

/// Numerically stable `ln(sum(exp(x_i)))`.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    let s: f64 = xs.iter().map(|&x| (x - m).exp()).sum();
    m + s.ln()
}

/// Standard normal CDF.
pub fn normal_cdf(z: f64) -> f64 {
    Normal::standard().cdf(z)
}

/// Standard normal quantile function.
pub fn normal_quantile(p: f64) -> f64 {
    Normal::standard().inverse_cdf(p)
}

/// The z-value used for a two-sided credible interval at `level`: the pinned
/// constants for the conventional 95% and 90% levels, the exact normal
/// quantile otherwise.
pub fn interval_z(level: f64) -> f64 {
    if (level - 0.95).abs() < 1e-12 {
        Z_95
    } else if (level - 0.90).abs() < 1e-12 {
        Z_90
    } else {
        normal_quantile(0.5 + level / 2.0)
    }
}
