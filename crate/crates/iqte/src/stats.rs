//! Kolmogorov-Smirnov helpers and small empirical utilities.

use crate::normal;

/// Empirical tau-quantile of an ascending-sorted slice, the left-continuous
/// inverse of the empirical CDF.
pub fn empirical_quantile(sorted: &[f64], tau: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of an empty sample");
    assert!(tau > 0.0 && tau < 1.0, "tau must be inside (0, 1)");
    let n = sorted.len() as f64;
    let idx = (tau * n).ceil() as usize;
    sorted[idx.saturating_sub(1).min(sorted.len() - 1)]
}

/// One-sample Kolmogorov-Smirnov statistic against a reference CDF.
pub fn ks_statistic(xs: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    assert!(!xs.is_empty(), "KS statistic of an empty sample");
    let mut sorted = xs.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("non-finite sample value"));
    let n = sorted.len() as f64;
    let mut d = 0.0f64;
    for (i, &x) in sorted.iter().enumerate() {
        let f = cdf(x);
        let upper = (i as f64 + 1.0) / n - f;
        let lower = f - i as f64 / n;
        d = d.max(upper).max(lower);
    }
    d
}

/// Survival function of the Kolmogorov distribution,
/// `Q(t) = 2 sum_{k>=1} (-1)^(k-1) exp(-2 k^2 t^2)`, clamped to [0, 1].
pub fn kolmogorov_sf(t: f64) -> f64 {
    if t <= 0.0 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=100 {
        let term = (-2.0 * (k as f64) * (k as f64) * t * t).exp();
        if term < 1e-300 {
            break;
        }
        sum += if k % 2 == 1 { term } else { -term };
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// Asymptotic KS p-value with the finite-sample scaling
/// `(sqrt(n) + 0.12 + 0.11 / sqrt(n)) * D`.
pub fn ks_pvalue(d: f64, n: usize) -> f64 {
    assert!(n > 0);
    let s = (n as f64).sqrt();
    kolmogorov_sf((s + 0.12 + 0.11 / s) * d)
}

/// Statistic and p-value of the sample against the standard normal law.
pub fn ks_test_standard_normal(xs: &[f64]) -> (f64, f64) {
    let d = ks_statistic(xs, normal::cdf);
    (d, ks_pvalue(d, xs.len()))
}
