//! Check loss and quantile score.

use crate::data::QuantileLevel;

/// Quantile score `phi_tau(x) = tau - 1{x <= 0}`.
///
/// The indicator is inclusive at zero: `score(0.0, tau) = tau - 1`.
#[inline]
pub fn score(x: f64, tau: QuantileLevel) -> f64 {
    let t = tau.value();
    if x <= 0.0 {
        t - 1.0
    } else {
        t
    }
}

/// Check loss `Psi_tau(x) = x * phi_tau(x)`; nonnegative and convex in `x`.
#[inline]
pub fn check_loss(x: f64, tau: QuantileLevel) -> f64 {
    x * score(x, tau)
}
