//! Quantile density ("sparsity") estimation.
//!
//! The debiasing weights need eta_i ~ 1/f_i(q_i(tau)), the derivative of the
//! conditional quantile function at level tau. It is estimated by the
//! difference quotient of two penalized fits at tau +/- h:
//! `eta_i = x_i'(beta_{tau+h} - beta_{tau-h}) / (2h)`, clipped to a fixed
//! positive range so downstream weighting never sees zero, negative, or
//! unbounded values.

use serde::{Deserialize, Serialize};

use crate::data::{GroupSample, QuantileLevel};
use crate::error::{Error, Result};
use crate::qr_lasso::PenalizedQrFit;

/// Clip range for the estimated quantile density quotients.
pub const ETA_MIN: f64 = 1e-4;
pub const ETA_MAX: f64 = 1e4;

/// How the difference-quotient bandwidth is chosen.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub enum BandwidthRule {
    /// `min(n^(-1/6), tau (1 - tau) / 2)`.
    Default,
    /// A caller-supplied value; must keep both tau +/- h inside (0, 1).
    Fixed(f64),
}

impl Default for BandwidthRule {
    fn default() -> Self {
        BandwidthRule::Default
    }
}

impl BandwidthRule {
    pub fn resolve(&self, n: usize, tau: QuantileLevel) -> Result<f64> {
        let h = match self {
            BandwidthRule::Default => default_bandwidth(n, tau),
            BandwidthRule::Fixed(h) => *h,
        };
        if !(h.is_finite() && h > 0.0) {
            return Err(Error::Config(format!("bandwidth must be > 0, got {h}")));
        }
        let t = tau.value();
        if t - h <= 0.0 || t + h >= 1.0 {
            return Err(Error::Config(format!(
                "bandwidth {h} pushes auxiliary levels outside (0, 1) at tau = {t}"
            )));
        }
        Ok(h)
    }
}

/// Practical bandwidth: the rate-driven `n^(-1/6)` capped so both auxiliary
/// levels stay well inside the unit interval.
pub fn default_bandwidth(n: usize, tau: QuantileLevel) -> f64 {
    let t = tau.value();
    (n as f64).powf(-1.0 / 6.0).min(t * (1.0 - t) / 2.0)
}

/// Per-observation quantile density estimates for one group.
#[derive(Debug, Clone)]
pub struct SparsityEstimates {
    /// Level the estimates target.
    pub tau: QuantileLevel,
    /// Difference-quotient bandwidth actually used.
    pub bandwidth: f64,
    /// Clipped quotients, one per observation.
    pub eta: Vec<f64>,
    /// How many quotients hit the clip range.
    pub clipped_count: usize,
}

impl SparsityEstimates {
    pub fn eta(&self) -> &[f64] {
        &self.eta
    }

    /// Fraction of observations whose quotient was clipped.
    pub fn clipped_fraction(&self) -> f64 {
        self.clipped_count as f64 / self.eta.len().max(1) as f64
    }
}

/// Forms the clipped difference quotients from fits at `tau + h` and
/// `tau - h` with the default clip range. The fits' levels must match `tau`
/// and `bandwidth` exactly.
pub fn estimate_sparsity(
    sample: &GroupSample,
    tau: QuantileLevel,
    bandwidth: f64,
    fit_hi: &PenalizedQrFit,
    fit_lo: &PenalizedQrFit,
) -> Result<SparsityEstimates> {
    estimate_sparsity_clipped(sample, tau, bandwidth, fit_hi, fit_lo, ETA_MIN, ETA_MAX)
}

/// `estimate_sparsity` with a caller-chosen clip range.
pub fn estimate_sparsity_clipped(
    sample: &GroupSample,
    tau: QuantileLevel,
    bandwidth: f64,
    fit_hi: &PenalizedQrFit,
    fit_lo: &PenalizedQrFit,
    eta_floor: f64,
    eta_cap: f64,
) -> Result<SparsityEstimates> {
    if !(eta_floor > 0.0 && eta_cap > eta_floor && eta_cap.is_finite()) {
        return Err(Error::Config(format!(
            "need 0 < eta_floor < eta_cap < inf, got [{eta_floor}, {eta_cap}]"
        )));
    }
    if fit_hi.beta.len() != sample.p() || fit_lo.beta.len() != sample.p() {
        return Err(Error::Dimension(format!(
            "auxiliary fits have {} / {} coefficients for p = {}",
            fit_hi.beta.len(),
            fit_lo.beta.len(),
            sample.p()
        )));
    }
    let t = tau.value();
    if (fit_hi.tau.value() - (t + bandwidth)).abs() > 1e-10
        || (fit_lo.tau.value() - (t - bandwidth)).abs() > 1e-10
    {
        return Err(Error::Config(format!(
            "auxiliary fit levels ({}, {}) do not bracket tau = {t} at bandwidth {bandwidth}",
            fit_lo.tau.value(),
            fit_hi.tau.value()
        )));
    }
    let pred_hi = sample.x().dot(&fit_hi.beta);
    let pred_lo = sample.x().dot(&fit_lo.beta);
    let mut clipped = 0usize;
    let eta: Vec<f64> = pred_hi
        .iter()
        .zip(pred_lo.iter())
        .map(|(hi, lo)| {
            let q = (hi - lo) / (2.0 * bandwidth);
            if (eta_floor..=eta_cap).contains(&q) {
                q
            } else {
                clipped += 1;
                q.clamp(eta_floor, eta_cap)
            }
        })
        .collect();
    Ok(SparsityEstimates {
        tau,
        bandwidth,
        eta,
        clipped_count: clipped,
    })
}
