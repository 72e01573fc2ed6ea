//! Sample covariance and quantile-adjusted covariance.
//!
//! Both are uncentered second-moment matrices: the model assumes mean-zero
//! covariates, and any empirical centering happens once at ingestion, never
//! inside these operations.

use ndarray::{Array2, ArrayView2};

use crate::data::GroupSample;
use crate::error::{Error, Result};
use crate::sparsity::SparsityEstimates;

/// `(1/n) X'X`, symmetric PSD.
pub fn sample_covariance(sample: &GroupSample) -> Array2<f64> {
    gram_scaled(sample.x(), None)
}

/// `(1/n) sum_i eta_i^2 x_i x_i'`, symmetric PSD.
pub fn quantile_adjusted_covariance(
    sample: &GroupSample,
    eta: &SparsityEstimates,
) -> Result<Array2<f64>> {
    quantile_adjusted_covariance_raw(sample.x(), eta.eta())
}

/// Raw-view variant used internally for cross-validation folds.
pub(crate) fn sample_covariance_raw(x: ArrayView2<'_, f64>) -> Array2<f64> {
    gram_scaled(x, None)
}

/// Raw-slice variant used internally for cross-validation folds.
pub(crate) fn quantile_adjusted_covariance_raw(
    x: ArrayView2<'_, f64>,
    eta: &[f64],
) -> Result<Array2<f64>> {
    if eta.len() != x.nrows() {
        return Err(Error::Dimension(format!(
            "eta has {} entries but sample has {} rows",
            eta.len(),
            x.nrows()
        )));
    }
    if eta.iter().any(|&e| !(e > 0.0)) {
        return Err(Error::Data("eta entries must be positive".into()));
    }
    Ok(gram_scaled(x, Some(eta)))
}

/// `(1/n) B'B` where row i of B is `w_i * x_i` (w = 1 when absent), with the
/// result symmetrized exactly so downstream symmetry checks are bitwise.
fn gram_scaled(x: ArrayView2<'_, f64>, row_weights: Option<&[f64]>) -> Array2<f64> {
    let n = x.nrows();
    let mut g = match row_weights {
        None => x.t().dot(&x),
        Some(w) => {
            let mut b = x.to_owned();
            for (mut row, &wi) in b.rows_mut().into_iter().zip(w) {
                row.mapv_inplace(|v| v * wi);
            }
            b.t().dot(&b)
        }
    };
    let inv_n = 1.0 / n as f64;
    g.mapv_inplace(|v| v * inv_n);
    let p = g.nrows();
    for i in 0..p {
        for j in (i + 1)..p {
            let m = 0.5 * (g[[i, j]] + g[[j, i]]);
            g[[i, j]] = m;
            g[[j, i]] = m;
        }
    }
    g
}
