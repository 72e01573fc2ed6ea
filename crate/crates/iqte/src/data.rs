//! Base data model: group samples, loading vectors, quantile levels.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::error::{Error, Result};

/// Default compact quantile range accepted for primary analyses.
pub const DEFAULT_TAU_MIN: f64 = 0.05;
pub const DEFAULT_TAU_MAX: f64 = 0.95;

/// One treatment group's design matrix and response vector.
#[derive(Debug, Clone)]
pub struct GroupSample {
    x: Array2<f64>,
    y: Array1<f64>,
    group_id: u8,
}

impl GroupSample {
    /// Validates shapes, finiteness, and the group label (1 or 2).
    pub fn new(x: Array2<f64>, y: Array1<f64>, group_id: u8) -> Result<Self> {
        if x.nrows() != y.len() {
            return Err(Error::Dimension(format!(
                "design has {} rows but response has {} entries",
                x.nrows(),
                y.len()
            )));
        }
        if x.nrows() < 2 {
            return Err(Error::Data(format!(
                "need at least 2 observations, got {}",
                x.nrows()
            )));
        }
        if x.ncols() < 1 {
            return Err(Error::Data("design has no columns".into()));
        }
        if !(group_id == 1 || group_id == 2) {
            return Err(Error::Data(format!(
                "group_id must be 1 or 2, got {group_id}"
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("design contains non-finite entries".into()));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("response contains non-finite entries".into()));
        }
        Ok(Self { x, y, group_id })
    }

    /// Skips validation; only for internal construction from already-checked parts.
    #[cfg_attr(not(test), allow(dead_code))]
    pub(crate) fn new_unchecked(x: Array2<f64>, y: Array1<f64>, group_id: u8) -> Self {
        Self { x, y, group_id }
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    pub fn x(&self) -> ArrayView2<'_, f64> {
        self.x.view()
    }

    pub fn y(&self) -> ArrayView1<'_, f64> {
        self.y.view()
    }

    pub fn group_id(&self) -> u8 {
        self.group_id
    }

    /// Row-subset copy, preserving the group label. Indices must be in range.
    pub fn subset(&self, rows: &[usize]) -> GroupSample {
        let x = self.x.select(Axis(0), rows);
        let y = self.y.select(Axis(0), rows);
        GroupSample {
            x,
            y,
            group_id: self.group_id,
        }
    }
}

/// The individual covariate vector the treatment effect is evaluated at.
#[derive(Debug, Clone)]
pub struct Loading {
    x_new: Array1<f64>,
}

impl Loading {
    /// Requires finite entries and a strictly positive Euclidean norm.
    pub fn new(x_new: Array1<f64>) -> Result<Self> {
        if x_new.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("loading contains non-finite entries".into()));
        }
        let norm = x_new.dot(&x_new).sqrt();
        if !(norm > 0.0) {
            return Err(Error::Data("loading vector has zero norm".into()));
        }
        Ok(Self { x_new })
    }

    pub fn p(&self) -> usize {
        self.x_new.len()
    }

    pub fn vector(&self) -> ArrayView1<'_, f64> {
        self.x_new.view()
    }

    pub fn norm2(&self) -> f64 {
        self.x_new.dot(&self.x_new).sqrt()
    }
}

/// A quantile level constrained to a compact working range.
///
/// Primary analyses run inside `[DEFAULT_TAU_MIN, DEFAULT_TAU_MAX]`; the
/// auxiliary fits at `tau +- h` used by the sparsity estimator may land
/// slightly outside and are built with [`QuantileLevel::auxiliary`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantileLevel {
    tau: f64,
}

impl QuantileLevel {
    /// A level within the default compact range.
    pub fn new(tau: f64) -> Result<Self> {
        Self::with_bounds(tau, DEFAULT_TAU_MIN, DEFAULT_TAU_MAX)
    }

    /// A level within a caller-chosen compact range `[tau_min, tau_max] ⊂ (0,1)`.
    pub fn with_bounds(tau: f64, tau_min: f64, tau_max: f64) -> Result<Self> {
        if !(tau_min > 0.0 && tau_max < 1.0 && tau_min <= tau_max) {
            return Err(Error::Config(format!(
                "invalid quantile bounds [{tau_min}, {tau_max}]"
            )));
        }
        if !tau.is_finite() || tau < tau_min || tau > tau_max {
            return Err(Error::Config(format!(
                "quantile level {tau} outside [{tau_min}, {tau_max}]"
            )));
        }
        Ok(Self { tau })
    }

    /// A level anywhere in (0,1), for auxiliary fits such as `tau +- h`.
    pub fn auxiliary(tau: f64) -> Result<Self> {
        if !tau.is_finite() || tau <= 0.0 || tau >= 1.0 {
            return Err(Error::Config(format!(
                "auxiliary quantile level {tau} outside (0, 1)"
            )));
        }
        Ok(Self { tau })
    }

    pub fn value(self) -> f64 {
        self.tau
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, arr2};

    #[test]
    fn group_sample_validates_shapes_and_labels() {
        let x = arr2(&[[1.0, 2.0], [3.0, 4.0]]);
        let y = arr1(&[1.0, 2.0]);
        let s = GroupSample::new(x.clone(), y.clone(), 1).unwrap();
        assert_eq!(s.n(), 2);
        assert_eq!(s.p(), 2);
        assert_eq!(s.group_id(), 1);

        assert!(matches!(
            GroupSample::new(x.clone(), arr1(&[1.0]), 1),
            Err(Error::Dimension(_))
        ));
        assert!(matches!(
            GroupSample::new(x.clone(), y.clone(), 3),
            Err(Error::Data(_))
        ));
        let x1 = arr2(&[[1.0, 2.0]]);
        assert!(matches!(
            GroupSample::new(x1, arr1(&[1.0]), 1),
            Err(Error::Data(_))
        ));
        let xn = arr2(&[[1.0, f64::NAN], [0.0, 1.0]]);
        assert!(matches!(
            GroupSample::new(xn, y.clone(), 1),
            Err(Error::Data(_))
        ));
        let yn = arr1(&[f64::INFINITY, 0.0]);
        assert!(matches!(GroupSample::new(x, yn, 1), Err(Error::Data(_))));
    }

    #[test]
    fn subset_selects_rows() {
        let x = arr2(&[[1.0, 0.0], [2.0, 0.0], [3.0, 0.0]]);
        let y = arr1(&[1.0, 2.0, 3.0]);
        let s = GroupSample::new(x, y, 2).unwrap();
        let t = s.subset(&[2, 0]);
        assert_eq!(t.n(), 2);
        assert_eq!(t.y()[0], 3.0);
        assert_eq!(t.x()[[1, 0]], 1.0);
        assert_eq!(t.group_id(), 2);
    }

    #[test]
    fn loading_rejects_zero_and_non_finite() {
        assert!(Loading::new(arr1(&[0.0, 0.0])).is_err());
        assert!(Loading::new(arr1(&[f64::NAN])).is_err());
        let l = Loading::new(arr1(&[3.0, 4.0])).unwrap();
        assert!((l.norm2() - 5.0).abs() < 1e-15);
    }

    #[test]
    fn quantile_level_bounds() {
        assert!(QuantileLevel::new(0.5).is_ok());
        assert!(QuantileLevel::new(0.05).is_ok());
        assert!(QuantileLevel::new(0.95).is_ok());
        assert!(QuantileLevel::new(0.96).is_err());
        assert!(QuantileLevel::new(0.04).is_err());
        assert!(QuantileLevel::with_bounds(0.97, 0.01, 0.99).is_ok());
        assert!(QuantileLevel::auxiliary(0.975).is_ok());
        assert!(QuantileLevel::auxiliary(1.0).is_err());
        assert!(QuantileLevel::auxiliary(0.0).is_err());
    }
}
