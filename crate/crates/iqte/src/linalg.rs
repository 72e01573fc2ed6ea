//! Minimal dense linear algebra used by the solvers: Cholesky factorization
//! and triangular solves. Sizes stay in the hundreds, so straightforward
//! loops are adequate.

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};

/// Lower Cholesky factor of a symmetric positive-definite matrix.
pub(crate) fn cholesky(a: &Array2<f64>) -> Result<Array2<f64>> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::Dimension("cholesky needs a square matrix".into()));
    }
    let mut l = Array2::<f64>::zeros((n, n));
    for j in 0..n {
        let mut d = a[[j, j]];
        for k in 0..j {
            d -= l[[j, k]] * l[[j, k]];
        }
        if !(d > 0.0) {
            return Err(Error::Solver(format!(
                "matrix not positive definite at pivot {j} (d = {d:e})"
            )));
        }
        let dj = d.sqrt();
        l[[j, j]] = dj;
        for i in (j + 1)..n {
            let mut s = a[[i, j]];
            // Row-major access: both slices are contiguous row prefixes.
            let (ri, rj) = (l.row(i), l.row(j));
            for k in 0..j {
                s -= ri[k] * rj[k];
            }
            l[[i, j]] = s / dj;
        }
    }
    Ok(l)
}

/// Solves `L L' x = b` given the lower factor.
pub(crate) fn cholesky_solve_in_place(l: &Array2<f64>, b: &mut Array1<f64>) {
    let n = l.nrows();
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[[i, k]] * b[k];
        }
        b[i] = s / l[[i, i]];
    }
    for i in (0..n).rev() {
        let mut s = b[i];
        for k in (i + 1)..n {
            s -= l[[k, i]] * b[k];
        }
        b[i] = s / l[[i, i]];
    }
}

#[cfg_attr(not(test), allow(dead_code))]
pub(crate) fn cholesky_solve(l: &Array2<f64>, b: &Array1<f64>) -> Array1<f64> {
    debug_assert_eq!(b.len(), l.nrows());
    let mut x = b.clone();
    cholesky_solve_in_place(l, &mut x);
    x
}
