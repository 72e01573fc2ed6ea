//! Shared helpers for the integration suite: reference solvers built on an
//! independent interior-point backend, plus instance generators.
//!
//! The reference solvers deliberately share no code with the library. The
//! penalized quantile regression is restated as a linear program and the
//! projection as a boxed quadratic program, both handed to `clarabel`.

#![allow(dead_code)]

use clarabel::algebra::CscMatrix;
use clarabel::solver::{
    DefaultSettings, DefaultSettingsBuilder, DefaultSolver, IPSolver, NonnegativeConeT,
    SolverStatus, ZeroConeT,
};
use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn reference_settings() -> DefaultSettings<f64> {
    DefaultSettingsBuilder::default()
        .verbose(false)
        .max_iter(500)
        .tol_gap_abs(1e-10)
        .tol_gap_rel(1e-10)
        .tol_feas(1e-10)
        .build()
        .unwrap()
}

/// Dense matrix to compressed sparse column, dropping exact zeros.
fn dense_to_csc(m: ArrayView2<'_, f64>) -> CscMatrix<f64> {
    let mut rows = Vec::new();
    let mut cols = Vec::new();
    let mut vals = Vec::new();
    for j in 0..m.ncols() {
        for i in 0..m.nrows() {
            let v = m[[i, j]];
            if v != 0.0 {
                rows.push(i);
                cols.push(j);
                vals.push(v);
            }
        }
    }
    CscMatrix::new_from_triplets(m.nrows(), m.ncols(), rows, cols, vals)
}

/// Mean check loss plus l1 penalty, restated independently of the library.
pub fn pinball_objective(
    x: ArrayView2<'_, f64>,
    y: ArrayView1<'_, f64>,
    tau: f64,
    lambda: f64,
    beta: ArrayView1<'_, f64>,
) -> f64 {
    let n = x.nrows();
    let mut loss = 0.0;
    for i in 0..n {
        let r = y[i] - x.row(i).dot(&beta);
        loss += if r >= 0.0 { tau * r } else { (1.0 - tau) * -r };
    }
    loss / n as f64 + lambda * beta.iter().map(|b| b.abs()).sum::<f64>()
}

/// Reference minimizer of the penalized quantile regression objective.
///
/// Splits the coefficients and residuals into nonnegative parts:
///
/// ```text
/// min (1/n) sum_i (tau u_i + (1 - tau) v_i) + lambda sum_j (b+_j + b-_j)
/// s.t. X (b+ - b-) + u - v = y,   all variables >= 0
/// ```
///
/// Returns the minimizer and the objective evaluated at it.
pub fn lp_penalized_qr(
    x: ArrayView2<'_, f64>,
    y: ArrayView1<'_, f64>,
    tau: f64,
    lambda: f64,
) -> (Array1<f64>, f64) {
    let n = x.nrows();
    let p = x.ncols();
    let nv = 2 * p + 2 * n;

    let pmat = CscMatrix::<f64>::zeros((nv, nv));
    let mut q = vec![lambda; 2 * p];
    q.extend(std::iter::repeat(tau / n as f64).take(n));
    q.extend(std::iter::repeat((1.0 - tau) / n as f64).take(n));

    // Equality block [X, -X, I, -I] z = y, then -I z <= 0 for nonnegativity.
    let mut rows = Vec::new();
    let mut cols = Vec::new();
    let mut vals = Vec::new();
    for i in 0..n {
        for j in 0..p {
            let v = x[[i, j]];
            if v != 0.0 {
                rows.push(i);
                cols.push(j);
                vals.push(v);
                rows.push(i);
                cols.push(p + j);
                vals.push(-v);
            }
        }
        rows.push(i);
        cols.push(2 * p + i);
        vals.push(1.0);
        rows.push(i);
        cols.push(2 * p + n + i);
        vals.push(-1.0);
    }
    for k in 0..nv {
        rows.push(n + k);
        cols.push(k);
        vals.push(-1.0);
    }
    let a = CscMatrix::new_from_triplets(n + nv, nv, rows, cols, vals);
    let mut b = y.to_vec();
    b.extend(std::iter::repeat(0.0).take(nv));
    let cones = [ZeroConeT(n), NonnegativeConeT(nv)];

    let mut solver = DefaultSolver::new(&pmat, &q, &a, &b, &cones, reference_settings());
    solver.solve();
    let status = solver.solution.status;
    assert!(
        matches!(status, SolverStatus::Solved | SolverStatus::AlmostSolved),
        "reference LP ended with status {status:?}"
    );
    let z = &solver.solution.x;
    let beta = Array1::from_shape_fn(p, |j| z[j] - z[p + j]);
    let obj = pinball_objective(x, y, tau, lambda, beta.view());
    (beta, obj)
}

/// Reference minimizer of the constrained projection program.
///
/// In the direction variable `m` (original coordinates, `s = ||x_new||_2`):
///
/// ```text
/// min m' SigmaTau m
/// s.t. |(Sigma m - x_new)_j| <= lambda s           for each coordinate j
///      |x_new' Sigma m - s^2| <= lambda s^2         when include_scalar
///      |x_i' m|              <= gamma s             for each data row i
/// ```
///
/// Returns `None` when the interior-point solver certifies primal
/// infeasibility; panics on any other non-success status.
pub fn qp_projection(
    sigma_hat: ArrayView2<'_, f64>,
    sigma_tau: ArrayView2<'_, f64>,
    data_rows: ArrayView2<'_, f64>,
    x_new: ArrayView1<'_, f64>,
    lambda: f64,
    gamma: f64,
    include_scalar: bool,
) -> Option<(Array1<f64>, f64)> {
    let p = x_new.len();
    let n_rows = data_rows.nrows();
    let s = x_new.dot(&x_new).sqrt();

    let pmat = dense_to_csc(sigma_tau.mapv(|v| 2.0 * v).view());
    let q = vec![0.0; p];

    let n_two_sided = p + usize::from(include_scalar) + n_rows;
    let mut lhs = Array2::<f64>::zeros((n_two_sided, p));
    let mut center = Array1::<f64>::zeros(n_two_sided);
    let mut radius = Array1::<f64>::zeros(n_two_sided);
    for j in 0..p {
        lhs.row_mut(j).assign(&sigma_hat.row(j));
        center[j] = x_new[j];
        radius[j] = lambda * s;
    }
    let mut offset = p;
    if include_scalar {
        let xs = sigma_hat.dot(&x_new);
        lhs.row_mut(offset).assign(&xs);
        center[offset] = s * s;
        radius[offset] = lambda * s * s;
        offset += 1;
    }
    for i in 0..n_rows {
        lhs.row_mut(offset + i).assign(&data_rows.row(i));
        radius[offset + i] = gamma * s;
    }

    // Each |a'm - c| <= r becomes a'm <= c + r and -a'm <= r - c.
    let mut stacked = Array2::<f64>::zeros((2 * n_two_sided, p));
    let mut b = vec![0.0; 2 * n_two_sided];
    for k in 0..n_two_sided {
        stacked.row_mut(k).assign(&lhs.row(k));
        b[k] = center[k] + radius[k];
        let neg = lhs.row(k).mapv(|v| -v);
        stacked.row_mut(n_two_sided + k).assign(&neg);
        b[n_two_sided + k] = radius[k] - center[k];
    }
    let a = dense_to_csc(stacked.view());
    let cones = [NonnegativeConeT(2 * n_two_sided)];

    let mut solver = DefaultSolver::new(&pmat, &q, &a, &b, &cones, reference_settings());
    solver.solve();
    let status = solver.solution.status;
    match status {
        SolverStatus::Solved | SolverStatus::AlmostSolved => {
            let m = Array1::from(solver.solution.x.clone());
            let obj = m.dot(&sigma_tau.dot(&m));
            Some((m, obj))
        }
        SolverStatus::PrimalInfeasible | SolverStatus::AlmostPrimalInfeasible => None,
        other => panic!("reference QP ended with status {other:?}"),
    }
}

/// Random sparse-coefficient regression instance with standard normal design.
pub fn random_regression(
    seed: u64,
    n: usize,
    p: usize,
    nonzeros: usize,
) -> (Array2<f64>, Array1<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Array2::<f64>::from_shape_fn((n, p), |_| rng.sample(StandardNormal));
    let mut beta = Array1::<f64>::zeros(p);
    for j in 0..nonzeros.min(p) {
        beta[j] = if j % 2 == 0 { 1.0 } else { -0.7 };
    }
    let y = Array1::from_shape_fn(n, |i| {
        x.row(i).dot(&beta) + rng.sample::<f64, _>(StandardNormal) * 0.5
    });
    (x, y)
}

/// Random projection instance: a design, its covariance pair, and a loading.
pub struct ProjectionInstance {
    pub rows: Array2<f64>,
    pub sigma_hat: Array2<f64>,
    pub sigma_tau: Array2<f64>,
    pub x_new: Array1<f64>,
}

pub fn random_projection_instance(seed: u64, n: usize, p: usize) -> ProjectionInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows = Array2::<f64>::from_shape_fn((n, p), |_| rng.sample(StandardNormal));
    let eta: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..2.0)).collect();
    let nf = n as f64;
    let mut sigma_hat = Array2::<f64>::zeros((p, p));
    let mut sigma_tau = Array2::<f64>::zeros((p, p));
    for i in 0..n {
        let r = rows.row(i);
        for a in 0..p {
            for b in 0..=a {
                sigma_hat[[a, b]] += r[a] * r[b] / nf;
                sigma_tau[[a, b]] += eta[i] * eta[i] * r[a] * r[b] / nf;
            }
        }
    }
    for a in 0..p {
        for b in 0..a {
            sigma_hat[[b, a]] = sigma_hat[[a, b]];
            sigma_tau[[b, a]] = sigma_tau[[a, b]];
        }
    }
    let x_new = Array1::from_shape_fn(p, |_| rng.sample(StandardNormal));
    ProjectionInstance {
        rows,
        sigma_hat,
        sigma_tau,
        x_new,
    }
}
