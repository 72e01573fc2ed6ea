//! l1-penalized quantile regression.
//!
//! Solves `min_b (1/n) sum_i Psi_tau(y_i - x_i'b) + lambda ||b||_1` with an
//! operator-splitting (ADMM) scheme on the auxiliary residual `r = y - Xb`:
//! the residual update is the closed-form proximal map of the check loss (a
//! two-sided shifted soft threshold), the coefficient update is an
//! l1-penalized least-squares step solved by coordinate descent, and the
//! scaled dual ascends on the coupling constraint. The nonsmooth objective is
//! handled exactly, with no smoothing bias.

use ndarray::{Array1, Array2, ArrayView1};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{GroupSample, QuantileLevel};
use crate::error::{Error, Result};
use crate::loss::{check_loss, score};

/// Knobs for the ADMM solver.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct QrSolverOptions {
    /// Outer iteration cap.
    pub max_iter: usize,
    /// Primal/dual residual tolerance; stopping threshold is `tol * sqrt(n + p)`.
    pub tol: f64,
    /// Initial ADMM penalty parameter.
    pub rho: f64,
    /// Record the per-iteration objective sequence on the fit.
    pub record_trace: bool,
}

impl Default for QrSolverOptions {
    fn default() -> Self {
        Self {
            max_iter: 20_000,
            tol: 1e-7,
            rho: 1.0,
            record_trace: false,
        }
    }
}

/// How the regularization level is chosen for a batch of fits.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum LambdaRule {
    /// Use this value directly.
    Fixed(f64),
    /// `default_lambda` with the given multiplier.
    ScaledDefault { multiplier: f64 },
    /// Pick the multiplier by k-fold cross-validation on held-out pinball loss.
    CrossValidated {
        multipliers: Vec<f64>,
        folds: usize,
        seed: u64,
    },
}

impl Default for LambdaRule {
    fn default() -> Self {
        LambdaRule::ScaledDefault { multiplier: 2.0 }
    }
}

/// A fitted penalized quantile regression at one level.
#[derive(Debug, Clone)]
pub struct PenalizedQrFit {
    pub tau: QuantileLevel,
    pub lambda: f64,
    pub beta: Array1<f64>,
    /// Objective recomputed from `beta` after truncation.
    pub objective: f64,
    pub n_iter: usize,
    pub converged: bool,
    /// Per-iteration objective values, present when requested via options.
    pub objective_trace: Option<Vec<f64>>,
}

/// Rate-based default `c * sqrt(tau (1 - tau)) * sqrt(log(p) / n)`.
///
/// `p` is real-valued so tests can pin closed-form values; callers pass the
/// column count cast to `f64`.
pub fn default_lambda(n: usize, p: f64, tau: QuantileLevel, c: f64) -> f64 {
    let t = tau.value();
    c * (t * (1.0 - t)).sqrt() * (p.ln() / n as f64).sqrt()
}

/// Penalized objective evaluated at an arbitrary coefficient vector.
pub fn qr_objective(
    sample: &GroupSample,
    tau: QuantileLevel,
    lambda: f64,
    beta: &Array1<f64>,
) -> f64 {
    let n = sample.n() as f64;
    let fitted = sample.x().dot(beta);
    let mut loss = 0.0;
    for (yi, fi) in sample.y().iter().zip(fitted.iter()) {
        loss += check_loss(yi - fi, tau);
    }
    loss / n + lambda * beta.iter().map(|b| b.abs()).sum::<f64>()
}

/// Worst coordinate violation of the subgradient optimality conditions at
/// `beta`. Observations whose residual sits within `kink_tol` of zero have a
/// set-valued score; their worst-case contribution is granted as slack rather
/// than guessed. An iterative solver leaves interpolated points at O(tol)
/// residuals, so callers should pass a band matched to the solver accuracy.
pub fn subgradient_gap(
    sample: &GroupSample,
    tau: QuantileLevel,
    lambda: f64,
    beta: &Array1<f64>,
    kink_tol: f64,
) -> f64 {
    let n = sample.n();
    let x = sample.x();
    let fitted = x.dot(beta);
    let res: Vec<f64> = sample
        .y()
        .iter()
        .zip(fitted.iter())
        .map(|(y, f)| y - f)
        .collect();
    let mut worst: f64 = 0.0;
    for j in 0..sample.p() {
        let mut g = 0.0;
        let mut slack = 0.0;
        for i in 0..n {
            let xij = x[[i, j]];
            if res[i].abs() <= kink_tol {
                slack += xij.abs();
            } else {
                g += xij * score(res[i], tau);
            }
        }
        g /= n as f64;
        slack /= n as f64;
        let viol = if beta[j] == 0.0 {
            (g.abs() - lambda - slack).max(0.0)
        } else {
            ((g - lambda * beta[j].signum()).abs() - slack).max(0.0)
        };
        worst = worst.max(viol);
    }
    worst
}

/// Fits at a single level with uniform penalty weights.
pub fn fit_penalized_qr(
    sample: &GroupSample,
    tau: QuantileLevel,
    lambda: f64,
    opts: &QrSolverOptions,
) -> Result<PenalizedQrFit> {
    fit_weighted(sample, tau, lambda, None, opts, None)
}

/// Fits with per-coordinate penalty weights (`weight 0` leaves a coordinate
/// unpenalized, e.g. an intercept column).
pub fn fit_penalized_qr_weighted(
    sample: &GroupSample,
    tau: QuantileLevel,
    lambda: f64,
    weights: &[f64],
    opts: &QrSolverOptions,
) -> Result<PenalizedQrFit> {
    if weights.len() != sample.p() {
        return Err(Error::Dimension(format!(
            "penalty weights have {} entries for p = {}",
            weights.len(),
            sample.p()
        )));
    }
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(Error::Config("penalty weights must be >= 0".into()));
    }
    fit_weighted(sample, tau, lambda, Some(weights), opts, None)
}

/// Batch fit used for the level triplet `tau, tau - h, tau + h`.
///
/// The regularization level is resolved once at `taus[0]` and reused for the
/// whole batch, keeping all fits on one regularization path. Later fits
/// warm-start from the first; warm starts affect only the iteration count,
/// not the returned solution beyond solver tolerance.
pub fn fit_qr_at_levels(
    sample: &GroupSample,
    taus: &[QuantileLevel],
    lambda_rule: &LambdaRule,
    opts: &QrSolverOptions,
) -> Result<Vec<PenalizedQrFit>> {
    if taus.is_empty() {
        return Err(Error::Config("no quantile levels supplied".into()));
    }
    let lambda = resolve_lambda(sample, taus[0], lambda_rule, opts)?;
    let mut fits = Vec::with_capacity(taus.len());
    let mut warm: Option<WarmState> = None;
    for &tau in taus {
        let fit = fit_weighted(sample, tau, lambda, None, opts, warm.as_ref())?;
        if warm.is_none() {
            warm = Some(WarmState {
                beta: fit.beta.clone(),
            });
        }
        fits.push(fit);
    }
    Ok(fits)
}

fn resolve_lambda(
    sample: &GroupSample,
    tau: QuantileLevel,
    rule: &LambdaRule,
    opts: &QrSolverOptions,
) -> Result<f64> {
    match rule {
        LambdaRule::Fixed(l) => {
            if !(l.is_finite() && *l >= 0.0) {
                return Err(Error::Config(format!("lambda must be >= 0, got {l}")));
            }
            Ok(*l)
        }
        LambdaRule::ScaledDefault { multiplier } => {
            if !(multiplier.is_finite() && *multiplier > 0.0) {
                return Err(Error::Config("lambda multiplier must be > 0".into()));
            }
            Ok(default_lambda(
                sample.n(),
                sample.p() as f64,
                tau,
                *multiplier,
            ))
        }
        LambdaRule::CrossValidated {
            multipliers,
            folds,
            seed,
        } => {
            let (best, _) =
                select_lambda_multiplier(sample, tau, multipliers, *folds, *seed, opts)?;
            Ok(default_lambda(sample.n(), sample.p() as f64, tau, best))
        }
    }
}

/// k-fold cross-validation of the `default_lambda` multiplier on held-out
/// pinball loss. Returns the winning multiplier and the per-candidate mean
/// losses; ties go to the smaller multiplier.
pub fn select_lambda_multiplier(
    sample: &GroupSample,
    tau: QuantileLevel,
    multipliers: &[f64],
    folds: usize,
    seed: u64,
    opts: &QrSolverOptions,
) -> Result<(f64, Vec<f64>)> {
    if multipliers.is_empty() {
        return Err(Error::Config("empty multiplier grid".into()));
    }
    if folds < 2 || sample.n() < 2 * folds {
        return Err(Error::Config(format!(
            "need n >= 2 * folds for cross-validation (n = {}, folds = {folds})",
            sample.n()
        )));
    }
    let mut order: Vec<usize> = (0..sample.n()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);

    let mut sorted = multipliers.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());

    // Fold fits only rank candidates, so they run at a looser tolerance and a
    // tighter iteration cap than the final fit, warm-started along the grid.
    let fold_opts = QrSolverOptions {
        tol: opts.tol.max(1e-5),
        max_iter: opts.max_iter.min(6_000),
        record_trace: false,
        ..opts.clone()
    };

    let mut totals = vec![0.0; sorted.len()];
    let mut count = 0usize;
    for f in 0..folds {
        let hold: Vec<usize> = order
            .iter()
            .copied()
            .enumerate()
            .filter(|(i, _)| i % folds == f)
            .map(|(_, v)| v)
            .collect();
        let train: Vec<usize> = order
            .iter()
            .copied()
            .enumerate()
            .filter(|(i, _)| i % folds != f)
            .map(|(_, v)| v)
            .collect();
        let train_sample = sample.subset(&train);
        let hold_sample = sample.subset(&hold);
        let mut warm: Option<WarmState> = None;
        for (ci, &c) in sorted.iter().enumerate() {
            let lambda = default_lambda(train_sample.n(), train_sample.p() as f64, tau, c);
            let fit = fit_weighted(&train_sample, tau, lambda, None, &fold_opts, warm.as_ref())?;
            let fitted = hold_sample.x().dot(&fit.beta);
            for (yi, fi) in hold_sample.y().iter().zip(fitted.iter()) {
                totals[ci] += check_loss(yi - fi, tau);
            }
            warm = Some(WarmState { beta: fit.beta });
        }
        count += hold.len();
    }
    let mean_losses: Vec<f64> = totals.iter().map(|t| t / count as f64).collect();
    let mut best = 0;
    for i in 1..sorted.len() {
        if mean_losses[i] < mean_losses[best] {
            best = i;
        }
    }
    Ok((sorted[best], mean_losses))
}

struct WarmState {
    beta: Array1<f64>,
}

/// Proximal map of `t * Psi_tau` at `v`: shifted two-sided soft threshold
/// with the flat piece on `[t(tau - 1), t tau]`.
#[inline]
fn prox_check(v: f64, t: f64, tau: f64) -> f64 {
    if v > t * tau {
        v - t * tau
    } else if v < t * (tau - 1.0) {
        v - t * (tau - 1.0)
    } else {
        0.0
    }
}

#[inline]
fn soft(z: f64, a: f64) -> f64 {
    if z > a {
        z - a
    } else if z < -a {
        z + a
    } else {
        0.0
    }
}

fn fit_weighted(
    sample: &GroupSample,
    tau: QuantileLevel,
    lambda: f64,
    weights: Option<&[f64]>,
    opts: &QrSolverOptions,
    warm: Option<&WarmState>,
) -> Result<PenalizedQrFit> {
    if !(lambda.is_finite() && lambda >= 0.0) {
        return Err(Error::Config(format!("lambda must be >= 0, got {lambda}")));
    }
    if opts.max_iter == 0 || !(opts.tol > 0.0) || !(opts.rho > 0.0) {
        return Err(Error::Config("invalid solver options".into()));
    }
    let n = sample.n();
    let p = sample.p();
    let t = tau.value();
    let x = sample.x();
    let y = sample.y();

    // Column-major copy for coordinate descent; row-major original for matvecs.
    let xt: Array2<f64> = x.t().to_owned();
    let col_sq: Vec<f64> = (0..p).map(|j| xt.row(j).dot(&xt.row(j))).collect();
    let w = |j: usize| weights.map_or(1.0, |ws| ws[j]);

    let mut beta = match warm {
        Some(ws) if ws.beta.len() == p => ws.beta.clone(),
        _ => Array1::zeros(p),
    };
    let mut xb = x.dot(&beta);
    let mut r = &y - &xb;
    let mut u = Array1::<f64>::zeros(n);
    let mut r_delta = Array1::<f64>::zeros(n);

    let mut rho = opts.rho;
    let threshold = opts.tol * ((n + p) as f64).sqrt();
    let relax = 1.5; // over-relaxation factor, standard safe range
    let check_every = 10;
    let balance_every = 25;

    let mut trace = opts.record_trace.then(Vec::new);
    let mut converged = false;
    let mut n_iter = opts.max_iter;

    let mut target = Array1::<f64>::zeros(n);
    let mut cd_res = Array1::<f64>::zeros(n);
    let mut active: Vec<usize> = Vec::with_capacity(p);

    for iter in 0..opts.max_iter {
        // Coefficient step: min lambda ||W b||_1 + (rho/2) || X b - target ||^2.
        for i in 0..n {
            target[i] = y[i] - r[i] - u[i];
        }
        // cd_res = target - X beta, maintained across coordinate updates.
        for i in 0..n {
            cd_res[i] = target[i] - xb[i];
        }
        // The coefficient step must be solved tighter than the outer
        // threshold even when rho is small, or its error floor becomes the
        // primal residual's plateau.
        let inner_tol = (0.05 * threshold / rho.max(1e-12)).min(0.2 * threshold);
        let mut pass = 0usize;
        loop {
            // Full pass, collecting the active set.
            active.clear();
            let mut max_step = 0.0f64;
            for j in 0..p {
                if col_sq[j] <= 0.0 {
                    continue;
                }
                let g = xt.row(j).dot(&cd_res) + col_sq[j] * beta[j];
                let bj = soft(g, lambda * w(j) / rho) / col_sq[j];
                let step = bj - beta[j];
                if step != 0.0 {
                    cd_res.scaled_add(-step, &xt.row(j));
                    beta[j] = bj;
                    max_step = max_step.max(step.abs() * col_sq[j].sqrt());
                }
                if beta[j] != 0.0 {
                    active.push(j);
                }
            }
            pass += 1;
            if max_step <= inner_tol || pass >= 100 {
                break;
            }
            // Inner passes over the active set only.
            loop {
                let mut inner_max = 0.0f64;
                for &j in &active {
                    let g = xt.row(j).dot(&cd_res) + col_sq[j] * beta[j];
                    let bj = soft(g, lambda * w(j) / rho) / col_sq[j];
                    let step = bj - beta[j];
                    if step != 0.0 {
                        cd_res.scaled_add(-step, &xt.row(j));
                        beta[j] = bj;
                        inner_max = inner_max.max(step.abs() * col_sq[j].sqrt());
                    }
                }
                pass += 1;
                if inner_max <= inner_tol || pass >= 100 {
                    break;
                }
            }
        }
        for i in 0..n {
            xb[i] = target[i] - cd_res[i];
        }

        // Residual step: elementwise prox of the check loss, over-relaxed.
        let t_prox = 1.0 / (n as f64 * rho);
        let mut primal_sq = 0.0;
        for i in 0..n {
            let h = relax * xb[i] + (1.0 - relax) * (y[i] - r[i]);
            let v = y[i] - h - u[i];
            let r_new = prox_check(v, t_prox, t);
            r_delta[i] = r_new - r[i];
            r[i] = r_new;
            let pr = h + r[i] - y[i];
            u[i] += pr;
            primal_sq += pr * pr;
        }

        if let Some(tr) = trace.as_mut() {
            tr.push(qr_objective_from_parts(y, &xb, tau, lambda, &beta, weights));
        }

        if (iter + 1) % check_every == 0 || iter + 1 == opts.max_iter {
            let primal = primal_sq.sqrt();
            // Dual residual of the r-update: rho ||X' (r_new - r_old)||.
            let mut dual_sq = 0.0;
            for j in 0..p {
                let d = xt.row(j).dot(&r_delta);
                dual_sq += d * d;
            }
            let dual = rho * dual_sq.sqrt();
            if std::env::var_os("QR_TRACE").is_some() && (iter + 1) % 2000 == 0 {
                eprintln!(
                    "iter {} primal {primal:.3e} dual {dual:.3e} rho {rho:.3e} thr {threshold:.3e}",
                    iter + 1
                );
            }
            if primal <= threshold && dual <= threshold {
                converged = true;
                n_iter = iter + 1;
                break;
            }
            // Residual balancing helps while the iterate is far out; once
            // both residuals are near the threshold the penalty parameter is
            // frozen so the fixed-step convergence guarantee applies
            // (perpetual adaptation can limit-cycle near a kink).
            let far = primal > 10.0 * threshold || dual > 10.0 * threshold;
            if (iter + 1) % balance_every == 0 && far {
                if primal > 10.0 * dual && rho < 1e6 {
                    rho *= 2.0;
                    u.mapv_inplace(|v| v * 0.5);
                } else if dual > 10.0 * primal && rho > 1e-6 {
                    rho *= 0.5;
                    u.mapv_inplace(|v| v * 2.0);
                }
            }
        }
    }

    // Polish: exact zeros for numerically dead coordinates.
    beta.mapv_inplace(|b| if b.abs() < 1e-8 { 0.0 } else { b });
    let objective = match weights {
        None => qr_objective(sample, tau, lambda, &beta),
        Some(ws) => {
            let fitted = x.dot(&beta);
            let mut loss = 0.0;
            for (yi, fi) in y.iter().zip(fitted.iter()) {
                loss += check_loss(yi - fi, tau);
            }
            loss / n as f64
                + lambda
                    * beta
                        .iter()
                        .zip(ws)
                        .map(|(b, w)| w * b.abs())
                        .sum::<f64>()
        }
    };

    Ok(PenalizedQrFit {
        tau,
        lambda,
        beta,
        objective,
        n_iter,
        converged,
        objective_trace: trace,
    })
}

fn qr_objective_from_parts(
    y: ArrayView1<'_, f64>,
    xb: &Array1<f64>,
    tau: QuantileLevel,
    lambda: f64,
    beta: &Array1<f64>,
    weights: Option<&[f64]>,
) -> f64 {
    let n = y.len() as f64;
    let mut loss = 0.0;
    for (yi, fi) in y.iter().zip(xb.iter()) {
        loss += check_loss(yi - fi, tau);
    }
    let pen: f64 = match weights {
        None => beta.iter().map(|b| b.abs()).sum(),
        Some(ws) => beta.iter().zip(ws).map(|(b, w)| w * b.abs()).sum(),
    };
    loss / n + lambda * pen
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, Array2};
    use rand::Rng;

    fn level(t: f64) -> QuantileLevel {
        QuantileLevel::new(t).unwrap()
    }

    fn random_sample(n: usize, p: usize, seed: u64) -> GroupSample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Array2::from_shape_fn((n, p), |_| rng.random_range(-1.5..1.5));
        let beta_true: Vec<f64> = (0..p).map(|j| if j < 2 { 1.0 } else { 0.0 }).collect();
        let y = Array1::from_shape_fn(n, |i| {
            let mut m = 0.0;
            for j in 0..p {
                m += x[[i, j]] * beta_true[j];
            }
            m + rng.random_range(-0.5..0.5)
        });
        GroupSample::new(x, y, 1).unwrap()
    }

    #[test]
    fn default_lambda_closed_form() {
        let e2 = std::f64::consts::E * std::f64::consts::E;
        let got = default_lambda(100, e2, level(0.5), 2.0);
        assert!((got - 0.1414213562373095).abs() < 1e-15);
    }

    #[test]
    fn default_lambda_scaling_laws() {
        let tau = level(0.3);
        let base = default_lambda(200, 50.0, tau, 2.0);
        // Quadrupling n halves the level.
        let big_n = default_lambda(800, 50.0, tau, 2.0);
        assert!((big_n - base / 2.0).abs() < 1e-15);
        // Symmetric in tau around one half.
        let mirrored = default_lambda(200, 50.0, level(0.7), 2.0);
        assert!((mirrored - base).abs() < 1e-15);
        // Linear in the multiplier.
        let half_c = default_lambda(200, 50.0, tau, 1.0);
        assert!((2.0 * half_c - base).abs() < 1e-15);
    }

    #[test]
    fn full_shrinkage_gives_exact_zero() {
        let sample = random_sample(25, 6, 7);
        let max_x = sample.x().iter().fold(0.0f64, |a, &v| a.max(v.abs()));
        let max_y = sample.y().iter().fold(0.0f64, |a, &v| a.max(v.abs()));
        let lambda = 10.0 * max_x * max_y;
        let fit =
            fit_penalized_qr(&sample, level(0.5), lambda, &QrSolverOptions::default()).unwrap();
        assert!(fit.converged);
        assert!(fit.beta.iter().all(|&b| b == 0.0));
        let expect: f64 = sample
            .y()
            .iter()
            .map(|&v| check_loss(v, level(0.5)))
            .sum::<f64>()
            / sample.n() as f64;
        assert!((fit.objective - expect).abs() < 1e-12);
    }

    #[test]
    fn zero_column_coefficient_stays_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 30;
        let mut x = Array2::from_shape_fn((n, 3), |_| rng.random_range(-1.0..1.0));
        for i in 0..n {
            x[[i, 1]] = 0.0;
        }
        let y = Array1::from_shape_fn(n, |i| x[[i, 0]] + rng.random_range(-0.2..0.2));
        let sample = GroupSample::new(x, y, 1).unwrap();
        let fit =
            fit_penalized_qr(&sample, level(0.4), 0.01, &QrSolverOptions::default()).unwrap();
        assert_eq!(fit.beta[1], 0.0);
    }

    #[test]
    fn intercept_only_recovers_sample_quantile() {
        // Unpenalized single-column fit: the minimizer of the mean check loss
        // over a constant is the order statistic at ceil(n tau) when n tau is
        // not an integer.
        let x = Array2::from_elem((5, 1), 1.0);
        let y = arr1(&[5.0, 3.0, 1.0, 4.0, 2.0]);
        let sample = GroupSample::new(x, y, 1).unwrap();
        let fit = fit_penalized_qr(&sample, level(0.5), 0.0, &QrSolverOptions::default()).unwrap();
        assert!(fit.converged, "median fit did not converge");
        assert!((fit.beta[0] - 3.0).abs() < 1e-4, "median {}", fit.beta[0]);
        let fit = fit_penalized_qr(&sample, level(0.25), 0.0, &QrSolverOptions::default()).unwrap();
        assert!((fit.beta[0] - 2.0).abs() < 1e-4, "quartile {}", fit.beta[0]);
    }

    #[test]
    fn solver_output_satisfies_subgradient_conditions() {
        let sample = random_sample(40, 10, 11);
        let tau = level(0.3);
        let lambda = default_lambda(40, 10.0, tau, 2.0);
        let fit = fit_penalized_qr(&sample, tau, lambda, &QrSolverOptions::default()).unwrap();
        assert!(fit.converged);
        // Kink band an order above the solver threshold, far below data scale.
        let gap = subgradient_gap(&sample, tau, lambda, &fit.beta, 1e-5);
        assert!(gap < 1e-4, "subgradient violation {gap}");
        // No descent direction among coordinate perturbations.
        let base = qr_objective(&sample, tau, lambda, &fit.beta);
        for j in 0..sample.p() {
            for d in [1e-4, -1e-4] {
                let mut b = fit.beta.clone();
                b[j] += d;
                assert!(qr_objective(&sample, tau, lambda, &b) >= base - 1e-9);
            }
        }
    }

    #[test]
    fn objective_trace_is_recorded_and_ends_no_worse() {
        let sample = random_sample(30, 5, 19);
        let opts = QrSolverOptions {
            record_trace: true,
            ..QrSolverOptions::default()
        };
        let tau = level(0.5);
        let fit = fit_penalized_qr(&sample, tau, 0.02, &opts).unwrap();
        let trace = fit.objective_trace.as_ref().expect("trace requested");
        assert_eq!(trace.len(), fit.n_iter);
        let at_zero = qr_objective(&sample, tau, 0.02, &Array1::zeros(sample.p()));
        assert!(*trace.last().unwrap() <= at_zero + 1e-9);
        assert!(fit.objective <= at_zero + 1e-9);
    }

    #[test]
    fn warm_started_batch_matches_cold_fits() {
        let sample = random_sample(50, 8, 23);
        let taus = [level(0.5), level(0.45), level(0.55)];
        let rule = LambdaRule::ScaledDefault { multiplier: 2.0 };
        let opts = QrSolverOptions::default();
        let batch = fit_qr_at_levels(&sample, &taus, &rule, &opts).unwrap();
        assert_eq!(batch.len(), 3);
        // Shared regularization level across the batch.
        assert!(batch.iter().all(|f| f.lambda == batch[0].lambda));
        for (i, &tau) in taus.iter().enumerate() {
            let cold = fit_penalized_qr(&sample, tau, batch[0].lambda, &opts).unwrap();
            let diff = (&cold.beta - &batch[i].beta)
                .iter()
                .fold(0.0f64, |a, &v| a.max(v.abs()));
            assert!(diff < 1e-4, "tau {} warm/cold gap {diff}", tau.value());
        }
    }

    #[test]
    fn unpenalized_intercept_survives_heavy_shrinkage() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let n = 40;
        let x = Array2::from_shape_fn((n, 3), |(_, j)| {
            if j == 0 {
                1.0
            } else {
                rng.random_range(-1.0..1.0)
            }
        });
        let y = Array1::from_shape_fn(n, |i| 2.0 + 0.1 * x[[i, 1]] + rng.random_range(-0.3..0.3));
        let sample = GroupSample::new(x, y, 1).unwrap();
        let fit = fit_penalized_qr_weighted(
            &sample,
            level(0.5),
            50.0,
            &[0.0, 1.0, 1.0],
            &QrSolverOptions::default(),
        )
        .unwrap();
        assert_eq!(fit.beta[1], 0.0);
        assert_eq!(fit.beta[2], 0.0);
        assert!((fit.beta[0] - 2.0).abs() < 0.2, "intercept {}", fit.beta[0]);
    }

    #[test]
    fn cross_validation_picks_from_grid_deterministically() {
        let sample = random_sample(60, 6, 41);
        let tau = level(0.5);
        let grid = [4.0, 0.5, 1.0, 2.0];
        let opts = QrSolverOptions::default();
        let (c1, losses) =
            select_lambda_multiplier(&sample, tau, &grid, 5, 99, &opts).unwrap();
        let (c2, _) = select_lambda_multiplier(&sample, tau, &grid, 5, 99, &opts).unwrap();
        assert_eq!(c1, c2);
        assert!(grid.contains(&c1));
        assert_eq!(losses.len(), grid.len());
        assert!(losses.iter().all(|l| l.is_finite() && *l >= 0.0));
    }

    #[test]
    fn invalid_inputs_are_rejected() {
        let sample = random_sample(20, 4, 1);
        let tau = level(0.5);
        assert!(fit_penalized_qr(&sample, tau, -0.1, &QrSolverOptions::default()).is_err());
        assert!(fit_penalized_qr_weighted(
            &sample,
            tau,
            0.1,
            &[1.0, 1.0],
            &QrSolverOptions::default()
        )
        .is_err());
        assert!(fit_qr_at_levels(
            &sample,
            &[],
            &LambdaRule::default(),
            &QrSolverOptions::default()
        )
        .is_err());
        let bad = QrSolverOptions {
            max_iter: 0,
            ..QrSolverOptions::default()
        };
        assert!(fit_penalized_qr(&sample, tau, 0.1, &bad).is_err());
    }
}
