//! Synthetic scenario generation, Monte Carlo execution, and reporting.
//!
//! `run_monte_carlo` draws independent two-group scenarios, runs the full
//! debiasing pipeline plus the two comparators on each, and aggregates
//! per-method bias, spread, coverage, interval length, and rejection rates.
//! Replications run on a worker pool but are reduced in replication order,
//! so results are independent of scheduling.

mod report;
mod scenario;

pub use report::{
    emit_report, parse_csv_rows, MethodKind, MetricRow, MonteCarloReport, RawRecords,
    ReportFormat, ReportMetadata,
};
pub use scenario::{
    draw_x_new, generate_scenario, true_delta, ScenarioDraw, Setting, SimulationConfig,
    TrueCoefficients,
};

use rayon::prelude::*;
use std::time::Instant;

use crate::error::{Error, Result};
use crate::inference::IqteEstimate;
use crate::pipeline::analyze_pair;
use crate::qr_lasso::LambdaRule;

/// Replications beyond this failure share abort the experiment.
const MAX_FAILURE_SHARE: f64 = 0.05;

struct IntervalDraw {
    delta: f64,
    lo: f64,
    hi: f64,
    reject: bool,
    variance: f64,
}

impl IntervalDraw {
    fn from_estimate(est: &IqteEstimate) -> Self {
        Self {
            delta: est.delta_hat,
            lo: est.ci_lower,
            hi: est.ci_upper,
            reject: est.one_sided_reject,
            variance: est.v_hat,
        }
    }
}

struct TauOutcome {
    iqte: IntervalDraw,
    deb: IntervalDraw,
    lasso: f64,
    relaxations: u64,
    clipped: u64,
    fallbacks: u64,
}

struct RepOutcome {
    per_tau: Vec<TauOutcome>,
}

fn rep_cv_seed(seed: u64, rep: usize) -> u64 {
    seed ^ (rep as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

fn run_rep(config: &SimulationConfig, rep: usize) -> std::result::Result<RepOutcome, String> {
    let scenario = generate_scenario(config, rep).map_err(|e| format!("rep {rep}: {e}"))?;
    let mut opts = config.solver.clone();
    opts.include_ablated = true;
    let rep_seed = rep_cv_seed(config.seed, rep);
    opts.projection.cv_seed = rep_seed;
    if let LambdaRule::CrossValidated { seed, .. } = &mut opts.lambda {
        // Distinct stream from the projection folds, still rep-derived.
        *seed = rep_seed.wrapping_add(0x9E37_79B9);
    }
    let mut per_tau = Vec::with_capacity(scenario.taus.len());
    for &tau in &scenario.taus {
        let pair = analyze_pair(
            &scenario.sample1,
            &scenario.sample2,
            &scenario.x_new,
            tau,
            config.alpha,
            &opts,
        )
        .map_err(|e| format!("rep {rep}, tau {}: {e}", tau.value()))?;
        // A degenerate comparator variance (the zero direction is optimal
        // once the lower bound is removed) is a defined outcome: the point
        // estimate survives but the interval collapses to a point and the
        // test cannot control its size.
        let deb = match pair.ablated_estimate.as_ref() {
            Some(est) => IntervalDraw::from_estimate(est),
            None => {
                let a1 = pair
                    .group1
                    .ablated
                    .as_ref()
                    .expect("ablated functionals were requested");
                let a2 = pair
                    .group2
                    .ablated
                    .as_ref()
                    .expect("ablated functionals were requested");
                let delta = a1.point - a2.point;
                IntervalDraw {
                    delta,
                    lo: delta,
                    hi: delta,
                    reject: delta > 0.0,
                    variance: 0.0,
                }
            }
        };
        per_tau.push(TauOutcome {
            iqte: IntervalDraw::from_estimate(&pair.estimate),
            deb,
            lasso: pair.lasso_delta,
            relaxations: (pair.group1.projection.relaxation_count
                + pair.group2.projection.relaxation_count) as u64,
            clipped: (pair.group1.eta.clipped_count + pair.group2.eta.clipped_count) as u64,
            fallbacks: u64::from(pair.group1.projection.cv_fallback)
                + u64::from(pair.group2.projection.cv_fallback),
        });
    }
    Ok(RepOutcome { per_tau })
}

fn mean(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let n = xs.clone().count();
    xs.sum::<f64>() / n as f64
}

fn sample_sd(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let n = xs.clone().count();
    if n < 2 {
        return 0.0;
    }
    let m = mean(xs.clone());
    (xs.map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1) as f64).sqrt()
}

fn interval_row(
    method: MethodKind,
    tau: f64,
    draws: &[IntervalDraw],
    delta_true: f64,
) -> MetricRow {
    let n = draws.len();
    let covered = draws
        .iter()
        .filter(|d| d.lo <= delta_true && delta_true <= d.hi)
        .count();
    let rejected = draws.iter().filter(|d| d.reject).count();
    MetricRow {
        method,
        tau,
        rejection: Some(rejected as f64 / n as f64),
        coverage: Some(covered as f64 / n as f64),
        mean_length: Some(mean(draws.iter().map(|d| d.hi - d.lo))),
        bias: mean(draws.iter().map(|d| d.delta)) - delta_true,
        se: sample_sd(draws.iter().map(|d| d.delta)),
        reps_used: n,
    }
}

fn point_row(method: MethodKind, tau: f64, draws: &[f64], delta_true: f64) -> MetricRow {
    MetricRow {
        method,
        tau,
        rejection: None,
        coverage: None,
        mean_length: None,
        bias: mean(draws.iter().copied()) - delta_true,
        se: sample_sd(draws.iter().copied()),
        reps_used: draws.len(),
    }
}

/// Runs the full experiment described by `config`.
pub fn run_monte_carlo(config: &SimulationConfig) -> Result<MonteCarloReport> {
    config.validate()?;
    let start = Instant::now();
    let taus = config.levels()?;
    let x_new = draw_x_new(config.setting, config.p, config.seed)?;
    let delta_true: Vec<f64> = taus
        .iter()
        .map(|&t| true_delta(config.setting, &x_new, t))
        .collect();
    let n_levels = taus.len();

    let outcomes: Vec<std::result::Result<RepOutcome, String>> = (0..config.n_reps)
        .into_par_iter()
        .map(|rep| run_rep(config, rep))
        .collect();

    let mut iqte: Vec<Vec<IntervalDraw>> = (0..n_levels).map(|_| Vec::new()).collect();
    let mut deb: Vec<Vec<IntervalDraw>> = (0..n_levels).map(|_| Vec::new()).collect();
    let mut lasso: Vec<Vec<f64>> = vec![Vec::new(); n_levels];
    let mut failures = 0usize;
    let mut failure_examples = Vec::new();
    let mut relaxations = 0u64;
    let mut eta_clipped = 0u64;
    let mut cv_fallbacks = 0u64;
    for outcome in outcomes {
        match outcome {
            Err(msg) => {
                failures += 1;
                if failure_examples.len() < 5 {
                    failure_examples.push(msg);
                }
            }
            Ok(rep) => {
                for (k, t) in rep.per_tau.into_iter().enumerate() {
                    relaxations += t.relaxations;
                    eta_clipped += t.clipped;
                    cv_fallbacks += t.fallbacks;
                    iqte[k].push(t.iqte);
                    deb[k].push(t.deb);
                    lasso[k].push(t.lasso);
                }
            }
        }
    }
    if failures as f64 > MAX_FAILURE_SHARE * config.n_reps as f64 {
        return Err(Error::Solver(format!(
            "{failures} of {} replications failed (limit is {:.0}%); first failures: {}",
            config.n_reps,
            MAX_FAILURE_SHARE * 100.0,
            failure_examples.join(" | ")
        )));
    }
    let reps_used = config.n_reps - failures;

    let mut rows = Vec::with_capacity(3 * n_levels);
    for k in 0..n_levels {
        let tau = taus[k].value();
        rows.push(interval_row(MethodKind::Iqte, tau, &iqte[k], delta_true[k]));
        rows.push(interval_row(MethodKind::Deb, tau, &deb[k], delta_true[k]));
        rows.push(point_row(MethodKind::Lasso, tau, &lasso[k], delta_true[k]));
    }

    let raw = RawRecords {
        taus: taus.iter().map(|t| t.value()).collect(),
        delta_true,
        iqte: iqte
            .iter()
            .map(|v| v.iter().map(|d| (d.delta, d.variance)).collect())
            .collect(),
        deb: deb
            .iter()
            .map(|v| v.iter().map(|d| (d.delta, d.variance)).collect())
            .collect(),
        lasso,
    };
    Ok(MonteCarloReport {
        config: config.clone(),
        rows,
        metadata: ReportMetadata {
            reps_requested: config.n_reps,
            reps_used,
            failed_reps: failures,
            failure_examples,
            relaxations,
            eta_clipped,
            cv_fallbacks,
            runtime_seconds: start.elapsed().as_secs_f64(),
        },
        raw,
    })
}
