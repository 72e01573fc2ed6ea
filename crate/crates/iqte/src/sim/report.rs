//! Monte Carlo result tables in aligned text, CSV, and JSON.
//!
//! Emission is byte-deterministic for a fixed report; wall-clock runtime is
//! kept out of every serialized form so that identical configurations yield
//! identical artifacts.

use serde::{Deserialize, Serialize};

use super::scenario::SimulationConfig;
use crate::error::{Error, Result};

/// Estimators tracked by the harness.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MethodKind {
    /// Debiased functional difference with the full constraint set.
    #[serde(rename = "IQTE")]
    Iqte,
    /// Same pipeline without the variance-enhancement bound.
    Deb,
    /// Raw penalized plug-in difference; point estimates only.
    Lasso,
}

impl std::fmt::Display for MethodKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            MethodKind::Iqte => write!(f, "IQTE"),
            MethodKind::Deb => write!(f, "Deb"),
            MethodKind::Lasso => write!(f, "Lasso"),
        }
    }
}

/// One aggregated table line for a (method, level) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub method: MethodKind,
    pub tau: f64,
    /// Fraction of one-sided rejections; absent for point-only methods.
    pub rejection: Option<f64>,
    /// Fraction of intervals containing the target contrast.
    pub coverage: Option<f64>,
    pub mean_length: Option<f64>,
    /// Mean estimate minus the target contrast.
    pub bias: f64,
    /// Sample standard deviation of the estimates (0 for a single rep).
    pub se: f64,
    pub reps_used: usize,
}

/// Counters describing how the experiment went.
#[derive(Debug, Clone, Serialize)]
pub struct ReportMetadata {
    pub reps_requested: usize,
    pub reps_used: usize,
    pub failed_reps: usize,
    /// First few failure descriptions, in replication order.
    pub failure_examples: Vec<String>,
    /// Constraint-relaxation rounds summed over retained replications.
    pub relaxations: u64,
    /// Sparsity quotients that hit the clip range, summed.
    pub eta_clipped: u64,
    /// Tuning runs that fell back to the widest grid value, summed.
    pub cv_fallbacks: u64,
    /// Wall-clock seconds; never serialized so artifacts stay deterministic.
    #[serde(skip)]
    pub runtime_seconds: f64,
}

/// Per-replication values kept for downstream distributional checks; not
/// part of any serialized artifact.
#[derive(Debug, Clone, Default)]
pub struct RawRecords {
    pub taus: Vec<f64>,
    pub delta_true: Vec<f64>,
    /// Per level, per retained rep: (estimate, variance).
    pub iqte: Vec<Vec<(f64, f64)>>,
    pub deb: Vec<Vec<(f64, f64)>>,
    /// Per level, per retained rep: point estimate.
    pub lasso: Vec<Vec<f64>>,
}

/// Aggregated experiment results plus the configuration that produced them.
#[derive(Debug, Clone, Serialize)]
pub struct MonteCarloReport {
    pub config: SimulationConfig,
    pub rows: Vec<MetricRow>,
    pub metadata: ReportMetadata,
    #[serde(skip)]
    pub raw: RawRecords,
}

/// Output encodings for a report.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Text,
    Csv,
    Json,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "text" => Ok(ReportFormat::Text),
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            other => Err(Error::Config(format!(
                "unknown report format {other:?}; expected text, csv, or json"
            ))),
        }
    }
}

/// Renders the report in the requested encoding.
pub fn emit_report(report: &MonteCarloReport, format: ReportFormat) -> Result<String> {
    match format {
        ReportFormat::Text => Ok(emit_text(report)),
        ReportFormat::Csv => emit_csv(report),
        ReportFormat::Json => emit_json(report),
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x:.4}"),
        None => "-".into(),
    }
}

fn emit_text(report: &MonteCarloReport) -> String {
    let c = &report.config;
    let m = &report.metadata;
    let mut out = String::new();
    out.push_str(&format!(
        "setting={} p={} n1={} n2={} alpha={} seed={}\n",
        c.setting, c.p, c.n1, c.n2, c.alpha, c.seed
    ));
    out.push_str(&format!(
        "reps: requested={} used={} excluded={}\n",
        m.reps_requested, m.reps_used, m.failed_reps
    ));
    out.push_str(&format!(
        "counters: relaxations={} eta_clipped={} cv_fallbacks={}\n",
        m.relaxations, m.eta_clipped, m.cv_fallbacks
    ));
    out.push_str(&format!(
        "{:<6} {:<6} {:>9} {:>9} {:>9} {:>10} {:>9} {:>5}\n",
        "tau", "method", "rejection", "coverage", "length", "bias", "se", "reps"
    ));
    for row in &report.rows {
        out.push_str(&format!(
            "{:<6.3} {:<6} {:>9} {:>9} {:>9} {:>10.4} {:>9.4} {:>5}\n",
            row.tau,
            row.method,
            fmt_opt(row.rejection),
            fmt_opt(row.coverage),
            fmt_opt(row.mean_length),
            row.bias,
            row.se,
            row.reps_used
        ));
    }
    out
}

fn emit_csv(report: &MonteCarloReport) -> Result<String> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    for row in &report.rows {
        writer
            .serialize(row)
            .map_err(|e| Error::Data(format!("failed to encode report row: {e}")))?;
    }
    if report.rows.is_empty() {
        // Serde-driven headers need at least one record; write them by hand.
        writer
            .write_record([
                "method",
                "tau",
                "rejection",
                "coverage",
                "mean_length",
                "bias",
                "se",
                "reps_used",
            ])
            .map_err(|e| Error::Data(format!("failed to encode header: {e}")))?;
    }
    let bytes = writer
        .into_inner()
        .map_err(|e| Error::Data(format!("failed to flush report: {e}")))?;
    String::from_utf8(bytes).map_err(|e| Error::Data(format!("report is not UTF-8: {e}")))
}

fn emit_json(report: &MonteCarloReport) -> Result<String> {
    let mut s = serde_json::to_string_pretty(report)
        .map_err(|e| Error::Data(format!("failed to encode report: {e}")))?;
    s.push('\n');
    Ok(s)
}

/// Parses rows back out of the CSV encoding.
pub fn parse_csv_rows(text: &str) -> Result<Vec<MetricRow>> {
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let mut rows = Vec::new();
    for record in reader.deserialize() {
        let row: MetricRow =
            record.map_err(|e| Error::Data(format!("malformed report row: {e}")))?;
        rows.push(row);
    }
    Ok(rows)
}
