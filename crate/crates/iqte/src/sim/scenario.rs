//! Synthetic two-group scenarios: an AR-correlated latent Gaussian design
//! with its first two columns folded to magnitudes, heteroscedastic normal
//! responses whose conditional quantiles are linear in the transformed
//! design, and two reference loading vectors (an l2-dense and an l2-sparse
//! one).

use ndarray::{Array1, Array2};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{GroupSample, Loading, QuantileLevel};
use crate::error::{Error, Result};
use crate::linalg;
use crate::normal;
use crate::pipeline::PipelineOptions;

/// Which reference loading vector the experiment uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Setting {
    Dense,
    Sparse,
}

impl std::fmt::Display for Setting {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Setting::Dense => write!(f, "dense"),
            Setting::Sparse => write!(f, "sparse"),
        }
    }
}

/// Full description of one Monte Carlo experiment.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimulationConfig {
    pub n1: usize,
    pub n2: usize,
    pub p: usize,
    pub setting: Setting,
    pub taus: Vec<f64>,
    pub n_reps: usize,
    pub alpha: f64,
    pub seed: u64,
    #[serde(default)]
    pub solver: PipelineOptions,
}

impl SimulationConfig {
    /// Checks every invariant and reports all violations together.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.p < 12 {
            problems.push(format!(
                "p must be at least 12 so the coefficient patterns fit, got {}",
                self.p
            ));
        }
        if self.n_reps < 1 {
            problems.push("n_reps must be at least 1".into());
        }
        let min_n = 2 * self.solver.projection.cv_folds.max(1);
        if self.n1 < min_n || self.n2 < min_n {
            problems.push(format!(
                "group sizes ({}, {}) are too small for {}-fold tuning",
                self.n1, self.n2, self.solver.projection.cv_folds
            ));
        }
        if self.taus.is_empty() {
            problems.push("taus must list at least one quantile level".into());
        }
        for &t in &self.taus {
            if !(t > 0.0 && t < 1.0) {
                problems.push(format!("quantile level {t} is outside (0, 1)"));
            }
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            problems.push(format!("alpha must be in (0, 1), got {}", self.alpha));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    /// Validated quantile levels in config order.
    pub fn levels(&self) -> Result<Vec<QuantileLevel>> {
        self.taus.iter().map(|&t| QuantileLevel::new(t)).collect()
    }
}

/// Location and scale loadings of one group's response equation,
/// `y = x' base + (x' z_scale) * eps`; the coefficient vector at level tau
/// is `base + z_scale * q_tau`.
#[derive(Debug, Clone)]
pub struct TrueCoefficients {
    pub base: Array1<f64>,
    pub z_scale: Array1<f64>,
}

impl TrueCoefficients {
    pub fn group1(p: usize) -> Self {
        let mut base = Array1::zeros(p);
        base[2] = 2.0;
        base[3] = 1.6;
        for j in 4..=10 {
            base[j] = -0.8 * (j as f64 - 3.0);
        }
        let mut z_scale = Array1::zeros(p);
        z_scale[0] = 1.0;
        z_scale[1] = 2.0;
        Self { base, z_scale }
    }

    pub fn group2(p: usize) -> Self {
        let mut base = Array1::zeros(p);
        base[2] = 1.2;
        base[3] = 0.5;
        for j in 4..=10 {
            base[j] = 0.5 * (j as f64 + 2.0);
        }
        let mut z_scale = Array1::zeros(p);
        z_scale[0] = 2.0;
        z_scale[1] = 1.0;
        Self { base, z_scale }
    }

    pub fn beta_at(&self, tau: QuantileLevel) -> Array1<f64> {
        let q = normal::inverse_cdf(tau.value());
        &self.base + &(self.z_scale.clone() * q)
    }
}

/// One replication's data plus everything needed to score it.
#[derive(Debug, Clone)]
pub struct ScenarioDraw {
    pub sample1: GroupSample,
    pub sample2: GroupSample,
    pub coeffs1: TrueCoefficients,
    pub coeffs2: TrueCoefficients,
    pub x_new: Loading,
    pub taus: Vec<QuantileLevel>,
    /// Coefficient vectors per level, aligned with `taus`.
    pub true_beta1: Vec<Array1<f64>>,
    pub true_beta2: Vec<Array1<f64>>,
    /// Target contrasts per level, aligned with `taus`.
    pub delta_true: Vec<f64>,
}

/// Lower Cholesky factor of the AR correlation `0.5^|i-j|`.
pub(crate) fn ar_cholesky_factor(p: usize) -> Array2<f64> {
    let toeplitz = Array2::from_shape_fn((p, p), |(i, j)| {
        0.5f64.powi((i as i32 - j as i32).abs())
    });
    linalg::cholesky(&toeplitz).expect("AR correlation matrix is positive definite")
}

/// Rows of latent Gaussians with the AR correlation, drawn row-major.
pub(crate) fn sample_latent_rows(
    rng: &mut ChaCha8Rng,
    n: usize,
    factor: &Array2<f64>,
) -> Array2<f64> {
    let p = factor.nrows();
    let mut out = Array2::<f64>::zeros((n, p));
    let mut z = Array1::<f64>::zeros(p);
    for i in 0..n {
        for v in z.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        for j in 0..p {
            let mut acc = 0.0;
            for k in 0..=j {
                acc += factor[[j, k]] * z[k];
            }
            out[[i, j]] = acc;
        }
    }
    out
}

fn fold_first_two(latent: &mut Array2<f64>) {
    for i in 0..latent.nrows() {
        latent[[i, 0]] = latent[[i, 0]].abs();
        latent[[i, 1]] = latent[[i, 1]].abs();
    }
}

fn draw_group(
    rng: &mut ChaCha8Rng,
    n: usize,
    factor: &Array2<f64>,
    coeffs: &TrueCoefficients,
    group_id: u8,
) -> GroupSample {
    let mut x = sample_latent_rows(rng, n, factor);
    fold_first_two(&mut x);
    let location = x.dot(&coeffs.base);
    let scale = x.dot(&coeffs.z_scale);
    let mut y = Array1::zeros(n);
    for i in 0..n {
        let eps: f64 = rng.sample(StandardNormal);
        y[i] = location[i] + scale[i] * eps;
    }
    GroupSample::new(x, y, group_id).expect("generated sample is well formed")
}

/// The experiment's loading vector, drawn once from the experiment seed.
pub fn draw_x_new(setting: Setting, p: usize, seed: u64) -> Result<Loading> {
    if p < 12 {
        return Err(Error::Config(format!(
            "loading recipes need p >= 12, got {p}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0);
    let x_init: Vec<f64> = (0..p).map(|_| rng.sample(StandardNormal)).collect();
    let mut x = Array1::zeros(p);
    match setting {
        Setting::Dense => {
            x[0] = 0.75;
            x[1] = 5.25;
            x[2] = -1.5;
            x[3] = 1.05;
            for j in 11..p {
                x[j] = x_init[j];
            }
        }
        Setting::Sparse => {
            x[0] = 1.5;
            x[1] = 0.75;
            // One-based coordinates 3..=7 hold 0.125 (9 - j), negated at 5.
            for j in 2..=6 {
                let sign = if j == 4 { -1.0 } else { 1.0 };
                x[j] = sign * 0.125 * (8.0 - j as f64);
            }
            for j in 11..p.min(100) {
                x[j] = x_init[j];
            }
        }
    }
    Loading::new(x)
}

/// Closed-form target contrast `x_new' (beta_1(tau) - beta_2(tau))`.
pub fn true_delta(setting: Setting, x_new: &Loading, tau: QuantileLevel) -> f64 {
    let _ = setting;
    let p = x_new.p();
    let c1 = TrueCoefficients::group1(p);
    let c2 = TrueCoefficients::group2(p);
    let diff = &c1.beta_at(tau) - &c2.beta_at(tau);
    x_new.vector().dot(&diff)
}

/// Draws replication `rep` of the experiment. Streams are split so the
/// loading uses stream 0 and replication `rep` uses stream `rep + 1`;
/// extending the replication count never changes earlier draws.
pub fn generate_scenario(config: &SimulationConfig, rep: usize) -> Result<ScenarioDraw> {
    config.validate()?;
    let taus = config.levels()?;
    let x_new = draw_x_new(config.setting, config.p, config.seed)?;
    let factor = ar_cholesky_factor(config.p);
    let coeffs1 = TrueCoefficients::group1(config.p);
    let coeffs2 = TrueCoefficients::group2(config.p);

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(rep as u64 + 1);
    let sample1 = draw_group(&mut rng, config.n1, &factor, &coeffs1, 1);
    let sample2 = draw_group(&mut rng, config.n2, &factor, &coeffs2, 2);

    let true_beta1: Vec<_> = taus.iter().map(|&t| coeffs1.beta_at(t)).collect();
    let true_beta2: Vec<_> = taus.iter().map(|&t| coeffs2.beta_at(t)).collect();
    let delta_true: Vec<_> = taus
        .iter()
        .map(|&t| true_delta(config.setting, &x_new, t))
        .collect();
    Ok(ScenarioDraw {
        sample1,
        sample2,
        coeffs1,
        coeffs2,
        x_new,
        taus,
        true_beta1,
        true_beta2,
        delta_true,
    })
}
