//! Canonical data model: the observed system, prior hyperparameters,
//! parameter states and fit summaries, plus validation of every shape and
//! positivity constraint.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::stats::PdMatrix;
use crate::{diagnostics::ChainDiag, diagnostics::ModelScore, Error, Result};

/// Column marker that stands for a synthesized constant regressor in
/// dataset manifests.
pub const CONST_MARKER: &str = "__const__";

/// Observed data for an `M`-equation system with one mismeasured covariate
/// per equation.
///
/// Per-equation covariates are stored as `N×k_m` blocks; the `M×K`
/// block-diagonal design `X_i` of any observation is assembled on demand by
/// [`SurDataset::x_block`].
#[derive(Debug, Clone)]
pub struct SurDataset {
    /// Responses, `N×M`.
    pub y: DMatrix<f64>,
    /// Mismeasured readings `W̃_i`, `N×M`.
    pub w: DMatrix<f64>,
    /// Per-equation covariate blocks, `x[m]` is `N×k_m`.
    pub x: Vec<DMatrix<f64>>,
    /// Simulation ground truth, when the dataset was generated.
    pub truth: Option<DatasetTruth>,
}

/// Latent values and generating parameters carried along by the simulator.
#[derive(Debug, Clone)]
pub struct DatasetTruth {
    pub z: DMatrix<f64>,
    pub params: GeneratingParams,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GeneratingParams {
    pub beta: Vec<f64>,
    pub gamma: Vec<f64>,
    pub omega: Vec<f64>,
    pub sigma_eps: Vec<Vec<f64>>,
    pub sigma_z2: f64,
    pub sigma_u2: f64,
}

impl SurDataset {
    pub fn n(&self) -> usize {
        self.y.nrows()
    }

    pub fn m(&self) -> usize {
        self.y.ncols()
    }

    /// Covariate counts `k_m` per equation.
    pub fn k(&self) -> Vec<usize> {
        self.x.iter().map(|xm| xm.ncols()).collect()
    }

    /// `K = Σ k_m`.
    pub fn k_total(&self) -> usize {
        self.x.iter().map(|xm| xm.ncols()).sum()
    }

    /// Assemble the `M×K` block-diagonal design of observation `i`.
    pub fn x_block(&self, i: usize) -> DMatrix<f64> {
        let m = self.m();
        let k = self.k_total();
        let mut out = DMatrix::zeros(m, k);
        let mut col = 0;
        for (eq, xm) in self.x.iter().enumerate() {
            for j in 0..xm.ncols() {
                out[(eq, col + j)] = xm[(i, j)];
            }
            col += xm.ncols();
        }
        out
    }

    /// `X_i β` for all observations at once, as an `N×M` matrix.
    pub fn x_beta(&self, beta: &DVector<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.n(), self.m());
        let mut col = 0;
        for (eq, xm) in self.x.iter().enumerate() {
            let b = beta.rows(col, xm.ncols());
            let fitted = xm * b;
            out.set_column(eq, &fitted);
            col += xm.ncols();
        }
        out
    }

    /// `Σ_i X_i' X_i`, a `K×K` block matrix of per-equation cross products.
    pub fn xtx(&self) -> DMatrix<f64> {
        let k = self.k_total();
        let mut out = DMatrix::zeros(k, k);
        let mut row = 0;
        for xm in &self.x {
            let block = xm.transpose() * xm;
            out.view_mut((row, row), (xm.ncols(), xm.ncols()))
                .copy_from(&block);
            row += xm.ncols();
        }
        out
    }

    /// FNV-1a digest of the raw data bytes, used to tie chains to datasets.
    pub fn digest(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |v: f64| {
            for b in v.to_bits().to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x1000_0000_01b3);
            }
        };
        self.y.iter().for_each(|&v| eat(v));
        self.w.iter().for_each(|&v| eat(v));
        for xm in &self.x {
            xm.iter().for_each(|&v| eat(v));
        }
        h
    }
}

/// Hyperparameters of the conjugate prior family.
///
/// `s0` is the scale of the inverse-Wishart prior on `Σ_ε` (equivalently the
/// rate of the Wishart prior on the precision `Σ_ε⁻¹`), so the prior mean of
/// `Σ_ε` is `s0/(nu0 − M − 1)`. With `exposure = false` the latent mean is a
/// free `μ` with prior `N(mu0, sigma_mu2·I)` instead of the regression
/// `X_i ω`.
#[derive(Debug, Clone)]
pub struct PriorSpec {
    pub beta0: DVector<f64>,
    pub b0: PdMatrix,
    pub gamma0: DVector<f64>,
    pub g0: PdMatrix,
    pub nu0: f64,
    pub s0: PdMatrix,
    pub omega0: DVector<f64>,
    pub o0: PdMatrix,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
    pub delta4: f64,
    pub exposure: bool,
    pub mu0: DVector<f64>,
    pub sigma_mu2: f64,
}

impl PriorSpec {
    /// The proper-but-vague reference priors used throughout the simulation
    /// studies: unit-information normals centered at 1, `nu0 = 50` with
    /// `s0 = nu0·[1 0.5; 0.5 1]`-style scale, and `IG(0.01, 0.01)` on both
    /// variance components.
    pub fn vague(m: usize, k_total: usize) -> Self {
        let mut s0 = DMatrix::from_element(m, m, 0.5);
        for i in 0..m {
            s0[(i, i)] = 1.0;
        }
        let nu0 = 50.0;
        s0 *= nu0;
        PriorSpec {
            beta0: DVector::from_element(k_total, 1.0),
            b0: PdMatrix::new(DMatrix::identity(k_total, k_total), "B0").unwrap(),
            gamma0: DVector::from_element(m, 1.0),
            g0: PdMatrix::new(DMatrix::identity(m, m), "G0").unwrap(),
            nu0,
            s0: PdMatrix::new(s0, "S0").unwrap(),
            omega0: DVector::from_element(k_total, 1.0),
            o0: PdMatrix::new(DMatrix::identity(k_total, k_total), "O0").unwrap(),
            delta1: 0.01,
            delta2: 0.01,
            delta3: 0.01,
            delta4: 0.01,
            exposure: true,
            mu0: DVector::from_element(m, 0.0),
            sigma_mu2: 100.0,
        }
    }
}

/// One full parameter configuration of the model.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ParamState {
    pub beta: Vec<f64>,
    pub gamma: Vec<f64>,
    /// `M×M` error covariance, row-major.
    pub sigma_eps: Vec<Vec<f64>>,
    pub latent_mean: LatentMean,
    pub sigma_z2: f64,
    pub sigma_u2: f64,
    /// Latent values, `z[i][m]`.
    pub z: Vec<Vec<f64>>,
}

/// Mean structure of the latent covariate: an exposure regression on the
/// error-free covariates, or a free per-equation intercept.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub enum LatentMean {
    Exposure { omega: Vec<f64> },
    Intercept { mu: Vec<f64> },
}

impl ParamState {
    pub fn sigma_eps_matrix(&self) -> DMatrix<f64> {
        let m = self.sigma_eps.len();
        DMatrix::from_fn(m, m, |i, j| self.sigma_eps[i][j])
    }

    pub fn beta_vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.beta)
    }

    pub fn gamma_vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.gamma)
    }

    pub fn z_matrix(&self) -> DMatrix<f64> {
        let n = self.z.len();
        let m = if n > 0 { self.z[0].len() } else { 0 };
        DMatrix::from_fn(n, m, |i, j| self.z[i][j])
    }
}

/// How an interval in a [`FitReport`] was constructed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IntervalKind {
    /// Highest posterior density interval over retained draws.
    Hpdi,
    /// Equal-tailed quantile interval of a fitted density.
    EqualTailed,
    /// Normal-approximation confidence interval.
    NormalApprox,
}

/// Point estimate, dispersion and 95% interval for one scalar parameter.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamSummary {
    pub name: String,
    pub estimate: f64,
    /// Posterior standard deviation or standard error; absent where the
    /// method reports none (FGLS covariance entries).
    pub dispersion: Option<f64>,
    pub lower: f64,
    pub upper: f64,
    pub interval: IntervalKind,
}

/// Cross-equation error correlation derived from the fitted `Σ_ε`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ErrorCorrelation {
    pub eq_a: usize,
    pub eq_b: usize,
    pub value: f64,
}

/// Convergence record attached to variational fits.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MfvbInfo {
    pub cycles: usize,
    pub converged: bool,
    pub max_elbo: f64,
}

/// Serializable summary of one estimator run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitReport {
    pub schema: String,
    pub method: String,
    pub params: Vec<ParamSummary>,
    pub error_correlations: Vec<ErrorCorrelation>,
    /// Plug-in estimate of `σ_Z²/(σ_Z²+σ_u²)`; absent for estimators that do
    /// not model the measurement error.
    pub reliability_ratio: Option<f64>,
    pub diagnostics: Option<Vec<ChainDiag>>,
    pub scores: Option<ModelScore>,
    pub mfvb: Option<MfvbInfo>,
    pub runtime_seconds: f64,
    pub seed: u64,
}

pub const REPORT_SCHEMA: &str = "surme-report/1";

impl FitReport {
    /// Check the report's own invariants: interval brackets its point
    /// estimate and the reliability ratio lies in `[0, 1]`.
    pub fn check(&self) -> Result<()> {
        let mut issues = Vec::new();
        for p in &self.params {
            if !(p.lower <= p.estimate && p.estimate <= p.upper) {
                issues.push(format!(
                    "parameter `{}`: interval [{}, {}] does not bracket estimate {}",
                    p.name, p.lower, p.upper, p.estimate
                ));
            }
        }
        if let Some(r) = self.reliability_ratio {
            if !(0.0..=1.0).contains(&r) {
                issues.push(format!("reliability ratio {r} outside [0, 1]"));
            }
        }
        if issues.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation { issues })
        }
    }

    pub fn param(&self, name: &str) -> Option<&ParamSummary> {
        self.params.iter().find(|p| p.name == name)
    }
}

/// Reliability ratio `σ_Z²/(σ_Z²+σ_u²)`: the share of the reading's variance
/// carried by the true value. 1 means no measurement error.
pub fn reliability_ratio(sigma_z2: f64, sigma_u2: f64) -> Result<f64> {
    if sigma_z2 <= 0.0 {
        return Err(Error::domain(format!(
            "reliability_ratio: sigma_z2 must be positive, got {sigma_z2}"
        )));
    }
    if sigma_u2 < 0.0 {
        return Err(Error::domain(format!(
            "reliability_ratio: sigma_u2 must be nonnegative, got {sigma_u2}"
        )));
    }
    Ok(sigma_z2 / (sigma_z2 + sigma_u2))
}

/// Check every invariant tying a dataset to a prior specification and
/// report all violations at once.
pub fn validate(data: &SurDataset, priors: &PriorSpec) -> Result<()> {
    let mut issues = Vec::new();
    let n = data.n();
    let m = data.m();
    let k = data.k_total();

    if m == 0 || n == 0 {
        issues.push("dataset is empty".to_string());
    }
    if data.x.len() != m {
        issues.push(format!(
            "equation count mismatch: y has {m} columns but {} covariate blocks",
            data.x.len()
        ));
    }
    if data.w.nrows() != n || data.w.ncols() != m {
        issues.push(format!(
            "W must be {n}x{m}, got {}x{}",
            data.w.nrows(),
            data.w.ncols()
        ));
    }
    for (eq, xm) in data.x.iter().enumerate() {
        if xm.nrows() != n {
            issues.push(format!(
                "covariate block of equation {} has {} rows, expected {n}",
                eq + 1,
                xm.nrows()
            ));
        }
        if xm.iter().any(|v| !v.is_finite()) {
            issues.push(format!("equation {} covariates contain non-finite values", eq + 1));
        }
    }
    if data.y.iter().any(|v| !v.is_finite()) {
        issues.push("y contains non-finite values".to_string());
    }
    if data.w.iter().any(|v| !v.is_finite()) {
        issues.push("W contains non-finite values".to_string());
    }

    if priors.beta0.len() != k || priors.b0.dim() != k {
        issues.push(format!(
            "beta prior dimension must be K={k}, got beta0 len {} and B0 dim {}",
            priors.beta0.len(),
            priors.b0.dim()
        ));
    }
    if priors.gamma0.len() != m || priors.g0.dim() != m {
        issues.push(format!(
            "gamma prior dimension must be M={m}, got gamma0 len {} and G0 dim {}",
            priors.gamma0.len(),
            priors.g0.dim()
        ));
    }
    if priors.s0.dim() != m {
        issues.push(format!("S0 must be {m}x{m}, got dim {}", priors.s0.dim()));
    }
    if priors.nu0 < m as f64 {
        issues.push(format!("nu0 = {} below the equation count {m}", priors.nu0));
    }
    if priors.exposure {
        if priors.omega0.len() != k || priors.o0.dim() != k {
            issues.push(format!(
                "omega prior dimension must be K={k}, got omega0 len {} and O0 dim {}",
                priors.omega0.len(),
                priors.o0.dim()
            ));
        }
    } else {
        if priors.mu0.len() != m {
            issues.push(format!(
                "mu0 must have length M={m}, got {}",
                priors.mu0.len()
            ));
        }
        if priors.sigma_mu2 <= 0.0 {
            issues.push(format!("sigma_mu2 must be positive, got {}", priors.sigma_mu2));
        }
    }
    for (name, v) in [
        ("delta1", priors.delta1),
        ("delta2", priors.delta2),
        ("delta3", priors.delta3),
        ("delta4", priors.delta4),
    ] {
        if v <= 0.0 {
            issues.push(format!("{name} must be positive, got {v}"));
        }
    }

    if issues.is_empty() {
        Ok(())
    } else {
        Err(Error::Validation { issues })
    }
}
