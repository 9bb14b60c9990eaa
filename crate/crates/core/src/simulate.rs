//! Data-generating process for the two-equation simulation design, the
//! frequentist FGLS baseline, and the replicated-study harness.
//!
//! The canned design has three covariates per equation (a constant, one
//! covariate shared by both equations drawn from `U(0,2)`, and one exclusive
//! covariate drawn from `U(0,4)`), a latent covariate generated by the
//! exposure regression with variance `σ_Z²`, and readings `W = Z + u` whose
//! noise variance is set through the reliability ratio,
//! `σ_u² = σ_Z²(1−R_Z)/R_Z`.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::gibbs::{gibbs_sur, gibbs_surme, McmcConfig};
use crate::mfvb::cavi_fit;
use crate::model::{
    DatasetTruth, FitReport, GeneratingParams, IntervalKind, ParamSummary, PriorSpec, SurDataset,
    REPORT_SCHEMA,
};
use crate::stats::{pd_cholesky, pd_inverse, RngStream};
use crate::{Error, Result};

/// Configuration of the two-equation generating process.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DgpConfig {
    pub n: usize,
    pub sigma_z2: f64,
    pub r_z: f64,
    pub beta_true: Vec<f64>,
    pub gamma_true: Vec<f64>,
    pub omega_true: Vec<f64>,
    pub sigma_eps_true: Vec<Vec<f64>>,
}

impl DgpConfig {
    /// `σ_Z² = 1, R_Z = 0.8`.
    pub fn case_i_1(n: usize) -> Self {
        Self::custom(n, 1.0, 0.8)
    }

    /// `σ_Z² = 0.0625, R_Z = 0.8`.
    pub fn case_i_2(n: usize) -> Self {
        Self::custom(n, 0.0625, 0.8)
    }

    /// `σ_Z² = 1, R_Z = 0.5714`.
    pub fn case_ii_1(n: usize) -> Self {
        Self::custom(n, 1.0, 0.5714)
    }

    /// `σ_Z² = 0.0625, R_Z = 0.5714`.
    pub fn case_ii_2(n: usize) -> Self {
        Self::custom(n, 0.0625, 0.5714)
    }

    pub fn custom(n: usize, sigma_z2: f64, r_z: f64) -> Self {
        DgpConfig {
            n,
            sigma_z2,
            r_z,
            beta_true: vec![3.0, 5.0, 4.0, 4.0, 3.8, 3.0],
            gamma_true: vec![4.0, 4.0],
            omega_true: vec![1.5, 0.75, 0.3, 1.5, 1.05, 0.45],
            sigma_eps_true: vec![vec![1.0, 0.5], vec![0.5, 1.0]],
        }
    }

    pub fn by_label(label: &str, n: usize) -> Option<Self> {
        match label {
            "I-1" => Some(Self::case_i_1(n)),
            "I-2" => Some(Self::case_i_2(n)),
            "II-1" => Some(Self::case_ii_1(n)),
            "II-2" => Some(Self::case_ii_2(n)),
            _ => None,
        }
    }

    /// Implied measurement-error variance `σ_Z²(1−R_Z)/R_Z`.
    pub fn sigma_u2(&self) -> f64 {
        self.sigma_z2 * (1.0 - self.r_z) / self.r_z
    }

    pub fn m(&self) -> usize {
        self.gamma_true.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::domain("DgpConfig: n must be positive"));
        }
        if self.sigma_z2 <= 0.0 {
            return Err(Error::domain(format!(
                "DgpConfig: sigma_z2 must be positive, got {}",
                self.sigma_z2
            )));
        }
        if !(self.r_z > 0.0 && self.r_z <= 1.0) {
            return Err(Error::domain(format!(
                "DgpConfig: r_z must lie in (0, 1], got {}",
                self.r_z
            )));
        }
        Ok(())
    }

    /// Ground-truth value of every reported parameter, keyed by the shared
    /// naming scheme (`beta_1_1`, `gamma_2`, `sigma_eps_1_2`, ...).
    pub fn truth_by_name(&self) -> BTreeMap<String, f64> {
        let m = self.m();
        let k_each = self.beta_true.len() / m;
        let mut out = BTreeMap::new();
        for eq in 0..m {
            for j in 0..k_each {
                out.insert(
                    format!("beta_{}_{}", eq + 1, j + 1),
                    self.beta_true[eq * k_each + j],
                );
                out.insert(
                    format!("omega_{}_{}", eq + 1, j + 1),
                    self.omega_true[eq * k_each + j],
                );
            }
            out.insert(format!("gamma_{}", eq + 1), self.gamma_true[eq]);
        }
        for i in 0..m {
            for j in i..m {
                out.insert(
                    format!("sigma_eps_{}_{}", i + 1, j + 1),
                    self.sigma_eps_true[i][j],
                );
            }
        }
        out.insert("sigma_z2".into(), self.sigma_z2);
        out.insert("sigma_u2".into(), self.sigma_u2());
        out
    }
}

/// Draw one dataset from the generating process. The common covariate is
/// identical across equations by construction.
pub fn generate_dataset(cfg: &DgpConfig, rng: &mut RngStream) -> Result<SurDataset> {
    cfg.validate()?;
    let n = cfg.n;
    let m = cfg.m();
    let k_each = cfg.beta_true.len() / m;
    let sigma_u2 = cfg.sigma_u2();

    let sigma_eps = DMatrix::from_fn(m, m, |i, j| cfg.sigma_eps_true[i][j]);
    let eps_chol = pd_cholesky(&sigma_eps, "sigma_eps_true")?;

    let common: Vec<f64> = (0..n).map(|_| rng.uniform(0.0, 2.0)).collect();
    let mut x = Vec::with_capacity(m);
    for _ in 0..m {
        let mut block = DMatrix::zeros(n, k_each);
        for i in 0..n {
            block[(i, 0)] = 1.0;
            block[(i, 1)] = common[i];
            for j in 2..k_each {
                block[(i, j)] = rng.uniform(0.0, 4.0);
            }
        }
        x.push(block);
    }

    let dataset_shell = SurDataset {
        y: DMatrix::zeros(n, m),
        w: DMatrix::zeros(n, m),
        x,
        truth: None,
    };
    let omega = DVector::from_column_slice(&cfg.omega_true);
    let x_omega = dataset_shell.x_beta(&omega);

    let sd_z = cfg.sigma_z2.sqrt();
    let sd_u = sigma_u2.sqrt();
    let mut z = DMatrix::zeros(n, m);
    let mut w = DMatrix::zeros(n, m);
    for i in 0..n {
        for j in 0..m {
            z[(i, j)] = x_omega[(i, j)] + sd_z * rng.standard_normal();
            w[(i, j)] = z[(i, j)] + sd_u * rng.standard_normal();
        }
    }

    let beta = DVector::from_column_slice(&cfg.beta_true);
    let x_beta = dataset_shell.x_beta(&beta);
    let l = eps_chol.l();
    let mut y = DMatrix::zeros(n, m);
    for i in 0..n {
        let noise = DVector::from_fn(m, |_, _| rng.standard_normal());
        let eps = &l * noise;
        for j in 0..m {
            y[(i, j)] = x_beta[(i, j)] + z[(i, j)] * cfg.gamma_true[j] + eps[j];
        }
    }

    Ok(SurDataset {
        y,
        w,
        truth: Some(DatasetTruth {
            z,
            params: GeneratingParams {
                beta: cfg.beta_true.clone(),
                gamma: cfg.gamma_true.clone(),
                omega: cfg.omega_true.clone(),
                sigma_eps: cfg.sigma_eps_true.clone(),
                sigma_z2: cfg.sigma_z2,
                sigma_u2,
            },
        }),
        ..dataset_shell
    })
}

/// Raw output of the two-step FGLS fit of `y` on `(X, W)`.
#[derive(Debug, Clone)]
pub struct FglsFit {
    /// Stacked coefficients: the `K` entries of β then the `M` entries of γ.
    pub coef: DVector<f64>,
    pub se: DVector<f64>,
    /// Error covariance estimated from the stage-2 GLS residuals.
    pub sigma_eps: DMatrix<f64>,
}

/// Two-step feasible GLS treating the readings `W` as if they were the true
/// covariate: per-equation OLS residuals estimate `Σ_ε`, then one GLS pass
/// over the stacked system.
pub fn fgls_estimates(data: &SurDataset) -> Result<FglsFit> {
    let n = data.n();
    let m = data.m();
    let k = data.k_total();
    let p = k + m;
    if n <= p {
        return Err(Error::Rank(format!(
            "FGLS needs N > K+M, got N={n} with K+M={p}"
        )));
    }

    // Stage 1: per-equation OLS of y_m on (x_m, w_m).
    let mut resid = DMatrix::zeros(n, m);
    for eq in 0..m {
        let xm = &data.x[eq];
        let km = xm.ncols();
        let mut d = DMatrix::zeros(n, km + 1);
        d.view_mut((0, 0), (n, km)).copy_from(xm);
        d.set_column(km, &data.w.column(eq));
        let dtd = d.transpose() * &d;
        let ch = pd_cholesky(&dtd, &format!("OLS normal equations, equation {}", eq + 1))
            .map_err(|_| Error::Rank(format!("singular design in equation {}", eq + 1)))?;
        let coef = ch.solve(&(d.transpose() * data.y.column(eq)));
        resid.set_column(eq, &(data.y.column(eq) - &d * coef));
    }
    let sigma_stage1 = resid.transpose() * &resid / n as f64;
    let sigma_inv = pd_inverse(&sigma_stage1, "stage-1 residual covariance")?;

    // Stage 2: GLS on the stacked M x (K+M) design [X_i, diag(W_i)].
    let mut a = DMatrix::<f64>::zeros(p, p);
    let mut b = DVector::<f64>::zeros(p);
    let mut d_i = DMatrix::<f64>::zeros(m, p);
    for i in 0..n {
        d_i.fill(0.0);
        let mut col = 0;
        for (eq, xm) in data.x.iter().enumerate() {
            for j in 0..xm.ncols() {
                d_i[(eq, col + j)] = xm[(i, j)];
            }
            col += xm.ncols();
        }
        for eq in 0..m {
            d_i[(eq, k + eq)] = data.w[(i, eq)];
        }
        let dt_si = d_i.transpose() * &sigma_inv;
        a += &dt_si * &d_i;
        let yi = data.y.row(i).transpose();
        b += &dt_si * yi;
    }
    let ch = pd_cholesky(&a, "GLS normal equations")
        .map_err(|_| Error::Rank("singular stacked design".into()))?;
    let coef = ch.solve(&b);
    let cov = ch.inverse();
    let se = DVector::from_fn(p, |j, _| cov[(j, j)].sqrt());

    // Sigma from stage-2 residuals.
    let mut resid2 = DMatrix::zeros(n, m);
    let x_beta = {
        let beta = coef.rows(0, k).into_owned();
        data.x_beta(&beta)
    };
    for i in 0..n {
        for eq in 0..m {
            resid2[(i, eq)] = data.y[(i, eq)] - x_beta[(i, eq)] - data.w[(i, eq)] * coef[k + eq];
        }
    }
    let sigma_eps = resid2.transpose() * &resid2 / n as f64;

    Ok(FglsFit {
        coef,
        se,
        sigma_eps,
    })
}

/// FGLS baseline wrapped into a [`FitReport`] with normal-based 95%
/// confidence intervals (the interval construction is normal rather than t;
/// see the crate README).
pub fn fit_sur_fgls(data: &SurDataset) -> Result<FitReport> {
    let start = std::time::Instant::now();
    let fit = fgls_estimates(data)?;
    let m = data.m();
    let k = data.k();
    let z975 = 1.959_963_984_540_054;

    let mut params = Vec::new();
    let mut idx = 0;
    for (eq, &km) in k.iter().enumerate() {
        for j in 0..km {
            params.push(ParamSummary {
                name: format!("beta_{}_{}", eq + 1, j + 1),
                estimate: fit.coef[idx],
                dispersion: Some(fit.se[idx]),
                lower: fit.coef[idx] - z975 * fit.se[idx],
                upper: fit.coef[idx] + z975 * fit.se[idx],
                interval: IntervalKind::NormalApprox,
            });
            idx += 1;
        }
    }
    for eq in 0..m {
        params.push(ParamSummary {
            name: format!("gamma_{}", eq + 1),
            estimate: fit.coef[idx],
            dispersion: Some(fit.se[idx]),
            lower: fit.coef[idx] - z975 * fit.se[idx],
            upper: fit.coef[idx] + z975 * fit.se[idx],
            interval: IntervalKind::NormalApprox,
        });
        idx += 1;
    }
    for i in 0..m {
        for j in i..m {
            let v = fit.sigma_eps[(i, j)];
            params.push(ParamSummary {
                name: format!("sigma_eps_{}_{}", i + 1, j + 1),
                estimate: v,
                dispersion: None,
                lower: v,
                upper: v,
                interval: IntervalKind::NormalApprox,
            });
        }
    }

    let mut error_correlations = Vec::new();
    for i in 0..m {
        for j in (i + 1)..m {
            error_correlations.push(crate::model::ErrorCorrelation {
                eq_a: i + 1,
                eq_b: j + 1,
                value: fit.sigma_eps[(i, j)]
                    / (fit.sigma_eps[(i, i)] * fit.sigma_eps[(j, j)]).sqrt(),
            });
        }
    }

    let report = FitReport {
        schema: REPORT_SCHEMA.into(),
        method: "fgls".into(),
        params,
        error_correlations,
        reliability_ratio: None,
        diagnostics: None,
        scores: None,
        mfvb: None,
        runtime_seconds: start.elapsed().as_secs_f64(),
        seed: 0,
    };
    report.check()?;
    Ok(report)
}

/// Which estimator a replicated study runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EstimatorKind {
    Fgls,
    GibbsSurme,
    GibbsSur,
    Mfvb,
}

impl EstimatorKind {
    pub fn label(&self) -> &'static str {
        match self {
            EstimatorKind::Fgls => "fgls",
            EstimatorKind::GibbsSurme => "gibbs-surme",
            EstimatorKind::GibbsSur => "gibbs-sur",
            EstimatorKind::Mfvb => "mfvb",
        }
    }
}

/// Estimator settings used inside a study; the defaults mirror the
/// full-length runs (51k draws, 1k burn-in, thinning 100, MFVB tolerance
/// 1e-7).
#[derive(Debug, Clone)]
pub struct StudyOptions {
    pub draws: usize,
    pub burnin: usize,
    pub thin: usize,
    pub mfvb_tol: f64,
    pub mfvb_max_cycles: usize,
}

impl Default for StudyOptions {
    fn default() -> Self {
        StudyOptions {
            draws: 51_000,
            burnin: 1_000,
            thin: 100,
            mfvb_tol: 1e-7,
            mfvb_max_cycles: 5_000,
        }
    }
}

/// Per-parameter averages over study replications.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StudyParam {
    pub name: String,
    pub truth: Option<f64>,
    pub mean_estimate: f64,
    /// `mean_estimate/truth − 1`.
    pub rel_error: Option<f64>,
    pub mean_dispersion: Option<f64>,
    pub mean_lower: f64,
    pub mean_upper: f64,
}

/// Averages over replications of one estimator on one generating process.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StudySummary {
    pub estimator: String,
    pub requested_reps: usize,
    pub completed_reps: usize,
    pub failures: usize,
    pub params: Vec<StudyParam>,
    pub mean_cycles: Option<f64>,
    pub mean_max_elbo: Option<f64>,
    pub mean_runtime_seconds: f64,
}

impl StudySummary {
    pub fn param(&self, name: &str) -> Option<&StudyParam> {
        self.params.iter().find(|p| p.name == name)
    }
}

fn worker_count(reps: usize) -> usize {
    let cap = std::env::var("SURME_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&v| v > 0)
        .unwrap_or_else(|| {
            std::thread::available_parallelism()
                .map(|v| v.get())
                .unwrap_or(1)
        });
    cap.min(reps).max(1)
}

/// Run `reps` independent replications of `estimator` on datasets drawn from
/// `cfg`, averaging the per-parameter summaries. Replication seeds derive
/// deterministically from the master stream, so the summary is
/// bit-reproducible regardless of thread scheduling; estimator failures are
/// recorded and skipped rather than aborting the study.
pub fn replicate_study(
    cfg: &DgpConfig,
    estimator: EstimatorKind,
    reps: usize,
    rng: &RngStream,
    options: &StudyOptions,
) -> Result<StudySummary> {
    if reps == 0 {
        return Err(Error::domain("replicate_study: reps must be at least 1"));
    }
    cfg.validate()?;

    let results: Vec<Option<FitReport>> = {
        let slots: Vec<Mutex<Option<FitReport>>> = (0..reps).map(|_| Mutex::new(None)).collect();
        let next = AtomicUsize::new(0);
        let workers = worker_count(reps);
        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let rep = next.fetch_add(1, Ordering::Relaxed);
                    if rep >= reps {
                        break;
                    }
                    let rep_stream = rng.substream(rep as u64);
                    let mut data_rng = rep_stream.substream(0);
                    let chain_seed = rep_stream.substream(1).seed();
                    let outcome = generate_dataset(cfg, &mut data_rng)
                        .and_then(|data| run_estimator(estimator, &data, chain_seed, options));
                    *slots[rep].lock().unwrap() = outcome.ok();
                });
            }
        });
        slots
            .into_iter()
            .map(|s| s.into_inner().unwrap())
            .collect()
    };

    let completed: Vec<&FitReport> = results.iter().flatten().collect();
    let failures = reps - completed.len();
    if completed.is_empty() {
        return Err(Error::numerical(format!(
            "all {reps} replications failed"
        )));
    }

    let truth = cfg.truth_by_name();
    let template = &completed[0].params;
    let mut params = Vec::with_capacity(template.len());
    for (j, p) in template.iter().enumerate() {
        let n = completed.len() as f64;
        let mean_estimate = completed.iter().map(|r| r.params[j].estimate).sum::<f64>() / n;
        let mean_lower = completed.iter().map(|r| r.params[j].lower).sum::<f64>() / n;
        let mean_upper = completed.iter().map(|r| r.params[j].upper).sum::<f64>() / n;
        let mean_dispersion = if completed.iter().all(|r| r.params[j].dispersion.is_some()) {
            Some(
                completed
                    .iter()
                    .map(|r| r.params[j].dispersion.unwrap())
                    .sum::<f64>()
                    / n,
            )
        } else {
            None
        };
        let t = truth.get(&p.name).copied();
        params.push(StudyParam {
            name: p.name.clone(),
            truth: t,
            mean_estimate,
            rel_error: t.map(|t| mean_estimate / t - 1.0),
            mean_dispersion,
            mean_lower,
            mean_upper,
        });
    }

    let mean_over = |f: &dyn Fn(&FitReport) -> Option<f64>| -> Option<f64> {
        let vals: Vec<f64> = completed.iter().filter_map(|r| f(r)).collect();
        if vals.len() == completed.len() {
            Some(vals.iter().sum::<f64>() / vals.len() as f64)
        } else {
            None
        }
    };

    Ok(StudySummary {
        estimator: estimator.label().into(),
        requested_reps: reps,
        completed_reps: completed.len(),
        failures,
        params,
        mean_cycles: mean_over(&|r| r.mfvb.as_ref().map(|i| i.cycles as f64)),
        mean_max_elbo: mean_over(&|r| r.mfvb.as_ref().map(|i| i.max_elbo)),
        mean_runtime_seconds: completed.iter().map(|r| r.runtime_seconds).sum::<f64>()
            / completed.len() as f64,
    })
}

fn run_estimator(
    estimator: EstimatorKind,
    data: &SurDataset,
    seed: u64,
    options: &StudyOptions,
) -> Result<FitReport> {
    let priors = PriorSpec::vague(data.m(), data.k_total());
    match estimator {
        EstimatorKind::Fgls => fit_sur_fgls(data),
        EstimatorKind::Mfvb => {
            cavi_fit(data, &priors, options.mfvb_tol, options.mfvb_max_cycles).map(|(_, r)| r)
        }
        EstimatorKind::GibbsSurme => {
            let cfg = McmcConfig {
                draws: options.draws,
                burnin: options.burnin,
                thin: options.thin,
                seed,
                store_latent: false,
            };
            gibbs_surme(data, &priors, &cfg).map(|(_, r)| r)
        }
        EstimatorKind::GibbsSur => {
            let cfg = McmcConfig {
                draws: options.draws,
                burnin: options.burnin,
                thin: options.thin,
                seed,
                store_latent: false,
            };
            gibbs_sur(data, &priors, &cfg).map(|(_, r)| r)
        }
    }
}
