//! Chain-quality statistics, thinning optimization, interval construction
//! and deviance-based model comparison.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::gibbs::{ChainKind, GibbsChain, ThetaPoint};
use crate::model::{LatentMean, SurDataset};
use crate::stats::pd_cholesky;
use crate::{Error, Result};

/// Per-parameter chain diagnostics. `inefficiency` and the Geweke fields are
/// absent when the chain is too short for the estimator (fewer than 100 and
/// 200 retained draws respectively).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChainDiag {
    pub name: String,
    /// Sample autocorrelations at lags `1..=rho.len()`.
    pub rho: Vec<f64>,
    pub inefficiency: Option<f64>,
    pub cd_stat: Option<f64>,
    pub cd_pvalue: Option<f64>,
    pub length: usize,
    pub thin: usize,
}

/// Deviance-based model comparison scores; `dic = mean_deviance + p_d` by
/// construction.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ModelScore {
    pub dic: f64,
    pub p_d: f64,
    pub mean_deviance: f64,
    pub deviance_at_mean: f64,
}

/// Which deviance a chain is scored under.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    /// Latent-covariate model: deviance of `y | W` with `Z` integrated out.
    Surme,
    /// Plain SUR likelihood of `y` with the readings as an exact covariate.
    Sur,
}

/// Sample autocorrelation at the given lag.
pub fn autocorrelation(draws: &[f64], lag: usize) -> Result<f64> {
    let n = draws.len();
    if lag >= n {
        return Err(Error::domain(format!(
            "autocorrelation: lag {lag} must be below the chain length {n}"
        )));
    }
    let mean = draws.iter().sum::<f64>() / n as f64;
    let denom: f64 = draws.iter().map(|v| (v - mean).powi(2)).sum();
    if denom == 0.0 {
        return Err(Error::domain("autocorrelation: constant chain"));
    }
    let num: f64 = (0..n - lag)
        .map(|t| (draws[t] - mean) * (draws[t + lag] - mean))
        .sum();
    Ok(num / denom)
}

/// Inefficiency factor `1 + 2 Σ ρ_τ`, with the summation window chosen by
/// Geyer's initial monotone positive sequence over lag pairs
/// `Γ_k = ρ_{2k} + ρ_{2k+1}`.
pub fn inefficiency_factor(draws: &[f64]) -> Result<f64> {
    let n = draws.len();
    if n < 100 {
        return Err(Error::domain(format!(
            "inefficiency_factor: need at least 100 draws, got {n}"
        )));
    }
    let mean = draws.iter().sum::<f64>() / n as f64;
    let denom: f64 = draws.iter().map(|v| (v - mean).powi(2)).sum();
    if denom == 0.0 {
        return Err(Error::domain("inefficiency_factor: constant chain"));
    }
    let max_lag = n / 2;
    let rho = |lag: usize| -> f64 {
        let num: f64 = (0..n - lag)
            .map(|t| (draws[t] - mean) * (draws[t + lag] - mean))
            .sum();
        num / denom
    };
    // Gamma_0 = rho_0 + rho_1, Gamma_k = rho_2k + rho_{2k+1}; keep while
    // positive, enforce monotone nonincreasing, then IF = -1 + 2 Σ Gamma.
    let mut total = 0.0;
    let mut prev = f64::INFINITY;
    let mut k = 0;
    loop {
        let lo = 2 * k;
        let hi = 2 * k + 1;
        if hi > max_lag {
            break;
        }
        let g = rho(lo) + rho(hi);
        if g <= 0.0 {
            break;
        }
        let g = g.min(prev);
        total += g;
        prev = g;
        k += 1;
    }
    Ok(-1.0 + 2.0 * total)
}

/// Geweke's convergence diagnostic: z-test of equal means between the first
/// 10% and last 50% of the chain, with segment variances from
/// Bartlett-tapered spectral density estimates at frequency zero.
/// Returns `(statistic, two-sided p-value)`.
pub fn geweke_cd(draws: &[f64]) -> Result<(f64, f64)> {
    let n = draws.len();
    if n < 200 {
        return Err(Error::domain(format!(
            "geweke_cd: need at least 200 draws, got {n}"
        )));
    }
    let a = &draws[..n / 10];
    let b = &draws[n - n / 2..];
    let va = spectral_zero(a) / a.len() as f64;
    let vb = spectral_zero(b) / b.len() as f64;
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    let denom = (va + vb).sqrt();
    if denom == 0.0 {
        return Err(Error::domain("geweke_cd: zero variance segments"));
    }
    let z = (mean(a) - mean(b)) / denom;
    let p = erfc(z.abs() / std::f64::consts::SQRT_2);
    Ok((z, p))
}

/// Spectral density at zero with a Bartlett window over 4% of the segment.
fn spectral_zero(seg: &[f64]) -> f64 {
    let n = seg.len();
    let mean = seg.iter().sum::<f64>() / n as f64;
    let gamma = |lag: usize| -> f64 {
        (0..n - lag)
            .map(|t| (seg[t] - mean) * (seg[t + lag] - mean))
            .sum::<f64>()
            / n as f64
    };
    let window = ((0.04 * n as f64) as usize).max(1).min(n - 1);
    let mut s = gamma(0);
    for lag in 1..=window {
        let w = 1.0 - lag as f64 / (window as f64 + 1.0);
        s += 2.0 * w * gamma(lag);
    }
    s.max(0.0)
}

/// Thinning factor minimizing cost-weighted variance per retained draw under
/// an AR(1) autocorrelation model: `(k + cost_ratio)·(1+ρ₁ᵏ)/(1−ρ₁ᵏ)`.
///
/// The scan is exact: since the variance factor is at least 1, no `k` with
/// `k + cost_ratio` above the best objective so far can win, which bounds
/// the search.
pub fn optimal_thinning(rho1: f64, cost_ratio: f64) -> Result<usize> {
    if !(0.0..1.0).contains(&rho1) {
        return Err(Error::domain(format!(
            "optimal_thinning: rho1 must lie in [0, 1), got {rho1}"
        )));
    }
    if cost_ratio <= 0.0 {
        return Err(Error::domain(format!(
            "optimal_thinning: cost_ratio must be positive, got {cost_ratio}"
        )));
    }
    let objective = |k: usize| -> f64 {
        let r = rho1.powi(k as i32);
        (k as f64 + cost_ratio) * (1.0 + r) / (1.0 - r)
    };
    let mut best_k = 1;
    let mut best = objective(1);
    let mut k = 2;
    while (k as f64 + cost_ratio) <= best {
        let j = objective(k);
        if j < best {
            best = j;
            best_k = k;
        }
        k += 1;
    }
    Ok(best_k)
}

/// Shortest interval containing `ceil(prob·n)` of the sorted draws; ties
/// break toward the lower start index.
pub fn hpdi(draws: &[f64], prob: f64) -> Result<(f64, f64)> {
    if draws.is_empty() {
        return Err(Error::domain("hpdi: empty draw vector"));
    }
    if !(0.0 < prob && prob < 1.0) {
        return Err(Error::domain(format!(
            "hpdi: prob must lie in (0, 1), got {prob}"
        )));
    }
    let mut sorted = draws.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sorted.len();
    let h = ((prob * n as f64).ceil() as usize).clamp(1, n);
    let mut best = (sorted[0], sorted[h - 1]);
    let mut width = best.1 - best.0;
    for start in 1..=(n - h) {
        let w = sorted[start + h - 1] - sorted[start];
        if w < width {
            width = w;
            best = (sorted[start], sorted[start + h - 1]);
        }
    }
    Ok(best)
}

/// Gaussian-kernel density with Silverman's bandwidth on an equally spaced
/// grid spanning the draws ± 3 bandwidths, rescaled so its trapezoid
/// integral is exactly 1. Large inputs are linearly binned first (the
/// approximation error is far below the kernel smoothing error).
pub fn kde_density(draws: &[f64], grid_size: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if draws.len() < 2 {
        return Err(Error::domain("kde_density: need at least 2 draws"));
    }
    if grid_size < 2 {
        return Err(Error::domain("kde_density: grid_size must be at least 2"));
    }
    let n = draws.len() as f64;
    let mean = draws.iter().sum::<f64>() / n;
    let sd = (draws.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let mut sorted = draws.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let q = |p: f64| -> f64 {
        let idx = (p * (sorted.len() - 1) as f64).round() as usize;
        sorted[idx]
    };
    let iqr = q(0.75) - q(0.25);
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    let bandwidth = 0.9 * spread * n.powf(-0.2);
    if !(bandwidth > 0.0) {
        return Err(Error::domain(
            "kde_density: zero bandwidth (all draws equal)",
        ));
    }

    let lo = sorted[0] - 3.0 * bandwidth;
    let hi = sorted[sorted.len() - 1] + 3.0 * bandwidth;
    let grid: Vec<f64> = (0..grid_size)
        .map(|j| lo + (hi - lo) * j as f64 / (grid_size - 1) as f64)
        .collect();

    let norm = 1.0 / (n * bandwidth * (2.0 * std::f64::consts::PI).sqrt());
    let eval_from = |points: &[(f64, f64)], x: f64| -> f64 {
        let mut acc = 0.0;
        for &(p, wgt) in points {
            let t = (x - p) / bandwidth;
            if t.abs() < 8.0 {
                acc += wgt * (-0.5 * t * t).exp();
            }
        }
        acc * norm
    };

    let weighted: Vec<(f64, f64)> = if draws.len() <= 20_000 {
        draws.iter().map(|&v| (v, 1.0)).collect()
    } else {
        // Linear binning: each draw splits its weight between the two
        // neighboring bin centers.
        let bins = 8192;
        let step = (hi - lo) / (bins - 1) as f64;
        let mut weights = vec![0.0f64; bins];
        for &v in draws {
            let pos = (v - lo) / step;
            let j = (pos.floor() as usize).min(bins - 2);
            let frac = pos - j as f64;
            weights[j] += 1.0 - frac;
            weights[j + 1] += frac;
        }
        weights
            .iter()
            .enumerate()
            .filter(|(_, &w)| w > 0.0)
            .map(|(j, &w)| (lo + j as f64 * step, w))
            .collect()
    };

    let mut density: Vec<f64> = grid.iter().map(|&x| eval_from(&weighted, x)).collect();
    let dx = (hi - lo) / (grid_size - 1) as f64;
    let mut integral = 0.0;
    for j in 1..grid_size {
        integral += 0.5 * (density[j - 1] + density[j]) * dx;
    }
    if integral <= 0.0 {
        return Err(Error::numerical("kde_density: degenerate density"));
    }
    for d in &mut density {
        *d /= integral;
    }
    Ok((grid, density))
}

// ---------------------------------------------------------------------------
// Likelihoods and DIC
// ---------------------------------------------------------------------------

fn latent_mean_rows(data: &SurDataset, latent: &LatentMean) -> DMatrix<f64> {
    match latent {
        LatentMean::Exposure { omega } => data.x_beta(&DVector::from_column_slice(omega)),
        LatentMean::Intercept { mu } => DMatrix::from_fn(data.n(), data.m(), |_, j| mu[j]),
    }
}

/// Joint log-likelihood of the observables `(y_i, W̃_i)` with the latent
/// covariate integrated out: each pair is `2M`-dimensional normal with
///
/// ```text
/// mean  ( X_i β + diag(γ) X_i ω ,  X_i ω )
/// cov   [ σ_Z² diag(γ)² + Σ_ε     σ_Z² diag(γ)      ]
///       [ σ_Z² diag(γ)           (σ_Z² + σ_u²) I_M  ]
/// ```
pub fn integrated_loglik(params: &ThetaPoint, data: &SurDataset) -> Result<f64> {
    let latent = params.latent.as_ref().ok_or_else(|| {
        Error::domain("integrated_loglik: parameter point carries no latent model")
    })?;
    let m = data.m();
    let two_m = 2 * m;
    let gamma = &params.gamma;
    let sz2 = params.sigma_z2;
    let su2 = params.sigma_u2;

    let mut cov = DMatrix::zeros(two_m, two_m);
    for p in 0..m {
        for q in 0..m {
            cov[(p, q)] = params.sigma_eps[(p, q)];
        }
        cov[(p, p)] += sz2 * gamma[p] * gamma[p];
        cov[(p, m + p)] = sz2 * gamma[p];
        cov[(m + p, p)] = sz2 * gamma[p];
        cov[(m + p, m + p)] = sz2 + su2;
    }
    let chol = pd_cholesky(&cov, "integrated likelihood covariance")?;
    let log_det = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();

    let x_beta = data.x_beta(&params.beta);
    let w_mean = latent_mean_rows(data, latent);
    let half_log_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();

    let mut total = 0.0;
    let mut resid = DVector::zeros(two_m);
    for i in 0..data.n() {
        for p in 0..m {
            resid[p] = data.y[(i, p)] - x_beta[(i, p)] - gamma[p] * w_mean[(i, p)];
            resid[m + p] = data.w[(i, p)] - w_mean[(i, p)];
        }
        let sol = chol.solve(&resid);
        let quad = resid.dot(&sol);
        total += -(two_m as f64) * half_log_2pi - 0.5 * log_det - 0.5 * quad;
    }
    Ok(total)
}

/// Log-likelihood of `y` given the readings under the latent-covariate
/// model, with `Z` integrated out of the conditional: `Z̃_i | W̃_i` is normal
/// with precision `1/σ_Z² + 1/σ_u²`, so
///
/// ```text
/// y_i | W̃_i ~ N( X_i β + diag(γ) m_i ,  v diag(γ)² + Σ_ε ),
/// m_i = v (W̃_i/σ_u² + X_i ω/σ_Z²),   v = (1/σ_Z² + 1/σ_u²)⁻¹
/// ```
///
/// This scores the same observable as the plain SUR likelihood, which makes
/// the two models' deviances comparable.
pub fn surme_conditional_loglik(params: &ThetaPoint, data: &SurDataset) -> Result<f64> {
    let latent = params.latent.as_ref().ok_or_else(|| {
        Error::domain("surme_conditional_loglik: parameter point carries no latent model")
    })?;
    let m = data.m();
    let gamma = &params.gamma;
    let sz2 = params.sigma_z2;
    let su2 = params.sigma_u2;
    let v = 1.0 / (1.0 / sz2 + 1.0 / su2);

    let mut cov = params.sigma_eps.clone();
    for p in 0..m {
        cov[(p, p)] += v * gamma[p] * gamma[p];
    }
    let chol = pd_cholesky(&cov, "conditional likelihood covariance")?;
    let log_det = 2.0 * chol.l().diagonal().iter().map(|x| x.ln()).sum::<f64>();

    let x_beta = data.x_beta(&params.beta);
    let w_mean = latent_mean_rows(data, latent);
    let half_log_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();

    let mut total = 0.0;
    let mut resid = DVector::zeros(m);
    for i in 0..data.n() {
        for p in 0..m {
            let post_mean = v * (data.w[(i, p)] / su2 + w_mean[(i, p)] / sz2);
            resid[p] = data.y[(i, p)] - x_beta[(i, p)] - gamma[p] * post_mean;
        }
        let sol = chol.solve(&resid);
        total += -(m as f64) * half_log_2pi - 0.5 * log_det - 0.5 * resid.dot(&sol);
    }
    Ok(total)
}

/// Plain SUR log-likelihood of `y` with the readings treated as an exact
/// covariate.
pub fn sur_loglik(
    beta: &DVector<f64>,
    gamma: &DVector<f64>,
    sigma_eps: &DMatrix<f64>,
    data: &SurDataset,
) -> Result<f64> {
    let m = data.m();
    let chol = pd_cholesky(sigma_eps, "SUR likelihood covariance")?;
    let log_det = 2.0 * chol.l().diagonal().iter().map(|x| x.ln()).sum::<f64>();
    let x_beta = data.x_beta(beta);
    let half_log_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
    let mut total = 0.0;
    let mut resid = DVector::zeros(m);
    for i in 0..data.n() {
        for p in 0..m {
            resid[p] = data.y[(i, p)] - x_beta[(i, p)] - gamma[p] * data.w[(i, p)];
        }
        let sol = chol.solve(&resid);
        total += -(m as f64) * half_log_2pi - 0.5 * log_det - 0.5 * resid.dot(&sol);
    }
    Ok(total)
}

fn deviance(point: &ThetaPoint, data: &SurDataset, model: ModelKind) -> Result<f64> {
    let ll = match model {
        ModelKind::Surme => surme_conditional_loglik(point, data)?,
        ModelKind::Sur => sur_loglik(&point.beta, &point.gamma, &point.sigma_eps, data)?,
    };
    Ok(-2.0 * ll)
}

/// Deviance information criterion over the retained draws:
/// `D̄ = mean deviance`, `p_D = D̄ − D(θ̄)` at the componentwise posterior
/// mean (with `Σ_ε` averaged on the covariance scale), `DIC = D̄ + p_D`.
///
/// The latent-covariate model is scored on the `y | W` integrated
/// likelihood so that its deviance is comparable with the plain SUR one.
pub fn dic(chain: &GibbsChain, data: &SurDataset, model: ModelKind) -> Result<ModelScore> {
    if chain.draws.is_empty() {
        return Err(Error::domain("dic: empty chain"));
    }
    match (model, chain.kind) {
        (ModelKind::Sur, ChainKind::Sur) => {}
        (ModelKind::Surme, ChainKind::SurmeExposure | ChainKind::SurmeIntercept) => {}
        _ => {
            return Err(Error::domain(
                "dic: chain kind does not match the requested model",
            ))
        }
    }
    let mut mean_deviance = 0.0;
    for row in 0..chain.draws.len() {
        mean_deviance += deviance(&chain.point(row), data, model)?;
    }
    mean_deviance /= chain.draws.len() as f64;
    let deviance_at_mean = deviance(&chain.posterior_mean_point(), data, model)?;
    let p_d = mean_deviance - deviance_at_mean;
    Ok(ModelScore {
        dic: mean_deviance + p_d,
        p_d,
        mean_deviance,
        deviance_at_mean,
    })
}

/// Diagnostics for a single named draw sequence. Lag cap is
/// `min(25, length/4)`.
pub fn series_diagnostics(name: &str, series: &[f64], thin: usize) -> ChainDiag {
    let len = series.len();
    let cap = (len / 4).min(25).max(1);
    let rho: Vec<f64> = (1..=cap.min(len.saturating_sub(1)))
        .map(|lag| autocorrelation(series, lag).unwrap_or(f64::NAN))
        .collect();
    let cd = geweke_cd(series).ok();
    ChainDiag {
        name: name.into(),
        rho,
        inefficiency: inefficiency_factor(series).ok(),
        cd_stat: cd.map(|c| c.0),
        cd_pvalue: cd.map(|c| c.1),
        length: len,
        thin,
    }
}

/// Diagnostics for every column of a chain.
pub fn chain_diagnostics(chain: &GibbsChain) -> Vec<ChainDiag> {
    chain
        .columns
        .iter()
        .enumerate()
        .map(|(j, name)| {
            let series: Vec<f64> = chain.draws.iter().map(|r| r[j]).collect();
            series_diagnostics(name, &series, chain.config.thin)
        })
        .collect()
}
