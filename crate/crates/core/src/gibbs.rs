//! Gibbs samplers: the measurement-error model (with or without the
//! exposure regression) and the plain Bayesian SUR baseline that treats the
//! readings as an exact covariate.
//!
//! One sweep of the measurement-error sampler draws, in this order,
//!
//! 1. `β  | γ, Σ_ε, Z, y`        — normal, precision `ΣX'Σ⁻¹X + B₀⁻¹`
//! 2. `γ  | β, Σ_ε, Z, y`        — normal, precision `ΣZ'Σ⁻¹Z + G₀⁻¹`
//! 3. `Σ_ε⁻¹ | β, γ, Z, y`       — Wishart, `ν₀+N` df, rate `S₀ + Σ r_i r_i'`
//! 4. `Z̃_i | ·` for every `i`    — normal, shared covariance `M₂`
//! 5. `ω  | Z, σ_Z²` (or `μ`)    — normal
//! 6. `σ_Z² | Z, ω`              — inverse-gamma
//! 7. `σ_u² | Z, W`              — inverse-gamma
//!
//! Steps 1–3 are reduced conditionals (they hold marginally of `ω`, `σ_Z²`,
//! `σ_u²`), so the sweep order above is part of the sampler's contract and
//! is kept fixed. `M₂` in step 4 does not depend on `i` and is factored once
//! per sweep.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::diagnostics::{chain_diagnostics, dic, hpdi, ModelKind};
use crate::model::{
    validate, ErrorCorrelation, FitReport, IntervalKind, LatentMean, ParamState, ParamSummary,
    PriorSpec, SurDataset, REPORT_SCHEMA,
};
use crate::stats::{
    pd_cholesky, pd_inverse, sample_invgamma, sample_mvn_from_precision, sample_wishart, PdMatrix,
    RngStream,
};
use crate::{Error, Result};

/// Chain-length settings.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct McmcConfig {
    /// Total sweeps, including burn-in.
    pub draws: usize,
    pub burnin: usize,
    /// Keep every `thin`-th post-burn-in draw.
    pub thin: usize,
    pub seed: u64,
    /// Store full latent-Z draws instead of only running moments.
    pub store_latent: bool,
}

impl Default for McmcConfig {
    fn default() -> Self {
        // 51,000 sweeps, 1,000 burn-in, thinning 100.
        McmcConfig {
            draws: 51_000,
            burnin: 1_000,
            thin: 100,
            seed: 0,
            store_latent: false,
        }
    }
}

impl McmcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.draws <= self.burnin {
            return Err(Error::domain(format!(
                "McmcConfig: draws ({}) must exceed burn-in ({})",
                self.draws, self.burnin
            )));
        }
        if self.thin == 0 {
            return Err(Error::domain("McmcConfig: thinning factor must be >= 1"));
        }
        Ok(())
    }

    /// Number of retained draws: `floor((draws - burnin)/thin)`.
    pub fn retained(&self) -> usize {
        (self.draws - self.burnin) / self.thin
    }
}

/// Which model a stored chain came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ChainKind {
    SurmeExposure,
    SurmeIntercept,
    Sur,
}

/// Post-burn-in, post-thinning draws plus latent-Z moment accumulators.
#[derive(Debug, Clone)]
pub struct GibbsChain {
    pub kind: ChainKind,
    pub columns: Vec<String>,
    /// Retained draws, one row per draw, aligned with `columns`.
    pub draws: Vec<Vec<f64>>,
    /// Covariate counts per equation, needed to decode rows.
    pub k: Vec<usize>,
    pub m: usize,
    pub z_mean: Option<DMatrix<f64>>,
    pub z_var: Option<DMatrix<f64>>,
    pub z_draws: Option<Vec<DMatrix<f64>>>,
    pub config: McmcConfig,
    pub dataset_digest: u64,
}

impl GibbsChain {
    pub fn retained(&self) -> usize {
        self.draws.len()
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let j = self.column_index(name)?;
        Some(self.draws.iter().map(|row| row[j]).collect())
    }

    pub fn column_mean(&self, name: &str) -> Option<f64> {
        let v = self.column(name)?;
        Some(v.iter().sum::<f64>() / v.len() as f64)
    }

    /// Decode one retained draw into a parameter point (without latent Z).
    pub fn point(&self, row: usize) -> ThetaPoint {
        self.point_from_row(&self.draws[row])
    }

    fn point_from_row(&self, r: &[f64]) -> ThetaPoint {
        let k_total: usize = self.k.iter().sum();
        let m = self.m;
        let mut idx = 0;
        let beta = DVector::from_column_slice(&r[idx..idx + k_total]);
        idx += k_total;
        let gamma = DVector::from_column_slice(&r[idx..idx + m]);
        idx += m;
        let (latent, sigma_z2, sigma_u2) = match self.kind {
            ChainKind::SurmeExposure => {
                let omega = DVector::from_column_slice(&r[idx..idx + k_total]);
                idx += k_total;
                let sz2 = r[idx];
                let su2 = r[idx + 1];
                idx += 2;
                (Some(LatentMean::Exposure { omega: omega.as_slice().to_vec() }), sz2, su2)
            }
            ChainKind::SurmeIntercept => {
                let mu = DVector::from_column_slice(&r[idx..idx + m]);
                idx += m;
                let sz2 = r[idx];
                let su2 = r[idx + 1];
                idx += 2;
                (Some(LatentMean::Intercept { mu: mu.as_slice().to_vec() }), sz2, su2)
            }
            ChainKind::Sur => (None, f64::NAN, f64::NAN),
        };
        let mut sigma = DMatrix::zeros(m, m);
        for i in 0..m {
            for j in i..m {
                sigma[(i, j)] = r[idx];
                sigma[(j, i)] = r[idx];
                idx += 1;
            }
        }
        ThetaPoint {
            beta,
            gamma,
            latent,
            sigma_z2,
            sigma_u2,
            sigma_eps: sigma,
        }
    }

    /// Componentwise posterior mean as a decodable point.
    pub fn posterior_mean_point(&self) -> ThetaPoint {
        let n = self.draws.len() as f64;
        let p = self.columns.len();
        let mut mean = vec![0.0; p];
        for row in &self.draws {
            for j in 0..p {
                mean[j] += row[j];
            }
        }
        for v in &mut mean {
            *v /= n;
        }
        self.point_from_row(&mean)
    }
}

/// One parameter configuration without latent values, as stored in a chain
/// row. `latent` is `None` for plain SUR chains, and the variance components
/// are NaN there.
#[derive(Debug, Clone)]
pub struct ThetaPoint {
    pub beta: DVector<f64>,
    pub gamma: DVector<f64>,
    pub latent: Option<LatentMean>,
    pub sigma_z2: f64,
    pub sigma_u2: f64,
    pub sigma_eps: DMatrix<f64>,
}

/// Column names for a chain of the given kind.
pub fn chain_columns(kind: ChainKind, k: &[usize], m: usize) -> Vec<String> {
    let mut names = Vec::new();
    for (eq, &km) in k.iter().enumerate() {
        for j in 0..km {
            names.push(format!("beta_{}_{}", eq + 1, j + 1));
        }
    }
    for eq in 0..m {
        names.push(format!("gamma_{}", eq + 1));
    }
    match kind {
        ChainKind::SurmeExposure => {
            for (eq, &km) in k.iter().enumerate() {
                for j in 0..km {
                    names.push(format!("omega_{}_{}", eq + 1, j + 1));
                }
            }
            names.push("sigma_z2".into());
            names.push("sigma_u2".into());
        }
        ChainKind::SurmeIntercept => {
            for eq in 0..m {
                names.push(format!("mu_{}", eq + 1));
            }
            names.push("sigma_z2".into());
            names.push("sigma_u2".into());
        }
        ChainKind::Sur => {}
    }
    for i in 0..m {
        for j in i..m {
            names.push(format!("sigma_eps_{}_{}", i + 1, j + 1));
        }
    }
    names
}

// ---------------------------------------------------------------------------
// Conditional updates. Each is exposed with the (state, data, priors, rng)
// signature for direct testing; the drivers below share the same code through
// a thin sweep context.
// ---------------------------------------------------------------------------

struct SweepCtx<'a> {
    data: &'a SurDataset,
    priors: &'a PriorSpec,
    /// Cross products X_m' X_n, cached once.
    xx: Vec<Vec<DMatrix<f64>>>,
    /// Block-diagonal Σ_i X_i' X_i.
    xtx: DMatrix<f64>,
    b0_inv: DMatrix<f64>,
    g0_inv: DMatrix<f64>,
    o0_inv: DMatrix<f64>,
    b0_inv_beta0: DVector<f64>,
    g0_inv_gamma0: DVector<f64>,
    o0_inv_omega0: DVector<f64>,
}

impl<'a> SweepCtx<'a> {
    fn new(data: &'a SurDataset, priors: &'a PriorSpec) -> Result<Self> {
        let m = data.m();
        let mut xx = Vec::with_capacity(m);
        for a in 0..m {
            let mut row = Vec::with_capacity(m);
            for b in 0..m {
                row.push(data.x[a].transpose() * &data.x[b]);
            }
            xx.push(row);
        }
        let b0_inv = pd_inverse(priors.b0.as_matrix(), "B0")?;
        let g0_inv = pd_inverse(priors.g0.as_matrix(), "G0")?;
        let o0_inv = pd_inverse(priors.o0.as_matrix(), "O0")?;
        Ok(SweepCtx {
            data,
            priors,
            xx,
            xtx: data.xtx(),
            b0_inv_beta0: &b0_inv * &priors.beta0,
            g0_inv_gamma0: &g0_inv * &priors.gamma0,
            o0_inv_omega0: &o0_inv * &priors.omega0,
            b0_inv,
            g0_inv,
            o0_inv,
        })
    }

    /// Σ_i X_i' A X_i assembled from the cached cross products.
    fn xtax(&self, a: &DMatrix<f64>) -> DMatrix<f64> {
        let k = self.data.k_total();
        let m = self.data.m();
        let mut out = DMatrix::zeros(k, k);
        let mut row = 0;
        for p in 0..m {
            let kp = self.data.x[p].ncols();
            let mut col = 0;
            for q in 0..m {
                let kq = self.data.x[q].ncols();
                let weight = a[(p, q)];
                let block = &self.xx[p][q];
                for i in 0..kp {
                    for j in 0..kq {
                        out[(row + i, col + j)] += weight * block[(i, j)];
                    }
                }
                col += kq;
            }
            row += kp;
        }
        out
    }

    /// Σ_i X_i' v_i for an N×M matrix of per-observation M-vectors.
    fn xt_rows(&self, v: &DMatrix<f64>) -> DVector<f64> {
        let k = self.data.k_total();
        let mut out = DVector::zeros(k);
        let mut row = 0;
        for (m, xm) in self.data.x.iter().enumerate() {
            out.rows_mut(row, xm.ncols())
                .copy_from(&(xm.transpose() * v.column(m)));
            row += xm.ncols();
        }
        out
    }
}

fn lam_of(sigma_eps: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    pd_inverse(sigma_eps, "sigma_eps")
}

/// `y - Z∘γ` (elementwise latent contribution removed).
fn y_minus_z_gamma(y: &DMatrix<f64>, z: &DMatrix<f64>, gamma: &DVector<f64>) -> DMatrix<f64> {
    let mut out = y.clone();
    for j in 0..y.ncols() {
        for i in 0..y.nrows() {
            out[(i, j)] -= z[(i, j)] * gamma[j];
        }
    }
    out
}

fn beta_step(ctx: &SweepCtx, lam: &DMatrix<f64>, z: &DMatrix<f64>, gamma: &DVector<f64>, rng: &mut RngStream) -> Result<DVector<f64>> {
    let y_star = y_minus_z_gamma(&ctx.data.y, z, gamma);
    let precision = ctx.xtax(lam) + &ctx.b0_inv;
    let rhs = ctx.xt_rows(&(&y_star * lam)) + &ctx.b0_inv_beta0;
    let chol = pd_cholesky(&precision, "B1 precision")?;
    let mean = chol.solve(&rhs);
    Ok(sample_mvn_from_precision(&mean, &chol, rng))
}

fn gamma_step(ctx: &SweepCtx, lam: &DMatrix<f64>, z: &DMatrix<f64>, beta: &DVector<f64>, rng: &mut RngStream) -> Result<DVector<f64>> {
    let m = ctx.data.m();
    let y_tilde = &ctx.data.y - ctx.data.x_beta(beta);
    let ztz = z.transpose() * z;
    let zty = z.transpose() * y_tilde;
    let precision = ztz.component_mul(lam) + &ctx.g0_inv;
    let mut rhs = ctx.g0_inv_gamma0.clone();
    for p in 0..m {
        for q in 0..m {
            rhs[p] += lam[(p, q)] * zty[(p, q)];
        }
    }
    let chol = pd_cholesky(&precision, "G1 precision")?;
    let mean = chol.solve(&rhs);
    Ok(sample_mvn_from_precision(&mean, &chol, rng))
}

fn sigma_eps_step(
    ctx: &SweepCtx,
    z: &DMatrix<f64>,
    beta: &DVector<f64>,
    gamma: &DVector<f64>,
    rng: &mut RngStream,
) -> Result<DMatrix<f64>> {
    let resid = y_minus_z_gamma(&(&ctx.data.y - ctx.data.x_beta(beta)), z, gamma);
    let sse = resid.transpose() * &resid;
    let rate = ctx.priors.s0.as_matrix() + sse;
    let scale = PdMatrix::from_symmetric_parts(pd_inverse(&rate, "S1 rate")?, "S1")?;
    let nu1 = ctx.priors.nu0 + ctx.data.n() as f64;
    let lam = sample_wishart(nu1, &scale, rng)?;
    Ok(pd_inverse(lam.as_matrix(), "sigma_eps draw")?)
}

/// Latent mean `X_i ω` (exposure) or the constant `μ` broadcast over rows.
fn latent_mean_rows(data: &SurDataset, latent: &LatentMean) -> DMatrix<f64> {
    match latent {
        LatentMean::Exposure { omega } => data.x_beta(&DVector::from_column_slice(omega)),
        LatentMean::Intercept { mu } => {
            DMatrix::from_fn(data.n(), data.m(), |_, j| mu[j])
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn z_step(
    ctx: &SweepCtx,
    lam: &DMatrix<f64>,
    beta: &DVector<f64>,
    gamma: &DVector<f64>,
    latent: &LatentMean,
    sigma_z2: f64,
    sigma_u2: f64,
    rng: &mut RngStream,
) -> Result<DMatrix<f64>> {
    let data = ctx.data;
    let (n, m) = (data.n(), data.m());
    let psi = DMatrix::from_fn(m, m, |p, q| gamma[p] * gamma[q] * lam[(p, q)]);
    let mut precision = psi;
    let diag_add = 1.0 / sigma_z2 + 1.0 / sigma_u2;
    for j in 0..m {
        precision[(j, j)] += diag_add;
    }
    // M2 is i-independent: factor once per sweep.
    let chol = pd_cholesky(&precision, "M2 precision")?;

    let resid = &data.y - data.x_beta(beta);
    let prior_mean = latent_mean_rows(data, latent);
    // rhs_i = diag(γ) Λ (y_i - X_i β) + W_i/σ_u² + prior_i/σ_Z², all rows at once
    let mut rhs = resid * lam;
    for j in 0..m {
        for i in 0..n {
            rhs[(i, j)] = gamma[j] * rhs[(i, j)]
                + data.w[(i, j)] / sigma_u2
                + prior_mean[(i, j)] / sigma_z2;
        }
    }
    let means = chol.solve(&rhs.transpose()); // M×N, column i = M_{1,i}
    let noise = DMatrix::from_fn(m, n, |_, _| rng.standard_normal());
    let scaled = chol
        .l()
        .transpose()
        .solve_upper_triangular(&noise)
        .expect("Cholesky factor has positive diagonal");
    Ok((means + scaled).transpose())
}

fn omega_step(ctx: &SweepCtx, z: &DMatrix<f64>, sigma_z2: f64, rng: &mut RngStream) -> Result<DVector<f64>> {
    let precision = &ctx.xtx / sigma_z2 + &ctx.o0_inv;
    let rhs = ctx.xt_rows(z) / sigma_z2 + &ctx.o0_inv_omega0;
    let chol = pd_cholesky(&precision, "Sigma_omega precision")?;
    let mean = chol.solve(&rhs);
    Ok(sample_mvn_from_precision(&mean, &chol, rng))
}

fn mu_step(ctx: &SweepCtx, z: &DMatrix<f64>, sigma_z2: f64, rng: &mut RngStream) -> Result<DVector<f64>> {
    let (n, m) = (ctx.data.n(), ctx.data.m());
    let precision = n as f64 / sigma_z2 + 1.0 / ctx.priors.sigma_mu2;
    let var = 1.0 / precision;
    let mut out = DVector::zeros(m);
    for j in 0..m {
        let sum_z: f64 = z.column(j).sum();
        let mean = var * (sum_z / sigma_z2 + ctx.priors.mu0[j] / ctx.priors.sigma_mu2);
        out[j] = mean + var.sqrt() * rng.standard_normal();
    }
    Ok(out)
}

fn sigma_z2_step(ctx: &SweepCtx, z: &DMatrix<f64>, latent: &LatentMean, rng: &mut RngStream) -> Result<f64> {
    let data = ctx.data;
    let prior_mean = latent_mean_rows(data, latent);
    let sse: f64 = (z - prior_mean).iter().map(|v| v * v).sum();
    let shape = ctx.priors.delta1 + (data.n() * data.m()) as f64 / 2.0;
    sample_invgamma(shape, ctx.priors.delta2 + 0.5 * sse, rng)
}

fn sigma_u2_step(ctx: &SweepCtx, z: &DMatrix<f64>, rng: &mut RngStream) -> Result<f64> {
    let data = ctx.data;
    let sse: f64 = (&data.w - z).iter().map(|v| v * v).sum();
    let shape = ctx.priors.delta3 + (data.n() * data.m()) as f64 / 2.0;
    sample_invgamma(shape, ctx.priors.delta4 + 0.5 * sse, rng)
}

/// Draw `β | γ, Σ_ε, Z, y`.
pub fn update_beta(state: &ParamState, data: &SurDataset, priors: &PriorSpec, rng: &mut RngStream) -> Result<DVector<f64>> {
    let ctx = SweepCtx::new(data, priors)?;
    let lam = lam_of(&state.sigma_eps_matrix())?;
    beta_step(&ctx, &lam, &state.z_matrix(), &state.gamma_vector(), rng)
}

/// Draw `γ | β, Σ_ε, Z, y`.
pub fn update_gamma(state: &ParamState, data: &SurDataset, priors: &PriorSpec, rng: &mut RngStream) -> Result<DVector<f64>> {
    let ctx = SweepCtx::new(data, priors)?;
    let lam = lam_of(&state.sigma_eps_matrix())?;
    gamma_step(&ctx, &lam, &state.z_matrix(), &state.beta_vector(), rng)
}

/// Draw the precision `Σ_ε⁻¹ | β, γ, Z, y` and return the implied
/// covariance.
pub fn update_sigma_eps(state: &ParamState, data: &SurDataset, priors: &PriorSpec, rng: &mut RngStream) -> Result<DMatrix<f64>> {
    let ctx = SweepCtx::new(data, priors)?;
    sigma_eps_step(&ctx, &state.z_matrix(), &state.beta_vector(), &state.gamma_vector(), rng)
}

/// Draw all latent rows `Z̃_i | β, γ, Σ_ε, ω, σ_Z², σ_u², W, y`.
pub fn update_z(state: &ParamState, data: &SurDataset, priors: &PriorSpec, rng: &mut RngStream) -> Result<DMatrix<f64>> {
    let ctx = SweepCtx::new(data, priors)?;
    let lam = lam_of(&state.sigma_eps_matrix())?;
    z_step(
        &ctx,
        &lam,
        &state.beta_vector(),
        &state.gamma_vector(),
        &state.latent_mean,
        state.sigma_z2,
        state.sigma_u2,
        rng,
    )
}

/// Draw `ω | Z, σ_Z²`.
pub fn update_omega(state: &ParamState, data: &SurDataset, priors: &PriorSpec, rng: &mut RngStream) -> Result<DVector<f64>> {
    let ctx = SweepCtx::new(data, priors)?;
    omega_step(&ctx, &state.z_matrix(), state.sigma_z2, rng)
}

/// Draw `μ | Z, σ_Z²` in the no-exposure variant.
pub fn update_mu(state: &ParamState, data: &SurDataset, priors: &PriorSpec, rng: &mut RngStream) -> Result<DVector<f64>> {
    if priors.exposure {
        return Err(Error::domain(
            "update_mu requires a prior specification with exposure = false",
        ));
    }
    let ctx = SweepCtx::new(data, priors)?;
    mu_step(&ctx, &state.z_matrix(), state.sigma_z2, rng)
}

/// Draw `σ_Z² | Z, ω`.
pub fn update_sigma_z2(state: &ParamState, data: &SurDataset, priors: &PriorSpec, rng: &mut RngStream) -> Result<f64> {
    let ctx = SweepCtx::new(data, priors)?;
    sigma_z2_step(&ctx, &state.z_matrix(), &state.latent_mean, rng)
}

/// Draw `σ_u² | Z, W`.
pub fn update_sigma_u2(state: &ParamState, data: &SurDataset, priors: &PriorSpec, rng: &mut RngStream) -> Result<f64> {
    let ctx = SweepCtx::new(data, priors)?;
    sigma_u2_step(&ctx, &state.z_matrix(), rng)
}

// ---------------------------------------------------------------------------
// Drivers
// ---------------------------------------------------------------------------

/// Starting point: coefficients at prior means, `Σ_ε` at its prior mean,
/// the W-residual variance split 80/20 between `σ_Z²` and `σ_u²`, and
/// `Z̃_i = W̃_i`.
fn initial_state(data: &SurDataset, priors: &PriorSpec) -> Result<(DVector<f64>, DVector<f64>, DMatrix<f64>, LatentMean, f64, f64, DMatrix<f64>)> {
    let m = data.m();
    let beta = priors.beta0.clone();
    let gamma = priors.gamma0.clone();
    let denom = (priors.nu0 - m as f64 - 1.0).max(1.0);
    let sigma_eps = priors.s0.as_matrix() / denom;
    let latent = if priors.exposure {
        LatentMean::Exposure {
            omega: priors.omega0.as_slice().to_vec(),
        }
    } else {
        LatentMean::Intercept {
            mu: priors.mu0.as_slice().to_vec(),
        }
    };
    let (sz2, su2) = w_residual_split(data)?;
    Ok((beta, gamma, sigma_eps, latent, sz2, su2, data.w.clone()))
}

/// Pooled variance of the readings after removing each equation's OLS fit on
/// its own covariates, split 80/20 between signal and noise.
pub(crate) fn w_residual_split(data: &SurDataset) -> Result<(f64, f64)> {
    let mut sse = 0.0;
    let mut count = 0.0;
    for (eq, xm) in data.x.iter().enumerate() {
        let xtx = xm.transpose() * xm;
        let chol = pd_cholesky(&xtx, "W initializer normal equations")?;
        let coef = chol.solve(&(xm.transpose() * data.w.column(eq)));
        let resid = data.w.column(eq) - xm * coef;
        sse += resid.norm_squared();
        count += data.n() as f64;
    }
    let v = (sse / count).max(1e-12);
    Ok((0.8 * v, 0.2 * v))
}

struct RunningMoments {
    n: f64,
    mean: DMatrix<f64>,
    m2: DMatrix<f64>,
}

impl RunningMoments {
    fn new(rows: usize, cols: usize) -> Self {
        RunningMoments {
            n: 0.0,
            mean: DMatrix::zeros(rows, cols),
            m2: DMatrix::zeros(rows, cols),
        }
    }

    fn push(&mut self, x: &DMatrix<f64>) {
        self.n += 1.0;
        for j in 0..x.ncols() {
            for i in 0..x.nrows() {
                let d = x[(i, j)] - self.mean[(i, j)];
                self.mean[(i, j)] += d / self.n;
                self.m2[(i, j)] += d * (x[(i, j)] - self.mean[(i, j)]);
            }
        }
    }

    fn variance(&self) -> DMatrix<f64> {
        if self.n > 1.0 {
            &self.m2 / (self.n - 1.0)
        } else {
            DMatrix::zeros(self.m2.nrows(), self.m2.ncols())
        }
    }
}

/// Gibbs sampler for the measurement-error model (steps 1–7; step 5 becomes
/// the `μ` update when the priors drop the exposure regression).
// The prior-mean β initializer is documentation of the starting state; the
// sweep redraws β first, so the assignment is intentionally never read.
#[allow(unused_assignments)]
pub fn gibbs_surme(
    data: &SurDataset,
    priors: &PriorSpec,
    cfg: &McmcConfig,
) -> Result<(GibbsChain, FitReport)> {
    let start = std::time::Instant::now();
    validate(data, priors)?;
    cfg.validate()?;
    let ctx = SweepCtx::new(data, priors)?;
    let mut rng = RngStream::new(cfg.seed);

    let (mut beta, mut gamma, mut sigma_eps, mut latent, mut sz2, mut su2, mut z) =
        initial_state(data, priors)?;

    let kind = if priors.exposure {
        ChainKind::SurmeExposure
    } else {
        ChainKind::SurmeIntercept
    };
    let columns = chain_columns(kind, &data.k(), data.m());
    let mut draws = Vec::with_capacity(cfg.retained());
    let mut z_moments = RunningMoments::new(data.n(), data.m());
    let mut z_draws = cfg.store_latent.then(Vec::new);

    for sweep in 0..cfg.draws {
        let step = |e: Error| match e {
            Error::NotPositiveDefinite { name } => Error::NotPositiveDefinite {
                name: format!("{name} (sweep {sweep})"),
            },
            other => other,
        };
        let lam = lam_of(&sigma_eps).map_err(step)?;
        beta = beta_step(&ctx, &lam, &z, &gamma, &mut rng).map_err(step)?;
        gamma = gamma_step(&ctx, &lam, &z, &beta, &mut rng).map_err(step)?;
        sigma_eps = sigma_eps_step(&ctx, &z, &beta, &gamma, &mut rng).map_err(step)?;
        let lam = lam_of(&sigma_eps).map_err(step)?;
        z = z_step(&ctx, &lam, &beta, &gamma, &latent, sz2, su2, &mut rng).map_err(step)?;
        latent = if priors.exposure {
            LatentMean::Exposure {
                omega: omega_step(&ctx, &z, sz2, &mut rng).map_err(step)?.as_slice().to_vec(),
            }
        } else {
            LatentMean::Intercept {
                mu: mu_step(&ctx, &z, sz2, &mut rng).map_err(step)?.as_slice().to_vec(),
            }
        };
        sz2 = sigma_z2_step(&ctx, &z, &latent, &mut rng).map_err(step)?;
        su2 = sigma_u2_step(&ctx, &z, &mut rng).map_err(step)?;

        if sweep >= cfg.burnin && (sweep - cfg.burnin + 1) % cfg.thin == 0 {
            let mut row = Vec::with_capacity(columns.len());
            row.extend_from_slice(beta.as_slice());
            row.extend_from_slice(gamma.as_slice());
            match &latent {
                LatentMean::Exposure { omega } => row.extend_from_slice(omega),
                LatentMean::Intercept { mu } => row.extend_from_slice(mu),
            }
            row.push(sz2);
            row.push(su2);
            for i in 0..data.m() {
                for j in i..data.m() {
                    row.push(sigma_eps[(i, j)]);
                }
            }
            draws.push(row);
            z_moments.push(&z);
            if let Some(store) = z_draws.as_mut() {
                store.push(z.clone());
            }
        }
    }

    let chain = GibbsChain {
        kind,
        columns,
        draws,
        k: data.k(),
        m: data.m(),
        z_mean: Some(z_moments.mean.clone()),
        z_var: Some(z_moments.variance()),
        z_draws,
        config: *cfg,
        dataset_digest: data.digest(),
    };
    let model = ModelKind::Surme;
    let report = summarize_chain(&chain, data, model, start.elapsed().as_secs_f64())?;
    Ok((chain, report))
}

/// Two-block Bayesian SUR sampler treating the readings as an exact
/// covariate: stacked coefficients given `Σ_ε`, then the Wishart precision
/// update, under the same prior family.
pub fn gibbs_sur(
    data: &SurDataset,
    priors: &PriorSpec,
    cfg: &McmcConfig,
) -> Result<(GibbsChain, FitReport)> {
    let start = std::time::Instant::now();
    validate(data, priors)?;
    cfg.validate()?;
    let (n, m, k) = (data.n(), data.m(), data.k_total());
    let p = k + m;
    let mut rng = RngStream::new(cfg.seed);

    // Stacked prior: theta = (beta, gamma) ~ N((beta0, gamma0), B0 ⊕ G0).
    let b0_inv = pd_inverse(priors.b0.as_matrix(), "B0")?;
    let g0_inv = pd_inverse(priors.g0.as_matrix(), "G0")?;
    let mut t0_inv = DMatrix::zeros(p, p);
    t0_inv.view_mut((0, 0), (k, k)).copy_from(&b0_inv);
    t0_inv.view_mut((k, k), (m, m)).copy_from(&g0_inv);
    let mut prior_rhs = DVector::zeros(p);
    prior_rhs.rows_mut(0, k).copy_from(&(&b0_inv * &priors.beta0));
    prior_rhs.rows_mut(k, m).copy_from(&(&g0_inv * &priors.gamma0));

    let ctx = SweepCtx::new(data, priors)?;
    let wtw = data.w.transpose() * &data.w;

    let denom = (priors.nu0 - m as f64 - 1.0).max(1.0);
    let mut sigma_eps = priors.s0.as_matrix() / denom;

    let columns = chain_columns(ChainKind::Sur, &data.k(), m);
    let mut draws = Vec::with_capacity(cfg.retained());

    for sweep in 0..cfg.draws {
        let step = |e: Error| match e {
            Error::NotPositiveDefinite { name } => Error::NotPositiveDefinite {
                name: format!("{name} (sweep {sweep})"),
            },
            other => other,
        };
        let lam = lam_of(&sigma_eps).map_err(step)?;
        // Precision of the stacked coefficient block:
        // [ ΣX'ΛX       ΣX'Λdiag(W) ]
        // [    ·        Λ ⊙ (W'W)   ]
        let mut precision = DMatrix::zeros(p, p);
        precision.view_mut((0, 0), (k, k)).copy_from(&ctx.xtax(&lam));
        // (Σ_i X_i'Λdiag(W_i)) block for equation eq, column q is
        // Λ_{eq,q} · X_eq' w_{·q}.
        for q in 0..m {
            let mut row = 0;
            for (eq, xm) in data.x.iter().enumerate() {
                let block = (xm.transpose() * data.w.column(q)) * lam[(eq, q)];
                precision
                    .view_mut((row, k + q), (xm.ncols(), 1))
                    .copy_from(&block);
                for j in 0..xm.ncols() {
                    precision[(k + q, row + j)] = block[j];
                }
                row += xm.ncols();
            }
        }
        precision
            .view_mut((k, k), (m, m))
            .copy_from(&wtw.component_mul(&lam));
        precision += &t0_inv;

        // Right-hand side: Σ D_i' Λ y_i + prior part.
        let ylam = &data.y * &lam;
        let xt_ylam = ctx.xt_rows(&ylam);
        let mut rhs = prior_rhs.clone();
        for j in 0..k {
            rhs[j] += xt_ylam[j];
        }
        for q in 0..m {
            let mut acc = 0.0;
            for i in 0..n {
                acc += data.w[(i, q)] * ylam[(i, q)];
            }
            rhs[k + q] += acc;
        }

        let chol = pd_cholesky(&precision, "SUR coefficient precision").map_err(step)?;
        let mean = chol.solve(&rhs);
        let theta = sample_mvn_from_precision(&mean, &chol, &mut rng);

        // Residuals y_i - X_i beta - diag(W_i) gamma, then the Wishart step.
        let beta = theta.rows(0, k).into_owned();
        let gamma = theta.rows(k, m).into_owned();
        let resid = y_minus_z_gamma(&(&data.y - data.x_beta(&beta)), &data.w, &gamma);
        let sse = resid.transpose() * &resid;
        let rate = ctx.priors.s0.as_matrix() + sse;
        let scale =
            PdMatrix::from_symmetric_parts(pd_inverse(&rate, "S1 rate")?, "S1").map_err(step)?;
        let lam_draw = sample_wishart(priors.nu0 + n as f64, &scale, &mut rng).map_err(step)?;
        sigma_eps = pd_inverse(lam_draw.as_matrix(), "sigma_eps draw").map_err(step)?;

        if sweep >= cfg.burnin && (sweep - cfg.burnin + 1) % cfg.thin == 0 {
            let mut row = Vec::with_capacity(columns.len());
            row.extend_from_slice(theta.as_slice());
            for i in 0..m {
                for j in i..m {
                    row.push(sigma_eps[(i, j)]);
                }
            }
            draws.push(row);
        }
    }

    let chain = GibbsChain {
        kind: ChainKind::Sur,
        columns,
        draws,
        k: data.k(),
        m,
        z_mean: None,
        z_var: None,
        z_draws: None,
        config: *cfg,
        dataset_digest: data.digest(),
    };
    let report = summarize_chain(&chain, data, ModelKind::Sur, start.elapsed().as_secs_f64())?;
    Ok((chain, report))
}

/// Posterior means, HPD intervals, per-column diagnostics, derived error
/// correlations and DIC, assembled into a report.
fn summarize_chain(
    chain: &GibbsChain,
    data: &SurDataset,
    model: ModelKind,
    runtime_seconds: f64,
) -> Result<FitReport> {
    if chain.draws.is_empty() {
        return Err(Error::numerical("no retained draws"));
    }
    let mut params = Vec::with_capacity(chain.columns.len());
    for (j, name) in chain.columns.iter().enumerate() {
        let series: Vec<f64> = chain.draws.iter().map(|r| r[j]).collect();
        let n = series.len() as f64;
        let mean = series.iter().sum::<f64>() / n;
        let sd = (series.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0))
            .sqrt();
        let (lower, upper) = hpdi(&series, 0.95)?;
        params.push(ParamSummary {
            name: name.clone(),
            estimate: mean,
            dispersion: Some(sd),
            lower,
            upper,
            interval: IntervalKind::Hpdi,
        });
    }

    let m = chain.m;
    let mut error_correlations = Vec::new();
    for a in 0..m {
        for b in (a + 1)..m {
            let saa = chain.column(&format!("sigma_eps_{}_{}", a + 1, a + 1)).unwrap();
            let sbb = chain.column(&format!("sigma_eps_{}_{}", b + 1, b + 1)).unwrap();
            let sab = chain.column(&format!("sigma_eps_{}_{}", a + 1, b + 1)).unwrap();
            let rho = sab
                .iter()
                .zip(saa.iter().zip(&sbb))
                .map(|(ab, (aa, bb))| ab / (aa * bb).sqrt())
                .sum::<f64>()
                / sab.len() as f64;
            error_correlations.push(ErrorCorrelation {
                eq_a: a + 1,
                eq_b: b + 1,
                value: rho,
            });
        }
    }

    let reliability_ratio = match chain.kind {
        ChainKind::Sur => None,
        _ => {
            let sz = chain.column("sigma_z2").unwrap();
            let su = chain.column("sigma_u2").unwrap();
            Some(
                sz.iter()
                    .zip(&su)
                    .map(|(z, u)| z / (z + u))
                    .sum::<f64>()
                    / sz.len() as f64,
            )
        }
    };

    let diagnostics = Some(chain_diagnostics(chain));
    let scores = Some(dic(chain, data, model)?);

    let report = FitReport {
        schema: REPORT_SCHEMA.into(),
        method: match chain.kind {
            ChainKind::Sur => "gibbs-sur".into(),
            _ => "gibbs-surme".into(),
        },
        params,
        error_correlations,
        reliability_ratio,
        diagnostics,
        scores,
        mfvb: None,
        runtime_seconds,
        seed: chain.config.seed,
    };
    report.check()?;
    Ok(report)
}

#[cfg(test)]
mod tests;
