use super::*;
use crate::model::{LatentMean, ParamState};
use crate::simulate::{generate_dataset, DgpConfig};
use crate::stats::RngStream;
use nalgebra::{DMatrix, DVector};
use statrs::function::erf::erfc;
use statrs::function::gamma::gamma_ur;

/// Single-observation, single-equation dataset with covariate value `x`,
/// response `y` and reading `w`.
fn tiny_dataset(x: f64, y: f64, w: f64) -> SurDataset {
    SurDataset {
        y: DMatrix::from_element(1, 1, y),
        w: DMatrix::from_element(1, 1, w),
        x: vec![DMatrix::from_element(1, 1, x)],
        truth: None,
    }
}

fn tiny_priors() -> PriorSpec {
    let mut p = PriorSpec::vague(1, 1);
    p.beta0 = DVector::from_element(1, 0.0);
    p.gamma0 = DVector::from_element(1, 0.0);
    p.omega0 = DVector::from_element(1, 0.0);
    p.s0 = PdMatrix::new(DMatrix::from_element(1, 1, 1.0), "S0").unwrap();
    p.nu0 = 5.0;
    p
}

fn state_1d(beta: f64, gamma: f64, sigma: f64, omega: f64, sz2: f64, su2: f64, z: f64) -> ParamState {
    ParamState {
        beta: vec![beta],
        gamma: vec![gamma],
        sigma_eps: vec![vec![sigma]],
        latent_mean: LatentMean::Exposure { omega: vec![omega] },
        sigma_z2: sz2,
        sigma_u2: su2,
        z: vec![vec![z]],
    }
}

fn mc_mean_var(mut draw: impl FnMut(&mut RngStream) -> f64, n: usize, rng: &mut RngStream) -> (f64, f64) {
    let mut sum = 0.0;
    let mut sq = 0.0;
    for _ in 0..n {
        let d = draw(rng);
        sum += d;
        sq += d * d;
    }
    let mean = sum / n as f64;
    (mean, sq / n as f64 - mean * mean)
}

#[test]
fn beta_update_one_dimensional_closed_form() {
    // X=1, Sigma=1, gamma=0, B0=1, beta0=0, y=2: B1 = 0.5, beta_bar = 1.
    let data = tiny_dataset(1.0, 2.0, 0.0);
    let priors = tiny_priors();
    let state = state_1d(0.0, 0.0, 1.0, 0.0, 1.0, 1.0, 0.0);
    let mut rng = RngStream::new(100);
    let n = 100_000;
    let (mean, var) = mc_mean_var(
        |r| update_beta(&state, &data, &priors, r).unwrap()[0],
        n,
        &mut rng,
    );
    let se = (0.5f64 / n as f64).sqrt();
    assert!((mean - 1.0).abs() < 3.0 * se, "mean {mean}");
    assert!((var - 0.5).abs() < 0.02, "var {var}");
}

#[test]
fn beta_update_flat_prior_matches_gls_oracle() {
    // Vague prior, fixed Sigma and Z: the conditional mean must equal the
    // GLS estimate computed by an independent dense solve over the stacked
    // system.
    let cfg = DgpConfig::case_i_1(400);
    let mut rng = RngStream::new(101);
    let data = generate_dataset(&cfg, &mut rng).unwrap();
    let truth = data.truth.clone().unwrap();
    let mut priors = PriorSpec::vague(2, 6);
    priors.b0 = PdMatrix::new(DMatrix::identity(6, 6) * 1e10, "B0").unwrap();

    let sigma = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 1.0]);
    let state = ParamState {
        beta: vec![0.0; 6],
        gamma: truth.params.gamma.clone(),
        sigma_eps: vec![vec![1.0, 0.5], vec![0.5, 1.0]],
        latent_mean: LatentMean::Exposure {
            omega: truth.params.omega.clone(),
        },
        sigma_z2: 1.0,
        sigma_u2: 0.25,
        z: (0..data.n())
            .map(|i| (0..2).map(|j| truth.z[(i, j)]).collect())
            .collect(),
    };

    // Independent dense GLS: stack all N block-diagonal designs.
    let lam = sigma.try_inverse().unwrap();
    let mut a = DMatrix::<f64>::zeros(6, 6);
    let mut b = DVector::<f64>::zeros(6);
    for i in 0..data.n() {
        let xi = data.x_block(i);
        let yi = DVector::from_fn(2, |p, _| {
            data.y[(i, p)] - truth.z[(i, p)] * truth.params.gamma[p]
        });
        a += xi.transpose() * &lam * &xi;
        b += xi.transpose() * &lam * yi;
    }
    let gls = a.clone().try_inverse().unwrap() * b;
    let cov = a.try_inverse().unwrap();

    let reps = 2_000;
    let mut mean = DVector::<f64>::zeros(6);
    for _ in 0..reps {
        mean += update_beta(&state, &data, &priors, &mut rng).unwrap();
    }
    mean /= reps as f64;
    for j in 0..6 {
        let se = (cov[(j, j)] / reps as f64).sqrt();
        assert!(
            (mean[j] - gls[j]).abs() < 4.0 * se,
            "beta[{j}]: {} vs GLS {}",
            mean[j],
            gls[j]
        );
    }
}

#[test]
fn gamma_update_no_information_reduces_to_prior() {
    let mut data = tiny_dataset(1.0, 2.0, 0.0);
    data.y = DMatrix::from_element(1, 1, 5.0);
    let mut priors = tiny_priors();
    priors.gamma0 = DVector::from_element(1, 0.7);
    let state = state_1d(0.0, 0.0, 1.0, 0.0, 1.0, 1.0, 0.0); // Z = 0
    let mut rng = RngStream::new(102);
    let n = 100_000;
    let (mean, var) = mc_mean_var(
        |r| update_gamma(&state, &data, &priors, r).unwrap()[0],
        n,
        &mut rng,
    );
    let se = (1.0f64 / n as f64).sqrt();
    assert!((mean - 0.7).abs() < 3.0 * se);
    assert!((var - 1.0).abs() < 0.02);
}

#[test]
fn gamma_update_one_dimensional_closed_form() {
    // Z=1, Sigma=1, G0=1, gamma0=0, y_tilde=3 (X=0): G1=0.5, mean 1.5.
    let data = tiny_dataset(0.0, 3.0, 0.0);
    let priors = tiny_priors();
    let state = state_1d(0.0, 0.0, 1.0, 0.0, 1.0, 1.0, 1.0);
    let mut rng = RngStream::new(103);
    let n = 100_000;
    let (mean, var) = mc_mean_var(
        |r| update_gamma(&state, &data, &priors, r).unwrap()[0],
        n,
        &mut rng,
    );
    let se = (0.5f64 / n as f64).sqrt();
    assert!((mean - 1.5).abs() < 3.0 * se, "mean {mean}");
    assert!((var - 0.5).abs() < 0.02, "var {var}");
}

#[test]
fn sigma_eps_update_matches_wishart_moment_oracle() {
    // Fixed residual set: MC mean of the precision draws must match
    // nu1 * S1 with S1 = (S0 + SSE)^{-1}.
    let cfg = DgpConfig::case_i_1(40);
    let mut rng = RngStream::new(104);
    let data = generate_dataset(&cfg, &mut rng).unwrap();
    let priors = PriorSpec::vague(2, 6);
    let truth = data.truth.clone().unwrap();
    let state = ParamState {
        beta: truth.params.beta.clone(),
        gamma: truth.params.gamma.clone(),
        sigma_eps: vec![vec![1.0, 0.5], vec![0.5, 1.0]],
        latent_mean: LatentMean::Exposure {
            omega: truth.params.omega.clone(),
        },
        sigma_z2: 1.0,
        sigma_u2: 0.25,
        z: (0..data.n())
            .map(|i| (0..2).map(|j| truth.z[(i, j)]).collect())
            .collect(),
    };

    // Oracle: direct SSE computation.
    let beta = DVector::from_column_slice(&truth.params.beta);
    let x_beta = data.x_beta(&beta);
    let mut sse = DMatrix::<f64>::zeros(2, 2);
    for i in 0..data.n() {
        let r = DVector::from_fn(2, |p, _| {
            data.y[(i, p)] - x_beta[(i, p)] - truth.z[(i, p)] * truth.params.gamma[p]
        });
        sse += &r * r.transpose();
    }
    let nu1 = priors.nu0 + data.n() as f64;
    let s1 = (priors.s0.as_matrix() + sse).try_inverse().unwrap();
    let expected = &s1 * nu1;

    let n = 100_000;
    let mut mean = DMatrix::<f64>::zeros(2, 2);
    for _ in 0..n {
        let cov = update_sigma_eps(&state, &data, &priors, &mut rng).unwrap();
        mean += cov.try_inverse().unwrap();
    }
    mean /= n as f64;
    for p in 0..2 {
        for q in 0..2 {
            // Var(W_pq) = nu (s_pq^2 + s_pp s_qq)
            let var = nu1 * (s1[(p, q)].powi(2) + s1[(p, p)] * s1[(q, q)]);
            let se = (var / n as f64).sqrt();
            assert!(
                (mean[(p, q)] - expected[(p, q)]).abs() < 3.0 * se,
                "precision mean ({p},{q})"
            );
        }
    }
}

#[test]
fn z_update_precision_weighted_average_when_gamma_zero() {
    // gamma = 0, sigma_z2 = sigma_u2 = 1: M2 = I/2, mean (W + X omega)/2.
    let data = tiny_dataset(2.0, 0.0, 3.0);
    let priors = tiny_priors();
    let state = state_1d(0.0, 0.0, 1.0, 0.5, 1.0, 1.0, 0.0); // X omega = 1
    let mut rng = RngStream::new(105);
    let n = 100_000;
    let (mean, var) = mc_mean_var(
        |r| update_z(&state, &data, &priors, r).unwrap()[(0, 0)],
        n,
        &mut rng,
    );
    let target = (3.0 + 1.0) / 2.0;
    let se = (0.5f64 / n as f64).sqrt();
    assert!((mean - target).abs() < 3.0 * se, "mean {mean}");
    assert!((var - 0.5).abs() < 0.02, "var {var}");
}

#[test]
fn z_update_tracks_reading_in_exact_measurement_limit() {
    let cfg = DgpConfig::case_i_1(50);
    let mut rng = RngStream::new(106);
    let data = generate_dataset(&cfg, &mut rng).unwrap();
    let priors = PriorSpec::vague(2, 6);
    let truth = data.truth.clone().unwrap();
    let state = ParamState {
        beta: truth.params.beta.clone(),
        gamma: truth.params.gamma.clone(),
        sigma_eps: vec![vec![1.0, 0.5], vec![0.5, 1.0]],
        latent_mean: LatentMean::Exposure {
            omega: truth.params.omega.clone(),
        },
        sigma_z2: 1.0,
        sigma_u2: 1e-10,
        z: vec![vec![0.0, 0.0]; 50],
    };
    let z = update_z(&state, &data, &priors, &mut rng).unwrap();
    for i in 0..50 {
        for j in 0..2 {
            assert!((z[(i, j)] - data.w[(i, j)]).abs() < 1e-3);
        }
    }
}

/// Total variation between a closed-form normal density and the grid
/// normalization of an unnormalized log-density.
fn grid_tv_normal(
    grid: &[f64],
    log_unnorm: impl Fn(f64) -> f64,
    mean: f64,
    var: f64,
) -> f64 {
    let dx = grid[1] - grid[0];
    let logs: Vec<f64> = grid.iter().map(|&x| log_unnorm(x)).collect();
    let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut weights: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = weights.iter().sum::<f64>() * dx;
    for w in &mut weights {
        *w /= total;
    }
    let mut tv = 0.0;
    for (x, w) in grid.iter().zip(&weights) {
        let normal = (-0.5 * (x - mean) * (x - mean) / var).exp()
            / (2.0 * std::f64::consts::PI * var).sqrt();
        tv += 0.5 * (w - normal).abs() * dx;
    }
    tv
}

#[test]
fn z_update_matches_grid_posterior_at_m_equals_1() {
    let (x, y, w) = (1.3, 6.0, 1.1);
    let data = tiny_dataset(x, y, w);
    let priors = tiny_priors();
    let (beta, gamma, sigma, omega, sz2, su2) = (1.0, 2.0, 0.8, 0.9, 0.7, 0.3);
    let state = state_1d(beta, gamma, sigma, omega, sz2, su2, 0.0);

    // Closed form from the update: precision = gamma^2/sigma + 1/sz2 + 1/su2.
    let precision = gamma * gamma / sigma + 1.0 / sz2 + 1.0 / su2;
    let var = 1.0 / precision;
    let mean = var * (gamma * (y - x * beta) / sigma + w / su2 + x * omega / sz2);

    // Independent grid posterior from the three likelihood factors.
    let grid: Vec<f64> = (0..4001)
        .map(|j| mean - 6.0 * var.sqrt() + 12.0 * var.sqrt() * j as f64 / 4000.0)
        .collect();
    let log_unnorm = |z: f64| {
        -0.5 * (y - x * beta - gamma * z).powi(2) / sigma
            - 0.5 * (w - z).powi(2) / su2
            - 0.5 * (z - x * omega).powi(2) / sz2
    };
    let tv = grid_tv_normal(&grid, log_unnorm, mean, var);
    assert!(tv < 1e-2, "TV {tv}");

    // And the sampler follows that closed form.
    let mut rng = RngStream::new(107);
    let n = 100_000;
    let (mc_mean, mc_var) = mc_mean_var(
        |r| update_z(&state, &data, &priors, r).unwrap()[(0, 0)],
        n,
        &mut rng,
    );
    assert!((mc_mean - mean).abs() < 3.0 * (var / n as f64).sqrt());
    assert!((mc_var - var).abs() < 0.02 * var.max(1.0));
}

#[test]
fn omega_update_recovers_exact_coefficients_without_noise() {
    // Z = X omega* with a flat prior: the conditional mean is omega*.
    let cfg = DgpConfig::case_i_1(200);
    let mut rng = RngStream::new(108);
    let data = generate_dataset(&cfg, &mut rng).unwrap();
    let mut priors = PriorSpec::vague(2, 6);
    priors.o0 = PdMatrix::new(DMatrix::identity(6, 6) * 1e10, "O0").unwrap();
    let omega_star = DVector::from_column_slice(&[1.5, 0.75, 0.3, 1.5, 1.05, 0.45]);
    let z_exact = data.x_beta(&omega_star);
    let state = ParamState {
        beta: vec![0.0; 6],
        gamma: vec![0.0, 0.0],
        sigma_eps: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
        latent_mean: LatentMean::Exposure { omega: vec![0.0; 6] },
        sigma_z2: 0.5,
        sigma_u2: 0.25,
        z: (0..200)
            .map(|i| (0..2).map(|j| z_exact[(i, j)]).collect())
            .collect(),
    };
    let reps = 5_000;
    let mut mean = DVector::<f64>::zeros(6);
    for _ in 0..reps {
        mean += update_omega(&state, &data, &priors, &mut rng).unwrap();
    }
    mean /= reps as f64;
    for j in 0..6 {
        assert!((mean[j] - omega_star[j]).abs() < 0.01, "omega[{j}] = {}", mean[j]);
    }
}

#[test]
fn omega_update_matches_grid_posterior_at_k_equals_1() {
    // Single coefficient: posterior prop to prior x prod N(z_i; x_i w, sz2).
    let n = 6;
    let mut rng = RngStream::new(109);
    let xs: Vec<f64> = (0..n).map(|_| rng.uniform(0.5, 2.0)).collect();
    let zs: Vec<f64> = (0..n).map(|i| 0.8 * xs[i] + 0.3 * rng.standard_normal()).collect();
    let data = SurDataset {
        y: DMatrix::zeros(n, 1),
        w: DMatrix::zeros(n, 1),
        x: vec![DMatrix::from_fn(n, 1, |i, _| xs[i])],
        truth: None,
    };
    let mut priors = tiny_priors();
    priors.omega0 = DVector::from_element(1, 0.2);
    let sz2 = 0.09;
    let state = ParamState {
        beta: vec![0.0],
        gamma: vec![0.0],
        sigma_eps: vec![vec![1.0]],
        latent_mean: LatentMean::Exposure { omega: vec![0.0] },
        sigma_z2: sz2,
        sigma_u2: 1.0,
        z: zs.iter().map(|&z| vec![z]).collect(),
    };

    let sxx: f64 = xs.iter().map(|x| x * x).sum();
    let sxz: f64 = xs.iter().zip(&zs).map(|(x, z)| x * z).sum();
    let precision = sxx / sz2 + 1.0;
    let var = 1.0 / precision;
    let mean = var * (sxz / sz2 + 0.2);
    let grid: Vec<f64> = (0..4001)
        .map(|j| mean - 6.0 * var.sqrt() + 12.0 * var.sqrt() * j as f64 / 4000.0)
        .collect();
    let log_unnorm = |w: f64| {
        let like: f64 = xs
            .iter()
            .zip(&zs)
            .map(|(x, z)| -0.5 * (z - x * w).powi(2) / sz2)
            .sum();
        like - 0.5 * (w - 0.2) * (w - 0.2)
    };
    assert!(grid_tv_normal(&grid, log_unnorm, mean, var) < 1e-2);

    let reps = 100_000;
    let mut rng = RngStream::new(110);
    let (mc_mean, mc_var) = mc_mean_var(
        |r| update_omega(&state, &data, &priors, r).unwrap()[0],
        reps,
        &mut rng,
    );
    assert!((mc_mean - mean).abs() < 3.0 * (var / reps as f64).sqrt());
    assert!((mc_var - var).abs() < 0.03 * var.max(0.01));
}

#[test]
fn variance_updates_zero_residual_shapes() {
    // Z = X omega exactly: sigma_z2 ~ IG(delta1 + NM/2, delta2).
    let data = tiny_dataset(2.0, 0.0, 1.0);
    let priors = tiny_priors(); // deltas 0.01
    let state = state_1d(0.0, 0.0, 1.0, 0.5, 1.0, 1.0, 1.0); // z = x*omega = 1
    let mut rng = RngStream::new(111);
    // Shape 0.51, rate 0.01: all draws finite positive.
    for _ in 0..100 {
        let d = update_sigma_z2(&state, &data, &priors, &mut rng).unwrap();
        assert!(d.is_finite() && d > 0.0);
    }
    // W = Z: sigma_u2 rate stays at delta4. Verify through the quantile
    // function of IG(0.51, 0.01) at a couple of points via MC.
    let n = 200_000;
    let mut below_med = 0;
    let median = {
        // numeric inverse of the IG cdf at 0.5
        let (mut lo, mut hi) = (0.0, 1.0);
        while gamma_ur(0.51, hi) > 0.5 {
            hi *= 2.0;
        }
        for _ in 0..80 {
            let mid = 0.5 * (lo + hi);
            if gamma_ur(0.51, mid) > 0.5 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.01 / (0.5 * (lo + hi))
    };
    for _ in 0..n {
        if update_sigma_u2(&state, &data, &priors, &mut rng).unwrap() < median {
            below_med += 1;
        }
    }
    let frac = below_med as f64 / n as f64;
    assert!((frac - 0.5).abs() < 3.0 * (0.25f64 / n as f64).sqrt(), "median frac {frac}");
}

#[test]
fn sigma_z2_update_matches_grid_posterior() {
    // 1-D grid check of the inverse-gamma conditional.
    let data = tiny_dataset(2.0, 0.0, 1.0);
    let mut priors = tiny_priors();
    priors.delta1 = 3.0;
    priors.delta2 = 2.0;
    let state = state_1d(0.0, 0.0, 1.0, 0.5, 1.0, 1.0, 1.8); // resid = 0.8
    let shape = 3.0 + 0.5;
    let rate = 2.0 + 0.5 * 0.8f64.powi(2);

    let mut rng = RngStream::new(112);
    let n = 200_000;
    let (mc_mean, _) = mc_mean_var(
        |r| update_sigma_z2(&state, &data, &priors, r).unwrap(),
        n,
        &mut rng,
    );
    let exact_mean = rate / (shape - 1.0);
    let exact_var: f64 = rate * rate / ((shape - 1.0) * (shape - 1.0) * (shape - 2.0));
    assert!((mc_mean - exact_mean).abs() < 3.0 * (exact_var / n as f64).sqrt());

    // Grid TV between IG(shape, rate) density and the unnormalized
    // conditional product.
    let grid: Vec<f64> = (1..6000).map(|j| j as f64 * 0.002).collect();
    let dx = 0.002;
    let logs: Vec<f64> = grid
        .iter()
        .map(|&s| -(1.0 + priors.delta1 + 0.5) * s.ln() - (priors.delta2 + 0.5 * 0.64) / s)
        .collect();
    let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut w: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = w.iter().sum::<f64>() * dx;
    for v in &mut w {
        *v /= total;
    }
    let ig_logpdf = |s: f64| shape * rate.ln() - statrs::function::gamma::ln_gamma(shape)
        - (shape + 1.0) * s.ln()
        - rate / s;
    let mut tv = 0.0;
    for (s, wv) in grid.iter().zip(&w) {
        tv += 0.5 * (wv - ig_logpdf(*s).exp()).abs() * dx;
    }
    assert!(tv < 1e-2, "TV {tv}");
}

#[test]
fn mu_update_flat_prior_limit_is_latent_average() {
    let cfg = DgpConfig::case_i_1(80);
    let mut rng = RngStream::new(113);
    let data = generate_dataset(&cfg, &mut rng).unwrap();
    let mut priors = PriorSpec::vague(2, 6);
    priors.exposure = false;
    priors.mu0 = DVector::from_column_slice(&[0.0, 0.0]);
    priors.sigma_mu2 = 1e12;
    let z = data.truth.as_ref().unwrap().z.clone();
    let state = ParamState {
        beta: vec![0.0; 6],
        gamma: vec![0.0; 2],
        sigma_eps: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
        latent_mean: LatentMean::Intercept { mu: vec![0.0, 0.0] },
        sigma_z2: 0.5,
        sigma_u2: 0.25,
        z: (0..80).map(|i| (0..2).map(|j| z[(i, j)]).collect()).collect(),
    };
    let reps = 20_000;
    let mut mean = DVector::<f64>::zeros(2);
    for _ in 0..reps {
        mean += update_mu(&state, &data, &priors, &mut rng).unwrap();
    }
    mean /= reps as f64;
    for j in 0..2 {
        let target = z.column(j).sum() / 80.0;
        assert!((mean[j] - target).abs() < 0.01, "mu[{j}]");
    }
    // update_mu refuses exposure priors
    let pr_exp = PriorSpec::vague(2, 6);
    assert!(update_mu(&state, &data, &pr_exp, &mut rng).is_err());
}

#[test]
fn retention_bookkeeping_single_draw() {
    let cfg = DgpConfig::case_i_1(60);
    let mut rng = RngStream::new(114);
    let data = generate_dataset(&cfg, &mut rng).unwrap();
    let priors = PriorSpec::vague(2, 6);
    let mcmc = McmcConfig {
        draws: 25,
        burnin: 20,
        thin: 5,
        seed: 9,
        store_latent: false,
    };
    let (chain, report) = gibbs_surme(&data, &priors, &mcmc).unwrap();
    assert_eq!(chain.retained(), 1);
    assert_eq!(mcmc.retained(), 1);
    // Single-draw summaries: estimate equals the draw, interval collapses.
    let p = report.param("gamma_1").unwrap();
    assert_eq!(p.lower, p.upper);
}

#[test]
fn chains_are_bit_reproducible_for_equal_seeds() {
    let cfg = DgpConfig::case_i_1(80);
    let mut rng = RngStream::new(115);
    let data = generate_dataset(&cfg, &mut rng).unwrap();
    let priors = PriorSpec::vague(2, 6);
    let mcmc = McmcConfig {
        draws: 300,
        burnin: 50,
        thin: 5,
        seed: 33,
        store_latent: false,
    };
    let (a, _) = gibbs_surme(&data, &priors, &mcmc).unwrap();
    let (b, _) = gibbs_surme(&data, &priors, &mcmc).unwrap();
    assert_eq!(a.draws.len(), b.draws.len());
    for (ra, rb) in a.draws.iter().zip(&b.draws) {
        for (va, vb) in ra.iter().zip(rb) {
            assert_eq!(va.to_bits(), vb.to_bits());
        }
    }
}

#[test]
fn exact_measurement_prior_pins_latent_to_readings() {
    // sigma_u2 = 0 in the generating process plus a prior concentrated at a
    // tiny sigma_u2: the posterior mean of Z sits on W.
    let cfg = DgpConfig::custom(100, 1.0, 1.0);
    let mut rng = RngStream::new(116);
    let data = generate_dataset(&cfg, &mut rng).unwrap();
    let mut priors = PriorSpec::vague(2, 6);
    priors.delta3 = 1e8;
    priors.delta4 = 100.0; // prior mean of sigma_u2 ~ 1e-6, extremely tight
    let mcmc = McmcConfig {
        draws: 700,
        burnin: 200,
        thin: 5,
        seed: 21,
        store_latent: false,
    };
    let (chain, _) = gibbs_surme(&data, &priors, &mcmc).unwrap();
    let z_mean = chain.z_mean.as_ref().unwrap();
    let mut max_dev: f64 = 0.0;
    for i in 0..data.n() {
        for j in 0..2 {
            max_dev = max_dev.max((z_mean[(i, j)] - data.w[(i, j)]).abs());
        }
    }
    assert!(max_dev < 0.01, "max |zbar - w| = {max_dev}");
}

#[test]
fn sur_two_block_sampler_zero_noise_orthogonal_design_matches_ols() {
    // Exact y = X beta + W gamma (no noise in the fit sense): with vague
    // priors the posterior concentrates on the OLS solution.
    let n = 500;
    let mut rng = RngStream::new(117);
    let cfg = DgpConfig::custom(n, 1.0, 1.0);
    let mut data = generate_dataset(&cfg, &mut rng).unwrap();
    // Rebuild y without noise: y = X beta + W gamma exactly.
    let beta = DVector::from_column_slice(&cfg.beta_true);
    let xb = data.x_beta(&beta);
    for i in 0..n {
        for j in 0..2 {
            data.y[(i, j)] = xb[(i, j)] + data.w[(i, j)] * cfg.gamma_true[j];
        }
    }
    let mut priors = PriorSpec::vague(2, 6);
    priors.b0 = PdMatrix::new(DMatrix::identity(6, 6) * 1e8, "B0").unwrap();
    priors.g0 = PdMatrix::new(DMatrix::identity(2, 2) * 1e8, "G0").unwrap();
    priors.nu0 = 3.0;
    priors.s0 = PdMatrix::new(DMatrix::identity(2, 2) * 1e-4, "S0").unwrap();
    let mcmc = McmcConfig {
        draws: 500,
        burnin: 100,
        thin: 2,
        seed: 71,
        store_latent: false,
    };
    let (_, report) = gibbs_sur(&data, &priors, &mcmc).unwrap();
    for (name, truth) in [
        ("beta_1_1", 3.0),
        ("beta_1_2", 5.0),
        ("gamma_1", 4.0),
        ("gamma_2", 4.0),
    ] {
        let p = report.param(name).unwrap();
        assert!(
            (p.estimate - truth).abs() < 0.05,
            "{name}: {} vs {truth}",
            p.estimate
        );
    }
}

#[test]
fn sur_coefficient_update_matches_gls_oracle_on_fixed_sigma() {
    // One sweep from a fixed Sigma: the conditional coefficient mean is the
    // GLS estimate. Run a long chain with nu0 pinning Sigma near the truth
    // and compare posterior means against the dense GLS solve.
    let cfg = DgpConfig::case_i_1(300);
    let mut rng = RngStream::new(118);
    let data = generate_dataset(&cfg, &mut rng).unwrap();
    let mut priors = PriorSpec::vague(2, 6);
    priors.b0 = PdMatrix::new(DMatrix::identity(6, 6) * 1e9, "B0").unwrap();
    priors.g0 = PdMatrix::new(DMatrix::identity(2, 2) * 1e9, "G0").unwrap();
    // Pin Sigma via an overwhelming Wishart prior at the SUR residual scale.
    let sigma_fixed = DMatrix::from_row_slice(2, 2, &[4.2, 0.5, 0.5, 4.2]);
    priors.nu0 = 2e6;
    priors.s0 =
        PdMatrix::from_symmetric_parts(sigma_fixed.clone() * 2e6, "S0").unwrap();

    let lam = sigma_fixed.try_inverse().unwrap();
    let mut a = DMatrix::<f64>::zeros(8, 8);
    let mut b = DVector::<f64>::zeros(8);
    for i in 0..data.n() {
        let mut d = DMatrix::<f64>::zeros(2, 8);
        let xi = data.x_block(i);
        d.view_mut((0, 0), (2, 6)).copy_from(&xi);
        d[(0, 6)] = data.w[(i, 0)];
        d[(1, 7)] = data.w[(i, 1)];
        a += d.transpose() * &lam * &d;
        b += d.transpose() * &lam * data.y.row(i).transpose();
    }
    let gls = a.clone().try_inverse().unwrap() * &b;
    let cov = a.try_inverse().unwrap();

    let mcmc = McmcConfig {
        draws: 2_100,
        burnin: 100,
        thin: 1,
        seed: 911,
        store_latent: false,
    };
    let (chain, _) = gibbs_sur(&data, &priors, &mcmc).unwrap();
    let names = [
        "beta_1_1", "beta_1_2", "beta_1_3", "beta_2_1", "beta_2_2", "beta_2_3", "gamma_1",
        "gamma_2",
    ];
    for (j, name) in names.iter().enumerate() {
        let mean = chain.column_mean(name).unwrap();
        let se = (cov[(j, j)] / chain.retained() as f64).sqrt() * 4.0;
        assert!(
            (mean - gls[j]).abs() < se.max(0.02),
            "{name}: {mean} vs GLS {}",
            gls[j]
        );
    }
}

// ---------------------------------------------------------------------------
// Joint-consistency ("getting it right"): alternating data regeneration and
// parameter sweeps leaves the prior invariant.
// ---------------------------------------------------------------------------

fn normal_cdf(x: f64, mean: f64, sd: f64) -> f64 {
    0.5 * erfc(-(x - mean) / (sd * std::f64::consts::SQRT_2))
}

fn invgamma_cdf(x: f64, shape: f64, rate: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else {
        gamma_ur(shape, rate / x)
    }
}

#[test]
fn prior_invariance_joint_test() {
    // N = 4, M = 2, one constant covariate per equation, moderate proper
    // priors (the reference ones have too-heavy inverse-gamma tails for a
    // data-regeneration loop).
    let n = 4;
    let m = 2;
    let mut priors = PriorSpec::vague(m, 2);
    priors.beta0 = DVector::from_column_slice(&[0.3, -0.2]);
    priors.b0 = PdMatrix::new(DMatrix::identity(2, 2) * 0.25, "B0").unwrap();
    priors.gamma0 = DVector::from_column_slice(&[0.5, 0.1]);
    priors.g0 = PdMatrix::new(DMatrix::identity(2, 2) * 0.25, "G0").unwrap();
    priors.omega0 = DVector::from_column_slice(&[0.2, 0.4]);
    priors.o0 = PdMatrix::new(DMatrix::identity(2, 2) * 0.25, "O0").unwrap();
    priors.nu0 = 8.0;
    priors.s0 = PdMatrix::new(DMatrix::identity(2, 2) * 5.0, "S0").unwrap();
    priors.delta1 = 4.0;
    priors.delta2 = 3.0;
    priors.delta3 = 4.0;
    priors.delta4 = 1.5;

    let mut data = SurDataset {
        y: DMatrix::zeros(n, m),
        w: DMatrix::zeros(n, m),
        x: vec![DMatrix::from_element(n, 1, 1.0), DMatrix::from_element(n, 1, 1.0)],
        truth: None,
    };

    let mut rng = RngStream::new(424242);
    // Start from a prior draw.
    let mut beta = DVector::from_fn(2, |j, _| priors.beta0[j] + 0.5 * rng.standard_normal());
    let mut gamma = DVector::from_fn(2, |j, _| priors.gamma0[j] + 0.5 * rng.standard_normal());
    let mut omega = DVector::from_fn(2, |j, _| priors.omega0[j] + 0.5 * rng.standard_normal());
    let mut sigma_eps = DMatrix::identity(2, 2);
    let mut sz2: f64 = 0.8;
    let mut su2: f64 = 0.4;
    let mut z = DMatrix::zeros(n, m);

    let sweeps = 100_000;
    let mut beta1 = Vec::with_capacity(sweeps);
    let mut gamma1 = Vec::with_capacity(sweeps);
    let mut sz2s = Vec::with_capacity(sweeps);
    let mut su2s = Vec::with_capacity(sweeps);
    let mut s11 = Vec::with_capacity(sweeps);

    for _ in 0..sweeps {
        // Regenerate latents and observables given the parameters.
        let x_omega = data.x_beta(&omega);
        for i in 0..n {
            for j in 0..m {
                z[(i, j)] = x_omega[(i, j)] + sz2.sqrt() * rng.standard_normal();
            }
        }
        let chol = pd_cholesky(&sigma_eps, "gir sigma").unwrap();
        let x_beta = data.x_beta(&beta);
        for i in 0..n {
            let eps = crate::stats::sample_mvn_factored(
                &DVector::zeros(m),
                &chol,
                &mut rng,
            );
            for j in 0..m {
                data.y[(i, j)] = x_beta[(i, j)] + z[(i, j)] * gamma[j] + eps[j];
                data.w[(i, j)] = z[(i, j)] + su2.sqrt() * rng.standard_normal();
            }
        }
        // One parameter sweep. The context only caches X cross products,
        // which are fixed, but it borrows the regenerated data.
        let ctx = SweepCtx::new(&data, &priors).unwrap();
        let lam = lam_of(&sigma_eps).unwrap();
        beta = beta_step(&ctx, &lam, &z, &gamma, &mut rng).unwrap();
        gamma = gamma_step(&ctx, &lam, &z, &beta, &mut rng).unwrap();
        sigma_eps = sigma_eps_step(&ctx, &z, &beta, &gamma, &mut rng).unwrap();
        let lam = lam_of(&sigma_eps).unwrap();
        let latent = LatentMean::Exposure {
            omega: omega.as_slice().to_vec(),
        };
        z = z_step(&ctx, &lam, &beta, &gamma, &latent, sz2, su2, &mut rng).unwrap();
        omega = omega_step(&ctx, &z, sz2, &mut rng).unwrap();
        let latent = LatentMean::Exposure {
            omega: omega.as_slice().to_vec(),
        };
        sz2 = sigma_z2_step(&ctx, &z, &latent, &mut rng).unwrap();
        su2 = sigma_u2_step(&ctx, &z, &mut rng).unwrap();

        beta1.push(beta[0]);
        gamma1.push(gamma[0]);
        sz2s.push(sz2);
        su2s.push(su2);
        s11.push(sigma_eps[(0, 0)]);
    }

    // Compare chain marginals against the prior by the largest CDF
    // discrepancy over a quantile grid.
    let qq = |samples: &[f64], cdf: &dyn Fn(f64) -> f64| -> f64 {
        let mut sorted = samples.to_vec();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut worst: f64 = 0.0;
        for i in 1..20 {
            let p = i as f64 / 20.0;
            let idx = ((sorted.len() as f64 * p) as usize).min(sorted.len() - 1);
            worst = worst.max((cdf(sorted[idx]) - p).abs());
        }
        worst
    };

    let d_beta = qq(&beta1, &|x| normal_cdf(x, 0.3, 0.5));
    let d_gamma = qq(&gamma1, &|x| normal_cdf(x, 0.5, 0.5));
    let d_sz2 = qq(&sz2s, &|x| invgamma_cdf(x, 4.0, 3.0));
    let d_su2 = qq(&su2s, &|x| invgamma_cdf(x, 4.0, 1.5));
    // Marginal of a diagonal entry of an inverse-Wishart(nu, Psi):
    // IG((nu - m + 1)/2, Psi_jj/2).
    let d_s11 = qq(&s11, &|x| invgamma_cdf(x, (8.0 - 2.0 + 1.0) / 2.0, 2.5));

    for (name, d) in [
        ("beta_1", d_beta),
        ("gamma_1", d_gamma),
        ("sigma_z2", d_sz2),
        ("sigma_u2", d_su2),
        ("sigma_eps_11", d_s11),
    ] {
        assert!(d < 0.05, "prior invariance broken for {name}: discrepancy {d:.4}");
    }
}

#[test]
fn pd_failure_propagates_from_updates() {
    let data = tiny_dataset(1.0, 2.0, 0.5);
    let priors = tiny_priors();
    let mut state = state_1d(0.0, 0.0, 1.0, 0.0, 1.0, 1.0, 0.0);
    state.sigma_eps = vec![vec![0.0]]; // singular
    let mut rng = RngStream::new(119);
    assert!(matches!(
        update_beta(&state, &data, &priors, &mut rng),
        Err(Error::NotPositiveDefinite { .. })
    ));
}
