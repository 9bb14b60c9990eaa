//! Estimation of seemingly unrelated regression (SUR) systems whose
//! covariates are observed with classical structural measurement error.
//!
//! The observed data per subject `i` are responses `y_i` (one per equation),
//! error-free covariates `x_mi` and a noisy reading `w_mi` of a latent
//! covariate `z_mi`:
//!
//! ```text
//! y_i = X_i β + Z_i γ + ε_i,          ε_i ~ N(0, Σ_ε)
//! W̃_i = Z̃_i + ũ_i,                    ũ_i ~ N(0, σ_u² I_M)
//! Z̃_i = X_i ω + ε̃_zi,                 ε̃_zi ~ N(0, σ_Z² I_M)
//! ```
//!
//! Two estimators are provided for the full model — a Gibbs sampler
//! ([`gibbs::gibbs_surme`]) and a deterministic coordinate-ascent
//! variational approximation ([`mfvb::cavi_fit`]) — plus two baselines that
//! ignore the measurement error: a Bayesian SUR sampler
//! ([`gibbs::gibbs_sur`]) and frequentist FGLS
//! ([`simulate::fit_sur_fgls`]). The [`simulate`] module generates data from
//! the model above and drives replicated Monte Carlo studies; [`diagnostics`]
//! covers chain quality (autocorrelation, inefficiency factors, Geweke's CD,
//! thinning optimization, HPD intervals) and model comparison (DIC through
//! the latent-variable-integrated likelihood); [`io`] defines the on-disk
//! formats used by the `surme` command-line tool.

pub mod diagnostics;
mod error;
pub mod gibbs;
pub mod io;
pub mod mfvb;
pub mod model;
pub mod simulate;
pub mod stats;

pub use error::{Error, Result};
