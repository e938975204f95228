//! Embedding of sparse, irregularly sampled scalar time series into
//! low-dimensional latent spaces.
//!
//! The main model is a kernelized reduced-rank mixed model trained with
//! inducing-point stochastic variational inference ([`dtm`]), alongside a
//! linear mixed model ([`lmm`]) and a reduced-rank FPCA baseline ([`fpca`]),
//! with an evaluation and analysis harness ([`analysis`]).

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

pub mod analysis;
pub mod basis;
pub mod data;
pub mod dtm;
pub mod error;
pub mod fpca;
pub mod kernel;
pub mod lmm;
pub mod model_file;

pub use error::{Error, Result};

/// A multivariate normal with dense mean and covariance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gaussian {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl Gaussian {
    pub fn standard(dim: usize) -> Self {
        Gaussian {
            mean: DVector::zeros(dim),
            cov: DMatrix::identity(dim, dim),
        }
    }
}

/// Held-out log-likelihood of one subject: the joint density of the subject's
/// trajectory and its per-observation average.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeldoutLl {
    pub subject_ll: f64,
    pub obs_ll: f64,
}

impl HeldoutLl {
    pub fn from_subject_ll(subject_ll: f64, n_obs: usize) -> Self {
        HeldoutLl {
            subject_ll,
            obs_ll: subject_ll / n_obs.max(1) as f64,
        }
    }
}

/// Kronecker product `a ⊗ b`.
pub(crate) fn kron(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let (ar, ac) = a.shape();
    let (br, bc) = b.shape();
    let mut out = DMatrix::zeros(ar * br, ac * bc);
    for i in 0..ar {
        for j in 0..ac {
            let v = a[(i, j)];
            if v != 0.0 {
                out.view_mut((i * br, j * bc), (br, bc)).copy_from(&(b * v));
            }
        }
    }
    out
}

/// Log-density of `y` under `N(mean, cov)` via Cholesky.
/// Log-density of a multivariate Gaussian evaluated by Cholesky solve.
pub fn mvn_logpdf(y: &DVector<f64>, mean: &DVector<f64>, cov: &DMatrix<f64>) -> Result<f64> {
    let n = y.len();
    if n == 0 {
        return Ok(0.0);
    }
    let chol = cov
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Numerical("covariance not positive definite".into()))?;
    let logdet = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let r = y - mean;
    let alpha = chol.solve(&r);
    Ok(-0.5 * (n as f64 * (2.0 * std::f64::consts::PI).ln() + logdet + r.dot(&alpha)))
}
