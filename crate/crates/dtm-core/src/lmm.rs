//! Linear mixed model baseline: per-subject random coefficients on the shared
//! B-spline basis, fit by EM, embedded by projecting posterior-mean
//! coefficients onto their principal subspace.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::analysis::{EmbeddingSet, ModelTag, SubjectEmbedding};
use crate::basis::BasisConfig;
use crate::data::{Dataset, Trajectory};
use crate::error::{Error, Result};
use crate::{mvn_logpdf, Gaussian, HeldoutLl};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmConfig {
    pub max_iters: usize,
    pub rel_tol: f64,
}

impl Default for EmConfig {
    fn default() -> Self {
        EmConfig {
            max_iters: 500,
            rel_tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmmModel {
    pub mu: f64,
    pub sigma: DMatrix<f64>,
    pub sigma2: f64,
    pub basis: BasisConfig,
    /// Top-2 principal directions of the posterior-mean coefficients.
    pub pca_basis: DMatrix<f64>,
    pub coeff_mean: DVector<f64>,
    /// Marginal log-likelihood after each EM iteration.
    pub ll_trace: Vec<f64>,
}

fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Inverts a symmetric PD matrix, repairing near-singularity with a relative
/// ridge (logged as a warning).
fn robust_spd_inverse(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    if let Some(chol) = m.clone().cholesky() {
        return Ok(chol.inverse());
    }
    let d = m.nrows();
    let jitter = 1e-8 * m.trace() / d as f64 + 1e-300;
    eprintln!("warning: {what} near-singular; applying ridge repair {jitter:.3e}");
    let repaired = m + DMatrix::identity(d, d) * jitter;
    repaired
        .cholesky()
        .map(|c| c.inverse())
        .ok_or_else(|| Error::Numerical(format!("{what} not repairable")))
}

pub struct PreparedSubject {
    pub y: DVector<f64>,
    pub design: crate::basis::DesignMatrix,
}

pub(crate) fn prepare(ds: &Dataset, basis: &BasisConfig) -> Result<Vec<PreparedSubject>> {
    ds.trajectories
        .iter()
        .map(|t| {
            Ok(PreparedSubject {
                y: t.values_vector(),
                design: basis.design_matrix(&t.times)?,
            })
        })
        .collect()
}

fn marginal_ll(subjects: &[PreparedSubject], mu: f64, sigma: &DMatrix<f64>, sigma2: f64) -> f64 {
    subjects
        .iter()
        .map(|s| {
            let n = s.y.len();
            let cov = &s.design.rows * sigma * s.design.rows.transpose()
                + DMatrix::identity(n, n) * sigma2;
            let mean = DVector::from_element(n, mu);
            mvn_logpdf(&s.y, &mean, &cov).unwrap_or(f64::NEG_INFINITY)
        })
        .sum()
}

pub fn fit_lmm(ds: &Dataset, basis: &BasisConfig, em: &EmConfig) -> Result<LmmModel> {
    let d = basis.dimension;
    if ds.n() < d + 1 {
        return Err(Error::InvalidArgument(format!(
            "need more than {d} observations to fit a {d}-dimensional basis"
        )));
    }
    let subjects = prepare(ds, basis)?;
    let n_total = ds.n() as f64;
    let m = subjects.len() as f64;

    let pooled_mean = subjects.iter().map(|s| s.y.sum()).sum::<f64>() / n_total;
    let pooled_var = subjects
        .iter()
        .flat_map(|s| s.y.iter())
        .map(|&v| (v - pooled_mean).powi(2))
        .sum::<f64>()
        / n_total;

    let mut mu = pooled_mean;
    let mut sigma = DMatrix::identity(d, d);
    let mut sigma2 = pooled_var.max(1e-8);
    let mut ll_trace = Vec::new();

    for _ in 0..em.max_iters {
        // E-step: Gaussian posterior over each subject's coefficients.
        let sigma_inv = robust_spd_inverse(&sigma, "random-effect covariance")?;
        let mut sum_second = DMatrix::zeros(d, d);
        let mut sum_resid_dot_ones = 0.0;
        let mut posts = Vec::with_capacity(subjects.len());
        for s in &subjects {
            let prec = &sigma_inv + &s.design.gram / sigma2;
            let v = robust_spd_inverse(&prec, "posterior precision")?;
            let r = &s.y - DVector::from_element(s.y.len(), mu);
            let w_hat = &v * (s.design.rows.transpose() * &r) / sigma2;
            sum_second += &v + &w_hat * w_hat.transpose();
            sum_resid_dot_ones += (&s.y - &s.design.rows * &w_hat).sum();
            posts.push((v, w_hat));
        }

        // M-step.
        sigma = symmetrize(&(sum_second / m));
        mu = sum_resid_dot_ones / n_total;
        let mut rss = 0.0;
        for (s, (v, w_hat)) in subjects.iter().zip(&posts) {
            let resid = &s.y - DVector::from_element(s.y.len(), mu) - &s.design.rows * w_hat;
            rss += resid.norm_squared() + (&s.design.gram * v).trace();
        }
        sigma2 = (rss / n_total).max(1e-12);

        let ll = marginal_ll(&subjects, mu, &sigma, sigma2);
        let converged = ll_trace
            .last()
            .map(|&prev: &f64| (ll - prev).abs() <= em.rel_tol * (1.0 + prev.abs()))
            .unwrap_or(false);
        ll_trace.push(ll);
        if converged {
            break;
        }
    }

    // Embedding map: top-2 principal directions of the posterior means.
    let coeffs: Vec<DVector<f64>> = {
        let sigma_inv = robust_spd_inverse(&sigma, "random-effect covariance")?;
        subjects
            .iter()
            .map(|s| {
                let prec = &sigma_inv + &s.design.gram / sigma2;
                let v = robust_spd_inverse(&prec, "posterior precision")?;
                let r = &s.y - DVector::from_element(s.y.len(), mu);
                Ok(&v * (s.design.rows.transpose() * &r) / sigma2)
            })
            .collect::<Result<_>>()?
    };
    let (coeff_mean, pca_basis) = pca_projection(&coeffs, 2.min(d));

    Ok(LmmModel {
        mu,
        sigma,
        sigma2,
        basis: basis.clone(),
        pca_basis,
        coeff_mean,
        ll_trace,
    })
}

/// Principal directions of a point cloud: returns (mean, d x q orthonormal
/// basis ordered by decreasing variance, sign-fixed).
pub fn pca_projection(points: &[DVector<f64>], q: usize) -> (DVector<f64>, DMatrix<f64>) {
    let d = points[0].len();
    let m = points.len() as f64;
    let mean = points.iter().fold(DVector::zeros(d), |acc, p| acc + p) / m;
    let mut cov = DMatrix::zeros(d, d);
    for p in points {
        let c = p - &mean;
        cov += &c * c.transpose();
    }
    cov /= m;
    let eig = cov.symmetric_eigen();
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap());
    let mut basis = DMatrix::zeros(d, q);
    for (col, &idx) in order.iter().take(q).enumerate() {
        let mut v = eig.eigenvectors.column(idx).clone_owned();
        // Deterministic sign: largest-magnitude entry is nonnegative.
        let pivot = v.iter().cloned().fold(0.0f64, |a, b| if b.abs() > a.abs() { b } else { a });
        if pivot < 0.0 {
            v = -v;
        }
        basis.set_column(col, &v);
    }
    (mean, basis)
}

/// Gaussian conjugate posterior over a trajectory's basis coefficients.
pub fn lmm_posterior_coefficients(model: &LmmModel, traj: &Trajectory) -> Result<Gaussian> {
    if traj.is_empty() {
        return Ok(Gaussian {
            mean: DVector::zeros(model.basis.dimension),
            cov: model.sigma.clone(),
        });
    }
    let dm = model.basis.design_matrix(&traj.times)?;
    let sigma_inv = robust_spd_inverse(&model.sigma, "random-effect covariance")?;
    let prec = &sigma_inv + &dm.gram / model.sigma2;
    let cov = robust_spd_inverse(&prec, "posterior precision")?;
    let r = traj.values_vector() - DVector::from_element(traj.len(), model.mu);
    let mean = &cov * (dm.rows.transpose() * r) / model.sigma2;
    Ok(Gaussian {
        mean,
        cov: symmetrize(&cov),
    })
}

/// Projects posterior-mean coefficients of every subject into the principal
/// subspace fixed at fit time.
pub fn lmm_embed(model: &LmmModel, ds: &Dataset) -> Result<EmbeddingSet> {
    let subjects = ds
        .trajectories
        .iter()
        .map(|t| {
            let post = lmm_posterior_coefficients(model, t)?;
            let centered = &post.mean - &model.coeff_mean;
            let mean = model.pca_basis.transpose() * centered;
            let cov = model.pca_basis.transpose() * &post.cov * &model.pca_basis;
            Ok(SubjectEmbedding {
                subject_id: t.subject_id.clone(),
                mean,
                cov: Some(cov),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    EmbeddingSet::new(subjects, ModelTag::Lmm)
}

/// Held-out log-likelihood of one trajectory under the fitted marginal.
pub fn lmm_heldout_ll(model: &LmmModel, traj: &Trajectory) -> Result<HeldoutLl> {
    let n = traj.len();
    let dm = model.basis.design_matrix(&traj.times)?;
    let cov = &dm.rows * &model.sigma * dm.rows.transpose() + DMatrix::identity(n, n) * model.sigma2;
    let mean = DVector::from_element(n, model.mu);
    let subject_ll = mvn_logpdf(&traj.values_vector(), &mean, &cov)?;
    Ok(HeldoutLl::from_subject_ll(subject_ll, n))
}
