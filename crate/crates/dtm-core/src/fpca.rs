//! Reduced-rank mixed model (rank-q coefficient covariance): latent factors
//! `x_i ~ N(0, I_q)` mapped through `F` onto the basis coefficients, fit by
//! EM. The rank-q fit recovers q-dimensional embeddings directly.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::analysis::{EmbeddingSet, ModelTag, SubjectEmbedding};
use crate::basis::BasisConfig;
use crate::data::{Dataset, Trajectory};
use crate::error::{Error, Result};
use crate::lmm::{EmConfig, LmmModel};
use crate::{kron, mvn_logpdf, Gaussian, HeldoutLl};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FpcaModel {
    pub mu: f64,
    /// d x q factor map in canonical form: orthogonal columns with
    /// non-increasing norms and nonnegative leading entries.
    pub f: DMatrix<f64>,
    pub sigma2: f64,
    pub basis: BasisConfig,
    pub q: usize,
    pub ll_trace: Vec<f64>,
}

fn marginal_ll(
    subjects: &[crate::lmm::PreparedSubject],
    mu: f64,
    f: &DMatrix<f64>,
    sigma2: f64,
) -> f64 {
    let ff = f * f.transpose();
    subjects
        .iter()
        .map(|s| {
            let n = s.y.len();
            let cov =
                &s.design.rows * &ff * s.design.rows.transpose() + DMatrix::identity(n, n) * sigma2;
            let mean = DVector::from_element(n, mu);
            mvn_logpdf(&s.y, &mean, &cov).unwrap_or(f64::NEG_INFINITY)
        })
        .sum()
}

/// Canonical representative of the equivalence class {F R : R orthogonal}.
fn canonicalize(f: &DMatrix<f64>) -> DMatrix<f64> {
    let svd = f.clone().svd(true, false);
    let u = svd.u.unwrap();
    let q = f.ncols();
    let mut out = DMatrix::zeros(f.nrows(), q);
    for j in 0..q {
        let mut col = u.column(j) * svd.singular_values[j];
        if let Some(lead) = col.iter().find(|v| v.abs() > 1e-12) {
            if *lead < 0.0 {
                col = -col;
            }
        }
        out.set_column(j, &col);
    }
    out
}

pub fn fit_fpca(
    ds: &Dataset,
    basis: &BasisConfig,
    q: usize,
    em: &EmConfig,
    warm: Option<&LmmModel>,
) -> Result<FpcaModel> {
    let d = basis.dimension;
    if q > d {
        return Err(Error::InvalidArgument(format!(
            "rank q={q} exceeds basis dimension d={d}"
        )));
    }
    if q == 0 {
        return Err(Error::InvalidArgument("rank q must be positive".into()));
    }
    if ds.n() < d + 1 {
        return Err(Error::InvalidArgument(format!(
            "need more than {d} observations to fit a {d}-dimensional basis"
        )));
    }
    let subjects = crate::lmm::prepare(ds, basis)?;
    let n_total = ds.n() as f64;

    let pooled_mean = subjects.iter().map(|s| s.y.sum()).sum::<f64>() / n_total;
    let pooled_var = subjects
        .iter()
        .flat_map(|s| s.y.iter())
        .map(|&v| (v - pooled_mean).powi(2))
        .sum::<f64>()
        / n_total;

    let (mut mu, mut sigma2, mut f) = match warm {
        Some(lmm) => {
            // F = top-q eigvecs * sqrt(eigvals) of the LMM covariance.
            let eig = lmm.sigma.clone().symmetric_eigen();
            let mut order: Vec<usize> = (0..d).collect();
            order.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap());
            let mut f0 = DMatrix::zeros(d, q);
            for (col, &idx) in order.iter().take(q).enumerate() {
                let scale = eig.eigenvalues[idx].max(0.0).sqrt();
                f0.set_column(col, &(eig.eigenvectors.column(idx) * scale));
            }
            (lmm.mu, lmm.sigma2, f0)
        }
        None => {
            // Deterministic spread of columns over the coordinate axes,
            // scaled to the data variance.
            let scale = (pooled_var.max(1e-8) / q as f64).sqrt();
            let mut f0 = DMatrix::zeros(d, q);
            for j in 0..q {
                f0[(j % d, j)] = scale;
            }
            (pooled_mean, pooled_var.max(1e-8), f0)
        }
    };

    let mut ll_trace = Vec::new();
    for _ in 0..em.max_iters {
        // E-step under x_i ~ N(0, I_q).
        let mut posts = Vec::with_capacity(subjects.len());
        for s in &subjects {
            let prec = DMatrix::identity(q, q) + f.transpose() * &s.design.gram * &f / sigma2;
            let v = prec
                .cholesky()
                .ok_or_else(|| Error::Numerical("factor posterior not PD".into()))?
                .inverse();
            let r = &s.y - DVector::from_element(s.y.len(), mu);
            let x_hat = &v * (f.transpose() * (s.design.rows.transpose() * &r)) / sigma2;
            posts.push((v, x_hat));
        }

        // CM-step 1: marginal mean given the current map.
        let mut resid_sum = 0.0;
        for (s, (_, x_hat)) in subjects.iter().zip(&posts) {
            resid_sum += (&s.y - &s.design.rows * (&f * x_hat)).sum();
        }
        mu = resid_sum / n_total;

        // CM-step 2: factor map from the normal equations
        // sum_i G_i F E[x x'] = sum_i B_i' r_i E[x]'.
        let mut lhs = DMatrix::zeros(d * q, d * q);
        let mut rhs = DVector::zeros(d * q);
        for (s, (v, x_hat)) in subjects.iter().zip(&posts) {
            let exx = v + x_hat * x_hat.transpose();
            lhs += kron(&exx, &s.design.gram);
            let r = &s.y - DVector::from_element(s.y.len(), mu);
            let cross = s.design.rows.transpose() * &r * x_hat.transpose();
            for j in 0..q {
                for i in 0..d {
                    rhs[j * d + i] += cross[(i, j)];
                }
            }
        }
        let sol = lhs
            .lu()
            .solve(&rhs)
            .ok_or_else(|| Error::Numerical("singular factor normal equations".into()))?;
        f = DMatrix::from_fn(d, q, |i, j| sol[j * d + i]);

        // CM-step 3: observation noise.
        let mut rss = 0.0;
        for (s, (v, x_hat)) in subjects.iter().zip(&posts) {
            let resid = &s.y - DVector::from_element(s.y.len(), mu) - &s.design.rows * (&f * x_hat);
            let fgf = f.transpose() * &s.design.gram * &f;
            rss += resid.norm_squared() + (&fgf * v).trace();
        }
        sigma2 = (rss / n_total).max(1e-12);

        let ll = marginal_ll(&subjects, mu, &f, sigma2);
        let converged = ll_trace
            .last()
            .map(|&prev: &f64| (ll - prev).abs() <= em.rel_tol * (1.0 + prev.abs()))
            .unwrap_or(false);
        ll_trace.push(ll);
        if converged {
            break;
        }
    }

    Ok(FpcaModel {
        mu,
        f: canonicalize(&f),
        sigma2,
        basis: basis.clone(),
        q,
        ll_trace,
    })
}

/// Posterior over a trajectory's latent factors.
pub fn fpca_embed(model: &FpcaModel, traj: &Trajectory) -> Result<Gaussian> {
    let q = model.q;
    if traj.is_empty() {
        return Ok(Gaussian::standard(q));
    }
    let dm = model.basis.design_matrix(&traj.times)?;
    let prec = DMatrix::identity(q, q)
        + model.f.transpose() * &dm.gram * &model.f / model.sigma2;
    let cov = prec
        .cholesky()
        .ok_or_else(|| Error::Numerical("factor posterior not PD".into()))?
        .inverse();
    let r = traj.values_vector() - DVector::from_element(traj.len(), model.mu);
    let mean = &cov * (model.f.transpose() * (dm.rows.transpose() * r)) / model.sigma2;
    Ok(Gaussian {
        mean,
        cov: (&cov + cov.transpose()) * 0.5,
    })
}

pub fn fpca_embed_set(model: &FpcaModel, ds: &Dataset) -> Result<EmbeddingSet> {
    let subjects = ds
        .trajectories
        .iter()
        .map(|t| {
            let g = fpca_embed(model, t)?;
            Ok(SubjectEmbedding {
                subject_id: t.subject_id.clone(),
                mean: g.mean,
                cov: Some(g.cov),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    EmbeddingSet::new(subjects, ModelTag::Fpca)
}

/// Held-out log-likelihood under the rank-q marginal.
pub fn fpca_heldout_ll(model: &FpcaModel, traj: &Trajectory) -> Result<HeldoutLl> {
    let n = traj.len();
    let dm = model.basis.design_matrix(&traj.times)?;
    let bf = &dm.rows * &model.f;
    let cov = &bf * bf.transpose() + DMatrix::identity(n, n) * model.sigma2;
    let mean = DVector::from_element(n, model.mu);
    let subject_ll = mvn_logpdf(&traj.values_vector(), &mean, &cov)?;
    Ok(HeldoutLl::from_subject_ll(subject_ll, n))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{simulate, MapKind, SimConfig};
    use crate::lmm::fit_lmm;
    use approx::assert_abs_diff_eq;

    fn sim(m: usize, noise_sd: f64, seed: u64) -> (Dataset, crate::data::GroundTruth) {
        simulate(
            &SimConfig {
                m,
                latent_dim: 2,
                obs_count_law: (2, 4, 8),
                time_horizon: 10.0,
                noise_sd,
                map_kind: MapKind::Linear,
                cluster_centers: vec![],
            },
            seed,
        )
        .unwrap()
    }

    #[test]
    fn em_is_monotone() {
        let (ds, truth) = sim(60, 0.6, 1);
        let model = fit_fpca(&ds, &truth.basis, 2, &EmConfig::default(), None).unwrap();
        for w in model.ll_trace.windows(2) {
            assert!(w[1] >= w[0] - 1e-8, "LL decreased: {} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn full_rank_fpca_reaches_lmm_likelihood() {
        let (ds, truth) = sim(50, 0.6, 2);
        let em = EmConfig::default();
        let lmm = fit_lmm(&ds, &truth.basis, &em).unwrap();
        let fpca = fit_fpca(&ds, &truth.basis, 5, &em, Some(&lmm)).unwrap();
        let lmm_ll = *lmm.ll_trace.last().unwrap();
        let fpca_ll = *fpca.ll_trace.last().unwrap();
        assert!(
            fpca_ll >= lmm_ll - 1e-6,
            "full-rank FPCA LL {fpca_ll} below LMM LL {lmm_ll}"
        );
    }

    #[test]
    fn recovers_rank_two_subspace() {
        let (ds, truth) = sim(2000, 0.1, 3);
        let em = EmConfig::default();
        let lmm = fit_lmm(&ds, &truth.basis, &em).unwrap();
        let model = fit_fpca(&ds, &truth.basis, 2, &em, Some(&lmm)).unwrap();

        // Largest principal angle between span(F_hat) and span(F_true).
        let ortho = |m: &DMatrix<f64>| m.clone().qr().q();
        let q1 = ortho(&model.f);
        let q2 = ortho(&truth.map);
        let svd = (q1.transpose() * q2).svd(false, false);
        let min_cos = svd
            .singular_values
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min)
            .min(1.0);
        let angle_deg = min_cos.acos().to_degrees();
        assert!(angle_deg < 10.0, "principal angle {angle_deg:.2} degrees");
    }

    #[test]
    fn canonical_form_holds() {
        let (ds, truth) = sim(60, 0.6, 4);
        let model = fit_fpca(&ds, &truth.basis, 2, &EmConfig::default(), None).unwrap();
        let ftf = model.f.transpose() * &model.f;
        assert!(ftf[(0, 1)].abs() < 1e-8 && ftf[(1, 0)].abs() < 1e-8);
        assert!(ftf[(0, 0)] >= ftf[(1, 1)] - 1e-12);
        for j in 0..2 {
            let lead = model.f.column(j).iter().cloned().find(|v| v.abs() > 1e-12);
            assert!(lead.unwrap_or(0.0) >= 0.0);
        }
    }

    #[test]
    fn rank_exceeding_dimension_rejected() {
        let (ds, truth) = sim(30, 0.6, 5);
        assert!(fit_fpca(&ds, &truth.basis, 6, &EmConfig::default(), None).is_err());
    }

    #[test]
    fn empty_trajectory_embeds_at_prior() {
        let (ds, truth) = sim(40, 0.5, 6);
        let model = fit_fpca(&ds, &truth.basis, 2, &EmConfig::default(), None).unwrap();
        let empty = Trajectory::new("new".into(), vec![], vec![], None).unwrap();
        let g = fpca_embed(&model, &empty).unwrap();
        assert_eq!(g.mean, DVector::zeros(2));
        assert_eq!(g.cov, DMatrix::identity(2, 2));
    }

    #[test]
    fn flat_trajectory_embeds_at_zero() {
        let (ds, truth) = sim(40, 0.5, 7);
        let model = fit_fpca(&ds, &truth.basis, 2, &EmConfig::default(), None).unwrap();
        let t = Trajectory::new(
            "flat".into(),
            vec![1.0, 3.0, 7.0],
            vec![model.mu, model.mu, model.mu],
            None,
        )
        .unwrap();
        let g = fpca_embed(&model, &t).unwrap();
        assert!(g.mean.norm() < 1e-12);
    }

    #[test]
    fn embedding_matches_dense_conditioning_and_is_contractive() {
        let (ds, truth) = sim(40, 0.5, 8);
        let model = fit_fpca(&ds, &truth.basis, 2, &EmConfig::default(), None).unwrap();
        let traj = &ds.trajectories[0];
        let g = fpca_embed(&model, traj).unwrap();

        // Dense joint-Gaussian oracle over (x, y).
        let n = traj.len();
        let dm = model.basis.design_matrix(&traj.times).unwrap();
        let bf = &dm.rows * &model.f;
        let marg = &bf * bf.transpose() + DMatrix::identity(n, n) * model.sigma2;
        let marg_inv = marg.try_inverse().unwrap();
        let r = traj.values_vector() - DVector::from_element(n, model.mu);
        let mean_oracle = bf.transpose() * &marg_inv * &r;
        let cov_oracle = DMatrix::identity(2, 2) - bf.transpose() * &marg_inv * &bf;
        assert!((g.mean.clone() - mean_oracle).amax() < 1e-10);
        assert!((g.cov.clone() - cov_oracle).amax() < 1e-10);

        // Posterior covariance never exceeds the prior in Loewner order.
        let gap = DMatrix::identity(2, 2) - &g.cov;
        assert!(gap.symmetric_eigen().eigenvalues.min() >= -1e-10);
    }

    #[test]
    fn full_rank_cholesky_factor_matches_lmm_heldout() {
        let (ds, truth) = sim(50, 0.6, 9);
        let lmm = fit_lmm(&ds, &truth.basis, &EmConfig::default()).unwrap();
        let chol = lmm.sigma.clone().cholesky().unwrap().l();
        let model = FpcaModel {
            mu: lmm.mu,
            f: chol,
            sigma2: lmm.sigma2,
            basis: truth.basis.clone(),
            q: 5,
            ll_trace: vec![],
        };
        for traj in ds.trajectories.iter().take(5) {
            let a = fpca_heldout_ll(&model, traj).unwrap();
            let b = crate::lmm::lmm_heldout_ll(&lmm, traj).unwrap();
            assert_abs_diff_eq!(a.subject_ll, b.subject_ll, epsilon = 1e-8);
        }
    }

    #[test]
    fn heldout_matches_dense_oracle() {
        let (ds, truth) = sim(40, 0.5, 10);
        let model = fit_fpca(&ds, &truth.basis, 2, &EmConfig::default(), None).unwrap();
        let traj = &ds.trajectories[3];
        let hl = fpca_heldout_ll(&model, traj).unwrap();
        assert!(hl.subject_ll.is_finite());
        let n = traj.len();
        let dm = model.basis.design_matrix(&traj.times).unwrap();
        let bf = &dm.rows * &model.f;
        let cov = &bf * bf.transpose() + DMatrix::identity(n, n) * model.sigma2;
        let r = traj.values_vector() - DVector::from_element(n, model.mu);
        let quad = r.dot(&(cov.clone().try_inverse().unwrap() * &r));
        let oracle =
            -0.5 * (n as f64 * (2.0 * std::f64::consts::PI).ln() + cov.determinant().ln() + quad);
        assert_abs_diff_eq!(hl.subject_ll, oracle, epsilon = 1e-10);
    }
}
