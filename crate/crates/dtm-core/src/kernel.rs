//! RBF kernel over latent representations, Gram assembly, and closed-form
//! kernel expectations (psi-statistics) under Gaussian posteriors.
//!
//! The kernel is `k(x, x') = alpha * exp(-||x - x'||^2 / (2 ell^2))` with the
//! scale carried inside the kernel, so the coefficient-process covariance is
//! `Cov(w_ik, w_jk) = k(x_i, x_j)`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::Gaussian;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelHyper {
    pub alpha: f64,
    pub ell: f64,
}

impl KernelHyper {
    pub fn new(alpha: f64, ell: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha.is_finite() && ell > 0.0 && ell.is_finite()) {
            return Err(Error::InvalidArgument(
                "kernel scale and length-scale must be positive and finite".into(),
            ));
        }
        Ok(KernelHyper { alpha, ell })
    }
}

pub fn kernel(x: &DVector<f64>, y: &DVector<f64>, h: &KernelHyper) -> f64 {
    let d2 = (x - y).norm_squared();
    h.alpha * (-d2 / (2.0 * h.ell * h.ell)).exp()
}

/// Pairwise kernel matrix. When `xs` and `zs` are the same point set,
/// `jitter * alpha` is added to the diagonal.
pub fn gram(xs: &[DVector<f64>], zs: &[DVector<f64>], h: &KernelHyper, jitter: f64) -> DMatrix<f64> {
    let mut k = DMatrix::from_fn(xs.len(), zs.len(), |i, j| kernel(&xs[i], &zs[j], h));
    let same = xs.len() == zs.len() && xs.iter().zip(zs).all(|(a, b)| a == b);
    if same && jitter != 0.0 {
        for i in 0..xs.len() {
            k[(i, i)] += jitter * h.alpha;
        }
    }
    k
}

/// Derivative of the (jittered) Gram matrix w.r.t. `log ell`. The jitter term
/// does not depend on the length-scale, so only the kernel part contributes.
pub fn gram_dlogell(zs: &[DVector<f64>], h: &KernelHyper) -> DMatrix<f64> {
    let ell2 = h.ell * h.ell;
    DMatrix::from_fn(zs.len(), zs.len(), |i, j| {
        let d2 = (&zs[i] - &zs[j]).norm_squared();
        h.alpha * (-d2 / (2.0 * ell2)).exp() * d2 / ell2
    })
}

/// Closed-form kernel expectations under `x ~ N(m, S)`:
/// `psi0 = E[k(x,x)]`, `psi1_j = E[k(x, z_j)]`, `psi2_jk = E[k(x,z_j) k(x,z_k)]`.
#[derive(Debug, Clone)]
pub struct PsiStats {
    pub psi0: f64,
    pub psi1: DVector<f64>,
    pub psi2: DMatrix<f64>,
}

fn check_posterior(qx: &Gaussian) -> Result<()> {
    let s = &qx.cov;
    if (s - s.transpose()).amax() > 1e-8 * (1.0 + s.amax()) {
        return Err(Error::InvalidArgument("posterior covariance not symmetric".into()));
    }
    let min_eig = s
        .clone()
        .symmetric_eigen()
        .eigenvalues
        .min();
    if min_eig < -1e-10 * (1.0 + s.amax()) {
        return Err(Error::InvalidArgument(format!(
            "posterior covariance not PSD (min eigenvalue {min_eig:.3e})"
        )));
    }
    Ok(())
}

pub fn psi_stats(qx: &Gaussian, zs: &[DVector<f64>], h: &KernelHyper) -> Result<PsiStats> {
    check_posterior(qx)?;
    let q = qx.mean.len();
    let p = zs.len();
    let ell2 = h.ell * h.ell;
    let eye = DMatrix::identity(q, q);

    // psi1: Gaussian convolution of the kernel with N(m, S).
    let a1 = &qx.cov + ell2 * &eye;
    let q1 = a1
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::Numerical("singular S + ell^2 I in psi1".into()))?;
    let det1 = (&qx.cov / ell2 + &eye).determinant();
    let pref1 = h.alpha / det1.sqrt();
    let psi1 = DVector::from_fn(p, |j, _| {
        let d = &qx.mean - &zs[j];
        pref1 * (-0.5 * d.dot(&(&q1 * &d))).exp()
    });

    // psi2: product of two kernels collapses to one Gaussian centered at the
    // inducing-point midpoint with halved length-scale.
    let a2 = &qx.cov + (ell2 / 2.0) * &eye;
    let q2 = a2
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::Numerical("singular S + ell^2/2 I in psi2".into()))?;
    let det2 = (2.0 * &qx.cov / ell2 + &eye).determinant();
    let pref2 = h.alpha * h.alpha / det2.sqrt();
    let mut psi2 = DMatrix::zeros(p, p);
    for j in 0..p {
        for k in j..p {
            let d_z = (&zs[j] - &zs[k]).norm_squared();
            let mid = (&zs[j] + &zs[k]) * 0.5;
            let d = &qx.mean - mid;
            let v = pref2
                * (-d_z / (4.0 * ell2)).exp()
                * (-0.5 * d.dot(&(&q2 * &d))).exp();
            psi2[(j, k)] = v;
            psi2[(k, j)] = v;
        }
    }

    Ok(PsiStats {
        psi0: h.alpha,
        psi1,
        psi2,
    })
}

/// Gradients of `sum_j v_j psi1_j` w.r.t. the posterior mean and (symmetric)
/// covariance.
pub fn psi1_weighted_grads(
    qx: &Gaussian,
    zs: &[DVector<f64>],
    h: &KernelHyper,
    v: &DVector<f64>,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let q = qx.mean.len();
    let ell2 = h.ell * h.ell;
    let eye = DMatrix::identity(q, q);
    let a1 = &qx.cov + ell2 * &eye;
    let q1 = a1
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::Numerical("singular S + ell^2 I".into()))?;
    let det1 = (&qx.cov / ell2 + &eye).determinant();
    let pref1 = h.alpha / det1.sqrt();

    let mut grad_m = DVector::zeros(q);
    let mut grad_s = DMatrix::zeros(q, q);
    for j in 0..zs.len() {
        let d = &qx.mean - &zs[j];
        let qd = &q1 * &d;
        let psi = pref1 * (-0.5 * d.dot(&qd)).exp();
        let c = v[j] * psi;
        grad_m -= c * &qd;
        grad_s += c * 0.5 * (&qd * qd.transpose() - &q1);
    }
    Ok((grad_m, grad_s))
}

/// Gradients of `sum_jk w_jk psi2_jk` w.r.t. the posterior mean and
/// (symmetric) covariance.
pub fn psi2_weighted_grads(
    qx: &Gaussian,
    zs: &[DVector<f64>],
    h: &KernelHyper,
    w: &DMatrix<f64>,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let q = qx.mean.len();
    let ell2 = h.ell * h.ell;
    let eye = DMatrix::identity(q, q);
    let a2 = &qx.cov + (ell2 / 2.0) * &eye;
    let q2 = a2
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::Numerical("singular S + ell^2/2 I".into()))?;
    let det2 = (2.0 * &qx.cov / ell2 + &eye).determinant();
    let pref2 = h.alpha * h.alpha / det2.sqrt();

    let mut grad_m = DVector::zeros(q);
    let mut grad_s = DMatrix::zeros(q, q);
    for j in 0..zs.len() {
        for k in 0..zs.len() {
            let d_z = (&zs[j] - &zs[k]).norm_squared();
            let mid = (&zs[j] + &zs[k]) * 0.5;
            let d = &qx.mean - mid;
            let qd = &q2 * &d;
            let psi = pref2 * (-d_z / (4.0 * ell2)).exp() * (-0.5 * d.dot(&qd)).exp();
            let c = w[(j, k)] * psi;
            grad_m -= c * &qd;
            grad_s += c * 0.5 * (&qd * qd.transpose() - &q2);
        }
    }
    Ok((grad_m, grad_s))
}

/// Derivatives of the psi-statistics w.r.t. `log ell`.
pub fn psi_dlogell(
    qx: &Gaussian,
    zs: &[DVector<f64>],
    h: &KernelHyper,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let stats = psi_stats(qx, zs, h)?;
    let q = qx.mean.len();
    let p = zs.len();
    let ell2 = h.ell * h.ell;
    let eye = DMatrix::identity(q, q);

    let q1 = (&qx.cov + ell2 * &eye)
        .try_inverse()
        .ok_or_else(|| Error::Numerical("singular S + ell^2 I".into()))?;
    let tr_q1s = (&q1 * &qx.cov).trace();
    let psi1_dot = DVector::from_fn(p, |j, _| {
        let d = &qx.mean - &zs[j];
        let qd = &q1 * &d;
        stats.psi1[j] * (tr_q1s + ell2 * qd.norm_squared())
    });

    let q2 = (&qx.cov + (ell2 / 2.0) * &eye)
        .try_inverse()
        .ok_or_else(|| Error::Numerical("singular S + ell^2/2 I".into()))?;
    let tr_q2s = (&q2 * &qx.cov).trace();
    let mut psi2_dot = DMatrix::zeros(p, p);
    for j in 0..p {
        for k in j..p {
            let d_z = (&zs[j] - &zs[k]).norm_squared();
            let mid = (&zs[j] + &zs[k]) * 0.5;
            let d = &qx.mean - mid;
            let qd = &q2 * &d;
            let v = stats.psi2[(j, k)]
                * (d_z / (2.0 * ell2) + tr_q2s + 0.5 * ell2 * qd.norm_squared());
            psi2_dot[(j, k)] = v;
            psi2_dot[(k, j)] = v;
        }
    }
    Ok((psi1_dot, psi2_dot))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn hyper(alpha: f64, ell: f64) -> KernelHyper {
        KernelHyper::new(alpha, ell).unwrap()
    }

    fn random_points(rng: &mut ChaCha8Rng, n: usize, q: usize) -> Vec<DVector<f64>> {
        (0..n)
            .map(|_| DVector::from_fn(q, |_, _| StandardNormal.sample(rng)))
            .collect()
    }

    fn random_psd(rng: &mut ChaCha8Rng, q: usize, scale: f64) -> DMatrix<f64> {
        let a = DMatrix::from_fn(q, q, |_, _| {
            let e: f64 = StandardNormal.sample(rng);
            e * scale
        });
        &a * a.transpose() + DMatrix::identity(q, q) * 0.05 * scale
    }

    #[test]
    fn kernel_at_zero_distance_is_alpha() {
        let x = DVector::from_vec(vec![0.3, -1.2]);
        assert_abs_diff_eq!(kernel(&x, &x, &hyper(2.5, 0.7)), 2.5, epsilon = 1e-15);
    }

    #[test]
    fn kernel_decays_and_matches_direct_substitution() {
        let h = hyper(1.0, 1.0);
        let x = DVector::from_vec(vec![0.0]);
        let y = DVector::from_vec(vec![2f64.sqrt()]);
        assert_abs_diff_eq!(kernel(&x, &y, &h), (-1f64).exp(), epsilon = 1e-12);
        let far = DVector::from_vec(vec![10.0]);
        assert!(kernel(&x, &far, &h) < 2e-22);
    }

    #[test]
    fn single_point_gram_is_alpha() {
        let z = vec![DVector::from_vec(vec![1.0, 2.0])];
        let k = gram(&z, &z, &hyper(3.0, 1.0), 0.0);
        assert_eq!(k.nrows(), 1);
        assert_abs_diff_eq!(k[(0, 0)], 3.0, epsilon = 1e-15);
    }

    #[test]
    fn jitter_bounds_min_eigenvalue() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let zs = random_points(&mut rng, 8, 2);
        let h = hyper(2.0, 1.5);
        let k = gram(&zs, &zs, &h, 1e-6);
        let min_eig = k.symmetric_eigen().eigenvalues.min();
        assert!(min_eig >= 2.0 * 1e-6 * 0.9, "min eig {min_eig}");
    }

    #[test]
    fn nystrom_residual_vanishes_when_z_equals_x() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let xs = random_points(&mut rng, 5, 2);
        let h = hyper(1.3, 0.8);
        let kmm = gram(&xs, &xs, &h, 0.0);
        let kpp_inv = kmm.clone().try_inverse().unwrap();
        let resid = &kmm - &kmm * kpp_inv * &kmm;
        assert!(resid.amax() < 1e-8, "residual {}", resid.amax());
    }

    #[test]
    fn point_mass_posterior_recovers_kernel_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let zs = random_points(&mut rng, 4, 2);
        let h = hyper(1.7, 1.1);
        let m = DVector::from_vec(vec![0.4, -0.2]);
        let qx = Gaussian {
            mean: m.clone(),
            cov: DMatrix::identity(2, 2) * 1e-12,
        };
        let stats = psi_stats(&qx, &zs, &h).unwrap();
        for j in 0..4 {
            let kj = kernel(&m, &zs[j], &h);
            assert_abs_diff_eq!(stats.psi1[j], kj, epsilon = 1e-8);
            for k in 0..4 {
                let kk = kernel(&m, &zs[k], &h);
                assert_abs_diff_eq!(stats.psi2[(j, k)], kj * kk, epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn unit_gaussian_psi1_matches_analytic_value() {
        // q=1, m=0, S=1, ell=1, alpha=1, z=0: E[exp(-x^2/2)] = 1/sqrt(2).
        let qx = Gaussian {
            mean: DVector::from_vec(vec![0.0]),
            cov: DMatrix::from_element(1, 1, 1.0),
        };
        let zs = vec![DVector::from_vec(vec![0.0])];
        let stats = psi_stats(&qx, &zs, &hyper(1.0, 1.0)).unwrap();
        assert_abs_diff_eq!(stats.psi1[0], 1.0 / 2f64.sqrt(), epsilon = 1e-12);

        // Cross-check by trapezoidal quadrature of the 1-D Gaussian integral.
        let n = 200_001;
        let (lo, hi) = (-12.0, 12.0);
        let step = (hi - lo) / (n - 1) as f64;
        let mut integral = 0.0;
        for i in 0..n {
            let x = lo + i as f64 * step;
            let f = (-x * x / 2.0).exp() * (-x * x / 2.0).exp() / (2.0 * std::f64::consts::PI).sqrt();
            let w = if i == 0 || i == n - 1 { 0.5 } else { 1.0 };
            integral += w * f * step;
        }
        assert_abs_diff_eq!(stats.psi1[0], integral, epsilon = 1e-9);
    }

    /// Monte-Carlo estimate of the psi statistics; the independent oracle.
    pub(crate) fn mc_psi(
        qx: &Gaussian,
        zs: &[DVector<f64>],
        h: &KernelHyper,
        samples: usize,
        seed: u64,
    ) -> (DVector<f64>, DMatrix<f64>, DVector<f64>, DMatrix<f64>) {
        let q = qx.mean.len();
        let p = zs.len();
        let chol = qx
            .cov
            .clone()
            .cholesky()
            .map(|c| c.l())
            .unwrap_or_else(|| {
                let eig = qx.cov.clone().symmetric_eigen();
                let mut l = eig.eigenvectors.clone();
                for (j, &lam) in eig.eigenvalues.iter().enumerate() {
                    let s = lam.max(0.0).sqrt();
                    l.column_mut(j).scale_mut(s);
                }
                l
            });
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut sum1: DVector<f64> = DVector::zeros(p);
        let mut sumsq1: DVector<f64> = DVector::zeros(p);
        let mut sum2: DMatrix<f64> = DMatrix::zeros(p, p);
        let mut sumsq2: DMatrix<f64> = DMatrix::zeros(p, p);
        let mut eps: DVector<f64> = DVector::zeros(q);
        let mut kx = vec![0.0; p];
        for _ in 0..samples {
            for e in eps.iter_mut() {
                *e = StandardNormal.sample(&mut rng);
            }
            let x = &qx.mean + &chol * &eps;
            for (j, z) in zs.iter().enumerate() {
                kx[j] = kernel(&x, z, h);
            }
            for j in 0..p {
                sum1[j] += kx[j];
                sumsq1[j] += kx[j] * kx[j];
                for k in 0..p {
                    let v = kx[j] * kx[k];
                    sum2[(j, k)] += v;
                    sumsq2[(j, k)] += v * v;
                }
            }
        }
        let n = samples as f64;
        let mean1 = sum1 / n;
        let mean2 = sum2 / n;
        let se1 = DVector::from_fn(p, |j, _| {
            ((sumsq1[j] / n - mean1[j] * mean1[j]).max(0.0) / n).sqrt()
        });
        let se2 = DMatrix::from_fn(p, p, |j, k| {
            ((sumsq2[(j, k)] / n - mean2[(j, k)] * mean2[(j, k)]).max(0.0) / n).sqrt()
        });
        (mean1, mean2, se1, se2)
    }

    #[test]
    fn psi_statistics_match_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for trial in 0..3 {
            let q = 2;
            let zs = random_points(&mut rng, 3, q);
            let h = hyper(rng.random_range(0.5..2.0), rng.random_range(0.5..2.0));
            let qx = Gaussian {
                mean: DVector::from_fn(q, |_, _| StandardNormal.sample(&mut rng)),
                cov: random_psd(&mut rng, q, 0.6),
            };
            let stats = psi_stats(&qx, &zs, &h).unwrap();
            let (m1, m2, se1, se2) = mc_psi(&qx, &zs, &h, 200_000, 100 + trial);
            for j in 0..3 {
                assert!(
                    (stats.psi1[j] - m1[j]).abs() <= 3.5 * se1[j] + 1e-12,
                    "psi1[{j}] {} vs MC {} (se {})",
                    stats.psi1[j],
                    m1[j],
                    se1[j]
                );
                for k in 0..3 {
                    assert!(
                        (stats.psi2[(j, k)] - m2[(j, k)]).abs() <= 3.5 * se2[(j, k)] + 1e-12,
                        "psi2[{j},{k}]"
                    );
                }
            }
        }
    }

    #[test]
    fn psi2_dominates_psi1_outer_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..10 {
            let zs = random_points(&mut rng, 4, 2);
            let h = hyper(rng.random_range(0.5..2.0), rng.random_range(0.5..2.0));
            let qx = Gaussian {
                mean: DVector::from_fn(2, |_, _| StandardNormal.sample(&mut rng)),
                cov: random_psd(&mut rng, 2, 0.5),
            };
            let stats = psi_stats(&qx, &zs, &h).unwrap();
            let diff = &stats.psi2 - &stats.psi1 * stats.psi1.transpose();
            let min_eig = diff.symmetric_eigen().eigenvalues.min();
            assert!(min_eig >= -1e-9, "Jensen gap violated: {min_eig}");
        }
    }

    #[test]
    fn expected_nystrom_residual_nonnegative() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..10 {
            let zs = random_points(&mut rng, 5, 2);
            let h = hyper(rng.random_range(0.5..2.0), rng.random_range(0.5..2.0));
            let qx = Gaussian {
                mean: DVector::from_fn(2, |_, _| StandardNormal.sample(&mut rng)),
                cov: random_psd(&mut rng, 2, 0.4),
            };
            let stats = psi_stats(&qx, &zs, &h).unwrap();
            let kpp = gram(&zs, &zs, &h, 1e-6);
            let kpp_inv = kpp.try_inverse().unwrap();
            let ktilde = h.alpha - (&kpp_inv * &stats.psi2).trace();
            assert!(ktilde >= -1e-8, "E[ktilde] = {ktilde}");
        }
    }

    #[test]
    fn psi1_entries_bounded_by_alpha() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let zs = random_points(&mut rng, 6, 2);
        let h = hyper(1.9, 0.9);
        let qx = Gaussian {
            mean: DVector::zeros(2),
            cov: random_psd(&mut rng, 2, 0.5),
        };
        let stats = psi_stats(&qx, &zs, &h).unwrap();
        assert_eq!(stats.psi0, h.alpha);
        assert!(stats.psi1.iter().all(|&v| v > 0.0 && v <= h.alpha));
        assert!(stats
            .psi2
            .iter()
            .all(|&v| v > 0.0 && v <= h.alpha * h.alpha));
    }

    #[test]
    fn non_psd_posterior_rejected() {
        let qx = Gaussian {
            mean: DVector::zeros(2),
            cov: DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -0.5]),
        };
        let zs = vec![DVector::zeros(2)];
        assert!(psi_stats(&qx, &zs, &hyper(1.0, 1.0)).is_err());
    }
}
