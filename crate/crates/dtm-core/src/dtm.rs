//! The trajectory map model: a kernelized reduced-rank mixed model over basis
//! coefficients, trained by stochastic variational inference with inducing
//! points and natural-gradient updates for the global Gaussian.
//!
//! Each coefficient process has covariance `Cov(w_ik, w_jk) = k(x_i, x_j)`
//! across subjects and is bottlenecked through `p` inducing values at shared
//! inputs `Z`. The variational family is a Gaussian `N(m, S)` over the
//! stacked inducing values (column blocks of size `p`, one per basis
//! coefficient) times independent Gaussians `N(m_i, S_i)` per subject.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::basis::BasisConfig;
use crate::data::{Dataset, Trajectory};
use crate::error::{Error, Result};
use crate::kernel::{self, KernelHyper, PsiStats};
use crate::lmm::LmmModel;
use crate::{kron, Gaussian};

pub const DEFAULT_JITTER: f64 = 1e-6;

/// Log-normal prior parameters for the hyperparameters (mean / precision on
/// the log scale).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HyperPriors {
    pub m_s: f64,
    pub rho_s: f64,
    pub m_a: f64,
    pub rho_a: f64,
    pub m_ell: f64,
    pub rho_ell: f64,
}

impl Default for HyperPriors {
    fn default() -> Self {
        HyperPriors {
            m_s: 0.0,
            rho_s: 1.0,
            m_a: 0.0,
            rho_a: 1.0,
            m_ell: 0.0,
            rho_ell: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DtmHyper {
    pub mu: f64,
    pub sigma2: f64,
    pub kernel: KernelHyper,
    pub priors: HyperPriors,
    pub learn_hypers: bool,
}

/// Per-subject variational site.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalSite {
    pub subject_id: String,
    pub q_x: Gaussian,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DtmState {
    pub hyper: DtmHyper,
    /// p inducing inputs in latent space.
    pub z: Vec<DVector<f64>>,
    /// Global variational mean over stacked inducing values (length p*d).
    pub m: DVector<f64>,
    /// Global variational covariance (p*d x p*d).
    pub s: DMatrix<f64>,
    pub locals: Vec<LocalSite>,
    pub basis: BasisConfig,
    pub d: usize,
    pub q: usize,
    pub p: usize,
    pub jitter: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LocalOptConfig {
    pub max_iters: usize,
    pub grad_tol: f64,
}

impl Default for LocalOptConfig {
    fn default() -> Self {
        LocalOptConfig {
            max_iters: 20,
            grad_tol: 1e-6,
        }
    }
}

/// Training configuration; the defaults are the reference protocol.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DtmFitConfig {
    pub q: usize,
    pub p: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr0: f64,
    pub seed: u64,
    pub learn_hypers: bool,
    /// Decay the learning rate per iteration instead of per epoch.
    pub per_iteration_decay: bool,
    pub local_opt: LocalOptConfig,
}

impl Default for DtmFitConfig {
    fn default() -> Self {
        DtmFitConfig {
            q: 2,
            p: 20,
            batch_size: 25,
            epochs: 5,
            lr0: 0.1,
            seed: 0,
            learn_hypers: false,
            per_iteration_decay: false,
            local_opt: LocalOptConfig::default(),
        }
    }
}

/// Signed contributions to the objective; `total = expected_loglik +
/// trace_s_term + ktilde_trace_term - kl_x - kl_u + log_hyper_prior`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElboBreakdown {
    pub expected_loglik: f64,
    pub trace_s_term: f64,
    pub ktilde_trace_term: f64,
    pub kl_x: f64,
    pub kl_u: f64,
    pub log_hyper_prior: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ElboScale {
    Full,
    Svi,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HyperGrads {
    pub d_mu: f64,
    pub d_log_sigma2: f64,
    pub d_log_alpha: f64,
    pub d_log_ell: f64,
}

/// Observations prepared against the shared basis.
pub struct DtmProblem {
    pub subjects: Vec<crate::lmm::PreparedSubject>,
}

pub fn prepare_problem(ds: &Dataset, basis: &BasisConfig) -> Result<DtmProblem> {
    Ok(DtmProblem {
        subjects: crate::lmm::prepare(ds, basis)?,
    })
}

/// Prepares a single trajectory (used for held-out subjects).
pub fn prepare_subject(traj: &Trajectory, basis: &BasisConfig) -> Result<crate::lmm::PreparedSubject> {
    Ok(crate::lmm::PreparedSubject {
        y: traj.values_vector(),
        design: basis.design_matrix(&traj.times)?,
    })
}

pub struct GlobalCache {
    pub kpp: DMatrix<f64>,
    pub kpp_inv: DMatrix<f64>,
    pub logdet_kpp: f64,
}

impl DtmState {
    pub fn global_cache(&self) -> Result<GlobalCache> {
        let kpp = kernel::gram(&self.z, &self.z, &self.hyper.kernel, self.jitter);
        let chol = kpp
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Numerical("inducing Gram matrix not PD".into()))?;
        let logdet_kpp = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        Ok(GlobalCache {
            kpp,
            kpp_inv: chol.inverse(),
            logdet_kpp,
        })
    }

    /// Global mean reshaped as a p x d matrix (column k = inducing values of
    /// coefficient k).
    fn m_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.p, self.d, |i, k| self.m[k * self.p + i])
    }

    fn s_block(&self, k: usize, l: usize) -> DMatrix<f64> {
        self.s
            .view((k * self.p, l * self.p), (self.p, self.p))
            .clone_owned()
    }
}

// ---------------------------------------------------------------------------
// ELBO evaluation
// ---------------------------------------------------------------------------

/// Affine coefficients of one subject's conditional term in the psi
/// statistics: `value = const_term + v'psi1/sigma2 - Tr(W psi2)/(2 sigma2)`.
struct LocalCoeffs {
    v: DVector<f64>,
    w: DMatrix<f64>,
    const_term: f64,
}

fn local_coeffs(
    state: &DtmState,
    cache: &GlobalCache,
    subj: &crate::lmm::PreparedSubject,
) -> LocalCoeffs {
    let sigma2 = state.hyper.sigma2;
    let alpha = state.hyper.kernel.alpha;
    let n = subj.y.len();
    let r = &subj.y - DVector::from_element(n, state.hyper.mu);
    let m_mat = state.m_matrix();
    let g = &subj.design.gram;
    let tr_g = g.trace();
    let p = &cache.kpp_inv;

    let v = p * (&m_mat * (subj.design.rows.transpose() * &r));

    // S_G = sum_kl G[k,l] S_{kl}: the Gram-weighted sum of global blocks.
    let mut s_g = DMatrix::zeros(state.p, state.p);
    for k in 0..state.d {
        for l in 0..state.d {
            if g[(k, l)] != 0.0 {
                s_g += state.s_block(k, l) * g[(k, l)];
            }
        }
    }
    let r_mat = &m_mat * g * m_mat.transpose() + s_g;
    let w = p * r_mat * p - p * tr_g;

    let const_term = -(n as f64) / 2.0 * (2.0 * std::f64::consts::PI * sigma2).ln()
        - r.norm_squared() / (2.0 * sigma2)
        - alpha * tr_g / (2.0 * sigma2);

    LocalCoeffs { v, w, const_term }
}

struct SubjectTerms {
    gauss: f64,
    trace_s: f64,
    ktilde: f64,
}

fn subject_terms(
    state: &DtmState,
    cache: &GlobalCache,
    subj: &crate::lmm::PreparedSubject,
    psi: &PsiStats,
) -> SubjectTerms {
    let sigma2 = state.hyper.sigma2;
    let alpha = state.hyper.kernel.alpha;
    let n = subj.y.len();
    let r = &subj.y - DVector::from_element(n, state.hyper.mu);
    let m_mat = state.m_matrix();
    let g = &subj.design.gram;
    let tr_g = g.trace();
    let p = &cache.kpp_inv;

    let h = p * &psi.psi2 * p;
    // E || y - mu - C m ||^2 expanded in the psi statistics.
    let a = p * &psi.psi1;
    let mean = &subj.design.rows * (m_mat.transpose() * &a);
    let quad = (&m_mat * g * m_mat.transpose()).component_mul(&h).sum();
    let e_sq = r.norm_squared() - 2.0 * r.dot(&mean) + quad;
    let gauss = -(n as f64) / 2.0 * (2.0 * std::f64::consts::PI * sigma2).ln()
        - e_sq / (2.0 * sigma2);

    // Tr(S (G kron H)).
    let mut tr_sa = 0.0;
    for k in 0..state.d {
        for l in 0..state.d {
            if g[(k, l)] != 0.0 {
                tr_sa += g[(k, l)] * state.s_block(k, l).component_mul(&h).sum();
            }
        }
    }
    let trace_s = -tr_sa / (2.0 * sigma2);

    let e_ktilde = alpha - (p * &psi.psi2).trace();
    let ktilde = -e_ktilde * tr_g / (2.0 * sigma2);

    SubjectTerms {
        gauss,
        trace_s,
        ktilde,
    }
}

fn kl_local(q_x: &Gaussian) -> f64 {
    let q = q_x.mean.len();
    let logdet = logdet_spd(&q_x.cov);
    0.5 * (q_x.cov.trace() + q_x.mean.norm_squared() - q as f64 - logdet)
}

fn logdet_spd(m: &DMatrix<f64>) -> f64 {
    if let Some(chol) = m.clone().cholesky() {
        2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>()
    } else {
        m.clone()
            .symmetric_eigen()
            .eigenvalues
            .iter()
            .map(|&l| l.max(1e-300).ln())
            .sum()
    }
}

fn kl_global(state: &DtmState, cache: &GlobalCache) -> f64 {
    let pd = state.p * state.d;
    let mut tr = 0.0;
    for k in 0..state.d {
        let m_k = state.m.rows(k * state.p, state.p).clone_owned();
        let blk = state.s_block(k, k) + &m_k * m_k.transpose();
        tr += blk.component_mul(&cache.kpp_inv).sum();
    }
    let logdet_s = logdet_spd(&state.s);
    0.5 * (tr - pd as f64 + state.d as f64 * cache.logdet_kpp - logdet_s)
}

fn log_hyper_prior(hyper: &DtmHyper) -> f64 {
    let pr = &hyper.priors;
    -pr.rho_s / 2.0 * (hyper.sigma2.ln() - pr.m_s).powi(2)
        - pr.rho_a / 2.0 * (hyper.kernel.alpha.ln() - pr.m_a).powi(2)
        - pr.rho_ell / 2.0 * (hyper.kernel.ell.ln() - pr.m_ell).powi(2)
}

/// Closed-form `E_{q(u) q(x_i)}[log p~(y_i | u, x_i)]` for one subject.
pub fn expected_local_loglik(state: &DtmState, problem: &DtmProblem, i: usize) -> Result<f64> {
    let cache = state.global_cache()?;
    let psi = kernel::psi_stats(&state.locals[i].q_x, &state.z, &state.hyper.kernel)?;
    let t = subject_terms(state, &cache, &problem.subjects[i], &psi);
    Ok(t.gauss + t.trace_s + t.ktilde)
}

/// Evaluates the training objective over a batch of subjects. In `Svi` mode
/// the per-subject lines are rescaled by `m / |batch|` to form an unbiased
/// estimate of the full objective.
pub fn elbo(
    state: &DtmState,
    problem: &DtmProblem,
    batch: &[usize],
    scale: ElboScale,
) -> Result<ElboBreakdown> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let cache = state.global_cache()?;
    let factor = match scale {
        ElboScale::Full => 1.0,
        ElboScale::Svi => problem.subjects.len() as f64 / batch.len() as f64,
    };

    let mut expected_loglik = 0.0;
    let mut trace_s_term = 0.0;
    let mut ktilde_trace_term = 0.0;
    let mut kl_x = 0.0;
    for &i in batch {
        let psi = kernel::psi_stats(&state.locals[i].q_x, &state.z, &state.hyper.kernel)?;
        let t = subject_terms(state, &cache, &problem.subjects[i], &psi);
        expected_loglik += t.gauss;
        trace_s_term += t.trace_s;
        ktilde_trace_term += t.ktilde;
        kl_x += kl_local(&state.locals[i].q_x);
    }
    expected_loglik *= factor;
    trace_s_term *= factor;
    ktilde_trace_term *= factor;
    kl_x *= factor;

    let kl_u = kl_global(state, &cache);
    let lhp = log_hyper_prior(&state.hyper);
    let total = expected_loglik + trace_s_term + ktilde_trace_term - kl_x - kl_u + lhp;
    Ok(ElboBreakdown {
        expected_loglik,
        trace_s_term,
        ktilde_trace_term,
        kl_x,
        kl_u,
        log_hyper_prior: lhp,
        total,
    })
}

// ---------------------------------------------------------------------------
// Initialization
// ---------------------------------------------------------------------------

/// Seeded k-means (Lloyd's algorithm with greedy farthest-point seeding).
fn kmeans(points: &[DVector<f64>], k: usize, seed: u64) -> Vec<DVector<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers: Vec<DVector<f64>> = Vec::with_capacity(k);
    centers.push(points[rng.random_range(0..points.len())].clone());
    while centers.len() < k {
        // k-means++ style: pick proportional to squared distance.
        let d2: Vec<f64> = points
            .iter()
            .map(|p| {
                centers
                    .iter()
                    .map(|c| (p - c).norm_squared())
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        let total: f64 = d2.iter().sum();
        if total <= 0.0 {
            centers.push(points[rng.random_range(0..points.len())].clone());
            continue;
        }
        let mut target = rng.random_range(0.0..total);
        let mut chosen = points.len() - 1;
        for (i, &w) in d2.iter().enumerate() {
            target -= w;
            if target <= 0.0 {
                chosen = i;
                break;
            }
        }
        centers.push(points[chosen].clone());
    }
    for _ in 0..100 {
        let mut sums = vec![DVector::zeros(points[0].len()); k];
        let mut counts = vec![0usize; k];
        for p in points {
            let best = (0..k)
                .min_by(|&a, &b| {
                    (p - &centers[a])
                        .norm_squared()
                        .partial_cmp(&(p - &centers[b]).norm_squared())
                        .unwrap()
                })
                .unwrap();
            sums[best] += p;
            counts[best] += 1;
        }
        let mut moved = 0.0f64;
        for j in 0..k {
            if counts[j] > 0 {
                let new = &sums[j] / counts[j] as f64;
                moved = moved.max((&new - &centers[j]).norm());
                centers[j] = new;
            }
        }
        if moved < 1e-12 {
            break;
        }
    }
    centers
}

/// Initializes the state from a fitted LMM: hyperparameters from the LMM
/// estimate, local means from unit-scaled principal scores of the posterior
/// coefficient means, inducing inputs from k-means over those scores, and the
/// global Gaussian at its prior.
pub fn init_dtm(
    ds: &Dataset,
    basis: &BasisConfig,
    q: usize,
    p: usize,
    seed: u64,
    warm: &LmmModel,
) -> Result<DtmState> {
    if p > ds.m() {
        return Err(Error::InvalidArgument(format!(
            "p = {p} inducing points exceed m = {} subjects",
            ds.m()
        )));
    }
    let d = basis.dimension;
    let coeffs: Vec<DVector<f64>> = ds
        .trajectories
        .iter()
        .map(|t| Ok(crate::lmm::lmm_posterior_coefficients(warm, t)?.mean))
        .collect::<Result<_>>()?;
    let (coeff_mean, pca) = crate::lmm::pca_projection(&coeffs, q);

    let mut scores: Vec<DVector<f64>> = coeffs
        .iter()
        .map(|w| pca.transpose() * (w - &coeff_mean))
        .collect();
    // Unit-scale each latent dimension.
    let m_count = scores.len() as f64;
    for dim in 0..q {
        let mean = scores.iter().map(|s| s[dim]).sum::<f64>() / m_count;
        let var = scores.iter().map(|s| (s[dim] - mean).powi(2)).sum::<f64>() / m_count;
        let sd = var.sqrt().max(1e-12);
        for s in &mut scores {
            s[dim] = (s[dim] - mean) / sd;
        }
    }

    let alpha = warm.sigma.diagonal().mean();
    let kernel = KernelHyper::new(alpha.max(1e-12), 1.0)?;
    let hyper = DtmHyper {
        mu: warm.mu,
        sigma2: warm.sigma2,
        kernel,
        priors: HyperPriors {
            m_s: warm.sigma2.ln(),
            rho_s: 1.0,
            m_a: kernel.alpha.ln(),
            rho_a: 1.0,
            m_ell: 0.0,
            rho_ell: 1.0,
        },
        learn_hypers: false,
    };

    let z = kmeans(&scores, p, seed);
    let locals = ds
        .trajectories
        .iter()
        .zip(&scores)
        .map(|(t, s)| LocalSite {
            subject_id: t.subject_id.clone(),
            q_x: Gaussian {
                mean: s.clone(),
                cov: DMatrix::identity(q, q) * 0.01,
            },
        })
        .collect();

    let kpp = kernel::gram(&z, &z, &hyper.kernel, DEFAULT_JITTER);
    let s = kron(&DMatrix::identity(d, d), &kpp);
    Ok(DtmState {
        hyper,
        z,
        m: DVector::zeros(p * d),
        s,
        locals,
        basis: basis.clone(),
        d,
        q,
        p,
        jitter: DEFAULT_JITTER,
    })
}

// ---------------------------------------------------------------------------
// Local (per-subject) variational updates
// ---------------------------------------------------------------------------

fn n_local_params(q: usize) -> usize {
    q + q * (q + 1) / 2
}

/// Packs (m_i, S_i) into the optimization vector: mean, log-diagonal of the
/// Cholesky factor, then strict lower triangle.
fn pack_local(q_x: &Gaussian) -> DVector<f64> {
    let q = q_x.mean.len();
    let l = q_x
        .cov
        .clone()
        .cholesky()
        .map(|c| c.l())
        .unwrap_or_else(|| DMatrix::identity(q, q) * 1e-6);
    let mut out = DVector::zeros(n_local_params(q));
    out.rows_mut(0, q).copy_from(&q_x.mean);
    for j in 0..q {
        out[q + j] = l[(j, j)].max(1e-154).ln();
    }
    let mut idx = 2 * q;
    for j in 0..q {
        for i in (j + 1)..q {
            out[idx] = l[(i, j)];
            idx += 1;
        }
    }
    out
}

fn unpack_local(theta: &DVector<f64>, q: usize) -> (DVector<f64>, DMatrix<f64>, DMatrix<f64>) {
    let mean = theta.rows(0, q).clone_owned();
    let mut l = DMatrix::zeros(q, q);
    for j in 0..q {
        l[(j, j)] = theta[q + j].exp();
    }
    let mut idx = 2 * q;
    for j in 0..q {
        for i in (j + 1)..q {
            l[(i, j)] = theta[idx];
            idx += 1;
        }
    }
    let cov = &l * l.transpose();
    (mean, cov, l)
}

/// Objective and gradient of the local problem for fixed coefficients.
fn local_objective(
    theta: &DVector<f64>,
    q: usize,
    coeffs: &LocalCoeffs,
    z: &[DVector<f64>],
    h: &KernelHyper,
    sigma2: f64,
) -> Result<(f64, DVector<f64>)> {
    let (mean, cov, l) = unpack_local(theta, q);
    let q_x = Gaussian {
        mean: mean.clone(),
        cov: cov.clone(),
    };
    let psi = kernel::psi_stats(&q_x, z, h)?;

    let value = coeffs.const_term + psi.psi1.dot(&coeffs.v) / sigma2
        - coeffs.w.component_mul(&psi.psi2).sum() / (2.0 * sigma2)
        - kl_local(&q_x);

    let (g1_m, g1_s) = kernel::psi1_weighted_grads(&q_x, z, h, &(&coeffs.v / sigma2))?;
    let (g2_m, g2_s) = kernel::psi2_weighted_grads(&q_x, z, h, &(&coeffs.w * (-0.5 / sigma2)))?;
    let cov_inv = cov
        .clone()
        .cholesky()
        .map(|c| c.inverse())
        .ok_or_else(|| Error::Numerical("local covariance lost positive definiteness".into()))?;
    let grad_m = g1_m + g2_m - &mean;
    let grad_s = g1_s + g2_s - (DMatrix::identity(q, q) - cov_inv) * 0.5;

    // Chain rule through S = L L'.
    let gl = (&grad_s + grad_s.transpose()) * &l;
    let mut grad = DVector::zeros(theta.len());
    grad.rows_mut(0, q).copy_from(&grad_m);
    for j in 0..q {
        grad[q + j] = gl[(j, j)] * l[(j, j)];
    }
    let mut idx = 2 * q;
    for j in 0..q {
        for i in (j + 1)..q {
            grad[idx] = gl[(i, j)];
            idx += 1;
        }
    }
    Ok((value, grad))
}

/// Analytic gradients of the objective w.r.t. one subject's variational mean
/// and covariance (entrywise convention: `dF = sum_ij grad_S[i,j] dS[i,j]`).
pub fn local_gradients(
    state: &DtmState,
    problem: &DtmProblem,
    i: usize,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let cache = state.global_cache()?;
    let coeffs = local_coeffs(state, &cache, &problem.subjects[i]);
    let q_x = &state.locals[i].q_x;
    let sigma2 = state.hyper.sigma2;
    let (g1_m, g1_s) = kernel::psi1_weighted_grads(q_x, &state.z, &state.hyper.kernel, &(&coeffs.v / sigma2))?;
    let (g2_m, g2_s) =
        kernel::psi2_weighted_grads(q_x, &state.z, &state.hyper.kernel, &(&coeffs.w * (-0.5 / sigma2)))?;
    let cov_inv = q_x
        .cov
        .clone()
        .cholesky()
        .map(|c| c.inverse())
        .ok_or_else(|| Error::Numerical("local covariance not PD".into()))?;
    let grad_m = g1_m + g2_m - &q_x.mean;
    let grad_s = g1_s + g2_s - (DMatrix::identity(state.q, state.q) - cov_inv) * 0.5;
    Ok((grad_m, grad_s))
}

/// Polak-Ribiere conjugate-gradient ascent with backtracking line search.
/// Returns the best iterate found; never worse than the start.
fn cg_maximize<F>(mut f: F, x0: DVector<f64>, max_iters: usize, grad_tol: f64) -> (DVector<f64>, f64)
where
    F: FnMut(&DVector<f64>) -> Result<(f64, DVector<f64>)>,
{
    let (mut value, mut grad) = match f(&x0) {
        Ok(vg) => vg,
        Err(_) => return (x0, f64::NEG_INFINITY),
    };
    let mut x = x0;
    let mut dir = grad.clone();
    let mut best = (x.clone(), value);

    for _ in 0..max_iters {
        if grad.norm() < grad_tol {
            break;
        }
        if dir.dot(&grad) <= 0.0 {
            dir = grad.clone();
        }
        // Backtracking Armijo line search along the ascent direction.
        let slope = dir.dot(&grad);
        let mut step = 1.0 / (1.0 + dir.norm());
        let mut accepted = None;
        for _ in 0..30 {
            let cand = &x + &dir * step;
            if let Ok((v, g)) = f(&cand) {
                if v >= value + 1e-4 * step * slope && v.is_finite() {
                    accepted = Some((cand, v, g));
                    break;
                }
            }
            step *= 0.5;
        }
        let Some((x_new, v_new, g_new)) = accepted else {
            break;
        };
        // PR+ restart-safe direction update.
        let beta = (g_new.dot(&(&g_new - &grad)) / grad.norm_squared()).max(0.0);
        dir = &g_new + &dir * beta;
        x = x_new;
        value = v_new;
        grad = g_new;
        if value > best.1 {
            best = (x.clone(), value);
        }
    }
    best
}

/// Maximizes the objective over one subject's variational site, holding the
/// globals fixed. Returns the achieved local objective value.
pub fn local_step(
    state: &mut DtmState,
    problem: &DtmProblem,
    i: usize,
    opt: &LocalOptConfig,
) -> Result<f64> {
    let cache = state.global_cache()?;
    let coeffs = local_coeffs(state, &cache, &problem.subjects[i]);
    let q = state.q;
    let sigma2 = state.hyper.sigma2;
    let z = state.z.clone();
    let h = state.hyper.kernel;

    let theta0 = pack_local(&state.locals[i].q_x);
    let (theta, value) = cg_maximize(
        |t| local_objective(t, q, &coeffs, &z, &h, sigma2),
        theta0,
        opt.max_iters,
        opt.grad_tol,
    );
    let (mean, cov, _) = unpack_local(&theta, q);
    state.locals[i].q_x = Gaussian { mean, cov };
    Ok(value)
}

// ---------------------------------------------------------------------------
// Global natural-gradient updates
// ---------------------------------------------------------------------------

/// Natural parameters of the batch-optimal global Gaussian:
/// `eta1 = (scale/sigma2) sum_i E[C_i]'(y_i - mu)` and
/// `eta2 = -1/2 [ (scale/sigma2) sum_i E[C_i'C_i] + I_d kron Kpp^-1 ]`.
fn natural_target(
    state: &DtmState,
    cache: &GlobalCache,
    problem: &DtmProblem,
    batch: &[usize],
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let pd = state.p * state.d;
    let scale = problem.subjects.len() as f64 / batch.len() as f64;
    let sigma2 = state.hyper.sigma2;
    let p_inv = &cache.kpp_inv;

    let mut eta1 = DVector::zeros(pd);
    let mut quad = DMatrix::zeros(pd, pd);
    for &i in batch {
        let subj = &problem.subjects[i];
        let psi = kernel::psi_stats(&state.locals[i].q_x, &state.z, &state.hyper.kernel)?;
        let n = subj.y.len();
        let r = &subj.y - DVector::from_element(n, state.hyper.mu);
        let a = p_inv * &psi.psi1;
        let bt_r = subj.design.rows.transpose() * &r;
        for k in 0..state.d {
            eta1.rows_mut(k * state.p, state.p).axpy(bt_r[k], &a, 1.0);
        }
        let h = p_inv * &psi.psi2 * p_inv;
        quad += kron(&subj.design.gram, &h);
    }
    eta1 *= scale / sigma2;
    let prior = kron(&DMatrix::identity(state.d, state.d), p_inv);
    let eta2 = (quad * (scale / sigma2) + prior) * -0.5;
    Ok((eta1, eta2))
}

/// The closed-form optimum of q(u) for fixed locals and hyperparameters
/// (full-batch fixed point of the natural-gradient update).
pub fn optimal_global(state: &DtmState, problem: &DtmProblem) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let cache = state.global_cache()?;
    let batch: Vec<usize> = (0..problem.subjects.len()).collect();
    let (eta1, eta2) = natural_target(state, &cache, problem, &batch)?;
    let prec = eta2 * -2.0;
    let chol = prec
        .cholesky()
        .ok_or_else(|| Error::Numerical("optimal global precision not PD".into()))?;
    let s_hat = chol.inverse();
    let m_hat = &s_hat * eta1;
    Ok((m_hat, s_hat))
}

/// One natural-gradient step on (m, S) from a batch estimate. Non-PD
/// intermediates are retried with a halved step (up to 10 times).
pub fn global_natural_step(
    state: &mut DtmState,
    problem: &DtmProblem,
    batch: &[usize],
    lambda: f64,
) -> Result<()> {
    if !(lambda > 0.0 && lambda <= 1.0) {
        if lambda == 0.0 {
            return Ok(());
        }
        return Err(Error::InvalidArgument("step size must lie in (0, 1]".into()));
    }
    let cache = state.global_cache()?;
    let (eta1, eta2) = natural_target(state, &cache, problem, batch)?;

    let s_chol = state
        .s
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Numerical("global covariance not PD".into()))?;
    let prec_old = s_chol.inverse();
    let theta1_old = &prec_old * &state.m;
    let theta2_old = &prec_old * -0.5;

    let mut lam = lambda;
    for _ in 0..10 {
        let theta1 = &theta1_old * (1.0 - lam) + &eta1 * lam;
        let theta2 = &theta2_old * (1.0 - lam) + &eta2 * lam;
        let prec_new = theta2 * -2.0;
        if let Some(chol) = prec_new.cholesky() {
            let s_new = chol.inverse();
            state.m = &s_new * theta1;
            state.s = (&s_new + s_new.transpose()) * 0.5;
            return Ok(());
        }
        lam *= 0.5;
    }
    Err(Error::Numerical(
        "natural-gradient step failed to produce a PD covariance".into(),
    ))
}

// ---------------------------------------------------------------------------
// Hyperparameter gradients
// ---------------------------------------------------------------------------

/// Directional derivative of one subject's conditional term for given
/// derivatives of the psi statistics and Gram matrix.
#[allow(clippy::too_many_arguments)]
fn conditional_directional(
    state: &DtmState,
    cache: &GlobalCache,
    subj: &crate::lmm::PreparedSubject,
    psi: &PsiStats,
    psi1_dot: &DVector<f64>,
    psi2_dot: &DMatrix<f64>,
    k_dot: &DMatrix<f64>,
) -> f64 {
    let sigma2 = state.hyper.sigma2;
    let n = subj.y.len();
    let r = &subj.y - DVector::from_element(n, state.hyper.mu);
    let m_mat = state.m_matrix();
    let g = &subj.design.gram;
    let tr_g = g.trace();
    let p = &cache.kpp_inv;
    let dp = -(p * k_dot * p);

    // Gaussian mean term: (1/sigma2) r' B M' (dP psi1 + P psi1_dot).
    let lin = p * psi1_dot + &dp * &psi.psi1;
    let mean_dot = &subj.design.rows * (m_mat.transpose() * lin);
    let term_mean = r.dot(&mean_dot) / sigma2;

    // Quadratic terms: -(1/2 sigma2) d[Tr(psi2 P R P)] with R = M G M' + S_G.
    let mut s_g = DMatrix::zeros(state.p, state.p);
    for k in 0..state.d {
        for l in 0..state.d {
            if g[(k, l)] != 0.0 {
                s_g += state.s_block(k, l) * g[(k, l)];
            }
        }
    }
    let r_mat = &m_mat * g * m_mat.transpose() + s_g;
    let prp_dot = &dp * &r_mat * p + p * &r_mat * &dp;
    let term_quad = -(psi2_dot.component_mul(&(p * &r_mat * p)).sum()
        + psi.psi2.component_mul(&prp_dot).sum())
        / (2.0 * sigma2);

    // Residual-variance term: +(TrG / 2 sigma2) d[Tr(P psi2)].
    let term_kt = tr_g / (2.0 * sigma2)
        * (dp.component_mul(&psi.psi2).sum() + p.component_mul(psi2_dot).sum());

    term_mean + term_quad + term_kt
}

/// Directional derivative of `-KL(q(u) || p(u))` w.r.t. a Gram perturbation.
fn klu_directional(state: &DtmState, cache: &GlobalCache, k_dot: &DMatrix<f64>) -> f64 {
    let p = &cache.kpp_inv;
    let pkp = p * k_dot * p;
    let mut tr = 0.0;
    for k in 0..state.d {
        let m_k = state.m.rows(k * state.p, state.p).clone_owned();
        let blk = state.s_block(k, k) + &m_k * m_k.transpose();
        tr += blk.component_mul(&pkp).sum();
    }
    0.5 * (tr - state.d as f64 * (p * k_dot).trace())
}

/// Analytic gradients of the batch-rescaled objective w.r.t. the
/// hyperparameters (log scale for the positive ones), including the
/// log-normal prior terms.
pub fn hyper_gradients(
    state: &DtmState,
    problem: &DtmProblem,
    batch: &[usize],
) -> Result<HyperGrads> {
    let cache = state.global_cache()?;
    let scale = problem.subjects.len() as f64 / batch.len() as f64;
    let sigma2 = state.hyper.sigma2;
    let alpha = state.hyper.kernel.alpha;
    let m_mat = state.m_matrix();
    let p = &cache.kpp_inv;
    let k_dot_ell = kernel::gram_dlogell(&state.z, &state.hyper.kernel);

    let mut d_mu = 0.0;
    let mut d_ls2 = 0.0;
    let mut d_la = 0.0;
    let mut d_le = 0.0;
    for &i in batch {
        let subj = &problem.subjects[i];
        let q_x = &state.locals[i].q_x;
        let psi = kernel::psi_stats(q_x, &state.z, &state.hyper.kernel)?;
        let n = subj.y.len();
        let r = &subj.y - DVector::from_element(n, state.hyper.mu);
        let g = &subj.design.gram;
        let tr_g = g.trace();

        let a = p * &psi.psi1;
        let mean = &subj.design.rows * (m_mat.transpose() * &a);

        d_mu += (r.sum() - mean.sum()) / sigma2;

        // Full quadratic form entering the Gaussian line.
        let h = p * &psi.psi2 * p;
        let quad = (&m_mat * g * m_mat.transpose()).component_mul(&h).sum();
        let e_sq = r.norm_squared() - 2.0 * r.dot(&mean) + quad;
        let mut tr_sa = 0.0;
        for k in 0..state.d {
            for l in 0..state.d {
                if g[(k, l)] != 0.0 {
                    tr_sa += g[(k, l)] * state.s_block(k, l).component_mul(&h).sum();
                }
            }
        }
        let e_ktilde = alpha - (p * &psi.psi2).trace();
        d_ls2 += -(n as f64) / 2.0 + (e_sq + tr_sa + e_ktilde * tr_g) / (2.0 * sigma2);

        // log alpha: psi1 scales linearly, psi2 quadratically, Kpp linearly
        // (jitter included), plus the explicit alpha in the residual term.
        let psi2_x2 = &psi.psi2 * 2.0;
        d_la += conditional_directional(state, &cache, subj, &psi, &psi.psi1, &psi2_x2, &cache.kpp)
            - alpha * tr_g / (2.0 * sigma2);

        let (psi1_de, psi2_de) = kernel::psi_dlogell(q_x, &state.z, &state.hyper.kernel)?;
        d_le += conditional_directional(state, &cache, subj, &psi, &psi1_de, &psi2_de, &k_dot_ell);
    }
    d_mu *= scale;
    d_ls2 *= scale;
    d_la *= scale;
    d_le *= scale;

    d_la += klu_directional(state, &cache, &cache.kpp);
    d_le += klu_directional(state, &cache, &k_dot_ell);

    let pr = &state.hyper.priors;
    d_ls2 -= pr.rho_s * (sigma2.ln() - pr.m_s);
    d_la -= pr.rho_a * (alpha.ln() - pr.m_a);
    d_le -= pr.rho_ell * (state.hyper.kernel.ell.ln() - pr.m_ell);

    Ok(HyperGrads {
        d_mu,
        d_log_sigma2: d_ls2,
        d_log_alpha: d_la,
        d_log_ell: d_le,
    })
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

/// Fits the model by SVI: per epoch, shuffle subjects, and for each minibatch
/// refit the local sites, take a natural-gradient step on (m, S), and (when
/// enabled) a plain gradient step on the hyperparameters. A final pass
/// refreshes every local site so all embeddings are current.
pub fn fit_dtm(ds: &Dataset, basis: &BasisConfig, cfg: &DtmFitConfig) -> Result<DtmState> {
    let warm = crate::lmm::fit_lmm(ds, basis, &crate::lmm::EmConfig::default())?;
    fit_dtm_warm(ds, basis, cfg, &warm)
}

pub fn fit_dtm_warm(
    ds: &Dataset,
    basis: &BasisConfig,
    cfg: &DtmFitConfig,
    warm: &LmmModel,
) -> Result<DtmState> {
    if cfg.batch_size == 0 || cfg.epochs == 0 {
        return Err(Error::InvalidArgument("batch size and epochs must be positive".into()));
    }
    let mut state = init_dtm(ds, basis, cfg.q, cfg.p.min(ds.m()), cfg.seed, warm)?;
    state.hyper.learn_hypers = cfg.learn_hypers;
    let problem = prepare_problem(ds, basis)?;
    let m = ds.m();
    // Bootstrap q(u) against the warm-started locals before the stochastic
    // sweeps: at the prior the conditional term is flat in the locals, and a
    // first local pass would collapse them before any signal reaches q(u).
    let all: Vec<usize> = (0..m).collect();
    global_natural_step(&mut state, &problem, &all, 1.0)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut iteration = 0usize;

    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..m).collect();
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size.min(m)) {
            iteration += 1;
            let t = if cfg.per_iteration_decay { iteration } else { epoch };
            let lambda = (cfg.lr0 / t as f64).min(1.0);
            for &i in batch {
                local_step(&mut state, &problem, i, &cfg.local_opt)?;
            }
            global_natural_step(&mut state, &problem, batch, lambda)?;
            if cfg.learn_hypers {
                let grads = hyper_gradients(&state, &problem, batch)?;
                state.hyper.mu += lambda * grads.d_mu;
                state.hyper.sigma2 =
                    (state.hyper.sigma2.ln() + lambda * grads.d_log_sigma2).exp();
                let alpha = (state.hyper.kernel.alpha.ln() + lambda * grads.d_log_alpha).exp();
                let ell = (state.hyper.kernel.ell.ln() + lambda * grads.d_log_ell).exp();
                state.hyper.kernel = KernelHyper::new(alpha, ell)?;
            }
        }
    }
    for i in 0..m {
        local_step(&mut state, &problem, i, &cfg.local_opt)?;
    }
    Ok(state)
}

// ---------------------------------------------------------------------------
// Prediction
// ---------------------------------------------------------------------------

/// Posterior process over the basis coefficients at a latent point `x`,
/// assembled per coefficient block with cross-coefficient covariance from the
/// off-diagonal blocks of S.
pub fn coeff_posterior(state: &DtmState, x: &DVector<f64>) -> Result<Gaussian> {
    let cache = state.global_cache()?;
    let kx = DVector::from_fn(state.p, |j, _| {
        kernel::kernel(x, &state.z[j], &state.hyper.kernel)
    });
    let a = &cache.kpp_inv * &kx;
    let ktilde = (state.hyper.kernel.alpha - kx.dot(&a)).max(0.0);

    let mean = state.m_matrix().transpose() * &a;
    let mut cov = DMatrix::zeros(state.d, state.d);
    for k in 0..state.d {
        for l in 0..state.d {
            cov[(k, l)] = a.dot(&(state.s_block(k, l) * &a));
        }
        cov[(k, k)] += ktilde;
    }
    Ok(Gaussian {
        mean,
        cov: (&cov + cov.transpose()) * 0.5,
    })
}

/// Posterior predictive over a new trajectory at the given times for a fixed
/// latent point.
pub fn predict_trajectory(state: &DtmState, x: &DVector<f64>, times: &[f64]) -> Result<Gaussian> {
    let n = times.len();
    if n == 0 {
        return Ok(Gaussian {
            mean: DVector::zeros(0),
            cov: DMatrix::zeros(0, 0),
        });
    }
    let coeff = coeff_posterior(state, x)?;
    let dm = state.basis.design_matrix(times)?;
    let mean = DVector::from_element(n, state.hyper.mu) + &dm.rows * &coeff.mean;
    let cov = &dm.rows * &coeff.cov * dm.rows.transpose()
        + DMatrix::identity(n, n) * state.hyper.sigma2;
    Ok(Gaussian { mean, cov })
}

/// Variational posterior over the latent representation of a new (possibly
/// partial) trajectory, with globals frozen.
pub fn embed_new(state: &DtmState, traj: &Trajectory, opt: &LocalOptConfig) -> Result<Gaussian> {
    if traj.is_empty() {
        return Ok(Gaussian::standard(state.q));
    }
    let subj = prepare_subject(traj, &state.basis)?;
    let cache = state.global_cache()?;
    let coeffs = local_coeffs(state, &cache, &subj);
    let q = state.q;
    let theta0 = pack_local(&Gaussian::standard(q));
    let (theta, _) = cg_maximize(
        |t| local_objective(t, q, &coeffs, &state.z, &state.hyper.kernel, state.hyper.sigma2),
        theta0,
        opt.max_iters.max(50),
        opt.grad_tol,
    );
    let (mean, cov, _) = unpack_local(&theta, q);
    Ok(Gaussian { mean, cov })
}

/// Where the latent draws for the Monte-Carlo held-out density come from.
pub enum McLatents<'a> {
    Prior,
    Posterior(&'a Gaussian),
}

/// Monte-Carlo estimate of a trajectory's log-density, marginalizing the
/// latent point: `log (1/R) sum_r N(y; mu + B mu(x_r), B Sigma(x_r) B' + sigma2 I)`.
pub fn heldout_ll_mc(
    state: &DtmState,
    traj: &Trajectory,
    draws: usize,
    seed: u64,
    latents: McLatents<'_>,
) -> Result<f64> {
    if draws == 0 {
        return Err(Error::InvalidArgument("need at least one draw".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let y = traj.values_vector();
    let mut log_terms = Vec::with_capacity(draws);
    let chol = match &latents {
        McLatents::Prior => None,
        McLatents::Posterior(g) => Some(
            g.cov
                .clone()
                .cholesky()
                .ok_or_else(|| Error::Numerical("posterior covariance not PD".into()))?
                .l(),
        ),
    };
    for _ in 0..draws {
        let eps = DVector::from_fn(state.q, |_, _| StandardNormal.sample(&mut rng));
        let x = match &latents {
            McLatents::Prior => eps,
            McLatents::Posterior(g) => &g.mean + chol.as_ref().unwrap() * eps,
        };
        let pred = predict_trajectory(state, &x, &traj.times)?;
        log_terms.push(crate::mvn_logpdf(&y, &pred.mean, &pred.cov)?);
    }
    let max = log_terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum_exp: f64 = log_terms.iter().map(|&l| (l - max).exp()).sum();
    Ok(max + (sum_exp / draws as f64).ln())
}

/// Point embeddings (variational means and covariances) for every training
/// subject.
pub fn dtm_embed_set(state: &DtmState) -> Result<crate::analysis::EmbeddingSet> {
    let subjects = state
        .locals
        .iter()
        .map(|site| crate::analysis::SubjectEmbedding {
            subject_id: site.subject_id.clone(),
            mean: site.q_x.mean.clone(),
            cov: Some(site.q_x.cov.clone()),
        })
        .collect();
    crate::analysis::EmbeddingSet::new(subjects, crate::analysis::ModelTag::Dtm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{MapKind, SimConfig};
    use approx::assert_relative_eq;

    fn sim(m: usize, seed: u64) -> Dataset {
        let cfg = SimConfig {
            m,
            latent_dim: 2,
            obs_count_law: (2, 4, 8),
            time_horizon: 10.0,
            noise_sd: 0.4,
            map_kind: MapKind::NonlinearWarp,
            cluster_centers: vec![],
        };
        crate::data::simulate(&cfg, seed).unwrap().0
    }

    fn small_state(seed: u64) -> (Dataset, BasisConfig, DtmState, DtmProblem) {
        let ds = sim(14, seed);
        let basis = crate::basis::BasisConfig::from_dataset(&ds, 4, 2).unwrap();
        let warm = crate::lmm::fit_lmm(&ds, &basis, &crate::lmm::EmConfig::default()).unwrap();
        let state = init_dtm(&ds, &basis, 2, 5, seed, &warm).unwrap();
        let problem = prepare_problem(&ds, &basis).unwrap();
        (ds, basis, state, problem)
    }

    /// Randomizes the variational parts of a state so gradient checks do not
    /// sit at special points.
    fn perturb(state: &mut DtmState, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pd = state.p * state.d;
        for v in state.m.iter_mut() {
            *v += 0.3 * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng);
        }
        let noise = DMatrix::from_fn(pd, pd, |_, _| {
            0.05 * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)
        });
        state.s = &state.s * 0.5 + &noise * noise.transpose();
        for site in &mut state.locals {
            for v in site.q_x.mean.iter_mut() {
                *v += 0.5 * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng);
            }
            let l = DMatrix::from_fn(state.q, state.q, |i, j| {
                if i >= j {
                    0.2 * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)
                } else {
                    0.0
                }
            });
            site.q_x.cov = DMatrix::identity(state.q, state.q) * 0.05 + &l * l.transpose();
        }
    }

    #[test]
    fn conditional_term_is_exact_at_point_masses() {
        // With point-mass locals at the inducing inputs, a deterministic
        // global mean carrying the true coefficients, zero global covariance,
        // and no jitter, the conditional term collapses to a plain Gaussian
        // log-density.
        let ds = sim(10, 3);
        let basis = crate::basis::BasisConfig::from_dataset(&ds, 4, 2).unwrap();
        let problem = prepare_problem(&ds, &basis).unwrap();
        let m = ds.m();
        let d = basis.dimension;
        let q = 2;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let latents: Vec<DVector<f64>> = (0..m)
            .map(|_| DVector::from_fn(q, |_, _| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng) * 2.0))
            .collect();
        let coeffs: Vec<DVector<f64>> = (0..m)
            .map(|_| DVector::from_fn(d, |_, _| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)))
            .collect();
        let mut gm = DVector::zeros(m * d);
        for k in 0..d {
            for i in 0..m {
                gm[k * m + i] = coeffs[i][k];
            }
        }
        let hyper = DtmHyper {
            mu: 0.7,
            sigma2: 0.09,
            kernel: KernelHyper::new(1.3, 0.8).unwrap(),
            priors: HyperPriors::default(),
            learn_hypers: false,
        };
        let state = DtmState {
            hyper,
            z: latents.clone(),
            m: gm,
            s: DMatrix::zeros(m * d, m * d),
            locals: ds
                .trajectories
                .iter()
                .zip(&latents)
                .map(|(t, x)| LocalSite {
                    subject_id: t.subject_id.clone(),
                    q_x: Gaussian {
                        mean: x.clone(),
                        cov: DMatrix::zeros(q, q),
                    },
                })
                .collect(),
            basis: basis.clone(),
            d,
            q,
            p: m,
            jitter: 0.0,
        };
        for i in 0..m {
            let ell = expected_local_loglik(&state, &problem, i).unwrap();
            let subj = &problem.subjects[i];
            let n = subj.y.len();
            let mean = DVector::from_element(n, 0.7) + &subj.design.rows * &coeffs[i];
            let cov = DMatrix::identity(n, n) * 0.09;
            let direct = crate::mvn_logpdf(&subj.y, &mean, &cov).unwrap();
            assert_relative_eq!(ell, direct, max_relative = 1e-6, epsilon = 1e-8);
        }
    }

    #[test]
    fn elbo_kl_terms_vanish_at_the_prior() {
        let (_, _, mut state, problem) = small_state(5);
        // q(u) initialized at the prior: KL(q(u) || p(u)) = 0.
        let batch: Vec<usize> = (0..problem.subjects.len()).collect();
        let b = elbo(&state, &problem, &batch, ElboScale::Full).unwrap();
        assert!(b.kl_u.abs() < 1e-8, "kl_u = {}", b.kl_u);
        // Standard-normal locals make KL(q(x) || p(x)) = 0 too.
        for site in &mut state.locals {
            site.q_x = Gaussian::standard(state.q);
        }
        let b2 = elbo(&state, &problem, &batch, ElboScale::Full).unwrap();
        assert!(b2.kl_x.abs() < 1e-9, "kl_x = {}", b2.kl_x);
        assert_relative_eq!(
            b2.total,
            b2.expected_loglik + b2.trace_s_term + b2.ktilde_trace_term + b2.log_hyper_prior,
            max_relative = 1e-12
        );
    }

    #[test]
    fn svi_scale_is_unbiased_over_disjoint_batches() {
        let (_, _, mut state, problem) = small_state(7);
        perturb(&mut state, 70);
        let m = problem.subjects.len();
        let full: Vec<usize> = (0..m).collect();
        let reference = elbo(&state, &problem, &full, ElboScale::Full).unwrap();
        let halves: [Vec<usize>; 2] = [(0..m / 2).collect(), (m / 2..m).collect()];
        let avg: f64 = halves
            .iter()
            .map(|b| {
                let e = elbo(&state, &problem, b, ElboScale::Svi).unwrap();
                e.total * b.len() as f64 / m as f64
            })
            .sum::<f64>()
            // Each batch term double-counts the global lines; undo that.
            - (reference.log_hyper_prior - reference.kl_u)
                * (halves.iter().map(|b| b.len()).sum::<usize>() as f64 / m as f64 - 1.0);
        assert_relative_eq!(avg, reference.total, max_relative = 1e-10);
    }

    #[test]
    fn local_gradients_match_finite_differences() {
        let (_, _, mut state, problem) = small_state(11);
        perturb(&mut state, 42);
        let cache = state.global_cache().unwrap();
        for i in [0usize, 3, 8] {
            let coeffs = local_coeffs(&state, &cache, &problem.subjects[i]);
            let theta0 = pack_local(&state.locals[i].q_x);
            let (_, grad) = local_objective(
                &theta0,
                state.q,
                &coeffs,
                &state.z,
                &state.hyper.kernel,
                state.hyper.sigma2,
            )
            .unwrap();
            let h = 1e-5;
            for j in 0..theta0.len() {
                let mut tp = theta0.clone();
                tp[j] += h;
                let mut tm = theta0.clone();
                tm[j] -= h;
                let fp = local_objective(&tp, state.q, &coeffs, &state.z, &state.hyper.kernel, state.hyper.sigma2)
                    .unwrap()
                    .0;
                let fm = local_objective(&tm, state.q, &coeffs, &state.z, &state.hyper.kernel, state.hyper.sigma2)
                    .unwrap()
                    .0;
                let fd = (fp - fm) / (2.0 * h);
                assert_relative_eq!(grad[j], fd, max_relative = 1e-4, epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn local_step_never_decreases_the_local_objective() {
        let (_, _, mut state, problem) = small_state(13);
        perturb(&mut state, 99);
        let cache = state.global_cache().unwrap();
        let opt = LocalOptConfig::default();
        for i in 0..problem.subjects.len() {
            let coeffs = local_coeffs(&state, &cache, &problem.subjects[i]);
            let before = local_objective(
                &pack_local(&state.locals[i].q_x),
                state.q,
                &coeffs,
                &state.z,
                &state.hyper.kernel,
                state.hyper.sigma2,
            )
            .unwrap()
            .0;
            let after = local_step(&mut state, &problem, i, &opt).unwrap();
            assert!(
                after >= before - 1e-10,
                "subject {i}: {after} < {before}"
            );
        }
    }

    #[test]
    fn full_batch_natural_step_reaches_the_fixed_point() {
        let (_, _, mut state, problem) = small_state(17);
        perturb(&mut state, 5);
        state.s = (&state.s + state.s.transpose()) * 0.5;
        let batch: Vec<usize> = (0..problem.subjects.len()).collect();
        let (m_hat, s_hat) = optimal_global(&state, &problem).unwrap();
        global_natural_step(&mut state, &problem, &batch, 1.0).unwrap();
        assert_relative_eq!(state.m, m_hat, max_relative = 1e-8, epsilon = 1e-10);
        assert_relative_eq!(state.s, s_hat, max_relative = 1e-8, epsilon = 1e-10);
        // A second full step from the optimum stays put.
        let m1 = state.m.clone();
        let s1 = state.s.clone();
        global_natural_step(&mut state, &problem, &batch, 1.0).unwrap();
        assert_relative_eq!(state.m, m1, max_relative = 1e-8, epsilon = 1e-10);
        assert_relative_eq!(state.s, s1, max_relative = 1e-8, epsilon = 1e-10);
    }

    #[test]
    fn zero_step_is_a_no_op() {
        let (_, _, mut state, problem) = small_state(19);
        let before = state.clone();
        let batch: Vec<usize> = (0..4).collect();
        global_natural_step(&mut state, &problem, &batch, 0.0).unwrap();
        assert_eq!(state, before);
    }

    #[test]
    fn full_batch_natural_step_improves_the_elbo() {
        let (_, _, mut state, problem) = small_state(23);
        perturb(&mut state, 8);
        state.s = (&state.s + state.s.transpose()) * 0.5;
        let batch: Vec<usize> = (0..problem.subjects.len()).collect();
        let before = elbo(&state, &problem, &batch, ElboScale::Full).unwrap().total;
        global_natural_step(&mut state, &problem, &batch, 1.0).unwrap();
        let after = elbo(&state, &problem, &batch, ElboScale::Full).unwrap().total;
        assert!(after >= before - 1e-8, "{after} < {before}");
    }

    #[test]
    fn hyper_gradients_match_finite_differences() {
        let (_, _, mut state, problem) = small_state(29);
        perturb(&mut state, 12);
        state.s = (&state.s + state.s.transpose()) * 0.5;
        let batch = vec![1usize, 4, 7, 10];
        let grads = hyper_gradients(&state, &problem, &batch).unwrap();

        let f = |st: &DtmState| elbo(st, &problem, &batch, ElboScale::Svi).unwrap().total;
        let h = 1e-6;

        let mut sp = state.clone();
        sp.hyper.mu += h;
        let mut sm = state.clone();
        sm.hyper.mu -= h;
        assert_relative_eq!(grads.d_mu, (f(&sp) - f(&sm)) / (2.0 * h), max_relative = 1e-4, epsilon = 1e-6);

        let mut sp = state.clone();
        sp.hyper.sigma2 = (state.hyper.sigma2.ln() + h).exp();
        let mut sm = state.clone();
        sm.hyper.sigma2 = (state.hyper.sigma2.ln() - h).exp();
        assert_relative_eq!(grads.d_log_sigma2, (f(&sp) - f(&sm)) / (2.0 * h), max_relative = 1e-4, epsilon = 1e-6);

        let mut sp = state.clone();
        sp.hyper.kernel = KernelHyper::new((state.hyper.kernel.alpha.ln() + h).exp(), state.hyper.kernel.ell).unwrap();
        let mut sm = state.clone();
        sm.hyper.kernel = KernelHyper::new((state.hyper.kernel.alpha.ln() - h).exp(), state.hyper.kernel.ell).unwrap();
        assert_relative_eq!(grads.d_log_alpha, (f(&sp) - f(&sm)) / (2.0 * h), max_relative = 1e-4, epsilon = 1e-6);

        let mut sp = state.clone();
        sp.hyper.kernel = KernelHyper::new(state.hyper.kernel.alpha, (state.hyper.kernel.ell.ln() + h).exp()).unwrap();
        let mut sm = state.clone();
        sm.hyper.kernel = KernelHyper::new(state.hyper.kernel.alpha, (state.hyper.kernel.ell.ln() - h).exp()).unwrap();
        assert_relative_eq!(grads.d_log_ell, (f(&sp) - f(&sm)) / (2.0 * h), max_relative = 1e-4, epsilon = 1e-6);
    }

    #[test]
    fn prior_state_predicts_the_prior_coefficient_law() {
        let (_, _, state, _) = small_state(31);
        // m = 0 and S = I kron Kpp reproduce the prior: coefficients at any x
        // are N(0, alpha I) up to jitter.
        let alpha = state.hyper.kernel.alpha;
        for x in [
            DVector::from_vec(vec![0.0, 0.0]),
            DVector::from_vec(vec![1.5, -0.7]),
            DVector::from_vec(vec![-3.0, 2.0]),
        ] {
            let g = coeff_posterior(&state, &x).unwrap();
            assert!(g.mean.norm() < 1e-10);
            let expected = DMatrix::identity(state.d, state.d) * alpha;
            assert_relative_eq!(g.cov, expected, max_relative = 1e-4, epsilon = 1e-6);
        }
    }

    #[test]
    fn predict_trajectory_shapes_and_empty_times() {
        let (_, _, state, _) = small_state(37);
        let x = DVector::from_vec(vec![0.3, -0.2]);
        let pred = predict_trajectory(&state, &x, &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(pred.mean.len(), 3);
        assert_eq!(pred.cov.shape(), (3, 3));
        // Observation noise bounds the predictive variance from below.
        for i in 0..3 {
            assert!(pred.cov[(i, i)] >= state.hyper.sigma2 - 1e-12);
        }
        let empty = predict_trajectory(&state, &x, &[]).unwrap();
        assert_eq!(empty.mean.len(), 0);
    }

    #[test]
    fn embedding_an_empty_trajectory_returns_the_prior() {
        let (_, _, state, _) = small_state(41);
        let traj = Trajectory::new("new".into(), vec![], vec![], None).unwrap();
        let g = embed_new(&state, &traj, &LocalOptConfig::default()).unwrap();
        assert_eq!(g.mean, DVector::zeros(state.q));
        assert_eq!(g.cov, DMatrix::identity(state.q, state.q));
    }

    #[test]
    fn fitting_is_deterministic() {
        let ds = sim(20, 43);
        let basis = crate::basis::BasisConfig::from_dataset(&ds, 4, 2).unwrap();
        let cfg = DtmFitConfig {
            p: 8,
            epochs: 2,
            batch_size: 7,
            seed: 77,
            ..Default::default()
        };
        let a = fit_dtm(&ds, &basis, &cfg).unwrap();
        let b = fit_dtm(&ds, &basis, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn training_improves_the_objective() {
        let ds = sim(25, 47);
        let basis = crate::basis::BasisConfig::from_dataset(&ds, 4, 2).unwrap();
        let problem = prepare_problem(&ds, &basis).unwrap();
        let warm = crate::lmm::fit_lmm(&ds, &basis, &crate::lmm::EmConfig::default()).unwrap();
        let init = init_dtm(&ds, &basis, 2, 8, 47, &warm).unwrap();
        let batch: Vec<usize> = (0..ds.m()).collect();
        let before = elbo(&init, &problem, &batch, ElboScale::Full).unwrap().total;
        let cfg = DtmFitConfig {
            p: 8,
            epochs: 3,
            batch_size: 25,
            seed: 47,
            ..Default::default()
        };
        let state = fit_dtm_warm(&ds, &basis, &cfg, &warm).unwrap();
        let after = elbo(&state, &problem, &batch, ElboScale::Full).unwrap().total;
        assert!(after > before, "elbo {after} <= {before}");
    }

    #[test]
    fn heldout_density_is_finite_and_seeded() {
        let ds = sim(15, 53);
        let basis = crate::basis::BasisConfig::from_dataset(&ds, 4, 2).unwrap();
        let cfg = DtmFitConfig {
            p: 6,
            epochs: 1,
            batch_size: 15,
            seed: 53,
            ..Default::default()
        };
        let state = fit_dtm(&ds, &basis, &cfg).unwrap();
        let traj = &ds.trajectories[0];
        let a = heldout_ll_mc(&state, traj, 128, 7, McLatents::Prior).unwrap();
        let b = heldout_ll_mc(&state, traj, 128, 7, McLatents::Prior).unwrap();
        assert!(a.is_finite());
        assert_eq!(a, b);
        let post = embed_new(&state, traj, &LocalOptConfig::default()).unwrap();
        let c = heldout_ll_mc(&state, traj, 128, 7, McLatents::Posterior(&post)).unwrap();
        assert!(c.is_finite());
    }

    #[test]
    fn init_rejects_too_many_inducing_points() {
        let ds = sim(6, 59);
        let basis = crate::basis::BasisConfig::from_dataset(&ds, 4, 2).unwrap();
        let warm = crate::lmm::fit_lmm(&ds, &basis, &crate::lmm::EmConfig::default()).unwrap();
        assert!(init_dtm(&ds, &basis, 2, 7, 0, &warm).is_err());
    }

    #[test]
    fn init_scales_local_means_to_unit_variance() {
        let ds = sim(30, 61);
        let basis = crate::basis::BasisConfig::from_dataset(&ds, 4, 2).unwrap();
        let warm = crate::lmm::fit_lmm(&ds, &basis, &crate::lmm::EmConfig::default()).unwrap();
        let state = init_dtm(&ds, &basis, 2, 10, 0, &warm).unwrap();
        let m = state.locals.len() as f64;
        for dim in 0..state.q {
            let mean: f64 = state.locals.iter().map(|s| s.q_x.mean[dim]).sum::<f64>() / m;
            let var: f64 = state
                .locals
                .iter()
                .map(|s| (s.q_x.mean[dim] - mean).powi(2))
                .sum::<f64>()
                / m;
            assert!(mean.abs() < 1e-9);
            assert_relative_eq!(var, 1.0, max_relative = 1e-6);
        }
        assert_relative_eq!(
            state.hyper.kernel.alpha,
            warm.sigma.diagonal().mean(),
            max_relative = 1e-12
        );
    }
}
