//! Downstream analysis of fitted models: embeddings, clustering, association
//! testing against binary outcomes, and cross-validated held-out likelihood.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, FoldAssignment};
use crate::dtm::{DtmFitConfig, McLatents};
use crate::error::{Error, Result};
use crate::HeldoutLl;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelTag {
    Lmm,
    Fpca,
    Dtm,
}

impl std::fmt::Display for ModelTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ModelTag::Lmm => write!(f, "lmm"),
            ModelTag::Fpca => write!(f, "fpca"),
            ModelTag::Dtm => write!(f, "dtm"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectEmbedding {
    pub subject_id: String,
    pub mean: DVector<f64>,
    pub cov: Option<DMatrix<f64>>,
}

/// Per-subject low-dimensional representations from one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingSet {
    pub subjects: Vec<SubjectEmbedding>,
    pub model_tag: ModelTag,
}

impl EmbeddingSet {
    pub fn new(subjects: Vec<SubjectEmbedding>, model_tag: ModelTag) -> Result<Self> {
        if subjects.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let dim = subjects[0].mean.len();
        let mut seen = BTreeSet::new();
        for s in &subjects {
            if !seen.insert(s.subject_id.clone()) {
                return Err(Error::Schema(format!("duplicate subject id {}", s.subject_id)));
            }
            if s.mean.len() != dim {
                return Err(Error::Schema("inconsistent embedding dimensions".into()));
            }
            if let Some(cov) = &s.cov {
                if cov.nrows() != dim || cov.ncols() != dim {
                    return Err(Error::Schema("embedding covariance shape mismatch".into()));
                }
            }
        }
        Ok(EmbeddingSet { subjects, model_tag })
    }

    pub fn dim(&self) -> usize {
        self.subjects[0].mean.len()
    }
}

// ---------------------------------------------------------------------------
// Clustering
// ---------------------------------------------------------------------------

/// Agglomerative clustering of the embedding means with Ward's criterion.
/// Merges the pair with the smallest increase in within-cluster variance;
/// ties break toward the lexically earliest pair of member indices, so the
/// result is deterministic. Returned labels are 0-based, numbered by first
/// appearance in subject order.
pub fn cluster_embeddings(set: &EmbeddingSet, k: usize) -> Result<Vec<usize>> {
    let m = set.subjects.len();
    if k == 0 || k > m {
        return Err(Error::InvalidArgument(format!(
            "cannot form {k} clusters from {m} subjects"
        )));
    }
    struct Cluster {
        members: Vec<usize>,
        centroid: DVector<f64>,
    }
    let mut clusters: Vec<Cluster> = set
        .subjects
        .iter()
        .enumerate()
        .map(|(i, s)| Cluster {
            members: vec![i],
            centroid: s.mean.clone(),
        })
        .collect();

    while clusters.len() > k {
        let mut best: Option<(f64, usize, usize)> = None;
        for a in 0..clusters.len() {
            for b in (a + 1)..clusters.len() {
                let na = clusters[a].members.len() as f64;
                let nb = clusters[b].members.len() as f64;
                let cost =
                    na * nb / (na + nb) * (&clusters[a].centroid - &clusters[b].centroid).norm_squared();
                if best.map_or(true, |(c, _, _)| cost < c) {
                    best = Some((cost, a, b));
                }
            }
        }
        let (_, a, b) = best.unwrap();
        let cb = clusters.remove(b);
        let ca = &mut clusters[a];
        let na = ca.members.len() as f64;
        let nb = cb.members.len() as f64;
        ca.centroid = (&ca.centroid * na + &cb.centroid * nb) / (na + nb);
        ca.members.extend(cb.members);
        ca.members.sort_unstable();
    }

    let mut labels = vec![usize::MAX; m];
    for c in &clusters {
        for &i in &c.members {
            labels[i] = c.members[0];
        }
    }
    // Renumber by first appearance.
    let mut remap = BTreeMap::new();
    let mut next = 0usize;
    Ok(labels
        .iter()
        .map(|&rep| {
            *remap.entry(rep).or_insert_with(|| {
                let id = next;
                next += 1;
                id
            })
        })
        .collect())
}

/// Mean silhouette coefficient of a labelled point set (Euclidean).
pub fn silhouette(points: &[DVector<f64>], labels: &[usize]) -> f64 {
    let m = points.len();
    assert_eq!(m, labels.len());
    let classes: BTreeSet<usize> = labels.iter().cloned().collect();
    if classes.len() < 2 {
        return 0.0;
    }
    let mut total = 0.0;
    for i in 0..m {
        let mut sums: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
        for j in 0..m {
            if i == j {
                continue;
            }
            let e = sums.entry(labels[j]).or_insert((0.0, 0));
            e.0 += (&points[i] - &points[j]).norm();
            e.1 += 1;
        }
        let own = sums.get(&labels[i]).cloned();
        let a = match own {
            Some((s, c)) if c > 0 => s / c as f64,
            // Singleton cluster: silhouette defined as 0.
            _ => {
                continue;
            }
        };
        let b = sums
            .iter()
            .filter(|(&l, _)| l != labels[i])
            .map(|(_, &(s, c))| s / c as f64)
            .fold(f64::INFINITY, f64::min);
        total += (b - a) / a.max(b);
    }
    total / m as f64
}

/// Adjusted Rand index between two labelings of the same points.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len());
    let n = a.len();
    let mut table: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    let mut rows: BTreeMap<usize, usize> = BTreeMap::new();
    let mut cols: BTreeMap<usize, usize> = BTreeMap::new();
    for i in 0..n {
        *table.entry((a[i], b[i])).or_insert(0) += 1;
        *rows.entry(a[i]).or_insert(0) += 1;
        *cols.entry(b[i]).or_insert(0) += 1;
    }
    let c2 = |x: usize| (x * x.saturating_sub(1)) as f64 / 2.0;
    let sum_ij: f64 = table.values().map(|&v| c2(v)).sum();
    let sum_a: f64 = rows.values().map(|&v| c2(v)).sum();
    let sum_b: f64 = cols.values().map(|&v| c2(v)).sum();
    let total = c2(n);
    let expected = sum_a * sum_b / total;
    let max = 0.5 * (sum_a + sum_b);
    if (max - expected).abs() < 1e-300 {
        return 1.0;
    }
    (sum_ij - expected) / (max - expected)
}

// ---------------------------------------------------------------------------
// Association testing
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AssociationResult {
    pub statistic: f64,
    pub p_value: f64,
    pub n_permutations: usize,
}

fn energy_statistic(dist: &DMatrix<f64>, labels: &[bool]) -> f64 {
    let idx_a: Vec<usize> = (0..labels.len()).filter(|&i| labels[i]).collect();
    let idx_b: Vec<usize> = (0..labels.len()).filter(|&i| !labels[i]).collect();
    let (na, nb) = (idx_a.len() as f64, idx_b.len() as f64);
    let mut ab = 0.0;
    for &i in &idx_a {
        for &j in &idx_b {
            ab += dist[(i, j)];
        }
    }
    let mut aa = 0.0;
    for &i in &idx_a {
        for &j in &idx_a {
            aa += dist[(i, j)];
        }
    }
    let mut bb = 0.0;
    for &i in &idx_b {
        for &j in &idx_b {
            bb += dist[(i, j)];
        }
    }
    2.0 * ab / (na * nb) - aa / (na * na) - bb / (nb * nb)
}

/// Permutation two-sample test for association between the embedding and a
/// binary outcome, based on the energy distance between the two groups of
/// embedding means. The p-value uses the add-one estimator
/// `(1 + #{perm >= observed}) / (1 + n_permutations)`.
pub fn association_test(
    set: &EmbeddingSet,
    outcome: &BTreeMap<String, bool>,
    n_permutations: usize,
    seed: u64,
) -> Result<AssociationResult> {
    if n_permutations == 0 {
        return Err(Error::InvalidArgument("need at least one permutation".into()));
    }
    let mut labels = Vec::with_capacity(set.subjects.len());
    for s in &set.subjects {
        let Some(&v) = outcome.get(&s.subject_id) else {
            return Err(Error::Schema(format!(
                "no outcome for subject {}",
                s.subject_id
            )));
        };
        labels.push(v);
    }
    let n_true = labels.iter().filter(|&&v| v).count();
    if n_true == 0 || n_true == labels.len() {
        return Err(Error::InvalidArgument(
            "association test requires both outcome classes".into(),
        ));
    }

    let m = set.subjects.len();
    let dist = DMatrix::from_fn(m, m, |i, j| {
        (&set.subjects[i].mean - &set.subjects[j].mean).norm()
    });
    let observed = energy_statistic(&dist, &labels);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut perm = labels.clone();
    let mut at_least = 0usize;
    for _ in 0..n_permutations {
        perm.shuffle(&mut rng);
        if energy_statistic(&dist, &perm) >= observed {
            at_least += 1;
        }
    }
    Ok(AssociationResult {
        statistic: observed,
        p_value: (1 + at_least) as f64 / (1 + n_permutations) as f64,
        n_permutations,
    })
}

// ---------------------------------------------------------------------------
// Cross-validated held-out likelihood
// ---------------------------------------------------------------------------

/// What to fit inside each cross-validation fold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "kebab-case")]
pub enum ModelSpec {
    Lmm,
    Fpca { q: usize },
    Dtm { config: DtmFitConfig },
}

impl ModelSpec {
    pub fn label(&self) -> String {
        match self {
            ModelSpec::Lmm => "lmm".into(),
            ModelSpec::Fpca { q } => format!("fpca(q={q})"),
            ModelSpec::Dtm { .. } => "dtm".into(),
        }
    }
}

/// Basis shape rebuilt from the training split of every fold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BasisSpec {
    pub dimension: usize,
    pub degree: usize,
}

impl Default for BasisSpec {
    fn default() -> Self {
        BasisSpec {
            dimension: 5,
            degree: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelCvResult {
    pub label: String,
    /// Mean held-out log-likelihood of each fold, per subject and per
    /// observation.
    pub fold_subject_ll: Vec<f64>,
    pub fold_obs_ll: Vec<f64>,
    pub subject_ll_mean: f64,
    pub subject_ll_sd: f64,
    pub obs_ll_mean: f64,
    pub obs_ll_sd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub k: usize,
    pub mc_samples: usize,
    pub models: Vec<ModelCvResult>,
}

fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let sd = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, sd)
}

/// Cross-validated held-out log-likelihood for each requested model. LMM and
/// reduced-rank FPCA are scored in closed form; the trajectory map is scored
/// by Monte Carlo over the latent prior with `mc_samples` draws per subject.
pub fn evaluate_cv(
    ds: &Dataset,
    folds: &FoldAssignment,
    specs: &[ModelSpec],
    basis_spec: &BasisSpec,
    mc_samples: usize,
    seed: u64,
) -> Result<CvReport> {
    if specs.is_empty() {
        return Err(Error::InvalidArgument("no models requested".into()));
    }
    let k = folds.k;
    let mut per_model: Vec<(Vec<f64>, Vec<f64>)> = vec![(Vec::new(), Vec::new()); specs.len()];

    for fold in 0..k {
        let (train_idx, test_idx): (Vec<usize>, Vec<usize>) = (0..ds.m()).partition(|&i| {
            folds.fold_of_subject.get(&ds.trajectories[i].subject_id) != Some(&fold)
        });
        if train_idx.is_empty() || test_idx.is_empty() {
            return Err(Error::InvalidArgument(format!("fold {fold} leaves an empty split")));
        }
        let train = ds.subset(&train_idx)?;
        let test = ds.subset(&test_idx)?;
        let basis = crate::basis::BasisConfig::from_dataset(
            &train,
            basis_spec.dimension,
            basis_spec.degree,
        )?;

        for (si, spec) in specs.iter().enumerate() {
            let lls: Vec<HeldoutLl> = match spec {
                ModelSpec::Lmm => {
                    let model =
                        crate::lmm::fit_lmm(&train, &basis, &crate::lmm::EmConfig::default())?;
                    test.trajectories
                        .iter()
                        .map(|t| crate::lmm::lmm_heldout_ll(&model, t))
                        .collect::<Result<_>>()?
                }
                ModelSpec::Fpca { q } => {
                    let warm =
                        crate::lmm::fit_lmm(&train, &basis, &crate::lmm::EmConfig::default())?;
                    let model = crate::fpca::fit_fpca(
                        &train,
                        &basis,
                        *q,
                        &crate::lmm::EmConfig::default(),
                        Some(&warm),
                    )?;
                    test.trajectories
                        .iter()
                        .map(|t| crate::fpca::fpca_heldout_ll(&model, t))
                        .collect::<Result<_>>()?
                }
                ModelSpec::Dtm { config } => {
                    let mut cfg = *config;
                    cfg.seed = cfg.seed ^ seed;
                    let state = crate::dtm::fit_dtm(&train, &basis, &cfg)?;
                    let mut rng =
                        ChaCha8Rng::seed_from_u64(seed ^ (fold as u64).wrapping_mul(0x9e37_79b9));
                    test.trajectories
                        .iter()
                        .map(|t| {
                            let draw_seed: u64 = rng.random();
                            let ll = crate::dtm::heldout_ll_mc(
                                &state,
                                t,
                                mc_samples,
                                draw_seed,
                                McLatents::Prior,
                            )?;
                            Ok(HeldoutLl::from_subject_ll(ll, t.len()))
                        })
                        .collect::<Result<_>>()?
                }
            };
            let subj_mean = lls.iter().map(|l| l.subject_ll).sum::<f64>() / lls.len() as f64;
            let obs_mean = lls.iter().map(|l| l.obs_ll).sum::<f64>() / lls.len() as f64;
            per_model[si].0.push(subj_mean);
            per_model[si].1.push(obs_mean);
        }
    }

    let models = specs
        .iter()
        .zip(per_model)
        .map(|(spec, (subj, obs))| {
            let (sm, ss) = mean_sd(&subj);
            let (om, os) = mean_sd(&obs);
            ModelCvResult {
                label: spec.label(),
                fold_subject_ll: subj,
                fold_obs_ll: obs,
                subject_ll_mean: sm,
                subject_ll_sd: ss,
                obs_ll_mean: om,
                obs_ll_sd: os,
            }
        })
        .collect();
    Ok(CvReport {
        k,
        mc_samples,
        models,
    })
}
