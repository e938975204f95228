//! Datasets of sparse, irregularly sampled scalar time series.
//!
//! The canonical on-disk format is long-format CSV with a header:
//! `subject_id,time,value[,outcome...]`. Outcome columns hold binary labels
//! (`0/1/true/false`) that must be constant within a subject.

use std::collections::{BTreeMap, HashSet};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::basis::BasisConfig;
use crate::error::{Error, Result};

/// One subject's trajectory: observation times (years since first symptom,
/// sorted non-decreasing), measurements, and optional binary outcome labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub subject_id: String,
    pub times: Vec<f64>,
    pub values: Vec<f64>,
    pub outcomes: Option<BTreeMap<String, bool>>,
}

impl Trajectory {
    /// Validates lengths, finiteness, and time ordering. Unsorted times are
    /// sorted (carrying values along). Empty trajectories are permitted here;
    /// dataset loading guarantees at least one observation per subject.
    pub fn new(
        subject_id: String,
        times: Vec<f64>,
        values: Vec<f64>,
        outcomes: Option<BTreeMap<String, bool>>,
    ) -> Result<Self> {
        if times.len() != values.len() {
            return Err(Error::InvalidArgument(format!(
                "subject {subject_id}: times/values length mismatch"
            )));
        }
        if times.iter().chain(values.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "subject {subject_id}: non-finite time or value"
            )));
        }
        let mut pairs: Vec<(f64, f64)> = times.into_iter().zip(values).collect();
        pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        let (times, values) = pairs.into_iter().unzip();
        Ok(Trajectory {
            subject_id,
            times,
            values,
            outcomes,
        })
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn values_vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.values)
    }
}

/// A collection of trajectories with unique subject ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub trajectories: Vec<Trajectory>,
}

impl Dataset {
    pub fn new(trajectories: Vec<Trajectory>) -> Result<Self> {
        if trajectories.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let mut seen = HashSet::new();
        for t in &trajectories {
            if !seen.insert(t.subject_id.as_str()) {
                return Err(Error::InvalidArgument(format!(
                    "duplicate subject id {}",
                    t.subject_id
                )));
            }
        }
        Ok(Dataset { trajectories })
    }

    /// Number of subjects.
    pub fn m(&self) -> usize {
        self.trajectories.len()
    }

    /// Total observation count across subjects.
    pub fn n(&self) -> usize {
        self.trajectories.iter().map(|t| t.len()).sum()
    }

    pub fn subset(&self, keep: &[usize]) -> Result<Dataset> {
        Dataset::new(keep.iter().map(|&i| self.trajectories[i].clone()).collect())
    }
}

/// Column names for long-format CSV input.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CsvSchema {
    pub subject: String,
    pub time: String,
    pub value: String,
}

impl Default for CsvSchema {
    fn default() -> Self {
        CsvSchema {
            subject: "subject_id".into(),
            time: "time".into(),
            value: "value".into(),
        }
    }
}

/// Loads a long-format CSV dataset. Columns beyond the three named in the
/// schema are treated as binary outcome columns.
pub fn load_dataset(path: &Path, schema: &CsvSchema) -> Result<Dataset> {
    let file = std::fs::File::open(path)?;
    let mut lines = BufReader::new(file).lines();
    let header = match lines.next() {
        Some(h) => h?,
        None => return Err(Error::EmptyDataset),
    };
    let cols: Vec<String> = header.split(',').map(|s| s.trim().to_string()).collect();
    let find = |name: &str| -> Result<usize> {
        cols.iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::Schema(format!("missing column '{name}'")))
    };
    let subj_idx = find(&schema.subject)?;
    let time_idx = find(&schema.time)?;
    let value_idx = find(&schema.value)?;
    let outcome_cols: Vec<(usize, String)> = cols
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != subj_idx && *i != time_idx && *i != value_idx)
        .map(|(i, c)| (i, c.clone()))
        .collect();

    // Group rows by subject, preserving first-appearance order.
    let mut order: Vec<String> = Vec::new();
    let mut groups: BTreeMap<String, (Vec<f64>, Vec<f64>, BTreeMap<String, bool>)> =
        BTreeMap::new();
    let mut row_no = 1usize;
    for line in lines {
        row_no += 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(|s| s.trim()).collect();
        if fields.len() != cols.len() {
            return Err(Error::Parse {
                row: row_no,
                message: format!("expected {} fields, found {}", cols.len(), fields.len()),
            });
        }
        let parse_f64 = |idx: usize, what: &str| -> Result<f64> {
            let v: f64 = fields[idx].parse().map_err(|_| Error::Parse {
                row: row_no,
                message: format!("non-numeric {what} '{}'", fields[idx]),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    row: row_no,
                    message: format!("non-finite {what}"),
                });
            }
            Ok(v)
        };
        let subject = fields[subj_idx].to_string();
        let time = parse_f64(time_idx, "time")?;
        let value = parse_f64(value_idx, "value")?;
        let entry = groups.entry(subject.clone()).or_insert_with(|| {
            order.push(subject.clone());
            (Vec::new(), Vec::new(), BTreeMap::new())
        });
        entry.0.push(time);
        entry.1.push(value);
        for (idx, name) in &outcome_cols {
            let label = match fields[*idx] {
                "0" | "false" => false,
                "1" | "true" => true,
                other => {
                    return Err(Error::Parse {
                        row: row_no,
                        message: format!("outcome column '{name}' has non-binary value '{other}'"),
                    })
                }
            };
            if let Some(prev) = entry.2.insert(name.clone(), label) {
                if prev != label {
                    return Err(Error::Parse {
                        row: row_no,
                        message: format!(
                            "conflicting values for outcome '{name}' within subject {subject}"
                        ),
                    });
                }
            }
        }
    }
    if order.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let trajectories = order
        .into_iter()
        .map(|id| {
            let (times, values, outcomes) = groups.remove(&id).unwrap();
            let outcomes = if outcome_cols.is_empty() {
                None
            } else {
                Some(outcomes)
            };
            Trajectory::new(id, times, values, outcomes)
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(trajectories)
}

/// Writes a dataset back to long-format CSV with the default schema.
pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    let mut outcome_names: Vec<String> = Vec::new();
    if let Some(first) = ds.trajectories.first() {
        if let Some(out) = &first.outcomes {
            outcome_names = out.keys().cloned().collect();
        }
    }
    for t in &ds.trajectories {
        let names: Vec<String> = t
            .outcomes
            .as_ref()
            .map(|o| o.keys().cloned().collect())
            .unwrap_or_default();
        if names != outcome_names {
            return Err(Error::InvalidArgument(
                "inconsistent outcome columns across subjects".into(),
            ));
        }
    }
    let mut file = std::fs::File::create(path)?;
    write!(file, "subject_id,time,value")?;
    for name in &outcome_names {
        write!(file, ",{name}")?;
    }
    writeln!(file)?;
    for t in &ds.trajectories {
        for (time, value) in t.times.iter().zip(&t.values) {
            write!(file, "{},{},{}", t.subject_id, time, value)?;
            if let Some(out) = &t.outcomes {
                for name in &outcome_names {
                    write!(file, ",{}", if out[name] { 1 } else { 0 })?;
                }
            }
            writeln!(file)?;
        }
    }
    Ok(())
}

/// Subject-level assignment of each subject to one of `k` folds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub k: usize,
    pub fold_of_subject: BTreeMap<String, usize>,
}

impl FoldAssignment {
    pub fn fold_members(&self, fold: usize) -> Vec<&str> {
        self.fold_of_subject
            .iter()
            .filter(|(_, &f)| f == fold)
            .map(|(id, _)| id.as_str())
            .collect()
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut file = std::fs::File::create(path)?;
        writeln!(file, "subject_id,fold")?;
        for (id, fold) in &self.fold_of_subject {
            writeln!(file, "{id},{fold}")?;
        }
        Ok(())
    }
}

/// Deterministic balanced subject-level k-fold split.
pub fn split_folds(ds: &Dataset, k: usize, seed: u64) -> Result<FoldAssignment> {
    if k < 2 {
        return Err(Error::InvalidArgument("fold count must be at least 2".into()));
    }
    if k > ds.m() {
        return Err(Error::InvalidArgument(format!(
            "fold count {k} exceeds subject count {}",
            ds.m()
        )));
    }
    let mut ids: Vec<&str> = ds
        .trajectories
        .iter()
        .map(|t| t.subject_id.as_str())
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let fold_of_subject = ids
        .into_iter()
        .enumerate()
        .map(|(pos, id)| (id.to_string(), pos % k))
        .collect();
    Ok(FoldAssignment { k, fold_of_subject })
}

/// Latent-to-coefficient map used by the synthetic generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MapKind {
    Linear,
    NonlinearWarp,
}

/// Synthetic dataset configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub m: usize,
    pub latent_dim: usize,
    /// (min, median target, max) for the per-subject observation count.
    pub obs_count_law: (usize, usize, usize),
    pub time_horizon: f64,
    pub noise_sd: f64,
    pub map_kind: MapKind,
    /// Latent cluster centers; empty means a single standard-normal cloud.
    #[serde(default)]
    pub cluster_centers: Vec<Vec<f64>>,
}

/// Ground truth recorded by the generator for recovery tests.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    pub latents: Vec<DVector<f64>>,
    pub coefficients: Vec<DVector<f64>>,
    pub cluster_labels: Vec<usize>,
    pub map: DMatrix<f64>,
    pub mu: f64,
    pub basis: BasisConfig,
}

// Within-cluster latent standard deviation.
const CLUSTER_SD: f64 = 0.5;

// Quadratic warp gain; mild enough that the latent geometry survives the
// push-forward, strong enough that the coefficient law is visibly curved.
const WARP_GAIN: f64 = 0.2;

fn warp(x: &DVector<f64>) -> DVector<f64> {
    let q = x.len();
    let mut g = x.clone();
    if q == 1 {
        g[0] = x[0] + WARP_GAIN * (x[0] * x[0] - 1.0);
    } else {
        for k in 1..q {
            g[k] = x[k] + WARP_GAIN * (x[k - 1] * x[k - 1] - 1.0);
        }
    }
    g
}

/// Draws a synthetic dataset: latents from cluster centers, coefficients
/// through a (possibly warped) linear map, observations on a shared B-spline
/// basis with iid Gaussian noise.
pub fn simulate(cfg: &SimConfig, seed: u64) -> Result<(Dataset, GroundTruth)> {
    if cfg.m < 1 {
        return Err(Error::InvalidArgument("subject count must be positive".into()));
    }
    if !(cfg.time_horizon > 0.0) {
        return Err(Error::InvalidArgument("time horizon must be positive".into()));
    }
    if !(cfg.noise_sd >= 0.0) || !cfg.noise_sd.is_finite() {
        return Err(Error::InvalidArgument("noise sd must be finite and nonnegative".into()));
    }
    let (n_min, n_med, n_max) = cfg.obs_count_law;
    if n_min < 1 || n_med < n_min || n_max < n_med {
        return Err(Error::InvalidArgument(
            "obs_count_law must satisfy 1 <= min <= median <= max".into(),
        ));
    }
    for c in &cfg.cluster_centers {
        if c.len() != cfg.latent_dim {
            return Err(Error::InvalidArgument(
                "cluster center dimension does not match latent_dim".into(),
            ));
        }
    }

    let q = cfg.latent_dim;
    let d = 5.max(q + 1);
    let basis = BasisConfig::uniform(d, 2, 0.0, cfg.time_horizon)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = StandardNormal;

    let map = DMatrix::from_fn(d, q, |_, _| normal.sample(&mut rng));
    let mu = 0.0;

    // Geometric observation-count law tuned so the truncated median lands on
    // the target: n_i = min + Geom(p) clamped to max.
    let p_geo = 1.0 - 2f64.powf(-1.0 / ((n_med - n_min) as f64 + 0.5));

    let id_width = cfg.m.to_string().len();
    let mut trajectories = Vec::with_capacity(cfg.m);
    let mut latents = Vec::with_capacity(cfg.m);
    let mut coefficients = Vec::with_capacity(cfg.m);
    let mut cluster_labels = Vec::with_capacity(cfg.m);

    for i in 0..cfg.m {
        let (cluster, mut x) = if cfg.cluster_centers.is_empty() {
            (0, DVector::zeros(q))
        } else {
            let c = rng.random_range(0..cfg.cluster_centers.len());
            (c, DVector::from_column_slice(&cfg.cluster_centers[c]))
        };
        let spread = if cfg.cluster_centers.is_empty() {
            1.0
        } else {
            CLUSTER_SD
        };
        for k in 0..q {
            let e: f64 = normal.sample(&mut rng);
            x[k] += spread * e;
        }
        let g = match cfg.map_kind {
            MapKind::Linear => x.clone(),
            MapKind::NonlinearWarp => warp(&x),
        };
        let w = &map * &g;

        let mut n_i = n_min;
        while n_i < n_max && !rng.random_bool(p_geo) {
            n_i += 1;
        }
        let mut times: Vec<f64> = (0..n_i)
            .map(|_| rng.random_range(0.0..cfg.time_horizon))
            .collect();
        times.sort_by(|a, b| a.partial_cmp(b).unwrap());

        let dm = basis.design_matrix(&times)?;
        let mean = &dm.rows * &w;
        let values: Vec<f64> = (0..n_i)
            .map(|j| {
                let e: f64 = normal.sample(&mut rng);
                mu + mean[j] + cfg.noise_sd * e
            })
            .collect();

        let id = format!("s{:0width$}", i + 1, width = id_width);
        trajectories.push(Trajectory::new(id, times, values, None)?);
        latents.push(x);
        coefficients.push(w);
        cluster_labels.push(cluster);
    }

    let ds = Dataset::new(trajectories)?;
    let truth = GroundTruth {
        latents,
        coefficients,
        cluster_labels,
        map,
        mu,
        basis,
    };
    Ok((ds, truth))
}
