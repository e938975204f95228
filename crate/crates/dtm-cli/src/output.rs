//! File emission helpers: atomic writes, the embedding/cluster CSV formats,
//! the evaluation report, and the SVG scatter.

use std::io::{BufRead, BufReader};
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use dtm_core::analysis::{CvReport, EmbeddingSet, ModelTag, SubjectEmbedding};
use dtm_core::dtm::DtmState;
use dtm_core::error::{Error, Result};

/// Writes through a temporary file in the target directory and renames on
/// success, so failed commands never leave partial outputs behind.
pub fn atomic<F>(target: &Path, write: F) -> Result<()>
where
    F: FnOnce(&Path) -> Result<()>,
{
    let dir = target.parent().filter(|p| !p.as_os_str().is_empty());
    let tmp = match dir {
        Some(d) => tempfile::NamedTempFile::new_in(d)?,
        None => tempfile::NamedTempFile::new_in(".")?,
    };
    write(tmp.path())?;
    tmp.persist(target)
        .map_err(|e| Error::Io(e.error))?;
    Ok(())
}

/// Embedding CSV: `subject_id,x1..xq,s11..sqq` with the covariance flattened
/// row-major; models without covariances write zeros.
pub fn write_embeddings(path: &Path, set: &EmbeddingSet) -> Result<()> {
    let q = set.dim();
    let mut text = String::from("subject_id");
    for j in 1..=q {
        text.push_str(&format!(",x{j}"));
    }
    for i in 1..=q {
        for j in 1..=q {
            text.push_str(&format!(",s{i}{j}"));
        }
    }
    text.push('\n');
    for s in &set.subjects {
        text.push_str(&s.subject_id);
        for v in s.mean.iter() {
            text.push_str(&format!(",{v}"));
        }
        match &s.cov {
            Some(cov) => {
                for i in 0..q {
                    for j in 0..q {
                        text.push_str(&format!(",{}", cov[(i, j)]));
                    }
                }
            }
            None => {
                for _ in 0..q * q {
                    text.push_str(",0");
                }
            }
        }
        text.push('\n');
    }
    std::fs::write(path, text)?;
    Ok(())
}

pub fn read_embeddings(path: &Path) -> Result<EmbeddingSet> {
    let file = std::fs::File::open(path)?;
    let mut lines = BufReader::new(file).lines().enumerate();
    let header = match lines.next() {
        Some((_, line)) => line?,
        None => return Err(Error::Schema(format!("{}: empty file", path.display()))),
    };
    let cols: Vec<&str> = header.trim().split(',').collect();
    if cols.first() != Some(&"subject_id") {
        return Err(Error::Schema(format!(
            "{}: expected a subject_id column first",
            path.display()
        )));
    }
    let q = cols.iter().filter(|c| c.starts_with('x')).count();
    if q == 0 || cols.len() != 1 + q + q * q {
        return Err(Error::Schema(format!(
            "{}: malformed embedding header {header:?}",
            path.display()
        )));
    }
    let mut subjects = Vec::new();
    for (lineno, line) in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.trim().split(',').collect();
        if fields.len() != cols.len() {
            return Err(Error::Parse {
                row: lineno + 1,
                message: format!("expected {} fields, found {}", cols.len(), fields.len()),
            });
        }
        let parse = |s: &str| {
            s.parse::<f64>().map_err(|_| Error::Parse {
                row: lineno + 1,
                message: format!("bad number {s:?}"),
            })
        };
        let mut mean = DVector::zeros(q);
        for j in 0..q {
            mean[j] = parse(fields[1 + j])?;
        }
        let mut cov = DMatrix::zeros(q, q);
        for i in 0..q {
            for j in 0..q {
                cov[(i, j)] = parse(fields[1 + q + i * q + j])?;
            }
        }
        subjects.push(SubjectEmbedding {
            subject_id: fields[0].to_string(),
            mean,
            cov: Some(cov),
        });
    }
    EmbeddingSet::new(subjects, ModelTag::Dtm)
}

/// Cluster CSV aligned back to an embedding set by subject id.
pub fn read_clusters(path: &Path, set: &EmbeddingSet) -> Result<Vec<usize>> {
    let file = std::fs::File::open(path)?;
    let mut lines = BufReader::new(file).lines().enumerate();
    match lines.next() {
        Some((_, line)) => {
            let header = line?;
            if header.trim() != "subject_id,cluster" {
                return Err(Error::Schema(format!(
                    "{}: expected header subject_id,cluster",
                    path.display()
                )));
            }
        }
        None => return Err(Error::Schema(format!("{}: empty file", path.display()))),
    }
    let mut by_id = std::collections::BTreeMap::new();
    for (lineno, line) in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let (id, label) = line.trim().split_once(',').ok_or(Error::Parse {
            row: lineno + 1,
            message: "expected subject_id,cluster".into(),
        })?;
        let label: usize = label.parse().map_err(|_| Error::Parse {
            row: lineno + 1,
            message: format!("bad cluster label {label:?}"),
        })?;
        by_id.insert(id.to_string(), label);
    }
    set.subjects
        .iter()
        .map(|s| {
            by_id.get(&s.subject_id).copied().ok_or_else(|| {
                Error::Schema(format!("no cluster label for subject {}", s.subject_id))
            })
        })
        .collect()
}

/// Evaluation report CSV: one row per model and fold, then `mean` and `sd`
/// summary rows per model.
pub fn write_cv_report(path: &Path, report: &CvReport) -> Result<()> {
    let mut text = String::from("model,fold,subject_ll,obs_ll\n");
    for m in &report.models {
        for (fold, (s, o)) in m.fold_subject_ll.iter().zip(&m.fold_obs_ll).enumerate() {
            text.push_str(&format!("{},{fold},{s},{o}\n", m.label));
        }
        text.push_str(&format!(
            "{},mean,{},{}\n{},sd,{},{}\n",
            m.label, m.subject_ll_mean, m.obs_ll_mean, m.label, m.subject_ll_sd, m.obs_ll_sd
        ));
    }
    std::fs::write(path, text)?;
    Ok(())
}

const PALETTE: &[&str] = &[
    "#4c78a8", "#f58518", "#54a24b", "#e45756", "#72b7b2", "#eeca3b", "#b279a2", "#ff9da6",
    "#9d755d", "#bab0ac",
];

/// Static scatter of the first two embedding coordinates, colored by cluster.
pub fn write_scatter_svg(path: &Path, set: &EmbeddingSet, labels: &[usize]) -> Result<()> {
    let (w, h, pad) = (640.0, 480.0, 40.0);
    let xs: Vec<f64> = set.subjects.iter().map(|s| s.mean[0]).collect();
    let ys: Vec<f64> = set
        .subjects
        .iter()
        .map(|s| if set.dim() > 1 { s.mean[1] } else { 0.0 })
        .collect();
    let (xmin, xmax) = bounds(&xs);
    let (ymin, ymax) = bounds(&ys);
    let sx = |v: f64| pad + (v - xmin) / (xmax - xmin) * (w - 2.0 * pad);
    let sy = |v: f64| h - pad - (v - ymin) / (ymax - ymin) * (h - 2.0 * pad);

    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" \
         viewBox=\"0 0 {w} {h}\">\n<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n"
    );
    for (i, s) in set.subjects.iter().enumerate() {
        let color = PALETTE[labels[i] % PALETTE.len()];
        svg.push_str(&format!(
            "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"4\" fill=\"{color}\" fill-opacity=\"0.8\">\
             <title>{}</title></circle>\n",
            sx(xs[i]),
            sy(ys[i]),
            s.subject_id
        ));
    }
    svg.push_str("</svg>\n");
    std::fs::write(path, svg)?;
    Ok(())
}

fn bounds(vals: &[f64]) -> (f64, f64) {
    let mut lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
    let mut hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(hi - lo).is_finite() || hi - lo < 1e-9 {
        lo -= 1.0;
        hi += 1.0;
    }
    (lo, hi)
}

/// Per-cluster mean trajectories: the model's predictive mean at each
/// cluster's centroid embedding, on a uniform time grid over the basis
/// domain. CSV columns: cluster,time,mean.
pub fn write_cluster_trajectories(
    path: &Path,
    state: &DtmState,
    set: &EmbeddingSet,
    labels: &[usize],
) -> Result<()> {
    let k = labels.iter().max().map_or(0, |&m| m + 1);
    let (t0, t1) = state.basis.domain;
    let grid: Vec<f64> = (0..=50).map(|i| t0 + (t1 - t0) * i as f64 / 50.0).collect();
    let mut text = String::from("cluster,time,mean\n");
    for c in 0..k {
        let members: Vec<&SubjectEmbedding> = set
            .subjects
            .iter()
            .zip(labels)
            .filter(|(_, &l)| l == c)
            .map(|(s, _)| s)
            .collect();
        if members.is_empty() {
            continue;
        }
        let mut centroid = DVector::zeros(state.q);
        for s in &members {
            centroid += s.mean.rows(0, state.q);
        }
        centroid /= members.len() as f64;
        let pred = dtm_core::dtm::predict_trajectory(state, &centroid, &grid)?;
        for (i, t) in grid.iter().enumerate() {
            text.push_str(&format!("{c},{t},{}\n", pred.mean[i]));
        }
    }
    std::fs::write(path, text)?;
    Ok(())
}
