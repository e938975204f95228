//! `dtm` — simulate, fit, embed, predict, cluster, evaluate, associate, and
//! plot longitudinal trajectory data with the trajectory map and its
//! baselines.
//!
//! Exit codes: 0 success, 2 usage/config error, 3 data error, 4 numerical
//! failure.

mod output;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use dtm_core::analysis::{
    self, BasisSpec, EmbeddingSet, ModelSpec, ModelTag, SubjectEmbedding,
};
use dtm_core::basis::BasisConfig;
use dtm_core::data::{self, CsvSchema, SimConfig};
use dtm_core::dtm::{self, DtmFitConfig, LocalOptConfig};
use dtm_core::error::Error;
use dtm_core::model_file::{load_model, save_model, ModelPayload};

#[derive(Parser)]
#[command(name = "dtm", version, about = "Trajectory map modeling toolkit")]
struct Cli {
    /// Cap on worker threads (reserved; execution is single-threaded).
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with known latent structure.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Where to write the latent ground truth (CSV).
        #[arg(long)]
        truth: Option<PathBuf>,
    },
    /// Fit a model to a dataset and write it as versioned JSON.
    Fit {
        #[arg(long)]
        model: String,
        #[arg(long)]
        data: PathBuf,
        /// Optional JSON fit configuration; defaults are used when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Embed every subject of a dataset with a fitted model.
    Embed {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Predict a trajectory at a fixed latent point.
    Predict {
        #[arg(long)]
        model: PathBuf,
        /// Latent coordinates, comma separated ("0.3,-1.2").
        #[arg(long)]
        x: String,
        /// Prediction times, comma separated.
        #[arg(long)]
        times: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Ward-cluster an embedding file.
    Cluster {
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        k: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cross-validated held-out log-likelihood comparison.
    Evaluate {
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated subset of lmm,fpca,dtm.
        #[arg(long)]
        models: String,
        #[arg(long, default_value_t = 10)]
        folds: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Optional JSON overriding the per-model fit configuration.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Permutation test between an embedding and a binary outcome column.
    Associate {
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        outcomes: PathBuf,
        #[arg(long)]
        outcome_col: String,
        #[arg(long, default_value_t = 10000)]
        permutations: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render an embedding scatter as SVG, colored by cluster.
    Plot {
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        clusters: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Trajectory-map model for per-cluster mean trajectories.
        #[arg(long)]
        model: Option<PathBuf>,
        /// Where to write the per-cluster mean-trajectory CSV.
        #[arg(long)]
        traj_out: Option<PathBuf>,
    },
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SimulateRunConfig {
    seed: u64,
    simulation: SimConfig,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct FitRunConfig {
    basis: BasisSpec,
    em: dtm_core::lmm::EmConfig,
    /// FPCA rank.
    q: Option<usize>,
    dtm: DtmFitConfig,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct EvaluateRunConfig {
    basis: BasisSpec,
    fpca_q: Option<usize>,
    dtm: DtmFitConfig,
    mc_samples: Option<usize>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::InvalidArgument(_) => 2,
        Error::Schema(_) | Error::Parse { .. } | Error::EmptyDataset | Error::Io(_) => 3,
        Error::Numerical(_) => 4,
        Error::Serde(_) => 2,
    }
}

fn read_config<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, Error> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text)
        .map_err(|e| Error::InvalidArgument(format!("{}: {e}", path.display())))
}

fn parse_float_list(text: &str, what: &str) -> Result<Vec<f64>, Error> {
    text.split(',')
        .map(|tok| {
            tok.trim()
                .parse::<f64>()
                .map_err(|_| Error::InvalidArgument(format!("bad {what} entry {tok:?}")))
        })
        .collect()
}

fn run(cmd: Command) -> Result<(), Error> {
    match cmd {
        Command::Simulate { config, out, truth } => {
            let cfg: SimulateRunConfig = read_config(&config)?;
            let (ds, gt) = data::simulate(&cfg.simulation, cfg.seed)?;
            output::atomic(&out, |path| data::save_dataset(&ds, path))?;
            if let Some(truth_path) = truth {
                output::atomic(&truth_path, |path| {
                    let mut text = String::from("subject_id");
                    for j in 0..cfg.simulation.latent_dim {
                        text.push_str(&format!(",x{}", j + 1));
                    }
                    text.push_str(",cluster\n");
                    for (i, t) in ds.trajectories.iter().enumerate() {
                        text.push_str(&t.subject_id);
                        for v in gt.latents[i].iter() {
                            text.push_str(&format!(",{v}"));
                        }
                        text.push_str(&format!(",{}\n", gt.cluster_labels[i]));
                    }
                    std::fs::write(path, text).map_err(Error::from)
                })?;
            }
            Ok(())
        }
        Command::Fit {
            model,
            data,
            config,
            out,
        } => {
            let cfg: FitRunConfig = match config {
                Some(p) => read_config(&p)?,
                None => FitRunConfig::default(),
            };
            let ds = data::load_dataset(&data, &CsvSchema::default())?;
            let basis = BasisConfig::from_dataset(&ds, cfg.basis.dimension, cfg.basis.degree)?;
            let payload = match model.as_str() {
                "lmm" => ModelPayload::Lmm(dtm_core::lmm::fit_lmm(&ds, &basis, &cfg.em)?),
                "fpca" => {
                    let warm = dtm_core::lmm::fit_lmm(&ds, &basis, &cfg.em)?;
                    let q = cfg.q.unwrap_or(2);
                    ModelPayload::Fpca(dtm_core::fpca::fit_fpca(
                        &ds,
                        &basis,
                        q,
                        &cfg.em,
                        Some(&warm),
                    )?)
                }
                "dtm" => {
                    let c = &cfg.dtm;
                    println!(
                        "dtm fit: batch={} epochs={} lr0={} p={} q={}",
                        c.batch_size, c.epochs, c.lr0, c.p, c.q
                    );
                    ModelPayload::Dtm(dtm::fit_dtm(&ds, &basis, c)?)
                }
                other => {
                    return Err(Error::InvalidArgument(format!(
                        "unknown model {other:?} (expected lmm, fpca, or dtm)"
                    )))
                }
            };
            output::atomic(&out, |path| save_model(path, &payload))
        }
        Command::Embed { model, data, out } => {
            let payload = load_model(&model)?;
            let ds = data::load_dataset(&data, &CsvSchema::default())?;
            let set = match &payload {
                ModelPayload::Lmm(m) => dtm_core::lmm::lmm_embed(m, &ds)?,
                ModelPayload::Fpca(m) => dtm_core::fpca::fpca_embed_set(m, &ds)?,
                ModelPayload::Dtm(state) => {
                    let opt = LocalOptConfig::default();
                    let subjects = ds
                        .trajectories
                        .iter()
                        .map(|t| {
                            let g = dtm::embed_new(state, t, &opt)?;
                            Ok(SubjectEmbedding {
                                subject_id: t.subject_id.clone(),
                                mean: g.mean,
                                cov: Some(g.cov),
                            })
                        })
                        .collect::<Result<Vec<_>, Error>>()?;
                    EmbeddingSet::new(subjects, ModelTag::Dtm)?
                }
            };
            output::atomic(&out, |path| output::write_embeddings(path, &set))
        }
        Command::Predict {
            model,
            x,
            times,
            out,
        } => {
            let payload = load_model(&model)?;
            let ModelPayload::Dtm(state) = payload else {
                return Err(Error::InvalidArgument(
                    "predict requires a trajectory-map model".into(),
                ));
            };
            let x = DVector::from_vec(parse_float_list(&x, "latent coordinate")?);
            if x.len() != state.q {
                return Err(Error::InvalidArgument(format!(
                    "latent point has {} coordinates but the model uses q = {}",
                    x.len(),
                    state.q
                )));
            }
            let times = parse_float_list(&times, "time")?;
            let pred = dtm::predict_trajectory(&state, &x, &times)?;
            output::atomic(&out, |path| {
                let mut text = String::from("time,mean,sd\n");
                for (i, t) in times.iter().enumerate() {
                    text.push_str(&format!(
                        "{t},{},{}\n",
                        pred.mean[i],
                        pred.cov[(i, i)].max(0.0).sqrt()
                    ));
                }
                std::fs::write(path, text).map_err(Error::from)
            })
        }
        Command::Cluster {
            embeddings,
            k,
            out,
        } => {
            let set = output::read_embeddings(&embeddings)?;
            let labels = analysis::cluster_embeddings(&set, k)?;
            output::atomic(&out, |path| {
                let mut text = String::from("subject_id,cluster\n");
                for (s, l) in set.subjects.iter().zip(&labels) {
                    text.push_str(&format!("{},{l}\n", s.subject_id));
                }
                std::fs::write(path, text).map_err(Error::from)
            })
        }
        Command::Evaluate {
            data,
            models,
            folds,
            seed,
            config,
            out,
        } => {
            let cfg: EvaluateRunConfig = match config {
                Some(p) => read_config(&p)?,
                None => EvaluateRunConfig::default(),
            };
            let ds = data::load_dataset(&data, &CsvSchema::default())?;
            let specs = models
                .split(',')
                .map(|name| match name.trim() {
                    "lmm" => Ok(ModelSpec::Lmm),
                    "fpca" => Ok(ModelSpec::Fpca {
                        q: cfg.fpca_q.unwrap_or(2),
                    }),
                    "dtm" => Ok(ModelSpec::Dtm { config: cfg.dtm }),
                    other => Err(Error::InvalidArgument(format!("unknown model {other:?}"))),
                })
                .collect::<Result<Vec<_>, Error>>()?;
            let assignment = data::split_folds(&ds, folds, seed)?;
            let report = analysis::evaluate_cv(
                &ds,
                &assignment,
                &specs,
                &cfg.basis,
                cfg.mc_samples.unwrap_or(256),
                seed,
            )?;
            output::atomic(&out, |path| output::write_cv_report(path, &report))
        }
        Command::Associate {
            embeddings,
            outcomes,
            outcome_col,
            permutations,
            seed,
            out,
        } => {
            let set = output::read_embeddings(&embeddings)?;
            let ds = data::load_dataset(&outcomes, &CsvSchema::default())?;
            let mut map = BTreeMap::new();
            for t in &ds.trajectories {
                let Some(v) = t.outcomes.as_ref().and_then(|o| o.get(&outcome_col)) else {
                    return Err(Error::Schema(format!(
                        "{} has no outcome column {outcome_col:?} for subject {}",
                        outcomes.display(),
                        t.subject_id
                    )));
                };
                map.insert(t.subject_id.clone(), *v);
            }
            let res = analysis::association_test(&set, &map, permutations, seed)?;
            output::atomic(&out, |path| {
                let text = format!(
                    "outcome,statistic,p_value,n_permutations\n{outcome_col},{},{},{}\n",
                    res.statistic, res.p_value, res.n_permutations
                );
                std::fs::write(path, text).map_err(Error::from)
            })
        }
        Command::Plot {
            embeddings,
            clusters,
            out,
            model,
            traj_out,
        } => {
            let set = output::read_embeddings(&embeddings)?;
            let labels = match &clusters {
                Some(p) => output::read_clusters(p, &set)?,
                None => vec![0usize; set.subjects.len()],
            };
            output::atomic(&out, |path| output::write_scatter_svg(path, &set, &labels))?;
            if let Some(traj_path) = traj_out {
                let Some(model_path) = model else {
                    return Err(Error::InvalidArgument(
                        "--traj-out requires --model".into(),
                    ));
                };
                let ModelPayload::Dtm(state) = load_model(&model_path)? else {
                    return Err(Error::InvalidArgument(
                        "--traj-out requires a trajectory-map model".into(),
                    ));
                };
                output::atomic(&traj_path, |path| {
                    output::write_cluster_trajectories(path, &state, &set, &labels)
                })?;
            }
            Ok(())
        }
    }
}
