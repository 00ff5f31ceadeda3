//! Pipeline stages. Each stage reads its inputs from, and writes its outputs to, the run directory.
//!
//! ```text
//! <out>/graph.bin, graph.json, normalization.json
//! <out>/basis/level_<l>/{eigenvalues.bin, u.bin, basis.json}
//! <out>/hierarchy/{hierarchy.json, level_<l>.bin}
//! <out>/config.json, history.csv, checkpoints/epoch_<n>/
//! <out>/evaluation.json
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use specnet::clustering::{build_hierarchy_with_bases, ClusterHierarchy};
use specnet::data::{
    load_matrix, load_targets, log_normalize, split_indices, LabeledDataset, MatrixFormat, SplitSpec, ZScoreStats,
};
use specnet::graph::{
    count_graph_parameters, gaussian_kernel, load_graph, low_rank_project, median_sigma, pairwise_sq_distances,
    save_graph, self_tuning_kernel, supervised_distance, GraphMethod, KernelParams, SimilarityGraph,
};
use specnet::io::{matrix_hash, read_json, write_json};
use specnet::nn::Architecture;
use specnet::spectral::{graph_basis, SpectralBasis};
use specnet::train::{self, evaluate, graph_context, train_fc_proxy, EvalReport, FitResult};
use specnet::{Error, Result};

use crate::config::{NormalizationStep, RunConfig};

/// Training/validation split plus optional held-out test set, normalized.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub train: LabeledDataset,
    pub valid: LabeledDataset,
    pub test: Option<LabeledDataset>,
    pub normalization: NormalizationRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationRecord {
    pub steps: Vec<NormalizationStep>,
    pub zscore: Option<ZScoreStats>,
    pub train_rows: Vec<usize>,
    pub valid_rows: Vec<usize>,
}

fn load_dataset(cfg: &RunConfig, features: &Path, targets: &Path) -> Result<LabeledDataset> {
    let x = load_matrix(features, cfg.data.format)?;
    let y = load_targets(targets, cfg.task)?;
    LabeledDataset::new(x, y, cfg.task)
}

/// Loads, splits and normalizes; z-score statistics come from the training rows only.
pub fn prepare_data(cfg: &RunConfig) -> Result<Prepared> {
    let full = load_dataset(cfg, &cfg.data.features, &cfg.data.targets)?;
    let test = match (&cfg.data.test_features, &cfg.data.test_targets) {
        (Some(f), Some(t)) => Some(load_dataset(cfg, f, t)?),
        _ => None,
    };
    let spec = SplitSpec { validation_fraction: cfg.validation_fraction, seed: cfg.seed() };
    let (train_rows, valid_rows) = split_indices(full.len(), &spec)?;

    let mut x = full.features().clone();
    let mut tx = test.as_ref().map(|t| t.features().clone());
    let mut zscore = None;
    for step in &cfg.normalization {
        match step {
            NormalizationStep::Log => {
                x = log_normalize(&x)?;
                tx = tx.map(|t| log_normalize(&t)).transpose()?;
            }
            NormalizationStep::Zscore => {
                let stats = ZScoreStats::fit(&x.select_rows(&train_rows))?;
                x = stats.apply(&x)?;
                tx = tx.map(|t| stats.apply(&t)).transpose()?;
                zscore = Some(stats);
            }
        }
    }
    let full = full.with_features(x)?;
    let test = match (test, tx) {
        (Some(t), Some(x)) => Some(t.with_features(x)?),
        _ => None,
    };
    if let Some(t) = &test {
        if t.features().n_features() != full.features().n_features() {
            return Err(Error::Shape(format!(
                "test set has {} features, training data has {}",
                t.features().n_features(),
                full.features().n_features()
            )));
        }
    }
    Ok(Prepared {
        train: full.subset(&train_rows),
        valid: full.subset(&valid_rows),
        test,
        normalization: NormalizationRecord { steps: cfg.normalization.clone(), zscore, train_rows, valid_rows },
    })
}

fn load_known(path: &Path) -> Result<Array2> {
    let format = match path.extension().and_then(|e| e.to_str()) {
        Some("bin") => MatrixFormat::Binary,
        _ => MatrixFormat::Csv,
    };
    Ok(load_matrix(path, format)?.into_values())
}

type Array2 = ndarray::Array2<f64>;

/// Estimates the feature graph from the training split.
pub fn estimate_graph(cfg: &RunConfig, data: &Prepared) -> Result<(SimilarityGraph, GraphMethod)> {
    let method = cfg.graph.method()?;
    let x = data.train.features();
    let n = x.n_features();
    let global = |d: &specnet::graph::DistanceMatrix| {
        let sigma = cfg.graph.sigma.unwrap_or_else(|| median_sigma(d));
        gaussian_kernel(d, sigma)
    };
    let g = match method {
        GraphMethod::Rbf => global(&pairwise_sq_distances(x))?,
        GraphMethod::RbfLocal => self_tuning_kernel(&pairwise_sq_distances(x), cfg.graph.knn_k)?,
        GraphMethod::Supervised | GraphMethod::SupervisedLowrank => {
            let proxy = train_fc_proxy(&data.train, &cfg.graph.proxy)?;
            let g = global(&supervised_distance(&proxy.w1))?;
            if method == GraphMethod::SupervisedLowrank {
                let rank = cfg.graph.rank.expect("validated");
                if rank > n {
                    return Err(Error::Validation(format!("graph.rank {rank} exceeds {n} features")));
                }
                low_rank_project(&g, rank)?
            } else {
                g
            }
        }
        GraphMethod::Known => {
            let w = load_known(cfg.graph.known_path.as_deref().expect("validated"))?;
            if w.dim() != (n, n) {
                return Err(Error::Shape(format!(
                    "known graph is {}x{}, data has {n} features",
                    w.nrows(),
                    w.ncols()
                )));
            }
            SimilarityGraph::new(w, KernelParams::Known)?
        }
    };
    Ok((g, method))
}

pub fn cmd_estimate_graph(cfg: &RunConfig, out: &Path) -> Result<PathBuf> {
    fs::create_dir_all(out)?;
    let data = prepare_data(cfg)?;
    let (g, method) = estimate_graph(cfg, &data)?;
    let p_graph = count_graph_parameters(method, g.n(), cfg.graph.rank);
    save_graph(out, "graph", &g, method, &matrix_hash(data.train.features().values()), p_graph)?;
    write_json(out.join("normalization.json"), &data.normalization)?;
    Ok(out.join("graph.bin"))
}

fn basis_dir(out: &Path, level: usize) -> PathBuf {
    out.join("basis").join(format!("level_{level}"))
}

pub fn cmd_build_basis(out: &Path) -> Result<PathBuf> {
    let (g, side) = load_graph(out, "graph").map_err(|e| stage("build-basis", "graph.bin", e))?;
    let basis = graph_basis(g.weights())?;
    let dir = basis_dir(out, 0);
    basis.save(&dir, &side.graph_hash)?;
    Ok(dir)
}

fn load_basis_checked(out: &Path, level: usize, graph: &SimilarityGraph) -> Result<SpectralBasis> {
    let (basis, side) = SpectralBasis::load(basis_dir(out, level))?;
    if side.graph_hash != matrix_hash(graph.weights()) {
        return Err(Error::Validation(format!(
            "basis at level {level} was built from a different graph; rerun build-basis"
        )));
    }
    Ok(basis)
}

pub fn cmd_build_hierarchy(cfg: &RunConfig, out: &Path) -> Result<PathBuf> {
    let (g, _) = load_graph(out, "graph").map_err(|e| stage("build-hierarchy", "graph.bin", e))?;
    let b0 = load_basis_checked(out, 0, &g).map_err(|e| stage("build-hierarchy", "basis/level_0", e))?;
    let (h, bases) = build_hierarchy_with_bases(&g, &cfg.strides, cfg.seed(), Some(b0))?;
    let dir = out.join("hierarchy");
    h.save(&dir)?;
    for (l, (basis, level)) in bases.iter().zip(h.levels()).enumerate().skip(1) {
        basis.save(basis_dir(out, l), &matrix_hash(level.graph.weights()))?;
    }
    Ok(dir)
}

fn stage(name: &str, artifact: &str, e: Error) -> Error {
    match e {
        Error::Io(io) => Error::Validation(format!("{name}: cannot read {artifact}: {io}")),
        Error::Shape(m) => Error::Shape(format!("{name}: {m}")),
        other => other,
    }
}

/// Graph artifacts for the configured architecture; FC-only networks need none.
pub fn load_context(cfg: &RunConfig, out: &Path, n_features: usize) -> Result<specnet::nn::GraphContext> {
    let arch: Architecture = cfg.train.architecture.parse()?;
    if !arch.has_graph_layers() {
        return Ok(specnet::nn::GraphContext::default());
    }
    let (g, _) = load_graph(out, "graph").map_err(|e| stage("train", "graph.bin (run estimate-graph)", e))?;
    if g.n() != n_features {
        return Err(Error::Shape(format!("train: graph has {} nodes, data has {n_features} features", g.n())));
    }
    let h = ClusterHierarchy::load(out.join("hierarchy"))
        .map_err(|e| stage("train", "hierarchy (run build-hierarchy)", e))?;
    if h.strides() != cfg.strides.as_slice() {
        return Err(Error::Validation(format!(
            "train: hierarchy strides {:?} differ from config strides {:?}; rerun build-hierarchy",
            h.strides(),
            cfg.strides
        )));
    }
    if h.levels()[0].graph.weights() != g.weights() {
        return Err(Error::Validation("train: hierarchy was built from a different graph".into()));
    }
    let bases = h
        .levels()
        .iter()
        .enumerate()
        .map(|(l, level)| {
            load_basis_checked(out, l, &level.graph).map_err(|e| stage("train", &format!("basis/level_{l}"), e))
        })
        .collect::<Result<Vec<_>>>()?;
    graph_context(Some(&h), bases, cfg.pooling())
}

pub fn cmd_train(cfg: &RunConfig, out: &Path, resume_from: Option<&Path>) -> Result<FitResult> {
    let data = prepare_data(cfg)?;
    let ctx = load_context(cfg, out, data.train.features().n_features())?;
    fs::create_dir_all(out)?;
    write_json(out.join("config.json"), cfg)?;
    match resume_from {
        Some(ckpt) => train::resume(&cfg.train, &data.train, Some(&data.valid), &ctx, ckpt, Some(out)),
        None => train::fit(&cfg.train, &data.train, Some(&data.valid), &ctx, Some(out)),
    }
}

/// Highest-numbered `checkpoints/epoch_<n>` directory.
pub fn latest_checkpoint(out: &Path) -> Result<PathBuf> {
    let dir = out.join("checkpoints");
    let mut best: Option<(usize, PathBuf)> = None;
    for entry in fs::read_dir(&dir).map_err(|e| Error::Validation(format!("no checkpoints in {}: {e}", dir.display())))? {
        let path = entry?.path();
        let epoch = path
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.strip_prefix("epoch_"))
            .and_then(|n| n.parse::<usize>().ok());
        if let Some(e) = epoch {
            if best.as_ref().is_none_or(|(b, _)| e > *b) {
                best = Some((e, path));
            }
        }
    }
    best.map(|(_, p)| p).ok_or_else(|| Error::Validation(format!("no checkpoints in {}", dir.display())))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationFile {
    pub checkpoint: String,
    pub p_graph: Option<usize>,
    pub validation: EvalReport,
    pub test: Option<EvalReport>,
}

pub fn cmd_evaluate(cfg: &RunConfig, out: &Path, checkpoint: Option<&Path>) -> Result<EvaluationFile> {
    let data = prepare_data(cfg)?;
    let n = data.train.features().n_features();
    let ctx = load_context(cfg, out, n)?;
    let ckpt = match checkpoint {
        Some(p) => p.to_path_buf(),
        None => latest_checkpoint(out)?,
    };
    let mut net = train::restore_network(&cfg.train, n, cfg.task, &ctx, &ckpt)?;
    let validation = evaluate(&mut net, &data.valid)?;
    let test = data.test.as_ref().map(|t| evaluate(&mut net, t)).transpose()?;
    let p_graph = read_json::<specnet::graph::GraphSidecar>(out.join("graph.json")).ok().map(|s| s.p_graph);
    let report = EvaluationFile { checkpoint: ckpt.display().to_string(), p_graph, validation, test };
    write_json(out.join("evaluation.json"), &report)?;
    Ok(report)
}

/// Every stage in order, as separate file-backed steps.
pub fn run_pipeline(cfg: &RunConfig, out: &Path) -> Result<EvaluationFile> {
    cmd_estimate_graph(cfg, out)?;
    cmd_build_basis(out)?;
    cmd_build_hierarchy(cfg, out)?;
    cmd_train(cfg, out, None)?;
    cmd_evaluate(cfg, out, None)
}

