//! Shared fixtures: toy CSV runs and the graph-smooth classification benchmark.
#![allow(dead_code)]

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use specnet::clustering::{build_hierarchy_with_bases, PoolMode};
use specnet::data::{FeatureMatrix, LabeledDataset, Targets, Task, ZScoreStats};
use specnet::graph::{gaussian_kernel, median_sigma, supervised_distance, KernelParams, SimilarityGraph};
use specnet::spectral::{graph_basis, SpectralBasis};
use specnet::train::{evaluate, fit, graph_context, train_fc_proxy, ProxyConfig, TrainConfig};

pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller
    let u1: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Symmetric kNN graph over uniform points in the unit square, Gaussian weights.
pub fn geometric_graph(n: usize, knn: usize, rng: &mut ChaCha8Rng) -> SimilarityGraph {
    loop {
        let pts: Vec<(f64, f64)> = (0..n).map(|_| (rng.random(), rng.random())).collect();
        let d2 = |i: usize, j: usize| (pts[i].0 - pts[j].0).powi(2) + (pts[i].1 - pts[j].1).powi(2);
        let mut w = Array2::zeros((n, n));
        let mut kth = Vec::with_capacity(n);
        for i in 0..n {
            let mut row: Vec<(f64, usize)> = (0..n).filter(|&j| j != i).map(|j| (d2(i, j), j)).collect();
            row.sort_by(|a, b| a.0.total_cmp(&b.0));
            kth.push(row[knn - 1].0);
            for &(_, j) in &row[..knn] {
                w[[i, j]] = 1.0;
                w[[j, i]] = 1.0;
            }
        }
        let sigma2 = kth.iter().sum::<f64>() / n as f64;
        for i in 0..n {
            for j in 0..n {
                if w[[i, j]] > 0.0 {
                    w[[i, j]] = (-d2(i, j) / sigma2).exp();
                }
            }
        }
        if components(&w) == 1 {
            return SimilarityGraph::new(w, KernelParams::Known).unwrap();
        }
    }
}

/// Connected components by union-find over positive weights.
pub fn components(w: &Array2<f64>) -> usize {
    let n = w.nrows();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], mut i: usize) -> usize {
        while p[i] != i {
            p[i] = p[p[i]];
            i = p[i];
        }
        i
    }
    for i in 0..n {
        for j in i + 1..n {
            if w[[i, j]] > 0.0 {
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                if a != b {
                    parent[a] = b;
                }
            }
        }
    }
    (0..n).filter(|&i| find(&mut parent, i) == i).count()
}

pub struct Benchmark {
    pub graph: SimilarityGraph,
    pub basis: SpectralBasis,
    pub train: LabeledDataset,
    pub valid: LabeledDataset,
}

#[derive(Debug, Clone, Copy)]
pub struct BenchSpec {
    pub nodes: usize,
    pub samples: usize,
    pub classes: usize,
    /// Number of low graph frequencies carrying class information.
    pub low: usize,
    /// Scale of class means in the low band.
    pub separation: f64,
    /// Per-sample jitter in the low band.
    pub jitter: f64,
    /// White noise added on every node.
    pub noise: f64,
}

impl Default for BenchSpec {
    fn default() -> Self {
        BenchSpec { nodes: 256, samples: 2000, classes: 4, low: 10, separation: 1.0, jitter: 1.0, noise: 1.0 }
    }
}

/// Class-conditional signals whose energy sits in the lowest graph frequencies.
pub fn graph_smooth_benchmark(spec: &BenchSpec, seed: u64) -> Benchmark {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let graph = geometric_graph(spec.nodes, 8, &mut rng);
    let basis = graph_basis(graph.weights()).unwrap();
    let means = Array2::from_shape_simple_fn((spec.classes, spec.low), || spec.separation * normal(&mut rng));
    let mut x = Array2::zeros((spec.samples, spec.nodes));
    let mut y = Vec::with_capacity(spec.samples);
    for s in 0..spec.samples {
        let c = s % spec.classes;
        let mut coef = Array1::zeros(spec.nodes);
        for k in 0..spec.low {
            // skip the constant eigenvector
            coef[k + 1] = means[[c, k]] + spec.jitter * normal(&mut rng);
        }
        let signal = basis.igft(coef.view()).unwrap();
        for n in 0..spec.nodes {
            x[[s, n]] = signal[n] * (spec.nodes as f64).sqrt() / 4.0 + spec.noise * normal(&mut rng);
        }
        y.push(c + 1);
    }
    let n_valid = spec.samples / 10;
    let x = FeatureMatrix::new(x).unwrap();
    let train_rows: Vec<usize> = (n_valid..spec.samples).collect();
    let valid_rows: Vec<usize> = (0..n_valid).collect();
    let stats = ZScoreStats::fit(&x.select_rows(&train_rows)).unwrap();
    let x = stats.apply(&x).unwrap();
    let task = Task::Classification { classes: spec.classes };
    let full = LabeledDataset::new(x, Targets::Classes(y), task).unwrap();
    Benchmark { graph, basis, train: full.subset(&train_rows), valid: full.subset(&valid_rows) }
}

/// Trains on `graph` (basis reused when given) and returns (validation accuracy, P_net, train losses).
pub fn train_on_graph(
    graph: &SimilarityGraph,
    basis: Option<SpectralBasis>,
    cfg: &TrainConfig,
    strides: &[usize],
    b: &Benchmark,
) -> (f64, usize, Vec<f64>) {
    let (h, bases) = build_hierarchy_with_bases(graph, strides, cfg.seed, basis).unwrap();
    let ctx = graph_context(Some(&h), bases, PoolMode::Max).unwrap();
    let mut r = fit(cfg, &b.train, None, &ctx, None).unwrap();
    let rep = evaluate(&mut r.network, &b.valid).unwrap();
    (rep.metric, rep.p_net, r.history.iter().map(|h| h.train_loss).collect())
}

pub fn train_fc(cfg: &TrainConfig, b: &Benchmark) -> (f64, usize) {
    let mut r = fit(cfg, &b.train, None, &Default::default(), None).unwrap();
    let rep = evaluate(&mut r.network, &b.valid).unwrap();
    (rep.metric, rep.p_net)
}

/// Proxy-estimated feature graph: Gaussian kernel on first-layer weight distances.
pub fn supervised_graph(b: &Benchmark, proxy: &ProxyConfig) -> SimilarityGraph {
    let p = train_fc_proxy(&b.train, proxy).unwrap();
    let d = supervised_distance(&p.w1);
    gaussian_kernel(&d, median_sigma(&d)).unwrap()
}

pub fn median(v: &mut [f64]) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) }
}

/// Small CSV classification problem on a path-like feature graph.
pub fn write_toy_data(dir: &Path, samples: usize, features: usize, classes: usize, seed: u64) -> (PathBuf, PathBuf) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut xs = String::new();
    let mut ys = String::new();
    for s in 0..samples {
        let c = s % classes;
        let row: Vec<String> = (0..features)
            .map(|j| {
                let phase = (j as f64 / features as f64) * std::f64::consts::PI * (c + 1) as f64;
                format!("{}", phase.sin() + 0.3 * normal(&mut rng))
            })
            .collect();
        writeln!(xs, "{}", row.join(",")).unwrap();
        writeln!(ys, "{}", c + 1).unwrap();
    }
    fs::create_dir_all(dir).unwrap();
    let (fx, fy) = (dir.join("x.csv"), dir.join("y.csv"));
    fs::write(&fx, xs).unwrap();
    fs::write(&fy, ys).unwrap();
    (fx, fy)
}

pub fn toy_config(dir: &Path, graph: serde_json::Value, architecture: &str, strides: &[usize], epochs: usize) -> PathBuf {
    let cfg = serde_json::json!({
        "data": {"features": "x.csv", "targets": "y.csv"},
        "normalization": ["zscore"],
        "task": {"type": "classification", "classes": 3},
        "graph": graph,
        "strides": strides,
        "train": {"architecture": architecture, "epochs": epochs, "batch_size": 16, "n0": 6, "seed": 5,
                  "checkpoint_every": 2, "dropout": 0.1}
    });
    let path = dir.join("config.json");
    fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}
