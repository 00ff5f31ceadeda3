//! Similarity-graph estimation between features: Gaussian diffusion kernels
//! (global and self-tuning bandwidth), supervised distances from a trained
//! first layer, and low-rank projection of a kernel.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::data::FeatureMatrix;
use crate::error::{Error, Result};
use crate::io;
use crate::spectral::symmetric_eigen;

/// Squared Euclidean distances, exactly symmetric with a zero diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    values: Array2<f64>,
}

impl DistanceMatrix {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        let (n, m) = values.dim();
        if n != m {
            return Err(Error::shape(format!("distance matrix is {n}x{m}")));
        }
        for ((i, j), &v) in values.indexed_iter() {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::validation(format!("distance ({i},{j}) = {v}")));
            }
            if v != values[[j, i]] {
                return Err(Error::validation(format!("distance ({i},{j}) is not symmetric")));
            }
            if i == j && v != 0.0 {
                return Err(Error::validation(format!("self-distance of {i} is {v}")));
            }
        }
        Ok(DistanceMatrix { values })
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn n(&self) -> usize {
        self.values.nrows()
    }

    /// Median of the strictly upper-triangular entries.
    pub fn median_off_diagonal(&self) -> Option<f64> {
        let n = self.n();
        let mut v: Vec<f64> = (0..n)
            .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
            .map(|(i, j)| self.values[[i, j]])
            .collect();
        if v.is_empty() {
            return None;
        }
        v.sort_by(f64::total_cmp);
        let mid = v.len() / 2;
        Some(if v.len() % 2 == 1 { v[mid] } else { 0.5 * (v[mid - 1] + v[mid]) })
    }
}

/// Squared distances between the rows of `a`, upper triangle computed once and mirrored.
fn row_sq_distances(a: ArrayView2<f64>) -> DistanceMatrix {
    let rows = a.as_standard_layout();
    let n = rows.nrows();
    let mut d = Array2::zeros((n, n));
    for i in 0..n {
        let ri = rows.row(i);
        for j in i + 1..n {
            let rj = rows.row(j);
            let s: f64 = ri.iter().zip(rj.iter()).map(|(x, y)| (x - y) * (x - y)).sum();
            d[[i, j]] = s;
            d[[j, i]] = s;
        }
    }
    DistanceMatrix { values: d }
}

/// `d(i,j) = ||X_i - X_j||^2` between feature columns.
pub fn pairwise_sq_distances(x: &FeatureMatrix) -> DistanceMatrix {
    row_sq_distances(x.values().t())
}

/// `d_sup(i,j) = ||W1_i - W1_j||^2` between rows of a first-layer weight matrix (`N x M1`).
pub fn supervised_distance(w1: &Array2<f64>) -> DistanceMatrix {
    row_sq_distances(w1.view())
}

/// How a graph's weights were produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum KernelParams {
    Global { sigma: f64 },
    SelfTuning { knn_k: usize, sigmas: Vec<f64> },
    LowRank { rank: usize, base: Box<KernelParams> },
    Coarsened { level: usize },
    Known,
}

/// Symmetric, nonnegative, finite weights with positive degrees.
///
/// Kernel constructors additionally guarantee entries in `[0, 1]` and a unit
/// diagonal; coarsened graphs accumulate mass and only satisfy the base rules.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityGraph {
    weights: Array2<f64>,
    params: KernelParams,
}

impl SimilarityGraph {
    pub fn new(weights: Array2<f64>, params: KernelParams) -> Result<Self> {
        let (n, m) = weights.dim();
        if n != m || n == 0 {
            return Err(Error::shape(format!("weight matrix is {n}x{m}")));
        }
        for ((i, j), &v) in weights.indexed_iter() {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::validation(format!("weight ({i},{j}) = {v}")));
            }
            if v != weights[[j, i]] {
                return Err(Error::validation(format!(
                    "weights not symmetric at ({i},{j}): {v} vs {}",
                    weights[[j, i]]
                )));
            }
        }
        if let Some(i) = weights.rows().into_iter().position(|r| r.sum() <= 0.0) {
            return Err(Error::IsolatedNode(i));
        }
        Ok(SimilarityGraph { weights, params })
    }

    /// Like [`SimilarityGraph::new`] but also requires entries in `[0,1]` and a unit diagonal.
    pub fn new_kernel(weights: Array2<f64>, params: KernelParams) -> Result<Self> {
        let g = SimilarityGraph::new(weights, params)?;
        g.check_kernel()?;
        Ok(g)
    }

    pub fn check_kernel(&self) -> Result<()> {
        for ((i, j), &v) in self.weights.indexed_iter() {
            if v > 1.0 {
                return Err(Error::validation(format!("kernel weight ({i},{j}) = {v} exceeds 1")));
            }
            if i == j && v != 1.0 {
                return Err(Error::validation(format!("kernel diagonal at {i} is {v}, expected 1")));
            }
        }
        Ok(())
    }

    pub fn weights(&self) -> &Array2<f64> {
        &self.weights
    }

    pub fn params(&self) -> &KernelParams {
        &self.params
    }

    pub fn n(&self) -> usize {
        self.weights.nrows()
    }

    /// Relabel nodes: node `i` of the result is node `perm[i]` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> Result<SimilarityGraph> {
        let n = self.n();
        let mut seen = vec![false; n];
        if perm.len() != n || perm.iter().any(|&p| p >= n || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::validation("not a permutation of the graph's nodes"));
        }
        let w = Array2::from_shape_fn((n, n), |(i, j)| self.weights[[perm[i], perm[j]]]);
        Ok(SimilarityGraph { weights: w, params: self.params.clone() })
    }
}

/// `omega(i,j) = exp(-d(i,j) / sigma^2)`.
pub fn gaussian_kernel(d: &DistanceMatrix, sigma: f64) -> Result<SimilarityGraph> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::domain(format!("sigma must be positive, got {sigma}")));
    }
    let s2 = sigma * sigma;
    let w = d.values().mapv(|v| (-v / s2).exp());
    SimilarityGraph::new_kernel(w, KernelParams::Global { sigma })
}

/// Median heuristic: `sigma^2` is the median off-diagonal distance.
///
/// Falls back to `1.0` when there are no positive distances.
pub fn median_sigma(d: &DistanceMatrix) -> f64 {
    match d.median_off_diagonal() {
        Some(m) if m > 0.0 => m.sqrt(),
        _ => 1.0,
    }
}

/// Locally scaled kernel `exp(-d(i,j) / (sigma_i sigma_j))`, where `sigma_i`
/// is the distance from `i` to its `knn_k`-th nearest neighbor (self excluded).
pub fn self_tuning_kernel(d: &DistanceMatrix, knn_k: usize) -> Result<SimilarityGraph> {
    let n = d.n();
    if knn_k < 1 || knn_k + 1 > n {
        return Err(Error::domain(format!("need 1 <= k <= N-1, got k={knn_k}, N={n}")));
    }
    let vals = d.values();
    let mut sigmas = Vec::with_capacity(n);
    let mut row = Vec::with_capacity(n - 1);
    for i in 0..n {
        row.clear();
        row.extend((0..n).filter(|&j| j != i).map(|j| vals[[i, j]]));
        row.sort_by(f64::total_cmp);
        let s = row[knn_k - 1];
        if s <= 0.0 {
            return Err(Error::DegenerateScale { feature: i, k: knn_k });
        }
        sigmas.push(s);
    }
    let mut w = Array2::zeros((n, n));
    for i in 0..n {
        w[[i, i]] = 1.0;
        for j in i + 1..n {
            let v = (-vals[[i, j]] / (sigmas[i] * sigmas[j])).exp();
            w[[i, j]] = v;
            w[[j, i]] = v;
        }
    }
    SimilarityGraph::new_kernel(w, KernelParams::SelfTuning { knn_k, sigmas })
}

/// `sum_{r <= m} mu_r v_r v_r^T` over the `m` largest eigenpairs, without repair.
pub fn low_rank_reconstruct(w: &Array2<f64>, m: usize) -> Result<Array2<f64>> {
    let n = w.nrows();
    if m < 1 || m > n {
        return Err(Error::domain(format!("rank must satisfy 1 <= m <= N, got m={m}, N={n}")));
    }
    let eig = symmetric_eigen(w)?;
    let u = eig.u();
    let vals = eig.eigenvalues();
    // eigenvalues ascending: keep the last m rows
    let top = u.slice(ndarray::s![n - m.., ..]);
    let mut scaled = top.to_owned();
    for (mut row, &mu) in scaled.rows_mut().into_iter().zip(vals.slice(ndarray::s![n - m..]).iter()) {
        row *= mu;
    }
    Ok(top.t().dot(&scaled))
}

/// Rank-`m` projection repaired back into a valid kernel: symmetrized, entries
/// clamped to `[0, 1]`, diagonal reset to 1.
pub fn low_rank_project(g: &SimilarityGraph, m: usize) -> Result<SimilarityGraph> {
    let raw = low_rank_reconstruct(g.weights(), m)?;
    let n = raw.nrows();
    let mut w = Array2::zeros((n, n));
    for i in 0..n {
        w[[i, i]] = 1.0;
        for j in i + 1..n {
            let v = (0.5 * (raw[[i, j]] + raw[[j, i]])).clamp(0.0, 1.0);
            w[[i, j]] = v;
            w[[j, i]] = v;
        }
    }
    SimilarityGraph::new_kernel(
        w,
        KernelParams::LowRank { rank: m, base: Box::new(g.params().clone()) },
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GraphMethod {
    Rbf,
    RbfLocal,
    Supervised,
    SupervisedLowrank,
    Known,
}

impl GraphMethod {
    pub const ALL: [GraphMethod; 5] = [
        GraphMethod::Rbf,
        GraphMethod::RbfLocal,
        GraphMethod::Supervised,
        GraphMethod::SupervisedLowrank,
        GraphMethod::Known,
    ];

    pub fn name(self) -> &'static str {
        match self {
            GraphMethod::Rbf => "rbf",
            GraphMethod::RbfLocal => "rbf-local",
            GraphMethod::Supervised => "supervised",
            GraphMethod::SupervisedLowrank => "supervised-lowrank",
            GraphMethod::Known => "known",
        }
    }
}

impl fmt::Display for GraphMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for GraphMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        GraphMethod::ALL.into_iter().find(|m| m.name() == s).ok_or_else(|| {
            let valid: Vec<_> = GraphMethod::ALL.iter().map(|m| m.name()).collect();
            Error::validation(format!("unknown graph method {s:?}; valid methods: {}", valid.join(", ")))
        })
    }
}

/// Parameters consumed by graph estimation: `N^2/2` for a full kernel,
/// `m N` for a rank-`m` kernel, nothing for a known graph.
pub fn count_graph_parameters(method: GraphMethod, n: usize, rank: Option<usize>) -> usize {
    match method {
        GraphMethod::Known => 0,
        GraphMethod::SupervisedLowrank => rank.map_or(n * n / 2, |m| m * n),
        _ => n * n / 2,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GraphSidecar {
    pub method: GraphMethod,
    pub params: KernelParams,
    pub n: usize,
    pub source_hash: String,
    pub graph_hash: String,
    pub p_graph: usize,
}

/// Writes `<stem>.bin` and `<stem>.json` into `dir`.
pub fn save_graph(
    dir: impl AsRef<Path>,
    stem: &str,
    g: &SimilarityGraph,
    method: GraphMethod,
    source_hash: &str,
    p_graph: usize,
) -> Result<GraphSidecar> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    io::write_matrix(dir.join(format!("{stem}.bin")), g.weights())?;
    let side = GraphSidecar {
        method,
        params: g.params().clone(),
        n: g.n(),
        source_hash: source_hash.to_string(),
        graph_hash: io::matrix_hash(g.weights()),
        p_graph,
    };
    io::write_json(dir.join(format!("{stem}.json")), &side)?;
    Ok(side)
}

pub fn load_graph(dir: impl AsRef<Path>, stem: &str) -> Result<(SimilarityGraph, GraphSidecar)> {
    let dir = dir.as_ref();
    let w = io::read_matrix(dir.join(format!("{stem}.bin")))?;
    let side: GraphSidecar = io::read_json(dir.join(format!("{stem}.json")))?;
    let g = SimilarityGraph::new(w, side.params.clone())?;
    Ok((g, side))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dist(v: Array2<f64>) -> DistanceMatrix {
        DistanceMatrix::new(v).unwrap()
    }

    #[test]
    fn distances_between_columns() {
        let x = FeatureMatrix::new(array![[1.0, 0.0], [0.0, 1.0]]).unwrap();
        let d = pairwise_sq_distances(&x);
        assert_eq!(d.values(), &array![[0.0, 2.0], [2.0, 0.0]]);
        let x = FeatureMatrix::new(array![[1.0, 3.0, 1.0], [2.0, -1.0, 2.0]]).unwrap();
        let d = pairwise_sq_distances(&x);
        assert_eq!(d.values()[[0, 2]], 0.0);
        assert_eq!(d.values()[[0, 1]], 4.0 + 9.0);
    }

    #[test]
    fn supervised_rows() {
        let d = supervised_distance(&array![[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]]);
        assert_eq!(d.values()[[0, 1]], 2.0);
        assert_eq!(d.values()[[0, 2]], 0.0);
    }

    #[test]
    fn gaussian_values() {
        let d = dist(array![[0.0, 4.0], [4.0, 0.0]]);
        let g = gaussian_kernel(&d, 2.0).unwrap();
        assert_eq!(g.weights()[[0, 0]], 1.0);
        assert!((g.weights()[[0, 1]] - (-1f64).exp()).abs() < 1e-15);
        assert!((g.weights()[[0, 1]] - 0.367879).abs() < 1e-6);
        assert!(matches!(gaussian_kernel(&d, 0.0), Err(Error::Domain(_))));
        assert!(matches!(gaussian_kernel(&d, -1.0), Err(Error::Domain(_))));
    }

    #[test]
    fn self_tuning_three_nodes() {
        let d = dist(array![[0.0, 1.0, 4.0], [1.0, 0.0, 9.0], [4.0, 9.0, 0.0]]);
        let g = self_tuning_kernel(&d, 1).unwrap();
        match g.params() {
            KernelParams::SelfTuning { sigmas, .. } => assert_eq!(sigmas, &vec![1.0, 1.0, 4.0]),
            p => panic!("{p:?}"),
        }
        assert!((g.weights()[[0, 2]] - (-1f64).exp()).abs() < 1e-15);
        assert!((g.weights()[[0, 1]] - (-1f64).exp()).abs() < 1e-15);
        assert!((g.weights()[[1, 2]] - (-9.0f64 / 4.0).exp()).abs() < 1e-15);
    }

    #[test]
    fn self_tuning_errors() {
        let d = dist(array![[0.0, 0.0, 4.0], [0.0, 0.0, 9.0], [4.0, 9.0, 0.0]]);
        assert!(matches!(
            self_tuning_kernel(&d, 1),
            Err(Error::DegenerateScale { feature: 0, k: 1 })
        ));
        assert!(self_tuning_kernel(&d, 2).is_ok());
        assert!(matches!(self_tuning_kernel(&d, 3), Err(Error::Domain(_))));
        assert!(matches!(self_tuning_kernel(&d, 0), Err(Error::Domain(_))));
    }

    #[test]
    fn equal_distances_self_tuning_matches_global() {
        let n = 5;
        let c = 2.5;
        let d = dist(Array2::from_shape_fn((n, n), |(i, j)| if i == j { 0.0 } else { c }));
        let local = self_tuning_kernel(&d, 2).unwrap();
        let global = gaussian_kernel(&d, c).unwrap();
        for (a, b) in local.weights().iter().zip(global.weights().iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn low_rank_full_and_rank_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 8;
        let x = FeatureMatrix::new(Array2::from_shape_fn((6, n), |_| rng.random_range(-1.0..1.0))).unwrap();
        let d = pairwise_sq_distances(&x);
        let g = gaussian_kernel(&d, median_sigma(&d)).unwrap();
        let full = low_rank_reconstruct(g.weights(), n).unwrap();
        let err = (&full - g.weights()).mapv(|v| v * v).sum().sqrt();
        assert!(err < 1e-8);

        let ones = SimilarityGraph::new_kernel(Array2::ones((4, 4)), KernelParams::Known).unwrap();
        let p = low_rank_project(&ones, 1).unwrap();
        for v in p.weights().iter() {
            assert!((v - 1.0).abs() < 1e-12);
        }
        assert!(matches!(low_rank_project(&ones, 5), Err(Error::Domain(_))));
        assert!(matches!(low_rank_project(&ones, 0), Err(Error::Domain(_))));
    }

    #[test]
    fn projected_kernel_is_valid() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = FeatureMatrix::new(Array2::from_shape_fn((10, 12), |_| rng.random_range(-1.0..1.0))).unwrap();
        let d = pairwise_sq_distances(&x);
        let g = gaussian_kernel(&d, 0.5 * median_sigma(&d)).unwrap();
        for m in 1..=12 {
            let p = low_rank_project(&g, m).unwrap();
            p.check_kernel().unwrap();
        }
    }

    #[test]
    fn median_sigma_heuristic() {
        let d = dist(array![[0.0, 1.0, 4.0], [1.0, 0.0, 9.0], [4.0, 9.0, 0.0]]);
        assert_eq!(median_sigma(&d), 2.0);
        assert_eq!(median_sigma(&dist(array![[0.0]])), 1.0);
    }

    #[test]
    fn parameter_counts() {
        assert_eq!(count_graph_parameters(GraphMethod::Supervised, 2000, None), 2_000_000);
        assert_eq!(count_graph_parameters(GraphMethod::Rbf, 2000, None), 2_000_000);
        assert_eq!(count_graph_parameters(GraphMethod::SupervisedLowrank, 2000, Some(250)), 500_000);
        assert_eq!(count_graph_parameters(GraphMethod::Known, 2000, None), 0);
    }

    #[test]
    fn method_names_round_trip() {
        for m in GraphMethod::ALL {
            assert_eq!(m.name().parse::<GraphMethod>().unwrap(), m);
        }
        let err = "mutual-info".parse::<GraphMethod>().unwrap_err().to_string();
        assert!(err.contains("rbf-local") && err.contains("supervised-lowrank"));
    }

    #[test]
    fn rejects_invalid_graphs() {
        assert!(SimilarityGraph::new(array![[1.0, 0.5], [0.4, 1.0]], KernelParams::Known).is_err());
        assert!(SimilarityGraph::new(array![[1.0, -0.5], [-0.5, 1.0]], KernelParams::Known).is_err());
        assert!(matches!(
            SimilarityGraph::new(array![[1.0, 0.0], [0.0, 0.0]], KernelParams::Known),
            Err(Error::IsolatedNode(1))
        ));
        assert!(SimilarityGraph::new_kernel(array![[0.0, 1.0], [1.0, 0.0]], KernelParams::Known).is_err());
    }

    #[test]
    fn permutation_relabels() {
        let g = SimilarityGraph::new(array![[1.0, 0.2, 0.0], [0.2, 1.0, 0.7], [0.0, 0.7, 1.0]], KernelParams::Known)
            .unwrap();
        let p = g.permuted(&[2, 0, 1]).unwrap();
        assert_eq!(p.weights()[[0, 2]], 0.7);
        assert_eq!(p.weights()[[1, 2]], 0.2);
        assert!(g.permuted(&[0, 0, 1]).is_err());
    }

    #[test]
    fn graph_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let g = SimilarityGraph::new_kernel(array![[1.0, 0.3], [0.3, 1.0]], KernelParams::Global { sigma: 2.0 })
            .unwrap();
        save_graph(dir.path(), "graph", &g, GraphMethod::Rbf, "src", 2).unwrap();
        let (back, side) = load_graph(dir.path(), "graph").unwrap();
        assert_eq!(back, g);
        assert_eq!(side.method, GraphMethod::Rbf);
        assert_eq!(side.p_graph, 2);
    }
}
