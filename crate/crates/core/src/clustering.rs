//! Multi-resolution spectral clustering, graph coarsening and the overlapping
//! pooling maps built from them.

use std::path::Path;

use ndarray::{Array2, ArrayView1, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{KernelParams, SimilarityGraph};
use crate::io;
use crate::spectral::{graph_basis, SpectralBasis};

const KMEANS_MAX_ITER: usize = 100;
const KMEANS_REL_TOL: f64 = 1e-6;

/// Every id in `0..m` is used at least once.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    assignment: Vec<usize>,
    m: usize,
}

impl Partition {
    pub fn new(assignment: Vec<usize>, m: usize) -> Result<Self> {
        let mut used = vec![false; m];
        for (i, &c) in assignment.iter().enumerate() {
            if c >= m {
                return Err(Error::validation(format!("node {i} assigned to cluster {c} >= {m}")));
            }
            used[c] = true;
        }
        if let Some(c) = used.iter().position(|u| !u) {
            return Err(Error::validation(format!("cluster {c} is empty")));
        }
        Ok(Partition { assignment, m })
    }

    pub fn identity(n: usize) -> Self {
        Partition { assignment: (0..n).collect(), m: n }
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    pub fn n(&self) -> usize {
        self.assignment.len()
    }

    pub fn m(&self) -> usize {
        self.m
    }

    /// Member lists, each sorted ascending.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.m];
        for (i, &c) in self.assignment.iter().enumerate() {
            out[c].push(i);
        }
        out
    }
}

fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Lloyd's k-means on the rows of `points` with seeded farthest-point
/// initialization. Empty clusters are refilled from the largest cluster's
/// farthest member, so every cluster ends non-empty.
pub fn kmeans(points: &Array2<f64>, k: usize, seed: u64) -> Result<Vec<usize>> {
    let n = points.nrows();
    if k < 1 || k > n {
        return Err(Error::domain(format!("need 1 <= k <= N, got k={k}, N={n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = vec![rng.random_range(0..n)];
    let mut is_chosen = vec![false; n];
    is_chosen[chosen[0]] = true;
    let mut min_d: Vec<f64> = (0..n).map(|i| sq_dist(points.row(i), points.row(chosen[0]))).collect();
    while chosen.len() < k {
        let mut best = usize::MAX;
        for i in 0..n {
            if !is_chosen[i] && (best == usize::MAX || min_d[i] > min_d[best]) {
                best = i;
            }
        }
        chosen.push(best);
        is_chosen[best] = true;
        for i in 0..n {
            min_d[i] = min_d[i].min(sq_dist(points.row(i), points.row(best)));
        }
    }
    let mut centers = points.select(Axis(0), &chosen);
    let mut assign = vec![0usize; n];
    let mut prev_inertia = f64::INFINITY;
    for _ in 0..KMEANS_MAX_ITER {
        for i in 0..n {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for c in 0..k {
                let d = sq_dist(points.row(i), centers.row(c));
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            assign[i] = best;
        }
        repair_empty_clusters(points, &mut assign, k);
        centers = cluster_means(points, &assign, k);
        let inertia: f64 = (0..n).map(|i| sq_dist(points.row(i), centers.row(assign[i]))).sum();
        let done = inertia == 0.0 || (prev_inertia - inertia) <= KMEANS_REL_TOL * prev_inertia;
        prev_inertia = inertia;
        if done {
            break;
        }
    }
    Ok(assign)
}

fn cluster_means(points: &Array2<f64>, assign: &[usize], k: usize) -> Array2<f64> {
    let mut sums = Array2::zeros((k, points.ncols()));
    let mut counts = vec![0usize; k];
    for (i, &c) in assign.iter().enumerate() {
        let mut row = sums.row_mut(c);
        row += &points.row(i);
        counts[c] += 1;
    }
    for (mut row, &cnt) in sums.rows_mut().into_iter().zip(counts.iter()) {
        if cnt > 0 {
            row /= cnt as f64;
        }
    }
    sums
}

fn repair_empty_clusters(points: &Array2<f64>, assign: &mut [usize], k: usize) {
    loop {
        let mut counts = vec![0usize; k];
        for &c in assign.iter() {
            counts[c] += 1;
        }
        let Some(empty) = counts.iter().position(|&c| c == 0) else {
            return;
        };
        let mut largest = 0;
        for c in 1..k {
            if counts[c] > counts[largest] {
                largest = c;
            }
        }
        let centers = cluster_means(points, assign, k);
        let mut far = usize::MAX;
        let mut far_d = -1.0;
        for (i, &c) in assign.iter().enumerate() {
            if c == largest {
                let d = sq_dist(points.row(i), centers.row(largest));
                if d > far_d {
                    far_d = d;
                    far = i;
                }
            }
        }
        assign[far] = empty;
    }
}

/// Normalized spectral clustering into `m` clusters: the first `m` Laplacian
/// eigenvectors give node coordinates, rows are scaled to unit length, and
/// the rows are clustered with [`kmeans`].
pub fn spectral_cluster(w: &SimilarityGraph, m: usize, seed: u64) -> Result<Partition> {
    check_cluster_count(w.n(), m)?;
    spectral_cluster_with_basis(&graph_basis(w.weights())?, m, seed)
}

pub fn spectral_cluster_with_basis(basis: &SpectralBasis, m: usize, seed: u64) -> Result<Partition> {
    let n = basis.n();
    check_cluster_count(n, m)?;
    if m == 1 {
        return Partition::new(vec![0; n], 1);
    }
    // column r of the embedding is eigenvector r
    let mut emb = basis.u().slice(ndarray::s![..m, ..]).t().to_owned();
    for mut row in emb.rows_mut() {
        let norm = row.dot(&row).sqrt();
        if norm > 0.0 {
            row /= norm;
        }
    }
    let assign = kmeans(&emb, m, seed)?;
    Partition::new(assign, m)
}

fn check_cluster_count(n: usize, m: usize) -> Result<()> {
    if m < 1 || m > n {
        return Err(Error::domain(format!("need 1 <= M <= N clusters, got M={m}, N={n}")));
    }
    Ok(())
}

/// Cluster graph with summed weights `W'_ab = sum_{i in a, j in b} W_ij`.
pub fn coarsen_graph(w: &SimilarityGraph, p: &Partition, level: usize) -> Result<SimilarityGraph> {
    if p.n() != w.n() {
        return Err(Error::shape(format!("partition of {} nodes for a {}-node graph", p.n(), w.n())));
    }
    let a = p.assignment();
    let m = p.m();
    let mut out = Array2::zeros((m, m));
    let wts = w.weights();
    for i in 0..w.n() {
        for j in 0..w.n() {
            if a[i] <= a[j] {
                out[[a[i], a[j]]] += wts[[i, j]];
            }
        }
    }
    for x in 0..m {
        for y in x + 1..m {
            out[[y, x]] = out[[x, y]];
        }
    }
    SimilarityGraph::new(out, KernelParams::Coarsened { level })
}

#[derive(Debug, Clone, PartialEq)]
pub struct HierarchyLevel {
    /// Partition of the previous level's nodes (identity at level 0).
    pub partition: Partition,
    pub graph: SimilarityGraph,
}

/// Nested partitions from fine (level 0, the input graph) to coarse.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterHierarchy {
    levels: Vec<HierarchyLevel>,
    strides: Vec<usize>,
    seed: u64,
}

impl ClusterHierarchy {
    pub fn levels(&self) -> &[HierarchyLevel] {
        &self.levels
    }

    pub fn strides(&self) -> &[usize] {
        &self.strides
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Node counts per level, starting with the input graph.
    pub fn sizes(&self) -> Vec<usize> {
        self.levels.iter().map(|l| l.graph.n()).collect()
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let manifest = HierarchyManifest {
            strides: self.strides.clone(),
            seed: self.seed,
            assignments: self.levels.iter().skip(1).map(|l| l.partition.clone()).collect(),
        };
        io::write_json(dir.join("hierarchy.json"), &manifest)?;
        for (i, level) in self.levels.iter().enumerate() {
            io::write_matrix(dir.join(format!("level_{i}.bin")), level.graph.weights())?;
        }
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest: HierarchyManifest = io::read_json(dir.join("hierarchy.json"))?;
        if manifest.assignments.len() != manifest.strides.len() {
            return Err(Error::validation("hierarchy manifest: one partition per stride expected"));
        }
        let mut levels = Vec::new();
        for i in 0..=manifest.strides.len() {
            let w = io::read_matrix(dir.join(format!("level_{i}.bin")))?;
            let params = if i == 0 { KernelParams::Known } else { KernelParams::Coarsened { level: i } };
            let graph = SimilarityGraph::new(w, params)?;
            let partition = if i == 0 {
                Partition::identity(graph.n())
            } else {
                let p = manifest.assignments[i - 1].clone();
                let p = Partition::new(p.assignment, p.m)?;
                if p.m() != graph.n() || p.n() != levels_last_n(&levels) {
                    return Err(Error::validation(format!("hierarchy level {i} is inconsistent")));
                }
                p
            };
            levels.push(HierarchyLevel { partition, graph });
        }
        Ok(ClusterHierarchy { levels, strides: manifest.strides, seed: manifest.seed })
    }
}

fn levels_last_n(levels: &[HierarchyLevel]) -> usize {
    levels.last().map_or(0, |l| l.graph.n())
}

#[derive(Debug, Serialize, Deserialize)]
struct HierarchyManifest {
    strides: Vec<usize>,
    seed: u64,
    assignments: Vec<Partition>,
}

pub fn build_hierarchy(w: &SimilarityGraph, strides: &[usize], seed: u64) -> Result<ClusterHierarchy> {
    build_hierarchy_with_bases(w, strides, seed, None).map(|(h, _)| h)
}

/// Builds the hierarchy and returns the Laplacian eigenbasis of every level's
/// graph. A precomputed level-0 basis is reused when supplied.
pub fn build_hierarchy_with_bases(
    w: &SimilarityGraph,
    strides: &[usize],
    seed: u64,
    level0_basis: Option<SpectralBasis>,
) -> Result<(ClusterHierarchy, Vec<SpectralBasis>)> {
    if let Some(&s) = strides.iter().find(|&&s| s < 2) {
        return Err(Error::domain(format!("pooling stride must be >= 2, got {s}")));
    }
    let product = strides.iter().try_fold(1usize, |acc, &s| acc.checked_mul(s));
    if product.is_none_or(|p| p > w.n()) {
        return Err(Error::domain(format!(
            "product of strides {strides:?} exceeds the {} graph nodes",
            w.n()
        )));
    }
    if let Some(b) = &level0_basis {
        if b.n() != w.n() {
            return Err(Error::shape(format!("cached basis has {} nodes, graph has {}", b.n(), w.n())));
        }
    }
    let mut levels = vec![HierarchyLevel { partition: Partition::identity(w.n()), graph: w.clone() }];
    let mut bases = vec![match level0_basis {
        Some(b) => b,
        None => graph_basis(w.weights())?,
    }];
    for (l, &stride) in strides.iter().enumerate() {
        let prev = &levels[l];
        let m = prev.graph.n().div_ceil(stride);
        let level_seed = seed.wrapping_add(l as u64);
        let partition = spectral_cluster_with_basis(&bases[l], m, level_seed)?;
        let graph = coarsen_graph(&prev.graph, &partition, l + 1)?;
        bases.push(graph_basis(graph.weights())?);
        levels.push(HierarchyLevel { partition, graph });
    }
    Ok((ClusterHierarchy { levels, strides: strides.to_vec(), seed }, bases))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PoolMode {
    #[default]
    Max,
    Average,
}

/// Receptive fields of one pooling layer: output node `o` reads the members
/// of cluster `o` and of its most strongly connected neighbor cluster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolingMap {
    pub receptive_fields: Vec<Vec<usize>>,
    pub mode: PoolMode,
    pub stride: usize,
    pub n_in: usize,
}

impl PoolingMap {
    pub fn new(receptive_fields: Vec<Vec<usize>>, mode: PoolMode, stride: usize, n_in: usize) -> Result<Self> {
        let mut covered = vec![false; n_in];
        for (o, field) in receptive_fields.iter().enumerate() {
            if field.is_empty() {
                return Err(Error::validation(format!("receptive field {o} is empty")));
            }
            for &i in field {
                if i >= n_in {
                    return Err(Error::validation(format!("field {o} references node {i} >= {n_in}")));
                }
                covered[i] = true;
            }
        }
        if let Some(i) = covered.iter().position(|c| !c) {
            return Err(Error::validation(format!("input node {i} is not covered by any field")));
        }
        Ok(PoolingMap { receptive_fields, mode, stride, n_in })
    }

    pub fn n_out(&self) -> usize {
        self.receptive_fields.len()
    }

    pub fn pool_size(&self) -> usize {
        2 * self.stride
    }
}

/// Pooling from level `level - 1` nodes to level `level` clusters.
pub fn build_pooling_map(h: &ClusterHierarchy, level: usize, mode: PoolMode) -> Result<PoolingMap> {
    if level == 0 || level >= h.levels.len() {
        return Err(Error::domain(format!(
            "pooling level must be in 1..{}, got {level}",
            h.levels.len()
        )));
    }
    let lvl = &h.levels[level];
    let members = lvl.partition.members();
    let coarse = lvl.graph.weights();
    let m = lvl.partition.m();
    let mut fields = Vec::with_capacity(m);
    for o in 0..m {
        let mut field = members[o].clone();
        let mut neighbor: Option<usize> = None;
        for b in (0..m).filter(|&b| b != o) {
            if neighbor.is_none_or(|nb| coarse[[o, b]] > coarse[[o, nb]]) {
                neighbor = Some(b);
            }
        }
        if let Some(b) = neighbor {
            field.extend_from_slice(&members[b]);
            field.sort_unstable();
        }
        fields.push(field);
    }
    PoolingMap::new(fields, mode, h.strides[level - 1], lvl.partition.n())
}
