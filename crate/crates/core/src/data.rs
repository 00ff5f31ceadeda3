//! Feature matrices, labels, normalization and train/validation splitting.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;

/// `L` samples by `N` features, all finite.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    values: Array2<f64>,
    feature_names: Option<Vec<String>>,
}

impl FeatureMatrix {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        let (l, n) = values.dim();
        if l == 0 || n == 0 {
            return Err(Error::validation(format!("feature matrix must be non-empty, got {l}x{n}")));
        }
        if let Some((idx, v)) = values.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::validation(format!(
                "non-finite entry {v} at row {}, column {}",
                idx.0 + 1,
                idx.1 + 1
            )));
        }
        Ok(FeatureMatrix { values, feature_names: None })
    }

    pub fn with_names(mut self, names: Vec<String>) -> Result<Self> {
        if names.len() != self.n_features() {
            return Err(Error::shape(format!(
                "{} feature names for {} columns",
                names.len(),
                self.n_features()
            )));
        }
        self.feature_names = Some(names);
        Ok(self)
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn into_values(self) -> Array2<f64> {
        self.values
    }

    pub fn feature_names(&self) -> Option<&[String]> {
        self.feature_names.as_deref()
    }

    pub fn n_samples(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_features(&self) -> usize {
        self.values.ncols()
    }

    pub fn select_rows(&self, rows: &[usize]) -> FeatureMatrix {
        FeatureMatrix {
            values: self.values.select(Axis(0), rows),
            feature_names: self.feature_names.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Task {
    Classification { classes: usize },
    Regression,
}

impl Task {
    /// Width of the network's output layer.
    pub fn output_dim(&self) -> usize {
        match *self {
            Task::Classification { classes } => classes,
            Task::Regression => 1,
        }
    }
}

/// Class labels are 1-based: `1..=C`.
#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Classes(Vec<usize>),
    Values(Vec<f64>),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Classes(v) => v.len(),
            Targets::Values(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn select(&self, rows: &[usize]) -> Targets {
        match self {
            Targets::Classes(v) => Targets::Classes(rows.iter().map(|&i| v[i]).collect()),
            Targets::Values(v) => Targets::Values(rows.iter().map(|&i| v[i]).collect()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LabeledDataset {
    features: FeatureMatrix,
    targets: Targets,
    task: Task,
}

impl LabeledDataset {
    pub fn new(features: FeatureMatrix, targets: Targets, task: Task) -> Result<Self> {
        if targets.len() != features.n_samples() {
            return Err(Error::shape(format!(
                "{} targets for {} samples",
                targets.len(),
                features.n_samples()
            )));
        }
        match (&targets, task) {
            (Targets::Classes(labels), Task::Classification { classes }) => {
                if classes == 0 {
                    return Err(Error::validation("classification task needs at least one class"));
                }
                if let Some(&label) = labels.iter().find(|&&y| y < 1 || y > classes) {
                    return Err(Error::LabelOutOfRange { label, classes });
                }
            }
            (Targets::Values(values), Task::Regression) => {
                if values.iter().any(|v| !v.is_finite()) {
                    return Err(Error::validation("non-finite regression target"));
                }
            }
            _ => return Err(Error::validation("target kind does not match task")),
        }
        Ok(LabeledDataset { features, targets, task })
    }

    pub fn features(&self) -> &FeatureMatrix {
        &self.features
    }

    pub fn targets(&self) -> &Targets {
        &self.targets
    }

    pub fn task(&self) -> Task {
        self.task
    }

    pub fn len(&self) -> usize {
        self.features.n_samples()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn subset(&self, rows: &[usize]) -> LabeledDataset {
        LabeledDataset {
            features: self.features.select_rows(rows),
            targets: self.targets.select(rows),
            task: self.task,
        }
    }

    pub fn with_features(&self, features: FeatureMatrix) -> Result<LabeledDataset> {
        LabeledDataset::new(features, self.targets.clone(), self.task)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatrixFormat {
    Csv,
    Binary,
}

pub fn load_matrix(path: impl AsRef<Path>, format: MatrixFormat) -> Result<FeatureMatrix> {
    match format {
        MatrixFormat::Csv => parse_csv(&fs::read_to_string(path)?),
        MatrixFormat::Binary => {
            let values = io::read_matrix(path)?;
            FeatureMatrix::new(values)
        }
    }
}

/// Comma-separated floats, with an optional header row of feature names.
pub fn parse_csv(text: &str) -> Result<FeatureMatrix> {
    let mut names = None;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (line_idx, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let parsed: std::result::Result<Vec<f64>, usize> = fields
            .iter()
            .enumerate()
            .map(|(c, f)| f.parse::<f64>().map_err(|_| c))
            .collect();
        match parsed {
            Ok(row) => {
                if let Some(first) = rows.first() {
                    if row.len() != first.len() {
                        return Err(Error::Parse {
                            row: line_idx + 1,
                            column: row.len().min(first.len()) + 1,
                            message: format!("expected {} fields, found {}", first.len(), row.len()),
                        });
                    }
                } else if let Some(n) = names.as_ref().map(Vec::len) {
                    if row.len() != n {
                        return Err(Error::Parse {
                            row: line_idx + 1,
                            column: row.len().min(n) + 1,
                            message: format!("header has {n} fields, row has {}", row.len()),
                        });
                    }
                }
                rows.push(row);
            }
            Err(_) if rows.is_empty() && names.is_none() => {
                names = Some(fields.iter().map(|s| s.to_string()).collect::<Vec<_>>());
            }
            Err(col) => {
                return Err(Error::Parse {
                    row: line_idx + 1,
                    column: col + 1,
                    message: format!("cannot parse {:?} as a number", fields[col]),
                })
            }
        }
    }
    if rows.is_empty() {
        return Err(Error::Parse { row: 0, column: 0, message: "no data rows".into() });
    }
    let n = rows[0].len();
    let l = rows.len();
    let values = Array2::from_shape_vec((l, n), rows.into_iter().flatten().collect())
        .map_err(|e| Error::shape(e.to_string()))?;
    let m = FeatureMatrix::new(values)?;
    match names {
        Some(names) => m.with_names(names),
        None => Ok(m),
    }
}

/// One target per line. Classification labels must be integers in `1..=C`.
pub fn load_targets(path: impl AsRef<Path>, task: Task) -> Result<Targets> {
    parse_targets(&fs::read_to_string(path)?, task)
}

pub fn parse_targets(text: &str, task: Task) -> Result<Targets> {
    let lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty());
    match task {
        Task::Classification { classes } => {
            let mut labels = Vec::new();
            for (row, l) in lines {
                let y: usize = l.parse().map_err(|_| Error::Parse {
                    row,
                    column: 1,
                    message: format!("cannot parse {l:?} as a class label"),
                })?;
                if y < 1 || y > classes {
                    return Err(Error::LabelOutOfRange { label: y, classes });
                }
                labels.push(y);
            }
            Ok(Targets::Classes(labels))
        }
        Task::Regression => {
            let mut values = Vec::new();
            for (row, l) in lines {
                let v: f64 = l.parse().map_err(|_| Error::Parse {
                    row,
                    column: 1,
                    message: format!("cannot parse {l:?} as a number"),
                })?;
                if !v.is_finite() {
                    return Err(Error::validation(format!("non-finite target at row {row}")));
                }
                values.push(v);
            }
            Ok(Targets::Values(values))
        }
    }
}

/// Entry-wise `log(1 + x)` for count data.
pub fn log_normalize(x: &FeatureMatrix) -> Result<FeatureMatrix> {
    if let Some((idx, v)) = x.values().indexed_iter().find(|(_, v)| **v < 0.0) {
        return Err(Error::domain(format!(
            "log normalization needs nonnegative entries, found {v} at row {}, column {}",
            idx.0 + 1,
            idx.1 + 1
        )));
    }
    Ok(FeatureMatrix {
        values: x.values().mapv(f64::ln_1p),
        feature_names: x.feature_names.clone(),
    })
}

/// Per-feature statistics from [`zscore_normalize`]; population convention (divide by `L`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZScoreStats {
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
}

impl ZScoreStats {
    pub fn fit(x: &FeatureMatrix) -> Result<Self> {
        let l = x.n_samples();
        if l < 2 {
            return Err(Error::domain("z-score normalization needs at least 2 samples"));
        }
        let v = x.values();
        let means = v.mean_axis(Axis(0)).expect("non-empty");
        let stds: Vec<f64> = v
            .axis_iter(Axis(1))
            .zip(means.iter())
            .map(|(col, &m)| {
                let var = col.iter().map(|&c| (c - m) * (c - m)).sum::<f64>() / l as f64;
                var.sqrt()
            })
            .collect();
        Ok(ZScoreStats { means: means.to_vec(), stds })
    }

    /// Center every column; scale only columns whose std is nonzero.
    pub fn apply(&self, x: &FeatureMatrix) -> Result<FeatureMatrix> {
        if x.n_features() != self.means.len() {
            return Err(Error::shape(format!(
                "stats fitted on {} features, matrix has {}",
                self.means.len(),
                x.n_features()
            )));
        }
        let mut values = x.values().clone();
        for (mut col, (&m, &s)) in values
            .axis_iter_mut(Axis(1))
            .zip(self.means.iter().zip(self.stds.iter()))
        {
            if s > 0.0 {
                col.mapv_inplace(|c| (c - m) / s);
            } else {
                col.mapv_inplace(|c| c - m);
            }
        }
        Ok(FeatureMatrix { values, feature_names: x.feature_names.clone() })
    }
}

pub fn zscore_normalize(x: &FeatureMatrix) -> Result<(FeatureMatrix, Array1<f64>, Array1<f64>)> {
    let stats = ZScoreStats::fit(x)?;
    let out = stats.apply(x)?;
    Ok((out, Array1::from(stats.means), Array1::from(stats.stds)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub validation_fraction: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec { validation_fraction: 0.1, seed: 0 }
    }
}

/// Validation size is `floor(L * fraction)` clamped to `[1, L-1]`.
pub fn validation_size(l: usize, fraction: f64) -> usize {
    let v = (l as f64 * fraction).floor() as usize;
    v.clamp(1, l - 1)
}

/// Seeded shuffle of `0..L`, first `validation_size` indices become validation.
/// Both returned index lists are sorted ascending.
pub fn split_indices(l: usize, spec: &SplitSpec) -> Result<(Vec<usize>, Vec<usize>)> {
    if l < 2 {
        return Err(Error::domain(format!("cannot split {l} samples")));
    }
    if !(spec.validation_fraction > 0.0 && spec.validation_fraction < 1.0) {
        return Err(Error::domain(format!(
            "validation fraction must lie in (0, 1), got {}",
            spec.validation_fraction
        )));
    }
    let mut idx: Vec<usize> = (0..l).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    idx.shuffle(&mut rng);
    let v = validation_size(l, spec.validation_fraction);
    let mut valid = idx[..v].to_vec();
    let mut train = idx[v..].to_vec();
    valid.sort_unstable();
    train.sort_unstable();
    Ok((train, valid))
}

pub fn split(ds: &LabeledDataset, spec: &SplitSpec) -> Result<(LabeledDataset, LabeledDataset)> {
    let (train, valid) = split_indices(ds.len(), spec)?;
    Ok((ds.subset(&train), ds.subset(&valid)))
}
