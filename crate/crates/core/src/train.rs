//! AdaGrad, the training loop with checkpoints, the fully connected proxy used
//! for supervised graph estimation, and evaluation.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::clustering::{build_pooling_map, ClusterHierarchy, PoolMode};
use crate::data::{LabeledDataset, Targets, Task};
use crate::error::{Error, Result};
use crate::io::{read_json, read_matrix, write_json, write_matrix};
use crate::nn::{
    metric_accuracy, metric_r2, rmse_loss, softmax_cross_entropy, ArchToken, Architecture, GraphContext,
    Network, NetworkOptions,
};
use crate::spectral::SpectralBasis;

pub const DEFAULT_EPSILON: f64 = 1e-8;

/// Epochs at which a checkpoint is always written, when reached.
pub const LOG_EPOCHS: [usize; 2] = [200, 1500];

/// Element-wise `acc += g^2; theta -= lr * g / (sqrt(acc) + eps)`.
pub fn adagrad_update(theta: &mut [f64], acc: &mut [f64], grad: &[f64], lr: f64, eps: f64) -> Result<()> {
    if theta.len() != grad.len() || acc.len() != grad.len() {
        return Err(Error::shape(format!(
            "adagrad: {} parameters, {} accumulators, {} gradients",
            theta.len(),
            acc.len(),
            grad.len()
        )));
    }
    for ((t, a), &g) in theta.iter_mut().zip(acc.iter_mut()).zip(grad) {
        *a += g * g;
        *t -= lr * g / (a.sqrt() + eps);
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaGradState {
    pub accumulators: Vec<Array1<f64>>,
    pub learning_rate: f64,
    pub epsilon: f64,
}

impl AdaGradState {
    pub fn new(learning_rate: f64) -> Result<Self> {
        if !(learning_rate > 0.0 && learning_rate.is_finite()) {
            return Err(Error::validation(format!("learning rate must be positive, got {learning_rate}")));
        }
        Ok(AdaGradState { accumulators: Vec::new(), learning_rate, epsilon: DEFAULT_EPSILON })
    }

    /// Zero accumulators shaped like the network's parameters.
    pub fn for_network(net: &mut Network, learning_rate: f64) -> Result<Self> {
        let mut state = AdaGradState::new(learning_rate)?;
        state.accumulators = net.params_mut().iter().map(|p| Array1::zeros(p.value.len())).collect();
        Ok(state)
    }
}

/// One AdaGrad update of every parameter tensor using the gradients stored by the last backward pass.
pub fn adagrad_step(state: &mut AdaGradState, net: &mut Network) -> Result<()> {
    let mut params = net.params_mut();
    if params.len() != state.accumulators.len() {
        return Err(Error::shape(format!(
            "optimizer tracks {} tensors, network has {}",
            state.accumulators.len(),
            params.len()
        )));
    }
    for (p, acc) in params.iter_mut().zip(state.accumulators.iter_mut()) {
        let acc = acc.as_slice_mut().unwrap();
        adagrad_update(p.value, acc, p.grad, state.learning_rate, state.epsilon)?;
    }
    Ok(())
}

fn default_lr() -> f64 {
    0.01
}
fn default_batch() -> usize {
    128
}
fn default_n0() -> usize {
    60
}
fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub architecture: String,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub pooling: PoolMode,
    /// Subsampled spectral weights per filter; clamped to each level's node count.
    #[serde(default = "default_n0")]
    pub n0: usize,
    /// Dropout rate after every hidden fully connected layer.
    #[serde(default)]
    pub dropout: f64,
    #[serde(default = "default_true")]
    pub gc_bias: bool,
    #[serde(default)]
    pub seed: u64,
    /// Extra checkpoint period in epochs; 0 disables.
    #[serde(default)]
    pub checkpoint_every: usize,
}

impl TrainConfig {
    pub fn new(architecture: &str, epochs: usize) -> Self {
        TrainConfig {
            architecture: architecture.to_string(),
            learning_rate: default_lr(),
            epochs,
            batch_size: default_batch(),
            pooling: PoolMode::Max,
            n0: default_n0(),
            dropout: 0.0,
            gc_bias: true,
            seed: 0,
            checkpoint_every: 0,
        }
    }

    pub fn validate(&self) -> Result<Architecture> {
        let arch: Architecture = self.architecture.parse()?;
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::validation(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::validation("batch_size must be positive"));
        }
        if self.n0 == 0 {
            return Err(Error::validation("n0 must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::domain(format!("dropout rate must be in [0, 1), got {}", self.dropout)));
        }
        Ok(arch)
    }

    pub fn network_options(&self, task: Task) -> NetworkOptions {
        NetworkOptions {
            n0: self.n0,
            gc_bias: self.gc_bias,
            dropout: self.dropout,
            output_dim: task.output_dim(),
            seed: self.seed,
        }
    }

    fn wants_checkpoint(&self, epoch: usize) -> bool {
        epoch == self.epochs
            || LOG_EPOCHS.contains(&epoch)
            || (self.checkpoint_every > 0 && epoch.is_multiple_of(self.checkpoint_every))
    }
}

/// Pairs hierarchy levels with their bases and builds the pooling maps.
pub fn graph_context(
    hierarchy: Option<&ClusterHierarchy>,
    bases: Vec<SpectralBasis>,
    mode: PoolMode,
) -> Result<GraphContext> {
    let pools = match hierarchy {
        Some(h) => (1..h.levels().len())
            .map(|l| build_pooling_map(h, l, mode).map(Arc::new))
            .collect::<Result<Vec<_>>>()?,
        None => Vec::new(),
    };
    if let Some(h) = hierarchy {
        for (l, (b, lvl)) in bases.iter().zip(h.levels()).enumerate() {
            if b.n() != lvl.graph.n() {
                return Err(Error::shape(format!(
                    "basis for level {l} has {} nodes, hierarchy level has {}",
                    b.n(),
                    lvl.graph.n()
                )));
            }
        }
    }
    Ok(GraphContext { bases: bases.into_iter().map(Arc::new).collect(), pools })
}

pub fn build_network(config: &TrainConfig, n_features: usize, task: Task, ctx: &GraphContext) -> Result<Network> {
    let arch = config.validate()?;
    let strides = arch.strides();
    let available: Vec<usize> = ctx.pools.iter().map(|p| p.stride).collect();
    if !available.starts_with(&strides) {
        return Err(Error::Architecture {
            token: arch.to_string(),
            message: format!("pooling strides {strides:?} do not match graph hierarchy strides {available:?}"),
        });
    }
    Network::build(&arch, n_features, ctx, &config.network_options(task))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    /// NaN without a validation set; stored as `null` in JSON.
    #[serde(deserialize_with = "nan_from_null")]
    pub val_metric: f64,
    pub wall_seconds: f64,
}

fn nan_from_null<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,train_loss,val_metric,wall_seconds\n");
    for r in history {
        writeln!(out, "{},{},{},{:.3}", r.epoch, r.train_loss, r.val_metric, r.wall_seconds).unwrap();
    }
    out
}

#[derive(Debug)]
pub struct FitResult {
    pub network: Network,
    pub optimizer: AdaGradState,
    pub history: Vec<EpochRecord>,
}

/// Loss and its gradient w.r.t. the network outputs.
pub fn task_loss(outputs: &Array2<f64>, targets: &Targets) -> Result<(f64, Array2<f64>)> {
    match targets {
        Targets::Classes(labels) => softmax_cross_entropy(outputs.view(), labels),
        Targets::Values(values) => {
            if outputs.ncols() != 1 {
                return Err(Error::shape(format!("regression expects 1 output, network has {}", outputs.ncols())));
            }
            let (loss, g) = rmse_loss(outputs.column(0), values)?;
            Ok((loss, g.insert_axis(Axis(1))))
        }
    }
}

/// Accuracy for classification, squared correlation for regression.
pub fn task_metric(outputs: &Array2<f64>, targets: &Targets) -> Result<f64> {
    match targets {
        Targets::Classes(labels) => metric_accuracy(outputs.view(), labels),
        Targets::Values(values) => metric_r2(outputs.column(0), values),
    }
}

/// Forward pass in evaluation mode, chunked to bound memory.
pub fn predict(net: &mut Network, x: &Array2<f64>) -> Result<Array2<f64>> {
    const CHUNK: usize = 512;
    let mut out = Array2::zeros((x.nrows(), net.output_dim()));
    let mut start = 0;
    while start < x.nrows() {
        let end = (start + CHUNK).min(x.nrows());
        let y = net.forward(&x.slice(ndarray::s![start..end, ..]).to_owned(), None)?;
        out.slice_mut(ndarray::s![start..end, ..]).assign(&y);
        start = end;
    }
    Ok(out)
}

fn diagnostics(net: &mut Network, what: &str) -> String {
    let norms: Vec<String> = net
        .parameter_norms()
        .into_iter()
        .map(|(n, v)| format!("{n}={v:.6e}"))
        .collect();
    format!("{what}; parameter norms: {}", norms.join(", "))
}

/// Trains from a fresh initialization. With `run_dir`, writes history.csv and checkpoints.
pub fn fit(
    config: &TrainConfig,
    train: &LabeledDataset,
    valid: Option<&LabeledDataset>,
    ctx: &GraphContext,
    run_dir: Option<&Path>,
) -> Result<FitResult> {
    let mut network = build_network(config, train.features().n_features(), train.task(), ctx)?;
    let optimizer = AdaGradState::for_network(&mut network, config.learning_rate)?;
    run_epochs(config, train, valid, FitResult { network, optimizer, history: Vec::new() }, run_dir)
}

/// Continues training from a checkpoint written by an earlier run with the same config.
pub fn resume(
    config: &TrainConfig,
    train: &LabeledDataset,
    valid: Option<&LabeledDataset>,
    ctx: &GraphContext,
    checkpoint_dir: &Path,
    run_dir: Option<&Path>,
) -> Result<FitResult> {
    let mut network = build_network(config, train.features().n_features(), train.task(), ctx)?;
    let mut optimizer = AdaGradState::for_network(&mut network, config.learning_rate)?;
    let ckpt = load_checkpoint(checkpoint_dir)?;
    if ckpt.manifest.architecture != network.architecture().to_string() {
        return Err(Error::validation(format!(
            "checkpoint architecture {} differs from config {}",
            ckpt.manifest.architecture, config.architecture
        )));
    }
    if ckpt.manifest.epoch > config.epochs {
        return Err(Error::validation(format!(
            "checkpoint epoch {} exceeds configured epochs {}",
            ckpt.manifest.epoch, config.epochs
        )));
    }
    ckpt.apply(&mut network, &mut optimizer)?;
    let history = ckpt.manifest.history.clone();
    run_epochs(config, train, valid, FitResult { network, optimizer, history }, run_dir)
}

fn run_epochs(
    config: &TrainConfig,
    train: &LabeledDataset,
    valid: Option<&LabeledDataset>,
    mut state: FitResult,
    run_dir: Option<&Path>,
) -> Result<FitResult> {
    let x = train.features().values();
    let n = train.len();
    let start_epoch = state.history.last().map_or(0, |r| r.epoch);
    if let Some(dir) = run_dir {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("history.csv"), history_csv(&state.history))?;
    }
    let clock = Instant::now();
    let elapsed_before = state.history.last().map_or(0.0, |r| r.wall_seconds);
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in start_epoch + 1..=config.epochs {
        // one stream per epoch so a resumed run draws the same numbers
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(epoch as u64);
        order.sort_unstable();
        order.shuffle(&mut rng);

        let mut total = 0.0;
        for batch in order.chunks(config.batch_size) {
            let xb = x.select(Axis(0), batch);
            let yb = train.targets().select(batch);
            let out = state.network.forward(&xb, Some(&mut rng))?;
            let (loss, grad) = task_loss(&out, &yb)?;
            if !loss.is_finite() {
                return Err(Error::Numerical {
                    epoch,
                    diagnostics: diagnostics(&mut state.network, &format!("training loss {loss}")),
                });
            }
            total += loss * batch.len() as f64;
            state.network.backward(&grad, false)?;
            adagrad_step(&mut state.optimizer, &mut state.network)?;
        }
        let train_loss = total / n as f64;
        let val_metric = match valid {
            Some(v) => {
                let out = predict(&mut state.network, v.features().values())?;
                match task_metric(&out, v.targets()) {
                    Ok(m) => m,
                    Err(Error::UndefinedMetric(_)) => f64::NAN,
                    Err(e) => return Err(e),
                }
            }
            None => f64::NAN,
        };
        state.history.push(EpochRecord {
            epoch,
            train_loss,
            val_metric,
            wall_seconds: elapsed_before + clock.elapsed().as_secs_f64(),
        });
        if let Some(dir) = run_dir {
            fs::write(dir.join("history.csv"), history_csv(&state.history))?;
            if config.wants_checkpoint(epoch) {
                save_checkpoint(
                    dir.join("checkpoints").join(format!("epoch_{epoch}")),
                    &mut state.network,
                    &state.optimizer,
                    config,
                    &state.history,
                )?;
            }
        }
    }
    Ok(state)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub file: String,
    pub accumulator_file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub architecture: String,
    pub epoch: usize,
    pub seed: u64,
    pub input_dim: usize,
    pub output_dim: usize,
    pub learning_rate: f64,
    pub epsilon: f64,
    pub tensors: Vec<TensorEntry>,
    pub history: Vec<EpochRecord>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    pub values: Vec<Vec<f64>>,
    pub accumulators: Vec<Vec<f64>>,
}

fn as_matrix(shape: &[usize], data: &[f64]) -> Array2<f64> {
    let cols = shape.last().copied().unwrap_or(1);
    let rows = data.len() / cols.max(1);
    Array2::from_shape_vec((rows, cols), data.to_vec()).expect("tensor shape")
}

/// Writes `manifest.json` plus one binary matrix per parameter tensor and per accumulator.
pub fn save_checkpoint(
    dir: impl AsRef<Path>,
    net: &mut Network,
    optimizer: &AdaGradState,
    config: &TrainConfig,
    history: &[EpochRecord],
) -> Result<PathBuf> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let input_dim = net.input_dim();
    let output_dim = net.output_dim();
    let architecture = net.architecture().to_string();
    let params = net.params_mut();
    if params.len() != optimizer.accumulators.len() {
        return Err(Error::State("optimizer state does not match network".into()));
    }
    let mut tensors = Vec::new();
    for (p, acc) in params.iter().zip(&optimizer.accumulators) {
        let file = format!("{}.bin", p.name);
        let accumulator_file = format!("{}.acc.bin", p.name);
        write_matrix(dir.join(&file), &as_matrix(&p.shape, p.value))?;
        write_matrix(dir.join(&accumulator_file), &as_matrix(&p.shape, acc.as_slice().unwrap()))?;
        tensors.push(TensorEntry { name: p.name.clone(), shape: p.shape.clone(), file, accumulator_file });
    }
    let manifest = CheckpointManifest {
        architecture,
        epoch: history.last().map_or(0, |r| r.epoch),
        seed: config.seed,
        input_dim,
        output_dim,
        learning_rate: optimizer.learning_rate,
        epsilon: optimizer.epsilon,
        tensors,
        history: history.to_vec(),
    };
    write_json(dir.join("manifest.json"), &manifest)?;
    Ok(dir.to_path_buf())
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<Checkpoint> {
    let dir = dir.as_ref();
    let manifest: CheckpointManifest = read_json(dir.join("manifest.json"))?;
    let mut values = Vec::new();
    let mut accumulators = Vec::new();
    for t in &manifest.tensors {
        let expected: usize = t.shape.iter().product();
        let v = read_matrix(dir.join(&t.file))?;
        let a = read_matrix(dir.join(&t.accumulator_file))?;
        if v.len() != expected || a.len() != expected {
            return Err(Error::shape(format!("tensor {} does not match shape {:?}", t.name, t.shape)));
        }
        values.push(v.into_iter().collect());
        accumulators.push(a.into_iter().collect());
    }
    Ok(Checkpoint { manifest, values, accumulators })
}

impl Checkpoint {
    /// Copies parameters and optimizer state into a freshly built network of the same architecture.
    pub fn apply(&self, net: &mut Network, optimizer: &mut AdaGradState) -> Result<()> {
        let mut params = net.params_mut();
        if params.len() != self.manifest.tensors.len() {
            return Err(Error::shape(format!(
                "checkpoint has {} tensors, network has {}",
                self.manifest.tensors.len(),
                params.len()
            )));
        }
        let mut accs = Vec::with_capacity(params.len());
        for ((p, t), (v, a)) in params
            .iter_mut()
            .zip(&self.manifest.tensors)
            .zip(self.values.iter().zip(&self.accumulators))
        {
            if p.name != t.name || p.shape != t.shape {
                return Err(Error::shape(format!(
                    "checkpoint tensor {} {:?} does not match network tensor {} {:?}",
                    t.name, t.shape, p.name, p.shape
                )));
            }
            p.value.copy_from_slice(v);
            accs.push(Array1::from_vec(a.clone()));
        }
        optimizer.accumulators = accs;
        optimizer.learning_rate = self.manifest.learning_rate;
        optimizer.epsilon = self.manifest.epsilon;
        Ok(())
    }
}

/// Rebuilds a trained network from a checkpoint directory.
pub fn restore_network(
    config: &TrainConfig,
    n_features: usize,
    task: Task,
    ctx: &GraphContext,
    checkpoint_dir: &Path,
) -> Result<Network> {
    let mut net = build_network(config, n_features, task, ctx)?;
    let mut opt = AdaGradState::for_network(&mut net, config.learning_rate)?;
    load_checkpoint(checkpoint_dir)?.apply(&mut net, &mut opt)?;
    Ok(net)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: Task,
    pub n_samples: usize,
    pub loss: f64,
    pub metric_name: String,
    /// NaN when the metric is undefined for this target set.
    pub metric: f64,
    pub p_net: usize,
}

/// Dropout-free evaluation of loss and task metric.
pub fn evaluate(net: &mut Network, data: &LabeledDataset) -> Result<EvalReport> {
    let out = predict(net, data.features().values())?;
    let (loss, _) = task_loss(&out, data.targets())?;
    let metric = match task_metric(&out, data.targets()) {
        Ok(m) => m,
        Err(Error::UndefinedMetric(_)) => f64::NAN,
        Err(e) => return Err(e),
    };
    let metric_name = match data.task() {
        Task::Classification { .. } => "accuracy",
        Task::Regression => "r2",
    };
    Ok(EvalReport {
        task: data.task(),
        n_samples: data.len(),
        loss,
        metric_name: metric_name.into(),
        metric,
        p_net: net.parameter_count(),
    })
}

fn default_proxy_arch() -> String {
    "FC256-FC128".into()
}
fn default_proxy_epochs() -> usize {
    20
}
fn default_proxy_dropout() -> f64 {
    0.5
}

/// Fully connected network trained only to extract first-layer features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProxyConfig {
    #[serde(default = "default_proxy_arch")]
    pub architecture: String,
    #[serde(default = "default_proxy_epochs")]
    pub epochs: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_proxy_dropout")]
    pub dropout: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for ProxyConfig {
    fn default() -> Self {
        ProxyConfig {
            architecture: default_proxy_arch(),
            epochs: default_proxy_epochs(),
            learning_rate: default_lr(),
            batch_size: default_batch(),
            dropout: default_proxy_dropout(),
            seed: 0,
        }
    }
}

impl ProxyConfig {
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            dropout: self.dropout,
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            seed: self.seed,
            ..TrainConfig::new(&self.architecture, self.epochs)
        }
    }
}

#[derive(Debug)]
pub struct FCProxy {
    pub network: Network,
    /// First-layer weights, one row per input feature (`N x M1`).
    pub w1: Array2<f64>,
    pub history: Vec<EpochRecord>,
}

/// Trains the proxy on z-scored features and extracts `W1`.
pub fn train_fc_proxy(data: &LabeledDataset, config: &ProxyConfig) -> Result<FCProxy> {
    let tc = config.train_config();
    let arch = tc.validate()?;
    if arch.tokens.is_empty() || arch.tokens.iter().any(|t| !matches!(t, ArchToken::FullyConnected(_))) {
        return Err(Error::Architecture {
            token: config.architecture.clone(),
            message: "proxy network must be fully connected with at least one hidden layer".into(),
        });
    }
    let result = fit(&tc, data, None, &GraphContext::default(), None)?;
    let w1 = result
        .network
        .first_dense_weights()
        .ok_or_else(|| Error::State("proxy network has no dense layer".into()))?;
    Ok(FCProxy { network: result.network, w1, history: result.history })
}
