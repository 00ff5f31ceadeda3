//! Layers with hand-written backward passes, losses and metrics.
//!
//! Graph signals are `S x F x N` arrays (samples, feature maps, nodes). Inside a
//! [`Network`] activations travel as `S x D` matrices; graph layers view them
//! as `S x F x N` with map-major layout (`d = f * N + n`).

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use ndarray::{s, Array1, Array2, Array3, ArrayView1, ArrayView2, ArrayView3, Axis, Zip};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::clustering::{PoolMode, PoolingMap};
use crate::error::{Error, Result};
use crate::spectral::{build_spline_kernel, SpectralBasis, SplineKernel};

/// `S` samples x `F` feature maps x `N` nodes.
pub type Batch = Array3<f64>;

fn check_batch(x: &ArrayView3<f64>, maps: usize, nodes: usize, what: &str) -> Result<()> {
    let (_, f, n) = x.dim();
    if f != maps || n != nodes {
        return Err(Error::shape(format!(
            "{what}: expected {maps} maps x {nodes} nodes, got {f} x {n}"
        )));
    }
    Ok(())
}

fn to_spectral(basis: &SpectralBasis, x: ArrayView3<f64>) -> Array3<f64> {
    let (s, f, n) = x.dim();
    let flat = x.as_standard_layout().into_shape_with_order((s * f, n)).unwrap().to_owned();
    flat.dot(&basis.u().t()).into_shape_with_order((s, f, n)).unwrap()
}

fn from_spectral(basis: &SpectralBasis, x_hat: Array3<f64>) -> Array3<f64> {
    let (s, f, n) = x_hat.dim();
    let flat = x_hat.into_shape_with_order((s * f, n)).unwrap();
    flat.dot(basis.u()).into_shape_with_order((s, f, n)).unwrap()
}

/// Spectral convolution with spline-interpolated multipliers
/// `w_{f'f} = K w~_{f'f}`:
/// `y_{sf'} = U^T (sum_f (U x_{sf}) * w_{f'f}) + b_{f'}`.
#[derive(Debug, Clone)]
pub struct GraphConv {
    w_tilde: Array3<f64>,
    bias: Option<Array1<f64>>,
    basis: Arc<SpectralBasis>,
    kernel: Arc<SplineKernel>,
}

/// Gradients of a graph convolution for one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGradients {
    pub grad_input: Batch,
    pub grad_w_tilde: Array3<f64>,
    pub grad_bias: Option<Array1<f64>>,
}

impl GraphConv {
    pub fn new(
        w_tilde: Array3<f64>,
        bias: Option<Array1<f64>>,
        basis: Arc<SpectralBasis>,
        kernel: Arc<SplineKernel>,
    ) -> Result<Self> {
        let (fo, _, n0) = w_tilde.dim();
        if n0 != kernel.n0() {
            return Err(Error::shape(format!("w~ has N0={n0}, kernel has N0={}", kernel.n0())));
        }
        if kernel.n() != basis.n() {
            return Err(Error::shape(format!(
                "kernel spans {} frequencies, basis has {} nodes",
                kernel.n(),
                basis.n()
            )));
        }
        if let Some(b) = &bias {
            if b.len() != fo {
                return Err(Error::shape(format!("{} biases for {fo} output maps", b.len())));
            }
        }
        if w_tilde.iter().chain(bias.iter().flatten()).any(|v| !v.is_finite()) {
            return Err(Error::validation("non-finite graph convolution parameter"));
        }
        Ok(GraphConv { w_tilde, bias, basis, kernel })
    }

    /// Uniform `[-a, a]` weights with `a = 1/sqrt(F * N0)`, zero bias.
    pub fn init<R: Rng + ?Sized>(
        in_maps: usize,
        out_maps: usize,
        basis: Arc<SpectralBasis>,
        kernel: Arc<SplineKernel>,
        with_bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let n0 = kernel.n0();
        let a = 1.0 / ((in_maps * n0) as f64).sqrt();
        let w = Array3::from_shape_simple_fn((out_maps, in_maps, n0), || rng.random_range(-a..=a));
        let bias = with_bias.then(|| Array1::zeros(out_maps));
        GraphConv::new(w, bias, basis, kernel)
    }

    pub fn in_maps(&self) -> usize {
        self.w_tilde.dim().1
    }

    pub fn out_maps(&self) -> usize {
        self.w_tilde.dim().0
    }

    pub fn nodes(&self) -> usize {
        self.basis.n()
    }

    pub fn w_tilde(&self) -> &Array3<f64> {
        &self.w_tilde
    }

    pub fn bias(&self) -> Option<&Array1<f64>> {
        self.bias.as_ref()
    }

    pub fn basis(&self) -> &SpectralBasis {
        &self.basis
    }

    pub fn kernel(&self) -> &SplineKernel {
        &self.kernel
    }

    /// Full multipliers `F' x F x N`.
    pub fn multipliers(&self) -> Array3<f64> {
        let (fo, fi, n0) = self.w_tilde.dim();
        let flat = self.w_tilde.view().into_shape_with_order((fo * fi, n0)).unwrap();
        flat.dot(&self.kernel.matrix().t())
            .into_shape_with_order((fo, fi, self.nodes()))
            .unwrap()
    }

    pub fn parameter_count(&self) -> usize {
        self.w_tilde.len() + self.bias.as_ref().map_or(0, |b| b.len())
    }

    fn forward_spectral(&self, x_hat: ArrayView3<f64>, w: &Array3<f64>) -> Array3<f64> {
        let (s, fi, n) = x_hat.dim();
        let fo = self.out_maps();
        let mut y_hat = Array3::zeros((s, fo, n));
        for o in 0..fo {
            let mut y_o = y_hat.slice_mut(s![.., o, ..]);
            for f in 0..fi {
                Zip::from(&mut y_o)
                    .and(&x_hat.slice(s![.., f, ..]))
                    .and_broadcast(&w.slice(s![o, f, ..]))
                    .for_each(|y, &x, &wv| *y += x * wv);
            }
        }
        y_hat
    }

    fn add_bias(&self, y: &mut Array3<f64>) {
        if let Some(b) = &self.bias {
            for (o, &bo) in b.iter().enumerate() {
                y.slice_mut(s![.., o, ..]).mapv_inplace(|v| v + bo);
            }
        }
    }

    /// Returns the output and the spectral input `U x` (reused by backward).
    fn forward_with_spectral(&self, x: ArrayView3<f64>) -> Result<(Batch, Array3<f64>)> {
        check_batch(&x, self.in_maps(), self.nodes(), "graph convolution input")?;
        let x_hat = to_spectral(&self.basis, x);
        let w = self.multipliers();
        let mut y = from_spectral(&self.basis, self.forward_spectral(x_hat.view(), &w));
        self.add_bias(&mut y);
        Ok((y, x_hat))
    }

    fn backward_spectral(
        &self,
        x_hat: ArrayView3<f64>,
        grad_y: ArrayView3<f64>,
        need_input: bool,
    ) -> Result<LayerGradients> {
        check_batch(&grad_y, self.out_maps(), self.nodes(), "graph convolution output gradient")?;
        let (s, fi, n) = x_hat.dim();
        if grad_y.dim().0 != s {
            return Err(Error::shape(format!("{} gradient samples for {s} inputs", grad_y.dim().0)));
        }
        let fo = self.out_maps();
        let w = self.multipliers();
        let g_hat = to_spectral(&self.basis, grad_y);

        let grad_input = if need_input {
            let mut gx_hat = Array3::zeros((s, fi, n));
            for f in 0..fi {
                let mut gx_f = gx_hat.slice_mut(s![.., f, ..]);
                for o in 0..fo {
                    Zip::from(&mut gx_f)
                        .and(&g_hat.slice(s![.., o, ..]))
                        .and_broadcast(&w.slice(s![o, f, ..]))
                        .for_each(|gx, &g, &wv| *gx += g * wv);
                }
            }
            from_spectral(&self.basis, gx_hat)
        } else {
            Array3::zeros((0, fi, n))
        };

        // dL/dw_{f'f} = sum_s (U grad_y_{sf'}) * (U x_{sf}), then K^T
        let mut grad_w = Array2::<f64>::zeros((fo * fi, n));
        for o in 0..fo {
            for f in 0..fi {
                let mut row = grad_w.row_mut(o * fi + f);
                for smp in 0..s {
                    Zip::from(&mut row)
                        .and(&g_hat.slice(s![smp, o, ..]))
                        .and(&x_hat.slice(s![smp, f, ..]))
                        .for_each(|acc, &g, &x| *acc += g * x);
                }
            }
        }
        let n0 = self.kernel.n0();
        let grad_w_tilde = grad_w.dot(self.kernel.matrix()).into_shape_with_order((fo, fi, n0)).unwrap();
        let grad_bias = self.bias.as_ref().map(|_| {
            Array1::from_shape_fn(fo, |o| grad_y.slice(s![.., o, ..]).sum())
        });
        Ok(LayerGradients { grad_input, grad_w_tilde, grad_bias })
    }
}

pub fn graph_conv_forward(layer: &GraphConv, x: ArrayView3<f64>) -> Result<Batch> {
    layer.forward_with_spectral(x).map(|(y, _)| y)
}

pub fn graph_conv_backward(
    layer: &GraphConv,
    x: ArrayView3<f64>,
    grad_y: ArrayView3<f64>,
) -> Result<LayerGradients> {
    check_batch(&x, layer.in_maps(), layer.nodes(), "graph convolution input")?;
    let x_hat = to_spectral(&layer.basis, x);
    layer.backward_spectral(x_hat.view(), grad_y, true)
}

/// Argmax input node per `(sample, map, output node)` from max pooling.
pub type ArgmaxRecord = Array3<usize>;

pub fn graph_pool_forward(map: &PoolingMap, x: ArrayView3<f64>) -> Result<(Batch, Option<ArgmaxRecord>)> {
    let (s, f, n) = x.dim();
    if n != map.n_in {
        return Err(Error::shape(format!("pooling expects {} nodes, got {n}", map.n_in)));
    }
    let m = map.n_out();
    let mut y = Array3::zeros((s, f, m));
    match map.mode {
        PoolMode::Average => {
            for (o, field) in map.receptive_fields.iter().enumerate() {
                let inv = 1.0 / field.len() as f64;
                for smp in 0..s {
                    for c in 0..f {
                        let row = x.slice(s![smp, c, ..]);
                        y[[smp, c, o]] = field.iter().map(|&i| row[i]).sum::<f64>() * inv;
                    }
                }
            }
            Ok((y, None))
        }
        PoolMode::Max => {
            let mut arg = Array3::zeros((s, f, m));
            for (o, field) in map.receptive_fields.iter().enumerate() {
                for smp in 0..s {
                    for c in 0..f {
                        let row = x.slice(s![smp, c, ..]);
                        // fields are sorted, so strict > keeps the lowest index on ties
                        let mut best = field[0];
                        for &i in &field[1..] {
                            if row[i] > row[best] {
                                best = i;
                            }
                        }
                        y[[smp, c, o]] = row[best];
                        arg[[smp, c, o]] = best;
                    }
                }
            }
            Ok((y, Some(arg)))
        }
    }
}

pub fn graph_pool_backward(
    map: &PoolingMap,
    grad_out: ArrayView3<f64>,
    argmax: Option<&ArgmaxRecord>,
) -> Result<Batch> {
    let (s, f, m) = grad_out.dim();
    if m != map.n_out() {
        return Err(Error::shape(format!("pooling has {} outputs, gradient has {m}", map.n_out())));
    }
    let mut gx = Array3::zeros((s, f, map.n_in));
    match map.mode {
        PoolMode::Average => {
            for (o, field) in map.receptive_fields.iter().enumerate() {
                let inv = 1.0 / field.len() as f64;
                for smp in 0..s {
                    for c in 0..f {
                        let g = grad_out[[smp, c, o]] * inv;
                        for &i in field {
                            gx[[smp, c, i]] += g;
                        }
                    }
                }
            }
        }
        PoolMode::Max => {
            let arg = argmax.ok_or_else(|| Error::State("max pooling backward without argmax record".into()))?;
            if arg.dim() != (s, f, m) {
                return Err(Error::shape("argmax record does not match gradient"));
            }
            Zip::indexed(&grad_out).and(arg).for_each(|(smp, c, _), &g, &i| {
                gx[[smp, c, i]] += g;
            });
        }
    }
    Ok(gx)
}

/// `y = x W^T + b` on row-major batches; `W` is `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseGradients {
    pub grad_input: Array2<f64>,
    pub grad_weight: Array2<f64>,
    pub grad_bias: Array1<f64>,
}

impl Dense {
    pub fn init<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let a = 1.0 / (inputs as f64).sqrt();
        Dense {
            weight: Array2::from_shape_simple_fn((outputs, inputs), || rng.random_range(-a..=a)),
            bias: Array1::zeros(outputs),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.ncols()
    }

    pub fn outputs(&self) -> usize {
        self.weight.nrows()
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.inputs() {
            return Err(Error::shape(format!(
                "fully connected layer expects {} inputs, got {}",
                self.inputs(),
                x.ncols()
            )));
        }
        Ok(x.dot(&self.weight.t()) + &self.bias)
    }

    pub fn backward(&self, x: ArrayView2<f64>, grad_y: ArrayView2<f64>) -> Result<DenseGradients> {
        if grad_y.ncols() != self.outputs() || grad_y.nrows() != x.nrows() {
            return Err(Error::shape("fully connected gradient does not match layer output"));
        }
        Ok(DenseGradients {
            grad_input: grad_y.dot(&self.weight),
            grad_weight: grad_y.t().dot(&x),
            grad_bias: grad_y.sum_axis(Axis(0)),
        })
    }
}

pub fn relu(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(|v| v.max(0.0))
}

/// Gradient passes only where the input was strictly positive.
pub fn relu_backward(x: &Array2<f64>, grad: &Array2<f64>) -> Array2<f64> {
    Zip::from(x).and(grad).map_collect(|&v, &g| if v > 0.0 { g } else { 0.0 })
}

/// Inverted dropout: survivors are scaled by `1/(1-p)`. Without an rng (evaluation) it is the identity.
/// Returns the output and the multiplicative mask for backward.
pub fn dropout<R: RngCore + ?Sized>(
    x: &Array2<f64>,
    p: f64,
    rng: Option<&mut R>,
) -> Result<(Array2<f64>, Option<Array2<f64>>)> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::domain(format!("dropout rate must be in [0, 1), got {p}")));
    }
    match rng {
        Some(rng) if p > 0.0 => {
            let keep = 1.0 / (1.0 - p);
            let mask = Array2::from_shape_simple_fn(x.dim(), || if rng.random::<f64>() < p { 0.0 } else { keep });
            Ok((x * &mask, Some(mask)))
        }
        _ => Ok((x.clone(), None)),
    }
}

pub fn dropout_backward(grad: &Array2<f64>, mask: Option<&Array2<f64>>) -> Array2<f64> {
    match mask {
        Some(m) => grad * m,
        None => grad.clone(),
    }
}

/// Mean negative log-softmax of the true class (labels `1..=C`); gradient is `(softmax - onehot) / S`.
pub fn softmax_cross_entropy(logits: ArrayView2<f64>, labels: &[usize]) -> Result<(f64, Array2<f64>)> {
    let (s, c) = logits.dim();
    if labels.len() != s {
        return Err(Error::shape(format!("{} labels for {s} samples", labels.len())));
    }
    if let Some(&label) = labels.iter().find(|&&y| y < 1 || y > c) {
        return Err(Error::LabelOutOfRange { label, classes: c });
    }
    let mut grad = Array2::zeros((s, c));
    let mut loss = 0.0;
    for (i, row) in logits.rows().into_iter().enumerate() {
        let mx = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let sum: f64 = row.iter().map(|&v| (v - mx).exp()).sum();
        let log_z = mx + sum.ln();
        loss += log_z - row[labels[i] - 1];
        for j in 0..c {
            grad[[i, j]] = (row[j] - log_z).exp();
        }
        grad[[i, labels[i] - 1]] -= 1.0;
    }
    grad /= s as f64;
    Ok((loss / s as f64, grad))
}

/// `sqrt(mean((pred - target)^2))`; zero gradient when the loss is exactly 0.
pub fn rmse_loss(pred: ArrayView1<f64>, target: &[f64]) -> Result<(f64, Array1<f64>)> {
    let s = pred.len();
    if target.len() != s || s == 0 {
        return Err(Error::shape(format!("{} predictions for {} targets", s, target.len())));
    }
    let diff = Array1::from_shape_fn(s, |i| pred[i] - target[i]);
    let loss = (diff.dot(&diff) / s as f64).sqrt();
    let grad = if loss > 0.0 { diff / (s as f64 * loss) } else { Array1::zeros(s) };
    Ok((loss, grad))
}

/// Fraction of rows whose argmax (lowest index on ties) equals the 1-based label.
pub fn metric_accuracy(logits: ArrayView2<f64>, labels: &[usize]) -> Result<f64> {
    if labels.len() != logits.nrows() || labels.is_empty() {
        return Err(Error::shape(format!("{} labels for {} rows", labels.len(), logits.nrows())));
    }
    let hits = logits
        .rows()
        .into_iter()
        .zip(labels)
        .filter(|(row, &y)| argmax(row.view()) + 1 == y)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

pub fn argmax(row: ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// Squared Pearson correlation. Constant predictions score 0.
pub fn metric_r2(pred: ArrayView1<f64>, target: &[f64]) -> Result<f64> {
    let n = pred.len();
    if target.len() != n || n == 0 {
        return Err(Error::shape(format!("{n} predictions for {} targets", target.len())));
    }
    let mp = pred.sum() / n as f64;
    let mt = target.iter().sum::<f64>() / n as f64;
    let (mut cov, mut vp, mut vt) = (0.0, 0.0, 0.0);
    for i in 0..n {
        let a = pred[i] - mp;
        let b = target[i] - mt;
        cov += a * b;
        vp += a * a;
        vt += b * b;
    }
    if vt <= 0.0 {
        return Err(Error::UndefinedMetric("target has zero variance".into()));
    }
    if vp <= 0.0 {
        return Ok(0.0);
    }
    Ok(cov * cov / (vp * vt))
}

/// One token of the `GC<k>-P<k>-FC<k>` notation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArchToken {
    /// Graph convolution with `k` output feature maps.
    GraphConv(usize),
    /// Graph pooling with stride `k` (pool size `2k`).
    Pool(usize),
    /// Fully connected hidden layer with `k` units.
    FullyConnected(usize),
}

impl fmt::Display for ArchToken {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ArchToken::GraphConv(k) => write!(f, "GC{k}"),
            ArchToken::Pool(k) => write!(f, "P{k}"),
            ArchToken::FullyConnected(k) => write!(f, "FC{k}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Architecture {
    pub tokens: Vec<ArchToken>,
}

impl Architecture {
    /// Strides of the pooling layers, in order.
    pub fn strides(&self) -> Vec<usize> {
        self.tokens
            .iter()
            .filter_map(|t| match t {
                ArchToken::Pool(k) => Some(*k),
                _ => None,
            })
            .collect()
    }

    pub fn has_graph_layers(&self) -> bool {
        self.tokens.iter().any(|t| !matches!(t, ArchToken::FullyConnected(_)))
    }

    /// Closed-form parameter count. `level_sizes[l]` is the node count after `l`
    /// pooling layers; `n0` is clamped to each level's node count.
    pub fn parameter_count(
        &self,
        level_sizes: &[usize],
        n0: usize,
        output_dim: usize,
        gc_bias: bool,
    ) -> Result<usize> {
        let mut total = 0;
        let mut level = 0;
        let mut maps = 1;
        let mut width: Option<usize> = None;
        for t in &self.tokens {
            let nodes = *level_sizes
                .get(level)
                .ok_or_else(|| Error::shape(format!("no node count for pooling level {level}")))?;
            match *t {
                ArchToken::GraphConv(k) => {
                    total += k * maps * n0.min(nodes) + if gc_bias { k } else { 0 };
                    maps = k;
                }
                ArchToken::Pool(_) => level += 1,
                ArchToken::FullyConnected(k) => {
                    let inputs = width.unwrap_or(maps * nodes);
                    total += inputs * k + k;
                    width = Some(k);
                }
            }
        }
        if self.tokens.is_empty() && output_dim == 0 {
            return Ok(0);
        }
        let nodes = *level_sizes.get(level).ok_or_else(|| Error::shape("missing final level size"))?;
        let inputs = width.unwrap_or(maps * nodes);
        Ok(total + inputs * output_dim + output_dim)
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.tokens.iter().map(ToString::to_string).collect();
        f.write_str(&parts.join("-"))
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.is_empty() {
            return Ok(Architecture::default());
        }
        let mut tokens = Vec::new();
        let mut seen_fc = false;
        for raw in s.split('-') {
            let bad = |message: &str| Error::Architecture { token: raw.to_string(), message: message.to_string() };
            let (kind, digits) = if let Some(d) = raw.strip_prefix("GC") {
                ("GC", d)
            } else if let Some(d) = raw.strip_prefix("FC") {
                ("FC", d)
            } else if let Some(d) = raw.strip_prefix('P') {
                ("P", d)
            } else {
                return Err(bad("expected GC<int>, P<int> or FC<int>"));
            };
            let k: usize = digits.parse().map_err(|_| bad("expected a positive integer"))?;
            if k == 0 {
                return Err(bad("size must be positive"));
            }
            let token = match kind {
                "GC" => ArchToken::GraphConv(k),
                "P" => {
                    if k < 2 {
                        return Err(bad("pooling stride must be at least 2"));
                    }
                    ArchToken::Pool(k)
                }
                _ => ArchToken::FullyConnected(k),
            };
            if seen_fc && !matches!(token, ArchToken::FullyConnected(_)) {
                return Err(bad("graph layers cannot follow a fully connected layer"));
            }
            seen_fc |= matches!(token, ArchToken::FullyConnected(_));
            tokens.push(token);
        }
        Ok(Architecture { tokens })
    }
}

/// Per-level graph artifacts a network is built on.
#[derive(Debug, Clone, Default)]
pub struct GraphContext {
    /// Laplacian eigenbasis of each hierarchy level, fine to coarse.
    pub bases: Vec<Arc<SpectralBasis>>,
    /// `pools[l]` maps level `l` nodes to level `l + 1` nodes.
    pub pools: Vec<Arc<PoolingMap>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NetworkOptions {
    pub n0: usize,
    pub gc_bias: bool,
    pub dropout: f64,
    pub output_dim: usize,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub enum Layer {
    GraphConv(GraphConv),
    Pool(Arc<PoolingMap>),
    Dense(Dense),
    Relu,
    Dropout(f64),
}

impl Layer {
    pub fn name(&self) -> &'static str {
        match self {
            Layer::GraphConv(_) => "graph_conv",
            Layer::Pool(_) => "pool",
            Layer::Dense(_) => "fully_connected",
            Layer::Relu => "relu",
            Layer::Dropout(_) => "dropout",
        }
    }
}

/// Per-layer state kept between forward and backward.
#[derive(Debug, Clone)]
enum Cache {
    None,
    Spectral(Array3<f64>),
    Input(Array2<f64>),
    Argmax(Option<ArgmaxRecord>),
    Mask(Option<Array2<f64>>),
}

/// A trainable parameter tensor with its gradient, flattened.
pub struct ParamSlot<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: &'a mut [f64],
    pub grad: &'a [f64],
}

/// Feed-forward stack built from an [`Architecture`]; graph layers feed a
/// fully connected head that ends in an implicit `output_dim` linear layer.
#[derive(Debug, Clone)]
pub struct Network {
    architecture: Architecture,
    layers: Vec<Layer>,
    grads: Vec<Vec<Array1<f64>>>,
    caches: Vec<Cache>,
    input_dim: usize,
    output_dim: usize,
}

impl Network {
    pub fn empty() -> Self {
        Network {
            architecture: Architecture::default(),
            layers: Vec::new(),
            grads: Vec::new(),
            caches: Vec::new(),
            input_dim: 0,
            output_dim: 0,
        }
    }

    pub fn build(
        architecture: &Architecture,
        input_nodes: usize,
        ctx: &GraphContext,
        opts: &NetworkOptions,
    ) -> Result<Self> {
        if !(0.0..1.0).contains(&opts.dropout) {
            return Err(Error::domain(format!("dropout rate must be in [0, 1), got {}", opts.dropout)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let mut layers = Vec::new();
        let mut level = 0;
        let mut maps = 1;
        let mut nodes = input_nodes;
        let mut width: Option<usize> = None;
        let mut kernels: Vec<Option<Arc<SplineKernel>>> = vec![None; ctx.bases.len()];
        for token in &architecture.tokens {
            let stage = |msg: String| Error::Architecture { token: token.to_string(), message: msg };
            match *token {
                ArchToken::GraphConv(k) => {
                    let basis = ctx
                        .bases
                        .get(level)
                        .ok_or_else(|| stage(format!("no spectral basis for hierarchy level {level}")))?;
                    if basis.n() != nodes {
                        return Err(stage(format!(
                            "basis at level {level} has {} nodes, signal has {nodes}",
                            basis.n()
                        )));
                    }
                    let kernel = match &kernels[level] {
                        Some(k) => k.clone(),
                        None => {
                            let k = Arc::new(level_kernel(nodes, opts.n0)?);
                            kernels[level] = Some(k.clone());
                            k
                        }
                    };
                    layers.push(Layer::GraphConv(GraphConv::init(
                        maps,
                        k,
                        basis.clone(),
                        kernel,
                        opts.gc_bias,
                        &mut rng,
                    )?));
                    layers.push(Layer::Relu);
                    maps = k;
                }
                ArchToken::Pool(stride) => {
                    let pool = ctx
                        .pools
                        .get(level)
                        .ok_or_else(|| stage(format!("no pooling map from hierarchy level {level}")))?;
                    if pool.stride != stride || pool.n_in != nodes {
                        return Err(stage(format!(
                            "pooling map at level {level} has stride {} over {} nodes, expected stride {stride} over {nodes}",
                            pool.stride, pool.n_in
                        )));
                    }
                    nodes = pool.n_out();
                    level += 1;
                    layers.push(Layer::Pool(pool.clone()));
                }
                ArchToken::FullyConnected(k) => {
                    let inputs = width.unwrap_or(maps * nodes);
                    layers.push(Layer::Dense(Dense::init(inputs, k, &mut rng)));
                    layers.push(Layer::Relu);
                    if opts.dropout > 0.0 {
                        layers.push(Layer::Dropout(opts.dropout));
                    }
                    width = Some(k);
                }
            }
        }
        let inputs = width.unwrap_or(maps * nodes);
        layers.push(Layer::Dense(Dense::init(inputs, opts.output_dim, &mut rng)));
        Ok(Network::from_layers(architecture.clone(), layers, input_nodes, opts.output_dim))
    }

    fn from_layers(architecture: Architecture, layers: Vec<Layer>, input_dim: usize, output_dim: usize) -> Self {
        let grads = layers
            .iter()
            .map(|l| match l {
                Layer::GraphConv(gc) => {
                    let mut g = vec![Array1::zeros(gc.w_tilde.len())];
                    if let Some(b) = &gc.bias {
                        g.push(Array1::zeros(b.len()));
                    }
                    g
                }
                Layer::Dense(d) => vec![Array1::zeros(d.weight.len()), Array1::zeros(d.bias.len())],
                _ => Vec::new(),
            })
            .collect();
        let caches = vec![Cache::None; layers.len()];
        Network { architecture, layers, grads, caches, input_dim, output_dim }
    }

    pub fn architecture(&self) -> &Architecture {
        &self.architecture
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    /// Forward pass on `S x input_dim` rows. Dropout is active only when an rng is given.
    pub fn forward(&mut self, x: &Array2<f64>, mut rng: Option<&mut dyn RngCore>) -> Result<Array2<f64>> {
        if x.ncols() != self.input_dim {
            return Err(Error::shape(format!(
                "network expects {} input features, got {}",
                self.input_dim,
                x.ncols()
            )));
        }
        let s = x.nrows();
        let mut h = x.clone();
        for (layer, cache) in self.layers.iter().zip(self.caches.iter_mut()) {
            h = match layer {
                Layer::GraphConv(gc) => {
                    let x3 = h.view().into_shape_with_order((s, gc.in_maps(), gc.nodes())).map_err(shape_err)?;
                    let (y, x_hat) = gc.forward_with_spectral(x3)?;
                    *cache = Cache::Spectral(x_hat);
                    flatten(y)
                }
                Layer::Pool(map) => {
                    let f = h.ncols() / map.n_in;
                    let x3 = h.view().into_shape_with_order((s, f, map.n_in)).map_err(shape_err)?;
                    let (y, arg) = graph_pool_forward(map, x3)?;
                    *cache = Cache::Argmax(arg);
                    flatten(y)
                }
                Layer::Dense(d) => {
                    let y = d.forward(h.view())?;
                    *cache = Cache::Input(h);
                    y
                }
                Layer::Relu => {
                    let y = relu(&h);
                    *cache = Cache::Input(h);
                    y
                }
                Layer::Dropout(p) => {
                    let (y, mask) = dropout(&h, *p, rng.as_deref_mut())?;
                    *cache = Cache::Mask(mask);
                    y
                }
            };
        }
        Ok(h)
    }

    /// Backpropagates `grad` (w.r.t. the last forward output) and stores parameter
    /// gradients. The input gradient of the first layer is returned only when
    /// `need_input_grad` is set.
    pub fn backward(&mut self, grad: &Array2<f64>, need_input_grad: bool) -> Result<Option<Array2<f64>>> {
        let s = grad.nrows();
        let mut g = grad.clone();
        for idx in (0..self.layers.len()).rev() {
            let need = need_input_grad || idx > 0;
            let layer = &self.layers[idx];
            let cache = &self.caches[idx];
            g = match (layer, cache) {
                (Layer::GraphConv(gc), Cache::Spectral(x_hat)) => {
                    let g3 = g.view().into_shape_with_order((s, gc.out_maps(), gc.nodes())).map_err(shape_err)?;
                    let lg = gc.backward_spectral(x_hat.view(), g3, need)?;
                    self.grads[idx][0] = flatten_1d(lg.grad_w_tilde);
                    if let Some(gb) = lg.grad_bias {
                        self.grads[idx][1] = gb;
                    }
                    flatten(lg.grad_input)
                }
                (Layer::Pool(map), Cache::Argmax(arg)) => {
                    let f = g.ncols() / map.n_out();
                    let g3 = g.view().into_shape_with_order((s, f, map.n_out())).map_err(shape_err)?;
                    flatten(graph_pool_backward(map, g3, arg.as_ref())?)
                }
                (Layer::Dense(d), Cache::Input(x)) => {
                    let dg = d.backward(x.view(), g.view())?;
                    self.grads[idx][0] = flatten_1d(dg.grad_weight);
                    self.grads[idx][1] = dg.grad_bias;
                    dg.grad_input
                }
                (Layer::Relu, Cache::Input(x)) => relu_backward(x, &g),
                (Layer::Dropout(_), Cache::Mask(mask)) => dropout_backward(&g, mask.as_ref()),
                _ => return Err(Error::State(format!("layer {idx} ({}) has no forward cache", layer.name()))),
            };
            if !need {
                return Ok(None);
            }
        }
        Ok(Some(g))
    }

    /// Trainable tensors in a fixed order, paired with their latest gradients.
    pub fn params_mut(&mut self) -> Vec<ParamSlot<'_>> {
        let mut out = Vec::new();
        for (i, (layer, grads)) in self.layers.iter_mut().zip(self.grads.iter()).enumerate() {
            match layer {
                Layer::GraphConv(gc) => {
                    let shape = gc.w_tilde.shape().to_vec();
                    out.push(ParamSlot {
                        name: format!("layer{i}.graph_conv.w_tilde"),
                        shape,
                        value: gc.w_tilde.as_slice_mut().expect("standard layout"),
                        grad: grads[0].as_slice().unwrap(),
                    });
                    if let Some(b) = gc.bias.as_mut() {
                        out.push(ParamSlot {
                            name: format!("layer{i}.graph_conv.bias"),
                            shape: vec![b.len()],
                            value: b.as_slice_mut().unwrap(),
                            grad: grads[1].as_slice().unwrap(),
                        });
                    }
                }
                Layer::Dense(d) => {
                    out.push(ParamSlot {
                        name: format!("layer{i}.fully_connected.weight"),
                        shape: d.weight.shape().to_vec(),
                        value: d.weight.as_slice_mut().expect("standard layout"),
                        grad: grads[0].as_slice().unwrap(),
                    });
                    out.push(ParamSlot {
                        name: format!("layer{i}.fully_connected.bias"),
                        shape: vec![d.bias.len()],
                        value: d.bias.as_slice_mut().unwrap(),
                        grad: grads[1].as_slice().unwrap(),
                    });
                }
                _ => {}
            }
        }
        out
    }

    /// Sum of element counts over all trainable tensors.
    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| match l {
                Layer::GraphConv(gc) => gc.parameter_count(),
                Layer::Dense(d) => d.weight.len() + d.bias.len(),
                _ => 0,
            })
            .sum()
    }

    /// L2 norm of each trainable tensor, for diagnostics.
    pub fn parameter_norms(&mut self) -> Vec<(String, f64)> {
        self.params_mut()
            .into_iter()
            .map(|p| (p.name, p.value.iter().map(|v| v * v).sum::<f64>().sqrt()))
            .collect()
    }

    /// First fully connected layer's weights as `inputs x units`.
    pub fn first_dense_weights(&self) -> Option<Array2<f64>> {
        self.layers.iter().find_map(|l| match l {
            Layer::Dense(d) => Some(d.weight.t().to_owned()),
            _ => None,
        })
    }
}

pub fn count_net_parameters(network: &Network) -> usize {
    network.parameter_count()
}

fn level_kernel(nodes: usize, n0: usize) -> Result<SplineKernel> {
    let n0 = n0.min(nodes);
    if n0 == nodes {
        Ok(SplineKernel::identity(nodes))
    } else {
        build_spline_kernel(nodes, n0)
    }
}

fn flatten(a: Array3<f64>) -> Array2<f64> {
    let (s, f, n) = a.dim();
    a.into_shape_with_order((s, f * n)).unwrap()
}

fn flatten_1d<D: ndarray::Dimension>(a: ndarray::Array<f64, D>) -> Array1<f64> {
    let n = a.len();
    a.into_shape_with_order(n).unwrap()
}

fn shape_err(e: ndarray::ShapeError) -> Error {
    Error::shape(e.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::graph_basis;
    use ndarray::array;

    fn cycle_basis(n: usize) -> Arc<SpectralBasis> {
        let w = Array2::from_shape_fn((n, n), |(i, j)| {
            let d = i.abs_diff(j);
            if d == 1 || d == n - 1 { 1.0 } else { 0.0 }
        });
        Arc::new(graph_basis(&w).unwrap())
    }

    #[test]
    fn all_pass_filter_is_identity() {
        let basis = cycle_basis(8);
        let kernel = Arc::new(SplineKernel::identity(8));
        let layer = GraphConv::new(Array3::ones((1, 1, 8)), None, basis, kernel).unwrap();
        let x = Array3::from_shape_fn((2, 1, 8), |(s, _, n)| (s * 8 + n) as f64 - 3.5);
        let y = graph_conv_forward(&layer, x.view()).unwrap();
        assert!((&y - &x).iter().all(|v| v.abs() < 1e-12));
        let g = graph_conv_backward(&layer, x.view(), x.view()).unwrap();
        assert!((&g.grad_input - &x).iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn zero_weights_and_zero_grad() {
        let basis = cycle_basis(8);
        let kernel = Arc::new(build_spline_kernel(8, 3).unwrap());
        let layer = GraphConv::new(Array3::zeros((2, 1, 3)), Some(Array1::zeros(2)), basis, kernel).unwrap();
        let x = Array3::from_elem((3, 1, 8), 0.7);
        assert!(graph_conv_forward(&layer, x.view()).unwrap().iter().all(|&v| v == 0.0));
        let g = graph_conv_backward(&layer, x.view(), Array3::zeros((3, 2, 8)).view()).unwrap();
        assert!(g.grad_input.iter().chain(g.grad_w_tilde.iter()).all(|&v| v == 0.0));
        assert!(g.grad_bias.unwrap().iter().all(|&v| v == 0.0));
        assert!(graph_conv_forward(&layer, Array3::zeros((1, 2, 8)).view()).is_err());
    }

    #[test]
    fn pooling_values() {
        let map = PoolingMap::new(vec![vec![0, 1], vec![1, 2, 3]], PoolMode::Max, 2, 4).unwrap();
        let x = array![[[1.0, 3.0, 2.0, 0.5]]];
        let (y, arg) = graph_pool_forward(&map, x.view()).unwrap();
        assert_eq!(y, array![[[3.0, 3.0]]]);
        // node 1 feeds both outputs
        let gx = graph_pool_backward(&map, array![[[1.0, 2.0]]].view(), arg.as_ref()).unwrap();
        assert_eq!(gx, array![[[0.0, 3.0, 0.0, 0.0]]]);
        assert!(matches!(
            graph_pool_backward(&map, array![[[1.0, 2.0]]].view(), None),
            Err(Error::State(_))
        ));

        let avg = PoolingMap::new(vec![vec![0, 1], vec![1, 2, 3]], PoolMode::Average, 2, 4).unwrap();
        let (y, _) = graph_pool_forward(&avg, x.view()).unwrap();
        assert_eq!(y, array![[[2.0, 5.5 / 3.0]]]);
        let single = PoolingMap::new(vec![vec![0, 1, 2, 3]], PoolMode::Average, 4, 4).unwrap();
        let gx = graph_pool_backward(&single, array![[[1.0]]].view(), None).unwrap();
        assert_eq!(gx, array![[[0.25, 0.25, 0.25, 0.25]]]);
        let (c, _) = graph_pool_forward(&map, Array3::from_elem((1, 2, 4), 1.5).view()).unwrap();
        assert!(c.iter().all(|&v| v == 1.5));
    }

    #[test]
    fn max_pool_ties_pick_lowest_index() {
        let map = PoolingMap::new(vec![vec![0, 1, 2]], PoolMode::Max, 2, 3).unwrap();
        let (_, arg) = graph_pool_forward(&map, array![[[1.0, 4.0, 4.0]]].view()).unwrap();
        assert_eq!(arg.unwrap()[[0, 0, 0]], 1);
    }

    #[test]
    fn dense_basics() {
        let d = Dense { weight: Array2::eye(3), bias: Array1::zeros(3) };
        let x = array![[1.0, -2.0, 3.0]];
        assert_eq!(d.forward(x.view()).unwrap(), x);
        let d = Dense { weight: Array2::ones((2, 3)), bias: array![0.5, -1.0] };
        assert_eq!(d.forward(Array2::zeros((1, 3)).view()).unwrap(), array![[0.5, -1.0]]);
        assert!(d.forward(Array2::zeros((1, 2)).view()).is_err());
    }

    #[test]
    fn relu_values() {
        let x = array![[-1.0, 0.0, 2.0]];
        assert_eq!(relu(&x), array![[0.0, 0.0, 2.0]]);
        assert_eq!(relu_backward(&array![[-1.0, 2.0]], &array![[5.0, 7.0]]), array![[0.0, 7.0]]);
        assert_eq!(relu_backward(&array![[0.0]], &array![[5.0]]), array![[0.0]]);
    }

    #[test]
    fn dropout_modes() {
        let x = array![[1.0, 2.0, 3.0]];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(dropout(&x, 0.0, Some(&mut rng)).unwrap().0, x);
        assert_eq!(dropout::<ChaCha8Rng>(&x, 0.9, None).unwrap().0, x);
        assert!(matches!(dropout::<ChaCha8Rng>(&x, 1.0, None), Err(Error::Domain(_))));
        let (y, mask) = dropout(&x, 0.5, Some(&mut rng)).unwrap();
        let mask = mask.unwrap();
        assert!(mask.iter().all(|&m| m == 0.0 || m == 2.0));
        assert_eq!(y, &x * &mask);
        assert_eq!(dropout_backward(&array![[1.0, 1.0, 1.0]], Some(&mask)), mask);
    }

    #[test]
    fn dropout_is_unbiased() {
        let trials = 100_000;
        let p = 0.3;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = array![[1.5]];
        let mut sum = 0.0;
        for _ in 0..trials {
            sum += dropout(&x, p, Some(&mut rng)).unwrap().0[[0, 0]];
        }
        let mean = sum / trials as f64;
        // std of one draw: 1.5 * sqrt(p / (1 - p))
        let se = 1.5 * (p / (1.0 - p)).sqrt() / (trials as f64).sqrt();
        assert!((mean - 1.5).abs() < 3.0 * se, "mean {mean}, se {se}");
    }

    #[test]
    fn cross_entropy_values() {
        let (loss, grad) = softmax_cross_entropy(Array2::zeros((2, 50)).view(), &[1, 50]).unwrap();
        assert!((loss - 50f64.ln()).abs() < 1e-12);
        assert!((loss - 3.912).abs() < 1e-3);
        assert!((grad.sum()).abs() < 1e-12);
        let (loss, _) = softmax_cross_entropy(array![[1000.0, 0.0, -5.0]].view(), &[1]).unwrap();
        assert!(loss < 1e-12);
        assert!(matches!(
            softmax_cross_entropy(array![[0.0, 0.0]].view(), &[3]),
            Err(Error::LabelOutOfRange { label: 3, classes: 2 })
        ));
    }

    #[test]
    fn rmse_values() {
        let (l, g) = rmse_loss(array![1.0, 2.0].view(), &[1.0, 2.0]).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.iter().all(|&v| v == 0.0));
        let (l, _) = rmse_loss(array![3.0, 4.0].view(), &[0.0, 0.0]).unwrap();
        assert!((l - (12.5f64).sqrt()).abs() < 1e-15);
        assert!((l - 3.5355).abs() < 1e-4);
    }

    #[test]
    fn metrics() {
        let t = [1.0, 2.0, 4.0, 3.0];
        assert!((metric_r2(array![1.0, 2.0, 4.0, 3.0].view(), &t).unwrap() - 1.0).abs() < 1e-15);
        assert!((metric_r2(array![-1.0, -2.0, -4.0, -3.0].view(), &t).unwrap() - 1.0).abs() < 1e-15);
        assert!(matches!(
            metric_r2(array![1.0, 2.0].view(), &[3.0, 3.0]),
            Err(Error::UndefinedMetric(_))
        ));
        let logits = array![[0.1, 0.9], [2.0, 2.0], [0.0, -1.0]];
        assert_eq!(metric_accuracy(logits.view(), &[2, 1, 1]).unwrap(), 1.0);
        assert_eq!(metric_accuracy(logits.view(), &[2, 2, 1]).unwrap(), 2.0 / 3.0);
    }

    #[test]
    fn architecture_grammar() {
        let a: Architecture = "GC4-P4-FC1000".parse().unwrap();
        assert_eq!(
            a.tokens,
            vec![ArchToken::GraphConv(4), ArchToken::Pool(4), ArchToken::FullyConnected(1000)]
        );
        assert_eq!(a.to_string(), "GC4-P4-FC1000");
        assert_eq!(a.strides(), vec![4]);
        match "GC4-Q4".parse::<Architecture>() {
            Err(Error::Architecture { token, .. }) => assert_eq!(token, "Q4"),
            other => panic!("{other:?}"),
        }
        assert!("GC0".parse::<Architecture>().is_err());
        assert!("P1".parse::<Architecture>().is_err());
        assert!("FC10-GC4".parse::<Architecture>().is_err());
        assert!("GC4--P4".parse::<Architecture>().is_err());
        assert!("".parse::<Architecture>().unwrap().tokens.is_empty());
    }

    #[test]
    fn parameter_counts() {
        let fc: Architecture = "FC2000-FC1000".parse().unwrap();
        assert_eq!(fc.parameter_count(&[2000], 60, 50, true).unwrap(), 6_053_050);
        let gc: Architecture = "GC4".parse().unwrap();
        // GC4 on one input map plus the implicit output layer
        assert_eq!(gc.parameter_count(&[10], 60, 0, true).unwrap(), 4 * 10 + 4);
        assert_eq!(gc.parameter_count(&[100], 60, 0, true).unwrap(), 244);
        assert_eq!(Architecture::default().parameter_count(&[5], 60, 0, true).unwrap(), 0);
        assert_eq!(count_net_parameters(&Network::empty()), 0);
    }
}
