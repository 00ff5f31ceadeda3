//! Central finite-difference checks of every backward pass.

use std::sync::Arc;

use ndarray::{Array1, Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::clustering::{build_hierarchy_with_bases, build_pooling_map, PoolMode};
use crate::data::FeatureMatrix;
use crate::error::{Error, Result};
use crate::graph::{gaussian_kernel, median_sigma, pairwise_sq_distances, SimilarityGraph};
use crate::nn::{
    dropout, graph_conv_backward, graph_conv_forward, graph_pool_backward, graph_pool_forward, relu, relu_backward,
    rmse_loss, softmax_cross_entropy, Architecture, Dense, GraphContext, GraphConv, Network, NetworkOptions,
};
use crate::spectral::{build_spline_kernel, SpectralBasis, SplineKernel};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GradcheckSizes {
    pub nodes: usize,
    pub in_maps: usize,
    pub out_maps: usize,
    pub n0: usize,
    pub samples: usize,
}

impl Default for GradcheckSizes {
    fn default() -> Self {
        GradcheckSizes { nodes: 16, in_maps: 2, out_maps: 3, n0: 5, samples: 4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub rel_error: f64,
    pub passed: bool,
}

/// `|a - b| / max(|a|, |b|)` over whole tensors; 0 when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut a.iter().zip(b).map(|(x, y)| x - y));
    let scale = norm(&mut a.iter().copied()).max(norm(&mut b.iter().copied()));
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

/// Central differences of `f` at `x`.
pub fn numeric_gradient(x: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + STEP;
            let up = f(&probe);
            probe[i] = orig - STEP;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * STEP)
        })
        .collect()
}

struct Suite<'a> {
    corrupt: Option<&'a str>,
    results: Vec<CheckResult>,
}

impl Suite<'_> {
    fn record(&mut self, name: &str, mut analytic: Vec<f64>, numeric: &[f64]) {
        if self.corrupt == Some(name) {
            let bump = 1e-3 * analytic.iter().map(|v| v.abs()).fold(1.0, f64::max);
            if let Some(first) = analytic.first_mut() {
                *first += bump;
            }
        }
        let rel_error = relative_error(&analytic, numeric);
        self.results.push(CheckResult { name: name.to_string(), rel_error, passed: rel_error < TOLERANCE });
    }
}

fn uniform(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Values in `[-1, -0.05] U [0.05, 1]`, safely away from kinks at 0.
fn away_from_zero(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let m = rng.random_range(0.05..1.0);
            if rng.random::<bool>() { m } else { -m }
        })
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn random_graph(rng: &mut ChaCha8Rng, n: usize) -> Result<SimilarityGraph> {
    let pts = Array2::from_shape_vec((3, n), uniform(rng, 3 * n)).unwrap();
    let d = pairwise_sq_distances(&FeatureMatrix::new(pts)?);
    gaussian_kernel(&d, median_sigma(&d))
}

fn kernel_for(n: usize, n0: usize) -> Result<SplineKernel> {
    if n0 >= n {
        Ok(SplineKernel::identity(n))
    } else {
        build_spline_kernel(n, n0)
    }
}

/// Runs the whole suite. `corrupt` names one check whose analytic gradient is
/// deliberately perturbed, to exercise failure reporting.
pub fn run_gradcheck(seed: u64, sizes: &GradcheckSizes, corrupt: Option<&str>) -> Result<Vec<CheckResult>> {
    let GradcheckSizes { nodes: n, in_maps: fi, out_maps: fo, n0, samples: s } = *sizes;
    if n < 4 || fi == 0 || fo == 0 || n0 == 0 || s == 0 {
        return Err(Error::validation("gradcheck sizes must be positive with at least 4 nodes"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut suite = Suite { corrupt, results: Vec::new() };

    let graph = random_graph(&mut rng, n)?;
    let (hierarchy, bases) = build_hierarchy_with_bases(&graph, &[2], seed, None)?;
    let basis = Arc::new(bases[0].clone());
    let kernel = Arc::new(kernel_for(n, n0.min(n))?);
    let n0 = kernel.n0();

    // graph convolution
    let x = uniform(&mut rng, s * fi * n);
    let w = uniform(&mut rng, fo * fi * n0);
    let b = uniform(&mut rng, fo);
    let r = uniform(&mut rng, s * fo * n);
    let gc = |w: &[f64], b: &[f64]| -> GraphConv {
        GraphConv::new(
            Array3::from_shape_vec((fo, fi, n0), w.to_vec()).unwrap(),
            Some(Array1::from_vec(b.to_vec())),
            basis.clone(),
            kernel.clone(),
        )
        .unwrap()
    };
    let x3 = |x: &[f64], f: usize| Array3::from_shape_vec((s, f, n), x.to_vec()).unwrap();
    let gc_loss = |x: &[f64], w: &[f64], b: &[f64]| -> f64 {
        let y = graph_conv_forward(&gc(w, b), x3(x, fi).view()).unwrap();
        dot(y.as_slice().unwrap(), &r)
    };
    let grads = graph_conv_backward(&gc(&w, &b), x3(&x, fi).view(), x3(&r, fo).view())?;
    suite.record("graph_conv.input", grads.grad_input.into_iter().collect(), &numeric_gradient(&x, |v| gc_loss(v, &w, &b)));
    suite.record("graph_conv.w_tilde", grads.grad_w_tilde.into_iter().collect(), &numeric_gradient(&w, |v| gc_loss(&x, v, &b)));
    suite.record(
        "graph_conv.bias",
        grads.grad_bias.map(|g| g.to_vec()).unwrap_or_default(),
        &numeric_gradient(&b, |v| gc_loss(&x, &w, v)),
    );

    // pooling
    for mode in [PoolMode::Average, PoolMode::Max] {
        let map = build_pooling_map(&hierarchy, 1, mode)?;
        let m = map.n_out();
        let x = uniform(&mut rng, s * fi * n);
        let r = uniform(&mut rng, s * fi * m);
        let rg = Array3::from_shape_vec((s, fi, m), r.clone()).unwrap();
        let (_, arg) = graph_pool_forward(&map, x3(&x, fi).view())?;
        let analytic = graph_pool_backward(&map, rg.view(), arg.as_ref())?;
        let numeric = numeric_gradient(&x, |v| {
            let (y, _) = graph_pool_forward(&map, x3(v, fi).view()).unwrap();
            dot(y.as_slice().unwrap(), &r)
        });
        let name = match mode {
            PoolMode::Average => "pool.average",
            PoolMode::Max => "pool.max",
        };
        suite.record(name, analytic.into_iter().collect(), &numeric);
    }

    // fully connected
    let (din, dout) = (fi * n, fo + 2);
    let x = uniform(&mut rng, s * din);
    let w = uniform(&mut rng, dout * din);
    let b = uniform(&mut rng, dout);
    let r = uniform(&mut rng, s * dout);
    let dense = |w: &[f64], b: &[f64]| Dense {
        weight: Array2::from_shape_vec((dout, din), w.to_vec()).unwrap(),
        bias: Array1::from_vec(b.to_vec()),
    };
    let xm = |x: &[f64]| Array2::from_shape_vec((s, din), x.to_vec()).unwrap();
    let fc_loss = |x: &[f64], w: &[f64], b: &[f64]| -> f64 {
        let y = dense(w, b).forward(xm(x).view()).unwrap();
        dot(y.as_slice().unwrap(), &r)
    };
    let g = dense(&w, &b).backward(xm(&x).view(), Array2::from_shape_vec((s, dout), r.clone()).unwrap().view())?;
    suite.record("fully_connected.input", g.grad_input.into_iter().collect(), &numeric_gradient(&x, |v| fc_loss(v, &w, &b)));
    suite.record("fully_connected.weight", g.grad_weight.into_iter().collect(), &numeric_gradient(&w, |v| fc_loss(&x, v, &b)));
    suite.record("fully_connected.bias", g.grad_bias.to_vec(), &numeric_gradient(&b, |v| fc_loss(&x, &w, v)));

    // relu, away from the kink
    let x = away_from_zero(&mut rng, s * din);
    let r = uniform(&mut rng, s * din);
    let analytic = relu_backward(&xm(&x), &xm(&r));
    let numeric = numeric_gradient(&x, |v| dot(relu(&xm(v)).as_slice().unwrap(), &r));
    suite.record("relu", analytic.into_iter().collect(), &numeric);

    // dropout with a fixed mask
    let x = uniform(&mut rng, s * din);
    let mut mask_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let (_, mask) = dropout(&xm(&x), 0.4, Some(&mut mask_rng))?;
    let mask = mask.expect("training mode mask");
    let analytic = crate::nn::dropout_backward(&xm(&r), Some(&mask));
    let numeric = numeric_gradient(&x, |v| dot((&xm(v) * &mask).as_slice().unwrap(), &r));
    suite.record("dropout", analytic.into_iter().collect(), &numeric);

    // losses
    let classes = fo + 1;
    let logits = uniform(&mut rng, s * classes);
    let labels: Vec<usize> = (0..s).map(|i| i % classes + 1).collect();
    let lm = |v: &[f64]| Array2::from_shape_vec((s, classes), v.to_vec()).unwrap();
    let (_, g) = softmax_cross_entropy(lm(&logits).view(), &labels)?;
    let numeric = numeric_gradient(&logits, |v| softmax_cross_entropy(lm(v).view(), &labels).unwrap().0);
    suite.record("softmax_cross_entropy", g.into_iter().collect(), &numeric);

    let pred = uniform(&mut rng, s);
    let target = uniform(&mut rng, s);
    let (_, g) = rmse_loss(Array1::from_vec(pred.clone()).view(), &target)?;
    let numeric = numeric_gradient(&pred, |v| rmse_loss(Array1::from_vec(v.to_vec()).view(), &target).unwrap().0);
    suite.record("rmse", g.to_vec(), &numeric);

    // composite two-layer spectral network
    for mode in [PoolMode::Average, PoolMode::Max] {
        let ctx = GraphContext {
            bases: bases.iter().cloned().map(Arc::new).collect::<Vec<Arc<SpectralBasis>>>(),
            pools: vec![Arc::new(build_pooling_map(&hierarchy, 1, mode)?)],
        };
        let arch: Architecture = format!("GC{fo}-P2-GC{fo}-FC8").parse()?;
        let opts = NetworkOptions { n0: sizes.n0, gc_bias: true, dropout: 0.0, output_dim: classes, seed };
        let mut net = Network::build(&arch, n, &ctx, &opts)?;
        // zero biases put dead units exactly on the ReLU kink
        for p in net.params_mut().into_iter().filter(|p| p.name.ends_with("bias")) {
            p.value.iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
        }
        let x = Array2::from_shape_vec((s, n), uniform(&mut rng, s * n)).unwrap();
        let out = net.forward(&x, None)?;
        let (_, g) = softmax_cross_entropy(out.view(), &labels)?;
        let gx = net.backward(&g, true)?.expect("input gradient");

        let mut analytic: Vec<f64> = gx.iter().copied().collect();
        let mut numeric = numeric_gradient(x.as_slice().unwrap(), |v| {
            let xv = Array2::from_shape_vec((s, n), v.to_vec()).unwrap();
            let o = net.clone().forward(&xv, None).unwrap();
            softmax_cross_entropy(o.view(), &labels).unwrap().0
        });
        let slots: Vec<(Vec<f64>, Vec<f64>)> =
            net.params_mut().iter().map(|p| (p.value.to_vec(), p.grad.to_vec())).collect();
        for (k, (value, grad)) in slots.iter().enumerate() {
            analytic.extend_from_slice(grad);
            numeric.extend(numeric_gradient(value, |v| {
                let mut probe = net.clone();
                probe.params_mut()[k].value.copy_from_slice(v);
                let o = probe.forward(&x, None).unwrap();
                softmax_cross_entropy(o.view(), &labels).unwrap().0
            }));
        }
        let name = match mode {
            PoolMode::Average => "network.average",
            PoolMode::Max => "network.max",
        };
        suite.record(name, analytic, &numeric);
    }

    Ok(suite.results)
}

/// Names of all checks run by [`run_gradcheck`], in order.
pub const CHECK_NAMES: [&str; 14] = [
    "graph_conv.input",
    "graph_conv.w_tilde",
    "graph_conv.bias",
    "pool.average",
    "pool.max",
    "fully_connected.input",
    "fully_connected.weight",
    "fully_connected.bias",
    "relu",
    "dropout",
    "softmax_cross_entropy",
    "rmse",
    "network.average",
    "network.max",
];

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_suite_passes() {
        let results = run_gradcheck(0, &GradcheckSizes::default(), None).unwrap();
        let names: Vec<&str> = results.iter().map(|r| r.name.as_str()).collect();
        assert_eq!(names, CHECK_NAMES);
        for r in &results {
            assert!(r.passed, "{} rel error {:e}", r.name, r.rel_error);
        }
    }

    #[test]
    fn identity_spline_path_passes() {
        let sizes = GradcheckSizes { nodes: 8, n0: 8, ..GradcheckSizes::default() };
        assert!(run_gradcheck(3, &sizes, None).unwrap().iter().all(|r| r.passed));
    }

    #[test]
    fn corruption_is_reported_by_name() {
        let results = run_gradcheck(1, &GradcheckSizes::default(), Some("graph_conv.w_tilde")).unwrap();
        let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
        assert_eq!(failed, ["graph_conv.w_tilde"]);
    }

    #[test]
    fn relative_error_edge_cases() {
        assert_eq!(relative_error(&[0.0], &[0.0]), 0.0);
        assert!((relative_error(&[1.0], &[2.0]) - 0.5).abs() < 1e-15);
    }
}
