use std::sync::Arc;

use ndarray::{Array1, Array2, Array3, Axis};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use specnet::clustering::{build_hierarchy, build_pooling_map, PoolMode};
use specnet::graph::{gaussian_kernel, median_sigma, pairwise_sq_distances, supervised_distance, SimilarityGraph, KernelParams};
use specnet::data::FeatureMatrix;
use specnet::nn::{graph_conv_backward, graph_conv_forward, graph_pool_forward, GraphConv};
use specnet::spectral::{build_spline_kernel, graph_basis, normalized_laplacian, SplineKernel};

fn random_graph(n: usize, density: f64, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w = Array2::zeros((n, n));
    for i in 0..n {
        // ring keeps every degree positive
        let j = (i + 1) % n;
        w[[i, j]] = 0.5;
        w[[j, i]] = 0.5;
        for j in i + 1..n {
            if rng.random::<f64>() < density {
                let v = rng.random_range(0.05..1.0);
                w[[i, j]] = v;
                w[[j, i]] = v;
            }
        }
    }
    w
}

fn fro(a: &Array2<f64>) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

#[test]
fn cycle_spectrum_matches_closed_form() {
    let n = 8;
    let mut w = Array2::zeros((n, n));
    for i in 0..n {
        w[[i, (i + 1) % n]] = 1.0;
        w[[(i + 1) % n, i]] = 1.0;
    }
    let basis = graph_basis(&w).unwrap();
    let mut expected: Vec<f64> =
        (0..n).map(|k| 1.0 - (std::f64::consts::TAU * k as f64 / n as f64).cos()).collect();
    expected.sort_by(f64::total_cmp);
    for (got, want) in basis.eigenvalues().iter().zip(&expected) {
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }
}

#[test]
fn graph_conv_equals_dense_operator_sum() {
    let n = 12;
    let basis = Arc::new(graph_basis(&random_graph(n, 0.3, 3)).unwrap());
    let kernel = Arc::new(build_spline_kernel(n, 5).unwrap());
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut layer = GraphConv::init(2, 3, basis.clone(), kernel.clone(), true, &mut rng).unwrap();
    let bias = Array1::from_shape_simple_fn(3, || rng.random_range(-1.0..1.0));
    layer = GraphConv::new(layer.w_tilde().clone(), Some(bias.clone()), basis.clone(), kernel.clone()).unwrap();
    let x = Array3::from_shape_simple_fn((4, 2, n), || rng.random_range(-1.0..1.0));
    let y = graph_conv_forward(&layer, x.view()).unwrap();

    for o in 0..3 {
        let mut ops = Vec::new();
        for f in 0..2 {
            let w: Array1<f64> = kernel.matrix().dot(&layer.w_tilde().slice(ndarray::s![o, f, ..]));
            ops.push(basis.operator(w.view()).unwrap());
        }
        for s in 0..4 {
            let mut want: Array1<f64> = Array1::from_elem(n, bias[o]);
            for (f, op) in ops.iter().enumerate() {
                want += &op.dot(&x.slice(ndarray::s![s, f, ..]));
            }
            let got = y.slice(ndarray::s![s, o, ..]);
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn single_map_all_pass_adjoint() {
    let n = 10;
    let basis = Arc::new(graph_basis(&random_graph(n, 0.4, 1)).unwrap());
    let kernel = Arc::new(SplineKernel::identity(n));
    let layer = GraphConv::new(Array3::ones((1, 1, n)), None, basis, kernel).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = Array3::from_shape_simple_fn((1, 1, n), || rng.random_range(-1.0..1.0));
    let g = Array3::from_shape_simple_fn((1, 1, n), || rng.random_range(-1.0..1.0));
    let grads = graph_conv_backward(&layer, x.view(), g.view()).unwrap();
    for (a, b) in grads.grad_input.iter().zip(&g) {
        assert!((a - b).abs() < 1e-10);
    }
    assert!(grads.grad_bias.is_none());
}

#[test]
fn overlapping_fields_feed_both_outputs() {
    use specnet::clustering::PoolingMap;
    let map = PoolingMap::new(vec![vec![0, 1, 2], vec![2, 3]], PoolMode::Average, 2, 4).unwrap();
    let x = Array3::from_shape_vec((1, 1, 4), vec![0.0, 0.0, 6.0, 0.0]).unwrap();
    let (y, rec) = graph_pool_forward(&map, x.view()).unwrap();
    assert!(rec.is_none());
    assert_eq!(y.iter().copied().collect::<Vec<_>>(), vec![2.0, 3.0]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn spectrum_in_range_and_basis_orthonormal(n in 3usize..20, density in 0.0f64..0.8, seed in any::<u64>()) {
        let w = random_graph(n, density, seed);
        let basis = graph_basis(&w).unwrap();
        let ev = basis.eigenvalues();
        prop_assert!(ev.iter().all(|&l| (-1e-10..=2.0 + 1e-10).contains(&l)));
        prop_assert!(ev.iter().zip(ev.iter().skip(1)).all(|(a, b)| a <= b));
        let u = basis.u();
        let gram = u.dot(&u.t());
        prop_assert!(fro(&(gram - Array2::<f64>::eye(n))) < 1e-9);
        // Laplacian is diagonalized by the basis
        let lap = normalized_laplacian(&w).unwrap();
        let rebuilt = basis.operator(ev.view()).unwrap();
        prop_assert!(fro(&(rebuilt - &lap)) < 1e-9);
    }

    #[test]
    fn spectral_multipliers_commute_with_laplacian(n in 3usize..20, seed in any::<u64>()) {
        let w = random_graph(n, 0.3, seed);
        let lap = normalized_laplacian(&w).unwrap();
        let basis = graph_basis(&w).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 7);
        let mult = Array1::from_shape_simple_fn(n, || rng.random_range(-2.0..2.0));
        let m = basis.operator(mult.view()).unwrap();
        prop_assert!(fro(&(m.dot(&lap) - lap.dot(&m))) < 1e-8);
    }

    #[test]
    fn unit_multipliers_are_identity(n in 2usize..16, seed in any::<u64>()) {
        let basis = graph_basis(&random_graph(n, 0.5, seed)).unwrap();
        let m = basis.operator(Array1::ones(n).view()).unwrap();
        prop_assert!(fro(&(m - Array2::<f64>::eye(n))) < 1e-10);
    }

    #[test]
    fn gft_is_an_isometry(n in 2usize..16, seed in any::<u64>()) {
        let basis = graph_basis(&random_graph(n, 0.5, seed)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Array1::from_shape_simple_fn(n, || rng.random_range(-3.0..3.0));
        let xh = basis.gft(x.view()).unwrap();
        let back = basis.igft(xh.view()).unwrap();
        prop_assert!((x.dot(&x) - xh.dot(&xh)).abs() < 1e-9 * (1.0 + x.dot(&x)));
        prop_assert!(x.iter().zip(&back).all(|(a, b)| (a - b).abs() < 1e-10));
    }

    #[test]
    fn graph_conv_is_linear_without_bias(n in 4usize..14, n0 in 2usize..5, seed in any::<u64>()) {
        let n0 = n0.min(n);
        let basis = Arc::new(graph_basis(&random_graph(n, 0.3, seed)).unwrap());
        let kernel = Arc::new(if n0 == n { SplineKernel::identity(n) } else { build_spline_kernel(n, n0).unwrap() });
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layer = GraphConv::init(2, 2, basis, kernel, false, &mut rng).unwrap();
        let a = Array3::from_shape_simple_fn((2, 2, n), || rng.random_range(-1.0..1.0));
        let b = Array3::from_shape_simple_fn((2, 2, n), || rng.random_range(-1.0..1.0));
        let lhs = graph_conv_forward(&layer, (&a * 2.0 - &b).view()).unwrap();
        let rhs = graph_conv_forward(&layer, a.view()).unwrap() * 2.0 - graph_conv_forward(&layer, b.view()).unwrap();
        prop_assert!(lhs.iter().zip(&rhs).all(|(x, y)| (x - y).abs() < 1e-10));
    }

    #[test]
    fn gaussian_kernel_is_valid_and_monotone(l in 2usize..8, n in 2usize..10, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = FeatureMatrix::new(Array2::from_shape_simple_fn((l, n), || rng.random_range(-2.0..2.0))).unwrap();
        let d = pairwise_sq_distances(&x);
        let g = gaussian_kernel(&d, median_sigma(&d)).unwrap();
        prop_assert!(g.check_kernel().is_ok());
        let (dv, wv) = (d.values(), g.weights());
        prop_assert!(wv == wv.t());
        for ((i, j), &di) in dv.indexed_iter() {
            for ((k, m), &dk) in dv.indexed_iter() {
                if di < dk {
                    prop_assert!(wv[[i, j]] >= wv[[k, m]]);
                }
            }
        }
    }

    #[test]
    fn supervised_distance_ignores_hidden_unit_order(n in 2usize..10, m1 in 1usize..12, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w1 = Array2::from_shape_simple_fn((n, m1), || rng.random_range(-1.0..1.0));
        let mut perm: Vec<usize> = (0..m1).collect();
        for i in (1..m1).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let shuffled = w1.select(Axis(1), &perm);
        let (a, b) = (supervised_distance(&w1), supervised_distance(&shuffled));
        prop_assert!(a.values().iter().zip(b.values()).all(|(x, y)| (x - y).abs() < 1e-12));
    }

    #[test]
    fn pooling_fields_cover_each_level(n in 6usize..30, stride in 2usize..4, seed in any::<u64>()) {
        let g = SimilarityGraph::new(random_graph(n, 0.2, seed), KernelParams::Known).unwrap();
        let h = build_hierarchy(&g, &[stride], seed).unwrap();
        let sizes = h.sizes();
        prop_assert_eq!(sizes[0], n);
        prop_assert!(sizes[1] < n);
        let max = build_pooling_map(&h, 1, PoolMode::Max).unwrap();
        let avg = build_pooling_map(&h, 1, PoolMode::Average).unwrap();
        prop_assert_eq!(max.n_out(), sizes[1]);
        let members = h.levels()[1].partition.members();
        for (o, field) in max.receptive_fields.iter().enumerate() {
            prop_assert!(members[o].iter().all(|i| field.contains(i)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Array3::from_shape_simple_fn((2, 1, n), || rng.random_range(-1.0..1.0));
        let (ym, _) = graph_pool_forward(&max, x.view()).unwrap();
        let (ya, _) = graph_pool_forward(&avg, x.view()).unwrap();
        prop_assert!(ym.iter().zip(&ya).all(|(a, b)| a >= &(b - 1e-12)));
    }
}
