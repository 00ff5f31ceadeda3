//! Normalized graph Laplacian, its eigenbasis (the graph Fourier transform),
//! and the cubic-spline kernel that expands `N0` subsampled spectral weights
//! into `N` multipliers.
//!
//! Convention: the rows of `U` are eigenvectors, so the forward transform is
//! `x_hat = U x` and the inverse is `x = U^T x_hat`. For a batch stored as rows
//! (`S x N`) this becomes `X_hat = X U^T` and `X = X_hat U`.

use std::path::Path;

use nalgebra::DMatrix;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;

const SYMMETRY_TOL: f64 = 1e-10;

/// `L = I - D^{-1/2} W D^{-1/2}` with `D_ii = sum_j W_ij`.
pub fn normalized_laplacian(weights: &Array2<f64>) -> Result<Array2<f64>> {
    let (n, m) = weights.dim();
    if n != m {
        return Err(Error::shape(format!("weight matrix is {n}x{m}, expected square")));
    }
    let degrees = weights.sum_axis(Axis(1));
    if let Some(i) = degrees.iter().position(|&d| d <= 0.0 || !d.is_finite()) {
        return Err(Error::IsolatedNode(i));
    }
    let inv_sqrt = degrees.mapv(|d| 1.0 / d.sqrt());
    let mut lap = Array2::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            let a = weights[[i, j]] * (inv_sqrt[i] * inv_sqrt[j]);
            lap[[i, j]] = if i == j { 1.0 - a } else { -a };
        }
    }
    Ok(lap)
}

/// Eigenvalues ascending; rows of `u` are the matching unit eigenvectors.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralBasis {
    eigenvalues: Array1<f64>,
    u: Array2<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BasisSidecar {
    pub n: usize,
    pub graph_hash: String,
    pub convention: String,
}

impl SpectralBasis {
    pub fn from_parts(eigenvalues: Array1<f64>, u: Array2<f64>) -> Result<Self> {
        let n = eigenvalues.len();
        if u.dim() != (n, n) {
            return Err(Error::shape(format!(
                "{n} eigenvalues but eigenvector matrix is {:?}",
                u.dim()
            )));
        }
        Ok(SpectralBasis { eigenvalues, u })
    }

    pub fn n(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn eigenvalues(&self) -> &Array1<f64> {
        &self.eigenvalues
    }

    /// Row `r` is the eigenvector for `eigenvalues[r]`.
    pub fn u(&self) -> &Array2<f64> {
        &self.u
    }

    pub fn gft(&self, x: ArrayView1<f64>) -> Result<Array1<f64>> {
        self.check_len(x.len())?;
        Ok(self.u.dot(&x))
    }

    pub fn igft(&self, x_hat: ArrayView1<f64>) -> Result<Array1<f64>> {
        self.check_len(x_hat.len())?;
        Ok(self.u.t().dot(&x_hat))
    }

    /// Forward transform of every row of `x` (`S x N`).
    pub fn gft_rows(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_len(x.ncols())?;
        Ok(x.dot(&self.u.t()))
    }

    pub fn igft_rows(&self, x_hat: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_len(x_hat.ncols())?;
        Ok(x_hat.dot(&self.u))
    }

    /// `U^T diag(w) U`, the node-domain operator of a spectral multiplier.
    pub fn operator(&self, multipliers: ArrayView1<f64>) -> Result<Array2<f64>> {
        self.check_len(multipliers.len())?;
        let mut scaled = self.u.clone();
        for (mut row, &w) in scaled.axis_iter_mut(Axis(0)).zip(multipliers.iter()) {
            row *= w;
        }
        Ok(self.u.t().dot(&scaled))
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if len != self.n() {
            return Err(Error::shape(format!("signal of length {len} on a {}-node basis", self.n())));
        }
        Ok(())
    }

    /// Writes `eigenvalues.bin` (N x 1), `u.bin` (N x N) and `basis.json`.
    pub fn save(&self, dir: impl AsRef<Path>, graph_hash: &str) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let vals = self.eigenvalues.clone().insert_axis(Axis(1));
        io::write_matrix(dir.join("eigenvalues.bin"), &vals)?;
        io::write_matrix(dir.join("u.bin"), &self.u)?;
        io::write_json(
            dir.join("basis.json"),
            &BasisSidecar {
                n: self.n(),
                graph_hash: graph_hash.to_string(),
                convention: "rows-are-eigenvectors".into(),
            },
        )
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<(Self, BasisSidecar)> {
        let dir = dir.as_ref();
        let vals = io::read_matrix(dir.join("eigenvalues.bin"))?;
        if vals.ncols() != 1 {
            return Err(Error::shape("eigenvalue file must be N x 1"));
        }
        let u = io::read_matrix(dir.join("u.bin"))?;
        let sidecar: BasisSidecar = io::read_json(dir.join("basis.json"))?;
        let basis = SpectralBasis::from_parts(vals.column(0).to_owned(), u)?;
        Ok((basis, sidecar))
    }
}

/// Symmetric eigendecomposition with ascending eigenvalues and deterministic signs:
/// each eigenvector's largest-magnitude entry (lowest index on ties) is positive.
pub fn symmetric_eigen(a: &Array2<f64>) -> Result<SpectralBasis> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::shape(format!("matrix is {:?}, expected square", a.dim())));
    }
    if n == 0 {
        return Err(Error::shape("empty matrix"));
    }
    let max_iter = 1000 * n.max(10);
    let m = DMatrix::from_fn(n, n, |i, j| 0.5 * (a[[i, j]] + a[[j, i]]));
    let eig = nalgebra::SymmetricEigen::try_new(m, f64::EPSILON, max_iter)
        .ok_or(Error::Convergence { iterations: max_iter, n })?;

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]).then(i.cmp(&j)));

    let mut values = Array1::zeros(n);
    let mut u = Array2::zeros((n, n));
    for (r, &src) in order.iter().enumerate() {
        values[r] = eig.eigenvalues[src];
        let col = eig.eigenvectors.column(src);
        let mut pivot = 0;
        for i in 1..n {
            if col[i].abs() > col[pivot].abs() {
                pivot = i;
            }
        }
        let sign = if col[pivot] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..n {
            u[[r, i]] = sign * col[i];
        }
    }
    SpectralBasis::from_parts(values, u)
}

/// Eigenbasis of a symmetric Laplacian. Inputs asymmetric beyond `1e-10` are rejected.
pub fn eigendecompose(lap: &Array2<f64>) -> Result<SpectralBasis> {
    let (n, m) = lap.dim();
    if n != m {
        return Err(Error::shape(format!("Laplacian is {n}x{m}, expected square")));
    }
    let asym = lap
        .indexed_iter()
        .map(|((i, j), &v)| (v - lap[[j, i]]).abs())
        .fold(0.0, f64::max);
    if asym > SYMMETRY_TOL {
        return Err(Error::validation(format!("matrix asymmetric by {asym:e}")));
    }
    symmetric_eigen(lap)
}

/// Laplacian eigenbasis of a weight matrix.
pub fn graph_basis(weights: &Array2<f64>) -> Result<SpectralBasis> {
    eigendecompose(&normalized_laplacian(weights)?)
}

/// `N x N0` natural cubic-spline interpolation operator over frequency index.
#[derive(Debug, Clone, PartialEq)]
pub struct SplineKernel {
    k: Array2<f64>,
    knots: Vec<usize>,
}

impl SplineKernel {
    pub fn identity(n: usize) -> Self {
        SplineKernel { k: Array2::eye(n), knots: (0..n).collect() }
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.k
    }

    pub fn knots(&self) -> &[usize] {
        &self.knots
    }

    pub fn n(&self) -> usize {
        self.k.nrows()
    }

    pub fn n0(&self) -> usize {
        self.k.ncols()
    }
}

/// Knots at `round(j (N-1) / (N0-1))`, natural boundary conditions.
pub fn build_spline_kernel(n: usize, n0: usize) -> Result<SplineKernel> {
    if n0 < 2 || n0 > n {
        return Err(Error::domain(format!("need 2 <= N0 <= N, got N0={n0}, N={n}")));
    }
    if n0 == n {
        return Ok(SplineKernel::identity(n));
    }
    let knots: Vec<usize> = (0..n0)
        .map(|j| ((j * (n - 1)) as f64 / (n0 - 1) as f64).round() as usize)
        .collect();
    let xs: Vec<f64> = knots.iter().map(|&k| k as f64).collect();

    let mut k = Array2::zeros((n, n0));
    let mut y = vec![0.0; n0];
    for c in 0..n0 {
        y.iter_mut().for_each(|v| *v = 0.0);
        y[c] = 1.0;
        let m = natural_second_derivatives(&xs, &y);
        let mut seg = 0;
        for t in 0..n {
            let t = t as f64;
            while seg + 2 < n0 && t > xs[seg + 1] {
                seg += 1;
            }
            let (x0, x1) = (xs[seg], xs[seg + 1]);
            let h = x1 - x0;
            let a = x1 - t;
            let b = t - x0;
            let v = m[seg] * a * a * a / (6.0 * h)
                + m[seg + 1] * b * b * b / (6.0 * h)
                + (y[seg] / h - m[seg] * h / 6.0) * a
                + (y[seg + 1] / h - m[seg + 1] * h / 6.0) * b;
            k[[t as usize, c]] = v;
        }
    }
    // knot rows select exactly one weight
    for (j, &row) in knots.iter().enumerate() {
        k.row_mut(row).fill(0.0);
        k[[row, j]] = 1.0;
    }
    Ok(SplineKernel { k, knots })
}

/// Second derivatives of the natural cubic spline through `(xs, ys)` (Thomas algorithm).
fn natural_second_derivatives(xs: &[f64], ys: &[f64]) -> Vec<f64> {
    let n = xs.len();
    let mut m = vec![0.0; n];
    if n < 3 {
        return m;
    }
    let inner = n - 2;
    let mut diag = vec![0.0; inner];
    let mut upper = vec![0.0; inner];
    let mut rhs = vec![0.0; inner];
    for i in 1..n - 1 {
        let h0 = xs[i] - xs[i - 1];
        let h1 = xs[i + 1] - xs[i];
        diag[i - 1] = 2.0 * (h0 + h1);
        upper[i - 1] = h1;
        rhs[i - 1] = 6.0 * ((ys[i + 1] - ys[i]) / h1 - (ys[i] - ys[i - 1]) / h0);
    }
    // forward sweep; sub-diagonal entry for row r is h0 of that row = xs[r+1] - xs[r]
    for r in 1..inner {
        let lower = xs[r + 1] - xs[r];
        let f = lower / diag[r - 1];
        diag[r] -= f * upper[r - 1];
        rhs[r] -= f * rhs[r - 1];
    }
    let mut sol = vec![0.0; inner];
    sol[inner - 1] = rhs[inner - 1] / diag[inner - 1];
    for r in (0..inner - 1).rev() {
        sol[r] = (rhs[r] - upper[r] * sol[r + 1]) / diag[r];
    }
    m[1..n - 1].copy_from_slice(&sol);
    m
}

/// `w = K w_tilde`.
pub fn interpolate_weights(kernel: &SplineKernel, w_tilde: ArrayView1<f64>) -> Result<Array1<f64>> {
    if w_tilde.len() != kernel.n0() {
        return Err(Error::shape(format!(
            "{} subsampled weights for a kernel with N0={}",
            w_tilde.len(),
            kernel.n0()
        )));
    }
    Ok(kernel.k.dot(&w_tilde))
}
