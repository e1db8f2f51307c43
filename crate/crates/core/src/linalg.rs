//! Sparse linear algebra: triplet assembly, CSR storage, a direct LU
//! factorization with reusable symbolic analysis, and restarted GMRES.

use faer::prelude::{Reborrow, Solve};
use faer::sparse::linalg::solvers::{Lu, SymbolicLu};
use faer::sparse::{SparseColMat, Triplet};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LinalgError {
    #[error("matrix is singular or structurally deficient")]
    Singular,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("no convergence in {iterations} iterations (residual {residual:.3e})")]
    NoConvergence { iterations: usize, residual: f64 },
}

/// Accumulating triplet builder; duplicate entries sum.
#[derive(Debug, Clone)]
pub struct Triplets {
    nrows: usize,
    ncols: usize,
    entries: Vec<(usize, usize, f64)>,
}

impl Triplets {
    pub fn new(nrows: usize, ncols: usize) -> Self {
        Self { nrows, ncols, entries: Vec::new() }
    }

    pub fn push(&mut self, row: usize, col: usize, val: f64) {
        debug_assert!(row < self.nrows && col < self.ncols);
        if val != 0.0 {
            self.entries.push((row, col, val));
        }
    }

    /// Keep the entry even when it is exactly zero; used to pin a sparsity
    /// pattern that must stay stable across refactorizations.
    pub fn push_always(&mut self, row: usize, col: usize, val: f64) {
        debug_assert!(row < self.nrows && col < self.ncols);
        self.entries.push((row, col, val));
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    /// Drop all stored entries for the given rows (used when replacing rows
    /// with boundary conditions).
    pub fn clear_rows(&mut self, rows: &[bool]) {
        self.entries.retain(|&(r, _, _)| !rows[r]);
    }

    pub fn to_csr(&self) -> CsrMatrix {
        let mut counts = vec![0usize; self.nrows + 1];
        let mut sorted = self.entries.clone();
        sorted.sort_unstable_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        // merge duplicates
        let mut merged: Vec<(usize, usize, f64)> = Vec::with_capacity(sorted.len());
        for (r, c, v) in sorted {
            match merged.last_mut() {
                Some(last) if last.0 == r && last.1 == c => last.2 += v,
                _ => merged.push((r, c, v)),
            }
        }
        for &(r, _, _) in &merged {
            counts[r + 1] += 1;
        }
        for i in 0..self.nrows {
            counts[i + 1] += counts[i];
        }
        let col_idx = merged.iter().map(|e| e.1).collect();
        let vals = merged.iter().map(|e| e.2).collect();
        CsrMatrix { nrows: self.nrows, ncols: self.ncols, row_ptr: counts, col_idx, vals }
    }
}

/// Compressed sparse row matrix.
#[derive(Debug, Clone)]
pub struct CsrMatrix {
    nrows: usize,
    ncols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    vals: Vec<f64>,
}

impl CsrMatrix {
    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    /// Position of a stored entry in the value array.
    pub fn entry_index(&self, row: usize, col: usize) -> Option<usize> {
        let (lo, hi) = (self.row_ptr[row], self.row_ptr[row + 1]);
        self.col_idx[lo..hi].binary_search(&col).ok().map(|k| lo + k)
    }

    pub fn values(&self) -> &[f64] {
        &self.vals
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.vals
    }

    pub fn transpose(&self) -> CsrMatrix {
        let mut t = Triplets::new(self.ncols, self.nrows);
        for r in 0..self.nrows {
            for (c, v) in self.row_entries(r) {
                t.push_always(c, r, v);
            }
        }
        t.to_csr()
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        let (lo, hi) = (self.row_ptr[row], self.row_ptr[row + 1]);
        match self.col_idx[lo..hi].binary_search(&col) {
            Ok(k) => self.vals[lo + k],
            Err(_) => 0.0,
        }
    }

    pub fn row_entries(&self, row: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let (lo, hi) = (self.row_ptr[row], self.row_ptr[row + 1]);
        self.col_idx[lo..hi].iter().cloned().zip(self.vals[lo..hi].iter().cloned())
    }

    pub fn matvec(&self, x: &[f64], out: &mut [f64]) {
        assert_eq!(x.len(), self.ncols);
        assert_eq!(out.len(), self.nrows);
        for r in 0..self.nrows {
            let mut s = 0.0;
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                s += self.vals[k] * x[self.col_idx[k]];
            }
            out[r] = s;
        }
    }

    pub fn matvec_transpose(&self, x: &[f64], out: &mut [f64]) {
        assert_eq!(x.len(), self.nrows);
        assert_eq!(out.len(), self.ncols);
        out.fill(0.0);
        for r in 0..self.nrows {
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                out[self.col_idx[k]] += self.vals[k] * x[r];
            }
        }
    }

    /// Quadratic form x^T A y.
    pub fn bilinear(&self, x: &[f64], y: &[f64]) -> f64 {
        let mut s = 0.0;
        for r in 0..self.nrows {
            let mut row = 0.0;
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                row += self.vals[k] * y[self.col_idx[k]];
            }
            s += x[r] * row;
        }
        s
    }

    /// Scale every stored value.
    pub fn scale(&mut self, factor: f64) {
        for v in self.vals.iter_mut() {
            *v *= factor;
        }
    }

    /// Entrywise sum with matching sparsity union.
    pub fn add_scaled(&self, other: &CsrMatrix, factor: f64) -> CsrMatrix {
        assert_eq!((self.nrows, self.ncols), (other.nrows, other.ncols));
        let mut t = Triplets::new(self.nrows, self.ncols);
        for r in 0..self.nrows {
            for (c, v) in self.row_entries(r) {
                t.push(r, c, v);
            }
            for (c, v) in other.row_entries(r) {
                t.push(r, c, factor * v);
            }
        }
        t.to_csr()
    }

    fn to_faer(&self) -> Result<SparseColMat<usize, f64>, LinalgError> {
        let mut trip = Vec::with_capacity(self.nnz());
        for r in 0..self.nrows {
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                trip.push(Triplet::new(r, self.col_idx[k], self.vals[k]));
            }
        }
        SparseColMat::try_new_from_triplets(self.nrows, self.ncols, &trip)
            .map_err(|_| LinalgError::Shape("invalid triplet layout".into()))
    }
}

/// Direct sparse LU with cached symbolic analysis; refactorization with an
/// identical sparsity pattern skips the symbolic phase.
pub struct SparseLu {
    n: usize,
    symbolic: SymbolicLu<usize>,
    numeric: Lu<usize, f64>,
}

impl SparseLu {
    pub fn factor(a: &CsrMatrix) -> Result<Self, LinalgError> {
        if a.nrows() != a.ncols() {
            return Err(LinalgError::Shape(format!("{}x{} not square", a.nrows(), a.ncols())));
        }
        let fa = a.to_faer()?;
        let symbolic =
            SymbolicLu::try_new(fa.symbolic()).map_err(|_| LinalgError::Singular)?;
        let numeric = Lu::try_new_with_symbolic(symbolic.clone(), fa.rb())
            .map_err(|_| LinalgError::Singular)?;
        Ok(Self { n: a.nrows(), symbolic, numeric })
    }

    /// Refactor with new values; the pattern must match the original.
    pub fn refactor(&mut self, a: &CsrMatrix) -> Result<(), LinalgError> {
        if a.nrows() != self.n || a.ncols() != self.n {
            return Err(LinalgError::Shape("refactor size mismatch".into()));
        }
        let fa = a.to_faer()?;
        self.numeric = Lu::try_new_with_symbolic(self.symbolic.clone(), fa.rb())
            .map_err(|_| LinalgError::Singular)?;
        Ok(())
    }

    pub fn solve_in_place(&self, b: &mut [f64]) {
        assert_eq!(b.len(), self.n);
        let mut rhs = faer::Mat::from_fn(self.n, 1, |i, _| b[i]);
        self.numeric.solve_in_place(rhs.as_mut());
        for i in 0..self.n {
            b[i] = rhs[(i, 0)];
        }
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let mut x = b.to_vec();
        self.solve_in_place(&mut x);
        x
    }
}

#[derive(Debug, Clone)]
pub struct GmresOptions {
    pub restart: usize,
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for GmresOptions {
    fn default() -> Self {
        Self { restart: 50, max_iters: 500, tol: 1e-10 }
    }
}

#[derive(Debug, Clone)]
pub struct GmresStats {
    pub iterations: usize,
    pub residual: f64,
}

/// Right-preconditioned restarted GMRES: solves A x = b with x = M^{-1} u.
/// `apply_a` computes A v; `precond` applies M^{-1} in place. `x` holds the
/// initial guess on entry and the solution on exit. Tolerance is relative
/// to ||b||.
pub fn gmres(
    apply_a: &mut dyn FnMut(&[f64], &mut [f64]),
    precond: &mut dyn FnMut(&mut [f64]),
    b: &[f64],
    x: &mut [f64],
    opts: &GmresOptions,
) -> Result<GmresStats, LinalgError> {
    let n = b.len();
    assert_eq!(x.len(), n);
    let bnorm = norm(b);
    if bnorm == 0.0 {
        x.fill(0.0);
        return Ok(GmresStats { iterations: 0, residual: 0.0 });
    }
    let m = opts.restart.max(1);
    let mut total_iters = 0;
    let mut buf = vec![0.0; n];
    loop {
        apply_a(x, &mut buf);
        let mut r0: Vec<f64> = b.iter().zip(&buf).map(|(b, a)| b - a).collect();
        let beta = norm(&r0);
        if beta / bnorm < opts.tol {
            return Ok(GmresStats { iterations: total_iters, residual: beta / bnorm });
        }
        if total_iters >= opts.max_iters {
            return Err(LinalgError::NoConvergence {
                iterations: total_iters,
                residual: beta / bnorm,
            });
        }
        for v in r0.iter_mut() {
            *v /= beta;
        }
        let mut basis: Vec<Vec<f64>> = vec![r0];
        let mut h = vec![vec![0.0f64; m]; m + 1];
        let mut cs = vec![0.0f64; m];
        let mut sn = vec![0.0f64; m];
        let mut g = vec![0.0f64; m + 1];
        g[0] = beta;
        let mut k_used = 0;
        for k in 0..m {
            if total_iters >= opts.max_iters {
                break;
            }
            total_iters += 1;
            let mut z = basis[k].clone();
            precond(&mut z);
            let mut w = vec![0.0; n];
            apply_a(&z, &mut w);
            // modified Gram-Schmidt
            for (j, vj) in basis.iter().enumerate().take(k + 1) {
                let hjk = dot(&w, vj);
                h[j][k] = hjk;
                for i in 0..n {
                    w[i] -= hjk * vj[i];
                }
            }
            let hk1 = norm(&w);
            h[k + 1][k] = hk1;
            // apply stored Givens rotations to the new column
            for j in 0..k {
                let t = cs[j] * h[j][k] + sn[j] * h[j + 1][k];
                h[j + 1][k] = -sn[j] * h[j][k] + cs[j] * h[j + 1][k];
                h[j][k] = t;
            }
            let denom = (h[k][k] * h[k][k] + hk1 * hk1).sqrt();
            if denom == 0.0 {
                k_used = k + 1;
                break;
            }
            cs[k] = h[k][k] / denom;
            sn[k] = h[k + 1][k] / denom;
            h[k][k] = denom;
            h[k + 1][k] = 0.0;
            g[k + 1] = -sn[k] * g[k];
            g[k] *= cs[k];
            k_used = k + 1;
            let rel = g[k + 1].abs() / bnorm;
            if rel < opts.tol {
                break;
            }
            if hk1 == 0.0 {
                break;
            }
            let mut vnext = w;
            for v in vnext.iter_mut() {
                *v /= hk1;
            }
            basis.push(vnext);
        }
        // back substitution for the projected least-squares problem
        let mut ycoef = vec![0.0f64; k_used];
        for k in (0..k_used).rev() {
            let mut s = g[k];
            for j in k + 1..k_used {
                s -= h[k][j] * ycoef[j];
            }
            ycoef[k] = s / h[k][k];
        }
        let mut update = vec![0.0; n];
        for (k, &yk) in ycoef.iter().enumerate() {
            for i in 0..n {
                update[i] += yk * basis[k][i];
            }
        }
        precond(&mut update);
        for i in 0..n {
            x[i] += update[i];
        }
    }
}

fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};

    fn random_sparse(n: usize, seed: u64) -> (CsrMatrix, DMatrix<f64>) {
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
        let mut t = Triplets::new(n, n);
        let mut dense = DMatrix::zeros(n, n);
        for i in 0..n {
            // diagonally dominant so the system is well conditioned
            let d = 5.0 + (i as f64 % 3.0);
            t.push(i, i, d);
            dense[(i, i)] += d;
            for _ in 0..3 {
                let j = (rand::Rng::gen::<u64>(&mut rng) % n as u64) as usize;
                let v: f64 = StandardNormal.sample(&mut rng);
                t.push(i, j, 0.3 * v);
                dense[(i, j)] += 0.3 * v;
            }
        }
        (t.to_csr(), dense)
    }

    #[test]
    fn csr_matches_dense_matvec() {
        let (a, d) = random_sparse(30, 1);
        let x: Vec<f64> = (0..30).map(|i| (i as f64).sin()).collect();
        let mut out = vec![0.0; 30];
        a.matvec(&x, &mut out);
        let expect = &d * DMatrix::from_column_slice(30, 1, &x);
        for i in 0..30 {
            assert!((out[i] - expect[(i, 0)]).abs() < 1e-12);
        }
        let mut outt = vec![0.0; 30];
        a.matvec_transpose(&x, &mut outt);
        let expect_t = d.transpose() * DMatrix::from_column_slice(30, 1, &x);
        for i in 0..30 {
            assert!((outt[i] - expect_t[(i, 0)]).abs() < 1e-12);
        }
    }

    #[test]
    fn duplicate_triplets_sum() {
        let mut t = Triplets::new(2, 2);
        t.push(0, 0, 1.0);
        t.push(0, 0, 2.5);
        t.push(1, 0, -1.0);
        let a = t.to_csr();
        assert_eq!(a.nnz(), 2);
        assert_eq!(a.get(0, 0), 3.5);
        assert_eq!(a.get(1, 0), -1.0);
        assert_eq!(a.get(1, 1), 0.0);
    }

    #[test]
    fn lu_solves_and_refactors() {
        let (a, d) = random_sparse(40, 2);
        let xstar: Vec<f64> = (0..40).map(|i| (i as f64 * 0.37).cos()).collect();
        let mut b = vec![0.0; 40];
        a.matvec(&xstar, &mut b);
        let mut lu = SparseLu::factor(&a).unwrap();
        let x = lu.solve(&b);
        for (xi, xs) in x.iter().zip(&xstar) {
            assert!((xi - xs).abs() < 1e-10);
        }
        // refactor with scaled values, same pattern
        let mut a2 = a.clone();
        a2.scale(2.0);
        lu.refactor(&a2).unwrap();
        let x2 = lu.solve(&b);
        for (xi, xs) in x2.iter().zip(&xstar) {
            assert!((xi - 0.5 * xs).abs() < 1e-10);
        }
        let _ = d;
    }

    #[test]
    fn lu_rejects_singular() {
        let mut t = Triplets::new(3, 3);
        t.push(0, 0, 1.0);
        t.push(1, 1, 1.0);
        // row 2 empty
        let a = t.to_csr();
        assert!(SparseLu::factor(&a).is_err());
    }

    #[test]
    fn gmres_unpreconditioned_matches_direct() {
        let (a, _) = random_sparse(50, 3);
        let xstar: Vec<f64> = (0..50).map(|i| ((i * i) as f64 * 0.1).sin()).collect();
        let mut b = vec![0.0; 50];
        a.matvec(&xstar, &mut b);
        let mut x = vec![0.0; 50];
        let stats = gmres(
            &mut |v, out| a.matvec(v, out),
            &mut |_v| {},
            &b,
            &mut x,
            &GmresOptions { restart: 30, max_iters: 300, tol: 1e-12 },
        )
        .unwrap();
        assert!(stats.residual < 1e-12);
        for (xi, xs) in x.iter().zip(&xstar) {
            assert!((xi - xs).abs() < 1e-8, "{xi} {xs}");
        }
    }

    #[test]
    fn gmres_with_lu_preconditioner_converges_fast() {
        let (a, _) = random_sparse(60, 4);
        // perturb the operator slightly; precondition with the unperturbed LU
        let mut t = Triplets::new(60, 60);
        for r in 0..60 {
            for (c, v) in a.row_entries(r) {
                t.push(r, c, v);
            }
            t.push(r, (r + 1) % 60, 0.05);
        }
        let ap = t.to_csr();
        let lu = SparseLu::factor(&a).unwrap();
        let xstar: Vec<f64> = (0..60).map(|i| (i as f64).cos()).collect();
        let mut b = vec![0.0; 60];
        ap.matvec(&xstar, &mut b);
        let mut x = vec![0.0; 60];
        let stats = gmres(
            &mut |v, out| ap.matvec(v, out),
            &mut |v| lu.solve_in_place(v),
            &b,
            &mut x,
            &GmresOptions::default(),
        )
        .unwrap();
        assert!(stats.iterations <= 15, "took {} iterations", stats.iterations);
        for (xi, xs) in x.iter().zip(&xstar) {
            assert!((xi - xs).abs() < 1e-8);
        }
    }

    #[test]
    fn gmres_zero_rhs() {
        let (a, _) = random_sparse(10, 5);
        let mut x = vec![1.0; 10];
        let stats = gmres(
            &mut |v, out| a.matvec(v, out),
            &mut |_| {},
            &vec![0.0; 10],
            &mut x,
            &GmresOptions::default(),
        )
        .unwrap();
        assert_eq!(stats.iterations, 0);
        assert!(x.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn clear_rows_drops_entries() {
        let mut t = Triplets::new(3, 3);
        t.push(0, 0, 1.0);
        t.push(1, 1, 2.0);
        t.push(2, 2, 3.0);
        let mut mask = vec![false; 3];
        mask[1] = true;
        t.clear_rows(&mask);
        let a = t.to_csr();
        assert_eq!(a.get(1, 1), 0.0);
        assert_eq!(a.get(0, 0), 1.0);
    }
}
