//! Measurement operators for basis pursuit. Both implementations cache an
//! SVD so that the Euclidean projection onto the misfit tube
//! {x : ||A x - y|| <= eps} is exact (solved by a scalar secular equation).

use super::CsError;
use nalgebra::DMatrix;

pub trait MeasurementOperator: Send + Sync {
    /// Vectorized measurement count.
    fn rows(&self) -> usize;
    /// Vectorized unknown count.
    fn cols(&self) -> usize;
    fn apply(&self, x: &[f64], out: &mut [f64]);
    fn apply_adjoint(&self, r: &[f64], out: &mut [f64]);
    /// Largest singular value.
    fn operator_norm(&self) -> f64;
    /// Euclidean distance from y to the range of the operator.
    fn range_distance(&self, y: &[f64]) -> f64;
    /// Exact projection of v onto {x : ||A x - y|| <= eps}, written to out.
    fn project_tube(&self, v: &[f64], y: &[f64], eps: f64, out: &mut [f64])
        -> Result<(), CsError>;
}

/// Shared secular-equation solve for tube projections.
///
/// In the SVD frame the residual of the projected point is
/// r_i / (1 + nu * sigma_i^2) per singular direction plus a fixed
/// out-of-range part; `solve_secular` finds nu >= 0 with total norm eps.
/// Returns the multiplier, or an infeasibility error when even nu -> inf
/// cannot reach eps.
fn solve_secular(r: &[f64], sigma: &[f64], fixed_sq: f64, eps: f64) -> Result<f64, CsError> {
    let g = |nu: f64| -> f64 {
        let mut s = fixed_sq;
        for (ri, si) in r.iter().zip(sigma) {
            let d = 1.0 + nu * si * si;
            s += ri * ri / (d * d);
        }
        s - eps * eps
    };
    if g(0.0) <= 0.0 {
        return Ok(0.0);
    }
    // limit nu -> inf: only zero-sigma components survive
    let floor_sq: f64 = fixed_sq
        + r.iter()
            .zip(sigma)
            .filter(|(_, s)| **s == 0.0)
            .map(|(r, _)| r * r)
            .sum::<f64>();
    if floor_sq >= eps * eps {
        return Err(CsError::Infeasible { eps, distance: floor_sq.sqrt() });
    }
    // bracket then safeguarded Newton on g(nu)
    let mut hi = 1.0;
    while g(hi) > 0.0 {
        hi *= 4.0;
        if hi > 1e300 {
            return Err(CsError::Infeasible { eps, distance: floor_sq.sqrt() });
        }
    }
    let mut lo = 0.0;
    let mut nu = hi * 0.5;
    for _ in 0..200 {
        let val = g(nu);
        if val > 0.0 {
            lo = nu;
        } else {
            hi = nu;
        }
        let mut dg = 0.0;
        for (ri, si) in r.iter().zip(sigma) {
            let s2 = si * si;
            let d = 1.0 + nu * s2;
            dg += -2.0 * s2 * ri * ri / (d * d * d);
        }
        let mut next = if dg != 0.0 { nu - val / dg } else { 0.5 * (lo + hi) };
        if !(next > lo && next < hi) {
            next = 0.5 * (lo + hi);
        }
        if (next - nu).abs() <= 1e-15 * nu.max(1.0) {
            nu = next;
            break;
        }
        nu = next;
    }
    Ok(nu)
}

/// Dense operator with cached thin SVD, A = U diag(sigma) V^T.
pub struct DenseOperator {
    a: DMatrix<f64>,
    u: DMatrix<f64>,
    vt: DMatrix<f64>,
    sigma: Vec<f64>,
}

impl DenseOperator {
    pub fn new(a: DMatrix<f64>) -> Self {
        let svd = a.clone().svd(true, true);
        let u = svd.u.expect("svd");
        let vt = svd.v_t.expect("svd");
        let sigma: Vec<f64> = svd.singular_values.iter().cloned().collect();
        Self { a, u, vt, sigma }
    }
}

impl MeasurementOperator for DenseOperator {
    fn rows(&self) -> usize {
        self.a.nrows()
    }

    fn cols(&self) -> usize {
        self.a.ncols()
    }

    fn apply(&self, x: &[f64], out: &mut [f64]) {
        let xv = nalgebra::DVectorView::from_slice(x, self.cols());
        let y = &self.a * xv;
        out.copy_from_slice(y.as_slice());
    }

    fn apply_adjoint(&self, r: &[f64], out: &mut [f64]) {
        let rv = nalgebra::DVectorView::from_slice(r, self.rows());
        let y = self.a.transpose() * rv;
        out.copy_from_slice(y.as_slice());
    }

    fn operator_norm(&self) -> f64 {
        self.sigma.first().cloned().unwrap_or(0.0)
    }

    fn range_distance(&self, y: &[f64]) -> f64 {
        let yv = nalgebra::DVectorView::from_slice(y, self.rows());
        let tol = self.operator_norm() * 1e-13;
        let k = self.sigma.len();
        let uk = self.u.columns(0, k);
        let mut uy = uk.transpose() * yv;
        for (i, &s) in self.sigma.iter().enumerate() {
            if s <= tol {
                uy[i] = 0.0;
            }
        }
        // explicit residual avoids cancellation in the norm difference
        (yv - uk * uy).norm()
    }

    fn project_tube(
        &self,
        v: &[f64],
        y: &[f64],
        eps: f64,
        out: &mut [f64],
    ) -> Result<(), CsError> {
        let k = self.sigma.len();
        let vv = nalgebra::DVectorView::from_slice(v, self.cols());
        let yv = nalgebra::DVectorView::from_slice(y, self.rows());
        // residual split into the left singular frame and its complement
        let av = &self.a * vv;
        let res = &av - yv;
        let uk = self.u.columns(0, k);
        let rhat = uk.transpose() * &res;
        // explicit perpendicular part, cancellation free
        let fixed_sq = (&res - &uk * &rhat).norm_squared();
        // zero out numerically null directions so they count as unreachable
        let tol = self.operator_norm() * 1e-13;
        let mut sig = self.sigma.clone();
        for s in sig.iter_mut() {
            if *s <= tol {
                *s = 0.0;
            }
        }
        let nu = solve_secular(rhat.as_slice(), &sig, fixed_sq, eps)?;
        if nu == 0.0 {
            out.copy_from_slice(v);
            return Ok(());
        }
        // x = v - nu * V diag(sigma) rhat / (1 + nu sigma^2)
        let mut w = rhat;
        for (i, &s) in sig.iter().enumerate() {
            w[i] *= s / (1.0 + nu * s * s);
        }
        let corr = self.vt.rows(0, k).transpose() * w;
        for (o, (vi, c)) in out.iter_mut().zip(v.iter().zip(corr.iter())) {
            *o = vi - nu * c;
        }
        Ok(())
    }
}

/// Operator x -> vec(Psi C Phi) where x = vec(C) row-major (p x m), data is
/// vec(Y) row-major (n x s). Phi may be the identity (plain nodal basis), in
/// which case no right factor is stored.
pub struct KroneckerOperator {
    psi: DMatrix<f64>,
    phi: Option<DMatrix<f64>>,
    s_cols: usize,
    u1: DMatrix<f64>,
    v1t: DMatrix<f64>,
    sig1: Vec<f64>,
    // right-factor SVD, Phi = U2 diag(sig2) V2t; None when Phi = I
    right: Option<(DMatrix<f64>, DMatrix<f64>, Vec<f64>)>,
}

impl KroneckerOperator {
    /// `identity_cols` is the observation-point count when Phi = I (ignored
    /// when an explicit right factor is given).
    pub fn new(psi: DMatrix<f64>, phi: Option<DMatrix<f64>>, identity_cols: usize) -> Self {
        let svd1 = psi.clone().svd(true, true);
        let (u1, v1t) = (svd1.u.expect("svd"), svd1.v_t.expect("svd"));
        let sig1: Vec<f64> = svd1.singular_values.iter().cloned().collect();
        let (s_cols, right) = match &phi {
            None => (identity_cols, None),
            Some(m) => {
                let svd2 = m.clone().svd(true, true);
                let sig2: Vec<f64> = svd2.singular_values.iter().cloned().collect();
                (m.ncols(), Some((svd2.u.expect("svd"), svd2.v_t.expect("svd"), sig2)))
            }
        };
        Self { psi, phi, s_cols, u1, v1t, sig1, right }
    }

    fn p(&self) -> usize {
        self.psi.ncols()
    }

    fn m(&self) -> usize {
        self.phi.as_ref().map(|m| m.nrows()).unwrap_or(self.s_cols)
    }

    fn n(&self) -> usize {
        self.psi.nrows()
    }

    fn as_mat<'a>(&self, x: &'a [f64], rows: usize, cols: usize) -> DMatrix<f64> {
        // row-major slice into a column-major nalgebra matrix
        DMatrix::from_row_slice(rows, cols, x)
    }

    fn write_mat(m: &DMatrix<f64>, out: &mut [f64]) {
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                out[i * m.ncols() + j] = m[(i, j)];
            }
        }
    }
}

impl MeasurementOperator for KroneckerOperator {
    fn rows(&self) -> usize {
        self.n() * self.s_cols
    }

    fn cols(&self) -> usize {
        self.p() * self.m()
    }

    fn apply(&self, x: &[f64], out: &mut [f64]) {
        let c = self.as_mat(x, self.p(), self.m());
        let y = match &self.phi {
            Some(phi) => &self.psi * c * phi,
            None => &self.psi * c,
        };
        Self::write_mat(&y, out);
    }

    fn apply_adjoint(&self, r: &[f64], out: &mut [f64]) {
        let rm = self.as_mat(r, self.n(), self.s_cols);
        let g = match &self.phi {
            Some(phi) => self.psi.transpose() * rm * phi.transpose(),
            None => self.psi.transpose() * rm,
        };
        Self::write_mat(&g, out);
    }

    fn operator_norm(&self) -> f64 {
        let s1 = self.sig1.first().cloned().unwrap_or(0.0);
        match &self.right {
            Some((_, _, sig2)) => s1 * sig2.first().cloned().unwrap_or(0.0),
            None => s1,
        }
    }

    fn range_distance(&self, y: &[f64]) -> f64 {
        let ym = self.as_mat(y, self.n(), self.s_cols);
        let tol1 = self.sig1.first().cloned().unwrap_or(0.0) * 1e-13;
        let k1 = self.sig1.iter().filter(|s| **s > tol1).count();
        let proj_left = self.u1.columns(0, k1) * (self.u1.columns(0, k1).transpose() * &ym);
        let within = match &self.right {
            None => proj_left,
            Some((_, v2t, sig2)) => {
                let tol2 = sig2.first().cloned().unwrap_or(0.0) * 1e-13;
                let k2 = sig2.iter().filter(|s| **s > tol2).count();
                let pr = v2t.rows(0, k2);
                proj_left * pr.transpose() * pr
            }
        };
        (ym - within).norm()
    }

    fn project_tube(
        &self,
        v: &[f64],
        y: &[f64],
        eps: f64,
        out: &mut [f64],
    ) -> Result<(), CsError> {
        let (n, s, p, m) = (self.n(), self.s_cols, self.p(), self.m());
        let cm = self.as_mat(v, p, m);
        let ym = self.as_mat(y, n, s);
        let k1 = self.sig1.len();
        // rotate into the singular frames of both factors
        let chat = match &self.right {
            Some((u2, _, _)) => self.v1t.rows(0, k1) * &cm * u2,
            None => self.v1t.rows(0, k1) * &cm,
        };
        let (yhat, k2, sig2) = match &self.right {
            Some((_, v2t, sig2)) => {
                let k2 = sig2.len();
                (self.u1.columns(0, k1).transpose() * &ym * v2t.rows(0, k2).transpose(), k2, sig2.clone())
            }
            None => (self.u1.columns(0, k1).transpose() * &ym, s, vec![1.0; s]),
        };
        let tol1 = self.sig1.first().cloned().unwrap_or(0.0) * 1e-13;
        let tol2 = sig2.first().cloned().unwrap_or(0.0) * 1e-13;
        let mut sig = Vec::with_capacity(k1 * k2);
        let mut rhat = Vec::with_capacity(k1 * k2);
        for i in 0..k1 {
            let s1 = if self.sig1[i] > tol1 { self.sig1[i] } else { 0.0 };
            for j in 0..k2 {
                let s2 = if sig2[j] > tol2 { sig2[j] } else { 0.0 };
                sig.push(s1 * s2);
                rhat.push(s1 * s2 * chat[(i, j)] - yhat[(i, j)]);
            }
        }
        // explicit reconstruction of the reachable part of y, cancellation free
        let reach = match &self.right {
            Some((_, v2t, _)) => self.u1.columns(0, k1) * &yhat * v2t.rows(0, k2),
            None => self.u1.columns(0, k1) * &yhat,
        };
        let fixed_sq = (&ym - reach).norm_squared();
        let nu = solve_secular(&rhat, &sig, fixed_sq, eps)?;
        if nu == 0.0 {
            out.copy_from_slice(v);
            return Ok(());
        }
        // correction in the rotated frame, then rotate back
        let mut w = DMatrix::zeros(k1, k2);
        for i in 0..k1 {
            for j in 0..k2 {
                let sij = sig[i * k2 + j];
                w[(i, j)] = sij * rhat[i * k2 + j] / (1.0 + nu * sij * sij);
            }
        }
        let corr = match &self.right {
            Some((u2, _, _)) => self.v1t.rows(0, k1).transpose() * w * u2.transpose(),
            None => self.v1t.rows(0, k1).transpose() * w,
        };
        let res = &cm - nu * corr;
        Self::write_mat(&res, out);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};

    fn randn(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
        DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(&mut rng))
    }

    fn check_projection(op: &dyn MeasurementOperator, seed: u64, eps: f64) {
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
        let v: Vec<f64> =
            (0..op.cols()).map(|_| StandardNormal.sample(&mut rng)).collect();
        let y: Vec<f64> =
            (0..op.rows()).map(|_| StandardNormal.sample(&mut rng)).collect();
        // keep eps above the distance to the range so the tube is nonempty
        let eps = eps.max(1.05 * op.range_distance(&y) + 1e-12);
        let mut z = vec![0.0; op.cols()];
        op.project_tube(&v, &y, eps, &mut z).unwrap();
        let mut az = vec![0.0; op.rows()];
        op.apply(&z, &mut az);
        let res: f64 =
            az.iter().zip(&y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        let dist = op.range_distance(&y);
        // on the tube boundary (or interior if v already feasible)
        assert!(res <= eps.max(dist) * (1.0 + 1e-9) + 1e-12, "res {res} eps {eps}");
        // optimality: z - v orthogonal residual condition, z = v - nu A^T r
        let mut av = vec![0.0; op.rows()];
        op.apply(&v, &mut av);
        let vres: f64 =
            av.iter().zip(&y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        if vres > eps {
            assert!(res >= eps * (1.0 - 1e-7), "should land on boundary: {res} vs {eps}");
            // KKT direction check: (v - z) parallel to A^T (A z - y)
            let r: Vec<f64> = az.iter().zip(&y).map(|(a, b)| a - b).collect();
            let mut g = vec![0.0; op.cols()];
            op.apply_adjoint(&r, &mut g);
            let diff: Vec<f64> = v.iter().zip(&z).map(|(a, b)| a - b).collect();
            let dot: f64 = diff.iter().zip(&g).map(|(a, b)| a * b).sum();
            let nd: f64 = diff.iter().map(|a| a * a).sum::<f64>().sqrt();
            let ng: f64 = g.iter().map(|a| a * a).sum::<f64>().sqrt();
            if nd > 1e-12 && ng > 1e-12 {
                assert!((dot / (nd * ng) - 1.0).abs() < 1e-7, "not parallel: {}", dot / (nd * ng));
            }
        } else {
            let same: f64 =
                v.iter().zip(&z).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            assert!(same < 1e-12);
        }
    }

    #[test]
    fn dense_projection_lands_on_tube() {
        for (rows, cols, eps) in [(10, 25, 0.5), (15, 15, 1.0), (20, 8, 2.0)] {
            let op = DenseOperator::new(randn(rows, cols, 42 + rows as u64));
            check_projection(&op, 7, eps);
        }
    }

    #[test]
    fn kronecker_projection_lands_on_tube() {
        let op = KroneckerOperator::new(randn(8, 12, 1), Some(randn(6, 10, 2)), 0);
        check_projection(&op, 11, 1.5);
        let op_id = KroneckerOperator::new(randn(8, 12, 3), None, 12);
        check_projection(&op_id, 13, 1.0);
    }

    #[test]
    fn kronecker_matches_explicit_dense() {
        let psi = randn(5, 7, 21);
        let phi = randn(4, 6, 22);
        let kop = KroneckerOperator::new(psi.clone(), Some(phi.clone()), 0);
        // explicit row-major Kronecker: A[(r,c),(i,j)] = psi[r,i] * phi[j,c]
        let mut a = DMatrix::zeros(5 * 6, 7 * 4);
        for r in 0..5 {
            for c in 0..6 {
                for i in 0..7 {
                    for j in 0..4 {
                        a[(r * 6 + c, i * 4 + j)] = psi[(r, i)] * phi[(j, c)];
                    }
                }
            }
        }
        let dop = DenseOperator::new(a);
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(77);
        let x: Vec<f64> = (0..28).map(|_| StandardNormal.sample(&mut rng)).collect();
        let mut y1 = vec![0.0; 30];
        let mut y2 = vec![0.0; 30];
        kop.apply(&x, &mut y1);
        dop.apply(&x, &mut y2);
        for (a, b) in y1.iter().zip(&y2) {
            assert!((a - b).abs() < 1e-12);
        }
        let r: Vec<f64> = (0..30).map(|_| StandardNormal.sample(&mut rng)).collect();
        let mut g1 = vec![0.0; 28];
        let mut g2 = vec![0.0; 28];
        kop.apply_adjoint(&r, &mut g1);
        dop.apply_adjoint(&r, &mut g2);
        for (a, b) in g1.iter().zip(&g2) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((kop.operator_norm() - dop.operator_norm()).abs() < 1e-10);
        // projections agree too
        let v: Vec<f64> = (0..28).map(|_| StandardNormal.sample(&mut rng)).collect();
        let y: Vec<f64> = (0..30).map(|_| StandardNormal.sample(&mut rng)).collect();
        let d1 = kop.range_distance(&y);
        let d2 = dop.range_distance(&y);
        assert!((d1 - d2).abs() < 1e-9 * (1.0 + d1));
        let eps = 1.05 * d1 + 0.7;
        let mut z1 = vec![0.0; 28];
        let mut z2 = vec![0.0; 28];
        kop.project_tube(&v, &y, eps, &mut z1).unwrap();
        dop.project_tube(&v, &y, eps, &mut z2).unwrap();
        for (a, b) in z1.iter().zip(&z2) {
            assert!((a - b).abs() < 1e-8, "{a} {b}");
        }
    }

    #[test]
    fn adjoint_identity() {
        let op = DenseOperator::new(randn(12, 20, 9));
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(5);
        let x: Vec<f64> = (0..20).map(|_| StandardNormal.sample(&mut rng)).collect();
        let r: Vec<f64> = (0..12).map(|_| StandardNormal.sample(&mut rng)).collect();
        let mut ax = vec![0.0; 12];
        let mut atr = vec![0.0; 20];
        op.apply(&x, &mut ax);
        op.apply_adjoint(&r, &mut atr);
        let lhs: f64 = ax.iter().zip(&r).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&atr).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0));
    }

    #[test]
    fn range_distance_detects_unreachable_data() {
        let mut a = DMatrix::zeros(3, 4);
        a[(0, 0)] = 2.0;
        a[(1, 1)] = 1.0;
        let op = DenseOperator::new(a);
        assert!((op.range_distance(&[1.0, 2.0, 0.0]) - 0.0).abs() < 1e-12);
        assert!((op.range_distance(&[1.0, 2.0, 3.0]) - 3.0).abs() < 1e-12);
    }
}
