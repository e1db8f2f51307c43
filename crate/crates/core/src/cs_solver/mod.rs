//! Basis-pursuit recovery of sparse chaos coefficients from sample
//! simulations: measurement assembly, the l1 solvers, and diagnostics.
//!
//! The solvers minimize ||x||_1 subject to ||A x - y||_2 <= eps. Two
//! interchangeable strategies are registered by name (see [`registry`]):
//! an ADMM scheme with exact projections onto the misfit tube (default) and
//! a matrix-free primal-dual scheme.

mod admm;
mod measurement;
mod operator;
mod pdhg;
mod polish;
pub mod registry;

pub use measurement::{assemble_measurements, MeasurementSet, SpatialEval};
pub use operator::{DenseOperator, KroneckerOperator, MeasurementOperator};
pub use registry::{strategy, strategy_names, BpStrategy};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CsError {
    #[error("infeasible: misfit tolerance {eps} below distance {distance} from data to operator range")]
    Infeasible { eps: f64, distance: f64 },
    #[error("no convergence within {iterations} iterations (gap {gap:.3e})")]
    NonConvergence { iterations: usize, gap: f64 },
    #[error("input rejected: {0}")]
    RejectedInput(String),
    #[error("unknown basis-pursuit strategy '{0}' (available: {1})")]
    UnknownStrategy(String, String),
}

/// Options shared by all basis-pursuit strategies.
#[derive(Debug, Clone)]
pub struct BpOptions {
    pub max_iters: usize,
    /// Stopping rule: primal residual and relative iterate change below this.
    pub tol: f64,
    /// Strategy name; see [`registry::strategy_names`].
    pub strategy: String,
    /// Scale columns of the stochastic matrix to unit empirical norm before
    /// solving (exactly undone afterwards).
    pub normalize_columns: bool,
}

impl Default for BpOptions {
    fn default() -> Self {
        Self {
            max_iters: 50_000,
            tol: 1e-8,
            strategy: "admm".into(),
            normalize_columns: true,
        }
    }
}

/// Convergence report for one basis-pursuit solve.
#[derive(Debug, Clone)]
pub struct BpReport {
    pub iterations: usize,
    pub residual: f64,
    pub l1_norm: f64,
}

impl BpReport {
    /// One line for the solver benchmarking log.
    pub fn report_line(&self, label: &str, wall: std::time::Duration) -> String {
        format!(
            "{label}: iters={} residual={:.6e} l1={:.6e} wall_ms={:.1}",
            self.iterations,
            self.residual,
            self.l1_norm,
            wall.as_secs_f64() * 1e3
        )
    }
}

/// Solution of the matrix-form basis-pursuit problem.
#[derive(Debug, Clone)]
pub struct BpSolution {
    /// p x m coefficient array, row-major (chaos index by spatial mode).
    pub coefficients: Vec<f64>,
    pub p: usize,
    pub m: usize,
    pub residual: f64,
    pub l1_norm: f64,
    pub iterations: usize,
}

/// Minimize ||x||_1 subject to ||A x - y|| <= eps for a dense operator.
pub fn solve_bp(
    a: &nalgebra::DMatrix<f64>,
    y: &[f64],
    eps: f64,
    opts: &BpOptions,
) -> Result<(Vec<f64>, BpReport), CsError> {
    if y.len() != a.nrows() {
        return Err(CsError::RejectedInput(format!(
            "data has {} entries, operator has {} rows",
            y.len(),
            a.nrows()
        )));
    }
    if eps < 0.0 {
        return Err(CsError::RejectedInput("misfit tolerance must be nonnegative".into()));
    }
    let (scaled, col_scale) = if opts.normalize_columns {
        let mut m = a.clone();
        let mut s = vec![1.0; a.ncols()];
        for j in 0..a.ncols() {
            let n = m.column(j).norm();
            if n > 0.0 {
                s[j] = n;
                m.column_mut(j).scale_mut(1.0 / n);
            }
        }
        (m, s)
    } else {
        (a.clone(), vec![1.0; a.ncols()])
    };
    let op = DenseOperator::new(scaled);
    let strat = strategy(&opts.strategy)?;
    let (mut x, mut report) = strat.solve(&op, y, eps, opts)?;
    for (xi, s) in x.iter_mut().zip(&col_scale) {
        *xi /= s;
    }
    report.l1_norm = x.iter().map(|v| v.abs()).sum();
    Ok((x, report))
}

/// Minimize ||C||_1 subject to ||Psi C Phi - U||_F <= eps. The Kronecker
/// operator applies the two factor matrices; the product is never formed.
pub fn solve_matrix_bp(
    ms: &MeasurementSet,
    eps: f64,
    opts: &BpOptions,
) -> Result<BpSolution, CsError> {
    let (op, psi_scale, phi_scale) = ms.operator(opts.normalize_columns)?;
    let y = ms.observations_vec();
    let strat = strategy(&opts.strategy)?;
    let (x, report) = strat.solve(&op, &y, eps, opts)?;
    let (p, m) = (ms.chaos_count(), ms.spatial_count());
    let mut coefficients = x;
    for i in 0..p {
        for j in 0..m {
            coefficients[i * m + j] /= psi_scale[i] * phi_scale[j];
        }
    }
    let l1_norm = coefficients.iter().map(|v| v.abs()).sum();
    Ok(BpSolution {
        coefficients,
        p,
        m,
        residual: report.residual,
        l1_norm,
        iterations: report.iterations,
    })
}

/// Number of entries with magnitude at or above the threshold.
pub fn sparsity_count(c: &[f64], tau: f64) -> usize {
    assert!(tau > 0.0, "threshold must be positive");
    c.iter().filter(|v| v.abs() >= tau).count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian_matrix(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
        DMatrix::from_fn(rows, cols, |_, _| {
            let g: f64 = StandardNormal.sample(&mut rng);
            g / (rows as f64).sqrt()
        })
    }

    fn planted(cols: usize, k: usize, seed: u64) -> Vec<f64> {
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed ^ 0x9e3779b9);
        let mut x = vec![0.0; cols];
        let mut filled = 0;
        while filled < k {
            let idx = (rand::Rng::gen::<u64>(&mut rng) % cols as u64) as usize;
            if x[idx] == 0.0 {
                let g: f64 = StandardNormal.sample(&mut rng);
                x[idx] = g.signum() * (0.5 + g.abs());
                filled += 1;
            }
        }
        x
    }

    #[test]
    fn zero_data_gives_zero() {
        let a = gaussian_matrix(20, 50, 1);
        let (x, rep) = solve_bp(&a, &vec![0.0; 20], 0.0, &BpOptions::default()).unwrap();
        assert!(x.iter().all(|&v| v == 0.0));
        assert_eq!(rep.l1_norm, 0.0);
    }

    #[test]
    fn small_data_within_eps_gives_zero() {
        let a = gaussian_matrix(20, 50, 2);
        let y = vec![1e-3; 20];
        let eps = 2.0 * (y.iter().map(|v| v * v).sum::<f64>()).sqrt();
        let (x, _) = solve_bp(&a, &y, eps, &BpOptions::default()).unwrap();
        assert!(x.iter().map(|v| v.abs()).sum::<f64>() < 1e-12);
    }

    #[test]
    fn planted_sparse_recovery() {
        for strategy in ["admm", "pdhg"] {
            let a = gaussian_matrix(80, 200, 3);
            let xstar = planted(200, 8, 3);
            let y: Vec<f64> = (&a * DMatrix::from_column_slice(200, 1, &xstar))
                .column(0)
                .iter()
                .cloned()
                .collect();
            let opts = BpOptions { strategy: strategy.into(), ..Default::default() };
            let (x, rep) = solve_bp(&a, &y, 1e-10, &opts).unwrap();
            let err: f64 = x
                .iter()
                .zip(&xstar)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
                / xstar.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(err < 1e-6, "strategy {strategy}: recovery error {err}");
            // optimality surrogate: l1 norm no larger than the planted one
            let planted_l1: f64 = xstar.iter().map(|v| v.abs()).sum();
            assert!(rep.l1_norm <= planted_l1 * (1.0 + 1e-6));
        }
    }

    #[test]
    fn infeasible_eps_detected() {
        // y outside the range of a rank-deficient operator
        let mut a = DMatrix::zeros(3, 5);
        a[(0, 0)] = 1.0;
        a[(1, 1)] = 1.0;
        // third row zero: any y with y_3 != 0 is unreachable
        let y = vec![1.0, 1.0, 1.0];
        let err = solve_bp(&a, &y, 1e-6, &BpOptions::default());
        assert!(matches!(err, Err(CsError::Infeasible { .. })), "{err:?}");
    }

    #[test]
    fn monotone_in_eps() {
        let a = gaussian_matrix(40, 100, 5);
        let xstar = planted(100, 5, 5);
        let y: Vec<f64> = (&a * DMatrix::from_column_slice(100, 1, &xstar))
            .column(0)
            .iter()
            .cloned()
            .collect();
        let ynorm = y.iter().map(|v| v * v).sum::<f64>().sqrt();
        let mut last = f64::INFINITY;
        for eps_frac in [1e-8, 1e-3, 1e-2, 1e-1] {
            let (_, rep) =
                solve_bp(&a, &y, eps_frac * ynorm, &BpOptions::default()).unwrap();
            assert!(rep.l1_norm <= last * (1.0 + 1e-6), "eps_frac {eps_frac}");
            last = rep.l1_norm;
        }
    }

    #[test]
    fn positive_homogeneity() {
        let a = gaussian_matrix(40, 100, 6);
        let xstar = planted(100, 5, 6);
        let y: Vec<f64> = (&a * DMatrix::from_column_slice(100, 1, &xstar))
            .column(0)
            .iter()
            .cloned()
            .collect();
        let (x1, _) = solve_bp(&a, &y, 1e-10, &BpOptions::default()).unwrap();
        let scale = 37.5;
        let ys: Vec<f64> = y.iter().map(|v| v * scale).collect();
        let (x2, _) = solve_bp(&a, &ys, 1e-10 * scale, &BpOptions::default()).unwrap();
        for (a1, a2) in x1.iter().zip(&x2) {
            assert!((a1 * scale - a2).abs() < 1e-6 * scale.max(1.0), "{a1} {a2}");
        }
    }

    #[test]
    fn feasibility_of_returned_solution() {
        let a = gaussian_matrix(30, 80, 7);
        let xstar = planted(80, 6, 7);
        let y: Vec<f64> = (&a * DMatrix::from_column_slice(80, 1, &xstar))
            .column(0)
            .iter()
            .cloned()
            .collect();
        let ynorm = y.iter().map(|v| v * v).sum::<f64>().sqrt();
        for eps in [1e-8, 1e-2 * ynorm] {
            let (x, rep) = solve_bp(&a, &y, eps, &BpOptions::default()).unwrap();
            let ax = &a * DMatrix::from_column_slice(80, 1, &x);
            let res: f64 =
                ax.column(0).iter().zip(&y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            assert!(res <= eps * (1.0 + 1e-8) + 1e-12, "res {res} eps {eps}");
            assert!((rep.residual - res).abs() < 1e-9 * (1.0 + res));
        }
    }

    #[test]
    fn sparsity_count_basics() {
        assert_eq!(sparsity_count(&[0.0; 10], 1e-3), 0);
        assert_eq!(sparsity_count(&[0.5, 0.05, 0.005], 1e-2), 2);
    }

    #[test]
    fn unknown_strategy_rejected() {
        let a = gaussian_matrix(5, 10, 8);
        let opts = BpOptions { strategy: "nope".into(), ..Default::default() };
        assert!(matches!(
            solve_bp(&a, &vec![0.0; 5], 0.0, &opts),
            Err(CsError::UnknownStrategy(..))
        ));
    }
}
