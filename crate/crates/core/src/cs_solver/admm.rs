//! ADMM for basis pursuit with an inequality data constraint:
//! min ||x||_1 + indicator{ ||A z - y|| <= eps } subject to x = z.
//! The z update is the exact tube projection provided by the operator.

use super::operator::MeasurementOperator;
use super::polish::polish;
use super::{BpOptions, BpReport, CsError};

pub fn solve(
    op: &dyn MeasurementOperator,
    y: &[f64],
    eps: f64,
    opts: &BpOptions,
) -> Result<(Vec<f64>, BpReport), CsError> {
    let n = op.cols();
    let ynorm = y.iter().map(|v| v * v).sum::<f64>().sqrt();
    if ynorm <= eps {
        return Ok((vec![0.0; n], BpReport { iterations: 0, residual: ynorm, l1_norm: 0.0 }));
    }
    let dist = op.range_distance(y);
    if dist > eps * (1.0 + 1e-9) + 1e-14 * ynorm {
        return Err(CsError::Infeasible { eps, distance: dist });
    }
    // scale-free penalty: the soft threshold 1/rho is proportional to the
    // magnitude of the data back-projection, so iterates are homogeneous
    let mut g0 = vec![0.0; n];
    op.apply_adjoint(y, &mut g0);
    let gmax = g0.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let thresh = 0.05 * gmax / op.operator_norm().powi(2).max(1e-300);
    let rho = 1.0 / thresh;

    let mut x = vec![0.0; n];
    let mut z = vec![0.0; n];
    op.project_tube(&x, y, eps, &mut z)?;
    let mut u = vec![0.0; n];
    let mut iterations = opts.max_iters;
    let mut gap = f64::INFINITY;
    for it in 0..opts.max_iters {
        let mut dx: f64 = 0.0;
        for i in 0..n {
            let v = z[i] - u[i];
            let next = v.signum() * (v.abs() - 1.0 / rho).max(0.0);
            dx = dx.max((next - x[i]).abs());
            x[i] = next;
        }
        let mut vz = vec![0.0; n];
        for i in 0..n {
            vz[i] = x[i] + u[i];
        }
        let mut znew = vec![0.0; n];
        op.project_tube(&vz, y, eps, &mut znew)?;
        let mut primal: f64 = 0.0;
        let mut dz: f64 = 0.0;
        for i in 0..n {
            primal = primal.max((x[i] - znew[i]).abs());
            dz = dz.max((znew[i] - z[i]).abs());
            z[i] = znew[i];
            u[i] += x[i] - z[i];
        }
        let scale = x.iter().fold(1e-300f64, |m, v| m.max(v.abs())).max(gmax * 1e-10);
        gap = primal.max(dx).max(dz) / scale;
        if gap < opts.tol {
            iterations = it + 1;
            break;
        }
    }
    finish(op, y, eps, x, z, iterations, gap, opts)
}

/// Pick the best feasible point among the sparse iterate, its projection,
/// and a least-squares polish on the detected support.
pub fn finish(
    op: &dyn MeasurementOperator,
    y: &[f64],
    eps: f64,
    x: Vec<f64>,
    z_feasible: Vec<f64>,
    iterations: usize,
    gap: f64,
    _opts: &BpOptions,
) -> Result<(Vec<f64>, BpReport), CsError> {
    let residual_of = |v: &[f64]| -> f64 {
        let mut av = vec![0.0; op.rows()];
        op.apply(v, &mut av);
        av.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
    };
    let l1 = |v: &[f64]| -> f64 { v.iter().map(|a| a.abs()).sum() };
    let feas_tol = eps * (1.0 + 1e-8) + 1e-13 * y.iter().map(|v| v * v).sum::<f64>().sqrt();

    let mut best: Option<(Vec<f64>, f64, f64)> = None;
    let mut consider = |v: Vec<f64>| {
        let r = residual_of(&v);
        if r <= feas_tol {
            let n1 = l1(&v);
            if best.as_ref().map(|(_, b1, _)| n1 < *b1 * (1.0 - 1e-12)).unwrap_or(true) {
                best = Some((v, n1, r));
            }
        }
    };
    if let Some(p) = polish(op, y, eps, &x) {
        consider(p);
    }
    consider(z_feasible);
    consider(x);
    match best {
        Some((v, n1, r)) => Ok((
            v,
            BpReport { iterations, residual: r, l1_norm: n1 },
        )),
        None => Err(CsError::NonConvergence { iterations, gap }),
    }
}
