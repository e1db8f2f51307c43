//! Matrix-free primal-dual scheme for basis pursuit:
//! min_x ||x||_1 + F(A x) with F the indicator of the eps-ball around y.
//! The dual prox is an l2 shrinkage of the shifted dual variable; only
//! operator applications and adjoints are required.

use super::operator::MeasurementOperator;
use super::{BpOptions, BpReport, CsError};

pub fn solve(
    op: &dyn MeasurementOperator,
    y: &[f64],
    eps: f64,
    opts: &BpOptions,
) -> Result<(Vec<f64>, BpReport), CsError> {
    let (n, rows) = (op.cols(), op.rows());
    let ynorm = y.iter().map(|v| v * v).sum::<f64>().sqrt();
    if ynorm <= eps {
        return Ok((vec![0.0; n], BpReport { iterations: 0, residual: ynorm, l1_norm: 0.0 }));
    }
    let dist = op.range_distance(y);
    if dist > eps * (1.0 + 1e-9) + 1e-14 * ynorm {
        return Err(CsError::Infeasible { eps, distance: dist });
    }
    let norm = op.operator_norm().max(1e-300);
    // tau * sigma * ||A||^2 < 1; the tau/sigma ratio is scale matched so the
    // iterates are homogeneous in the data
    let mut g0 = vec![0.0; n];
    op.apply_adjoint(y, &mut g0);
    let gmax = g0.iter().fold(1e-300f64, |m, v| m.max(v.abs()));
    let tau = 0.05 * gmax / (norm * norm);
    let sigma = 0.95 / (norm * norm * tau);

    let mut x = vec![0.0; n];
    let mut xbar = x.clone();
    let mut dual = vec![0.0; rows];
    let mut ax = vec![0.0; rows];
    let mut iterations = opts.max_iters;
    let mut gap = f64::INFINITY;
    for it in 0..opts.max_iters {
        // dual step: v = dual + sigma A xbar, prox of F*:
        // F*(z) = <y, z> + eps ||z||, prox shrinks v - sigma y radially
        op.apply(&xbar, &mut ax);
        let mut vnorm_sq = 0.0;
        for i in 0..rows {
            let v = dual[i] + sigma * (ax[i] - y[i]);
            dual[i] = v;
            vnorm_sq += v * v;
        }
        let vnorm = vnorm_sq.sqrt();
        let shrink = (1.0 - sigma * eps / vnorm.max(1e-300)).max(0.0);
        for d in dual.iter_mut() {
            *d *= shrink;
        }
        // primal step: soft threshold of x - tau A^T dual
        let mut grad = vec![0.0; n];
        op.apply_adjoint(&dual, &mut grad);
        let mut dx: f64 = 0.0;
        for i in 0..n {
            let v = x[i] - tau * grad[i];
            let next = v.signum() * (v.abs() - tau).max(0.0);
            dx = dx.max((next - x[i]).abs());
            xbar[i] = 2.0 * next - x[i];
            x[i] = next;
        }
        let scale = x.iter().fold(1e-300f64, |m, v| m.max(v.abs())).max(gmax * 1e-10);
        // residual feasibility gap alongside iterate change
        op.apply(&x, &mut ax);
        let res: f64 =
            ax.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        let feas_gap = ((res - eps) / ynorm).max(0.0);
        gap = (dx / scale).max(feas_gap);
        if gap < opts.tol {
            iterations = it + 1;
            break;
        }
    }
    // project the iterate to certify feasibility, then reuse the common
    // candidate selection
    let mut z = vec![0.0; n];
    op.project_tube(&x, y, eps, &mut z)?;
    super::admm::finish(op, y, eps, x, z, iterations, gap, opts)
}
