//! Debiasing step: least squares restricted to the detected support,
//! accepted by the caller only if it stays feasible and does not increase
//! the l1 norm.

use super::operator::MeasurementOperator;

/// Solve min ||A_S x_S - y|| over the support of x (entries above a small
/// relative threshold) by conjugate gradients on the normal equations.
/// Returns the full-length polished vector, or None for an empty support.
pub fn polish(op: &dyn MeasurementOperator, y: &[f64], _eps: f64, x: &[f64]) -> Option<Vec<f64>> {
    let xmax = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if xmax == 0.0 {
        return None;
    }
    let support: Vec<usize> = (0..x.len()).filter(|&i| x[i].abs() > 1e-9 * xmax).collect();
    if support.is_empty() || support.len() > op.rows() {
        return None;
    }
    let n = op.cols();
    let embed = |s: &[f64]| -> Vec<f64> {
        let mut full = vec![0.0; n];
        for (k, &i) in support.iter().enumerate() {
            full[i] = s[k];
        }
        full
    };
    let apply_s = |s: &[f64], out: &mut [f64]| op.apply(&embed(s), out);
    let adjoint_s = |r: &[f64]| -> Vec<f64> {
        let mut g = vec![0.0; n];
        op.apply_adjoint(r, &mut g);
        support.iter().map(|&i| g[i]).collect()
    };

    // CGNR on A_S^T A_S s = A_S^T y, warm started at the current values
    let mut s: Vec<f64> = support.iter().map(|&i| x[i]).collect();
    let mut as_buf = vec![0.0; op.rows()];
    apply_s(&s, &mut as_buf);
    let mut r: Vec<f64> = y.iter().zip(&as_buf).map(|(a, b)| a - b).collect();
    let mut g = adjoint_s(&r);
    let mut p = g.clone();
    let mut gg: f64 = g.iter().map(|v| v * v).sum();
    let g0 = gg.sqrt();
    if g0 == 0.0 {
        return Some(embed(&s));
    }
    for _ in 0..support.len().max(50) * 2 {
        apply_s(&p, &mut as_buf);
        let pp: f64 = as_buf.iter().map(|v| v * v).sum();
        if pp == 0.0 {
            break;
        }
        let alpha = gg / pp;
        for k in 0..s.len() {
            s[k] += alpha * p[k];
        }
        for k in 0..r.len() {
            r[k] -= alpha * as_buf[k];
        }
        let gnew = adjoint_s(&r);
        let ggn: f64 = gnew.iter().map(|v| v * v).sum();
        if ggn.sqrt() < 1e-14 * g0 {
            g = gnew;
            break;
        }
        let beta = ggn / gg;
        for k in 0..p.len() {
            p[k] = gnew[k] + beta * p[k];
        }
        g = gnew;
        gg = ggn;
    }
    let _ = g;
    Some(embed(&s))
}
