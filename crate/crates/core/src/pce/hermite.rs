//! Normalized probabilists' Hermite polynomials and Gauss-Hermite quadrature
//! for the standard Gaussian measure.

use nalgebra::DMatrix;

/// Evaluate the i-th normalized probabilists' Hermite polynomial at x by the
/// stable three-term recurrence
/// h_{n+1} = (x h_n - sqrt(n) h_{n-1}) / sqrt(n+1),  h_0 = 1, h_1 = x,
/// so that E[h_i h_j] = delta_ij under the standard Gaussian measure.
pub fn hermite_eval(i: usize, x: f64) -> f64 {
    match i {
        0 => 1.0,
        1 => x,
        _ => {
            let mut hm = 1.0; // h_0
            let mut h = x; // h_1
            for n in 1..i {
                let next = (x * h - (n as f64).sqrt() * hm) / ((n + 1) as f64).sqrt();
                hm = h;
                h = next;
            }
            h
        }
    }
}

/// Nodes and weights of the k-point Gauss-Hermite rule for the standard
/// Gaussian weight, exact for polynomials of degree <= 2k-1. Computed by
/// eigen-decomposition of the Jacobi matrix of the probabilists' Hermite
/// recurrence; weights sum to one.
pub fn gauss_hermite(k: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(k >= 1);
    let mut jac = DMatrix::<f64>::zeros(k, k);
    for i in 1..k {
        let b = (i as f64).sqrt();
        jac[(i, i - 1)] = b;
        jac[(i - 1, i)] = b;
    }
    let eig = jac.symmetric_eigen();
    let mut pairs: Vec<(f64, f64)> = (0..k)
        .map(|j| {
            let node = eig.eigenvalues[j];
            let v0 = eig.eigenvectors[(0, j)];
            (node, v0 * v0)
        })
        .collect();
    pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let total: f64 = pairs.iter().map(|p| p.1).sum();
    (pairs.iter().map(|p| p.0).collect(), pairs.iter().map(|p| p.1 / total).collect())
}
