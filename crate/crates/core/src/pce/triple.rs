//! Triple products E[H_beta H_gamma H_alpha] of the orthonormal chaos basis.

use super::{gauss_hermite, hermite_eval, MultiIndexSet};

/// Sparse table of C_{beta,gamma,alpha} = E[H_beta H_gamma H_alpha] over a
/// truncated index set (the basis is orthonormal, so the normalizing
/// denominator is one).
#[derive(Debug, Clone)]
pub struct TripleProductTensor {
    p: usize,
    entries: Vec<(u32, u32, u32, f64)>,
}

impl TripleProductTensor {
    /// Compute all nonzero triple products by one-dimensional Gauss-Hermite
    /// quadrature, exact at the polynomial degrees involved. The
    /// multivariate expectation factorizes over dimensions, so only a table
    /// of 1D triple integrals is needed.
    pub fn build(set: &MultiIndexSet) -> Self {
        let q = set.max_order() as usize;
        // integrand degree <= 3q, k-point rule exact to 2k-1
        let k = (3 * q) / 2 + 2;
        let (nodes, weights) = gauss_hermite(k.max(2));
        let mut one_d = vec![0.0; (q + 1) * (q + 1) * (q + 1)];
        for a in 0..=q {
            for b in 0..=q {
                for c in 0..=q {
                    let v: f64 = nodes
                        .iter()
                        .zip(&weights)
                        .map(|(&x, &w)| {
                            w * hermite_eval(a, x) * hermite_eval(b, x) * hermite_eval(c, x)
                        })
                        .sum();
                    one_d[(a * (q + 1) + b) * (q + 1) + c] = v;
                }
            }
        }
        let p = set.len();
        let mut entries = Vec::new();
        for bi in 0..p {
            for gi in 0..p {
                for ai in 0..p {
                    let (beta, gamma, alpha) = (set.index(bi), set.index(gi), set.index(ai));
                    let mut v = 1.0;
                    for i in 0..set.dimension() {
                        let (a, b, c) =
                            (beta[i] as usize, gamma[i] as usize, alpha[i] as usize);
                        v *= one_d[(a * (q + 1) + b) * (q + 1) + c];
                        if v.abs() < 1e-12 {
                            v = 0.0;
                            break;
                        }
                    }
                    if v != 0.0 {
                        entries.push((bi as u32, gi as u32, ai as u32, v));
                    }
                }
            }
        }
        Self { p, entries }
    }

    pub fn cardinality(&self) -> usize {
        self.p
    }

    pub fn nonzeros(&self) -> &[(u32, u32, u32, f64)] {
        &self.entries
    }

    pub fn get(&self, beta: usize, gamma: usize, alpha: usize) -> f64 {
        self.entries
            .iter()
            .find(|e| e.0 == beta as u32 && e.1 == gamma as u32 && e.2 == alpha as u32)
            .map(|e| e.3)
            .unwrap_or(0.0)
    }
}
