//! Multi-index bookkeeping, normalized Hermite polynomials, multivariate
//! chaos basis evaluation, triple products and moment extraction.

mod hermite;
mod multi_index;
mod triple;

pub use hermite::{gauss_hermite, hermite_eval};
pub use multi_index::{MultiIndex, MultiIndexSet};
pub use triple::TripleProductTensor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum PceError {
    #[error("multi-index set cardinality {0} exceeds configured maximum {1}")]
    Capacity(usize, usize),
    #[error("chaos index {0} out of range (set has {1} indices)")]
    IndexOutOfRange(usize, usize),
    #[error("sample dimension {0} smaller than set dimension {1}")]
    DimensionMismatch(usize, usize),
    #[error("coefficient layout mismatch: {0}")]
    LayoutMismatch(String),
}

/// Which spatial basis the columns of a coefficient array refer to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpatialBasisRef {
    /// Nodal finite element basis; column j is the value at spatial dof j.
    FiniteElement,
    /// Data-driven Karhunen-Loeve modes; column j is the coefficient of mode j.
    KarhunenLoeve,
}

/// Chaos-by-spatial coefficient array c_ij for one scalar component at one
/// time instance. Rows follow the graded lexicographic order of the
/// referenced [`MultiIndexSet`], row 0 is the mean.
#[derive(Debug, Clone)]
pub struct ChaosCoefficients {
    /// p x m row-major array.
    pub data: Vec<f64>,
    pub p: usize,
    pub m: usize,
    pub basis_ref: SpatialBasisRef,
}

impl ChaosCoefficients {
    pub fn zeros(p: usize, m: usize, basis_ref: SpatialBasisRef) -> Self {
        Self { data: vec![0.0; p * m], p, m, basis_ref }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.m..(i + 1) * self.m]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.m..(i + 1) * self.m]
    }

    /// Mean, second moment and variance fields (pointwise over the m columns).
    pub fn moments(&self) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let mean = self.row(0).to_vec();
        let mut second = vec![0.0; self.m];
        for i in 0..self.p {
            let r = self.row(i);
            for j in 0..self.m {
                second[j] += r[j] * r[j];
            }
        }
        let variance: Vec<f64> =
            second.iter().zip(&mean).map(|(s, m)| (s - m * m).max(0.0)).collect();
        (mean, second, variance)
    }

    /// Evaluate the expansion for one realization of the chaos variables:
    /// returns the m-vector sum_i c_ij H_i(xi).
    pub fn evaluate(&self, set: &MultiIndexSet, xi: &[f64]) -> Result<Vec<f64>, PceError> {
        if set.len() != self.p {
            return Err(PceError::LayoutMismatch(format!(
                "coefficients have {} rows, index set has {}",
                self.p,
                set.len()
            )));
        }
        let weights = set.eval_all(xi)?;
        let mut out = vec![0.0; self.m];
        for (i, w) in weights.iter().enumerate() {
            if *w == 0.0 {
                continue;
            }
            let r = self.row(i);
            for j in 0..self.m {
                out[j] += w * r[j];
            }
        }
        Ok(out)
    }
}

/// Time integral of the spatial L2 norm of each chaos coefficient over a
/// uniform time grid, by the trapezoidal rule. `mass_form` evaluates the
/// mass-matrix quadratic form on one coefficient row.
pub fn coefficient_l2_time_integral<F>(
    trajectory: &[ChaosCoefficients],
    dt: f64,
    mass_form: F,
) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64,
{
    if trajectory.is_empty() {
        return Vec::new();
    }
    let p = trajectory[0].p;
    let mut out = vec![0.0; p];
    for (k, coeffs) in trajectory.iter().enumerate() {
        let w = if k == 0 || k + 1 == trajectory.len() { 0.5 * dt } else { dt };
        for i in 0..p {
            out[i] += w * mass_form(coeffs.row(i));
        }
    }
    out
}
