//! Assembly of the sampling matrix and observation block for the matrix
//! basis-pursuit problem Psi C Phi ~ U.

use super::operator::KroneckerOperator;
use super::CsError;
use crate::noise::GaussianSample;
use crate::pce::MultiIndexSet;
use nalgebra::DMatrix;

/// Right factor of the matrix problem: evaluation of the spatial basis at
/// the observation points. Identity means the unknowns are nodal values.
#[derive(Debug, Clone)]
pub enum SpatialEval {
    Identity(usize),
    /// m x s: row j holds basis function j at the s observation points.
    Modes(DMatrix<f64>),
}

impl SpatialEval {
    pub fn mode_count(&self) -> usize {
        match self {
            SpatialEval::Identity(m) => *m,
            SpatialEval::Modes(m) => m.nrows(),
        }
    }

    pub fn point_count(&self) -> usize {
        match self {
            SpatialEval::Identity(m) => *m,
            SpatialEval::Modes(m) => m.ncols(),
        }
    }
}

/// One matrix basis-pursuit instance: n samples by s observation points.
#[derive(Debug, Clone)]
pub struct MeasurementSet {
    /// n x p chaos sampling matrix, row r = basis evaluated at sample r.
    pub psi: DMatrix<f64>,
    pub spatial: SpatialEval,
    /// n x s observations, row-major.
    pub observations: Vec<f64>,
}

impl MeasurementSet {
    pub fn sample_count(&self) -> usize {
        self.psi.nrows()
    }

    pub fn chaos_count(&self) -> usize {
        self.psi.ncols()
    }

    pub fn spatial_count(&self) -> usize {
        self.spatial.mode_count()
    }

    pub(crate) fn observations_vec(&self) -> Vec<f64> {
        self.observations.clone()
    }

    /// Build the Kronecker operator, optionally with unit-normalized Psi
    /// columns and Phi rows. Returns the operator and the applied scales so
    /// the caller can undo them on the recovered coefficients.
    pub(crate) fn operator(
        &self,
        normalize: bool,
    ) -> Result<(KroneckerOperator, Vec<f64>, Vec<f64>), CsError> {
        let n = self.sample_count();
        let s = self.spatial.point_count();
        if self.observations.len() != n * s {
            return Err(CsError::RejectedInput(format!(
                "observation block has {} entries, expected {} x {}",
                self.observations.len(),
                n,
                s
            )));
        }
        let mut psi = self.psi.clone();
        let mut psi_scale = vec![1.0; psi.ncols()];
        let mut phi_scale = vec![1.0; self.spatial_count()];
        if normalize {
            for j in 0..psi.ncols() {
                let nrm = psi.column(j).norm();
                if nrm > 0.0 {
                    psi_scale[j] = nrm;
                    psi.column_mut(j).scale_mut(1.0 / nrm);
                }
            }
        }
        let phi = match &self.spatial {
            SpatialEval::Identity(_) => None,
            SpatialEval::Modes(m) => {
                let mut m = m.clone();
                if normalize {
                    for i in 0..m.nrows() {
                        let nrm = m.row(i).norm();
                        if nrm > 0.0 {
                            phi_scale[i] = nrm;
                            m.row_mut(i).scale_mut(1.0 / nrm);
                        }
                    }
                }
                Some(m)
            }
        };
        Ok((KroneckerOperator::new(psi, phi, s), psi_scale, phi_scale))
    }
}

/// Assemble a measurement set from drawn samples and their observed fields.
/// Each observation row must hold the field at the same s points.
pub fn assemble_measurements(
    set: &MultiIndexSet,
    samples: &[(GaussianSample, Vec<f64>)],
    spatial: SpatialEval,
) -> Result<MeasurementSet, CsError> {
    if samples.is_empty() {
        return Err(CsError::RejectedInput("no samples".into()));
    }
    let s = spatial.point_count();
    let n = samples.len();
    let mut psi = DMatrix::zeros(n, set.len());
    let mut observations = vec![0.0; n * s];
    for (r, (sample, field)) in samples.iter().enumerate() {
        if field.len() != s {
            return Err(CsError::RejectedInput(format!(
                "sample {r} has {} observed values, expected {s}",
                field.len()
            )));
        }
        let row = set
            .eval_all(&sample.xi)
            .map_err(|e| CsError::RejectedInput(e.to_string()))?;
        for (j, v) in row.into_iter().enumerate() {
            psi[(r, j)] = v;
        }
        observations[r * s..(r + 1) * s].copy_from_slice(field);
    }
    Ok(MeasurementSet { psi, spatial, observations })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cs_solver::{solve_matrix_bp, BpOptions};

    fn draw(set: &MultiIndexSet, n: usize, seed: u64) -> Vec<GaussianSample> {
        (0..n).map(|i| GaussianSample::draw(seed, i as u64, set.dimension())).collect()
    }

    #[test]
    fn assembly_shapes_and_psi_rows() {
        let set = MultiIndexSet::new(3, 2).unwrap();
        let samples: Vec<_> = draw(&set, 7, 1)
            .into_iter()
            .map(|s| {
                let field = vec![s.xi[0], s.xi[1] * 2.0];
                (s, field)
            })
            .collect();
        let ms = assemble_measurements(&set, &samples, SpatialEval::Identity(2)).unwrap();
        assert_eq!(ms.sample_count(), 7);
        assert_eq!(ms.chaos_count(), set.len());
        assert_eq!(ms.spatial_count(), 2);
        for r in 0..7 {
            let row = set.eval_all(&samples[r].0.xi).unwrap();
            for j in 0..set.len() {
                assert_eq!(ms.psi[(r, j)], row[j]);
            }
        }
    }

    #[test]
    fn mismatched_field_length_rejected() {
        let set = MultiIndexSet::new(2, 1).unwrap();
        let mut samples: Vec<_> = draw(&set, 3, 2)
            .into_iter()
            .map(|s| (s, vec![0.0, 0.0]))
            .collect();
        samples[1].1.pop();
        assert!(matches!(
            assemble_measurements(&set, &samples, SpatialEval::Identity(2)),
            Err(CsError::RejectedInput(_))
        ));
    }

    #[test]
    fn matrix_bp_recovers_planted_coefficients() {
        // field(x_j, xi) built from a known sparse chaos expansion over a
        // small mode basis; enough samples to make recovery well posed
        let set = MultiIndexSet::new(4, 2).unwrap();
        let p = set.len();
        let m = 6;
        let s = 40;
        let phi = DMatrix::from_fn(m, s, |i, j| {
            let x = j as f64 / (s - 1) as f64;
            (std::f64::consts::PI * (i as f64 + 1.0) * x).sin()
        });
        let mut c_true = vec![0.0; p * m];
        c_true[0 * m + 0] = 1.2;
        c_true[2 * m + 1] = -0.7;
        c_true[5 * m + 3] = 0.45;
        c_true[9 * m + 2] = 0.3;
        c_true[1 * m + 5] = -0.2;
        let samples: Vec<_> = draw(&set, 3 * p, 7)
            .into_iter()
            .map(|sample| {
                let h = set.eval_all(&sample.xi).unwrap();
                let field: Vec<f64> = (0..s)
                    .map(|j| {
                        let mut v = 0.0;
                        for i in 0..p {
                            for k in 0..m {
                                v += c_true[i * m + k] * h[i] * phi[(k, j)];
                            }
                        }
                        v
                    })
                    .collect();
                (sample, field)
            })
            .collect();
        let ms = assemble_measurements(&set, &samples, SpatialEval::Modes(phi)).unwrap();
        let sol = solve_matrix_bp(&ms, 1e-9, &BpOptions::default()).unwrap();
        assert_eq!((sol.p, sol.m), (p, m));
        let err: f64 = sol
            .coefficients
            .iter()
            .zip(&c_true)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
            / c_true.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(err < 1e-6, "matrix recovery error {err}");
    }
}
