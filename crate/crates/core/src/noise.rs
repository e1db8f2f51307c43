//! Spectral representation of Brownian motion and construction of stochastic
//! boundary-data realizations from a finite Gaussian vector.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::pce::MultiIndexSet;

#[derive(Debug, Error)]
pub enum NoiseError {
    #[error("time {0} outside horizon [0, {1}]")]
    TimeOutOfRange(f64, f64),
    #[error("sample has {0} components, need at least {1}")]
    SampleTooShort(usize, usize),
    #[error("invalid noise scale: {0}")]
    InvalidScale(String),
}

/// Sine basis of L2([0,T]): phi_i(t) = sqrt(2/T) sin((i-1/2) pi t / T).
#[derive(Debug, Clone)]
pub struct NoiseBasis {
    pub horizon: f64,
    pub truncation: usize,
}

impl NoiseBasis {
    pub fn new(horizon: f64, truncation: usize) -> Self {
        assert!(horizon > 0.0 && truncation >= 1);
        Self { horizon, truncation }
    }

    /// phi_i(t), with i counted from 1.
    pub fn basis_fn(&self, i: usize, t: f64) -> f64 {
        let t_h = self.horizon;
        (2.0 / t_h).sqrt() * ((i as f64 - 0.5) * std::f64::consts::PI * t / t_h).sin()
    }

    /// Closed-form antiderivative int_0^t phi_i(s) ds
    /// = sqrt(2T) (1 - cos((i-1/2) pi t / T)) / ((i-1/2) pi).
    pub fn basis_integral(&self, i: usize, t: f64) -> f64 {
        let t_h = self.horizon;
        let a = (i as f64 - 0.5) * std::f64::consts::PI;
        (2.0 * t_h).sqrt() * (1.0 - (a * t / t_h).cos()) / a
    }

    /// Truncated Brownian path omega_K(t) = sum_i xi_i int_0^t phi_i.
    pub fn brownian_path(&self, xi: &GaussianSample, t: f64) -> Result<f64, NoiseError> {
        self.check_time(t)?;
        if xi.xi.len() < self.truncation {
            return Err(NoiseError::SampleTooShort(xi.xi.len(), self.truncation));
        }
        Ok((1..=self.truncation).map(|i| xi.xi[i - 1] * self.basis_integral(i, t)).sum())
    }

    /// Spectral white-noise realization: the term-wise derivative
    /// sum_i xi_i phi_i(t) of the truncated expansion.
    pub fn white_noise(&self, xi: &[f64], t: f64) -> f64 {
        (1..=self.truncation.min(xi.len())).map(|i| xi[i - 1] * self.basis_fn(i, t)).sum()
    }

    /// Exact mean-square truncation residual E[omega(t) - omega_K(t)]^2
    /// = t - sum_{i<=K} (int_0^t phi_i)^2; bounded by t/K.
    pub fn truncation_residual(&self, t: f64) -> Result<f64, NoiseError> {
        self.check_time(t)?;
        let sum: f64 =
            (1..=self.truncation).map(|i| self.basis_integral(i, t).powi(2)).sum();
        Ok(t - sum)
    }

    fn check_time(&self, t: f64) -> Result<(), NoiseError> {
        if !(0.0..=self.horizon + 1e-12).contains(&t) {
            return Err(NoiseError::TimeOutOfRange(t, self.horizon));
        }
        Ok(())
    }
}

/// A vector of i.i.d. standard normal draws, tagged with the seed and sample
/// index that produced it so ensembles can be replayed exactly.
#[derive(Debug, Clone)]
pub struct GaussianSample {
    pub xi: Vec<f64>,
    pub seed: u64,
    pub sample_id: u64,
}

impl GaussianSample {
    /// Draw d standard normals from a counter-based substream: one stream per
    /// sample index, so ensembles are order-independent.
    pub fn draw(root_seed: u64, sample_id: u64, d: usize) -> Self {
        let mut rng = ChaCha12Rng::seed_from_u64(root_seed);
        rng.set_stream(sample_id.wrapping_add(1));
        let xi = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
        Self { xi, seed: root_seed, sample_id }
    }

    pub fn zeros(d: usize) -> Self {
        Self { xi: vec![0.0; d], seed: 0, sample_id: 0 }
    }
}

/// Deterministic means and noise scales of the stochastic boundary inputs:
/// inlet u_in(0,y,t) = (A + sigma1 wdot(t)) y (H - y) and spin
/// phi(t) = phibar(t) + sigma2 wdot(t).
#[derive(Debug, Clone)]
pub struct StochasticInputSpec {
    pub inlet_amplitude: f64,
    pub sigma_inlet: f64,
    /// Mean spin phibar(t) = spin_amplitude * sin(spin_frequency * pi * t).
    pub spin_amplitude: f64,
    pub spin_frequency: f64,
    pub sigma_spin: f64,
}

impl StochasticInputSpec {
    pub fn validate(&self) -> Result<(), NoiseError> {
        if self.sigma_inlet < 0.0 || self.sigma_spin < 0.0 {
            return Err(NoiseError::InvalidScale(format!(
                "sigma1 = {}, sigma2 = {} must be nonnegative",
                self.sigma_inlet, self.sigma_spin
            )));
        }
        Ok(())
    }

    pub fn mean_spin(&self, t: f64) -> f64 {
        self.spin_amplitude * (self.spin_frequency * std::f64::consts::PI * t).sin()
    }
}

/// A realized set of boundary data for one sample: inlet profile over (y, t)
/// and cylinder angular velocity over t. Pure functions, safe to share.
#[derive(Clone)]
pub struct BoundaryRealization {
    inlet: std::sync::Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>,
    spin: std::sync::Arc<dyn Fn(f64) -> f64 + Send + Sync>,
}

impl BoundaryRealization {
    pub fn new(
        inlet: impl Fn(f64, f64) -> f64 + Send + Sync + 'static,
        spin: impl Fn(f64) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Self { inlet: std::sync::Arc::new(inlet), spin: std::sync::Arc::new(spin) }
    }

    pub fn quiescent() -> Self {
        Self::new(|_, _| 0.0, |_| 0.0)
    }

    /// Inlet velocity x-component at height y and time t.
    pub fn inlet(&self, y: f64, t: f64) -> f64 {
        (self.inlet)(y, t)
    }

    /// Cylinder angular velocity at time t.
    pub fn spin(&self, t: f64) -> f64 {
        (self.spin)(t)
    }
}

/// Realize the stochastic boundary data of one sample through the spectral
/// white-noise expansion.
pub fn realize_boundary(
    spec: &StochasticInputSpec,
    basis: &NoiseBasis,
    xi: &GaussianSample,
    channel_height: f64,
) -> Result<BoundaryRealization, NoiseError> {
    spec.validate()?;
    let spec = spec.clone();
    let basis_c = basis.clone();
    let basis_s = basis.clone();
    let xi_inlet = xi.xi.clone();
    let xi_spin = xi.xi.clone();
    let (a, s1, s2) = (spec.inlet_amplitude, spec.sigma_inlet, spec.sigma_spin);
    let mean_spin = spec.clone();
    Ok(BoundaryRealization::new(
        move |y: f64, t: f64| {
            let wdot = if s1 != 0.0 { basis_c.white_noise(&xi_inlet, t) } else { 0.0 };
            (a + s1 * wdot) * y * (channel_height - y)
        },
        move |t: f64| {
            let wdot = if s2 != 0.0 { basis_s.white_noise(&xi_spin, t) } else { 0.0 };
            mean_spin.mean_spin(t) + s2 * wdot
        },
    ))
}

/// First-order chaos reconstruction of the Brownian path through the chaos
/// basis: sum over |alpha| = 1 of (int_0^t phi_j) H_alpha(xi).
pub fn brownian_from_chaos(
    basis: &NoiseBasis,
    set: &MultiIndexSet,
    xi: &GaussianSample,
    t: f64,
) -> Result<f64, NoiseError> {
    let mut out = 0.0;
    for (idx, alpha) in set.iter().enumerate() {
        let order: u32 = alpha.iter().sum();
        if order != 1 {
            continue;
        }
        let j = alpha.iter().position(|&a| a == 1).unwrap();
        if j < basis.truncation {
            let h = set.chaos_eval(idx, &xi.xi).expect("index in range");
            out += basis.basis_integral(j + 1, t) * h;
        }
    }
    Ok(out)
}

/// Write a sample manifest CSV: `sample_id, seed, xi_1..xi_d`.
pub fn manifest_csv(samples: &[GaussianSample]) -> String {
    let d = samples.first().map(|s| s.xi.len()).unwrap_or(0);
    let mut out = String::from("sample_id,seed");
    for i in 1..=d {
        out.push_str(&format!(",xi_{i}"));
    }
    out.push('\n');
    for s in samples {
        out.push_str(&format!("{},{}", s.sample_id, s.seed));
        for v in &s.xi {
            out.push_str(&format!(",{v:.17e}"));
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn orthonormality_by_quadrature() {
        // 200-point composite midpoint rule is not exact; use fine Simpson.
        let basis = NoiseBasis::new(1.0, 20);
        let n = 2000;
        let h = basis.horizon / n as f64;
        for i in 1..=20 {
            for j in i..=20 {
                let mut s = 0.0;
                for k in 0..n {
                    let t0 = k as f64 * h;
                    let f = |t: f64| basis.basis_fn(i, t) * basis.basis_fn(j, t);
                    s += h / 6.0 * (f(t0) + 4.0 * f(t0 + 0.5 * h) + f(t0 + h));
                }
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((s - expect).abs() < 1e-10, "i={i} j={j} s={s}");
            }
        }
    }

    #[test]
    fn path_at_zero_is_zero() {
        let basis = NoiseBasis::new(2.0, 8);
        let xi = GaussianSample::draw(42, 0, 8);
        assert_eq!(basis.brownian_path(&xi, 0.0).unwrap(), 0.0);
    }

    #[test]
    fn unit_vector_closed_form() {
        let basis = NoiseBasis::new(1.0, 5);
        let mut xi = GaussianSample::zeros(5);
        xi.xi[0] = 1.0;
        let got = basis.brownian_path(&xi, 1.0).unwrap();
        let expect = 2.0 * 2f64.sqrt() / std::f64::consts::PI;
        assert_relative_eq!(got, expect, max_relative = 1e-14);
    }

    #[test]
    fn path_variance_statistical() {
        let basis = NoiseBasis::new(1.0, 5);
        let n = 100_000;
        let mut sumsq = 0.0;
        for k in 0..n {
            let xi = GaussianSample::draw(7, k, 5);
            let w = basis.brownian_path(&xi, 1.0).unwrap();
            sumsq += w * w;
        }
        let var = sumsq / n as f64;
        let expect: f64 = (1..=5)
            .map(|i| 2.0 / (std::f64::consts::PI * (i as f64 - 0.5)).powi(2))
            .sum();
        assert_relative_eq!(expect, 0.9596, max_relative = 2e-4);
        assert!((var - expect).abs() < 0.02 * expect, "var={var} expect={expect}");
    }

    #[test]
    fn residual_values() {
        let basis = NoiseBasis::new(1.0, 5);
        let r = basis.truncation_residual(1.0).unwrap();
        assert_relative_eq!(r, 0.04039521319975592, max_relative = 1e-9);
        assert!(r <= 1.0 / 5.0);

        let big = NoiseBasis::new(1.0, 10_000);
        assert!(big.truncation_residual(1.0).unwrap() < 1e-3);
    }

    #[test]
    fn residual_bound_at_horizon() {
        // The t/K bound is an endpoint statement: the expansion error at the
        // horizon of its own basis. (For t strictly inside the horizon the
        // slowly converging cosine tail can exceed t/K.)
        for k in 1..=20 {
            for step in 1..=100 {
                let t = step as f64 / 100.0;
                let basis = NoiseBasis::new(t, k);
                let r = basis.truncation_residual(t).unwrap();
                assert!(r <= t / k as f64 + 1e-12, "K={k} t={t} r={r}");
                assert!(r >= -1e-12);
            }
        }
    }

    #[test]
    fn residual_nonnegative_inside_horizon() {
        for k in [1, 3, 8] {
            let basis = NoiseBasis::new(1.0, k);
            for step in 0..=100 {
                let t = step as f64 / 100.0;
                assert!(basis.truncation_residual(t).unwrap() >= -1e-12);
            }
        }
    }

    #[test]
    fn per_step_truncation_error_reference_value() {
        // Delta t = 1e-3, K = 5: the per-step error measure sqrt(dt)/K of the
        // O(sqrt(t)) truncation estimate evaluates to 0.0063.
        let (dt, k) = (1e-3f64, 5.0f64);
        let measure = dt.sqrt() / k;
        assert!((measure - 0.0063).abs() < 5e-5, "measure {measure}");
        // and the mean-square residual of a one-step horizon obeys dt/K
        let step_basis = NoiseBasis::new(dt, 5);
        let r = step_basis.truncation_residual(dt).unwrap();
        assert!(r <= dt / 5.0 + 1e-15);
    }

    #[test]
    fn time_out_of_range_rejected() {
        let basis = NoiseBasis::new(1.0, 3);
        let xi = GaussianSample::zeros(3);
        assert!(basis.brownian_path(&xi, -0.1).is_err());
        assert!(basis.brownian_path(&xi, 1.5).is_err());
    }

    #[test]
    fn deterministic_realization_with_zero_scales() {
        let spec = StochasticInputSpec {
            inlet_amplitude: 70.0,
            sigma_inlet: 0.0,
            spin_amplitude: 60.0,
            spin_frequency: 6.0,
            sigma_spin: 0.0,
        };
        let basis = NoiseBasis::new(1.0, 5);
        let xi = GaussianSample::draw(3, 11, 5);
        let bc = realize_boundary(&spec, &basis, &xi, 0.5).unwrap();
        let t = 0.37;
        assert_relative_eq!(bc.inlet(0.25, t), 70.0 * 0.25 * 0.25, max_relative = 1e-14);
        assert_relative_eq!(bc.spin(t), spec.mean_spin(t), max_relative = 1e-14);
    }

    #[test]
    fn zero_sample_gives_mean_data() {
        let spec = StochasticInputSpec {
            inlet_amplitude: 70.0,
            sigma_inlet: 2.0,
            spin_amplitude: 60.0,
            spin_frequency: 6.0,
            sigma_spin: 1.0,
        };
        let basis = NoiseBasis::new(1.0, 5);
        let xi = GaussianSample::zeros(5);
        let bc = realize_boundary(&spec, &basis, &xi, 0.5).unwrap();
        assert_relative_eq!(bc.inlet(0.25, 0.4), 70.0 * 0.0625, max_relative = 1e-14);
        assert_relative_eq!(bc.spin(0.4), spec.mean_spin(0.4), max_relative = 1e-14);
    }

    #[test]
    fn inlet_moments_match_closed_form() {
        let spec = StochasticInputSpec {
            inlet_amplitude: 70.0,
            sigma_inlet: 2.0,
            spin_amplitude: 0.0,
            spin_frequency: 6.0,
            sigma_spin: 0.0,
        };
        let basis = NoiseBasis::new(1.0, 5);
        let h = 0.5;
        let t = 0.61;
        let n = 10_000;
        let (mut sum, mut sumsq) = (0.0, 0.0);
        for k in 0..n {
            let xi = GaussianSample::draw(99, k, 5);
            let bc = realize_boundary(&spec, &basis, &xi, h).unwrap();
            let v = bc.inlet(h / 2.0, t);
            sum += v;
            sumsq += v * v;
        }
        let mean = sum / n as f64;
        let std = (sumsq / n as f64 - mean * mean).sqrt();
        let expect_mean = 70.0 * 0.0625;
        let phi_sq: f64 = (1..=5).map(|i| basis.basis_fn(i, t).powi(2)).sum();
        let expect_std = 2.0 * 0.0625 * phi_sq.sqrt();
        assert_relative_eq!(expect_mean, 4.375, max_relative = 1e-12);
        assert!((mean - expect_mean).abs() < 0.03 * expect_mean.abs() + 3.0 * expect_std / (n as f64).sqrt());
        assert!((std - expect_std).abs() < 0.03 * expect_std, "std={std} expect={expect_std}");
    }

    #[test]
    fn reproducible_draws() {
        let a = GaussianSample::draw(123, 5, 8);
        let b = GaussianSample::draw(123, 5, 8);
        assert_eq!(a.xi, b.xi);
        let c = GaussianSample::draw(123, 6, 8);
        assert_ne!(a.xi, c.xi);
    }

    #[test]
    fn remark_consistency_with_chaos_basis() {
        // brownian_path equals the first-order chaos reconstruction.
        let basis = NoiseBasis::new(1.0, 5);
        let set = MultiIndexSet::new(5, 2).unwrap();
        let xi = GaussianSample::draw(17, 2, 5);
        for &t in &[0.1, 0.5, 0.93] {
            let direct = basis.brownian_path(&xi, t).unwrap();
            let via_chaos = brownian_from_chaos(&basis, &set, &xi, t).unwrap();
            assert_relative_eq!(direct, via_chaos, max_relative = 1e-13);
        }
    }
}
