//! Experiment configuration: a line-oriented `section.key = value` format
//! with strict unknown-key rejection, load-time validation that reports
//! every violation, and lossless round-trip serialization.

use crate::mesh_fem::ChannelGeometry;
use crate::noise::StochasticInputSpec;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {0}: expected `section.key = value`, got `{1}`")]
    Syntax(usize, String),
    #[error("line {0}: unknown key `{1}`")]
    UnknownKey(usize, String),
    #[error("line {0}: value `{2}` invalid for `{1}`: {3}")]
    BadValue(usize, String, String, String),
    #[error("configuration invalid:\n{}", .0.join("\n"))]
    Invalid(Vec<String>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    // geometry
    pub geometry: ChannelGeometry,
    // flow discretization
    pub re: f64,
    pub dt: f64,
    pub t_final: f64,
    pub mesh_h: f64,
    pub mesh_h_coarse: f64,
    pub mesh_band: f64,
    pub step_strategy: String,
    // stochastic inputs
    pub noise_truncation: usize,
    pub inlet_amplitude: f64,
    pub sigma_inlet: f64,
    pub spin_amplitude: f64,
    pub spin_frequency: f64,
    pub sigma_spin: f64,
    // chaos expansion
    pub chaos_order: u32,
    // compressive sensing / pipeline
    pub budget_coarse: usize,
    pub budget_fine: usize,
    pub eps_rel_coarse: f64,
    pub eps_rel_fine: f64,
    pub tau: Vec<f64>,
    pub bp_strategy: String,
    pub window: f64,
    pub snapshot_times: Vec<f64>,
    pub m_max: usize,
    pub energy_threshold: f64,
    // ensemble
    pub n_samples: usize,
    // control
    pub beta: f64,
    pub lambda0: f64,
    pub eps_tol: f64,
    pub max_iters: usize,
    pub target_mode: String,
    pub target_time: f64,
    // run plumbing
    pub seed: u64,
    pub out_dir: String,
    pub jobs: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            geometry: ChannelGeometry::default(),
            re: 200.0,
            dt: 1e-3,
            t_final: 1.0,
            mesh_h: 0.02,
            mesh_h_coarse: 0.04,
            mesh_band: 2.0,
            step_strategy: "reuse".into(),
            noise_truncation: 5,
            inlet_amplitude: 70.0,
            sigma_inlet: 2.0,
            spin_amplitude: 60.0,
            spin_frequency: 6.0,
            sigma_spin: 1.0,
            chaos_order: 2,
            budget_coarse: 60,
            budget_fine: 20,
            eps_rel_coarse: 1e-2,
            eps_rel_fine: 1e-3,
            tau: vec![1e-2],
            bp_strategy: "admm".into(),
            window: 0.5,
            snapshot_times: vec![0.5, 1.0],
            m_max: 20,
            energy_threshold: 0.99,
            n_samples: 20,
            beta: 1e-5,
            lambda0: 0.5,
            eps_tol: 1e-4,
            max_iters: 20,
            target_mode: "steady".into(),
            target_time: 0.5,
            seed: 7,
            out_dir: "out".into(),
            jobs: 1,
        }
    }
}

fn parse_num<T: std::str::FromStr>(
    line: usize,
    key: &str,
    value: &str,
) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e: T::Err| {
        ConfigError::BadValue(line, key.into(), value.into(), e.to_string())
    })
}

fn parse_list(line: usize, key: &str, value: &str) -> Result<Vec<f64>, ConfigError> {
    value
        .split(',')
        .map(|v| parse_num(line, key, v.trim()))
        .collect()
}

fn fmt_list(values: &[f64]) -> String {
    values.iter().map(|v| format!("{v}")).collect::<Vec<_>>().join(", ")
}

impl ExperimentConfig {
    /// Parse the text format; later assignments override earlier ones.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        for (idx, raw) in text.lines().enumerate() {
            let lno = idx + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| ConfigError::Syntax(lno, raw.trim().into()))?;
            let (key, value) = (key.trim(), value.trim());
            cfg.assign(lno, key, value)?;
        }
        cfg.validate().map_err(ConfigError::Invalid)?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            ConfigError::Invalid(vec![format!("cannot read {}: {e}", path.display())])
        })?;
        Self::parse(&text)
    }

    fn assign(&mut self, l: usize, key: &str, v: &str) -> Result<(), ConfigError> {
        match key {
            "geometry.length" => self.geometry.length = parse_num(l, key, v)?,
            "geometry.height" => self.geometry.height = parse_num(l, key, v)?,
            "geometry.cylinder_x" => self.geometry.cylinder_center.0 = parse_num(l, key, v)?,
            "geometry.cylinder_y" => self.geometry.cylinder_center.1 = parse_num(l, key, v)?,
            "geometry.cylinder_diameter" => {
                self.geometry.cylinder_diameter = parse_num(l, key, v)?
            }
            "flow.re" => self.re = parse_num(l, key, v)?,
            "flow.dt" => self.dt = parse_num(l, key, v)?,
            "flow.t_final" => self.t_final = parse_num(l, key, v)?,
            "flow.mesh_h" => self.mesh_h = parse_num(l, key, v)?,
            "flow.mesh_h_coarse" => self.mesh_h_coarse = parse_num(l, key, v)?,
            "flow.mesh_band" => self.mesh_band = parse_num(l, key, v)?,
            "flow.step_strategy" => self.step_strategy = v.into(),
            "noise.truncation" => self.noise_truncation = parse_num(l, key, v)?,
            "noise.inlet_amplitude" => self.inlet_amplitude = parse_num(l, key, v)?,
            "noise.sigma_inlet" => self.sigma_inlet = parse_num(l, key, v)?,
            "noise.spin_amplitude" => self.spin_amplitude = parse_num(l, key, v)?,
            "noise.spin_frequency" => self.spin_frequency = parse_num(l, key, v)?,
            "noise.sigma_spin" => self.sigma_spin = parse_num(l, key, v)?,
            "pce.order" => self.chaos_order = parse_num(l, key, v)?,
            "cs.budget_coarse" => self.budget_coarse = parse_num(l, key, v)?,
            "cs.budget_fine" => self.budget_fine = parse_num(l, key, v)?,
            "cs.eps_rel_coarse" => self.eps_rel_coarse = parse_num(l, key, v)?,
            "cs.eps_rel_fine" => self.eps_rel_fine = parse_num(l, key, v)?,
            "cs.tau" => self.tau = parse_list(l, key, v)?,
            "cs.strategy" => self.bp_strategy = v.into(),
            "cs.window" => self.window = parse_num(l, key, v)?,
            "cs.snapshot_times" => self.snapshot_times = parse_list(l, key, v)?,
            "basis.m_max" => self.m_max = parse_num(l, key, v)?,
            "basis.energy_threshold" => self.energy_threshold = parse_num(l, key, v)?,
            "ensemble.samples" => self.n_samples = parse_num(l, key, v)?,
            "control.beta" => self.beta = parse_num(l, key, v)?,
            "control.lambda0" => self.lambda0 = parse_num(l, key, v)?,
            "control.eps_tol" => self.eps_tol = parse_num(l, key, v)?,
            "control.max_iters" => self.max_iters = parse_num(l, key, v)?,
            "control.target_mode" => self.target_mode = v.into(),
            "control.target_time" => self.target_time = parse_num(l, key, v)?,
            "run.seed" => self.seed = parse_num(l, key, v)?,
            "run.out_dir" => self.out_dir = v.into(),
            "run.jobs" => self.jobs = parse_num(l, key, v)?,
            _ => return Err(ConfigError::UnknownKey(l, key.into())),
        }
        Ok(())
    }

    /// Collect every violated invariant, not just the first.
    pub fn validate(&self) -> Result<(), Vec<String>> {
        let mut errs = Vec::new();
        if let Err(e) = self.geometry.validate() {
            errs.push(format!("geometry: {e}"));
        }
        let positive: [(&str, f64); 10] = [
            ("flow.re", self.re),
            ("flow.dt", self.dt),
            ("flow.t_final", self.t_final),
            ("flow.mesh_h", self.mesh_h),
            ("flow.mesh_h_coarse", self.mesh_h_coarse),
            ("cs.window", self.window),
            ("basis.energy_threshold", self.energy_threshold),
            ("control.lambda0", self.lambda0),
            ("control.eps_tol", self.eps_tol),
            ("control.target_time", self.target_time),
        ];
        for (name, v) in positive {
            if !(v > 0.0) {
                errs.push(format!("{name} must be positive, got {v}"));
            }
        }
        if self.mesh_band < 1.0 {
            errs.push(format!("flow.mesh_band must be >= 1, got {}", self.mesh_band));
        }
        if self.mesh_h_coarse <= self.mesh_h {
            errs.push(format!(
                "flow.mesh_h_coarse ({}) must exceed flow.mesh_h ({})",
                self.mesh_h_coarse, self.mesh_h
            ));
        }
        if self.sigma_inlet < 0.0 || self.sigma_spin < 0.0 {
            errs.push("noise.sigma_inlet and noise.sigma_spin must be nonnegative".into());
        }
        if self.noise_truncation == 0 {
            errs.push("noise.truncation must be at least 1".into());
        }
        if self.budget_coarse == 0 || self.budget_fine == 0 {
            errs.push("cs.budget_coarse and cs.budget_fine must be at least 1".into());
        }
        if self.snapshot_times.is_empty()
            || self.snapshot_times.windows(2).any(|w| w[0] >= w[1])
            || self.snapshot_times.first().is_some_and(|&t| t <= 0.0)
        {
            errs.push("cs.snapshot_times must be positive and strictly increasing".into());
        }
        if self.tau.iter().any(|&t| t <= 0.0) {
            errs.push("cs.tau entries must be positive".into());
        }
        if self.m_max == 0 {
            errs.push("basis.m_max must be at least 1".into());
        }
        if self.n_samples == 0 {
            errs.push("ensemble.samples must be at least 1".into());
        }
        if self.beta < 0.0 {
            errs.push(format!("control.beta must be nonnegative, got {}", self.beta));
        }
        if self.max_iters == 0 {
            errs.push("control.max_iters must be at least 1".into());
        }
        if !matches!(self.target_mode.as_str(), "zero" | "steady") {
            errs.push(format!(
                "control.target_mode must be `zero` or `steady`, got `{}`",
                self.target_mode
            ));
        }
        if !matches!(self.step_strategy.as_str(), "direct" | "reuse") {
            errs.push(format!(
                "flow.step_strategy must be `direct` or `reuse`, got `{}`",
                self.step_strategy
            ));
        }
        if self.jobs == 0 {
            errs.push("run.jobs must be at least 1".into());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(errs)
        }
    }

    /// Emit the resolved configuration; parsing the output reproduces the
    /// configuration exactly.
    pub fn serialize(&self) -> String {
        let g = &self.geometry;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| s.push_str(&format!("{k} = {v}\n"));
        kv("geometry.length", format!("{}", g.length));
        kv("geometry.height", format!("{}", g.height));
        kv("geometry.cylinder_x", format!("{}", g.cylinder_center.0));
        kv("geometry.cylinder_y", format!("{}", g.cylinder_center.1));
        kv("geometry.cylinder_diameter", format!("{}", g.cylinder_diameter));
        kv("flow.re", format!("{}", self.re));
        kv("flow.dt", format!("{}", self.dt));
        kv("flow.t_final", format!("{}", self.t_final));
        kv("flow.mesh_h", format!("{}", self.mesh_h));
        kv("flow.mesh_h_coarse", format!("{}", self.mesh_h_coarse));
        kv("flow.mesh_band", format!("{}", self.mesh_band));
        kv("flow.step_strategy", self.step_strategy.clone());
        kv("noise.truncation", format!("{}", self.noise_truncation));
        kv("noise.inlet_amplitude", format!("{}", self.inlet_amplitude));
        kv("noise.sigma_inlet", format!("{}", self.sigma_inlet));
        kv("noise.spin_amplitude", format!("{}", self.spin_amplitude));
        kv("noise.spin_frequency", format!("{}", self.spin_frequency));
        kv("noise.sigma_spin", format!("{}", self.sigma_spin));
        kv("pce.order", format!("{}", self.chaos_order));
        kv("cs.budget_coarse", format!("{}", self.budget_coarse));
        kv("cs.budget_fine", format!("{}", self.budget_fine));
        kv("cs.eps_rel_coarse", format!("{}", self.eps_rel_coarse));
        kv("cs.eps_rel_fine", format!("{}", self.eps_rel_fine));
        kv("cs.tau", fmt_list(&self.tau));
        kv("cs.strategy", self.bp_strategy.clone());
        kv("cs.window", format!("{}", self.window));
        kv("cs.snapshot_times", fmt_list(&self.snapshot_times));
        kv("basis.m_max", format!("{}", self.m_max));
        kv("basis.energy_threshold", format!("{}", self.energy_threshold));
        kv("ensemble.samples", format!("{}", self.n_samples));
        kv("control.beta", format!("{}", self.beta));
        kv("control.lambda0", format!("{}", self.lambda0));
        kv("control.eps_tol", format!("{}", self.eps_tol));
        kv("control.max_iters", format!("{}", self.max_iters));
        kv("control.target_mode", self.target_mode.clone());
        kv("control.target_time", format!("{}", self.target_time));
        kv("run.seed", format!("{}", self.seed));
        kv("run.out_dir", self.out_dir.clone());
        kv("run.jobs", format!("{}", self.jobs));
        s
    }

    pub fn input_spec(&self) -> StochasticInputSpec {
        StochasticInputSpec {
            inlet_amplitude: self.inlet_amplitude,
            sigma_inlet: self.sigma_inlet,
            spin_amplitude: self.spin_amplitude,
            spin_frequency: self.spin_frequency,
            sigma_spin: self.sigma_spin,
        }
    }
}
