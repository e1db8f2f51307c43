//! Transient incompressible Navier-Stokes solver on the Taylor-Hood
//! discretization: one semi-implicit (backward Euler, lagged convection)
//! saddle-point solve per step, with force and shedding diagnostics.

use crate::linalg::{gmres, CsrMatrix, GmresOptions, SparseLu, Triplets};
use crate::mesh_fem::{
    assemble_convection_full, compute_forces, AssembledOperators, BoundaryTag, ChannelGeometry,
    FemSpace, ForceSample, Mesh,
};
use crate::noise::BoundaryRealization;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NsError {
    #[error("input rejected: {0}")]
    RejectedInput(String),
    #[error("linear solver breakdown at t={t}: {detail}")]
    SolverBreakdown { t: f64, detail: String },
    #[error("non-finite state detected at t={0}")]
    NonFinite(f64),
    #[error("divergence residual {res:.3e} exceeds {tol:.3e} at t={t}")]
    DivergenceResidual { t: f64, res: f64, tol: f64 },
    #[error("no shedding detected: {0}")]
    NoShedding(String),
    #[error(transparent)]
    Mesh(#[from] crate::mesh_fem::MeshError),
}

/// Instantaneous discrete flow state.
#[derive(Debug, Clone)]
pub struct FlowState {
    pub t: f64,
    pub u: Vec<f64>,
    pub p: Vec<f64>,
}

impl FlowState {
    pub fn zeros(space: &FemSpace, t: f64) -> Self {
        Self { t, u: vec![0.0; space.n_velocity()], p: vec![0.0; space.n_pressure()] }
    }

    pub fn is_finite(&self) -> bool {
        self.u.iter().chain(self.p.iter()).all(|v| v.is_finite())
    }
}

/// Drag/lift time series.
#[derive(Debug, Clone, Default)]
pub struct ForceHistory {
    pub samples: Vec<(f64, f64, f64)>,
}

impl ForceHistory {
    pub fn push(&mut self, t: f64, cd: f64, cl: f64) {
        if let Some(&(last, _, _)) = self.samples.last() {
            assert!(t > last, "time must increase");
        }
        self.samples.push((t, cd, cl));
    }

    pub fn csv(&self) -> String {
        let mut s = String::from("t,CD,CL\n");
        for &(t, cd, cl) in &self.samples {
            s.push_str(&format!("{t:.6},{cd:.10e},{cl:.10e}\n"));
        }
        s
    }

    /// Mean of a column over t >= cutoff.
    pub fn mean_after(&self, cutoff: f64, lift: bool) -> Option<f64> {
        let vals: Vec<f64> = self
            .samples
            .iter()
            .filter(|s| s.0 >= cutoff)
            .map(|s| if lift { s.2 } else { s.1 })
            .collect();
        if vals.is_empty() {
            None
        } else {
            Some(vals.iter().sum::<f64>() / vals.len() as f64)
        }
    }
}

#[derive(Debug, Clone)]
pub struct StepperOptions {
    pub dt: f64,
    /// "direct" refactors every step; "reuse" refactors every
    /// `refactor_every` steps and corrects with preconditioned GMRES.
    pub strategy: String,
    pub refactor_every: usize,
    /// Acceptance bound on ||B u|| / ||u|| after each step.
    pub div_tol: f64,
}

impl Default for StepperOptions {
    fn default() -> Self {
        Self { dt: 1e-3, strategy: "reuse".into(), refactor_every: 40, div_tol: 1e-8 }
    }
}

/// Per-step linear solver behavior behind one interface.
trait StepStrategy {
    /// Called once per step with the current matrix before `solve`.
    fn prepare(&mut self, a: &CsrMatrix, step_index: usize, t: f64) -> Result<(), NsError>;
    fn solve(&mut self, a: &CsrMatrix, rhs: &[f64], t: f64) -> Result<Vec<f64>, NsError>;
}

struct DirectStrategy {
    lu: Option<SparseLu>,
}

impl StepStrategy for DirectStrategy {
    fn prepare(&mut self, a: &CsrMatrix, _step: usize, t: f64) -> Result<(), NsError> {
        match &mut self.lu {
            None => {
                self.lu = Some(SparseLu::factor(a).map_err(|e| NsError::SolverBreakdown {
                    t,
                    detail: e.to_string(),
                })?)
            }
            Some(lu) => lu.refactor(a).map_err(|e| NsError::SolverBreakdown {
                t,
                detail: e.to_string(),
            })?,
        }
        Ok(())
    }

    fn solve(&mut self, _a: &CsrMatrix, rhs: &[f64], _t: f64) -> Result<Vec<f64>, NsError> {
        Ok(self.lu.as_ref().expect("prepared").solve(rhs))
    }
}

struct ReuseStrategy {
    every: usize,
    lu: Option<SparseLu>,
}

impl StepStrategy for ReuseStrategy {
    fn prepare(&mut self, a: &CsrMatrix, step: usize, t: f64) -> Result<(), NsError> {
        let refresh = self.lu.is_none() || step % self.every == 0;
        if refresh {
            match &mut self.lu {
                None => {
                    self.lu =
                        Some(SparseLu::factor(a).map_err(|e| NsError::SolverBreakdown {
                            t,
                            detail: e.to_string(),
                        })?)
                }
                Some(lu) => lu.refactor(a).map_err(|e| NsError::SolverBreakdown {
                    t,
                    detail: e.to_string(),
                })?,
            }
        }
        Ok(())
    }

    fn solve(&mut self, a: &CsrMatrix, rhs: &[f64], t: f64) -> Result<Vec<f64>, NsError> {
        let lu = self.lu.as_ref().expect("prepared");
        let mut x = lu.solve(rhs);
        let stats = gmres(
            &mut |v, out| a.matvec(v, out),
            &mut |v| lu.solve_in_place(v),
            rhs,
            &mut x,
            &GmresOptions { restart: 30, max_iters: 200, tol: 1e-11 },
        )
        .map_err(|e| NsError::SolverBreakdown { t, detail: e.to_string() })?;
        let _ = stats;
        Ok(x)
    }
}

/// Semi-implicit stepper. Owns the static part of the saddle matrix and a
/// value-update map so per-step assembly never re-sorts the pattern.
pub struct Stepper<'a> {
    pub mesh: &'a Mesh,
    pub space: &'a FemSpace,
    pub ops: &'a AssembledOperators,
    pub geom: ChannelGeometry,
    pub bc: BoundaryRealization,
    dt: f64,
    div_tol: f64,
    n_total: usize,
    /// Union-pattern matrix holding the static values (M/dt + A, -B^T, B,
    /// Dirichlet identity rows) with zeros at convection slots.
    static_csr: CsrMatrix,
    /// Work matrix with the same pattern.
    work: CsrMatrix,
    /// For each stored convection entry (in CSR order of the convection
    /// operator): target slot in the work matrix, or usize::MAX for rows
    /// replaced by Dirichlet conditions.
    conv_map: Vec<usize>,
    strategy: Box<dyn StepStrategy>,
    step_count: usize,
}

impl<'a> Stepper<'a> {
    pub fn new(
        mesh: &'a Mesh,
        space: &'a FemSpace,
        ops: &'a AssembledOperators,
        geom: ChannelGeometry,
        bc: BoundaryRealization,
        opts: &StepperOptions,
    ) -> Result<Self, NsError> {
        if !(opts.dt > 0.0) {
            return Err(NsError::RejectedInput(format!("dt {} must be positive", opts.dt)));
        }
        let nv = space.n_velocity();
        let np = space.n_pressure();
        let n_total = nv + np;
        let ns = space.n_scalar();
        let dirichlet: Vec<bool> = (0..nv).map(|i| space.is_dirichlet_node(i % ns)).collect();

        let bt = ops.b.transpose();
        let mut t = Triplets::new(n_total, n_total);
        for r in 0..nv {
            if dirichlet[r] {
                t.push_always(r, r, 1.0);
                continue;
            }
            for (c, v) in ops.m.row_entries(r) {
                t.push(r, c, v / opts.dt);
            }
            for (c, v) in ops.a.row_entries(r) {
                t.push(r, c, v);
            }
            for (q, v) in bt.row_entries(r) {
                t.push(r, nv + q, -v);
            }
        }
        for q in 0..np {
            for (c, v) in ops.b.row_entries(q) {
                t.push(nv + q, c, v);
            }
        }
        // pin the convection pattern with zeros
        let zero_u = vec![0.0; nv];
        let conv0 = assemble_convection_full(mesh, space, &zero_u)?;
        for r in 0..nv {
            if dirichlet[r] {
                continue;
            }
            for (c, _) in conv0.row_entries(r) {
                t.push_always(r, c, 0.0);
            }
        }
        let static_csr = t.to_csr();
        let work = static_csr.clone();
        // slot map in convection CSR entry order
        let mut conv_map = Vec::with_capacity(conv0.nnz());
        for r in 0..nv {
            for (c, _) in conv0.row_entries(r) {
                if dirichlet[r] {
                    conv_map.push(usize::MAX);
                } else {
                    conv_map.push(static_csr.entry_index(r, c).expect("pinned slot"));
                }
            }
        }
        let strategy: Box<dyn StepStrategy> = match opts.strategy.as_str() {
            "direct" => Box::new(DirectStrategy { lu: None }),
            "reuse" => Box::new(ReuseStrategy { every: opts.refactor_every.max(1), lu: None }),
            other => {
                return Err(NsError::RejectedInput(format!(
                    "unknown linear strategy '{other}' (available: direct, reuse)"
                )))
            }
        };
        Ok(Self {
            mesh,
            space,
            ops,
            geom,
            bc,
            dt: opts.dt,
            div_tol: opts.div_tol,
            n_total,
            static_csr,
            work,
            conv_map,
            strategy,
            step_count: 0,
        })
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// Strong boundary value for one scalar node at time t, or None for
    /// free and outlet nodes.
    fn boundary_value(&self, node: usize, t: f64) -> Option<(f64, f64)> {
        let tag = self.space.node_tag[node]?;
        let [x, y] = self.space.node_coords[node];
        match tag {
            BoundaryTag::Inlet => Some((self.bc.inlet(y, t), 0.0)),
            BoundaryTag::Top | BoundaryTag::Bottom => Some((0.0, 0.0)),
            BoundaryTag::Cylinder => {
                let s = self.bc.spin(t);
                let (x0, y0) = self.geom.cylinder_center;
                Some((-(y - y0) * s, (x - x0) * s))
            }
            BoundaryTag::Outlet => None,
        }
    }

    /// Assemble the step matrix for a given advecting velocity into the
    /// work buffer: static part (mass, viscous, divergence, Dirichlet
    /// identity rows) plus the lagged convection block. Value update only,
    /// the pattern is pinned at construction.
    pub fn system_matrix(&mut self, advect: &[f64]) -> Result<&CsrMatrix, NsError> {
        let nv = self.space.n_velocity();
        let conv = assemble_convection_full(self.mesh, self.space, advect)?;
        self.work.values_mut().copy_from_slice(self.static_csr.values());
        let vals = self.work.values_mut();
        let mut k = 0;
        for r in 0..nv {
            for (_, v) in conv.row_entries(r) {
                let slot = self.conv_map[k];
                if slot != usize::MAX {
                    vals[slot] += v;
                }
                k += 1;
            }
        }
        Ok(&self.work)
    }

    /// Advance one step of size dt.
    pub fn step(&mut self, state: &FlowState) -> Result<FlowState, NsError> {
        let nv = self.space.n_velocity();
        let ns = self.space.n_scalar();
        let t_next = state.t + self.dt;
        if state.u.len() != nv || state.p.len() != self.space.n_pressure() {
            return Err(NsError::RejectedInput("state layout does not match space".into()));
        }
        self.system_matrix(&state.u)?;
        // right-hand side
        let mut rhs = vec![0.0; self.n_total];
        let mut mu = vec![0.0; nv];
        self.ops.m.matvec(&state.u, &mut mu);
        for r in 0..nv {
            rhs[r] = mu[r] / self.dt;
        }
        for node in 0..ns {
            if let Some((gx, gy)) = self.boundary_value(node, t_next) {
                rhs[self.space.ux_dof(node)] = gx;
                rhs[self.space.uy_dof(node)] = gy;
            }
        }
        // pressure rows stay zero

        self.strategy.prepare(&self.work, self.step_count, t_next)?;
        let sol = self.strategy.solve(&self.work, &rhs, t_next)?;
        self.step_count += 1;

        let u: Vec<f64> = sol[..nv].to_vec();
        let p: Vec<f64> = sol[nv..].to_vec();
        let next = FlowState { t: t_next, u, p };
        if !next.is_finite() {
            return Err(NsError::NonFinite(t_next));
        }
        let mut bu = vec![0.0; self.ops.b.nrows()];
        self.ops.b.matvec(&next.u, &mut bu);
        let res: f64 = bu.iter().map(|v| v * v).sum::<f64>().sqrt();
        let unorm: f64 = next.u.iter().map(|v| v * v).sum::<f64>().sqrt();
        if res > self.div_tol * unorm.max(1.0) {
            return Err(NsError::DivergenceResidual { t: t_next, res, tol: self.div_tol });
        }
        Ok(next)
    }

    pub fn forces(&self, state: &FlowState) -> Result<ForceSample, NsError> {
        Ok(compute_forces(self.mesh, self.space, &state.u, &state.p, self.ops.re)?)
    }
}

/// Run from `u0` to `t_final`, recording forces each step (when the mesh
/// has a cylinder) and snapshots at the requested times.
pub fn solve_transient(
    stepper: &mut Stepper,
    u0: &FlowState,
    t_final: f64,
    snapshot_times: &[f64],
) -> Result<(Vec<FlowState>, ForceHistory), NsError> {
    let dt = stepper.dt();
    if t_final < u0.t - 1e-12 {
        return Err(NsError::RejectedInput("final time before initial time".into()));
    }
    for &s in snapshot_times {
        if s < u0.t - 1e-12 || s > t_final + 1e-12 {
            return Err(NsError::RejectedInput(format!(
                "snapshot time {s} outside [{}, {t_final}]",
                u0.t
            )));
        }
    }
    let has_cylinder = stepper
        .mesh
        .boundary_edges
        .iter()
        .any(|&(_, _, tag)| tag == BoundaryTag::Cylinder);
    let mut history = ForceHistory::default();
    let mut snapshots = Vec::new();
    let mut want: Vec<f64> = snapshot_times.to_vec();
    want.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut state = u0.clone();
    let take_if_due = |state: &FlowState, want: &mut Vec<f64>, out: &mut Vec<FlowState>| {
        while let Some(&next) = want.first() {
            if state.t >= next - 0.5 * dt {
                out.push(state.clone());
                want.remove(0);
            } else {
                break;
            }
        }
    };
    take_if_due(&state, &mut want, &mut snapshots);
    let steps = ((t_final - u0.t) / dt).round() as usize;
    for _ in 0..steps {
        state = stepper.step(&state)?;
        if has_cylinder {
            let f = stepper.forces(&state)?;
            history.push(state.t, f.cd, f.cl);
        }
        take_if_due(&state, &mut want, &mut snapshots);
    }
    Ok((snapshots, history))
}

/// Strouhal number from the lift time series: dominant periodogram peak
/// (Hann window, zero padding, parabolic refinement) over the
/// post-transient window.
pub fn strouhal(history: &ForceHistory, d: f64, u_ave: f64) -> Result<f64, NsError> {
    if history.samples.len() < 16 {
        return Err(NsError::NoShedding("history too short".into()));
    }
    let t0 = history.samples.first().unwrap().0;
    let t1 = history.samples.last().unwrap().0;
    // discard the impulsive transient: fixed cutoff at t=2 when the run is
    // long enough, otherwise the first third
    let cut = if t1 > 3.0 { 2.0f64.min(t0 + (t1 - t0) / 3.0) } else { t0 + (t1 - t0) / 3.0 };
    let window: Vec<(f64, f64)> =
        history.samples.iter().filter(|s| s.0 >= cut).map(|s| (s.0, s.2)).collect();
    if window.len() < 16 {
        return Err(NsError::NoShedding("post-transient window too short".into()));
    }
    let n = window.len();
    let dt = (window[n - 1].0 - window[0].0) / (n - 1) as f64;
    let mean = window.iter().map(|s| s.1).sum::<f64>() / n as f64;
    // Hann window then zero-pad 8x for peak resolution
    let mut padded = (n * 8).next_power_of_two();
    if padded < 1024 {
        padded = 1024;
    }
    let mut buf: Vec<rustfft::num_complex::Complex<f64>> =
        vec![rustfft::num_complex::Complex::new(0.0, 0.0); padded];
    for (k, &(_, cl)) in window.iter().enumerate() {
        let w = 0.5
            * (1.0 - (2.0 * std::f64::consts::PI * k as f64 / (n - 1) as f64).cos());
        buf[k].re = w * (cl - mean);
    }
    rustfft::FftPlanner::new().plan_fft_forward(padded).process(&mut buf);
    let half = padded / 2;
    let power: Vec<f64> = buf[..half].iter().map(|c| c.norm_sqr()).collect();
    let (mut kmax, mut pmax) = (0usize, 0.0f64);
    for (k, &p) in power.iter().enumerate().skip(1) {
        if p > pmax {
            (kmax, pmax) = (k, p);
        }
    }
    let mut sorted = power.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = sorted[half / 2];
    if pmax <= 0.0 || pmax < 50.0 * median.max(1e-300) || kmax == 0 || kmax + 1 >= half {
        return Err(NsError::NoShedding("no dominant spectral peak".into()));
    }
    // parabolic interpolation on log power
    let (pa, pb, pc) = (power[kmax - 1].ln(), power[kmax].ln(), power[kmax + 1].ln());
    let denom = pa - 2.0 * pb + pc;
    let delta = if denom.abs() > 1e-300 { 0.5 * (pa - pc) / denom } else { 0.0 };
    let freq = (kmax as f64 + delta) / (padded as f64 * dt);
    let periods = freq * (window[n - 1].0 - window[0].0);
    if periods < 5.0 {
        return Err(NsError::NoShedding(format!(
            "only {periods:.1} shedding periods in the analysis window"
        )));
    }
    Ok(freq * d / u_ave)
}

/// Plain-text snapshot: `u v p` per scalar velocity node; pressure column
/// is zero past the vertex rows (P1 has vertex values only).
pub fn write_field(space: &FemSpace, state: &FlowState) -> String {
    let ns = space.n_scalar();
    let mut s = format!("field2d v1\n{ns} t={:.9}\n", state.t);
    for i in 0..ns {
        let p = if i < state.p.len() { state.p[i] } else { 0.0 };
        s.push_str(&format!(
            "{:.12e} {:.12e} {:.12e}\n",
            state.u[space.ux_dof(i)],
            state.u[space.uy_dof(i)],
            p
        ));
    }
    s
}

pub fn read_field(space: &FemSpace, text: &str) -> Result<FlowState, NsError> {
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    if header.trim() != "field2d v1" {
        return Err(NsError::RejectedInput(format!("bad field header '{header}'")));
    }
    let meta = lines.next().unwrap_or_default();
    let mut it = meta.split_whitespace();
    let ns: usize = it
        .next()
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| NsError::RejectedInput("bad field node count".into()))?;
    let t: f64 = it
        .next()
        .and_then(|v| v.strip_prefix("t="))
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| NsError::RejectedInput("bad field time".into()))?;
    if ns != space.n_scalar() {
        return Err(NsError::RejectedInput(format!(
            "field has {ns} nodes, space has {}",
            space.n_scalar()
        )));
    }
    let mut state = FlowState::zeros(space, t);
    for i in 0..ns {
        let line = lines
            .next()
            .ok_or_else(|| NsError::RejectedInput(format!("missing field row {i}")))?;
        let vals: Vec<f64> = line.split_whitespace().filter_map(|v| v.parse().ok()).collect();
        if vals.len() != 3 {
            return Err(NsError::RejectedInput(format!("bad field row {i}")));
        }
        state.u[space.ux_dof(i)] = vals[0];
        state.u[space.uy_dof(i)] = vals[1];
        if i < state.p.len() {
            state.p[i] = vals[2];
        }
    }
    Ok(state)
}
