//! Velocity-tracking boundary control of the cylinder spin: objective
//! evaluation, discrete adjoint of the semi-implicit stepping scheme,
//! control gradient, and a step-halving descent loop.

use crate::linalg::SparseLu;
use crate::mesh_fem::{
    p2_grad, p2_shape, triangle_rule, AssembledOperators, BoundaryTag, ChannelGeometry,
    ElementGeom, FemSpace, Mesh,
};
use crate::noise::{BoundaryRealization, GaussianSample, NoiseBasis, StochasticInputSpec};
use crate::ns_solver::{FlowState, NsError, Stepper, StepperOptions};
use crate::pce::ChaosCoefficients;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ControlError {
    #[error("input rejected: {0}")]
    RejectedInput(String),
    #[error("state and target expansions use different bases: {0}")]
    BasisMismatch(String),
    #[error("missing state snapshots: {0}")]
    Checkpoint(String),
    #[error("step size underflow below 1e-12 after {trials} trials, best K = {best:.6e}")]
    Stall { trials: usize, best: f64 },
    #[error(transparent)]
    Solver(#[from] NsError),
}

/// Control coefficients on a uniform time grid. Row n holds the chaos
/// coefficients of the spin at t = n dt; by default only the mean
/// coefficient (column 0) is active.
#[derive(Debug, Clone)]
pub struct ControlTrajectory {
    pub dt: f64,
    pub coeffs: Vec<Vec<f64>>,
}

impl ControlTrajectory {
    pub fn mean_only(dt: f64, values: Vec<f64>) -> Self {
        Self { dt, coeffs: values.into_iter().map(|v| vec![v]).collect() }
    }

    pub fn zeros(dt: f64, steps: usize) -> Self {
        Self { dt, coeffs: vec![vec![0.0]; steps + 1] }
    }

    pub fn len(&self) -> usize {
        self.coeffs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coeffs.is_empty()
    }

    pub fn mean(&self, n: usize) -> f64 {
        self.coeffs[n.min(self.coeffs.len() - 1)][0]
    }

    /// Mean spin at an arbitrary time: nearest grid value.
    pub fn mean_at(&self, t: f64) -> f64 {
        self.mean((t / self.dt).round().max(0.0) as usize)
    }

    pub fn max_abs_mean(&self) -> f64 {
        self.coeffs.iter().map(|c| c[0].abs()).fold(0.0, f64::max)
    }

    pub fn csv(&self) -> String {
        let mut s = String::from("t,phi_mean\n");
        for (n, c) in self.coeffs.iter().enumerate() {
            s.push_str(&format!("{:.6},{:.10e}\n", n as f64 * self.dt, c[0]));
        }
        s
    }
}

/// Adjoint velocity/pressure multipliers, stored backward from t = T:
/// slot 0 is the terminal condition (exactly zero), slot k the multiplier
/// of the step ending at t = T - (k-1) dt.
#[derive(Debug, Clone)]
pub struct AdjointState {
    pub theta: Vec<Vec<f64>>,
}

impl AdjointState {
    /// Multiplier of the step ending at time index n (1-based), or None
    /// for n = 0 which has no constraint.
    pub fn at_step(&self, n: usize, steps: usize) -> Option<&Vec<f64>> {
        if n == 0 || n > steps {
            None
        } else {
            Some(&self.theta[steps + 1 - n])
        }
    }
}

/// The deterministic-per-sample control problem: discretization, stochastic
/// input description and the retained samples over which expectations run.
pub struct ControlProblem<'a> {
    pub mesh: &'a Mesh,
    pub space: &'a FemSpace,
    pub ops: &'a AssembledOperators,
    pub geom: ChannelGeometry,
    pub spec: StochasticInputSpec,
    pub noise: NoiseBasis,
    pub samples: Vec<GaussianSample>,
    pub dt: f64,
    pub t_final: f64,
    /// Velocity part of the initial state; None means start from rest.
    pub u0: Option<Vec<f64>>,
}

impl<'a> ControlProblem<'a> {
    pub fn steps(&self) -> usize {
        (self.t_final / self.dt).round() as usize
    }

    /// Trapezoid weight of time index n.
    fn weight(&self, n: usize) -> f64 {
        if n == 0 || n == self.steps() { 0.5 * self.dt } else { self.dt }
    }

    fn boundary(&self, xi: &GaussianSample, control: &ControlTrajectory) -> BoundaryRealization {
        let (a, s1, s2) = (self.spec.inlet_amplitude, self.spec.sigma_inlet, self.spec.sigma_spin);
        let h = self.geom.height;
        let (basis_i, basis_s) = (self.noise.clone(), self.noise.clone());
        let (xi_i, xi_s) = (xi.xi.clone(), xi.xi.clone());
        let ctl = control.clone();
        BoundaryRealization::new(
            move |y: f64, t: f64| {
                let w = if s1 != 0.0 { basis_i.white_noise(&xi_i, t) } else { 0.0 };
                (a + s1 * w) * y * (h - y)
            },
            move |t: f64| {
                let w = if s2 != 0.0 { basis_s.white_noise(&xi_s, t) } else { 0.0 };
                ctl.mean_at(t) + s2 * w
            },
        )
    }

    /// Forward solve for one sample under the given control, storing every
    /// step of the trajectory.
    pub fn forward(
        &self,
        xi: &GaussianSample,
        control: &ControlTrajectory,
    ) -> Result<Vec<FlowState>, ControlError> {
        if control.len() != self.steps() + 1 {
            return Err(ControlError::RejectedInput(format!(
                "control has {} grid values, expected {}",
                control.len(),
                self.steps() + 1
            )));
        }
        let opts = StepperOptions {
            dt: self.dt,
            strategy: "direct".into(),
            ..Default::default()
        };
        let bc = self.boundary(xi, control);
        let mut stepper =
            Stepper::new(self.mesh, self.space, self.ops, self.geom, bc, &opts)?;
        let mut start = FlowState::zeros(self.space, 0.0);
        if let Some(u0) = &self.u0 {
            if u0.len() != start.u.len() {
                return Err(ControlError::RejectedInput(format!(
                    "initial state has {} velocity values, expected {}",
                    u0.len(),
                    start.u.len()
                )));
            }
            start.u.copy_from_slice(u0);
        }
        let mut traj = vec![start];
        for _ in 0..self.steps() {
            let next = stepper.step(traj.last().unwrap())?;
            traj.push(next);
        }
        Ok(traj)
    }
}

/// Objective in chaos-coefficient space: with a mass-orthonormal basis the
/// spatial inner product collapses to a plain sum of squared coefficient
/// differences. The target is constant in time.
pub fn evaluate_objective(
    state: &[ChaosCoefficients],
    target: &ChaosCoefficients,
    beta: f64,
    control: &ControlTrajectory,
) -> Result<f64, ControlError> {
    if state.is_empty() {
        return Err(ControlError::RejectedInput("empty state trajectory".into()));
    }
    if state.len() != control.len() {
        return Err(ControlError::RejectedInput(format!(
            "state trajectory has {} instants, control grid {}",
            state.len(),
            control.len()
        )));
    }
    let dt = control.dt;
    let last = state.len() - 1;
    let mut k = 0.0;
    for (n, c) in state.iter().enumerate() {
        if c.p != target.p || c.m != target.m || c.basis_ref != target.basis_ref {
            return Err(ControlError::BasisMismatch(format!(
                "instant {n}: {}x{} vs {}x{}",
                c.p, c.m, target.p, target.m
            )));
        }
        let w = if n == 0 || n == last { 0.5 * dt } else { dt };
        let track: f64 = c
            .data
            .iter()
            .zip(&target.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        let pen: f64 = control.coeffs[n].iter().map(|v| v * v).sum();
        k += 0.5 * w * (track + beta * pen);
    }
    Ok(k)
}

/// Mean tracking-plus-penalty objective over the problem's samples, with
/// the tracking misfit measured in the velocity mass norm against a
/// time-constant nodal target.
pub fn objective_fields(
    problem: &ControlProblem,
    trajectories: &[Vec<FlowState>],
    target: &[f64],
    beta: f64,
    control: &ControlTrajectory,
) -> Result<f64, ControlError> {
    let nv = problem.space.n_velocity();
    if target.len() != nv {
        return Err(ControlError::RejectedInput(format!(
            "target has {} dofs, expected {nv}",
            target.len()
        )));
    }
    if trajectories.len() != problem.samples.len() {
        return Err(ControlError::Checkpoint(format!(
            "{} trajectories for {} samples",
            trajectories.len(),
            problem.samples.len()
        )));
    }
    let steps = problem.steps();
    let mut total = 0.0;
    for traj in trajectories {
        if traj.len() != steps + 1 {
            return Err(ControlError::Checkpoint(format!(
                "trajectory has {} snapshots, expected {}",
                traj.len(),
                steps + 1
            )));
        }
        for (n, state) in traj.iter().enumerate() {
            let diff: Vec<f64> =
                state.u.iter().zip(target).map(|(a, b)| a - b).collect();
            total += 0.5 * problem.weight(n) * problem.ops.m.bilinear(&diff, &diff);
        }
    }
    let mut k = total / trajectories.len() as f64;
    for n in 0..=steps {
        let pen: f64 = control.coeffs[n].iter().map(|v| v * v).sum();
        k += 0.5 * problem.weight(n) * beta * pen;
    }
    Ok(k)
}

/// q_k = d/du_k [ lambda . (u . grad) w ]: the adjoint of the convection
/// Jacobian with respect to the advecting field, applied to a multiplier
/// restricted to the free velocity rows.
fn convection_jacobian_adjoint(
    mesh: &Mesh,
    space: &FemSpace,
    w: &[f64],
    lam: &[f64],
) -> Vec<f64> {
    let ns = space.n_scalar();
    let rule = triangle_rule(5);
    let mut out = vec![0.0; 2 * ns];
    for t in 0..mesh.triangles.len() {
        let geom = ElementGeom::of(mesh, t);
        let dofs = &space.tri_dofs[t];
        for &([xr, yr], wq) in rule {
            let shape = p2_shape(xr, yr);
            let grads = p2_grad(xr, yr);
            // velocity gradient dw_i/dx_c and multiplier value at the point
            let mut dw = [[0.0; 2]; 2];
            let mut lv = [0.0; 2];
            for (a, &dof) in dofs.iter().enumerate() {
                let g = geom.grad_physical(grads[a]);
                for i in 0..2 {
                    let val = w[i * ns + dof];
                    dw[i][0] += val * g[0];
                    dw[i][1] += val * g[1];
                    lv[i] += lam[i * ns + dof] * shape[a];
                }
            }
            let scale = wq * geom.det;
            for (a, &dof) in dofs.iter().enumerate() {
                for c in 0..2 {
                    let sens = lv[0] * dw[0][c] + lv[1] * dw[1][c];
                    out[c * ns + dof] += scale * shape[a] * sens;
                }
            }
        }
    }
    out
}

/// Exact discrete adjoint of the forward stepping scheme: one transposed
/// saddle solve per step, backward from t = T. Linear in the multiplier.
pub fn solve_adjoint(
    problem: &ControlProblem,
    trajectory: &[FlowState],
    target: &[f64],
) -> Result<AdjointState, ControlError> {
    let steps = problem.steps();
    if trajectory.len() != steps + 1 {
        return Err(ControlError::Checkpoint(format!(
            "trajectory has {} snapshots, expected {}",
            trajectory.len(),
            steps + 1
        )));
    }
    let space = problem.space;
    let nv = space.n_velocity();
    let ns = space.n_scalar();
    let n_total = nv + problem.space.n_pressure();
    // matrix assembly reuses the stepper's pinned pattern; boundary values
    // never enter the matrix, only the right-hand side, so any realization
    // works here
    let opts = StepperOptions { dt: problem.dt, strategy: "direct".into(), ..Default::default() };
    let mut stepper = Stepper::new(
        problem.mesh,
        space,
        problem.ops,
        problem.geom,
        BoundaryRealization::quiescent(),
        &opts,
    )?;
    let free: Vec<bool> = (0..nv).map(|k| !space.is_dirichlet_node(k % ns)).collect();
    let mut theta = vec![vec![0.0; n_total]];
    let mut lu: Option<SparseLu> = None;
    for n1 in (1..=steps).rev() {
        // coupling with the already-solved multiplier of step n1+1
        let mut q = vec![0.0; nv];
        if n1 < steps {
            let succ = theta.last().unwrap();
            let mut lam_free = vec![0.0; nv];
            for k in 0..nv {
                if free[k] {
                    lam_free[k] = succ[k];
                }
            }
            q = convection_jacobian_adjoint(
                problem.mesh,
                space,
                &trajectory[n1 + 1].u,
                &lam_free,
            );
            let mut mw = vec![0.0; nv];
            problem.ops.m.matvec(&lam_free, &mut mw);
            for k in 0..nv {
                q[k] -= mw[k] / problem.dt;
            }
        }
        // tracking source at time index n1
        let diff: Vec<f64> =
            trajectory[n1].u.iter().zip(target).map(|(a, b)| a - b).collect();
        let mut md = vec![0.0; nv];
        problem.ops.m.matvec(&diff, &mut md);
        let w = problem.weight(n1);
        let mut rhs = vec![0.0; n_total];
        for k in 0..nv {
            rhs[k] = -(w * md[k] + q[k]);
        }
        let jt = stepper.system_matrix(&trajectory[n1 - 1].u)?.transpose();
        match &mut lu {
            None => lu = Some(SparseLu::factor(&jt).map_err(|e| {
                ControlError::RejectedInput(format!("adjoint factorization failed: {e}"))
            })?),
            Some(f) => f.refactor(&jt).map_err(|e| {
                ControlError::RejectedInput(format!("adjoint factorization failed: {e}"))
            })?,
        }
        let lam = lu.as_ref().unwrap().solve(&rhs);
        if lam.iter().any(|v| !v.is_finite()) {
            return Err(ControlError::RejectedInput(format!(
                "non-finite adjoint at backward step {n1}"
            )));
        }
        theta.push(lam);
    }
    Ok(AdjointState { theta })
}

/// Gradient of the discrete objective with respect to the mean control
/// value at each grid time: the penalty term plus the multipliers of the
/// cylinder Dirichlet rows weighted by the spin velocity pattern.
pub fn control_gradient(
    problem: &ControlProblem,
    adjoint: &AdjointState,
    control: &ControlTrajectory,
    beta: f64,
) -> Vec<f64> {
    let steps = problem.steps();
    let space = problem.space;
    let ns = space.n_scalar();
    let (x0, y0) = problem.geom.cylinder_center;
    let mut grad = vec![0.0; steps + 1];
    for n in 0..=steps {
        grad[n] = beta * problem.weight(n) * control.mean(n);
        if let Some(lam) = adjoint.at_step(n, steps) {
            let mut bnd = 0.0;
            for node in 0..ns {
                if space.node_tag[node] == Some(BoundaryTag::Cylinder) {
                    let [x, y] = space.node_coords[node];
                    bnd += lam[space.ux_dof(node)] * (-(y - y0))
                        + lam[space.uy_dof(node)] * (x - x0);
                }
            }
            grad[n] -= bnd;
        }
    }
    grad
}

/// Descent step for the mean control: delta phi = -lambda * gradient.
pub fn descent_direction(gradient: &[f64], lambda: f64) -> Vec<f64> {
    gradient.iter().map(|g| -lambda * g).collect()
}

/// One row of the optimization log.
#[derive(Debug, Clone)]
pub struct OptimizeTrial {
    pub iter: usize,
    pub lambda: f64,
    pub objective: f64,
    pub accepted: bool,
}

#[derive(Debug)]
pub struct OptimizeReport {
    pub control: ControlTrajectory,
    pub history: Vec<OptimizeTrial>,
}

impl OptimizeReport {
    /// Objective values of the accepted iterates, strictly decreasing.
    pub fn accepted(&self) -> Vec<f64> {
        self.history.iter().filter(|t| t.accepted).map(|t| t.objective).collect()
    }

    pub fn csv(&self) -> String {
        let mut s = String::from("iter,lambda,K,accepted\n");
        for t in &self.history {
            s.push_str(&format!(
                "{},{:.6e},{:.10e},{}\n",
                t.iter, t.lambda, t.objective, t.accepted as u8
            ));
        }
        s
    }
}

fn mean_objective_and_trajs(
    problem: &ControlProblem,
    control: &ControlTrajectory,
    target: &[f64],
    beta: f64,
) -> Result<(f64, Vec<Vec<FlowState>>), ControlError> {
    let trajs: Vec<Vec<FlowState>> = problem
        .samples
        .iter()
        .map(|xi| problem.forward(xi, control))
        .collect::<Result<_, _>>()?;
    let k = objective_fields(problem, &trajs, target, beta, control)?;
    Ok((k, trajs))
}

/// Gradient-descent loop with step halving: adjoint per sample, averaged
/// gradient, accept only strictly decreasing objectives, halve the step on
/// rejection, stop on relative decrease below `eps_tol`.
pub fn optimize(
    problem: &ControlProblem,
    target: &[f64],
    beta: f64,
    initial: &ControlTrajectory,
    lambda0: f64,
    eps_tol: f64,
    max_iters: usize,
) -> Result<OptimizeReport, ControlError> {
    if !(lambda0 > 0.0) || !(eps_tol > 0.0) {
        return Err(ControlError::RejectedInput(
            "lambda0 and eps_tol must be positive".into(),
        ));
    }
    if problem.samples.is_empty() {
        return Err(ControlError::RejectedInput("no samples".into()));
    }
    let mut control = initial.clone();
    let mut lambda = lambda0;
    let (mut k, mut trajs) = mean_objective_and_trajs(problem, &control, target, beta)?;
    let mut history = vec![OptimizeTrial { iter: 0, lambda, objective: k, accepted: true }];
    if k == 0.0 {
        return Ok(OptimizeReport { control, history });
    }
    for iter in 1..=max_iters {
        // averaged gradient over the retained samples
        let mut grad = vec![0.0; problem.steps() + 1];
        for traj in &trajs {
            let adj = solve_adjoint(problem, traj, target)?;
            let g = control_gradient(problem, &adj, &control, beta);
            for (a, b) in grad.iter_mut().zip(&g) {
                *a += b / problem.samples.len() as f64;
            }
        }
        // step halving until the objective decreases
        let accepted = loop {
            let delta = descent_direction(&grad, lambda);
            let mut trial = control.clone();
            for (c, d) in trial.coeffs.iter_mut().zip(&delta) {
                c[0] += d;
            }
            let (k_new, trajs_new) = mean_objective_and_trajs(problem, &trial, target, beta)?;
            if k_new < k {
                history.push(OptimizeTrial { iter, lambda, objective: k_new, accepted: true });
                let decrease = (k - k_new) / k;
                control = trial;
                trajs = trajs_new;
                k = k_new;
                // grow the step again so an early conservative choice does
                // not persist for the rest of the descent
                lambda *= 2.0;
                break decrease > eps_tol;
            }
            history.push(OptimizeTrial { iter, lambda, objective: k_new, accepted: false });
            lambda *= 0.5;
            if lambda < 1e-12 {
                return Err(ControlError::Stall { trials: history.len(), best: k });
            }
        };
        if !accepted {
            break;
        }
    }
    Ok(OptimizeReport { control, history })
}

/// Target construction modes.
pub enum TargetMode<'a> {
    /// All-zero target: minimizes kinetic energy.
    ZeroField,
    /// Snapshot of the uncontrolled deterministic flow (zero spin, mean
    /// inlet) at the given time, before shedding develops.
    SteadyUncontrolled { t_snapshot: f64 },
    /// Caller-provided nodal velocity field.
    Custom(&'a [f64]),
}

/// Build the nodal mean target field for the tracking objective.
pub fn build_target(problem: &ControlProblem, mode: TargetMode) -> Result<Vec<f64>, ControlError> {
    let nv = problem.space.n_velocity();
    match mode {
        TargetMode::ZeroField => Ok(vec![0.0; nv]),
        TargetMode::Custom(u) => {
            if u.len() != nv {
                return Err(ControlError::RejectedInput(format!(
                    "custom target has {} dofs, expected {nv}",
                    u.len()
                )));
            }
            Ok(u.to_vec())
        }
        TargetMode::SteadyUncontrolled { t_snapshot } => {
            let steps = (t_snapshot / problem.dt).round().max(0.0) as usize;
            let quiet = ControlProblem {
                mesh: problem.mesh,
                space: problem.space,
                ops: problem.ops,
                geom: problem.geom,
                spec: StochasticInputSpec {
                    sigma_inlet: 0.0,
                    sigma_spin: 0.0,
                    spin_amplitude: 0.0,
                    ..problem.spec.clone()
                },
                noise: problem.noise.clone(),
                samples: vec![GaussianSample::zeros(problem.noise.truncation)],
                dt: problem.dt,
                t_final: steps as f64 * problem.dt,
                u0: problem.u0.clone(),
            };
            let control = ControlTrajectory::zeros(problem.dt, steps);
            let traj = quiet.forward(&quiet.samples[0], &control)?;
            Ok(traj.last().unwrap().u.clone())
        }
    }
}
