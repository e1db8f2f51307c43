//! Command-line driver. Five subcommands share one configuration format:
//! `bench-det` (deterministic benchmark run), `ensemble` (stochastic
//! ensemble with snapshot archive), `build-basis` (multi-fidelity recovery),
//! `optimize` (adjoint descent on the cylinder spin) and `verify` (built-in
//! property checks). Exit codes: 0 success, 2 configuration error,
//! 3 numerical failure.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rayon::prelude::*;

use crate::config::{ConfigError, ExperimentConfig};
use crate::control::{
    build_target, optimize, ControlError, ControlProblem, ControlTrajectory, TargetMode,
};
use crate::cs_solver::{solve_bp, sparsity_count, BpOptions, CsError};
use crate::datadriven_basis::{mdcs_pipeline, BasisError, FidelityPair, PipelineOptions};
use crate::mesh_fem::{assemble_operators, generate_channel_mesh, FemSpace, MeshError};
use crate::noise::{manifest_csv, realize_boundary, GaussianSample, NoiseBasis};
use crate::ns_solver::{
    solve_transient, strouhal, write_field, FlowState, NsError, Stepper, StepperOptions,
};
use crate::pce::gauss_hermite;

const REF_CD: f64 = 2.9890;
const REF_CL: f64 = 1.0996;
const REF_ST: f64 = 0.1143;

#[derive(Parser)]
#[command(name = "cylflow", version, about = "Stochastic channel flow toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Configuration file (`section.key = value` lines); defaults apply if omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory, overriding `run.out_dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Root seed, overriding `run.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads, overriding `run.jobs`.
    #[arg(long, global = true)]
    jobs: Option<usize>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Deterministic run with mean inputs; forces, snapshots and a
    /// benchmark report against the reference coefficients.
    BenchDet,
    /// Stochastic ensemble: sample manifest plus per-sample snapshots.
    Ensemble,
    /// Multi-fidelity basis recovery: eigenvalue tables, mode archive and
    /// sparsity report.
    BuildBasis,
    /// Adjoint-based descent on the cylinder spin control.
    Optimize,
    /// Built-in property checks; fails with exit 3 if any check fails.
    Verify,
}

impl Command {
    fn dir_name(self) -> &'static str {
        match self {
            Command::BenchDet => "bench-det",
            Command::Ensemble => "ensemble",
            Command::BuildBasis => "build-basis",
            Command::Optimize => "optimize",
            Command::Verify => "verify",
        }
    }
}

enum RunError {
    Config(String),
    Numerical(String),
}

impl From<ConfigError> for RunError {
    fn from(e: ConfigError) -> Self {
        RunError::Config(e.to_string())
    }
}
impl From<MeshError> for RunError {
    fn from(e: MeshError) -> Self {
        match e {
            MeshError::RejectedInput(_) | MeshError::Configuration(_) => {
                RunError::Config(e.to_string())
            }
            _ => RunError::Numerical(e.to_string()),
        }
    }
}
impl From<NsError> for RunError {
    fn from(e: NsError) -> Self {
        match e {
            NsError::RejectedInput(_) => RunError::Config(e.to_string()),
            _ => RunError::Numerical(e.to_string()),
        }
    }
}
impl From<BasisError> for RunError {
    fn from(e: BasisError) -> Self {
        match e {
            BasisError::RejectedInput(_) => RunError::Config(e.to_string()),
            _ => RunError::Numerical(e.to_string()),
        }
    }
}
impl From<ControlError> for RunError {
    fn from(e: ControlError) -> Self {
        match e {
            ControlError::RejectedInput(_) => RunError::Config(e.to_string()),
            _ => RunError::Numerical(e.to_string()),
        }
    }
}
impl From<CsError> for RunError {
    fn from(e: CsError) -> Self {
        RunError::Numerical(e.to_string())
    }
}

/// Named text artifacts, buffered so nothing lands on disk unless the whole
/// computation succeeds; on failure the buffer goes to a quarantine folder.
struct Artifacts {
    files: Vec<(String, String)>,
}

impl Artifacts {
    fn new() -> Self {
        Self { files: Vec::new() }
    }

    fn add(&mut self, name: impl Into<String>, content: String) {
        self.files.push((name.into(), content));
    }

    fn write_all(&self, dir: &Path) -> std::io::Result<()> {
        std::fs::create_dir_all(dir)?;
        for (name, content) in &self.files {
            std::fs::write(dir.join(name), content)?;
        }
        Ok(())
    }
}

pub fn main() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // clap prints help/version on stdout with success status
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(RunError::Config(msg)) => {
            eprintln!("configuration error: {msg}");
            2
        }
        Err(RunError::Numerical(msg)) => {
            eprintln!("numerical failure: {msg}");
            3
        }
    }
}

fn run(cli: &Cli) -> Result<(), RunError> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            return Err(RunError::Config("run.jobs must be at least 1".into()));
        }
        cfg.jobs = jobs;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.display().to_string();
    }
    cfg.validate().map_err(|errs| RunError::Config(errs.join("\n")))?;

    let out_dir = PathBuf::from(&cfg.out_dir).join(cli.command.dir_name());
    let mut artifacts = Artifacts::new();
    artifacts.add("resolved-config.txt", cfg.serialize());

    let result = match cli.command {
        Command::BenchDet => bench_det(&cfg, &mut artifacts),
        Command::Ensemble => ensemble(&cfg, &mut artifacts),
        Command::BuildBasis => build_basis(&cfg, &mut artifacts),
        Command::Optimize => run_optimize(&cfg, &mut artifacts),
        Command::Verify => verify(&cfg, &mut artifacts),
    };
    match result {
        Ok(()) => {
            artifacts
                .write_all(&out_dir)
                .map_err(|e| RunError::Numerical(format!("cannot write outputs: {e}")))?;
            println!("wrote {} file(s) to {}", artifacts.files.len(), out_dir.display());
            Ok(())
        }
        Err(e) => {
            let quarantine = out_dir.join("quarantine");
            if artifacts.files.len() > 1 && artifacts.write_all(&quarantine).is_ok() {
                eprintln!("partial outputs quarantined in {}", quarantine.display());
            }
            Err(e)
        }
    }
}

fn snapshot_name(prefix: &str, t: f64) -> String {
    format!("{prefix}_t{t:.4}.dat")
}

fn in_range_snapshots(cfg: &ExperimentConfig) -> Vec<f64> {
    cfg.snapshot_times
        .iter()
        .copied()
        .filter(|&t| t <= cfg.t_final + 1e-12)
        .collect()
}

fn bench_det(cfg: &ExperimentConfig, artifacts: &mut Artifacts) -> Result<(), RunError> {
    let mesh = generate_channel_mesh(&cfg.geometry, cfg.mesh_h, cfg.mesh_band)?;
    let space = FemSpace::build(&mesh);
    let ops = assemble_operators(&mesh, &space, cfg.re)?;
    println!(
        "bench-det: {} elements, {} velocity nodes, dt={}, horizon={}",
        mesh.triangles.len(),
        space.n_scalar(),
        cfg.dt,
        cfg.t_final
    );
    let spec = cfg.input_spec();
    spec.validate().map_err(|e| RunError::Config(e.to_string()))?;
    let noise = NoiseBasis::new(cfg.t_final.max(cfg.dt), cfg.noise_truncation);
    let bc = realize_boundary(&spec, &noise, &GaussianSample::zeros(cfg.noise_truncation), cfg.geometry.height)
        .map_err(|e| RunError::Config(e.to_string()))?;
    let opts = StepperOptions {
        dt: cfg.dt,
        strategy: cfg.step_strategy.clone(),
        ..Default::default()
    };
    let mut stepper = Stepper::new(&mesh, &space, &ops, cfg.geometry, bc, &opts)?;
    let u0 = FlowState::zeros(&space, 0.0);
    let snaps = in_range_snapshots(cfg);
    let (states, forces) = solve_transient(&mut stepper, &u0, cfg.t_final, &snaps)?;

    artifacts.add("forces.csv", forces.csv());
    for state in &states {
        artifacts.add(snapshot_name("field", state.t), write_field(&space, state));
    }

    let h = cfg.geometry.height;
    let u_ave = cfg.inlet_amplitude * h * h / 6.0;
    let d = cfg.geometry.cylinder_diameter;
    let cutoff = if cfg.t_final > 3.0 { 2.0 } else { cfg.t_final / 3.0 };
    let cd_mean = forces.mean_after(cutoff, false);
    let cl_max = forces
        .samples
        .iter()
        .filter(|(t, _, _)| *t >= cutoff)
        .map(|(_, _, cl)| cl.abs())
        .fold(f64::NEG_INFINITY, f64::max);
    let st = strouhal(&forces, d, u_ave);

    let mut report = String::new();
    report.push_str(&format!(
        "elements = {}\ndt = {}\nhorizon = {}\nu_ave = {u_ave:.6}\n",
        mesh.triangles.len(),
        cfg.dt,
        cfg.t_final
    ));
    let dev = |v: f64, r: f64| (v - r).abs() / r;
    match cd_mean {
        Some(cd) => report.push_str(&format!(
            "CD_mean = {cd:.4} (reference {REF_CD}, deviation {:.1}%)\n",
            100.0 * dev(cd, REF_CD)
        )),
        None => report.push_str("CD_mean = unavailable (no force samples past cutoff)\n"),
    }
    if cl_max.is_finite() {
        report.push_str(&format!(
            "CL_max = {cl_max:.4} (reference {REF_CL}, deviation {:.1}%)\n",
            100.0 * dev(cl_max, REF_CL)
        ));
    } else {
        report.push_str("CL_max = unavailable (no force samples past cutoff)\n");
    }
    match st {
        Ok(st) => report.push_str(&format!(
            "St = {st:.4} (reference {REF_ST}, deviation {:.1}%)\n",
            100.0 * dev(st, REF_ST)
        )),
        Err(e) => report.push_str(&format!("St = unavailable ({e})\n")),
    }
    print!("{report}");
    artifacts.add("bench_report.txt", report);
    Ok(())
}

fn ensemble(cfg: &ExperimentConfig, artifacts: &mut Artifacts) -> Result<(), RunError> {
    let mesh = generate_channel_mesh(&cfg.geometry, cfg.mesh_h, cfg.mesh_band)?;
    let space = FemSpace::build(&mesh);
    let ops = assemble_operators(&mesh, &space, cfg.re)?;
    let spec = cfg.input_spec();
    spec.validate().map_err(|e| RunError::Config(e.to_string()))?;
    let noise = NoiseBasis::new(cfg.t_final.max(cfg.dt), cfg.noise_truncation);
    let snaps = in_range_snapshots(cfg);
    let samples: Vec<GaussianSample> = (0..cfg.n_samples as u64)
        .map(|id| GaussianSample::draw(cfg.seed, id, cfg.noise_truncation))
        .collect();
    artifacts.add("manifest.csv", manifest_csv(&samples));
    println!(
        "ensemble: {} samples on {} elements, {} snapshot(s) each",
        cfg.n_samples,
        mesh.triangles.len(),
        snaps.len()
    );

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.jobs)
        .build()
        .map_err(|e| RunError::Config(format!("cannot build worker pool: {e}")))?;
    let runs: Vec<Result<Vec<(String, String)>, NsError>> = pool.install(|| {
        samples
            .par_iter()
            .map(|xi| {
                let bc = realize_boundary(&spec, &noise, xi, cfg.geometry.height)
                    .map_err(|e| NsError::RejectedInput(e.to_string()))?;
                let opts = StepperOptions {
                    dt: cfg.dt,
                    strategy: cfg.step_strategy.clone(),
                    ..Default::default()
                };
                let mut stepper = Stepper::new(&mesh, &space, &ops, cfg.geometry, bc, &opts)?;
                let u0 = FlowState::zeros(&space, 0.0);
                let (states, forces) = solve_transient(&mut stepper, &u0, cfg.t_final, &snaps)?;
                let prefix = format!("sample_{:04}", xi.sample_id);
                let mut files = vec![(format!("{prefix}_forces.csv"), forces.csv())];
                for state in &states {
                    files.push((snapshot_name(&prefix, state.t), write_field(&space, state)));
                }
                Ok(files)
            })
            .collect()
    });
    for run in runs {
        for (name, content) in run? {
            artifacts.add(name, content);
        }
    }
    Ok(())
}

fn build_basis(cfg: &ExperimentConfig, artifacts: &mut Artifacts) -> Result<(), RunError> {
    let pair = FidelityPair::channel(cfg.geometry, cfg.mesh_h_coarse, cfg.mesh_h, cfg.mesh_band)?;
    println!(
        "build-basis: coarse {} / fine {} elements, budgets {}+{}",
        pair.coarse_mesh.triangles.len(),
        pair.fine_mesh.triangles.len(),
        cfg.budget_coarse,
        cfg.budget_fine
    );
    let spec = cfg.input_spec();
    let popts = PipelineOptions {
        dt: cfg.dt,
        re: cfg.re,
        seed: cfg.seed,
        noise_truncation: cfg.noise_truncation,
        chaos_order: cfg.chaos_order,
        eps_rel_coarse: cfg.eps_rel_coarse,
        eps_rel_fine: cfg.eps_rel_fine,
        m_max: cfg.m_max,
        energy_threshold: cfg.energy_threshold,
        bp: BpOptions { strategy: cfg.bp_strategy.clone(), ..Default::default() },
        step_strategy: cfg.step_strategy.clone(),
    };
    let snaps = in_range_snapshots(cfg);
    let result = mdcs_pipeline(
        &pair,
        &spec,
        (cfg.budget_coarse, cfg.budget_fine),
        &snaps,
        cfg.window,
        &popts,
    )?;

    let mut summary = format!(
        "solves: coarse = {}, fine = {}, total = {}\nchaos basis size = {}\n",
        result.solves_coarse,
        result.solves_fine,
        result.total_solves(),
        result.set.len()
    );
    let mut sparsity = String::from("window,t,component,tau,nnz\n");
    for (w, wr) in result.windows.iter().enumerate() {
        summary.push_str(&format!(
            "window {w}: [{:.3}, {:.3}], representative t = {:.3}\n",
            wr.t_start, wr.t_end, wr.t_rep
        ));
        for c in 0..2 {
            summary.push_str(&format!(
                "  component {c}: {} KL mode(s), energy ratio {:.6}\n",
                wr.kl[c].len(),
                wr.kl[c].energy_ratio
            ));
            artifacts.add(format!("eigenvalues_w{w}_c{c}.csv"), wr.kl[c].eigenvalues_csv());
            let mut modes = String::new();
            for mode in &wr.modes[c] {
                let line: Vec<String> = mode.iter().map(|v| format!("{v:.9e}")).collect();
                modes.push_str(&line.join(" "));
                modes.push('\n');
            }
            artifacts.add(format!("modes_w{w}_c{c}.txt"), modes);
        }
        for line in &wr.reports {
            summary.push_str(&format!("  note: {line}\n"));
        }
        for (k, &t) in wr.times.iter().enumerate() {
            for c in 0..2 {
                for &tau in &cfg.tau {
                    let nnz = sparsity_count(&wr.coeffs[k][c].data, tau);
                    sparsity.push_str(&format!("{w},{t},{c},{tau},{nnz}\n"));
                }
            }
        }
    }
    print!("{summary}");
    artifacts.add("summary.txt", summary);
    artifacts.add("sparsity.csv", sparsity);
    Ok(())
}

fn run_optimize(cfg: &ExperimentConfig, artifacts: &mut Artifacts) -> Result<(), RunError> {
    let mesh = generate_channel_mesh(&cfg.geometry, cfg.mesh_h, cfg.mesh_band)?;
    let space = FemSpace::build(&mesh);
    let ops = assemble_operators(&mesh, &space, cfg.re)?;
    let spec = cfg.input_spec();
    spec.validate().map_err(|e| RunError::Config(e.to_string()))?;
    let noise = NoiseBasis::new(cfg.t_final.max(cfg.dt), cfg.noise_truncation);
    let samples: Vec<GaussianSample> = (0..cfg.n_samples as u64)
        .map(|id| GaussianSample::draw(cfg.seed, id, cfg.noise_truncation))
        .collect();
    let problem = ControlProblem {
        mesh: &mesh,
        space: &space,
        ops: &ops,
        geom: cfg.geometry,
        spec: spec.clone(),
        noise,
        samples,
        dt: cfg.dt,
        t_final: cfg.t_final,
        u0: None,
    };
    println!(
        "optimize: {} elements, {} sample(s), {} step(s), beta = {}",
        mesh.triangles.len(),
        cfg.n_samples,
        problem.steps(),
        cfg.beta
    );
    let target = build_target(
        &problem,
        match cfg.target_mode.as_str() {
            "zero" => TargetMode::ZeroField,
            _ => TargetMode::SteadyUncontrolled { t_snapshot: cfg.target_time.min(cfg.t_final) },
        },
    )?;
    let steps = problem.steps();
    let initial = ControlTrajectory::mean_only(
        cfg.dt,
        (0..=steps).map(|n| spec.mean_spin(n as f64 * cfg.dt)).collect(),
    );
    let report = optimize(
        &problem,
        &target,
        cfg.beta,
        &initial,
        cfg.lambda0,
        cfg.eps_tol,
        cfg.max_iters,
    )?;
    let accepted = report.accepted();
    let (k0, kf) = (accepted[0], *accepted.last().unwrap());
    let summary = format!(
        "iterations = {}\naccepted = {}\nK_initial = {k0:.6e}\nK_final = {kf:.6e}\nratio = {:.4}\nmax |phi| = {:.4}\n",
        report.history.len(),
        accepted.len(),
        kf / k0,
        report.control.max_abs_mean()
    );
    print!("{summary}");
    artifacts.add("optimize_report.txt", summary);
    artifacts.add("optimize_log.csv", report.csv());
    artifacts.add("control.csv", report.control.csv());
    Ok(())
}

/// Fast self-contained property checks, one line each.
fn verify(cfg: &ExperimentConfig, artifacts: &mut Artifacts) -> Result<(), RunError> {
    let mut log = String::new();
    let mut failures = 0usize;
    let mut check = |name: &str, ok: bool, detail: String| {
        let status = if ok { "ok" } else { "FAIL" };
        let line = format!("{name}: {status} ({detail})");
        println!("{line}");
        log.push_str(&line);
        log.push('\n');
        if !ok {
            failures += 1;
        }
    };

    // probabilists' Hermite orthonormality under Gauss-Hermite quadrature
    let (nodes, weights) = gauss_hermite(24);
    let mut worst = 0.0f64;
    for i in 0..=5usize {
        for j in 0..=5usize {
            let val: f64 = nodes
                .iter()
                .zip(&weights)
                .map(|(&x, &w)| {
                    w * crate::pce::hermite_eval(i, x) * crate::pce::hermite_eval(j, x)
                })
                .sum();
            let expect = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((val - expect).abs());
        }
    }
    check("hermite-orthonormality", worst < 1e-10, format!("max deviation {worst:.2e}"));

    // truncation residual: nonnegative, below t/K, decreasing in K
    let mut residual_ok = true;
    let mut detail = String::new();
    for &k in &[1usize, 5, 20] {
        let basis = NoiseBasis::new(1.0, k);
        let r = basis.truncation_residual(1.0).unwrap();
        residual_ok &= r >= 0.0 && r <= 1.0 / k as f64;
        detail.push_str(&format!("K={k}: {r:.4e} "));
    }
    let r5 = NoiseBasis::new(1.0, 5).truncation_residual(1.0).unwrap();
    let r20 = NoiseBasis::new(1.0, 20).truncation_residual(1.0).unwrap();
    residual_ok &= r20 < r5;
    check("noise-truncation-residual", residual_ok, detail.trim().to_string());

    // planted sparse recovery through basis pursuit
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(cfg.seed);
    let (n, p, s) = (60, 200, 6);
    let a = nalgebra::DMatrix::from_fn(n, p, |_, _| {
        rng.sample::<f64, _>(rand_distr::StandardNormal) / (n as f64).sqrt()
    });
    let mut x0 = vec![0.0; p];
    for _ in 0..s {
        let idx = rng.gen_range(0..p);
        x0[idx] = if rng.gen_bool(0.5) { 1.0 } else { -1.0 } * rng.gen_range(0.5..2.0);
    }
    let y: Vec<f64> = (0..n)
        .map(|r| (0..p).map(|c| a[(r, c)] * x0[c]).sum())
        .collect();
    let bp = BpOptions { strategy: cfg.bp_strategy.clone(), ..Default::default() };
    let (x, _) = solve_bp(&a, &y, 1e-9, &bp)?;
    let err = x
        .iter()
        .zip(&x0)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt()
        / x0.iter().map(|v| v * v).sum::<f64>().sqrt();
    check("planted-sparse-recovery", err < 1e-6, format!("relative error {err:.2e}"));

    // mass matrix symmetry on a small channel mesh
    let mesh = generate_channel_mesh(&cfg.geometry, 0.09, cfg.mesh_band)?;
    let space = FemSpace::build(&mesh);
    let ops = assemble_operators(&mesh, &space, cfg.re)?;
    let ns = space.n_scalar();
    let mut asym = 0.0f64;
    for r in 0..ns {
        for (c, v) in ops.m.row_entries(r) {
            let vt = ops.m.get(c, r);
            asym = asym.max((v - vt).abs());
        }
    }
    check("mass-symmetry", asym < 1e-14, format!("max asymmetry {asym:.2e}"));

    // a few flow steps stay finite and discretely divergence free
    let spec = cfg.input_spec();
    let noise = NoiseBasis::new(1.0, cfg.noise_truncation);
    let bc = realize_boundary(&spec, &noise, &GaussianSample::zeros(cfg.noise_truncation), cfg.geometry.height)
        .map_err(|e| RunError::Config(e.to_string()))?;
    let opts = StepperOptions { dt: 1e-3, ..Default::default() };
    let mut stepper = Stepper::new(&mesh, &space, &ops, cfg.geometry, bc, &opts)?;
    let mut state = FlowState::zeros(&space, 0.0);
    let mut steps_ok = true;
    for _ in 0..5 {
        match stepper.step(&state) {
            Ok(next) => state = next,
            Err(_) => {
                steps_ok = false;
                break;
            }
        }
    }
    check("stepper-divergence", steps_ok, "5 steps, divergence within tolerance".into());

    drop(check);
    artifacts.add("verify.txt", log);
    if failures > 0 {
        return Err(RunError::Numerical(format!("{failures} check(s) failed")));
    }
    Ok(())
}
