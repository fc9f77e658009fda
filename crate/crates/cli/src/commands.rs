//! The subcommands. Each returns `Ok(true)` on success, `Ok(false)` when a
//! check ran but did not pass.

use std::collections::BTreeMap;

use cq_core::diagnostics::{linearity_test, Dynamics, LinearityConfig};
use cq_core::ensemble::{
    compare as compare_states, estimate_cq_state, run_ensemble, solve_master_equation, stability_bound, CQGridState,
    EnsembleConfig, Initial, PhaseGrid,
};
use cq_core::measurement::{measurement_check, MeasurementCheckConfig};
use cq_core::model::{default_probes, validate_many};
use cq_core::operator::pauli;
use cq_core::purify::{marginal_equivalence, purify_classical, EquivalenceConfig, Observable};
use cq_core::zoo::{self, Setup};
use cq_core::{
    simulate, CMatrix, Complex, CqError, CqModel, Mode, PhaseVector, QuantumState, SimConfig, StandardScModel,
    Trajectory,
};
use serde_json::{json, Value};

use crate::config::{resolve, AxisConfig, CommonArgs, GridConfig, Resolved};
use crate::output::Sink;
use crate::CliError;

const VALIDATE_TOL: f64 = 1e-10;
const VALIDATE_PROBES: usize = 32;
/// Target number of rows in a trajectory CSV when `every` is not given.
const DEFAULT_ROWS: usize = 1000;
const PILOT_TRAJECTORIES: usize = 2000;
const PILOT_MARGIN: f64 = 0.25;
const PILOT_SEED_SALT: u64 = 0x7069_6c6f_7400_0000;
const COMPARE_FLOOR: f64 = 0.02;
const COMPARE_K: f64 = 3.0;
const PURIFY_K: f64 = 3.0;
const MEASURE_K: f64 = 4.0;

struct Ctx {
    resolved: Resolved,
    setup: Setup,
    sink: Sink,
}

/// Resolves flags, builds the model and, unless `mode` is `None`, fixes the
/// mode before the config is frozen into the output sink.
fn context(command: &str, args: &CommonArgs, mode: impl FnOnce(&Setup) -> Option<Mode>) -> Result<Ctx, CliError> {
    let (mut resolved, overrides) = resolve(command, args)?;
    let setup = zoo::builtin(&resolved.model, &overrides)?;
    resolved.params = setup.params.clone();
    if resolved.mode.is_none() {
        resolved.mode = mode(&setup);
    }
    let sink = Sink::new(args.out.as_deref(), &resolved)?;
    Ok(Ctx { resolved, setup, sink })
}

/// Prints the report to stdout; a closed pipe is not an error.
fn emit(doc: &Value) {
    use std::io::Write;
    let _ = writeln!(std::io::stdout().lock(), "{}", serde_json::to_string_pretty(doc).expect("report serializes"));
}

fn is_saturated(model: &CqModel, z0: &PhaseVector) -> Result<bool, CliError> {
    let reports = validate_many(model, &default_probes(model, z0, VALIDATE_PROBES), VALIDATE_TOL)?;
    Ok(reports.iter().all(|r| r.saturated))
}

/// Fails with a positivity error unless the model is valid at `z0`.
fn require_valid(setup: &Setup) -> Result<(), CliError> {
    let r = cq_core::validate(&setup.model, &setup.z0, VALIDATE_TOL)?;
    if !r.valid {
        return Err(CqError::Positivity(format!(
            "model '{}' violates the decoherence-diffusion trade-off at z0 (min eigenvalue {:e}, range residual {:e})",
            setup.model.name, r.tradeoff_min_eigenvalue, r.range_residual
        ))
        .into());
    }
    Ok(())
}

fn default_mode(setup: &Setup) -> Option<Mode> {
    match is_saturated(&setup.model, &setup.z0) {
        Ok(true) => Some(Mode::Pure),
        _ => Some(Mode::Density),
    }
}

fn mode_of(r: &Resolved) -> Mode {
    r.mode.expect("mode resolved")
}

fn density_of(psi: &cq_core::StateVector) -> CMatrix {
    psi * psi.adjoint()
}

// ---------------------------------------------------------------- observables

fn qubits(d: usize) -> Option<usize> {
    (d.is_power_of_two() && d >= 2).then(|| d.trailing_zeros() as usize)
}

fn embed(single: &CMatrix, site: usize, n: usize) -> CMatrix {
    let left = CMatrix::identity(1 << site, 1 << site);
    let right_dim = 1 << (n - 1 - site);
    let right = CMatrix::identity(right_dim, right_dim);
    pauli::kron(&pauli::kron(&left, single), &right)
}

/// Parses `sigma_x|sigma_y|sigma_z[:SITE]` or `proj:K`.
fn parse_observable(spec: &str, d: usize) -> Result<CMatrix, CliError> {
    let bad = |why: &str| CliError::Usage(format!("observable '{spec}': {why}"));
    let (name, arg) = match spec.split_once(':') {
        Some((n, a)) => (n, Some(a.parse::<usize>().map_err(|_| bad("index must be a non-negative integer"))?)),
        None => (spec, None),
    };
    if name == "proj" {
        let k = arg.ok_or_else(|| bad("proj needs a basis index, e.g. proj:0"))?;
        if k >= d {
            return Err(bad(&format!("basis index {k} out of range for dimension {d}")));
        }
        let mut m = CMatrix::zeros(d, d);
        m[(k, k)] = Complex::new(1.0, 0.0);
        return Ok(m);
    }
    let single = match name {
        "sigma_x" => pauli::sigma_x(),
        "sigma_y" => pauli::sigma_y(),
        "sigma_z" => pauli::sigma_z().to_dense(),
        _ => return Err(bad("expected sigma_x, sigma_y, sigma_z or proj")),
    };
    let n = qubits(d).ok_or_else(|| bad(&format!("Pauli observables need a qubit register, dimension is {d}")))?;
    let site = match arg {
        Some(s) => s,
        None if n == 1 => 0,
        None => return Err(bad("name a qubit, e.g. sigma_z:0")),
    };
    if site >= n {
        return Err(bad(&format!("site {site} out of range for {n} qubits")));
    }
    Ok(embed(&single, site, n))
}

fn observables(r: &Resolved, d: usize) -> Result<Vec<(String, CMatrix)>, CliError> {
    r.outputs.iter().map(|s| Ok((s.clone(), parse_observable(s, d)?))).collect()
}

/// Quantum columns of a CSV row: the Bloch vector and purity for a qubit,
/// purity otherwise, then the requested observables.
fn state_labels(d: usize, extra: &[(String, CMatrix)]) -> Vec<String> {
    let mut out: Vec<String> = if d == 2 {
        ["bloch_x", "bloch_y", "bloch_z", "purity"].map(String::from).to_vec()
    } else {
        vec!["purity".into()]
    };
    out.extend(extra.iter().map(|(l, _)| l.clone()));
    out
}

fn state_values(state: &QuantumState, extra: &[(String, CMatrix)]) -> Vec<f64> {
    let mut out = Vec::new();
    if state.dim() == 2 {
        out.push(state.expectation_matrix(&pauli::sigma_x()).re);
        out.push(state.expectation_matrix(&pauli::sigma_y()).re);
        out.push(state.expectation(&pauli::sigma_z()).re);
    }
    out.push(state.purity());
    out.extend(extra.iter().map(|(_, a)| state.expectation_matrix(a).re));
    out
}

fn z_labels(n: usize) -> Vec<String> {
    (1..=n).map(|i| format!("z_{i}")).collect()
}

fn stride(r: &Resolved, sim: &SimConfig) -> Result<usize, CliError> {
    Ok(r.every.unwrap_or_else(|| sim.steps().map(|s| s.div_ceil(DEFAULT_ROWS).max(1)).unwrap_or(1)))
}

fn complex_rows(m: &CMatrix) -> Vec<Vec<[f64; 2]>> {
    (0..m.nrows()).map(|i| (0..m.ncols()).map(|j| [m[(i, j)].re, m[(i, j)].im]).collect()).collect()
}

// ---------------------------------------------------------------- validate

pub fn validate(args: &CommonArgs) -> Result<bool, CliError> {
    let ctx = context("validate", args, |_| None)?;
    let probes = default_probes(&ctx.setup.model, &ctx.setup.z0, VALIDATE_PROBES);
    let reports = validate_many(&ctx.setup.model, &probes, VALIDATE_TOL)?;
    let valid = reports.iter().all(|r| r.valid);
    let saturated = reports.iter().all(|r| r.saturated);
    let doc = ctx.sink.json(
        "validate",
        &json!({ "model": ctx.setup.model.name, "valid": valid, "saturated": saturated, "tolerance": VALIDATE_TOL, "probes": reports }),
    )?;
    emit(&doc);
    Ok(valid)
}

// ---------------------------------------------------------------- run

pub fn run(args: &CommonArgs) -> Result<bool, CliError> {
    let mut ctx = context("run", args, default_mode)?;
    require_valid(&ctx.setup)?;
    let r = &ctx.resolved;
    let mode = mode_of(r);
    let mut sim = SimConfig::new(r.t_final, r.dt, r.seed);
    let every = stride(r, &sim)?;
    sim = sim.with_record_every(every);
    ctx.resolved.every = Some(every);
    ctx.sink = Sink::new(args.out.as_deref(), &ctx.resolved)?;
    let extra = observables(&ctx.resolved, ctx.setup.model.d)?;
    let tr = simulate(&ctx.setup.model, &ctx.setup.z0, &QuantumState::Pure(ctx.setup.psi0.clone()), &sim, mode)?;
    let mut header = vec!["t".to_string()];
    header.extend(z_labels(ctx.setup.model.n));
    header.extend(state_labels(ctx.setup.model.d, &extra));
    if mode == Mode::Joint {
        header.push("log_weight".into());
    }
    let rows: Vec<Vec<f64>> = tr
        .samples
        .iter()
        .map(|s| {
            let mut row = vec![s.t];
            row.extend(s.z.iter());
            row.extend(state_values(&s.state, &extra));
            if mode == Mode::Joint {
                row.push(s.log_weight);
            }
            row
        })
        .collect();
    let path = ctx.sink.csv("trajectory.csv", &header, &rows)?;
    let last = tr.last();
    let doc = ctx.sink.json(
        "run",
        &json!({
            "csv": path.display().to_string(),
            "rows": rows.len(),
            "termination": tr.termination,
            "min_purity": tr.min_purity,
            "min_eigenvalue": tr.min_eigenvalue,
            "final": { "t": last.t, "z": last.z.as_slice(), "purity": last.state.purity() },
        }),
    )?;
    emit(&doc);
    Ok(true)
}

// ---------------------------------------------------------------- ensemble

fn weight(tr: &Trajectory, s: &cq_core::integrator::Sample) -> f64 {
    if tr.mode == Mode::Joint {
        s.log_weight.exp()
    } else {
        1.0
    }
}

pub fn ensemble(args: &CommonArgs) -> Result<bool, CliError> {
    let mut ctx = context("ensemble", args, default_mode)?;
    require_valid(&ctx.setup)?;
    let mode = mode_of(&ctx.resolved);
    let mut sim = SimConfig::new(ctx.resolved.t_final, ctx.resolved.dt, ctx.resolved.seed);
    let every = stride(&ctx.resolved, &sim)?;
    sim = sim.with_record_every(every);
    ctx.resolved.every = Some(every);
    ctx.sink = Sink::new(args.out.as_deref(), &ctx.resolved)?;
    let r = &ctx.resolved;
    let extra = observables(r, ctx.setup.model.d)?;
    let initial = Initial::Point { z: ctx.setup.z0.clone(), state: QuantumState::Pure(ctx.setup.psi0.clone()) };
    let cfg = EnsembleConfig { sim, trajectories: r.trajectories, mode, workers: r.workers };
    let trs = run_ensemble(&ctx.setup.model, &initial, &cfg)?;

    let mut quantities = z_labels(ctx.setup.model.n);
    quantities.extend(state_labels(ctx.setup.model.d, &extra));
    let mut header = vec!["t".to_string(), "count".to_string()];
    for q in &quantities {
        header.push(format!("{q}_mean"));
        header.push(format!("{q}_se"));
    }
    let longest = trs.iter().max_by_key(|t| t.samples.len()).expect("non-empty ensemble");
    let mut rows = Vec::with_capacity(longest.samples.len());
    for s0 in &longest.samples {
        let mut columns: Vec<Vec<f64>> = vec![Vec::new(); quantities.len()];
        for tr in &trs {
            if let Some(s) = tr.sample_at_step(s0.step) {
                let w = weight(tr, s);
                for (col, v) in columns.iter_mut().zip(s.z.iter().copied().chain(state_values(&s.state, &extra))) {
                    col.push(w * v);
                }
            }
        }
        let mut row = vec![s0.t, columns[0].len() as f64];
        for col in &columns {
            let (m, se) = cq_core::ensemble::mean_stderr(col);
            row.push(m);
            row.push(se);
        }
        rows.push(row);
    }
    let path = ctx.sink.csv("ensemble.csv", &header, &rows)?;
    let exits = trs.iter().filter(|t| !t.completed()).count();
    let terminal: BTreeMap<String, [f64; 2]> = rows
        .last()
        .map(|row| quantities.iter().enumerate().map(|(k, q)| (q.clone(), [row[2 + 2 * k], row[3 + 2 * k]])).collect())
        .unwrap_or_default();
    let doc = ctx.sink.json(
        "ensemble",
        &json!({
            "csv": path.display().to_string(),
            "trajectories": trs.len(),
            "domain_exits": exits,
            "min_purity": trs.iter().map(|t| t.min_purity).fold(f64::INFINITY, f64::min),
            "terminal_mean_se": terminal,
        }),
    )?;
    emit(&doc);
    Ok(true)
}

// ---------------------------------------------------------------- grids

fn grid_from(cfg: &GridConfig, n: usize) -> Result<PhaseGrid, CliError> {
    if cfg.axes.len() != n {
        return Err(CliError::Usage(format!("grid has {} axes, model has {n} classical coordinates", cfg.axes.len())));
    }
    let bounds: Vec<(f64, f64, usize)> = cfg.axes.iter().map(|a| (a.min, a.max, a.cells)).collect();
    Ok(PhaseGrid::resolved(&bounds)?)
}

/// Bounding box of a short ensemble over `[0, t]`, widened by a margin on
/// each side. Saturated models run in pure mode, which tolerates coarser
/// steps than the density update.
fn pilot_grid(setup: &Setup, r: &Resolved, t: f64, cells: usize) -> Result<GridConfig, CliError> {
    let n = setup.model.n;
    let sim = SimConfig::new(t, r.dt, r.seed ^ PILOT_SEED_SALT);
    let every = sim.steps()?.div_ceil(20).max(1);
    let cfg = EnsembleConfig {
        sim: sim.with_record_every(every),
        trajectories: PILOT_TRAJECTORIES,
        mode: default_mode(setup).expect("default mode"),
        workers: r.workers,
    };
    let initial = Initial::Point { z: setup.z0.clone(), state: QuantumState::Pure(setup.psi0.clone()) };
    let trs = run_ensemble(&setup.model, &initial, &cfg)?;
    let mut lo = setup.z0.as_slice().to_vec();
    let mut hi = lo.clone();
    for s in trs.iter().flat_map(|t| &t.samples) {
        for i in 0..n {
            lo[i] = lo[i].min(s.z[i]);
            hi[i] = hi[i].max(s.z[i]);
        }
    }
    let axes = (0..n)
        .map(|i| {
            let width = (hi[i] - lo[i]).max(1e-3);
            let mid = 0.5 * (hi[i] + lo[i]);
            let half = 0.5 * width * (1.0 + 2.0 * PILOT_MARGIN);
            AxisConfig { min: mid - half, max: mid + half, cells }
        })
        .collect();
    log::info!("pilot grid from {PILOT_TRAJECTORIES} trajectories");
    Ok(GridConfig { axes })
}

fn require_gridded(model: &CqModel) -> Result<(), CliError> {
    if model.n > 2 {
        return Err(CqError::Unsupported(format!(
            "grid methods need at most 2 classical coordinates, '{}' has {}",
            model.name, model.n
        ))
        .into());
    }
    Ok(())
}

fn grid_rows(grid: &PhaseGrid, states: &[&CQGridState]) -> Vec<Vec<f64>> {
    (0..grid.len())
        .map(|cell| {
            let mut row = grid.center(cell);
            for st in states {
                row.push(st.trace_density(cell));
                row.extend_from_slice(st.cell(cell));
            }
            row
        })
        .collect()
}

// ---------------------------------------------------------------- compare

pub fn compare(args: &CommonArgs) -> Result<bool, CliError> {
    let mut ctx = context("compare", args, |_| Some(Mode::Density))?;
    require_valid(&ctx.setup)?;
    require_gridded(&ctx.setup.model)?;
    let (model, n) = (&ctx.setup.model, ctx.setup.model.n);
    let t = ctx.resolved.dt * (ctx.resolved.t / ctx.resolved.dt).round();
    if ctx.resolved.grid.is_none() {
        let cells = if n == 2 { 128 } else { 256 };
        ctx.resolved.grid = Some(pilot_grid(&ctx.setup, &ctx.resolved, t, cells)?);
        ctx.sink = Sink::new(args.out.as_deref(), &ctx.resolved)?;
    }
    let r = &ctx.resolved;
    let grid = grid_from(r.grid.as_ref().expect("grid resolved"), n)?;
    let init = CQGridState::point_mass(grid.clone(), &ctx.setup.z0, &density_of(&ctx.setup.psi0))?;
    let bound = stability_bound(model, &grid)?;
    let pde = solve_master_equation(model, &init, t, bound.limit())?;
    log::info!("master equation: {} steps of {:e}", pde.steps, pde.dt);
    let sim = SimConfig::new(t, r.dt, r.seed).endpoints_only();
    let cfg = EnsembleConfig { sim, trajectories: r.trajectories, mode: mode_of(r), workers: r.workers };
    let trs = run_ensemble(model, &Initial::Grid(init), &cfg)?;
    let est = estimate_cq_state(&trs, t, &grid)?;
    let report = compare_states(&est, &pde.state, r.resamples, r.seed)?;
    let passes = report.passes(COMPARE_FLOOR, COMPARE_K);

    let labels = pde.state.basis().labels();
    let mut header: Vec<String> = z_labels(n);
    for who in ["pde", "mc"] {
        header.push(format!("{who}_trace"));
        header.extend(labels.iter().map(|l| format!("{who}_{l}")));
    }
    let path = ctx.sink.csv("compare_grid.csv", &header, &grid_rows(&grid, &[&pde.state, &est.state]))?;
    let doc = ctx.sink.json(
        "compare",
        &json!({
            "csv": path.display().to_string(),
            "t": t,
            "passes": passes,
            "criterion": { "floor": COMPARE_FLOOR, "k": COMPARE_K },
            "comparison": report,
            "master_equation": {
                "steps": pde.steps,
                "dt": pde.dt,
                "stability_bound": pde.bound,
                "trace_drift": pde.trace_drift,
                "boundary_mass": pde.boundary_mass,
                "min_relative_eigenvalue": pde.min_relative_eigenvalue,
            },
        }),
    )?;
    emit(&doc);
    Ok(passes)
}

// ---------------------------------------------------------------- purify

pub fn purify(args: &CommonArgs) -> Result<bool, CliError> {
    let ctx = context("purify", args, |_| None)?;
    let r = &ctx.resolved;
    let (model, z0) = (&ctx.setup.model, &ctx.setup.z0);
    let pm = purify_classical(model, z0)?;
    let aux = pm.auxiliary(z0)?;
    let block_residual = pm.block_tradeoff_residual(z0)?;
    let enlarged = cq_core::validate(&pm.enlarged, &pm.lift(z0), VALIDATE_TOL)?;

    let mut obs = Vec::new();
    if model.d == 2 {
        obs.push(Observable::expectation("<sigma_z>", |_| pauli::sigma_z().to_dense()));
    }
    for (label, a) in observables(r, model.d)? {
        obs.push(Observable::expectation(format!("<{label}>"), move |_| a.clone()));
    }
    for i in 0..model.n {
        obs.push(Observable::CoordinateMean(i));
        obs.push(Observable::CoordinateVariance(i));
    }
    obs.push(Observable::PurityOfMean);
    let cfg = EquivalenceConfig {
        checkpoints: r.checkpoints,
        workers: r.workers,
        ..EquivalenceConfig::new(r.t_final, r.dt, r.trajectories, r.seed)
    };
    let initial = Initial::Point { z: z0.clone(), state: QuantumState::Pure(ctx.setup.psi0.clone()) };
    let report = marginal_equivalence(&pm, &initial, &obs, &cfg)?;
    let passes = report.passes(PURIFY_K);
    let doc = ctx.sink.json(
        "purify",
        &json!({
            "passes": passes,
            "k": PURIFY_K,
            "extra_dims": pm.extra_dims,
            "excess_decoherence": complex_rows(&aux.d0),
            "auxiliary_d1": complex_rows(&aux.d1),
            "block_tradeoff_residual": block_residual,
            "enlarged_validation": enlarged,
            "equivalence": report,
        }),
    )?;
    emit(&doc);
    Ok(passes)
}

// ---------------------------------------------------------------- measure-check

/// A full-rank state with complex coherences near `ψ`, so that the
/// measurement back-action is visible in every direction.
fn probe_state(psi: &cq_core::StateVector) -> CMatrix {
    let d = psi.len();
    let b = CMatrix::from_fn(d, d, |j, k| {
        if j == k {
            Complex::new(1.0 + 0.5 * j as f64, 0.0)
        } else if j < k {
            Complex::new(0.3, 0.4) / (1.0 + (k - j) as f64)
        } else {
            Complex::new(0.0, 0.0)
        }
    });
    let m = &b * b.adjoint();
    let m = &m / m.trace();
    density_of(psi) * Complex::new(0.6, 0.0) + m * Complex::new(0.4, 0.0)
}

pub fn measure_check(args: &CommonArgs) -> Result<bool, CliError> {
    let ctx = context("measure-check", args, |_| None)?;
    require_valid(&ctx.setup)?;
    let r = &ctx.resolved;
    let (model, z0) = (&ctx.setup.model, &ctx.setup.z0);
    let inefficient = !cq_core::validate(model, z0, VALIDATE_TOL)?.saturated;
    let cfg = MeasurementCheckConfig {
        inefficient,
        workers: r.workers,
        ..MeasurementCheckConfig::new(r.dt, r.trajectories, r.seed)
    };
    let rho = probe_state(&ctx.setup.psi0);
    let report = measurement_check(model, z0, &rho, &cfg)?;
    let passes = report.passes(MEASURE_K);
    let doc = ctx.sink.json(
        "measure-check",
        &json!({
            "passes": passes,
            "k": MEASURE_K,
            "normalization_bound": 10.0 * r.dt * r.dt,
            "state": complex_rows(&rho),
            "measurement": report,
        }),
    )?;
    emit(&doc);
    Ok(passes)
}

// ---------------------------------------------------------------- linearity

pub fn linearity(args: &CommonArgs) -> Result<bool, CliError> {
    let mut ctx = context("linearity", args, |_| None)?;
    require_valid(&ctx.setup)?;
    require_gridded(&ctx.setup.model)?;
    let (n, d) = (ctx.setup.model.n, ctx.setup.model.d);
    if ctx.resolved.grid.is_none() {
        let cells = if n == 2 { 24 } else { 64 };
        ctx.resolved.grid = Some(pilot_grid(&ctx.setup, &ctx.resolved, ctx.resolved.t_final, cells)?);
        ctx.sink = Sink::new(args.out.as_deref(), &ctx.resolved)?;
    }
    let r = &ctx.resolved;
    let grid = grid_from(r.grid.as_ref().expect("grid resolved"), n)?;
    let z0 = &ctx.setup.z0;
    let rho_a = CQGridState::point_mass(grid.clone(), z0, &density_of(&zoo::basis_state(d, 0)))?;
    let rho_b = CQGridState::point_mass(grid, z0, &density_of(&zoo::basis_state(d, d - 1)))?;
    let cfg = LinearityConfig {
        resamples: r.resamples,
        workers: r.workers,
        ..LinearityConfig::new(r.t_final, r.dt, r.trajectories, r.seed)
    };
    let healed = linearity_test(Dynamics::Healed(&ctx.setup.model), &rho_a, &rho_b, r.p, &cfg)?;
    let standard_model = StandardScModel::from_model(&ctx.setup.model);
    let standard = linearity_test(Dynamics::Standard(&standard_model), &rho_a, &rho_b, r.p, &cfg)?;
    let passes = !healed.rejects;
    let doc = ctx.sink.json(
        "linearity",
        &json!({
            "passes": passes,
            "healed": healed,
            "standard": standard,
        }),
    )?;
    emit(&doc);
    Ok(passes)
}
