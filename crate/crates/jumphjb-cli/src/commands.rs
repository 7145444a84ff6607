//! Command implementations.
//!
//! Every run command follows the same outline: build the coefficient
//! set from the scenario, call into the core library, and emit
//! `results.csv`, `report.json`, and `manifest.json` through
//! [`RunWriter`]. Failures carry the process exit code: 2 for schema
//! problems, 3 for numerical failures, 4 for refused enumeration
//! budgets.

use std::path::PathBuf;
use std::sync::Arc;

use nalgebra::DVector;
use rand::Rng;
use serde::Serialize;

use jumphjb_core::approx::{
    bounding_bsde, coefficient_errors, lyapunov_check, penalty_chi, penalty_hessian,
    projection_error, BoundingConstants, MollifierSpec,
};
use jumphjb_core::bsde::{self, martingale_residuals};
use jumphjb_core::coefficients::CoefficientSet;
use jumphjb_core::forward_sim::{
    constant_policy, flow_check, moment_report, simulate, PathBundle, TimeGrid,
};
use jumphjb_core::integro_pde::{solve_pde, SpaceGrid};
use jumphjb_core::regression::RegressionBasis;
use jumphjb_core::rng::derive_stream;
use jumphjb_core::value_dpp::{
    dpp_residual, feedback_value, open_loop_value, PolicyFamily, ValueConfig, ValueEstimate,
    ValueMode,
};
use jumphjb_core::Error as CoreError;

use crate::output::{fmt, RunWriter};
use crate::scenario::{DiffusionSpec, DriftSpec, JumpSpec, Scenario};

/// Failure with a process exit code and a machine-readable kind.
#[derive(Debug)]
pub struct CliError {
    pub exit_code: i32,
    pub kind: String,
    pub message: String,
}

pub fn schema_err(message: impl Into<String>) -> CliError {
    CliError { exit_code: 2, kind: "schema".into(), message: message.into() }
}

fn io_err(e: std::io::Error) -> CliError {
    CliError { exit_code: 3, kind: "io".into(), message: e.to_string() }
}

pub fn core_err(e: CoreError) -> CliError {
    let (exit_code, kind) = match &e {
        CoreError::InvalidArgument(_) | CoreError::InvalidInterval { .. } => (2, "schema"),
        CoreError::EnumerationTooLarge { .. } => (4, "budget"),
        _ => (3, "numerical"),
    };
    CliError { exit_code, kind: kind.into(), message: e.to_string() }
}

pub struct RunContext {
    pub scenario: Scenario,
    pub out_dir: PathBuf,
    pub threads: usize,
}

impl RunContext {
    fn writer(&self, command: &str) -> Result<RunWriter, CliError> {
        RunWriter::new(
            &self.out_dir,
            command,
            &self.scenario.name,
            &self.scenario.sha256(),
            self.scenario.master_seed,
            self.threads,
        )
        .map_err(io_err)
    }

    fn grid(&self) -> Result<TimeGrid, CliError> {
        let t = &self.scenario.time;
        TimeGrid::new(t.t0, t.t_end, t.steps).map_err(core_err)
    }

    fn probe(&self) -> Result<Vec<Vec<f64>>, CliError> {
        let spec = self
            .scenario
            .probe
            .as_ref()
            .ok_or_else(|| schema_err("this command needs a `probe` block in the scenario"))?;
        Ok(self.scenario.probe_states(spec.half_width, spec.points))
    }

    fn value_config(&self) -> ValueConfig {
        let s = &self.scenario.solver;
        ValueConfig {
            mode: ValueMode::Auto,
            basis_degree: s.basis_degree,
            n_paths: s.n_paths,
            cloud_per_control: s.cloud_per_control,
            budget: s.budget as u128,
        }
    }
}

#[derive(Serialize)]
struct EstimateOut {
    value: f64,
    std_error: f64,
    optimizer: String,
}

impl From<&ValueEstimate> for EstimateOut {
    fn from(e: &ValueEstimate) -> Self {
        EstimateOut { value: e.value, std_error: e.std_error, optimizer: e.optimizer.clone() }
    }
}

// ---------------------------------------------------------------- simulate

#[derive(Serialize)]
struct SimulateReport {
    n_paths: usize,
    steps: usize,
    dt: f64,
    terminal_mean: Vec<f64>,
    terminal_std_error: Vec<f64>,
    expected_terminal_mean: Option<f64>,
    mean_error_se_multiples: Option<f64>,
    sup_second_moment: f64,
    increment_slope_q2: f64,
    flow_deviation: f64,
    csv_paths: usize,
}

/// Forward simulation under the first control held constant, with
/// moment diagnostics and the two-segment flow identity check.
pub fn simulate_cmd(ctx: &RunContext) -> Result<(), CliError> {
    let scn = &ctx.scenario;
    let (cs, mm) = scn.build().map_err(schema_err)?;
    let grid = ctx.grid()?;
    let mut writer = ctx.writer("simulate")?;
    let policy = constant_policy(DVector::from_column_slice(&scn.control_set[0]));

    let bundle = simulate(&cs, &mm, &grid, &scn.x0, &policy, scn.solver.n_paths, scn.master_seed)
        .map_err(core_err)?;
    writer.mark_stage("simulate");

    let moments = moment_report(&bundle, &[2.0]);
    let flow = flow_check(
        &cs,
        &mm,
        &grid,
        &scn.x0,
        &policy,
        grid.steps / 2,
        scn.solver.n_paths.min(4_096),
        scn.master_seed,
    )
    .map_err(core_err)?;
    writer.mark_stage("diagnostics");

    let steps = grid.steps;
    let m = bundle.n_paths as f64;
    let mut mean = vec![0.0; cs.n];
    let mut sumsq = vec![0.0; cs.n];
    for p in 0..bundle.n_paths {
        for (c, v) in bundle.state(p, steps).iter().enumerate() {
            mean[c] += v;
            sumsq[c] += v * v;
        }
    }
    for c in 0..cs.n {
        mean[c] /= m;
    }
    let se: Vec<f64> = (0..cs.n)
        .map(|c| ((sumsq[c] / m - mean[c] * mean[c]).max(0.0) / (m - 1.0).max(1.0)).sqrt())
        .collect();

    let csv_paths = bundle.n_paths.min(256);
    let mut header: Vec<String> = vec!["path".into(), "node".into(), "time".into()];
    for c in 0..cs.n {
        header.push(format!("x{}", c));
    }
    let header_refs: Vec<&str> = header.iter().map(|s| s.as_str()).collect();
    let mut rows = Vec::with_capacity(csv_paths * (steps + 1));
    for p in 0..csv_paths {
        for i in 0..=steps {
            let mut row = vec![p.to_string(), i.to_string(), fmt(grid.node(i))];
            row.extend(bundle.state(p, i).iter().map(|&v| fmt(v)));
            rows.push(row);
        }
    }
    writer.write_csv(&header_refs, &rows).map_err(io_err)?;

    let mean_error_se_multiples = scn.expected_terminal_mean.map(|target| {
        let err = (mean[0] - target).abs();
        if err == 0.0 {
            0.0
        } else {
            err / se[0].max(1e-300)
        }
    });
    writer
        .write_report(&SimulateReport {
            n_paths: bundle.n_paths,
            steps,
            dt: grid.dt(),
            terminal_mean: mean,
            terminal_std_error: se,
            expected_terminal_mean: scn.expected_terminal_mean,
            mean_error_se_multiples,
            sup_second_moment: moments.sup_moments[0].1,
            increment_slope_q2: moments.increment_slopes[0].1,
            flow_deviation: flow,
            csv_paths,
        })
        .map_err(io_err)?;
    writer.finish().map_err(io_err)
}

// --------------------------------------------------------------- solve-bsde

#[derive(Serialize)]
struct BsdeReport {
    y0: f64,
    y0_std_error: f64,
    expected_y0: Option<f64>,
    abs_error: Option<f64>,
    rel_error: Option<f64>,
    max_residual_se_multiples: f64,
    basis_degree: u32,
    n_paths: usize,
    steps: usize,
}

/// Backward recursive-cost solve along simulated paths, with per-step
/// martingale residual diagnostics.
pub fn solve_bsde_cmd(ctx: &RunContext) -> Result<(), CliError> {
    let scn = &ctx.scenario;
    let (cs, mm) = scn.build().map_err(schema_err)?;
    let grid = ctx.grid()?;
    let mut writer = ctx.writer("solve-bsde")?;
    let policy = constant_policy(DVector::from_column_slice(&scn.control_set[0]));

    let bundle = simulate(&cs, &mm, &grid, &scn.x0, &policy, scn.solver.n_paths, scn.master_seed)
        .map_err(core_err)?;
    writer.mark_stage("simulate");
    let basis = RegressionBasis::polynomial_for(scn.solver.basis_degree, &bundle).map_err(core_err)?;
    let sol = bsde::solve(&cs, &mm, &bundle, &basis).map_err(core_err)?;
    writer.mark_stage("solve-backward");
    let residuals = martingale_residuals(&sol, &cs, &mm, &bundle);
    writer.mark_stage("residuals");

    let mut rows = Vec::with_capacity(residuals.len());
    let mut max_multiple: f64 = 0.0;
    for (i, (r_mean, r_se)) in residuals.iter().enumerate() {
        let multiple = r_mean.abs() / r_se.max(1e-300);
        max_multiple = max_multiple.max(multiple);
        rows.push(vec![
            i.to_string(),
            fmt(grid.node(i)),
            fmt(*r_mean),
            fmt(*r_se),
            fmt(multiple),
        ]);
    }
    writer
        .write_csv(&["step", "time", "residual_mean", "residual_se", "se_multiples"], &rows)
        .map_err(io_err)?;

    let y0 = sol.y0_mean();
    let abs_error = scn.expected_y0.map(|e| (y0 - e).abs());
    writer
        .write_report(&BsdeReport {
            y0,
            y0_std_error: sol.std_error(),
            expected_y0: scn.expected_y0,
            abs_error,
            rel_error: scn
                .expected_y0
                .map(|e| (y0 - e).abs() / e.abs().max(1e-300)),
            max_residual_se_multiples: max_multiple,
            basis_degree: scn.solver.basis_degree,
            n_paths: bundle.n_paths,
            steps: grid.steps,
        })
        .map_err(io_err)?;
    writer.finish().map_err(io_err)
}

// -------------------------------------------------------------------- value

#[derive(Serialize)]
struct ValueReport {
    decision_nodes: Vec<usize>,
    open_loop: EstimateOut,
    feedback: EstimateOut,
    minimum: EstimateOut,
    expected_y0: Option<f64>,
}

/// Value of the scenario's policy family by both estimators.
pub fn value_cmd(ctx: &RunContext) -> Result<(), CliError> {
    let scn = &ctx.scenario;
    let (cs, mm) = scn.build().map_err(schema_err)?;
    let grid = ctx.grid()?;
    let mut writer = ctx.writer("value")?;
    let nodes = scn.decision_node_list(grid.steps);
    let family = PolicyFamily::new(nodes.clone(), grid.steps).map_err(core_err)?;
    let cfg = ctx.value_config();

    let ol = open_loop_value(&cs, &mm, &grid, &scn.x0, &family, &cfg, scn.master_seed)
        .map_err(core_err)?;
    writer.mark_stage("open-loop");
    let fb = feedback_value(&cs, &mm, &grid, &scn.x0, &family, &cfg, scn.master_seed)
        .map_err(core_err)?
        .estimate;
    writer.mark_stage("feedback");
    let min = if fb.value < ol.value { fb.clone() } else { ol.clone() };

    let rows = vec![
        vec!["open-loop".to_string(), fmt(ol.value), fmt(ol.std_error), ol.optimizer.clone()],
        vec!["feedback".to_string(), fmt(fb.value), fmt(fb.std_error), fb.optimizer.clone()],
        vec!["minimum".to_string(), fmt(min.value), fmt(min.std_error), min.optimizer.clone()],
    ];
    writer.write_csv(&["method", "value", "std_error", "optimizer"], &rows).map_err(io_err)?;
    writer
        .write_report(&ValueReport {
            decision_nodes: nodes,
            open_loop: (&ol).into(),
            feedback: (&fb).into(),
            minimum: (&min).into(),
            expected_y0: scn.expected_y0,
        })
        .map_err(io_err)?;
    writer.finish().map_err(io_err)
}

// ---------------------------------------------------------------- dpp-check

#[derive(Serialize)]
struct SplitOut {
    steps: usize,
    split_node: usize,
    full: EstimateOut,
    composed: EstimateOut,
    residual: f64,
    threshold: f64,
    within_threshold: bool,
}

#[derive(Serialize)]
struct DppCheckReport {
    fine: SplitOut,
    coarse: SplitOut,
    residual_decreases: bool,
    allowance: f64,
}

fn dpp_at(
    ctx: &RunContext,
    cs: &CoefficientSet,
    mm: &jumphjb_core::MarkMeasure,
    steps: usize,
) -> Result<SplitOut, CliError> {
    let scn = &ctx.scenario;
    let grid = TimeGrid::new(scn.time.t0, scn.time.t_end, steps).map_err(core_err)?;
    let nodes = scn.decision_node_list(steps);
    if nodes.len() < 2 {
        return Err(schema_err("dpp-check needs at least two decision nodes"));
    }
    let split = nodes[nodes.len() / 2];
    let family = PolicyFamily::new(nodes, steps).map_err(core_err)?;
    let cfg = ctx.value_config();
    let rep = dpp_residual(cs, mm, &grid, &scn.x0, &family, split, &cfg, scn.master_seed)
        .map_err(core_err)?;
    let threshold =
        2.0 * (rep.full.std_error + rep.composed.std_error) + scn.solver.dpp_allowance;
    Ok(SplitOut {
        steps,
        split_node: split,
        full: (&rep.full).into(),
        composed: (&rep.composed).into(),
        residual: rep.residual,
        threshold,
        within_threshold: rep.residual <= threshold,
    })
}

/// Dynamic-programming identity: the full-horizon value against the
/// value recomposed through the estimated field at an interior decision
/// node, on the scenario grid and on its 2x coarsening.
pub fn dpp_check_cmd(ctx: &RunContext) -> Result<(), CliError> {
    let scn = &ctx.scenario;
    let (cs, mm) = scn.build().map_err(schema_err)?;
    let m = scn.decision_nodes.unwrap_or(1);
    let steps = scn.time.steps;
    if steps % 2 != 0 || (steps / 2) % m != 0 {
        return Err(schema_err(format!(
            "dpp-check halves the grid: {} steps must stay divisible by {} decision nodes",
            steps, m
        )));
    }
    let mut writer = ctx.writer("dpp-check")?;
    let fine = dpp_at(ctx, &cs, &mm, steps)?;
    writer.mark_stage("fine-grid");
    let coarse = dpp_at(ctx, &cs, &mm, steps / 2)?;
    writer.mark_stage("coarse-grid");

    let rows = [&coarse, &fine]
        .iter()
        .map(|s| {
            vec![
                s.steps.to_string(),
                s.split_node.to_string(),
                fmt(s.full.value),
                fmt(s.composed.value),
                fmt(s.residual),
                fmt(s.threshold),
            ]
        })
        .collect::<Vec<_>>();
    writer
        .write_csv(&["steps", "split_node", "full", "composed", "residual", "threshold"], &rows)
        .map_err(io_err)?;
    let residual_decreases = fine.residual <= coarse.residual;
    writer
        .write_report(&DppCheckReport {
            fine,
            coarse,
            residual_decreases,
            allowance: scn.solver.dpp_allowance,
        })
        .map_err(io_err)?;
    writer.finish().map_err(io_err)
}

// ---------------------------------------------------------------- solve-pde

#[derive(Serialize)]
struct ComparisonOut {
    shift: f64,
    min_margin: f64,
    dominated: bool,
}

#[derive(Serialize)]
struct PdeReport {
    value_at_x0: f64,
    steps: usize,
    cells: Vec<usize>,
    dt: f64,
    dx: Vec<f64>,
    comparison: ComparisonOut,
}

fn space_grid(scn: &Scenario) -> Result<SpaceGrid, CliError> {
    let spec = scn
        .space
        .as_ref()
        .ok_or_else(|| schema_err("this command needs a `space` block in the scenario"))?;
    SpaceGrid::new(&spec.lo, &spec.hi, &spec.cells).map_err(core_err)
}

/// Driver with the cost argument shifted by a constant; the shifted
/// field solves the same equation with lowered terminal data, so the
/// monotone scheme must keep it below the relaxed solve everywhere.
fn shifted_driver(cs: &CoefficientSet, shift: f64) -> CoefficientSet {
    let f0 = cs.f.clone();
    CoefficientSet {
        f: Arc::new(move |t, x, u, y, z, k, hist| f0(t, x, u, y + shift, z, k, hist)),
        ..cs.clone()
    }
}

/// Deterministic-coefficient backward solve on a grid, plus a
/// comparison-principle check against the shifted subsolution.
pub fn solve_pde_cmd(ctx: &RunContext) -> Result<(), CliError> {
    let scn = &ctx.scenario;
    let (cs, mm) = scn.build().map_err(schema_err)?;
    let grid = ctx.grid()?;
    let space = space_grid(scn)?;
    let mut writer = ctx.writer("solve-pde")?;

    let sol = solve_pde(&cs, &mm, &grid, &space, &cs.h).map_err(core_err)?;
    writer.mark_stage("solve");
    let shift = scn.comparison_shift;
    let relaxed = solve_pde(&shifted_driver(&cs, shift), &mm, &grid, &space, &cs.h)
        .map_err(core_err)?;
    writer.mark_stage("solve-shifted");

    let mut min_margin = f64::INFINITY;
    for i in 0..=grid.steps {
        for (va, vb) in relaxed.field(i).values().iter().zip(sol.field(i).values()) {
            min_margin = min_margin.min(va - (vb - shift));
        }
    }

    let mut header: Vec<String> = vec!["node".into()];
    for c in 0..cs.n {
        header.push(format!("x{}", c));
    }
    header.push("value".into());
    let header_refs: Vec<&str> = header.iter().map(|s| s.as_str()).collect();
    let field0 = sol.field(0);
    let mut rows = Vec::with_capacity(space.n_nodes());
    for flat in 0..space.n_nodes() {
        let mut row = vec![flat.to_string()];
        row.extend(space.node_coords(flat).iter().map(|&v| fmt(v)));
        row.push(fmt(field0.value_at(flat)));
        rows.push(row);
    }
    writer.write_csv(&header_refs, &rows).map_err(io_err)?;

    writer
        .write_report(&PdeReport {
            value_at_x0: sol.value(0, &scn.x0),
            steps: grid.steps,
            cells: (0..space.dim()).map(|a| space.cells(a)).collect(),
            dt: grid.dt(),
            dx: (0..space.dim()).map(|a| space.dx(a)).collect(),
            comparison: ComparisonOut {
                shift,
                min_margin,
                dominated: min_margin >= -1e-10,
            },
        })
        .map_err(io_err)?;
    writer.finish().map_err(io_err)
}

// --------------------------------------------------------------- cross-check

#[derive(Serialize)]
struct CrossCheckReport {
    pde_fine: f64,
    pde_space_coarse: f64,
    pde_time_refined: f64,
    refinement_allowance: f64,
    monte_carlo: EstimateOut,
    gap: f64,
    within: bool,
}

/// Grid value at `x0` against the probabilistic value. The
/// discretization allowance combines a space-coarsened and a
/// time-refined resolve, so both error axes are measured; time is
/// refined rather than coarsened to stay inside the stability bound.
pub fn cross_check_cmd(ctx: &RunContext) -> Result<(), CliError> {
    let scn = &ctx.scenario;
    let (cs, mm) = scn.build().map_err(schema_err)?;
    let grid = ctx.grid()?;
    let spec = scn
        .space
        .as_ref()
        .ok_or_else(|| schema_err("this command needs a `space` block in the scenario"))?;
    if spec.cells.iter().any(|&c| c % 2 != 0 || c < 4) {
        return Err(schema_err("cross-check halves the space grid: cells must be even and >= 4"));
    }
    let mut writer = ctx.writer("cross-check")?;

    let fine = SpaceGrid::new(&spec.lo, &spec.hi, &spec.cells).map_err(core_err)?;
    let coarse_cells: Vec<usize> = spec.cells.iter().map(|&c| c / 2).collect();
    let coarse = SpaceGrid::new(&spec.lo, &spec.hi, &coarse_cells).map_err(core_err)?;
    let refined_time =
        TimeGrid::new(scn.time.t0, scn.time.t_end, 2 * grid.steps).map_err(core_err)?;
    let v_fine = solve_pde(&cs, &mm, &grid, &fine, &cs.h).map_err(core_err)?.value(0, &scn.x0);
    writer.mark_stage("pde-fine");
    let v_coarse =
        solve_pde(&cs, &mm, &grid, &coarse, &cs.h).map_err(core_err)?.value(0, &scn.x0);
    let v_refined = solve_pde(&cs, &mm, &refined_time, &fine, &cs.h)
        .map_err(core_err)?
        .value(0, &scn.x0);
    writer.mark_stage("pde-resolves");
    let allowance = 2.0 * ((v_fine - v_coarse).abs() + (v_fine - v_refined).abs());

    let family =
        PolicyFamily::new(scn.decision_node_list(grid.steps), grid.steps).map_err(core_err)?;
    let cfg = ctx.value_config();
    let mc = open_loop_value(&cs, &mm, &grid, &scn.x0, &family, &cfg, scn.master_seed)
        .map_err(core_err)?;
    writer.mark_stage("monte-carlo");

    let gap = (mc.value - v_fine).abs();
    let rows = vec![
        vec!["pde_fine".to_string(), fmt(v_fine)],
        vec!["pde_space_coarse".to_string(), fmt(v_coarse)],
        vec!["pde_time_refined".to_string(), fmt(v_refined)],
        vec!["monte_carlo".to_string(), fmt(mc.value)],
        vec!["gap".to_string(), fmt(gap)],
    ];
    writer.write_csv(&["quantity", "value"], &rows).map_err(io_err)?;
    writer
        .write_report(&CrossCheckReport {
            pde_fine: v_fine,
            pde_space_coarse: v_coarse,
            pde_time_refined: v_refined,
            refinement_allowance: allowance,
            monte_carlo: (&mc).into(),
            gap,
            within: gap <= allowance + 3.0 * mc.std_error,
        })
        .map_err(io_err)?;
    writer.finish().map_err(io_err)
}

// ------------------------------------------------------------ mollify-report

#[derive(Serialize)]
struct MollifyLevelOut {
    level: u32,
    delta_h: f64,
    delta_f_max: f64,
    delta_lambda_max: f64,
    envelope_y0: f64,
}

#[derive(Serialize)]
struct MollifyReport {
    c_v: f64,
    l_y: f64,
    c_phi: f64,
    levels: Vec<MollifyLevelOut>,
    delta_h_ratios: Vec<f64>,
    delta_f_ratios: Vec<f64>,
    delta_lambda_ratios: Vec<f64>,
    envelope_ratios: Vec<f64>,
    deltas_halve: bool,
    envelope_decreasing: bool,
}

fn ratio(prev: f64, next: f64) -> f64 {
    if prev == 0.0 {
        if next == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        next / prev
    }
}

/// Smoothing-error table over the scenario's mollification levels and
/// the bounding envelope each level induces.
pub fn mollify_report_cmd(ctx: &RunContext) -> Result<(), CliError> {
    let scn = &ctx.scenario;
    let (cs, mm) = scn.build().map_err(schema_err)?;
    let grid = ctx.grid()?;
    let probe = ctx.probe()?;
    if scn.mollify_levels.is_empty() {
        return Err(schema_err("this command needs a nonempty `mollify_levels` list"));
    }
    let mut writer = ctx.writer("mollify-report")?;

    let lyap =
        lyapunov_check(&cs, &mm, scn.growth_exponent, &probe).map_err(core_err)?;
    let constants = BoundingConstants {
        c_v: scn.bounding_c_v,
        l_y: scn.driver.lipschitz_y(),
        c_phi: lyap.c_phi,
    };
    writer.mark_stage("absorption-rate");

    let times = grid.nodes().to_vec();
    let mut levels = Vec::with_capacity(scn.mollify_levels.len());
    for &level in &scn.mollify_levels {
        let spec = MollifierSpec::new(level, cs.n).map_err(core_err)?;
        let errs = coefficient_errors(&cs, &mm, &spec, &probe, &times).map_err(core_err)?;
        let envelope = bounding_bsde(errs.delta_h, &errs.delta_f, &errs.delta_lambda, &constants, &grid)
            .map_err(core_err)?;
        levels.push(MollifyLevelOut {
            level,
            delta_h: errs.delta_h,
            delta_f_max: errs.delta_f.iter().cloned().fold(0.0, f64::max),
            delta_lambda_max: errs.delta_lambda.iter().cloned().fold(0.0, f64::max),
            envelope_y0: envelope[0],
        });
    }
    writer.mark_stage("error-table");

    let pair_ratios = |pick: &dyn Fn(&MollifyLevelOut) -> f64| -> Vec<f64> {
        levels.windows(2).map(|w| ratio(pick(&w[0]), pick(&w[1]))).collect()
    };
    let delta_h_ratios = pair_ratios(&|l| l.delta_h);
    let delta_f_ratios = pair_ratios(&|l| l.delta_f_max);
    let delta_lambda_ratios = pair_ratios(&|l| l.delta_lambda_max);
    let envelope_ratios = pair_ratios(&|l| l.envelope_y0);
    // The halving flag only inspects consecutive exact level doublings.
    let deltas_halve = levels.windows(2).enumerate().all(|(i, w)| {
        w[1].level != 2 * w[0].level
            || (delta_h_ratios[i] <= 0.6
                && delta_f_ratios[i] <= 0.6
                && delta_lambda_ratios[i] <= 0.6)
    });
    let envelope_decreasing =
        levels.windows(2).all(|w| w[1].envelope_y0 < w[0].envelope_y0);

    let rows: Vec<Vec<String>> = levels
        .iter()
        .map(|l| {
            vec![
                l.level.to_string(),
                fmt(l.delta_h),
                fmt(l.delta_f_max),
                fmt(l.delta_lambda_max),
                fmt(l.envelope_y0),
            ]
        })
        .collect();
    writer
        .write_csv(&["level", "delta_h", "delta_f_max", "delta_lambda_max", "envelope_y0"], &rows)
        .map_err(io_err)?;
    writer
        .write_report(&MollifyReport {
            c_v: constants.c_v,
            l_y: constants.l_y,
            c_phi: constants.c_phi,
            levels,
            delta_h_ratios,
            delta_f_ratios,
            delta_lambda_ratios,
            envelope_ratios,
            deltas_halve,
            envelope_decreasing,
        })
        .map_err(io_err)?;
    writer.finish().map_err(io_err)
}

// ----------------------------------------------------------- lyapunov-report

#[derive(Serialize)]
struct LyapunovRow {
    p: f64,
    half_width: f64,
    c_phi: f64,
    weighted_c: f64,
}

#[derive(Serialize)]
struct StabilityOut {
    p: f64,
    small_box: f64,
    large_box: f64,
    stable: bool,
}

#[derive(Serialize)]
struct PureDiffusionOut {
    trace: f64,
    max_ratio_deviation: f64,
}

#[derive(Serialize)]
struct PenaltyOut {
    points: usize,
    max_gradient_rel_err: f64,
    max_hessian_rel_err: f64,
    min_floor_margin: f64,
}

#[derive(Serialize)]
struct LyapunovCmdReport {
    rows: Vec<LyapunovRow>,
    stability: Vec<StabilityOut>,
    pure_diffusion: Option<PureDiffusionOut>,
    penalty: PenaltyOut,
}

/// Absorption rates of `1 + |x|^p` over two nested probe boxes, the
/// closed-form ratio check for constant pure diffusions, and the
/// penalty-function derivative verification.
pub fn lyapunov_report_cmd(ctx: &RunContext) -> Result<(), CliError> {
    let scn = &ctx.scenario;
    let (cs, mm) = scn.build().map_err(schema_err)?;
    let spec = scn
        .probe
        .as_ref()
        .ok_or_else(|| schema_err("this command needs a `probe` block in the scenario"))?;
    let mut writer = ctx.writer("lyapunov-report")?;

    let small = scn.probe_states(spec.half_width, spec.points);
    let large = scn.probe_states(2.0 * spec.half_width, 2 * (spec.points - 1) + 1);
    let mut rows = Vec::new();
    let mut stability = Vec::new();
    let mut small_p2 = None;
    for &p in &[2.0, 3.0] {
        let rep_small = lyapunov_check(&cs, &mm, p, &small).map_err(core_err)?;
        let rep_large = lyapunov_check(&cs, &mm, p, &large).map_err(core_err)?;
        let scale = rep_small.c_phi.abs().max(rep_large.c_phi.abs()).max(1e-12);
        stability.push(StabilityOut {
            p,
            small_box: rep_small.c_phi,
            large_box: rep_large.c_phi,
            stable: (rep_large.c_phi - rep_small.c_phi).abs() <= 0.1 * scale,
        });
        rows.push(LyapunovRow {
            p,
            half_width: spec.half_width,
            c_phi: rep_small.c_phi,
            weighted_c: rep_small.weighted_c,
        });
        rows.push(LyapunovRow {
            p,
            half_width: 2.0 * spec.half_width,
            c_phi: rep_large.c_phi,
            weighted_c: rep_large.weighted_c,
        });
        if p == 2.0 {
            small_p2 = Some(rep_small);
        }
    }
    writer.mark_stage("absorption-rates");

    // For constant sigma with zero drift and no jumps the generator of
    // 1 + |x|^2 is exactly trace(sigma sigma^T), so every probe ratio
    // has the closed form trace / (1 + |x|^2).
    let jumps_off = matches!(scn.jump, JumpSpec::Zero) || scn.mark_atoms.is_empty();
    let pure_diffusion = match (&scn.drift, &scn.diffusion, jumps_off) {
        (DriftSpec::Zero, DiffusionSpec::Constant { matrix }, true) => {
            let trace: f64 = matrix.iter().flatten().map(|v| v * v).sum();
            let rep = small_p2.expect("p = 2 report was just computed");
            let max_dev = small
                .iter()
                .zip(&rep.ratios)
                .map(|(x, &r)| {
                    let norm2: f64 = x.iter().map(|v| v * v).sum();
                    (r - trace / (1.0 + norm2)).abs()
                })
                .fold(0.0, f64::max);
            Some(PureDiffusionOut { trace, max_ratio_deviation: max_dev })
        }
        _ => None,
    };

    let penalty = penalty_section(scn).map_err(core_err)?;
    writer.mark_stage("penalty");

    let csv_rows: Vec<Vec<String>> = rows
        .iter()
        .map(|r| vec![fmt(r.p), fmt(r.half_width), fmt(r.c_phi), fmt(r.weighted_c)])
        .collect();
    writer
        .write_csv(&["p", "half_width", "c_phi", "weighted_c"], &csv_rows)
        .map_err(io_err)?;
    writer
        .write_report(&LyapunovCmdReport { rows, stability, pure_diffusion, penalty })
        .map_err(io_err)?;
    writer.finish().map_err(io_err)
}

/// Central-difference verification of the penalty gradient and Hessian
/// on seeded random points around `x0`, plus the minimum-eigenvalue
/// floor margin.
fn penalty_section(scn: &Scenario) -> Result<PenaltyOut, CoreError> {
    let n = scn.state_dim;
    let center = scn.x0.clone();
    let mut rng = derive_stream(scn.master_seed, "penalty-probe", 0);
    let points: Vec<Vec<f64>> = (0..100)
        .map(|_| (0..n).map(|c| center[c] + rng.gen_range(-2.0..2.0)).collect())
        .collect();

    let h = 1e-5;
    let mut max_grad = 0.0_f64;
    let mut max_hess = 0.0_f64;
    let mut min_floor = f64::INFINITY;
    for x in &points {
        for &p in &[2.0, 3.0] {
            let eval = penalty_chi(x, &center, p)?;
            let hess = penalty_hessian(x, &center, p)?;
            for axis in 0..n {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[axis] += h;
                xm[axis] -= h;
                let fd_grad = (penalty_chi(&xp, &center, p)?.value
                    - penalty_chi(&xm, &center, p)?.value)
                    / (2.0 * h);
                let denom = eval.gradient[axis].abs().max(1.0);
                max_grad = max_grad.max((fd_grad - eval.gradient[axis]).abs() / denom);
                let gp = penalty_chi(&xp, &center, p)?.gradient;
                let gm = penalty_chi(&xm, &center, p)?.gradient;
                for r in 0..n {
                    let fd_h = (gp[r] - gm[r]) / (2.0 * h);
                    let denom = hess[(r, axis)].abs().max(1.0);
                    max_hess = max_hess.max((fd_h - hess[(r, axis)]).abs() / denom);
                }
            }
            let eig_min = hess
                .clone()
                .symmetric_eigen()
                .eigenvalues
                .iter()
                .cloned()
                .fold(f64::INFINITY, f64::min);
            min_floor = min_floor.min(eig_min - eval.hessian_min_eig);
        }
    }
    Ok(PenaltyOut {
        points: points.len(),
        max_gradient_rel_err: max_grad,
        max_hessian_rel_err: max_hess,
        min_floor_margin: min_floor,
    })
}

// ------------------------------------------------------------ project-report

#[derive(Serialize)]
struct ProjectRow {
    intervals: usize,
    groups: usize,
    residual: f64,
}

#[derive(Serialize)]
struct ProjectReport {
    n_paths: usize,
    target: String,
    rows: Vec<ProjectRow>,
    nonincreasing: bool,
}

/// In-sample regression residual of the terminal state against the
/// quadratic cylinder basis of each coarse noise projection.
pub fn project_report_cmd(ctx: &RunContext) -> Result<(), CliError> {
    let scn = &ctx.scenario;
    let (cs, mm) = scn.build().map_err(schema_err)?;
    let grid = ctx.grid()?;
    if scn.projection_levels.is_empty() {
        return Err(schema_err("this command needs a nonempty `projection_levels` list"));
    }
    let mut writer = ctx.writer("project-report")?;

    let n_paths = scn.solver.n_paths.min(scn.solver.projection_paths);
    let policy = constant_policy(DVector::from_column_slice(&scn.control_set[0]));
    let bundle =
        simulate(&cs, &mm, &grid, &scn.x0, &policy, n_paths, scn.master_seed).map_err(core_err)?;
    writer.mark_stage("simulate");

    let steps = grid.steps;
    let n_atoms = mm.n_atoms();
    let mut levels = Vec::with_capacity(scn.projection_levels.len());
    for spec in &scn.projection_levels {
        let nodes: Vec<usize> = (0..=spec.intervals).map(|j| j * steps / spec.intervals).collect();
        let groups: Vec<Vec<usize>> = if spec.groups == 0 {
            Vec::new()
        } else {
            let block = n_atoms / spec.groups;
            (0..spec.groups).map(|b| (b * block..(b + 1) * block).collect()).collect()
        };
        levels.push((nodes, groups));
    }
    let target = move |bundle: &PathBundle, p: usize| bundle.state(p, steps)[0];
    let table = projection_error(&target, &bundle, &mm, &levels).map_err(core_err)?;
    writer.mark_stage("regressions");

    let rows: Vec<ProjectRow> = table
        .iter()
        .map(|r| ProjectRow { intervals: r.intervals, groups: r.groups, residual: r.residual })
        .collect();
    let nonincreasing =
        rows.windows(2).all(|w| w[1].residual <= w[0].residual * (1.0 + 1e-9) + 1e-12);
    let csv_rows: Vec<Vec<String>> = rows
        .iter()
        .map(|r| vec![r.intervals.to_string(), r.groups.to_string(), fmt(r.residual)])
        .collect();
    writer.write_csv(&["intervals", "groups", "residual"], &csv_rows).map_err(io_err)?;
    writer
        .write_report(&ProjectReport {
            n_paths,
            target: "terminal state, first coordinate".into(),
            rows,
            nonincreasing,
        })
        .map_err(io_err)?;
    writer.finish().map_err(io_err)
}
