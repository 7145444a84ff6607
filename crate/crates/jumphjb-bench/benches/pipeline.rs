//! Stage timings for the toolkit at desk scale: forward simulation,
//! backward regression solve, grid solve, smoothing-error evaluation,
//! and policy-family value estimation.

use criterion::{criterion_group, criterion_main, Criterion};
use jumphjb_bench::{control_problem, jump_problem};
use jumphjb_core::approx::{coefficient_errors, MollifierSpec};
use jumphjb_core::bsde;
use jumphjb_core::forward_sim::{constant_policy, simulate, TimeGrid};
use jumphjb_core::integro_pde::{solve_pde, SpaceGrid};
use jumphjb_core::regression::RegressionBasis;
use jumphjb_core::value_dpp::{open_loop_value, PolicyFamily, ValueConfig, ValueMode};
use nalgebra::DVector;

fn bench_forward_simulation(c: &mut Criterion) {
    let (cs, mm) = jump_problem();
    let grid = TimeGrid::new(0.0, 1.0, 32).unwrap();
    let policy = constant_policy(DVector::from_vec(vec![0.0]));
    c.bench_function("simulate_1000_paths_32_steps", |b| {
        b.iter(|| simulate(&cs, &mm, &grid, &[1.0], &policy, 1_000, 7).unwrap())
    });
}

fn bench_backward_solve(c: &mut Criterion) {
    let (cs, mm) = jump_problem();
    let grid = TimeGrid::new(0.0, 1.0, 32).unwrap();
    let policy = constant_policy(DVector::from_vec(vec![0.0]));
    let bundle = simulate(&cs, &mm, &grid, &[1.0], &policy, 1_000, 7).unwrap();
    let basis = RegressionBasis::polynomial_for(2, &bundle).unwrap();
    c.bench_function("bsde_solve_1000_paths_degree_2", |b| {
        b.iter(|| bsde::solve(&cs, &mm, &bundle, &basis).unwrap())
    });
}

fn bench_grid_solve(c: &mut Criterion) {
    let (cs, mm) = control_problem();
    let grid = TimeGrid::new(0.0, 0.5, 256).unwrap();
    let space = SpaceGrid::new(&[-2.0], &[3.0], &[128]).unwrap();
    c.bench_function("pde_solve_128_cells_256_steps", |b| {
        b.iter(|| solve_pde(&cs, &mm, &grid, &space, &cs.h).unwrap())
    });
}

fn bench_smoothing_errors(c: &mut Criterion) {
    let (cs, mm) = jump_problem();
    let spec = MollifierSpec::new(8, 1).unwrap();
    let probe: Vec<Vec<f64>> = (0..21).map(|i| vec![-2.0 + 0.2 * i as f64]).collect();
    let times: Vec<f64> = (0..9).map(|i| 0.125 * i as f64).collect();
    c.bench_function("coefficient_errors_level_8", |b| {
        b.iter(|| coefficient_errors(&cs, &mm, &spec, &probe, &times).unwrap())
    });
}

fn bench_open_loop_value(c: &mut Criterion) {
    let (cs, mm) = control_problem();
    let grid = TimeGrid::new(0.0, 0.5, 16).unwrap();
    let family = PolicyFamily::new(vec![0, 8], 16).unwrap();
    let cfg = ValueConfig {
        mode: ValueMode::OpenLoop,
        basis_degree: 2,
        n_paths: 2_000,
        cloud_per_control: 500,
        budget: 1_000_000,
    };
    let mut group = c.benchmark_group("value");
    group.sample_size(20);
    group.bench_function("open_loop_4_sequences_2000_paths", |b| {
        b.iter(|| open_loop_value(&cs, &mm, &grid, &[0.0], &family, &cfg, 7).unwrap())
    });
    group.finish();
}

criterion_group!(
    pipeline,
    bench_forward_simulation,
    bench_backward_solve,
    bench_grid_solve,
    bench_smoothing_errors,
    bench_open_loop_value
);
criterion_main!(pipeline);
