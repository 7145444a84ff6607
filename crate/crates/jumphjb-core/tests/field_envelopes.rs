//! Cross-module checks tying the smoothing toolkit to the field solver:
//! solutions of the mollified problem, inflated by the bounding envelope
//! `Y^l / w_p`, must bracket the solution of the original kinked problem
//! pointwise on the inner box, with bracket widths shrinking in the
//! smoothing level; and the nonlocal second-order variation of a solved
//! field must stay below a `C / w_p` profile whose fitted constant does
//! not move when the box grows.

use jumphjb_core::approx::{
    bounding_bsde, coefficient_errors, lyapunov_check, mollify, weight_wp, BoundingConstants,
    MollifierSpec,
};
use jumphjb_core::coefficients::{CoefficientSet, DriverFn, TerminalFn};
use jumphjb_core::fields::ScalarField;
use jumphjb_core::forward_sim::TimeGrid;
use jumphjb_core::integro_pde::{jump_term_split, solve_pde, PdeSolution, SpaceGrid};
use jumphjb_core::mark_measure::{MarkAtom, MarkMeasure};
use nalgebra::{DMatrix, DVector};
use std::sync::Arc;

/// One-control kinked problem: affine forward coefficients (so the
/// forward mollification error vanishes) with absolute-value kinks in
/// the driver and the terminal cost.
fn kinked_problem() -> (CoefficientSet, MarkMeasure) {
    let cs = CoefficientSet {
        n: 1,
        d: 1,
        control_dim: 1,
        p: 2.0,
        control_set: vec![DVector::zeros(1)],
        b: Arc::new(|_, x: &[f64], _, _| DVector::from_element(1, -0.1 * x[0])),
        sigma: Arc::new(|_, _, _, _| DMatrix::from_element(1, 1, 0.35)),
        g: Arc::new(|_, _, _, _, _| DVector::from_element(1, 0.2)),
        f: Arc::new(|_, x: &[f64], _, y: f64, _, _, _| 0.5 * y + 0.2 * x[0].abs()),
        h: Arc::new(|x: &[f64]| x[0].abs()),
        l_weight: Arc::new(|_, _| 1.0),
    };
    let mm =
        MarkMeasure::new(vec![MarkAtom { mark: vec![1.0], weight: 0.6, rho: 0.5 }]).unwrap();
    (cs, mm)
}

/// The same problem with the terminal cost and the driver's state
/// dependence smoothed at the given level.
fn smoothed_problem(cs: &CoefficientSet, level: u32) -> CoefficientSet {
    let spec = MollifierSpec::new(level, cs.n).unwrap();
    let base_h = cs.h.clone();
    let h: TerminalFn = Arc::new(move |x: &[f64]| mollify(|y| base_h(y), &spec, x));
    let base_f = cs.f.clone();
    let f: DriverFn = Arc::new(move |t, x, u, yv, z, k, hist| {
        mollify(|xx| base_f(t, xx, u, yv, z, k, hist), &spec, x)
    });
    CoefficientSet { h, f, ..cs.clone() }
}

/// Fitted growth constant of a solved field: the max over time and
/// space nodes of `(|DV| + (1+|x|) ||D^2 V|| + nonlocal variation) w_p`.
fn fitted_growth_constant(
    sol: &PdeSolution,
    cs: &CoefficientSet,
    mm: &MarkMeasure,
    space: &SpaceGrid,
) -> f64 {
    let u = cs.control_set[0].as_slice();
    let mut worst = 0.0f64;
    for (i, &t) in sol.time().nodes().iter().enumerate() {
        let field = sol.field(i);
        for flat in 0..space.n_nodes() {
            let x = space.node_coords(flat);
            let grad = field.gradient(t, &x).norm();
            let hess = field.hessian(t, &x)[(0, 0)].abs();
            let reach = 1.0 + x[0].abs();
            let (low, high) = jump_term_split(field, cs, mm, t, &x, u);
            let score = (grad + reach * hess + low + high) * weight_wp(&x, cs.p);
            worst = worst.max(score);
        }
    }
    worst
}

#[test]
fn smoothed_solutions_sandwich_the_kinked_field_with_shrinking_width() {
    let (cs, mm) = kinked_problem();
    let time = TimeGrid::new(0.0, 0.5, 32).unwrap();
    let space = SpaceGrid::new(&[-3.0], &[3.0], &[64]).unwrap();
    let exact = solve_pde(&cs, &mm, &time, &space, &cs.h.clone()).unwrap();

    let probe: Vec<Vec<f64>> =
        (0..49).map(|i| vec![-3.0 + 6.0 * i as f64 / 48.0]).collect();
    let c_phi = lyapunov_check(&cs, &mm, cs.p, &probe).unwrap().c_phi;
    let c_v = fitted_growth_constant(&exact, &cs, &mm, &space);
    let constants = BoundingConstants { c_v, l_y: 0.5, c_phi };

    let mut widths = Vec::new();
    for level in [4u32, 8, 16] {
        let cs_l = smoothed_problem(&cs, level);
        let smoothed = solve_pde(&cs_l, &mm, &time, &space, &cs_l.h.clone()).unwrap();
        let spec = MollifierSpec::new(level, 1).unwrap();
        let errs =
            coefficient_errors(&cs, &mm, &spec, &probe, &time.nodes()).unwrap();
        let envelope =
            bounding_bsde(errs.delta_h, &errs.delta_f, &errs.delta_lambda, &constants, &time)
                .unwrap();

        for (i, &_t) in time.nodes().iter().enumerate() {
            for flat in 0..space.n_nodes() {
                let x = space.node_coords(flat);
                if x[0].abs() > 1.5 {
                    continue;
                }
                let gap = (smoothed.field(i).value_at(flat) - exact.field(i).value_at(flat))
                    .abs();
                let allowance = envelope[i] / weight_wp(&x, cs.p) + 1e-12;
                assert!(
                    gap <= allowance,
                    "level {}: node ({}, {:.3}) gap {} exceeds envelope {}",
                    level,
                    i,
                    x[0],
                    gap,
                    allowance
                );
            }
        }
        widths.push(envelope[0]);
    }

    for w in widths.windows(2) {
        assert!(
            w[1] <= 1.05 * w[0],
            "bracket width rose from {} to {} as the level doubled",
            w[0],
            w[1]
        );
    }
    assert!(
        widths[2] <= 0.35 * widths[0],
        "bracket width {} -> {} did not shrink substantially over two doublings",
        widths[0],
        widths[2]
    );
}

#[test]
fn split_bound_constant_is_stable_when_the_box_grows() {
    let (cs, mm) = kinked_problem();
    let time = TimeGrid::new(0.0, 0.5, 32).unwrap();
    let u = cs.control_set[0].as_slice();
    let mut fitted = Vec::new();
    for (half, cells) in [(3.0f64, 64usize), (6.0, 128)] {
        let space = SpaceGrid::new(&[-half], &[half], &[cells]).unwrap();
        let sol = solve_pde(&cs, &mm, &time, &space, &cs.h.clone()).unwrap();
        let mut c = 0.0f64;
        for (i, &t) in sol.time().nodes().iter().enumerate() {
            let field = sol.field(i);
            for flat in 0..space.n_nodes() {
                let x = space.node_coords(flat);
                let (low, high) = jump_term_split(field, &cs, &mm, t, &x, u);
                c = c.max((low + high) * weight_wp(&x, cs.p));
            }
        }
        assert!(c.is_finite() && c > 0.0);
        fitted.push(c);
    }
    let spread = (fitted[1] - fitted[0]).abs() / fitted[0].max(fitted[1]);
    assert!(
        spread <= 0.1,
        "fitted nonlocal-variation constant moved from {} to {} under box doubling",
        fitted[0],
        fitted[1]
    );
}
