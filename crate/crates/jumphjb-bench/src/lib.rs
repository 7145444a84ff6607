//! Shared problem builders for the pipeline benchmarks.

use jumphjb_core::coefficients::CoefficientSet;
use jumphjb_core::mark_measure::{MarkAtom, MarkMeasure};
use nalgebra::{DMatrix, DVector};
use std::sync::Arc;

/// Scalar geometric dynamics with two compensated jump atoms and a
/// linear recursive driver; the standard load for stage timings.
pub fn jump_problem() -> (CoefficientSet, MarkMeasure) {
    let cs = CoefficientSet {
        n: 1,
        d: 1,
        control_dim: 1,
        p: 2.0,
        control_set: vec![DVector::from_vec(vec![0.0])],
        b: Arc::new(|_, x: &[f64], _, _| DVector::from_vec(vec![0.05 * x[0]])),
        sigma: Arc::new(|_, x: &[f64], _, _| DMatrix::from_element(1, 1, 0.2 * x[0])),
        g: Arc::new(|_, mark: &[f64], x: &[f64], _, _| {
            DVector::from_vec(vec![0.3 * mark[0] * x[0]])
        }),
        f: Arc::new(|_, _, _, y, _, _, _| 0.5 * y),
        h: Arc::new(|x: &[f64]| x[0]),
        l_weight: Arc::new(|_, _| 1.0),
    };
    let mm = MarkMeasure::new(vec![
        MarkAtom { mark: vec![-0.4], weight: 0.5, rho: 0.7 },
        MarkAtom { mark: vec![0.4], weight: 0.5, rho: 1.2 },
    ])
    .expect("atoms are valid");
    (cs, mm)
}

/// Bang-bang drift toward a quadratic target; the standard controlled
/// load for value-estimation timings.
pub fn control_problem() -> (CoefficientSet, MarkMeasure) {
    let cs = CoefficientSet {
        n: 1,
        d: 1,
        control_dim: 1,
        p: 2.0,
        control_set: vec![DVector::from_vec(vec![-1.0]), DVector::from_vec(vec![1.0])],
        b: Arc::new(|_, _, u: &[f64], _| DVector::from_vec(vec![u[0]])),
        sigma: Arc::new(|_, _, _, _| DMatrix::from_element(1, 1, 0.2)),
        g: Arc::new(|_, _, _, _, _| DVector::zeros(1)),
        f: Arc::new(|_, _, _, _, _, _, _| 0.0),
        h: Arc::new(|x: &[f64]| (x[0] - 1.0) * (x[0] - 1.0)),
        l_weight: Arc::new(|_, _| 1.0),
    };
    let mm = MarkMeasure::new(Vec::new()).expect("empty measure is valid");
    (cs, mm)
}
