//! Field interfaces for drift assembly.
//!
//! The nonlinear drift couples a candidate value field `V(t, x)` with a
//! companion vector field `Z(t, x)` in R^d and a mark field `K(t, e, x)`.
//! These traits expose values and the spatial derivatives the assembly
//! needs; implementors with analytic or grid-based derivatives override
//! the central-difference defaults.

use nalgebra::{DMatrix, DVector};
use std::sync::Arc;

/// Step for the default central differences: `1e-4 * (1 + |x|)`.
pub fn fd_step(x: &[f64]) -> f64 {
    1e-4 * (1.0 + x.iter().map(|v| v * v).sum::<f64>().sqrt())
}

/// Central-difference gradient of a scalar function.
pub fn central_gradient(f: impl Fn(&[f64]) -> f64, x: &[f64]) -> DVector<f64> {
    let h = fd_step(x);
    let mut xp = x.to_vec();
    let mut g = DVector::zeros(x.len());
    for i in 0..x.len() {
        xp[i] = x[i] + h;
        let fp = f(&xp);
        xp[i] = x[i] - h;
        let fm = f(&xp);
        xp[i] = x[i];
        g[i] = (fp - fm) / (2.0 * h);
    }
    g
}

/// Central-difference Hessian of a scalar function (symmetric by
/// construction).
pub fn central_hessian(f: impl Fn(&[f64]) -> f64, x: &[f64]) -> DMatrix<f64> {
    let n = x.len();
    let h = fd_step(x);
    let f0 = f(x);
    let mut xp = x.to_vec();
    let mut hess = DMatrix::zeros(n, n);
    for i in 0..n {
        xp[i] = x[i] + h;
        let fp = f(&xp);
        xp[i] = x[i] - h;
        let fm = f(&xp);
        xp[i] = x[i];
        hess[(i, i)] = (fp - 2.0 * f0 + fm) / (h * h);
    }
    for i in 0..n {
        for j in (i + 1)..n {
            xp[i] = x[i] + h;
            xp[j] = x[j] + h;
            let fpp = f(&xp);
            xp[j] = x[j] - h;
            let fpm = f(&xp);
            xp[i] = x[i] - h;
            let fmm = f(&xp);
            xp[j] = x[j] + h;
            let fmp = f(&xp);
            xp[i] = x[i];
            xp[j] = x[j];
            let v = (fpp - fpm - fmp + fmm) / (4.0 * h * h);
            hess[(i, j)] = v;
            hess[(j, i)] = v;
        }
    }
    hess
}

/// A scalar field `(t, x) -> R` with spatial derivatives.
pub trait ScalarField: Sync {
    fn value(&self, t: f64, x: &[f64]) -> f64;

    fn gradient(&self, t: f64, x: &[f64]) -> DVector<f64> {
        central_gradient(|y| self.value(t, y), x)
    }

    fn hessian(&self, t: f64, x: &[f64]) -> DMatrix<f64> {
        central_hessian(|y| self.value(t, y), x)
    }
}

/// A vector field `(t, x) -> R^d` with a spatial Jacobian of shape `n x d`,
/// entry `(i, j) = d value_j / d x_i`.
pub trait VectorField: Sync {
    fn dim(&self) -> usize;

    fn value(&self, t: f64, x: &[f64]) -> DVector<f64>;

    fn jacobian(&self, t: f64, x: &[f64]) -> DMatrix<f64> {
        let n = x.len();
        let h = fd_step(x);
        let mut xp = x.to_vec();
        let mut jac = DMatrix::zeros(n, self.dim());
        for i in 0..n {
            xp[i] = x[i] + h;
            let vp = self.value(t, &xp);
            xp[i] = x[i] - h;
            let vm = self.value(t, &xp);
            xp[i] = x[i];
            for j in 0..self.dim() {
                jac[(i, j)] = (vp[j] - vm[j]) / (2.0 * h);
            }
        }
        jac
    }
}

/// A mark-indexed scalar field `(t, e, x) -> R`.
pub trait MarkField: Sync {
    fn value(&self, t: f64, mark: &[f64], x: &[f64]) -> f64;
}

/// Scalar field backed by a closure, derivatives by central differences.
#[derive(Clone)]
pub struct FnScalarField {
    f: Arc<dyn Fn(f64, &[f64]) -> f64 + Send + Sync>,
}

impl FnScalarField {
    pub fn new(f: impl Fn(f64, &[f64]) -> f64 + Send + Sync + 'static) -> Self {
        Self { f: Arc::new(f) }
    }
}

impl ScalarField for FnScalarField {
    fn value(&self, t: f64, x: &[f64]) -> f64 {
        (self.f)(t, x)
    }
}

/// The zero vector field in R^d.
pub struct ZeroVectorField {
    pub dim: usize,
}

impl VectorField for ZeroVectorField {
    fn dim(&self) -> usize {
        self.dim
    }

    fn value(&self, _t: f64, _x: &[f64]) -> DVector<f64> {
        DVector::zeros(self.dim)
    }

    fn jacobian(&self, _t: f64, x: &[f64]) -> DMatrix<f64> {
        DMatrix::zeros(x.len(), self.dim)
    }
}

/// The zero mark field.
pub struct ZeroMarkField;

impl MarkField for ZeroMarkField {
    fn value(&self, _t: f64, _mark: &[f64], _x: &[f64]) -> f64 {
        0.0
    }
}
