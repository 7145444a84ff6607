//! Least-squares projection onto finite function bases
//!
//! Conditional expectations along simulated paths are approximated by
//! regressing responses on a basis evaluated at the current state. Two
//! families are provided: global polynomials in box-normalized
//! coordinates, and a local partition with one affine patch per cell.
//! Normal equations are assembled and solved sequentially so results do
//! not depend on thread count.

use crate::error::{Error, Result};
use crate::forward_sim::PathBundle;
use nalgebra::DMatrix;
use rayon::prelude::*;

#[derive(Debug, Clone)]
enum BasisKind {
    /// Monomials of bounded total degree in normalized coordinates.
    Polynomial { exponents: Vec<Vec<u32>> },
    /// Per-cell affine functions on a uniform partition of the box.
    LocalPartition { cells_per_axis: usize },
}

/// Function basis over a state box, used as regression regressors.
#[derive(Debug, Clone)]
pub struct RegressionBasis {
    kind: BasisKind,
    lo: Vec<f64>,
    hi: Vec<f64>,
}

/// All exponent tuples of length `n` with total degree at most `degree`,
/// ordered by total degree, then lexicographically.
fn monomial_exponents(n: usize, degree: u32) -> Vec<Vec<u32>> {
    let mut out = Vec::new();
    let mut stack = vec![0u32; n];
    fn rec(out: &mut Vec<Vec<u32>>, stack: &mut Vec<u32>, pos: usize, left: u32, n: usize) {
        if pos + 1 == n {
            stack[pos] = left;
            out.push(stack.clone());
            stack[pos] = 0;
            return;
        }
        for e in 0..=left {
            stack[pos] = e;
            rec(out, stack, pos + 1, left - e, n);
            stack[pos] = 0;
        }
    }
    for total in 0..=degree {
        rec(&mut out, &mut stack, 0, total, n);
    }
    out
}

impl RegressionBasis {
    /// Global polynomial basis of the given total degree on `[lo, hi]`.
    pub fn polynomial(degree: u32, lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        Self::check_box(&lo, &hi)?;
        let exponents = monomial_exponents(lo.len(), degree);
        Ok(Self { kind: BasisKind::Polynomial { exponents }, lo, hi })
    }

    /// Piecewise-affine basis on a uniform partition with
    /// `cells_per_axis` cells along every axis of `[lo, hi]`.
    pub fn local_partition(cells_per_axis: usize, lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        Self::check_box(&lo, &hi)?;
        if cells_per_axis == 0 {
            return Err(Error::InvalidArgument("cells_per_axis must be positive".into()));
        }
        Ok(Self { kind: BasisKind::LocalPartition { cells_per_axis }, lo, hi })
    }

    fn check_box(lo: &[f64], hi: &[f64]) -> Result<()> {
        if lo.is_empty() || lo.len() != hi.len() {
            return Err(Error::InvalidArgument("basis box dimensions are inconsistent".into()));
        }
        if lo.iter().zip(hi).any(|(a, b)| !a.is_finite() || !b.is_finite() || a > b) {
            return Err(Error::InvalidArgument("basis box must be finite with lo <= hi".into()));
        }
        Ok(())
    }

    /// Smallest box containing every state of the bundle, with a margin,
    /// used to keep normalized coordinates of order one.
    pub fn bounding_box(bundle: &PathBundle) -> (Vec<f64>, Vec<f64>) {
        let n = bundle.n;
        let mut lo = vec![f64::INFINITY; n];
        let mut hi = vec![f64::NEG_INFINITY; n];
        for p in 0..bundle.n_paths {
            for i in 0..=bundle.grid.steps {
                for (c, v) in bundle.state(p, i).iter().enumerate() {
                    lo[c] = lo[c].min(*v);
                    hi[c] = hi[c].max(*v);
                }
            }
        }
        for c in 0..n {
            let margin = 0.05 * (hi[c] - lo[c]) + 1e-9;
            lo[c] -= margin;
            hi[c] += margin;
        }
        (lo, hi)
    }

    /// Smallest box containing the flat point list (`dim`-blocks), with
    /// the same margin rule as [`Self::bounding_box`].
    pub fn bounding_box_points(points: &[f64], dim: usize) -> (Vec<f64>, Vec<f64>) {
        let mut lo = vec![f64::INFINITY; dim];
        let mut hi = vec![f64::NEG_INFINITY; dim];
        for chunk in points.chunks_exact(dim) {
            for (c, v) in chunk.iter().enumerate() {
                lo[c] = lo[c].min(*v);
                hi[c] = hi[c].max(*v);
            }
        }
        for c in 0..dim {
            let margin = 0.05 * (hi[c] - lo[c]) + 1e-9;
            lo[c] -= margin;
            hi[c] += margin;
        }
        (lo, hi)
    }

    /// Polynomial basis with the box fitted to a bundle.
    pub fn polynomial_for(degree: u32, bundle: &PathBundle) -> Result<Self> {
        let (lo, hi) = Self::bounding_box(bundle);
        Self::polynomial(degree, lo, hi)
    }

    /// Polynomial basis with the box fitted to a flat point list.
    pub fn polynomial_for_points(degree: u32, points: &[f64], dim: usize) -> Result<Self> {
        let (lo, hi) = Self::bounding_box_points(points, dim);
        Self::polynomial(degree, lo, hi)
    }

    /// Local-partition basis with the box fitted to a bundle.
    pub fn local_partition_for(cells_per_axis: usize, bundle: &PathBundle) -> Result<Self> {
        let (lo, hi) = Self::bounding_box(bundle);
        Self::local_partition(cells_per_axis, lo, hi)
    }

    /// State dimension the basis expects.
    pub fn state_dim(&self) -> usize {
        self.lo.len()
    }

    /// Number of basis functions.
    pub fn len(&self) -> usize {
        match &self.kind {
            BasisKind::Polynomial { exponents } => exponents.len(),
            BasisKind::LocalPartition { cells_per_axis } => {
                cells_per_axis.pow(self.lo.len() as u32) * (self.lo.len() + 1)
            }
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Coordinates mapped affinely so the box becomes `[-1, 1]^n`.
    fn normalize(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        for c in 0..self.lo.len() {
            let width = (self.hi[c] - self.lo[c]).max(1e-12);
            out.push(2.0 * (x[c] - self.lo[c]) / width - 1.0);
        }
    }

    /// Evaluates every basis function at `x` into `out` (length `len()`).
    pub fn eval(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.lo.len());
        debug_assert_eq!(out.len(), self.len());
        let mut s = Vec::with_capacity(self.lo.len());
        self.normalize(x, &mut s);
        match &self.kind {
            BasisKind::Polynomial { exponents } => {
                for (slot, exps) in out.iter_mut().zip(exponents) {
                    let mut v = 1.0;
                    for (c, &e) in exps.iter().enumerate() {
                        for _ in 0..e {
                            v *= s[c];
                        }
                    }
                    *slot = v;
                }
            }
            BasisKind::LocalPartition { cells_per_axis } => {
                out.fill(0.0);
                let n = self.lo.len();
                let c = *cells_per_axis;
                // Cell index per axis from the normalized coordinate,
                // clamped so points in the margin use the edge cell.
                let mut cell = 0usize;
                let mut local = Vec::with_capacity(n);
                for &sc in &s {
                    let t = (sc + 1.0) / 2.0 * c as f64;
                    let idx = (t.floor() as isize).clamp(0, c as isize - 1) as usize;
                    cell = cell * c + idx;
                    // Position within the cell, rescaled to [-1, 1].
                    local.push(2.0 * (t - idx as f64) - 1.0);
                }
                let base = cell * (n + 1);
                out[base] = 1.0;
                for (k, &lc) in local.iter().enumerate() {
                    out[base + 1 + k] = lc;
                }
            }
        }
    }

    /// Design matrix with one row per path, evaluated at node `i`.
    /// Rows are filled in parallel by path index.
    pub fn design_matrix(&self, bundle: &PathBundle, node: usize) -> DMatrix<f64> {
        let m = self.len();
        let mut rows = vec![0.0; bundle.n_paths * m];
        rows.par_chunks_mut(m).enumerate().for_each(|(p, row)| {
            self.eval(bundle.state(p, node), row);
        });
        DMatrix::from_row_slice(bundle.n_paths, m, &rows)
    }

    /// Design matrix with one row per point of a flat point list.
    pub fn design_matrix_points(&self, points: &[f64]) -> DMatrix<f64> {
        let dim = self.state_dim();
        let m = self.len();
        let n_points = points.len() / dim;
        let mut rows = vec![0.0; n_points * m];
        rows.par_chunks_mut(m).enumerate().for_each(|(p, row)| {
            self.eval(&points[p * dim..(p + 1) * dim], row);
        });
        DMatrix::from_row_slice(n_points, m, &rows)
    }
}

/// Result of a multi-response least-squares fit.
pub struct Fit {
    /// Coefficient matrix, one column per response.
    pub coeffs: DMatrix<f64>,
    /// Whether the ridge fallback was applied.
    pub ridge: bool,
}

/// Solves `min ||phi theta - resp||` for every response column through
/// the normal equations with a single Cholesky factorization. On a
/// failed factorization a ridge of `1e-8 * trace / m` is added once; a
/// second failure reports the offending step.
pub fn solve_normal_equations(
    phi: &DMatrix<f64>,
    resp: &DMatrix<f64>,
    step: usize,
) -> Result<Fit> {
    let m = phi.ncols();
    let gram = phi.transpose() * phi;
    let rhs = phi.transpose() * resp;
    let scale = gram.trace() / m as f64;
    // A factorization that "succeeds" with a pivot at rounding level is
    // as unusable as an outright failure, so both routes take the ridge.
    if let Some(ch) = gram.clone().cholesky() {
        let min_pivot = ch.l_dirty().diagonal().iter().fold(f64::INFINITY, |a, &v| a.min(v));
        if min_pivot * min_pivot > 1e-10 * scale {
            return Ok(Fit { coeffs: ch.solve(&rhs), ridge: false });
        }
    }
    let lambda = 1e-8 * scale;
    let ridged = gram + DMatrix::identity(m, m) * lambda;
    match ridged.cholesky() {
        Some(ch) => Ok(Fit { coeffs: ch.solve(&rhs), ridge: true }),
        None => Err(Error::IllConditionedBasis { step }),
    }
}

/// Fitted values `phi * coeffs` at the sample points.
pub fn fitted_values(phi: &DMatrix<f64>, fit: &Fit) -> DMatrix<f64> {
    phi * &fit.coeffs
}
