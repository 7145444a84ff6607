//! Finite-difference solver for the deterministic-coefficient backward
//! integro-PDE and its cross-checks against the probabilistic solver
//!
//! With deterministic, uniformly elliptic coefficients the backward
//! random field loses its martingale characteristics and the recursion
//! collapses to `-dV/ds = inf_u H(s, x, u, V, DV, 0, 0, D^2V, L(V))`
//! with `V(T, .) = h`. The solver marches this equation backward with an
//! explicit step: grid-spaced central differences supply `DV` and
//! `D^2V`, the atom quadrature supplies the nonlocal terms exactly in
//! the measure, and each node takes the minimum over the finite control
//! set. A solved field induces a candidate solution triple along any
//! simulated bundle via `Y = V(t, X)`, `Z = sigma^T DV(t, X)`, and
//! `K(e) = V(t, X + g) - V(t, X)`, which the martingale-residual check
//! of the probabilistic solver accepts when the two methods agree.

use crate::bsde::BsdeSolution;
use crate::coefficients::{drift_f, CoefficientSet, TerminalFn};
use crate::error::{Error, Result};
use crate::fields::{ScalarField, ZeroMarkField, ZeroVectorField};
use crate::forward_sim::{PathBundle, TimeGrid};
use crate::history::NoiseHistory;
use crate::mark_measure::MarkMeasure;
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

/// Uniform box grid in dimension 1 or 2.
///
/// Nodes sit at `lo + i * dx` per axis, flattened row-major with the
/// last axis fastest. Around the box lies an extrapolation collar (a
/// tenth of the span plus one cell per axis) inside which order-1
/// extrapolation of nodal data is trusted; displacements leaving the
/// collar are domain errors.
#[derive(Debug, Clone, PartialEq)]
pub struct SpaceGrid {
    lo: Vec<f64>,
    hi: Vec<f64>,
    cells: Vec<usize>,
}

impl SpaceGrid {
    pub fn new(lo: &[f64], hi: &[f64], cells: &[usize]) -> Result<Self> {
        let n = lo.len();
        if n == 0 || n > 2 {
            return Err(Error::InvalidArgument(format!(
                "space grid dimension must be 1 or 2, got {}",
                n
            )));
        }
        if hi.len() != n || cells.len() != n {
            return Err(Error::InvalidArgument(
                "space grid bounds and cell counts must share one dimension".into(),
            ));
        }
        for i in 0..n {
            if !lo[i].is_finite() || !hi[i].is_finite() || hi[i] <= lo[i] {
                return Err(Error::InvalidArgument(format!(
                    "axis {} needs finite bounds with hi > lo, got [{}, {}]",
                    i, lo[i], hi[i]
                )));
            }
            if cells[i] < 2 {
                return Err(Error::InvalidArgument(format!(
                    "axis {} needs at least 2 cells, got {}",
                    i, cells[i]
                )));
            }
        }
        Ok(Self { lo: lo.to_vec(), hi: hi.to_vec(), cells: cells.to_vec() })
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn lo(&self) -> &[f64] {
        &self.lo
    }

    pub fn hi(&self) -> &[f64] {
        &self.hi
    }

    pub fn cells(&self, axis: usize) -> usize {
        self.cells[axis]
    }

    pub fn dx(&self, axis: usize) -> f64 {
        (self.hi[axis] - self.lo[axis]) / self.cells[axis] as f64
    }

    pub fn nodes_per_axis(&self, axis: usize) -> usize {
        self.cells[axis] + 1
    }

    pub fn n_nodes(&self) -> usize {
        self.cells.iter().map(|c| c + 1).product()
    }

    /// Coordinates of the node with flat index `flat`.
    pub fn node_coords(&self, flat: usize) -> Vec<f64> {
        let mut idx = flat;
        let mut coords = vec![0.0; self.dim()];
        for axis in (0..self.dim()).rev() {
            let nodes = self.nodes_per_axis(axis);
            coords[axis] = self.lo[axis] + (idx % nodes) as f64 * self.dx(axis);
            idx /= nodes;
        }
        coords
    }

    /// Width of the extrapolation collar along `axis`.
    pub fn collar(&self, axis: usize) -> f64 {
        0.1 * (self.hi[axis] - self.lo[axis]) + self.dx(axis)
    }

    /// Whether `x` lies in the box extended by the collar.
    pub fn in_collar(&self, x: &[f64]) -> bool {
        x.iter().enumerate().all(|(i, &xi)| {
            let c = self.collar(i);
            xi >= self.lo[i] - c && xi <= self.hi[i] + c
        })
    }
}

/// Scalar values on a `SpaceGrid`, evaluated anywhere by multilinear
/// interpolation inside the box and order-1 (linear) extrapolation of
/// the boundary cell outside.
///
/// As a `ScalarField` the slice is frozen in time: the time argument is
/// ignored, and spatial derivatives use grid-spaced central differences
/// rather than small-increment ones, so that at nodes they coincide
/// with the classical stencils (piecewise-multilinear data has no
/// meaningful small-scale curvature).
#[derive(Debug, Clone)]
pub struct GridField {
    grid: SpaceGrid,
    values: Vec<f64>,
}

impl GridField {
    /// Samples `f` at every node.
    pub fn from_fn(grid: &SpaceGrid, f: impl Fn(&[f64]) -> f64 + Sync) -> Result<Self> {
        let values: Vec<f64> =
            (0..grid.n_nodes()).into_par_iter().map(|flat| f(&grid.node_coords(flat))).collect();
        Self::from_values(grid.clone(), values)
    }

    pub fn from_values(grid: SpaceGrid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.n_nodes() {
            return Err(Error::InvalidArgument(format!(
                "expected {} nodal values, got {}",
                grid.n_nodes(),
                values.len()
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { context: format!("grid field value at node {}", pos) });
        }
        Ok(Self { grid, values })
    }

    pub fn grid(&self) -> &SpaceGrid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn value_at(&self, flat: usize) -> f64 {
        self.values[flat]
    }

    /// Cell index and local coordinate along one axis. The cell is
    /// clamped to the box; the local coordinate is not, which makes the
    /// multilinear formula extrapolate linearly outside.
    fn locate(&self, axis: usize, xi: f64) -> (usize, f64) {
        let dx = self.grid.dx(axis);
        let rel = (xi - self.grid.lo[axis]) / dx;
        let cell = (rel.floor() as isize).clamp(0, self.grid.cells[axis] as isize - 1) as usize;
        (cell, rel - cell as f64)
    }

    /// Multilinear interpolation, linear extrapolation outside the box.
    pub fn eval(&self, x: &[f64]) -> f64 {
        debug_assert_eq!(x.len(), self.grid.dim());
        match self.grid.dim() {
            1 => {
                let (c, a) = self.locate(0, x[0]);
                let v0 = self.values[c];
                let v1 = self.values[c + 1];
                v0 + a * (v1 - v0)
            }
            _ => {
                let (c0, a0) = self.locate(0, x[0]);
                let (c1, a1) = self.locate(1, x[1]);
                let n1 = self.grid.nodes_per_axis(1);
                let v00 = self.values[c0 * n1 + c1];
                let v01 = self.values[c0 * n1 + c1 + 1];
                let v10 = self.values[(c0 + 1) * n1 + c1];
                let v11 = self.values[(c0 + 1) * n1 + c1 + 1];
                let low = v00 + a1 * (v01 - v00);
                let high = v10 + a1 * (v11 - v10);
                low + a0 * (high - low)
            }
        }
    }
}

impl ScalarField for GridField {
    fn value(&self, _t: f64, x: &[f64]) -> f64 {
        self.eval(x)
    }

    fn gradient(&self, _t: f64, x: &[f64]) -> DVector<f64> {
        let n = self.grid.dim();
        let mut out = DVector::zeros(n);
        let mut xp = x.to_vec();
        for i in 0..n {
            let h = self.grid.dx(i);
            xp[i] = x[i] + h;
            let vp = self.eval(&xp);
            xp[i] = x[i] - h;
            let vm = self.eval(&xp);
            xp[i] = x[i];
            out[i] = (vp - vm) / (2.0 * h);
        }
        out
    }

    fn hessian(&self, _t: f64, x: &[f64]) -> DMatrix<f64> {
        let n = self.grid.dim();
        let v0 = self.eval(x);
        let mut out = DMatrix::zeros(n, n);
        let mut xp = x.to_vec();
        for i in 0..n {
            let h = self.grid.dx(i);
            xp[i] = x[i] + h;
            let vp = self.eval(&xp);
            xp[i] = x[i] - h;
            let vm = self.eval(&xp);
            xp[i] = x[i];
            out[(i, i)] = (vp - 2.0 * v0 + vm) / (h * h);
        }
        if n == 2 {
            let (h0, h1) = (self.grid.dx(0), self.grid.dx(1));
            let at = |s0: f64, s1: f64| {
                let y = [x[0] + s0 * h0, x[1] + s1 * h1];
                self.eval(&y)
            };
            let cross =
                (at(1.0, 1.0) - at(1.0, -1.0) - at(-1.0, 1.0) + at(-1.0, -1.0)) / (4.0 * h0 * h1);
            out[(0, 1)] = cross;
            out[(1, 0)] = cross;
        }
        out
    }
}

/// Backward solution of the integro-PDE: one field per time node.
#[derive(Debug, Clone)]
pub struct PdeSolution {
    time: TimeGrid,
    fields: Vec<GridField>,
}

impl PdeSolution {
    pub fn time(&self) -> &TimeGrid {
        &self.time
    }

    pub fn space(&self) -> &SpaceGrid {
        self.fields[0].grid()
    }

    /// Field at time node `i`.
    pub fn field(&self, i: usize) -> &GridField {
        &self.fields[i]
    }

    pub fn fields(&self) -> &[GridField] {
        &self.fields
    }

    /// Interpolated value at time node `i` and state `x`.
    pub fn value(&self, i: usize, x: &[f64]) -> f64 {
        self.fields[i].eval(x)
    }
}

/// Largest and smallest eigenvalue of the symmetric 1x1 or 2x2 matrix
/// `sigma sigma^T`.
fn diffusion_eigs(sigma: &DMatrix<f64>) -> (f64, f64) {
    let ss = sigma * sigma.transpose();
    match ss.nrows() {
        1 => (ss[(0, 0)], ss[(0, 0)]),
        _ => {
            let (a, b, d) = (ss[(0, 0)], ss[(0, 1)], ss[(1, 1)]);
            let mean = 0.5 * (a + d);
            let radius = (0.25 * (a - d) * (a - d) + b * b).sqrt();
            (mean - radius, mean + radius)
        }
    }
}

/// Solves the backward equation on `space` over `time` with terminal
/// data `terminal`, by explicit time stepping.
///
/// Before stepping, the diffusion is probed for uniform ellipticity at
/// every (time node, space node, control) triple and the step size is
/// checked against the stability bound
/// `dt <= dx^2 / (n max||sigma sigma^T|| + dx^2 (nu(E) + max|b| / dx))`.
/// During stepping every jump displacement must stay inside the
/// extrapolation collar. The step evaluates the drift minimization at
/// the right endpoint of each interval, where the known field lives.
pub fn solve_pde(
    cs: &CoefficientSet,
    mm: &MarkMeasure,
    time: &TimeGrid,
    space: &SpaceGrid,
    terminal: &TerminalFn,
) -> Result<PdeSolution> {
    cs.validate()?;
    if cs.n != space.dim() {
        return Err(Error::InvalidArgument(format!(
            "state dimension {} does not match grid dimension {}",
            cs.n,
            space.dim()
        )));
    }
    let hist = NoiseHistory::empty();
    let n_nodes = space.n_nodes();

    // Ellipticity and stability probe over the full node/control/time set.
    let mut min_eig = f64::INFINITY;
    let mut max_diffusion = 0.0f64;
    let mut max_drift = 0.0f64;
    for &t in time.nodes() {
        for flat in 0..n_nodes {
            let x = space.node_coords(flat);
            for u in &cs.control_set {
                let sigma = (cs.sigma)(t, &x, u.as_slice(), &hist);
                let (lo_eig, hi_eig) = diffusion_eigs(&sigma);
                min_eig = min_eig.min(lo_eig);
                max_diffusion = max_diffusion.max(hi_eig);
                max_drift = max_drift.max((cs.b)(t, &x, u.as_slice(), &hist).norm());
            }
        }
    }
    if min_eig < 1e-10 {
        return Err(Error::NotElliptic { min_eig });
    }
    let dx_min = (0..space.dim()).map(|i| space.dx(i)).fold(f64::INFINITY, f64::min);
    let denom = space.dim() as f64 * max_diffusion
        + dx_min * dx_min * (mm.total_mass() + max_drift / dx_min);
    let required = dx_min * dx_min / denom;
    if time.dt() > required * (1.0 + 1e-12) {
        return Err(Error::StepTooLarge { dt: time.dt(), required });
    }

    let terminal_field = GridField::from_fn(space, |x| terminal(x))?;
    let mut reversed = Vec::with_capacity(time.steps + 1);
    reversed.push(terminal_field);
    let dt = time.dt();
    let zero_z = ZeroVectorField { dim: cs.d };
    let zero_k = ZeroMarkField;
    for i in (0..time.steps).rev() {
        let t_next = time.node(i + 1);
        let next = reversed.last().unwrap();
        let values: Vec<f64> = (0..n_nodes)
            .into_par_iter()
            .map(|flat| {
                let x = space.node_coords(flat);
                for u in &cs.control_set {
                    for atom in mm.atoms() {
                        let g = (cs.g)(t_next, &atom.mark, &x, u.as_slice(), &hist);
                        let displaced: Vec<f64> =
                            x.iter().zip(g.iter()).map(|(a, b)| a + b).collect();
                        if !space.in_collar(&displaced) {
                            return Err(Error::DomainTooSmall { point: displaced });
                        }
                    }
                }
                let ev = drift_f(cs, mm, t_next, &x, next, &zero_z, &zero_k, &hist)?;
                let v = next.value_at(flat) + dt * ev.value;
                if !v.is_finite() {
                    return Err(Error::NonFinite {
                        context: format!("pde value at time node {}, space node {}", i, flat),
                    });
                }
                Ok(v)
            })
            .collect::<Result<_>>()?;
        reversed.push(GridField { grid: space.clone(), values });
    }
    reversed.reverse();
    Ok(PdeSolution { time: time.clone(), fields: reversed })
}

/// Splits the integrated absolute second-order jump difference
/// `sum_a w_a |V(x + g_a) - V(x) - <DV(x), g_a>|` of a field at `x`
/// into the contributions of small-amplitude atoms (`rho < 1`, where
/// the difference is second order) and large-amplitude atoms
/// (`rho >= 1`, where it is controlled by growth alone).
pub fn jump_term_split(
    field: &GridField,
    cs: &CoefficientSet,
    mm: &MarkMeasure,
    t: f64,
    x: &[f64],
    u: &[f64],
) -> (f64, f64) {
    let hist = NoiseHistory::empty();
    let v0 = field.eval(x);
    let grad = field.gradient(t, x);
    let mut low = 0.0;
    let mut high = 0.0;
    for atom in mm.atoms() {
        let g = (cs.g)(t, &atom.mark, x, u, &hist);
        let displaced: Vec<f64> = x.iter().zip(g.iter()).map(|(a, b)| a + b).collect();
        let diff = atom.weight * (field.eval(&displaced) - v0 - grad.dot(&g)).abs();
        if atom.rho < 1.0 {
            low += diff;
        } else {
            high += diff;
        }
    }
    (low, high)
}

/// Reads a candidate solution triple off a solved field along a bundle:
/// `Y_i = V(t_i, X_i)`, `Z_i = sigma(t_i, X_i, u_i)^T DV(t_i, X_i)`, and
/// `K_i(e) = V(t_i, X_i + g(t_i, e, X_i, u_i)) - V(t_i, X_i)`. In the
/// deterministic-coefficient regime the field's own Brownian and jump
/// characteristics vanish, so the displaced-value difference is the
/// whole jump integrand. The assembled triple plugs directly into the
/// martingale-residual check of the probabilistic solver.
pub fn evaluate_field_along_path(
    sol: &PdeSolution,
    cs: &CoefficientSet,
    mm: &MarkMeasure,
    bundle: &PathBundle,
) -> Result<BsdeSolution> {
    let steps = bundle.grid.steps;
    if steps != sol.time().steps
        || (bundle.grid.t0 - sol.time().t0).abs() > 1e-12
        || (bundle.grid.t_end - sol.time().t_end).abs() > 1e-12
    {
        return Err(Error::InvalidArgument(
            "bundle and field sequence must share the time grid".into(),
        ));
    }
    if bundle.n != cs.n || cs.n != sol.space().dim() {
        return Err(Error::InvalidArgument(
            "bundle, coefficients, and field must share the state dimension".into(),
        ));
    }
    let n_paths = bundle.n_paths;
    let n_atoms = mm.n_atoms();
    let d = cs.d;
    let space = sol.space();

    struct PathEval {
        y: Vec<f64>,
        z: Vec<f64>,
        k: Vec<f64>,
        k_agg: Vec<f64>,
    }

    let rows: Vec<PathEval> = (0..n_paths)
        .into_par_iter()
        .map(|p| {
            let mut y = vec![0.0; steps + 1];
            let mut z = vec![0.0; steps * d];
            let mut k = vec![0.0; steps * n_atoms];
            let mut k_agg = vec![0.0; steps];
            for i in 0..=steps {
                let x = bundle.state(p, i);
                if !space.in_collar(x) {
                    return Err(Error::DomainTooSmall { point: x.to_vec() });
                }
                y[i] = sol.field(i).eval(x);
            }
            for i in 0..steps {
                let t = bundle.grid.node(i);
                let x = bundle.state(p, i);
                let u = bundle.control(p, i);
                let hist = bundle.history(p, i);
                let field = sol.field(i);
                let grad = field.gradient(t, x);
                let sigma = (cs.sigma)(t, x, u, &hist);
                let z_i = sigma.transpose() * &grad;
                z[i * d..(i + 1) * d].copy_from_slice(z_i.as_slice());
                let v0 = field.eval(x);
                for (a, atom) in mm.atoms().iter().enumerate() {
                    let g = (cs.g)(t, &atom.mark, x, u, &hist);
                    let displaced: Vec<f64> =
                        x.iter().zip(g.iter()).map(|(xa, ga)| xa + ga).collect();
                    if !space.in_collar(&displaced) {
                        return Err(Error::DomainTooSmall { point: displaced });
                    }
                    let k_val = field.eval(&displaced) - v0;
                    k[i * n_atoms + a] = k_val;
                    k_agg[i] += atom.weight * (cs.l_weight)(t, &atom.mark) * k_val;
                }
            }
            Ok(PathEval { y, z, k, k_agg })
        })
        .collect::<Result<_>>()?;

    let mut y = Vec::with_capacity(n_paths * (steps + 1));
    let mut z = Vec::with_capacity(n_paths * steps * d);
    let mut k = Vec::with_capacity(n_paths * steps * n_atoms);
    let mut k_agg = Vec::with_capacity(n_paths * steps);
    let mut terminal = Vec::with_capacity(n_paths);
    let mut pathwise = Vec::with_capacity(n_paths);
    for row in rows {
        terminal.push(row.y[steps]);
        pathwise.push(row.y[0]);
        y.extend_from_slice(&row.y);
        z.extend_from_slice(&row.z);
        k.extend_from_slice(&row.k);
        k_agg.extend_from_slice(&row.k_agg);
    }
    Ok(BsdeSolution::from_parts(n_paths, steps, d, n_atoms, y, z, k, k_agg, terminal, pathwise))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bsde::martingale_residuals;
    use crate::coefficients::DriverFn;
    use crate::forward_sim::{constant_policy, simulate};
    use crate::mark_measure::MarkAtom;
    use approx::assert_relative_eq;
    use nalgebra::DVector;
    use std::sync::Arc;

    fn singleton_cs(
        sigma: f64,
        b: f64,
        jump: f64,
        f: DriverFn,
        h: impl Fn(&[f64]) -> f64 + Send + Sync + 'static,
    ) -> CoefficientSet {
        CoefficientSet {
            n: 1,
            d: 1,
            control_dim: 1,
            p: 2.0,
            control_set: vec![DVector::zeros(1)],
            b: Arc::new(move |_, _, _, _| DVector::from_element(1, b)),
            sigma: Arc::new(move |_, _, _, _| DMatrix::from_element(1, 1, sigma)),
            g: Arc::new(move |_, _, _, _, _| DVector::from_element(1, jump)),
            f,
            h: Arc::new(h),
            l_weight: Arc::new(|_, _| 1.0),
        }
    }

    fn zero_driver() -> DriverFn {
        Arc::new(|_, _, _, _, _, _, _| 0.0)
    }

    fn no_jumps() -> MarkMeasure {
        MarkMeasure::new(Vec::new()).unwrap()
    }

    fn one_atom(weight: f64, rho: f64) -> MarkMeasure {
        MarkMeasure::new(vec![MarkAtom { mark: vec![1.0], weight, rho }]).unwrap()
    }

    #[test]
    fn constant_terminal_is_frozen_at_every_time_node() {
        let cs = singleton_cs(0.5, 0.0, 0.0, zero_driver(), |_| 1.7);
        let time = TimeGrid::new(0.0, 1.0, 8).unwrap();
        let space = SpaceGrid::new(&[-1.0], &[1.0], &[8]).unwrap();
        let sol = solve_pde(&cs, &no_jumps(), &time, &space, &cs.h.clone()).unwrap();
        for i in 0..=8 {
            for flat in 0..space.n_nodes() {
                assert_eq!(sol.field(i).value_at(flat), 1.7, "node {} at time {}", flat, i);
            }
        }
    }

    #[test]
    fn heat_solution_matches_gaussian_convolution() {
        // Terminal exp(-x^2 / (2 s0^2)) under pure diffusion has the
        // closed-form solution s0 / s(tau) * exp(-x^2 / (2 s(tau)^2))
        // with s(tau)^2 = s0^2 + sigma^2 tau.
        let sigma = 0.4;
        let s0sq = 0.25;
        let cs = singleton_cs(sigma, 0.0, 0.0, zero_driver(), move |x: &[f64]| {
            (-x[0] * x[0] / (2.0 * s0sq)).exp()
        });
        let horizon = 0.5;
        let time = TimeGrid::new(0.0, horizon, 32).unwrap();
        let space = SpaceGrid::new(&[-2.0], &[2.0], &[64]).unwrap();
        let sol = solve_pde(&cs, &no_jumps(), &time, &space, &cs.h.clone()).unwrap();
        let var = s0sq + sigma * sigma * horizon;
        let exact =
            |x: f64| (s0sq / var).sqrt() * (-x * x / (2.0 * var)).exp();
        let mut sup_err = 0.0f64;
        let mut sup_exact = 0.0f64;
        for flat in 0..space.n_nodes() {
            let x = space.node_coords(flat)[0];
            if x.abs() <= 1.0 {
                sup_err = sup_err.max((sol.field(0).value_at(flat) - exact(x)).abs());
                sup_exact = sup_exact.max(exact(x).abs());
            }
        }
        assert!(
            sup_err <= 0.01 * sup_exact,
            "sup error {} exceeds 1% of sup value {}",
            sup_err,
            sup_exact
        );
    }

    #[test]
    fn jump_transport_matches_poisson_series() {
        // Linear terminal under a compensated compound-Poisson flow is a
        // martingale, so the truncated Poisson series over jump counts
        // must reproduce the terminal itself; the scheme keeps linear
        // data invariant exactly.
        let rate = 1.2;
        let jump = 0.25;
        let horizon = 0.5;
        let cs = singleton_cs(0.05, 0.0, jump, zero_driver(), |x: &[f64]| 0.7 * x[0] + 0.3);
        let mm = one_atom(rate, 0.5);
        let time = TimeGrid::new(0.0, horizon, 8).unwrap();
        let space = SpaceGrid::new(&[-2.0], &[2.0], &[32]).unwrap();
        let sol = solve_pde(&cs, &mm, &time, &space, &cs.h.clone()).unwrap();
        let series = |x: f64| {
            let lam = rate * horizon;
            let mut total = 0.0;
            let mut pmf = (-lam).exp();
            for k in 0..=60u32 {
                let displaced = x + k as f64 * jump - rate * jump * horizon;
                total += pmf * (0.7 * displaced + 0.3);
                pmf *= lam / (k + 1) as f64;
            }
            total
        };
        for &x in &[-0.75, 0.0, 0.5, 1.0] {
            let numeric = sol.value(0, &[x]);
            assert_relative_eq!(numeric, series(x), epsilon = 1e-9);
            assert_relative_eq!(numeric, 0.7 * x + 0.3, epsilon = 1e-9);
        }
    }

    #[test]
    fn degenerate_diffusion_is_rejected() {
        let cs = singleton_cs(0.0, 0.0, 0.0, zero_driver(), |_| 0.0);
        let time = TimeGrid::new(0.0, 1.0, 8).unwrap();
        let space = SpaceGrid::new(&[-1.0], &[1.0], &[4]).unwrap();
        let err = solve_pde(&cs, &no_jumps(), &time, &space, &cs.h.clone()).unwrap_err();
        assert!(matches!(err, Error::NotElliptic { min_eig } if min_eig < 1e-10));
    }

    #[test]
    fn unstable_step_reports_the_required_bound() {
        let cs = singleton_cs(0.5, 0.0, 0.0, zero_driver(), |_| 0.0);
        let time = TimeGrid::new(0.0, 1.0, 4).unwrap();
        let space = SpaceGrid::new(&[-1.0], &[1.0], &[32]).unwrap();
        let err = solve_pde(&cs, &no_jumps(), &time, &space, &cs.h.clone()).unwrap_err();
        match err {
            Error::StepTooLarge { dt, required } => {
                assert_relative_eq!(dt, 0.25);
                // dx = 1/16, bound = dx^2 / sigma^2.
                assert_relative_eq!(required, (1.0 / 256.0) / 0.25, epsilon = 1e-12);
            }
            other => panic!("expected a step-size error, got {:?}", other),
        }
    }

    #[test]
    fn displacement_beyond_the_collar_is_rejected() {
        let cs = singleton_cs(0.5, 0.0, 5.0, zero_driver(), |_| 0.0);
        let mm = one_atom(0.5, 2.0);
        let time = TimeGrid::new(0.0, 0.1, 8).unwrap();
        let space = SpaceGrid::new(&[-1.0], &[1.0], &[4]).unwrap();
        let err = solve_pde(&cs, &mm, &time, &space, &cs.h.clone()).unwrap_err();
        match err {
            Error::DomainTooSmall { point } => assert!(point[0] > 1.0),
            other => panic!("expected a domain error, got {:?}", other),
        }
    }

    #[test]
    fn interpolation_is_exact_at_nodes_and_affine_everywhere() {
        let space = SpaceGrid::new(&[-1.0, 0.0], &[1.0, 2.0], &[4, 5]).unwrap();
        let affine = |x: &[f64]| 0.3 + 1.5 * x[0] - 0.7 * x[1];
        let field = GridField::from_fn(&space, affine).unwrap();
        for flat in 0..space.n_nodes() {
            let x = space.node_coords(flat);
            assert_relative_eq!(field.eval(&x), affine(&x), epsilon = 1e-12);
        }
        // Interior, boundary, and collar points all reproduce affine data.
        for x in [[0.13, 0.77], [-1.0, 2.0], [1.15, -0.2], [-1.2, 2.3]] {
            assert_relative_eq!(field.eval(&x), affine(&x), epsilon = 1e-12);
        }
    }

    #[test]
    fn split_puts_small_amplitude_atoms_in_the_low_part() {
        let cs = singleton_cs(0.1, 0.0, 0.2, zero_driver(), |_| 0.0);
        let mm = MarkMeasure::new(vec![
            MarkAtom { mark: vec![0.5], weight: 1.0, rho: 0.3 },
            MarkAtom { mark: vec![1.5], weight: 0.5, rho: 0.9 },
        ])
        .unwrap();
        let space = SpaceGrid::new(&[-2.0], &[2.0], &[16]).unwrap();
        let field = GridField::from_fn(&space, |x| x[0] * x[0]).unwrap();
        let (low, high) = jump_term_split(&field, &cs, &mm, 0.0, &[0.4], &[0.0]);
        assert!(low > 0.0, "quadratic field has nonzero second-order differences");
        assert_eq!(high, 0.0, "no atoms at or above amplitude one");
    }

    #[test]
    fn split_vanishes_on_linear_fields() {
        let cs = singleton_cs(0.1, 0.0, 0.3, zero_driver(), |_| 0.0);
        let mm = MarkMeasure::new(vec![
            MarkAtom { mark: vec![0.5], weight: 1.0, rho: 0.3 },
            MarkAtom { mark: vec![1.5], weight: 0.5, rho: 1.4 },
        ])
        .unwrap();
        let space = SpaceGrid::new(&[-2.0], &[2.0], &[16]).unwrap();
        let field = GridField::from_fn(&space, |x| 2.0 * x[0] - 0.5).unwrap();
        let (low, high) = jump_term_split(&field, &cs, &mm, 0.0, &[0.25], &[0.0]);
        assert!(low.abs() <= 1e-12, "low part {} should vanish on linear data", low);
        assert!(high.abs() <= 1e-12, "high part {} should vanish on linear data", high);
    }

    #[test]
    fn split_matches_per_atom_hand_summation() {
        let cs = singleton_cs(0.1, 0.0, 0.0, zero_driver(), |_| 0.0);
        // State-independent jump sizes read from the mark coordinate.
        let cs = CoefficientSet {
            g: Arc::new(|_, mark: &[f64], _: &[f64], _: &[f64], _: &NoiseHistory| {
                DVector::from_element(1, 0.3 * mark[0])
            }),
            ..cs
        };
        let mm = MarkMeasure::new(vec![
            MarkAtom { mark: vec![-1.0], weight: 0.8, rho: 0.4 },
            MarkAtom { mark: vec![0.5], weight: 1.1, rho: 0.7 },
            MarkAtom { mark: vec![2.0], weight: 0.3, rho: 1.6 },
        ])
        .unwrap();
        let space = SpaceGrid::new(&[-2.0], &[2.0], &[32]).unwrap();
        let field = GridField::from_fn(&space, |x| x[0] * x[0] - 0.4 * x[0]).unwrap();
        let x = [0.3];
        let (low, high) = jump_term_split(&field, &cs, &mm, 0.0, &x, &[0.0]);
        let grad = field.gradient(0.0, &x);
        let v0 = field.eval(&x);
        let hand = |mark: f64, weight: f64| {
            let g = 0.3 * mark;
            weight * (field.eval(&[x[0] + g]) - v0 - grad[0] * g).abs()
        };
        let hand_low = hand(-1.0, 0.8) + hand(0.5, 1.1);
        let hand_high = hand(2.0, 0.3);
        assert_relative_eq!(low, hand_low, epsilon = 1e-14);
        assert_relative_eq!(high, hand_high, epsilon = 1e-14);
    }

    #[test]
    fn constant_field_yields_constant_y_and_zero_characteristics() {
        let cs = singleton_cs(0.3, 0.0, 0.1, zero_driver(), |_| 2.5);
        let mm = one_atom(0.8, 0.5);
        let time = TimeGrid::new(0.0, 0.5, 8).unwrap();
        let space = SpaceGrid::new(&[-3.0], &[3.0], &[12]).unwrap();
        let sol = solve_pde(&cs, &mm, &time, &space, &cs.h.clone()).unwrap();
        let bundle =
            simulate(&cs, &mm, &time, &[0.0], &constant_policy(DVector::zeros(1)), 16, 7).unwrap();
        let triple = evaluate_field_along_path(&sol, &cs, &mm, &bundle).unwrap();
        for p in 0..16 {
            for i in 0..8 {
                assert_eq!(triple.y(p, i), 2.5);
                assert!(triple.z(p, i)[0].abs() <= 1e-12);
                assert!(triple.k(p, i)[0].abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn linear_field_recovers_sigma_transpose_gradient() {
        let slope = 1.4;
        let sigma = 0.6;
        let cs = singleton_cs(sigma, 0.1, 0.0, zero_driver(), move |x: &[f64]| slope * x[0]);
        let time = TimeGrid::new(0.0, 0.25, 4).unwrap();
        let space = SpaceGrid::new(&[-2.0], &[2.0], &[8]).unwrap();
        let sol = solve_pde(&cs, &no_jumps(), &time, &space, &cs.h.clone()).unwrap();
        let bundle = simulate(
            &cs,
            &no_jumps(),
            &time,
            &[0.2],
            &constant_policy(DVector::zeros(1)),
            8,
            11,
        )
        .unwrap();
        let triple = evaluate_field_along_path(&sol, &cs, &no_jumps(), &bundle).unwrap();
        for p in 0..8 {
            for i in 0..4 {
                assert_relative_eq!(triple.z(p, i)[0], sigma * slope, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn solved_field_passes_the_martingale_residual_check() {
        // Jump-diffusion with a running cost; the field-induced triple
        // must behave like a discrete martingale after compensation.
        let f: DriverFn = Arc::new(|_, x: &[f64], _, y: f64, _, _, _| 0.2 * y + 0.1 * x[0]);
        let cs = singleton_cs(0.3, 0.05, 0.15, f, |x: &[f64]| x[0] * x[0]);
        let mm = one_atom(0.9, 0.5);
        let time = TimeGrid::new(0.0, 0.5, 64).unwrap();
        let space = SpaceGrid::new(&[-4.0], &[4.0], &[256]).unwrap();
        let sol = solve_pde(&cs, &mm, &time, &space, &cs.h.clone()).unwrap();
        let bundle =
            simulate(&cs, &mm, &time, &[0.3], &constant_policy(DVector::zeros(1)), 1000, 23)
                .unwrap();
        let triple = evaluate_field_along_path(&sol, &cs, &mm, &bundle).unwrap();
        for (i, (mean, se)) in martingale_residuals(&triple, &cs, &mm, &bundle).iter().enumerate()
        {
            assert!(
                mean.abs() <= 4.0 * se,
                "step {} residual {} exceeds 4 x standard error {}",
                i,
                mean,
                se
            );
        }
    }

    #[test]
    fn shifted_solution_with_relaxed_driver_is_dominated() {
        // Subtracting a constant from the solved field and shifting the
        // driver's cost argument by the same constant produces an exact
        // solution of the relaxed problem with a smaller terminal; the
        // relaxed solve with the original terminal must dominate it at
        // every node of every time slice.
        let shift = 0.5;
        let f: DriverFn = Arc::new(|_, x: &[f64], _, y: f64, _, _, _| 0.3 * y + 0.2 * x[0]);
        let cs = singleton_cs(0.35, 0.1, 0.1, f, |x: &[f64]| x[0] * x[0]);
        let mm = one_atom(0.7, 0.5);
        let time = TimeGrid::new(0.0, 0.5, 32).unwrap();
        let space = SpaceGrid::new(&[-3.0], &[3.0], &[48]).unwrap();
        let solved = solve_pde(&cs, &mm, &time, &space, &cs.h.clone()).unwrap();

        let base_f = cs.f.clone();
        let relaxed = CoefficientSet {
            f: Arc::new(move |t, x: &[f64], u: &[f64], y: f64, z: &[f64], k: f64, hist: &NoiseHistory| {
                base_f(t, x, u, y + shift, z, k, hist)
            }),
            ..cs.clone()
        };
        let dominating = solve_pde(&relaxed, &mm, &time, &space, &cs.h.clone()).unwrap();
        for i in 0..=time.steps {
            for flat in 0..space.n_nodes() {
                let sub = solved.field(i).value_at(flat) - shift;
                let dom = dominating.field(i).value_at(flat);
                assert!(
                    dom - sub >= -1e-10,
                    "domination fails at time node {}, space node {}: {} < {}",
                    i,
                    flat,
                    dom,
                    sub
                );
            }
        }
    }

    #[test]
    fn pde_and_monte_carlo_values_agree_within_the_allowance() {
        let f: DriverFn = Arc::new(|_, x: &[f64], _, y: f64, _, _, _| 0.25 * y + 0.1 * x[0]);
        let cs = singleton_cs(0.3, 0.1, 0.12, f, |x: &[f64]| x[0] * x[0]);
        let mm = one_atom(0.8, 0.5);
        let x0 = [0.2];

        let coarse_time = TimeGrid::new(0.0, 0.5, 64).unwrap();
        let coarse_space = SpaceGrid::new(&[-4.0], &[4.0], &[64]).unwrap();
        let fine_time = TimeGrid::new(0.0, 0.5, 256).unwrap();
        let fine_space = SpaceGrid::new(&[-4.0], &[4.0], &[128]).unwrap();
        let coarse = solve_pde(&cs, &mm, &coarse_time, &coarse_space, &cs.h.clone()).unwrap();
        let fine = solve_pde(&cs, &mm, &fine_time, &fine_space, &cs.h.clone()).unwrap();
        let v_coarse = coarse.value(0, &x0);
        let v_fine = fine.value(0, &x0);

        let mc_grid = TimeGrid::new(0.0, 0.5, 64).unwrap();
        let est = crate::bsde::recursive_cost_estimate(
            &cs,
            &mm,
            &mc_grid,
            &x0,
            &constant_policy(DVector::zeros(1)),
            3,
            20_000,
            424242,
        )
        .unwrap();
        let allowance = 2.0 * (v_fine - v_coarse).abs() + 3.0 * est.std_error;
        assert!(
            (v_fine - est.value).abs() <= allowance,
            "methods disagree: pde {} vs mc {} +/- {}, allowance {}",
            v_fine,
            est.value,
            est.std_error,
            allowance
        );
    }

    mod proptests {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn interpolation_hits_nodal_values(values in proptest::collection::vec(-5.0f64..5.0, 9)) {
                let space = SpaceGrid::new(&[-1.0], &[1.0], &[8]).unwrap();
                let field = GridField::from_values(space.clone(), values.clone()).unwrap();
                for flat in 0..space.n_nodes() {
                    let x = space.node_coords(flat);
                    prop_assert!((field.eval(&x) - values[flat]).abs() <= 1e-12);
                }
            }

            #[test]
            fn split_parts_sum_to_the_unsplit_total(
                x in -1.0f64..1.0,
                scale in 0.05f64..0.5,
            ) {
                let cs = singleton_cs(0.1, 0.0, 0.0, zero_driver(), |_| 0.0);
                let cs = CoefficientSet {
                    g: Arc::new(move |_, mark: &[f64], _: &[f64], _: &[f64], _: &NoiseHistory| {
                        DVector::from_element(1, scale * mark[0])
                    }),
                    ..cs
                };
                let mm = MarkMeasure::new(vec![
                    MarkAtom { mark: vec![-1.0], weight: 0.6, rho: 0.5 },
                    MarkAtom { mark: vec![1.0], weight: 0.9, rho: 1.5 },
                ]).unwrap();
                let space = SpaceGrid::new(&[-2.0], &[2.0], &[16]).unwrap();
                let field = GridField::from_fn(&space, |y| y[0] * y[0]).unwrap();
                let (low, high) = jump_term_split(&field, &cs, &mm, 0.0, &[x], &[0.0]);
                let grad = field.gradient(0.0, &[x]);
                let v0 = field.eval(&[x]);
                let mut total = 0.0;
                for atom in mm.atoms() {
                    let g = scale * atom.mark[0];
                    total += atom.weight * (field.eval(&[x + g]) - v0 - grad[0] * g).abs();
                }
                prop_assert!((low + high - total).abs() <= 1e-12);
            }

            #[test]
            fn constant_solves_stay_frozen(c in -3.0f64..3.0) {
                let cs = singleton_cs(0.4, 0.0, 0.0, zero_driver(), move |_| c);
                let time = TimeGrid::new(0.0, 0.5, 8).unwrap();
                let space = SpaceGrid::new(&[-1.0], &[1.0], &[8]).unwrap();
                let sol = solve_pde(&cs, &no_jumps(), &time, &space, &cs.h.clone()).unwrap();
                for i in 0..=8 {
                    for flat in 0..space.n_nodes() {
                        prop_assert_eq!(sol.field(i).value_at(flat), c);
                    }
                }
            }
        }
    }
}
