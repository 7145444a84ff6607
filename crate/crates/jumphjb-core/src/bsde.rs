//! Backward solver for the recursive-cost equation with jumps
//!
//! `-dY = f(s, X, u, Y, Z, integral of K l dnu) ds - Z dW
//!       - integral of K d(compensated jump measure)`,  `Y(T) = h(X(T))`,
//!
//! discretized backward along a simulated [`PathBundle`]: conditional
//! expectations become least-squares regressions on a state basis. The
//! recursive cost of a policy is the time-zero value `Y(0)`.

use crate::coefficients::{CoefficientSet, TerminalFn};
use crate::error::{Error, Result};
use crate::forward_sim::{simulate, PathBundle, PolicyFn, TimeGrid};
use crate::mark_measure::MarkMeasure;
use crate::regression::{fitted_values, solve_normal_equations, RegressionBasis};
use nalgebra::DMatrix;
use rayon::prelude::*;

/// Solver options; the default is the fully explicit scheme.
#[derive(Debug, Clone, Copy, Default)]
pub struct SolveOptions {
    /// Re-evaluate the driver once with the fitted `Y_i` (implicit-in-Y
    /// fixed-point sweep) before the final fit.
    pub picard_sweep: bool,
}

/// Backward solution along a bundle.
pub struct BsdeSolution {
    n_paths: usize,
    steps: usize,
    d: usize,
    n_atoms: usize,
    /// `n_paths * (steps + 1)` fitted values of Y.
    y: Vec<f64>,
    /// `n_paths * steps * d` fitted Brownian integrands.
    z: Vec<f64>,
    /// `n_paths * steps * n_atoms` fitted jump integrands per atom.
    k: Vec<f64>,
    /// `n_paths * steps` aggregated jump integrand passed to the driver.
    k_agg: Vec<f64>,
    /// Terminal values `h(X(T))` per path.
    terminal: Vec<f64>,
    /// Terminal plus accumulated driver increments per path; its mean
    /// estimates the cost and its spread the Monte Carlo error.
    pathwise_cost: Vec<f64>,
}

impl BsdeSolution {
    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn n_atoms(&self) -> usize {
        self.n_atoms
    }

    /// Fitted `Y` of path `p` at node `i`.
    pub fn y(&self, p: usize, i: usize) -> f64 {
        self.y[p * (self.steps + 1) + i]
    }

    /// Fitted `Z` of path `p` over step `i`.
    pub fn z(&self, p: usize, i: usize) -> &[f64] {
        let base = (p * self.steps + i) * self.d;
        &self.z[base..base + self.d]
    }

    /// Fitted per-atom `K` of path `p` over step `i`.
    pub fn k(&self, p: usize, i: usize) -> &[f64] {
        let base = (p * self.steps + i) * self.n_atoms;
        &self.k[base..base + self.n_atoms]
    }

    /// The aggregated value `quadrature(K l)` the driver saw on step `i`.
    pub fn k_agg(&self, p: usize, i: usize) -> f64 {
        self.k_agg[p * self.steps + i]
    }

    pub fn terminal(&self, p: usize) -> f64 {
        self.terminal[p]
    }

    pub fn pathwise_cost(&self) -> &[f64] {
        &self.pathwise_cost
    }

    /// Mean of `Y` at node 0.
    pub fn y0_mean(&self) -> f64 {
        (0..self.n_paths).map(|p| self.y(p, 0)).sum::<f64>() / self.n_paths as f64
    }

    /// Assembles a solution from externally computed characteristics
    /// (used when a solved field is evaluated along a bundle).
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn from_parts(
        n_paths: usize,
        steps: usize,
        d: usize,
        n_atoms: usize,
        y: Vec<f64>,
        z: Vec<f64>,
        k: Vec<f64>,
        k_agg: Vec<f64>,
        terminal: Vec<f64>,
        pathwise_cost: Vec<f64>,
    ) -> Self {
        debug_assert_eq!(y.len(), n_paths * (steps + 1));
        debug_assert_eq!(z.len(), n_paths * steps * d);
        debug_assert_eq!(k.len(), n_paths * steps * n_atoms);
        Self { n_paths, steps, d, n_atoms, y, z, k, k_agg, terminal, pathwise_cost }
    }

    /// Standard error of the pathwise cost estimator.
    pub fn std_error(&self) -> f64 {
        if self.n_paths < 2 {
            return 0.0;
        }
        let n = self.n_paths as f64;
        let mean = self.pathwise_cost.iter().sum::<f64>() / n;
        let var = self
            .pathwise_cost
            .iter()
            .map(|v| (v - mean) * (v - mean))
            .sum::<f64>()
            / (n - 1.0);
        (var / n).sqrt()
    }
}

/// Solves the backward equation along `bundle` with the default
/// explicit scheme.
pub fn solve(
    cs: &CoefficientSet,
    mm: &MarkMeasure,
    bundle: &PathBundle,
    basis: &RegressionBasis,
) -> Result<BsdeSolution> {
    solve_with(cs, mm, bundle, basis, SolveOptions::default())
}

/// Solves the backward equation along `bundle`.
///
/// At each step, with `Y_{i+1}` known per path and `dt` the step size:
/// `Z_i` is the regression of `Y_{i+1} dW_i / dt` (per component),
/// `K_i(e_j)` the regression of `Y_{i+1} (dN_j - w_j dt) / (w_j dt)`
/// against the compensated atom indicator, and `Y_i` the regression of
/// `Y_{i+1} + f(t_i, X_i, u_i, Y_{i+1}, Z_i, quadrature(K_i l)) dt`.
/// All regressions on a step share one factorization.
pub fn solve_with(
    cs: &CoefficientSet,
    mm: &MarkMeasure,
    bundle: &PathBundle,
    basis: &RegressionBasis,
    opts: SolveOptions,
) -> Result<BsdeSolution> {
    if basis.state_dim() != cs.n {
        return Err(Error::InvalidArgument(format!(
            "basis expects state dimension {}, coefficients have n = {}",
            basis.state_dim(),
            cs.n
        )));
    }
    let n_paths = bundle.n_paths;
    let steps = bundle.grid.steps;
    let d = bundle.d;
    let n_atoms = mm.n_atoms();
    let dt = bundle.grid.dt();
    let mut sol = BsdeSolution {
        n_paths,
        steps,
        d,
        n_atoms,
        y: vec![0.0; n_paths * (steps + 1)],
        z: vec![0.0; n_paths * steps * d],
        k: vec![0.0; n_paths * steps * n_atoms],
        k_agg: vec![0.0; n_paths * steps],
        terminal: vec![0.0; n_paths],
        pathwise_cost: vec![0.0; n_paths],
    };
    let mut y_next: Vec<f64> = (0..n_paths)
        .into_par_iter()
        .map(|p| (cs.h)(bundle.state(p, steps)))
        .collect();
    for p in 0..n_paths {
        sol.terminal[p] = y_next[p];
        sol.y[p * (steps + 1) + steps] = y_next[p];
        sol.pathwise_cost[p] = y_next[p];
    }
    let mut resp = DMatrix::zeros(n_paths, d + n_atoms + 1);
    for i in (0..steps).rev() {
        let t = bundle.grid.node(i);
        let phi = basis.design_matrix(bundle, i);
        // Martingale-integrand responses share the factorization with Y.
        for p in 0..n_paths {
            let dw = bundle.brownian_increment(p, i);
            for j in 0..d {
                resp[(p, j)] = y_next[p] * dw[j] / dt;
            }
        }
        let mut counts = vec![0u32; n_atoms];
        for p in 0..n_paths {
            counts.fill(0);
            for rec in bundle.jumps_in_step(p, i) {
                counts[rec.mark_index] += 1;
            }
            for (a, atom) in mm.atoms().iter().enumerate() {
                let w_dt = atom.weight * dt;
                resp[(p, d + a)] = y_next[p] * (counts[a] as f64 - w_dt) / w_dt;
            }
        }
        // Provisional fit of the integrands (last column unused yet).
        for p in 0..n_paths {
            resp[(p, d + n_atoms)] = 0.0;
        }
        let fit = solve_normal_equations(&phi, &resp, i)?;
        let fitted = fitted_values(&phi, &fit);
        for p in 0..n_paths {
            let zb = (p * steps + i) * d;
            for j in 0..d {
                sol.z[zb + j] = fitted[(p, j)];
            }
            let kb = (p * steps + i) * n_atoms;
            let mut agg = 0.0;
            for (a, atom) in mm.atoms().iter().enumerate() {
                let kv = fitted[(p, d + a)];
                sol.k[kb + a] = kv;
                agg += atom.weight * (cs.l_weight)(t, &atom.mark) * kv;
            }
            sol.k_agg[p * steps + i] = agg;
        }
        // Driver evaluation at the left point with the fitted integrands.
        let driver: Vec<f64> = (0..n_paths)
            .into_par_iter()
            .map(|p| {
                let hist = bundle.history(p, i);
                (cs.f)(
                    t,
                    bundle.state(p, i),
                    bundle.control(p, i),
                    y_next[p],
                    sol.z(p, i),
                    sol.k_agg(p, i),
                    &hist,
                )
            })
            .collect();
        for p in 0..n_paths {
            resp[(p, d + n_atoms)] = y_next[p] + driver[p] * dt;
        }
        let y_cols = resp.columns(d + n_atoms, 1).into_owned();
        let y_fit = solve_normal_equations(&phi, &y_cols, i)?;
        let mut y_now: Vec<f64> = fitted_values(&phi, &y_fit).iter().copied().collect();
        let mut driver_final = driver;
        if opts.picard_sweep {
            let resweep: Vec<f64> = (0..n_paths)
                .into_par_iter()
                .map(|p| {
                    let hist = bundle.history(p, i);
                    (cs.f)(
                        t,
                        bundle.state(p, i),
                        bundle.control(p, i),
                        y_now[p],
                        sol.z(p, i),
                        sol.k_agg(p, i),
                        &hist,
                    )
                })
                .collect();
            let swept = DMatrix::from_iterator(
                n_paths,
                1,
                (0..n_paths).map(|p| y_next[p] + resweep[p] * dt),
            );
            let y_fit2 = solve_normal_equations(&phi, &swept, i)?;
            y_now = fitted_values(&phi, &y_fit2).iter().copied().collect();
            driver_final = resweep;
        }
        if y_now.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { context: format!("fitted Y at step {i}") });
        }
        for p in 0..n_paths {
            sol.y[p * (steps + 1) + i] = y_now[p];
            sol.pathwise_cost[p] += driver_final[p] * dt;
        }
        y_next = y_now;
    }
    Ok(sol)
}

/// Cost estimate with a Monte Carlo error scale.
#[derive(Debug, Clone, Copy)]
pub struct CostEstimate {
    pub value: f64,
    pub std_error: f64,
}

/// Simulates under `policy` and returns the time-zero cost together
/// with the standard error of its pathwise estimator.
pub fn recursive_cost_estimate(
    cs: &CoefficientSet,
    mm: &MarkMeasure,
    grid: &TimeGrid,
    x0: &[f64],
    policy: &PolicyFn,
    basis_degree: u32,
    n_paths: usize,
    master_seed: u64,
) -> Result<CostEstimate> {
    let bundle = simulate(cs, mm, grid, x0, policy, n_paths, master_seed)?;
    let basis = RegressionBasis::polynomial_for(basis_degree, &bundle)?;
    let sol = solve(cs, mm, &bundle, &basis)?;
    Ok(CostEstimate { value: sol.y0_mean(), std_error: sol.std_error() })
}

/// Recursive cost of a policy from deterministic initial data: simulate,
/// solve backward, and average `Y` at the first node.
pub fn recursive_cost(
    cs: &CoefficientSet,
    mm: &MarkMeasure,
    grid: &TimeGrid,
    x0: &[f64],
    policy: &PolicyFn,
    basis_degree: u32,
    n_paths: usize,
    master_seed: u64,
) -> Result<f64> {
    Ok(recursive_cost_estimate(cs, mm, grid, x0, policy, basis_degree, n_paths, master_seed)?
        .value)
}

/// Backward flow on a subinterval: solves the same equation on `segment`
/// with terminal condition `terminal_field(X(segment end))` and returns
/// the value at the segment start.
#[allow(clippy::too_many_arguments)]
pub fn backward_semigroup(
    cs: &CoefficientSet,
    mm: &MarkMeasure,
    segment: &TimeGrid,
    x0: &[f64],
    policy: &PolicyFn,
    terminal_field: TerminalFn,
    basis_degree: u32,
    n_paths: usize,
    master_seed: u64,
) -> Result<f64> {
    let mut seg_cs = cs.clone();
    seg_cs.h = terminal_field;
    recursive_cost(&seg_cs, mm, segment, x0, policy, basis_degree, n_paths, master_seed)
}

/// Size diagnostics of a solved instance.
#[derive(Debug, Clone)]
pub struct AprioriReport {
    /// Mean of `|Y(0)|` over paths.
    pub y0_abs: f64,
    /// Growth envelope `1 + |x0|^p` at the initial state.
    pub envelope: f64,
    /// `y0_abs / envelope`.
    pub fitted_constant: f64,
}

/// Reports the time-zero magnitude against the polynomial growth
/// envelope in the initial state.
pub fn apriori_report(sol: &BsdeSolution, cs: &CoefficientSet, bundle: &PathBundle) -> AprioriReport {
    let y0_abs = (0..sol.n_paths()).map(|p| sol.y(p, 0).abs()).sum::<f64>()
        / sol.n_paths() as f64;
    let x0 = bundle.state(0, 0);
    let norm = x0.iter().map(|v| v * v).sum::<f64>().sqrt();
    let envelope = 1.0 + norm.powf(cs.p);
    AprioriReport { y0_abs, envelope, fitted_constant: y0_abs / envelope }
}

/// Weight for comparing costs from two initial states: the distance
/// times a polynomial envelope of both magnitudes.
pub fn stability_envelope(x0_a: &[f64], x0_b: &[f64], p: f64) -> f64 {
    let dist = x0_a
        .iter()
        .zip(x0_b)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    let na = x0_a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = x0_b.iter().map(|v| v * v).sum::<f64>().sqrt();
    dist * (1.0 + na.powf(p - 1.0) + nb.powf(p - 1.0))
}

/// Per-step mean and standard error of the one-step martingale residual
/// `Y_{i+1} - Y_i + f dt - Z dW - sum_j K_j (dN_j - w_j dt)`; each mean
/// should sit within a few standard errors of zero on a sound solution.
///
/// The standard error combines the pathwise spread with the variance
/// contributed by the fitted integrands themselves (`Z^2 dt` and
/// `K^2 w dt` terms): the fits are built from the same sample, so the
/// noise they share across paths does not show up in the iid spread.
pub fn martingale_residuals(
    sol: &BsdeSolution,
    cs: &CoefficientSet,
    mm: &MarkMeasure,
    bundle: &PathBundle,
) -> Vec<(f64, f64)> {
    let n_paths = sol.n_paths();
    let steps = sol.steps();
    let dt = bundle.grid.dt();
    let mut out = Vec::with_capacity(steps);
    let mut counts = vec![0u32; sol.n_atoms()];
    for i in 0..steps {
        let t = bundle.grid.node(i);
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        let mut integrand_var = 0.0;
        for p in 0..n_paths {
            let hist = bundle.history(p, i);
            let f = (cs.f)(
                t,
                bundle.state(p, i),
                bundle.control(p, i),
                sol.y(p, i + 1),
                sol.z(p, i),
                sol.k_agg(p, i),
                &hist,
            );
            let mut r = sol.y(p, i + 1) - sol.y(p, i) + f * dt;
            let dw = bundle.brownian_increment(p, i);
            for (zj, wj) in sol.z(p, i).iter().zip(dw) {
                r -= zj * wj;
            }
            counts.fill(0);
            for rec in bundle.jumps_in_step(p, i) {
                counts[rec.mark_index] += 1;
            }
            for (a, atom) in mm.atoms().iter().enumerate() {
                r -= sol.k(p, i)[a] * (counts[a] as f64 - atom.weight * dt);
            }
            sum += r;
            sumsq += r * r;
            integrand_var += sol.z(p, i).iter().map(|z| z * z * dt).sum::<f64>();
            integrand_var += sol
                .k(p, i)
                .iter()
                .zip(mm.atoms())
                .map(|(k, atom)| k * k * atom.weight * dt)
                .sum::<f64>();
        }
        let n = n_paths as f64;
        let mean = sum / n;
        let var = (sumsq / n - mean * mean).max(0.0) / (n - 1.0).max(1.0) * n;
        let se = ((var + integrand_var / n) / n).sqrt();
        out.push((mean, se));
    }
    out
}
