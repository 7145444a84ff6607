//! Forward simulation of the controlled state equation
//!
//! `dX = b(s, X, u) ds + sigma(s, X, u) dW
//!     + integral of g(s, e, X(s-), u) d(compensated jump measure)`
//!
//! by an explicit Euler scheme: within a step the diffusion uses the exact
//! Brownian increment, jumps enter with left-point (predictable) state and
//! control, and the compensator is subtracted exactly through atom
//! quadrature rather than sampled.

use crate::coefficients::CoefficientSet;
use crate::error::{Error, Result};
use crate::history::NoiseHistory;
use crate::mark_measure::{JumpRecord, MarkMeasure};
use crate::rng::derive_stream;
use nalgebra::DVector;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use std::sync::Arc;

/// Control policy `(t, state, observed noise) -> control`.
pub type PolicyFn = Arc<dyn Fn(f64, &[f64], &NoiseHistory) -> DVector<f64> + Send + Sync>;

/// Policy that plays one fixed control at every step.
pub fn constant_policy(u: DVector<f64>) -> PolicyFn {
    Arc::new(move |_, _, _| u.clone())
}

/// Uniform time grid on `[t0, t_end]`.
#[derive(Debug, Clone)]
pub struct TimeGrid {
    pub t0: f64,
    pub t_end: f64,
    pub steps: usize,
    nodes: Vec<f64>,
}

impl TimeGrid {
    pub fn new(t0: f64, t_end: f64, steps: usize) -> Result<Self> {
        if !(t_end > t0) || steps == 0 {
            return Err(Error::InvalidArgument(format!(
                "time grid needs t_end > t0 and steps > 0 (got [{t0}, {t_end}], {steps} steps)"
            )));
        }
        let dt = (t_end - t0) / steps as f64;
        let mut nodes: Vec<f64> = (0..=steps).map(|i| t0 + i as f64 * dt).collect();
        nodes[steps] = t_end;
        Ok(Self { t0, t_end, steps, nodes })
    }

    pub fn dt(&self) -> f64 {
        (self.t_end - self.t0) / self.steps as f64
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn node(&self, i: usize) -> f64 {
        self.nodes[i]
    }

    /// Grid covering `[nodes[i0], nodes[i1]]` with the same spacing.
    pub fn segment(&self, i0: usize, i1: usize) -> Result<TimeGrid> {
        if i0 >= i1 || i1 > self.steps {
            return Err(Error::InvalidArgument(format!(
                "invalid segment [{i0}, {i1}] of a grid with {} steps",
                self.steps
            )));
        }
        TimeGrid::new(self.nodes[i0], self.nodes[i1], i1 - i0)
    }
}

/// A batch of forward trajectories with the noise that drove them.
///
/// Storage is flat and path-major so paths can be simulated in parallel
/// and assembled by index. Cumulative Brownian values are kept alongside
/// the increments so a [`NoiseHistory`] is a pair of slice borrows.
pub struct PathBundle {
    pub grid: TimeGrid,
    pub n_paths: usize,
    pub n: usize,
    pub d: usize,
    pub control_dim: usize,
    states: Vec<f64>,
    dw: Vec<f64>,
    cum_brownian: Vec<f64>,
    controls: Vec<f64>,
    jumps: Vec<Vec<JumpRecord>>,
}

impl std::fmt::Debug for PathBundle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PathBundle")
            .field("n_paths", &self.n_paths)
            .field("steps", &self.grid.steps)
            .field("n", &self.n)
            .field("d", &self.d)
            .finish_non_exhaustive()
    }
}

impl PathBundle {
    /// State of path `p` at node `i`.
    pub fn state(&self, p: usize, i: usize) -> &[f64] {
        let nodes = self.grid.steps + 1;
        let base = (p * nodes + i) * self.n;
        &self.states[base..base + self.n]
    }

    /// Brownian increment of path `p` over step `i`.
    pub fn brownian_increment(&self, p: usize, i: usize) -> &[f64] {
        let base = (p * self.grid.steps + i) * self.d;
        &self.dw[base..base + self.d]
    }

    /// Control played on path `p` over step `i`.
    pub fn control(&self, p: usize, i: usize) -> &[f64] {
        let base = (p * self.grid.steps + i) * self.control_dim;
        &self.controls[base..base + self.control_dim]
    }

    /// All jumps of path `p`, sorted by time.
    pub fn jumps(&self, p: usize) -> &[JumpRecord] {
        &self.jumps[p]
    }

    /// Jumps of path `p` inside `(nodes[i], nodes[i+1]]`.
    pub fn jumps_in_step(&self, p: usize, i: usize) -> &[JumpRecord] {
        let t0 = self.grid.node(i);
        let t1 = self.grid.node(i + 1);
        let js = &self.jumps[p];
        let lo = js.partition_point(|j| j.time <= t0);
        let hi = js.partition_point(|j| j.time <= t1);
        &js[lo..hi]
    }

    /// Noise observed on path `p` up to node `i`.
    pub fn history(&self, p: usize, i: usize) -> NoiseHistory<'_> {
        let nodes = self.grid.steps + 1;
        let times = &self.grid.nodes()[..=i];
        let base = p * nodes * self.d;
        let brownian = &self.cum_brownian[base..base + (i + 1) * self.d];
        let t = self.grid.node(i);
        let js = &self.jumps[p];
        let n_seen = js.partition_point(|j| j.time <= t);
        NoiseHistory::new(times, brownian, self.d, &js[..n_seen])
    }
}

/// One Euler step from `x` over `[t0, t1]`: left-point drift and jump
/// coefficient, exact per-step compensator subtraction.
fn euler_step(
    cs: &CoefficientSet,
    mm: &MarkMeasure,
    t0: f64,
    t1: f64,
    x: &[f64],
    u: &[f64],
    dw: &[f64],
    step_jumps: &[JumpRecord],
    hist: &NoiseHistory,
    out: &mut [f64],
) -> Result<()> {
    let dt = t1 - t0;
    let b = (cs.b)(t0, x, u, hist);
    let sigma = (cs.sigma)(t0, x, u, hist);
    for i in 0..cs.n {
        let mut v = x[i] + b[i] * dt;
        for j in 0..cs.d {
            v += sigma[(i, j)] * dw[j];
        }
        out[i] = v;
    }
    for rec in step_jumps {
        let mark = &mm.atoms()[rec.mark_index].mark;
        let g = (cs.g)(rec.time, mark, x, u, hist);
        for i in 0..cs.n {
            out[i] += g[i];
        }
    }
    for atom in mm.atoms() {
        let g = (cs.g)(t0, &atom.mark, x, u, hist);
        for i in 0..cs.n {
            out[i] -= dt * atom.weight * g[i];
        }
    }
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { context: "state".into() });
    }
    Ok(())
}

struct PathResult {
    states: Vec<f64>,
    dw: Vec<f64>,
    cum: Vec<f64>,
    controls: Vec<f64>,
    jumps: Vec<JumpRecord>,
}

fn simulate_one(
    cs: &CoefficientSet,
    mm: &MarkMeasure,
    grid: &TimeGrid,
    x0: &[f64],
    policy: &PolicyFn,
    hold_nodes: Option<&[usize]>,
    master_seed: u64,
    path: usize,
) -> Result<PathResult> {
    let steps = grid.steps;
    let (n, d, cd) = (cs.n, cs.d, cs.control_dim);
    let mut rng = derive_stream(master_seed, "simulate", path as u64);
    // Fixed draw order: all jumps first, then d normals per step, so the
    // noise a path sees is independent of the policy (common random
    // numbers across candidate policies).
    let jumps = mm.sample_jumps(grid.t0, grid.t_end, &mut rng)?;
    let sqrt_dt = grid.dt().sqrt();
    let mut states = vec![0.0; (steps + 1) * n];
    states[..n].copy_from_slice(x0);
    let mut dw = vec![0.0; steps * d];
    let mut cum = vec![0.0; (steps + 1) * d];
    let mut controls = vec![0.0; steps * cd];
    let mut jump_ptr = 0usize;
    let mut held_u: Option<DVector<f64>> = None;
    for i in 0..steps {
        for j in 0..d {
            let z: f64 = rng.sample(StandardNormal);
            dw[i * d + j] = sqrt_dt * z;
        }
        let t = grid.node(i);
        let t_next = grid.node(i + 1);
        let hist = NoiseHistory::new(
            &grid.nodes()[..=i],
            &cum[..(i + 1) * d],
            d,
            &jumps[..jump_ptr],
        );
        let (head, tail) = states.split_at_mut((i + 1) * n);
        let x = &head[i * n..];
        // With hold nodes, the policy is consulted only there and its
        // choice is replayed until the next one; it therefore sees the
        // state at the decision node, not mid-interval states.
        let refresh = match hold_nodes {
            None => true,
            Some(nodes) => held_u.is_none() || nodes.binary_search(&i).is_ok(),
        };
        let u = if refresh {
            let fresh = policy(t, x, &hist);
            held_u = Some(fresh.clone());
            fresh
        } else {
            held_u.clone().expect("held control present after first step")
        };
        controls[i * cd..(i + 1) * cd].copy_from_slice(u.as_slice());
        let step_end = jumps[jump_ptr..].partition_point(|r| r.time <= t_next) + jump_ptr;
        euler_step(
            cs,
            mm,
            t,
            t_next,
            x,
            u.as_slice(),
            &dw[i * d..(i + 1) * d],
            &jumps[jump_ptr..step_end],
            &hist,
            &mut tail[..n],
        )
        .map_err(|_| Error::NonFinite { context: format!("path {path} at step {i}") })?;
        jump_ptr = step_end;
        for j in 0..d {
            cum[(i + 1) * d + j] = cum[i * d + j] + dw[i * d + j];
        }
    }
    Ok(PathResult { states, dw, cum, controls, jumps })
}

/// Simulates `n_paths` trajectories from the deterministic initial state
/// `x0`. Bit-reproducible from `master_seed`; paths run in parallel.
pub fn simulate(
    cs: &CoefficientSet,
    mm: &MarkMeasure,
    grid: &TimeGrid,
    x0: &[f64],
    policy: &PolicyFn,
    n_paths: usize,
    master_seed: u64,
) -> Result<PathBundle> {
    if x0.len() != cs.n {
        return Err(Error::InvalidArgument(format!(
            "initial state dimension {} does not match n = {}",
            x0.len(),
            cs.n
        )));
    }
    let mut starts = Vec::with_capacity(n_paths * cs.n);
    for _ in 0..n_paths {
        starts.extend_from_slice(x0);
    }
    simulate_each(cs, mm, grid, &starts, policy, master_seed)
}

/// Simulates one trajectory per start state in `starts` (flat,
/// `n`-dimensional blocks). Path `p` begins at the `p`-th block; the
/// noise stream of path `p` depends only on `(master_seed, p)`.
pub fn simulate_each(
    cs: &CoefficientSet,
    mm: &MarkMeasure,
    grid: &TimeGrid,
    starts: &[f64],
    policy: &PolicyFn,
    master_seed: u64,
) -> Result<PathBundle> {
    simulate_each_held(cs, mm, grid, starts, policy, None, master_seed)
}

/// As [`simulate_each`], but the policy is consulted only at the given
/// grid nodes (sorted, containing 0) and held constant in between, so
/// controls are piecewise constant on the decision intervals.
pub fn simulate_each_held(
    cs: &CoefficientSet,
    mm: &MarkMeasure,
    grid: &TimeGrid,
    starts: &[f64],
    policy: &PolicyFn,
    hold_nodes: Option<&[usize]>,
    master_seed: u64,
) -> Result<PathBundle> {
    cs.validate()?;
    if starts.is_empty() || starts.len() % cs.n != 0 {
        return Err(Error::InvalidArgument(format!(
            "start states must be a nonempty multiple of n = {} values, got {}",
            cs.n,
            starts.len()
        )));
    }
    let n_paths = starts.len() / cs.n;
    let results: Vec<PathResult> = (0..n_paths)
        .into_par_iter()
        .map(|p| {
            simulate_one(
                cs,
                mm,
                grid,
                &starts[p * cs.n..(p + 1) * cs.n],
                policy,
                hold_nodes,
                master_seed,
                p,
            )
        })
        .collect::<Result<_>>()?;
    let steps = grid.steps;
    let mut bundle = PathBundle {
        grid: grid.clone(),
        n_paths,
        n: cs.n,
        d: cs.d,
        control_dim: cs.control_dim,
        states: Vec::with_capacity(n_paths * (steps + 1) * cs.n),
        dw: Vec::with_capacity(n_paths * steps * cs.d),
        cum_brownian: Vec::with_capacity(n_paths * (steps + 1) * cs.d),
        controls: Vec::with_capacity(n_paths * steps * cs.control_dim),
        jumps: Vec::with_capacity(n_paths),
    };
    for r in results {
        bundle.states.extend_from_slice(&r.states);
        bundle.dw.extend_from_slice(&r.dw);
        bundle.cum_brownian.extend_from_slice(&r.cum);
        bundle.controls.extend_from_slice(&r.controls);
        bundle.jumps.push(r.jumps);
    }
    Ok(bundle)
}

/// Re-runs every path from the split node with the stored noise and
/// returns the maximal deviation from the original trajectory over all
/// paths, nodes, and coordinates. The restarted path sees the original
/// pre-split noise history, so history-dependent callbacks replay too.
pub fn flow_check(
    cs: &CoefficientSet,
    mm: &MarkMeasure,
    grid: &TimeGrid,
    x0: &[f64],
    policy: &PolicyFn,
    split_node: usize,
    n_paths: usize,
    master_seed: u64,
) -> Result<f64> {
    if split_node == 0 || split_node >= grid.steps {
        return Err(Error::InvalidArgument(format!(
            "split node {split_node} must be interior to a grid with {} steps",
            grid.steps
        )));
    }
    let bundle = simulate(cs, mm, grid, x0, policy, n_paths, master_seed)?;
    let deviations: Vec<f64> = (0..n_paths)
        .into_par_iter()
        .map(|p| -> Result<f64> {
            let mut x = bundle.state(p, split_node).to_vec();
            let mut next = vec![0.0; cs.n];
            let mut max_dev = 0.0f64;
            for i in split_node..grid.steps {
                let t = grid.node(i);
                let hist = bundle.history(p, i);
                let u = policy(t, &x, &hist);
                euler_step(
                    cs,
                    mm,
                    t,
                    grid.node(i + 1),
                    &x,
                    u.as_slice(),
                    bundle.brownian_increment(p, i),
                    bundle.jumps_in_step(p, i),
                    &hist,
                    &mut next,
                )?;
                let orig = bundle.state(p, i + 1);
                for c in 0..cs.n {
                    max_dev = max_dev.max((next[c] - orig[c]).abs());
                }
                x.copy_from_slice(&next);
            }
            Ok(max_dev)
        })
        .collect::<Result<_>>()?;
    Ok(deviations.into_iter().fold(0.0, f64::max))
}

/// Per-exponent moment diagnostics of a bundle.
#[derive(Debug, Clone)]
pub struct MomentReport {
    /// `(q, estimate of E[sup over nodes of |X|^q])`.
    pub sup_moments: Vec<(f64, f64)>,
    /// Per exponent: rows `(gap in time, E|X(t + gap) - X(t)|^q)` over
    /// dyadic gaps, averaged over non-overlapping anchors.
    pub increment_tables: Vec<(f64, Vec<(f64, f64)>)>,
    /// Per exponent: fitted log-log slope of the increment table.
    pub increment_slopes: Vec<(f64, f64)>,
}

/// Estimates running-supremum moments and the increment-moment scaling.
pub fn moment_report(bundle: &PathBundle, exponents: &[f64]) -> MomentReport {
    let steps = bundle.grid.steps;
    let dt = bundle.grid.dt();
    let sup_moments = exponents
        .iter()
        .map(|&q| {
            let mean: f64 = (0..bundle.n_paths)
                .map(|p| {
                    let mut sup: f64 = 0.0;
                    for i in 0..=steps {
                        let norm2: f64 = bundle.state(p, i).iter().map(|v| v * v).sum();
                        sup = sup.max(norm2);
                    }
                    sup.sqrt().powf(q)
                })
                .sum::<f64>()
                / bundle.n_paths as f64;
            (q, mean)
        })
        .collect();
    let mut gaps = Vec::new();
    let mut g = 1usize;
    while g <= steps / 2 {
        gaps.push(g);
        g *= 2;
    }
    if gaps.is_empty() {
        gaps.push(steps.max(1).min(steps));
    }
    let mut increment_tables = Vec::new();
    let mut increment_slopes = Vec::new();
    for &q in exponents {
        let mut rows = Vec::new();
        for &gap in &gaps {
            let mut total = 0.0;
            let mut count = 0usize;
            for p in 0..bundle.n_paths {
                let mut i = 0;
                while i + gap <= steps {
                    let a = bundle.state(p, i);
                    let b = bundle.state(p, i + gap);
                    let diff2: f64 =
                        a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
                    total += diff2.sqrt().powf(q);
                    count += 1;
                    i += gap;
                }
            }
            rows.push((gap as f64 * dt, total / count as f64));
        }
        let pts: Vec<(f64, f64)> = rows
            .iter()
            .filter(|(_, m)| *m > 0.0)
            .map(|&(dt, m)| (dt.ln(), m.ln()))
            .collect();
        let slope = fit_slope(&pts);
        increment_tables.push((q, rows));
        increment_slopes.push((q, slope));
    }
    MomentReport { sup_moments, increment_tables, increment_slopes }
}

/// Least-squares slope of `(x, y)` pairs; 0 for degenerate inputs.
fn fit_slope(pts: &[(f64, f64)]) -> f64 {
    if pts.len() < 2 {
        return 0.0;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    if sxx == 0.0 {
        0.0
    } else {
        sxy / sxx
    }
}
