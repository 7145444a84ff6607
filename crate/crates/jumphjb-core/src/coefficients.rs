//! Problem instances and the operators built from them.
//!
//! A [`CoefficientSet`] is one controlled jump-diffusion problem: forward
//! coefficients `b, sigma, g`, cost driver `f`, terminal cost `h`, the
//! nonlocal weight `l`, the growth exponent `p`, and the finite control set.
//! On top of it this module evaluates
//!
//! * the Hamiltonian
//!   `H(t,x,u,y,p,q,Q,A,k) = f(t,x,u,y, sigma^T p + q, k) + <p, b>
//!      + tr(Q sigma^T) + 1/2 tr(A sigma sigma^T)`,
//! * the nonlocal difference `I_phi(t,e,x,u) = phi(t, x+g) - phi(t, x)`
//!   and the weighted aggregate
//!   `L(t,x,u,phi,psi) = integral of (I_phi + psi(t,e,x+g)) l(t,e) d nu`,
//! * the full nonlinear drift `F` (minimum over controls of the
//!   Hamiltonian plus the compensator correction), its test-field variant,
//! * the integro-differential generator `L^u`,
//!
//! together with empirical probes of the standing Lipschitz, growth, and
//! monotonicity assumptions.

use crate::error::{Error, Result};
use crate::fields::{
    central_gradient, central_hessian, MarkField, ScalarField, VectorField,
};
use crate::history::NoiseHistory;
use crate::mark_measure::MarkMeasure;
use crate::rng::derive_stream;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use std::sync::Arc;

/// Drift coefficient `b(t, x, u, history) -> R^n`.
pub type DriftFn = Arc<dyn Fn(f64, &[f64], &[f64], &NoiseHistory) -> DVector<f64> + Send + Sync>;
/// Diffusion coefficient `sigma(t, x, u, history) -> R^{n x d}`.
pub type DiffusionFn =
    Arc<dyn Fn(f64, &[f64], &[f64], &NoiseHistory) -> DMatrix<f64> + Send + Sync>;
/// Jump coefficient `g(t, mark, x, u, history) -> R^n`.
pub type JumpSizeFn =
    Arc<dyn Fn(f64, &[f64], &[f64], &[f64], &NoiseHistory) -> DVector<f64> + Send + Sync>;
/// Cost driver `f(t, x, u, y, z, k_agg, history) -> R`.
pub type DriverFn =
    Arc<dyn Fn(f64, &[f64], &[f64], f64, &[f64], f64, &NoiseHistory) -> f64 + Send + Sync>;
/// Terminal cost `h(x) -> R`.
pub type TerminalFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;
/// Nonlocal weight `l(t, mark) -> R`, nonnegative.
pub type MarkWeightFn = Arc<dyn Fn(f64, &[f64]) -> f64 + Send + Sync>;

/// One controlled problem instance.
#[derive(Clone)]
pub struct CoefficientSet {
    /// State dimension n.
    pub n: usize,
    /// Brownian dimension d.
    pub d: usize,
    /// Control dimension.
    pub control_dim: usize,
    /// Growth exponent p >= 2 of the weighted assumption bounds.
    pub p: f64,
    /// Finite control grid standing in for the compact control set.
    pub control_set: Vec<DVector<f64>>,
    pub b: DriftFn,
    pub sigma: DiffusionFn,
    pub g: JumpSizeFn,
    pub f: DriverFn,
    pub h: TerminalFn,
    pub l_weight: MarkWeightFn,
}

impl CoefficientSet {
    /// Validates dimensions and the growth exponent.
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.d == 0 {
            return Err(Error::InvalidArgument("state and noise dimensions must be positive".into()));
        }
        if !(self.p >= 2.0) || !self.p.is_finite() {
            return Err(Error::InvalidArgument(format!("growth exponent p = {} must be >= 2", self.p)));
        }
        if self.control_set.is_empty() {
            return Err(Error::InvalidArgument("control set is empty".into()));
        }
        for (i, u) in self.control_set.iter().enumerate() {
            if u.len() != self.control_dim {
                return Err(Error::InvalidArgument(format!(
                    "control {i} has dimension {}, expected {}",
                    u.len(),
                    self.control_dim
                )));
            }
        }
        Ok(())
    }
}

/// Scalar field with a closure value and optional analytic derivatives;
/// missing accessors fall back to central differences.
#[derive(Clone)]
pub struct AnalyticScalarField {
    value: Arc<dyn Fn(f64, &[f64]) -> f64 + Send + Sync>,
    gradient: Option<Arc<dyn Fn(f64, &[f64]) -> DVector<f64> + Send + Sync>>,
    hessian: Option<Arc<dyn Fn(f64, &[f64]) -> DMatrix<f64> + Send + Sync>>,
}

impl AnalyticScalarField {
    pub fn new(value: impl Fn(f64, &[f64]) -> f64 + Send + Sync + 'static) -> Self {
        Self { value: Arc::new(value), gradient: None, hessian: None }
    }

    pub fn with_gradient(
        mut self,
        gradient: impl Fn(f64, &[f64]) -> DVector<f64> + Send + Sync + 'static,
    ) -> Self {
        self.gradient = Some(Arc::new(gradient));
        self
    }

    pub fn with_hessian(
        mut self,
        hessian: impl Fn(f64, &[f64]) -> DMatrix<f64> + Send + Sync + 'static,
    ) -> Self {
        self.hessian = Some(Arc::new(hessian));
        self
    }
}

impl ScalarField for AnalyticScalarField {
    fn value(&self, t: f64, x: &[f64]) -> f64 {
        (self.value)(t, x)
    }

    fn gradient(&self, t: f64, x: &[f64]) -> DVector<f64> {
        match &self.gradient {
            Some(g) => g(t, x),
            None => central_gradient(|y| (self.value)(t, y), x),
        }
    }

    fn hessian(&self, t: f64, x: &[f64]) -> DMatrix<f64> {
        match &self.hessian {
            Some(h) => h(t, x),
            None => central_hessian(|y| (self.value)(t, y), x),
        }
    }
}

/// Vector field with a closure value and optional analytic Jacobian.
#[derive(Clone)]
pub struct AnalyticVectorField {
    dim: usize,
    value: Arc<dyn Fn(f64, &[f64]) -> DVector<f64> + Send + Sync>,
    jacobian: Option<Arc<dyn Fn(f64, &[f64]) -> DMatrix<f64> + Send + Sync>>,
}

impl AnalyticVectorField {
    pub fn new(dim: usize, value: impl Fn(f64, &[f64]) -> DVector<f64> + Send + Sync + 'static) -> Self {
        Self { dim, value: Arc::new(value), jacobian: None }
    }

    pub fn zero(dim: usize) -> Self {
        Self::new(dim, move |_, _| DVector::zeros(dim))
    }

    pub fn with_jacobian(
        mut self,
        jacobian: impl Fn(f64, &[f64]) -> DMatrix<f64> + Send + Sync + 'static,
    ) -> Self {
        self.jacobian = Some(Arc::new(jacobian));
        self
    }
}

impl VectorField for AnalyticVectorField {
    fn dim(&self) -> usize {
        self.dim
    }

    fn value(&self, t: f64, x: &[f64]) -> DVector<f64> {
        (self.value)(t, x)
    }

    fn jacobian(&self, t: f64, x: &[f64]) -> DMatrix<f64> {
        match &self.jacobian {
            Some(j) => j(t, x),
            None => {
                let n = x.len();
                let h = crate::fields::fd_step(x);
                let mut xp = x.to_vec();
                let mut jac = DMatrix::zeros(n, self.dim);
                for i in 0..n {
                    xp[i] = x[i] + h;
                    let vp = (self.value)(t, &xp);
                    xp[i] = x[i] - h;
                    let vm = (self.value)(t, &xp);
                    xp[i] = x[i];
                    for j in 0..self.dim {
                        jac[(i, j)] = (vp[j] - vm[j]) / (2.0 * h);
                    }
                }
                jac
            }
        }
    }
}

/// Mark field backed by a closure `(t, mark, x) -> R`.
#[derive(Clone)]
pub struct AnalyticMarkField {
    value: Arc<dyn Fn(f64, &[f64], &[f64]) -> f64 + Send + Sync>,
}

impl AnalyticMarkField {
    pub fn new(value: impl Fn(f64, &[f64], &[f64]) -> f64 + Send + Sync + 'static) -> Self {
        Self { value: Arc::new(value) }
    }

    pub fn zero() -> Self {
        Self::new(|_, _, _| 0.0)
    }
}

impl MarkField for AnalyticMarkField {
    fn value(&self, t: f64, mark: &[f64], x: &[f64]) -> f64 {
        (self.value)(t, mark, x)
    }
}

/// A candidate test field: value part `phi` with its decomposition rates
/// `alpha` (time drift), `beta` (Brownian loading), `gamma` (jump loading).
/// Deterministic smooth fields take `alpha = d phi/dt`, `beta = 0`,
/// `gamma = 0`.
#[derive(Clone)]
pub struct TestField {
    pub phi: AnalyticScalarField,
    pub alpha: Arc<dyn Fn(f64, &[f64]) -> f64 + Send + Sync>,
    pub beta: AnalyticVectorField,
    pub gamma: AnalyticMarkField,
}

/// Fitted constants of the test-field growth bounds: levels against
/// `1+|x|^p`, first derivatives against `1+|x|^{p-1}`, Hessian against
/// `1+|x|^{p-2}`.
#[derive(Debug, Clone)]
pub struct TestFieldGrowthReport {
    pub level_constant: f64,
    pub gradient_constant: f64,
    pub hessian_constant: f64,
}

impl TestField {
    /// Probes the growth bounds on the grid `points x times`, returning
    /// the fitted constants (max weighted ratios).
    pub fn probe_growth(
        &self,
        mm: &MarkMeasure,
        times: &[f64],
        points: &[Vec<f64>],
        p: f64,
    ) -> TestFieldGrowthReport {
        let mut c0: f64 = 0.0;
        let mut c1: f64 = 0.0;
        let mut c2: f64 = 0.0;
        for &t in times {
            for x in points {
                let xn = norm(x);
                let w0 = 1.0 + xn.powf(p);
                let w1 = 1.0 + xn.powf(p - 1.0);
                let w2 = 1.0 + xn.powf(p - 2.0);
                let gamma_norm = mm.l2_norm(|e| self.gamma.value(t, e, x));
                let level = self.phi.value(t, x).abs()
                    + (self.alpha)(t, x).abs()
                    + self.beta.value(t, x).norm()
                    + gamma_norm;
                c0 = c0.max(level / w0);
                let d_alpha = central_gradient(|y| (self.alpha)(t, y), x).norm();
                let first = self.phi.gradient(t, x).norm()
                    + d_alpha
                    + self.beta.jacobian(t, x).norm();
                c1 = c1.max(first / w1);
                c2 = c2.max(self.phi.hessian(t, x).norm() / w2);
            }
        }
        TestFieldGrowthReport { level_constant: c0, gradient_constant: c1, hessian_constant: c2 }
    }
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Evaluates the Hamiltonian
/// `f(t,x,u,y, sigma^T p_grad + q, k_agg) + <p_grad, b> + tr(Q sigma^T)
///  + 1/2 tr(A sigma sigma^T)`.
#[allow(clippy::too_many_arguments)]
pub fn hamiltonian(
    cs: &CoefficientSet,
    t: f64,
    x: &[f64],
    u: &[f64],
    y: f64,
    p_grad: &DVector<f64>,
    q: &DVector<f64>,
    big_q: &DMatrix<f64>,
    a: &DMatrix<f64>,
    k_agg: f64,
    hist: &NoiseHistory,
) -> Result<f64> {
    if x.len() != cs.n
        || u.len() != cs.control_dim
        || p_grad.len() != cs.n
        || q.len() != cs.d
        || big_q.shape() != (cs.n, cs.d)
        || a.shape() != (cs.n, cs.n)
    {
        return Err(Error::InvalidArgument(format!(
            "hamiltonian argument dimensions inconsistent with instance (n = {}, d = {})",
            cs.n, cs.d
        )));
    }
    let b = (cs.b)(t, x, u, hist);
    let sigma = (cs.sigma)(t, x, u, hist);
    let z_slot = sigma.transpose() * p_grad + q;
    let f_val = (cs.f)(t, x, u, y, z_slot.as_slice(), k_agg, hist);
    let trace_q = (big_q * sigma.transpose()).trace();
    let trace_a = 0.5 * (sigma.transpose() * a * &sigma).trace();
    Ok(f_val + p_grad.dot(&b) + trace_q + trace_a)
}

/// Nonlocal difference `I_phi(t, e, x, u) = phi(t, x + g(t,e,x,u)) - phi(t, x)`.
pub fn nonlocal_i(
    cs: &CoefficientSet,
    phi: &dyn ScalarField,
    t: f64,
    mark: &[f64],
    x: &[f64],
    u: &[f64],
    hist: &NoiseHistory,
) -> f64 {
    let g = (cs.g)(t, mark, x, u, hist);
    let shifted: Vec<f64> = x.iter().zip(g.iter()).map(|(a, b)| a + b).collect();
    phi.value(t, &shifted) - phi.value(t, x)
}

/// Weighted nonlocal aggregate
/// `L(t,x,u,phi,psi) = integral of (I_phi(t,e,x,u) + psi(t, e, x+g)) l(t,e) d nu`.
pub fn nonlocal_l(
    cs: &CoefficientSet,
    mm: &MarkMeasure,
    t: f64,
    x: &[f64],
    u: &[f64],
    phi: &dyn ScalarField,
    psi: &dyn MarkField,
    hist: &NoiseHistory,
) -> f64 {
    let phi_x = phi.value(t, x);
    mm.quadrature(|mark| {
        let g = (cs.g)(t, mark, x, u, hist);
        let shifted: Vec<f64> = x.iter().zip(g.iter()).map(|(a, b)| a + b).collect();
        let i_phi = phi.value(t, &shifted) - phi_x;
        (i_phi + psi.value(t, mark, &shifted)) * (cs.l_weight)(t, mark)
    })
}

/// Integro-differential generator
/// `L^u phi = <b, D phi> + 1/2 tr(sigma sigma^T D^2 phi)
///  + integral of [phi(x+g) - phi(x) - <g, D phi>] d nu`.
pub fn generator_l(
    cs: &CoefficientSet,
    mm: &MarkMeasure,
    t: f64,
    x: &[f64],
    u: &[f64],
    phi: &dyn ScalarField,
    hist: &NoiseHistory,
) -> f64 {
    let phi_x = phi.value(t, x);
    let grad = phi.gradient(t, x);
    let hess = phi.hessian(t, x);
    let b = (cs.b)(t, x, u, hist);
    let sigma = (cs.sigma)(t, x, u, hist);
    let local = grad.dot(&b) + 0.5 * (sigma.transpose() * &hess * &sigma).trace();
    let jump = mm.quadrature(|mark| {
        let g = (cs.g)(t, mark, x, u, hist);
        let shifted: Vec<f64> = x.iter().zip(g.iter()).map(|(a, b)| a + b).collect();
        phi.value(t, &shifted) - phi_x - grad.dot(&g)
    });
    local + jump
}

/// Result of a drift minimization: the value and the index of the control
/// that realizes it (lowest index on ties).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DriftEval {
    pub value: f64,
    pub minimizer: usize,
}

/// Full nonlinear drift: for each control `u`,
///
/// `H(t, x, u, V(t,x), DV, Z(t,x), DZ, D^2V, L(t,x,u,V,K))
///  + integral of [I_V(t,e,x,u) - <g, DV> + K(t, e, x+g)] d nu`,
///
/// minimized over the control set. The mark field `K` enters the
/// compensator integral at the displaced state, matching the pathwise
/// identification `K_s(e) = K(s, e, X_{s-} + g) + I_V(s, e, X_{s-}, u)`.
pub fn drift_f(
    cs: &CoefficientSet,
    mm: &MarkMeasure,
    t: f64,
    x: &[f64],
    v: &dyn ScalarField,
    z: &dyn VectorField,
    k: &dyn MarkField,
    hist: &NoiseHistory,
) -> Result<DriftEval> {
    if cs.control_set.is_empty() {
        return Err(Error::InvalidArgument("drift minimization over an empty control set".into()));
    }
    let v0 = v.value(t, x);
    let dv = v.gradient(t, x);
    let d2v = v.hessian(t, x);
    let z0 = z.value(t, x);
    let dz = z.jacobian(t, x);
    let mut best = DriftEval { value: f64::INFINITY, minimizer: 0 };
    for (idx, u) in cs.control_set.iter().enumerate() {
        let u = u.as_slice();
        // One pass over the atoms yields both the weighted aggregate fed to
        // the Hamiltonian and the compensator correction.
        let mut weighted = 0.0;
        let mut compensator = 0.0;
        for atom in mm.atoms() {
            let g = (cs.g)(t, &atom.mark, x, u, hist);
            let shifted: Vec<f64> = x.iter().zip(g.iter()).map(|(a, b)| a + b).collect();
            let i_v = v.value(t, &shifted) - v0;
            let k_displaced = k.value(t, &atom.mark, &shifted);
            weighted += atom.weight * (i_v + k_displaced) * (cs.l_weight)(t, &atom.mark);
            compensator += atom.weight * (i_v - dv.dot(&g) + k_displaced);
        }
        let ham = hamiltonian(cs, t, x, u, v0, &dv, &z0, &dz, &d2v, weighted, hist)?;
        let value = ham + compensator;
        if value < best.value {
            best = DriftEval { value, minimizer: idx };
        }
    }
    Ok(best)
}

/// Drift on a test field: `drift_f` with the value, Brownian, and jump
/// characteristics read from `(phi, beta, gamma)`. Shares the `drift_f`
/// code path, so substitution equivalence is exact.
pub fn test_field_f(
    cs: &CoefficientSet,
    mm: &MarkMeasure,
    t: f64,
    x: &[f64],
    tf: &TestField,
    hist: &NoiseHistory,
) -> Result<DriftEval> {
    drift_f(cs, mm, t, x, &tf.phi, &tf.beta, &tf.gamma, hist)
}

/// Probe description for the assumption checks: sample box, sample times,
/// number of pairs, and the ratio threshold above which a probe is flagged.
#[derive(Debug, Clone)]
pub struct AssumptionProbeSpec {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub times: Vec<f64>,
    pub n_pairs: usize,
    pub ratio_bound: f64,
    pub seed: u64,
}

/// Empirical assumption report: maximal Lipschitz and growth ratios over
/// the sampled pairs, in the weighted forms of the standing assumptions.
#[derive(Debug, Clone, Default)]
pub struct AssumptionReport {
    pub lip_b: f64,
    pub lip_sigma: f64,
    /// Jump coefficient ratio against the modulus rho(e).
    pub lip_g: f64,
    /// Terminal cost ratio against the weight (1 + |x|^{p-1} + |x'|^{p-1}).
    pub lip_h_weighted: f64,
    /// Driver ratio in (x, u) against the polynomial weight of the
    /// assumption.
    pub lip_f_state_weighted: f64,
    /// Driver ratio in (y, z, k), plain Lipschitz.
    pub lip_f_yzk: f64,
    pub growth_b: f64,
    pub growth_sigma: f64,
    pub growth_g: f64,
    pub growth_f: f64,
    pub growth_h: f64,
    /// Minimal observed slope of f in its k-aggregate slot; nonnegative
    /// up to roundoff when the monotonicity assumption holds.
    pub driver_k_min_slope: f64,
    pub l_weight_min: f64,
    /// Fitted constant of l(t,e) <= C (1 + |e|).
    pub l_weight_growth: f64,
    /// Diagnostic integral of exp(rho) d nu.
    pub exp_integrability: f64,
    /// Human-readable descriptions of ratios exceeding the bound.
    pub flags: Vec<String>,
}

/// Samples argument pairs and reports the empirical assumption ratios.
pub fn probe_assumptions(
    cs: &CoefficientSet,
    mm: &MarkMeasure,
    spec: &AssumptionProbeSpec,
) -> Result<AssumptionReport> {
    if spec.n_pairs == 0 || spec.times.is_empty() {
        return Err(Error::InvalidArgument("assumption probe needs pairs and times".into()));
    }
    if spec.lo.len() != cs.n || spec.hi.len() != cs.n {
        return Err(Error::InvalidArgument("probe box dimension mismatch".into()));
    }
    let hist = NoiseHistory::empty();
    let mut rng = derive_stream(spec.seed, "assumption-probe", 0);
    let mut rep = AssumptionReport {
        driver_k_min_slope: f64::INFINITY,
        l_weight_min: f64::INFINITY,
        exp_integrability: mm.exp_integrability(),
        ..Default::default()
    };
    let sample_x = |rng: &mut rand_chacha::ChaCha12Rng| -> Vec<f64> {
        (0..cs.n).map(|i| rng.gen_range(spec.lo[i]..=spec.hi[i])).collect()
    };
    for _ in 0..spec.n_pairs {
        let t = spec.times[rng.gen_range(0..spec.times.len())];
        let x = sample_x(&mut rng);
        let x2 = sample_x(&mut rng);
        let u = &cs.control_set[rng.gen_range(0..cs.control_set.len())];
        let u2 = &cs.control_set[rng.gen_range(0..cs.control_set.len())];
        let dx = norm(&x.iter().zip(&x2).map(|(a, b)| a - b).collect::<Vec<_>>());
        let du = (u - u2).norm();
        let dxu = dx + du;
        let xn = norm(&x);
        let xn2 = norm(&x2);
        let un = u.norm();
        let un2 = u2.norm();

        let b1 = (cs.b)(t, &x, u.as_slice(), &hist);
        let b2 = (cs.b)(t, &x2, u2.as_slice(), &hist);
        let s1 = (cs.sigma)(t, &x, u.as_slice(), &hist);
        let s2 = (cs.sigma)(t, &x2, u2.as_slice(), &hist);
        rep.growth_b = rep.growth_b.max(b1.norm() / (1.0 + xn + un));
        rep.growth_sigma = rep.growth_sigma.max(s1.norm() / (1.0 + xn + un));
        if dxu > 1e-12 {
            rep.lip_b = rep.lip_b.max((b1 - b2).norm() / dxu);
            rep.lip_sigma = rep.lip_sigma.max((s1 - s2).norm() / dxu);
        }

        for atom in mm.atoms() {
            let g1 = (cs.g)(t, &atom.mark, &x, u.as_slice(), &hist);
            let g2 = (cs.g)(t, &atom.mark, &x2, u2.as_slice(), &hist);
            if atom.rho > 0.0 {
                rep.growth_g = rep.growth_g.max(g1.norm() / (atom.rho * (1.0 + xn + un)));
                if dxu > 1e-12 {
                    rep.lip_g = rep.lip_g.max((g1 - g2).norm() / (atom.rho * dxu));
                }
            } else if g1.norm() > 0.0 || g2.norm() > 0.0 {
                rep.flags.push(format!(
                    "jump coefficient nonzero at a mark with rho = 0 (|g| = {})",
                    g1.norm().max(g2.norm())
                ));
            }
            let lw = (cs.l_weight)(t, &atom.mark);
            rep.l_weight_min = rep.l_weight_min.min(lw);
            rep.l_weight_growth = rep.l_weight_growth.max(lw / (1.0 + norm(&atom.mark)));
        }

        let h1 = (cs.h)(&x);
        let h2 = (cs.h)(&x2);
        rep.growth_h = rep.growth_h.max(h1.abs() / (1.0 + xn.powf(cs.p)));
        if dx > 1e-12 {
            let w = 1.0 + xn.powf(cs.p - 1.0) + xn2.powf(cs.p - 1.0);
            rep.lip_h_weighted = rep.lip_h_weighted.max((h1 - h2).abs() / (w * dx));
        }

        let y: f64 = 2.0 * rng.sample::<f64, _>(StandardNormal);
        let z: Vec<f64> = (0..cs.d).map(|_| 2.0 * rng.sample::<f64, _>(StandardNormal)).collect();
        let k: f64 = 2.0 * rng.sample::<f64, _>(StandardNormal);
        let f1 = (cs.f)(t, &x, u.as_slice(), y, &z, k, &hist);
        let f2 = (cs.f)(t, &x2, u2.as_slice(), y, &z, k, &hist);
        let zero = vec![0.0; cs.d];
        let f_origin = (cs.f)(t, &x, u.as_slice(), 0.0, &zero, 0.0, &hist);
        rep.growth_f = rep.growth_f.max(f_origin.abs() / (1.0 + xn.powf(cs.p) + un.powf(cs.p)));
        if dxu > 1e-12 {
            let w = 1.0
                + xn.powf(cs.p - 1.0)
                + xn2.powf(cs.p - 1.0)
                + un.powf(cs.p - 1.0)
                + un2.powf(cs.p - 1.0);
            rep.lip_f_state_weighted = rep.lip_f_state_weighted.max((f1 - f2).abs() / (w * dxu));
        }

        let y2: f64 = 2.0 * rng.sample::<f64, _>(StandardNormal);
        let z2: Vec<f64> = (0..cs.d).map(|_| 2.0 * rng.sample::<f64, _>(StandardNormal)).collect();
        let k2: f64 = 2.0 * rng.sample::<f64, _>(StandardNormal);
        let f3 = (cs.f)(t, &x, u.as_slice(), y2, &z2, k2, &hist);
        let dz = norm(&z.iter().zip(&z2).map(|(a, b)| a - b).collect::<Vec<_>>());
        let dyzk = (y - y2).abs() + dz + (k - k2).abs();
        if dyzk > 1e-12 {
            rep.lip_f_yzk = rep.lip_f_yzk.max((f1 - f3).abs() / dyzk);
        }

        // Monotonicity in the k-aggregate: slope along the k axis alone.
        let (ka, kb) = (k.min(k2), k.max(k2));
        if kb - ka > 1e-9 {
            let fa = (cs.f)(t, &x, u.as_slice(), y, &z, ka, &hist);
            let fb = (cs.f)(t, &x, u.as_slice(), y, &z, kb, &hist);
            rep.driver_k_min_slope = rep.driver_k_min_slope.min((fb - fa) / (kb - ka));
        }
    }
    if mm.n_atoms() == 0 {
        rep.l_weight_min = 0.0;
    }
    if rep.driver_k_min_slope == f64::INFINITY {
        rep.driver_k_min_slope = 0.0;
    }
    for (name, value) in [
        ("b Lipschitz", rep.lip_b),
        ("sigma Lipschitz", rep.lip_sigma),
        ("g Lipschitz", rep.lip_g),
        ("h weighted Lipschitz", rep.lip_h_weighted),
        ("f state weighted Lipschitz", rep.lip_f_state_weighted),
        ("f (y,z,k) Lipschitz", rep.lip_f_yzk),
        ("b growth", rep.growth_b),
        ("sigma growth", rep.growth_sigma),
        ("g growth", rep.growth_g),
        ("f growth", rep.growth_f),
        ("h growth", rep.growth_h),
        ("l weight growth", rep.l_weight_growth),
    ] {
        if value > spec.ratio_bound {
            rep.flags.push(format!("{name} ratio {value} exceeds bound {}", spec.ratio_bound));
        }
    }
    if rep.l_weight_min < 0.0 {
        rep.flags.push(format!("l weight attains negative value {}", rep.l_weight_min));
    }
    if rep.driver_k_min_slope < -1e-9 {
        rep.flags
            .push(format!("driver decreases in k: min slope {}", rep.driver_k_min_slope));
    }
    Ok(rep)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::{FnScalarField, ZeroMarkField, ZeroVectorField};
    use crate::mark_measure::MarkAtom;
    use approx::assert_relative_eq;

    fn constant_vec(v: Vec<f64>) -> DriftFn {
        Arc::new(move |_, _, _, _| DVector::from_vec(v.clone()))
    }

    fn zero_set(n: usize, d: usize) -> CoefficientSet {
        CoefficientSet {
            n,
            d,
            control_dim: 1,
            p: 2.0,
            control_set: vec![DVector::zeros(1)],
            b: Arc::new(move |_, _, _, _| DVector::zeros(n)),
            sigma: Arc::new(move |_, _, _, _| DMatrix::zeros(n, d)),
            g: Arc::new(move |_, _, _, _, _| DVector::zeros(n)),
            f: Arc::new(|_, _, _, _, _, _, _| 0.0),
            h: Arc::new(|_| 0.0),
            l_weight: Arc::new(|_, _| 1.0),
        }
    }

    fn single_atom(weight: f64, mark: f64) -> MarkMeasure {
        MarkMeasure::new(vec![MarkAtom { mark: vec![mark], weight, rho: 0.5 }]).unwrap()
    }

    #[test]
    fn hamiltonian_reduces_to_driver_without_curvature() {
        let mut cs = zero_set(2, 2);
        cs.f = Arc::new(|_, _, _, y, z, k, _| y + z[0] + 2.0 * z[1] + k);
        let h = hamiltonian(
            &cs,
            0.0,
            &[0.3, -0.1],
            &[0.0],
            1.5,
            &DVector::zeros(2),
            &DVector::from_vec(vec![0.5, 0.25]),
            &DMatrix::zeros(2, 2),
            &DMatrix::zeros(2, 2),
            0.75,
            &NoiseHistory::empty(),
        )
        .unwrap();
        // sigma = 0, so the z-slot is q itself: 1.5 + 0.5 + 0.5 + 0.75.
        assert_relative_eq!(h, 3.25);
    }

    #[test]
    fn hamiltonian_inner_product_of_ones_gives_dimension() {
        let n = 3;
        let mut cs = zero_set(n, 1);
        cs.b = constant_vec(vec![1.0; n]);
        cs.sigma = Arc::new(move |_, _, _, _| DMatrix::from_element(n, 1, 1.0));
        let h = hamiltonian(
            &cs,
            0.0,
            &[0.0; 3],
            &[0.0],
            0.0,
            &DVector::from_element(n, 1.0),
            &DVector::zeros(1),
            &DMatrix::zeros(n, 1),
            &DMatrix::zeros(n, n),
            0.0,
            &NoiseHistory::empty(),
        )
        .unwrap();
        assert_relative_eq!(h, n as f64);
    }

    #[test]
    fn hamiltonian_matches_term_by_term_resummation() {
        // Oracle: assemble each term of the defining formula independently
        // for a fixed small instance and compare.
        let n = 2;
        let d = 2;
        let mut cs = zero_set(n, d);
        cs.b = constant_vec(vec![0.4, -0.2]);
        let sigma = DMatrix::from_row_slice(2, 2, &[0.3, 0.1, -0.2, 0.5]);
        let sig = sigma.clone();
        cs.sigma = Arc::new(move |_, _, _, _| sig.clone());
        cs.f = Arc::new(|_, x, _, y, z, k, _| 0.3 * x[0] + 0.7 * y - 0.2 * z[0] + 0.9 * z[1] + k);
        let x = [0.6, -0.3];
        let y = 0.8;
        let p_grad = DVector::from_vec(vec![0.5, -1.0]);
        let q = DVector::from_vec(vec![0.2, 0.1]);
        let big_q = DMatrix::from_row_slice(2, 2, &[0.1, -0.3, 0.2, 0.4]);
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.2, 0.5]);
        let k_agg = 0.35;

        let z_slot = sigma.transpose() * &p_grad + &q;
        let f_term = 0.3 * x[0] + 0.7 * y - 0.2 * z_slot[0] + 0.9 * z_slot[1] + k_agg;
        let b_term = 0.5 * 0.4 + (-1.0) * (-0.2);
        let q_term = (&big_q * sigma.transpose()).trace();
        let a_term = 0.5 * (&a * &sigma * sigma.transpose()).trace();
        let oracle = f_term + b_term + q_term + a_term;

        let h = hamiltonian(
            &cs,
            0.1,
            &x,
            &[0.0],
            y,
            &p_grad,
            &q,
            &big_q,
            &a,
            k_agg,
            &NoiseHistory::empty(),
        )
        .unwrap();
        assert_relative_eq!(h, oracle, max_relative = 1e-14);
    }

    #[test]
    fn hamiltonian_rejects_dimension_mismatch() {
        let cs = zero_set(2, 1);
        let err = hamiltonian(
            &cs,
            0.0,
            &[0.0; 2],
            &[0.0],
            0.0,
            &DVector::zeros(3),
            &DVector::zeros(1),
            &DMatrix::zeros(2, 1),
            &DMatrix::zeros(2, 2),
            0.0,
            &NoiseHistory::empty(),
        );
        assert!(err.is_err());
    }

    #[test]
    fn nonlocal_difference_of_linear_field_is_linear_in_displacement() {
        let mut cs = zero_set(2, 1);
        cs.g = Arc::new(|_, mark, _, _, _| DVector::from_vec(vec![mark[0], 2.0 * mark[0]]));
        let phi = FnScalarField::new(|_, x| 3.0 * x[0] - x[1]);
        let v = nonlocal_i(&cs, &phi, 0.0, &[0.5], &[1.0, 1.0], &[0.0], &NoiseHistory::empty());
        // <c, g> with c = (3, -1), g = (0.5, 1.0).
        assert_relative_eq!(v, 0.5);
    }

    #[test]
    fn nonlocal_difference_vanishes_without_displacement() {
        let cs = zero_set(1, 1);
        let phi = FnScalarField::new(|_, x| x[0].powi(3));
        let v = nonlocal_i(&cs, &phi, 0.0, &[1.0], &[0.7], &[0.0], &NoiseHistory::empty());
        assert_eq!(v, 0.0);
    }

    #[test]
    fn nonlocal_difference_of_square_at_origin_is_squared_jump() {
        let mut cs = zero_set(2, 1);
        cs.g = Arc::new(|_, _, _, _, _| DVector::from_vec(vec![0.3, -0.4]));
        let phi = FnScalarField::new(|_, x| x.iter().map(|v| v * v).sum());
        let v = nonlocal_i(&cs, &phi, 0.0, &[1.0], &[0.0, 0.0], &[0.0], &NoiseHistory::empty());
        assert_relative_eq!(v, 0.25);
    }

    #[test]
    fn weighted_aggregate_matches_hand_sum_on_single_atom() {
        let mut cs = zero_set(1, 1);
        cs.g = Arc::new(|_, mark, _, _, _| DVector::from_vec(vec![mark[0]]));
        cs.l_weight = Arc::new(|_, mark| 2.0 + mark[0]);
        let mm = single_atom(0.7, 0.5);
        let phi = FnScalarField::new(|_, x| x[0] * x[0]);
        let psi = AnalyticMarkField::new(|_, mark, x| mark[0] * x[0]);
        // Atom e = 0.5, weight 0.7, x = 1: I_phi = (1.5)^2 - 1 = 1.25,
        // psi at displaced = 0.5 * 1.5 = 0.75, l = 2.5.
        let oracle = 0.7 * (1.25 + 0.75) * 2.5;
        let v = nonlocal_l(&cs, &mm, 0.0, &[1.0], &[0.0], &phi, &psi, &NoiseHistory::empty());
        assert_relative_eq!(v, oracle, max_relative = 1e-14);
    }

    #[test]
    fn weighted_aggregate_vanishes_for_zero_weight_or_zero_fields() {
        let mut cs = zero_set(1, 1);
        cs.l_weight = Arc::new(|_, _| 0.0);
        let mm = single_atom(1.0, 1.0);
        let phi = FnScalarField::new(|_, x| x[0].exp());
        let psi = AnalyticMarkField::new(|_, _, x| x[0]);
        let v = nonlocal_l(&cs, &mm, 0.0, &[0.2], &[0.0], &phi, &psi, &NoiseHistory::empty());
        assert_eq!(v, 0.0);
        let zero_phi = FnScalarField::new(|_, _| 0.0);
        let mut cs2 = zero_set(1, 1);
        cs2.g = Arc::new(|_, mark, _, _, _| DVector::from_vec(vec![mark[0]]));
        let v2 = nonlocal_l(
            &cs2,
            &mm,
            0.0,
            &[0.2],
            &[0.0],
            &zero_phi,
            &AnalyticMarkField::zero(),
            &NoiseHistory::empty(),
        );
        assert_eq!(v2, 0.0);
    }

    #[test]
    fn generator_of_square_under_pure_jump_is_weighted_squared_jump() {
        let mut cs = zero_set(2, 1);
        cs.g = Arc::new(|_, _, _, _, _| DVector::from_vec(vec![0.6, -0.8]));
        let mm = single_atom(0.9, 1.0);
        let phi = FnScalarField::new(|_, x| x.iter().map(|v| v * v).sum());
        let v = generator_l(&cs, &mm, 0.0, &[0.4, 0.1], &[0.0], &phi, &NoiseHistory::empty());
        // |x+v|^2 - |x|^2 - 2<x, v> = |v|^2 = 1.0 per unit mass.
        assert_relative_eq!(v, 0.9, max_relative = 1e-9);
    }

    #[test]
    fn generator_of_linear_field_is_drift_transport() {
        let mut cs = zero_set(2, 1);
        cs.b = constant_vec(vec![1.5, -0.5]);
        let mm = MarkMeasure::new(Vec::new()).unwrap();
        let phi = FnScalarField::new(|_, x| 2.0 * x[0] + 4.0 * x[1]);
        let v = generator_l(&cs, &mm, 0.0, &[0.0, 0.0], &[0.0], &phi, &NoiseHistory::empty());
        assert_relative_eq!(v, 2.0 * 1.5 - 4.0 * 0.5, max_relative = 1e-9);
    }

    #[test]
    fn generator_of_constant_vanishes() {
        let mut cs = zero_set(1, 1);
        cs.b = constant_vec(vec![3.0]);
        cs.sigma = Arc::new(|_, _, _, _| DMatrix::from_element(1, 1, 2.0));
        cs.g = Arc::new(|_, _, _, _, _| DVector::from_vec(vec![0.5]));
        let mm = single_atom(1.0, 1.0);
        let phi = FnScalarField::new(|_, _| 42.0);
        let v = generator_l(&cs, &mm, 0.0, &[0.3], &[0.0], &phi, &NoiseHistory::empty());
        assert!(v.abs() < 1e-9, "generator of a constant should vanish, got {v}");
    }

    #[test]
    fn drift_vanishes_on_zero_instance_with_constant_field() {
        let cs = zero_set(1, 1);
        let mm = single_atom(1.0, 1.0);
        let v = FnScalarField::new(|_, _| 5.0);
        let eval = drift_f(
            &cs,
            &mm,
            0.0,
            &[0.1],
            &v,
            &ZeroVectorField { dim: 1 },
            &ZeroMarkField,
            &NoiseHistory::empty(),
        )
        .unwrap();
        assert_eq!(eval.value, 0.0);
    }

    #[test]
    fn drift_minimum_matches_per_control_evaluations() {
        // Oracle: evaluate the two controls through singleton instances and
        // take the smaller value by hand.
        let mut cs = zero_set(1, 1);
        cs.control_set = vec![DVector::from_vec(vec![-1.0]), DVector::from_vec(vec![1.0])];
        cs.b = Arc::new(|_, _, u, _| DVector::from_vec(vec![u[0]]));
        cs.sigma = Arc::new(|_, _, _, _| DMatrix::from_element(1, 1, 0.3));
        cs.f = Arc::new(|_, _, u, _, _, _, _| 0.1 * u[0] * u[0]);
        let mm = single_atom(0.4, 1.0);
        cs.g = Arc::new(|_, mark, _, _, _| DVector::from_vec(vec![0.2 * mark[0]]));
        let field = FnScalarField::new(|_, x| (x[0] - 0.3).powi(2));
        let zf = ZeroVectorField { dim: 1 };
        let km = ZeroMarkField;
        let hist = NoiseHistory::empty();
        let x = [0.5];

        let mut per_control = Vec::new();
        for u in [&[-1.0f64][..], &[1.0f64][..]] {
            let mut single = cs.clone();
            single.control_set = vec![DVector::from_column_slice(u)];
            per_control.push(drift_f(&single, &mm, 0.2, &x, &field, &zf, &km, &hist).unwrap().value);
        }
        let eval = drift_f(&cs, &mm, 0.2, &x, &field, &zf, &km, &hist).unwrap();
        assert_eq!(eval.value, per_control[0].min(per_control[1]));
        assert_eq!(eval.minimizer, if per_control[0] <= per_control[1] { 0 } else { 1 });
    }

    #[test]
    fn drift_rejects_empty_control_set() {
        let mut cs = zero_set(1, 1);
        cs.control_set.clear();
        let mm = single_atom(1.0, 1.0);
        let v = FnScalarField::new(|_, _| 0.0);
        let r = drift_f(
            &cs,
            &mm,
            0.0,
            &[0.0],
            &v,
            &ZeroVectorField { dim: 1 },
            &ZeroMarkField,
            &NoiseHistory::empty(),
        );
        assert!(r.is_err());
    }

    #[test]
    fn drift_is_monotone_under_control_set_enlargement() {
        let mut small = zero_set(1, 1);
        small.b = Arc::new(|_, _, u, _| DVector::from_vec(vec![u[0]]));
        small.f = Arc::new(|_, _, u, _, _, _, _| (u[0] - 0.4).powi(2));
        small.control_set = vec![DVector::from_vec(vec![-1.0])];
        let mut large = small.clone();
        large.control_set.push(DVector::from_vec(vec![0.5]));
        large.control_set.push(DVector::from_vec(vec![1.0]));
        let mm = MarkMeasure::new(Vec::new()).unwrap();
        let field = FnScalarField::new(|_, x| x[0] * x[0]);
        let hist = NoiseHistory::empty();
        for xv in [-0.8, 0.0, 0.9] {
            let vs = drift_f(&small, &mm, 0.0, &[xv], &field, &ZeroVectorField { dim: 1 }, &ZeroMarkField, &hist)
                .unwrap()
                .value;
            let vl = drift_f(&large, &mm, 0.0, &[xv], &field, &ZeroVectorField { dim: 1 }, &ZeroMarkField, &hist)
                .unwrap()
                .value;
            assert!(vl <= vs + 1e-15, "enlarging the control set increased the drift at x = {xv}");
        }
    }

    #[test]
    fn test_field_drift_equals_drift_on_substituted_fields() {
        let mut cs = zero_set(1, 1);
        cs.control_set = vec![DVector::from_vec(vec![0.0]), DVector::from_vec(vec![1.0])];
        cs.b = Arc::new(|_, x, u, _| DVector::from_vec(vec![0.3 * x[0] + u[0]]));
        cs.sigma = Arc::new(|_, _, _, _| DMatrix::from_element(1, 1, 0.5));
        cs.g = Arc::new(|_, mark, x, _, _| DVector::from_vec(vec![0.1 * mark[0] * (1.0 + x[0])]));
        cs.f = Arc::new(|_, x, _, y, z, k, _| x[0] + 0.5 * y + 0.2 * z[0] + 0.3 * k);
        let mm = single_atom(0.8, 0.6);
        let tf = TestField {
            phi: AnalyticScalarField::new(|t, x| (1.0 + t) * x[0].sin()),
            alpha: Arc::new(|_, x| x[0].sin()),
            beta: AnalyticVectorField::new(1, |t, x| DVector::from_vec(vec![0.2 * t + 0.1 * x[0]])),
            gamma: AnalyticMarkField::new(|_, mark, x| 0.05 * mark[0] * x[0]),
        };
        let hist = NoiseHistory::empty();
        let via_tf = test_field_f(&cs, &mm, 0.4, &[0.7], &tf, &hist).unwrap();
        let direct = drift_f(&cs, &mm, 0.4, &[0.7], &tf.phi, &tf.beta, &tf.gamma, &hist).unwrap();
        assert_eq!(via_tf.value.to_bits(), direct.value.to_bits());
        assert_eq!(via_tf.minimizer, direct.minimizer);
    }

    #[test]
    fn test_field_drift_on_linear_field_transport_only() {
        let mut cs = zero_set(2, 1);
        cs.control_set = vec![DVector::from_vec(vec![-1.0]), DVector::from_vec(vec![1.0])];
        cs.b = Arc::new(|_, _, u, _| DVector::from_vec(vec![u[0], 2.0 * u[0]]));
        let mm = MarkMeasure::new(Vec::new()).unwrap();
        let tf = TestField {
            phi: AnalyticScalarField::new(|_, x| 3.0 * x[0] + x[1]),
            alpha: Arc::new(|_, _| 0.0),
            beta: AnalyticVectorField::zero(1),
            gamma: AnalyticMarkField::zero(),
        };
        let eval = test_field_f(&cs, &mm, 0.0, &[0.0, 0.0], &tf, &NoiseHistory::empty()).unwrap();
        // min over u of <(3,1), (u, 2u)> = min(-5, 5).
        assert_relative_eq!(eval.value, -5.0, max_relative = 1e-9);
        assert_eq!(eval.minimizer, 0);
    }

    #[test]
    fn hamiltonian_is_affine_in_gradient_and_curvature_slots() {
        // With the driver independent of z, H is affine in (p_grad, Q, A):
        // check midpoint consistency along random directions.
        let mut cs = zero_set(2, 2);
        cs.b = constant_vec(vec![0.3, -0.7]);
        cs.sigma = Arc::new(|_, _, _, _| DMatrix::from_row_slice(2, 2, &[0.4, 0.0, 0.1, 0.6]));
        cs.f = Arc::new(|_, x, _, y, _, k, _| x[0] - 0.4 * y + 0.2 * k);
        let hist = NoiseHistory::empty();
        let mut rng = derive_stream(3, "affinity", 0);
        for _ in 0..20 {
            let mut draw_vec = |len: usize| {
                DVector::from_iterator(len, (0..len).map(|_| rng.sample::<f64, _>(StandardNormal)))
            };
            let p1 = draw_vec(2);
            let p2 = draw_vec(2);
            let q1 = DMatrix::from_fn(2, 2, |_, _| rng.sample::<f64, _>(StandardNormal));
            let q2 = DMatrix::from_fn(2, 2, |_, _| rng.sample::<f64, _>(StandardNormal));
            let a1 = DMatrix::from_fn(2, 2, |_, _| rng.sample::<f64, _>(StandardNormal));
            let a2 = DMatrix::from_fn(2, 2, |_, _| rng.sample::<f64, _>(StandardNormal));
            let q = DVector::zeros(2);
            let eval = |p: &DVector<f64>, qq: &DMatrix<f64>, a: &DMatrix<f64>| {
                hamiltonian(&cs, 0.2, &[0.5, -0.2], &[0.0], 0.9, p, &q, qq, a, 0.3, &hist).unwrap()
            };
            let mid = eval(&((&p1 + &p2) * 0.5), &((&q1 + &q2) * 0.5), &((&a1 + &a2) * 0.5));
            let avg = 0.5 * (eval(&p1, &q1, &a1) + eval(&p2, &q2, &a2));
            assert_relative_eq!(mid, avg, max_relative = 1e-12, epsilon = 1e-12);
        }
    }

    #[test]
    fn probes_recover_linear_slope_and_vanish_for_constants() {
        let mut cs = zero_set(1, 1);
        cs.b = Arc::new(|_, x, _, _| DVector::from_vec(vec![2.0 * x[0]]));
        let mm = single_atom(1.0, 1.0);
        let spec = AssumptionProbeSpec {
            lo: vec![-2.0],
            hi: vec![2.0],
            times: vec![0.0, 0.5],
            n_pairs: 400,
            ratio_bound: 50.0,
            seed: 5,
        };
        let rep = probe_assumptions(&cs, &mm, &spec).unwrap();
        assert!((rep.lip_b - 2.0).abs() <= 0.02 * 2.0, "slope estimate {}", rep.lip_b);

        let const_cs = zero_set(1, 1);
        let rep0 = probe_assumptions(&const_cs, &mm, &spec).unwrap();
        assert_eq!(rep0.lip_b, 0.0);
        assert_eq!(rep0.lip_sigma, 0.0);
        assert_eq!(rep0.lip_g, 0.0);
    }

    #[test]
    fn weighted_driver_ratio_of_square_stays_below_one() {
        // |x^2 - x'^2| = |x + x'| |x - x'| <= (1 + |x| + |x'|) |x - x'|.
        let mut cs = zero_set(1, 1);
        cs.f = Arc::new(|_, x, _, _, _, _, _| x[0] * x[0]);
        cs.h = Arc::new(|x| x[0] * x[0]);
        let mm = single_atom(1.0, 1.0);
        let spec = AssumptionProbeSpec {
            lo: vec![-3.0],
            hi: vec![3.0],
            times: vec![0.0],
            n_pairs: 500,
            ratio_bound: 50.0,
            seed: 9,
        };
        let rep = probe_assumptions(&cs, &mm, &spec).unwrap();
        assert!(rep.lip_f_state_weighted <= 1.0 + 1e-12, "ratio {}", rep.lip_f_state_weighted);
        assert!(rep.lip_h_weighted <= 1.0 + 1e-12, "ratio {}", rep.lip_h_weighted);
        assert!(rep.flags.is_empty(), "unexpected flags: {:?}", rep.flags);
    }

    #[test]
    fn decreasing_driver_in_k_is_flagged() {
        let mut cs = zero_set(1, 1);
        cs.f = Arc::new(|_, _, _, _, _, k, _| -k);
        let mm = single_atom(1.0, 1.0);
        let spec = AssumptionProbeSpec {
            lo: vec![-1.0],
            hi: vec![1.0],
            times: vec![0.0],
            n_pairs: 50,
            ratio_bound: 50.0,
            seed: 1,
        };
        let rep = probe_assumptions(&cs, &mm, &spec).unwrap();
        assert!(rep.driver_k_min_slope < 0.0);
        assert!(rep.flags.iter().any(|f| f.contains("driver decreases in k")));
    }

    #[test]
    fn test_field_growth_probe_fits_declared_constants() {
        let mm = single_atom(1.0, 1.0);
        let tf = TestField {
            phi: AnalyticScalarField::new(|_, x| 1.0 + x[0] * x[0]),
            alpha: Arc::new(|_, _| 0.0),
            beta: AnalyticVectorField::zero(1),
            gamma: AnalyticMarkField::zero(),
        };
        let points: Vec<Vec<f64>> = (-8..=8).map(|i| vec![i as f64 * 0.5]).collect();
        let rep = tf.probe_growth(&mm, &[0.0, 1.0], &points, 2.0);
        // phi = 1 + x^2 against 1 + x^2: level constant 1; D phi = 2x against
        // 1 + |x|: constant < 2; Hessian 2 against 2: constant 1.
        assert!(rep.level_constant <= 1.0 + 1e-9);
        assert!(rep.gradient_constant <= 2.0 + 1e-9);
        assert!((rep.hessian_constant - 1.0).abs() <= 1e-3);
    }

    mod proptests {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn drift_monotonicity_in_control_set(x in -2.0f64..2.0, extra in -1.0f64..1.0) {
                let mut small = zero_set(1, 1);
                small.b = Arc::new(|_, _, u, _| DVector::from_vec(vec![u[0]]));
                small.f = Arc::new(|_, _, u, _, _, _, _| u[0].abs());
                small.control_set = vec![DVector::from_vec(vec![0.5])];
                let mut large = small.clone();
                large.control_set.push(DVector::from_vec(vec![extra]));
                let mm = MarkMeasure::new(Vec::new()).unwrap();
                let field = FnScalarField::new(|_, x| x[0] * x[0]);
                let hist = NoiseHistory::empty();
                let vs = drift_f(&small, &mm, 0.0, &[x], &field, &ZeroVectorField { dim: 1 }, &ZeroMarkField, &hist).unwrap().value;
                let vl = drift_f(&large, &mm, 0.0, &[x], &field, &ZeroVectorField { dim: 1 }, &ZeroMarkField, &hist).unwrap().value;
                prop_assert!(vl <= vs + 1e-12);
            }
        }
    }
}
