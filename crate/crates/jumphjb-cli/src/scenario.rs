//! Scenario schema, validation, coefficient builders, and the built-in
//! registry.
//!
//! A scenario file is versioned JSON with a closed schema: unknown keys
//! are errors. Coefficients are selected from named parametric families
//! so that a scenario is fully reproducible from its file alone; the
//! builders map each selection onto the closures the core library
//! consumes.

use jumphjb_core::coefficients::CoefficientSet;
use jumphjb_core::mark_measure::{MarkAtom, MarkMeasure};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::sync::Arc;

pub const SCHEMA_VERSION: u32 = 1;

/// Drift coefficient selection.
#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DriftSpec {
    /// b = 0.
    Zero,
    /// b = value.
    Constant { value: Vec<f64> },
    /// b = matrix * x.
    Linear { matrix: Vec<Vec<f64>> },
    /// b = scale * u (control dimension must equal the state dimension).
    Control { scale: f64 },
    /// b_i = scale * |x_i|.
    AbsSlope { scale: f64 },
}

/// Diffusion coefficient selection.
#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DiffusionSpec {
    /// sigma = matrix (n x d).
    Constant { matrix: Vec<Vec<f64>> },
    /// sigma = scale * x (scalar state and noise).
    Proportional { scale: f64 },
    /// sigma = base + slope * |x| (scalar state and noise).
    AbsAffine { base: f64, slope: f64 },
}

/// Jump-size coefficient selection.
#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum JumpSpec {
    /// g = 0 (scenario may still carry no atoms at all).
    Zero,
    /// g = scale * mark (mark dimension must equal the state dimension).
    ConstantMark { scale: f64 },
    /// g = scale * mark[0] * x (scalar state).
    ProportionalMark { scale: f64 },
    /// g = scale * mark[0] * |x| (scalar state).
    AbsMark { scale: f64 },
}

/// Cost-driver selection.
#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DriverSpec {
    /// f = 0.
    Zero,
    /// f = rate * y.
    LinearY { rate: f64 },
    /// f = rate * y + kink_weight * |x|.
    KinkCost { rate: f64, kink_weight: f64 },
}

impl DriverSpec {
    /// Lipschitz rate of the driver in its cost argument.
    pub fn lipschitz_y(&self) -> f64 {
        match self {
            DriverSpec::Zero => 0.0,
            DriverSpec::LinearY { rate } | DriverSpec::KinkCost { rate, .. } => rate.abs(),
        }
    }
}

/// Terminal-cost selection.
#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum TerminalSpec {
    /// h = value.
    Constant { value: f64 },
    /// h = <coeffs, x> + intercept.
    Linear { coeffs: Vec<f64>, intercept: f64 },
    /// h = |x - center|^2.
    QuadraticDistance { center: Vec<f64> },
    /// h = |x|.
    AbsValue,
    /// h = exp(-|x|^2 / (2 width^2)).
    Gaussian { width: f64 },
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct AtomSpec {
    pub mark: Vec<f64>,
    pub weight: f64,
    pub rho: f64,
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TimeSpec {
    pub t0: f64,
    pub t_end: f64,
    pub steps: usize,
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SpaceSpec {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub cells: Vec<usize>,
}

/// Symmetric probe grid `points` per axis over `[-half_width, half_width]^n`.
#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ProbeSpec {
    pub half_width: f64,
    pub points: usize,
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ProjectionLevelSpec {
    pub intervals: usize,
    pub groups: usize,
}

fn default_cloud() -> usize {
    1_000
}

fn default_budget() -> u64 {
    1_000_000
}

fn default_projection_paths() -> usize {
    4_096
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SolverSpec {
    pub basis_degree: u32,
    pub n_paths: usize,
    #[serde(default = "default_cloud")]
    pub cloud_per_control: usize,
    #[serde(default = "default_budget")]
    pub budget: u64,
    /// Additive discretization allowance for the dynamic-programming
    /// residual threshold.
    #[serde(default)]
    pub dpp_allowance: f64,
    /// Path count used when fitting projection residual tables.
    #[serde(default = "default_projection_paths")]
    pub projection_paths: usize,
}

fn default_comparison_shift() -> f64 {
    0.5
}

fn default_bounding_c_v() -> f64 {
    1.0
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub schema_version: u32,
    pub name: String,
    pub description: String,
    pub state_dim: usize,
    pub noise_dim: usize,
    pub growth_exponent: f64,
    pub drift: DriftSpec,
    pub diffusion: DiffusionSpec,
    pub jump: JumpSpec,
    pub driver: DriverSpec,
    pub terminal: TerminalSpec,
    pub mark_atoms: Vec<AtomSpec>,
    pub control_set: Vec<Vec<f64>>,
    pub x0: Vec<f64>,
    pub time: TimeSpec,
    /// Count of evenly spaced decision nodes for policy families.
    #[serde(default)]
    pub decision_nodes: Option<usize>,
    #[serde(default)]
    pub space: Option<SpaceSpec>,
    #[serde(default)]
    pub probe: Option<ProbeSpec>,
    pub solver: SolverSpec,
    #[serde(default)]
    pub mollify_levels: Vec<u32>,
    #[serde(default)]
    pub projection_levels: Vec<ProjectionLevelSpec>,
    /// Closed-form mean of X(T) (first coordinate) when one exists.
    #[serde(default)]
    pub expected_terminal_mean: Option<f64>,
    /// Closed-form recursive cost at time zero when one exists.
    #[serde(default)]
    pub expected_y0: Option<f64>,
    /// Constant subtracted when building the shifted subsolution.
    #[serde(default = "default_comparison_shift")]
    pub comparison_shift: f64,
    /// Field-growth constant used by the bounding envelope.
    #[serde(default = "default_bounding_c_v")]
    pub bounding_c_v: f64,
    pub master_seed: u64,
}

impl Scenario {
    /// Schema and cross-field validation; returns a human-readable
    /// message on the first violation.
    pub fn validate(&self) -> Result<(), String> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(format!(
                "schema_version {} is not supported (expected {})",
                self.schema_version, SCHEMA_VERSION
            ));
        }
        let n = self.state_dim;
        let d = self.noise_dim;
        if n == 0 || n > 2 || d == 0 {
            return Err(format!("state_dim {} must be 1 or 2 and noise_dim {} positive", n, d));
        }
        if self.x0.len() != n {
            return Err(format!("x0 has {} coordinates, state_dim is {}", self.x0.len(), n));
        }
        if !(self.growth_exponent >= 2.0) {
            return Err(format!("growth_exponent {} must be >= 2", self.growth_exponent));
        }
        if self.control_set.is_empty() {
            return Err("control_set must be nonempty".into());
        }
        let control_dim = self.control_set[0].len();
        if control_dim == 0 || self.control_set.iter().any(|u| u.len() != control_dim) {
            return Err("control_set entries must share a positive dimension".into());
        }
        match &self.drift {
            DriftSpec::Constant { value } if value.len() != n => {
                return Err("constant drift dimension mismatch".into());
            }
            DriftSpec::Linear { matrix }
                if matrix.len() != n || matrix.iter().any(|r| r.len() != n) =>
            {
                return Err("linear drift matrix must be state_dim x state_dim".into());
            }
            DriftSpec::Control { .. } if control_dim != n => {
                return Err("control drift needs control dimension == state_dim".into());
            }
            _ => {}
        }
        match &self.diffusion {
            DiffusionSpec::Constant { matrix }
                if matrix.len() != n || matrix.iter().any(|r| r.len() != d) =>
            {
                return Err("diffusion matrix must be state_dim x noise_dim".into());
            }
            DiffusionSpec::Proportional { .. } | DiffusionSpec::AbsAffine { .. }
                if n != 1 || d != 1 =>
            {
                return Err("state-dependent scalar diffusion needs state_dim = noise_dim = 1".into());
            }
            _ => {}
        }
        let mark_dim = self.mark_atoms.first().map_or(1, |a| a.mark.len());
        if self.mark_atoms.iter().any(|a| a.mark.len() != mark_dim) {
            return Err("mark atoms must share one mark dimension".into());
        }
        if self.mark_atoms.iter().any(|a| a.weight <= 0.0 || !a.weight.is_finite()) {
            return Err("atom weights must be positive and finite".into());
        }
        match &self.jump {
            JumpSpec::ConstantMark { .. } if !self.mark_atoms.is_empty() && mark_dim != n => {
                return Err("constant-mark jumps need mark dimension == state_dim".into());
            }
            JumpSpec::ProportionalMark { .. } | JumpSpec::AbsMark { .. } if n != 1 => {
                return Err("state-proportional jumps need state_dim = 1".into());
            }
            _ => {}
        }
        match &self.terminal {
            TerminalSpec::Linear { coeffs, .. } if coeffs.len() != n => {
                return Err("linear terminal coefficient dimension mismatch".into());
            }
            TerminalSpec::QuadraticDistance { center } if center.len() != n => {
                return Err("quadratic terminal center dimension mismatch".into());
            }
            TerminalSpec::Gaussian { width } if *width <= 0.0 => {
                return Err("gaussian terminal width must be positive".into());
            }
            _ => {}
        }
        if self.time.steps == 0 || !(self.time.t_end > self.time.t0) {
            return Err("time grid must have positive steps and t_end > t0".into());
        }
        if let Some(m) = self.decision_nodes {
            if m == 0 || self.time.steps % m != 0 {
                return Err(format!(
                    "decision_nodes {} must divide the {} time steps",
                    m, self.time.steps
                ));
            }
        }
        if let Some(space) = &self.space {
            if space.lo.len() != n || space.hi.len() != n || space.cells.len() != n {
                return Err("space box dimensions must match state_dim".into());
            }
        }
        if let Some(probe) = &self.probe {
            if probe.points < 3 || !(probe.half_width > 0.0) {
                return Err("probe needs at least 3 points and a positive half width".into());
            }
        }
        if self.solver.n_paths == 0 {
            return Err("solver.n_paths must be positive".into());
        }
        if self.mollify_levels.iter().any(|&l| l == 0) {
            return Err("mollify_levels must be >= 1".into());
        }
        for level in &self.projection_levels {
            if level.intervals == 0 || self.time.steps % level.intervals != 0 {
                return Err(format!(
                    "projection intervals {} must divide the {} time steps",
                    level.intervals, self.time.steps
                ));
            }
            let n_atoms = self.mark_atoms.len();
            if level.groups > 0 && (n_atoms == 0 || n_atoms % level.groups != 0) {
                return Err(format!(
                    "projection groups {} must divide the {} mark atoms",
                    level.groups, n_atoms
                ));
            }
        }
        Ok(())
    }

    /// Maps the coefficient selections onto core closures.
    pub fn build(&self) -> Result<(CoefficientSet, MarkMeasure), String> {
        self.validate()?;
        let n = self.state_dim;

        let b: jumphjb_core::coefficients::DriftFn = match self.drift.clone() {
            DriftSpec::Zero => Arc::new(move |_, _, _, _| DVector::zeros(n)),
            DriftSpec::Constant { value } => {
                Arc::new(move |_, _, _, _| DVector::from_column_slice(&value))
            }
            DriftSpec::Linear { matrix } => {
                let a = DMatrix::from_fn(n, n, |r, c| matrix[r][c]);
                Arc::new(move |_, x: &[f64], _, _| &a * DVector::from_column_slice(x))
            }
            DriftSpec::Control { scale } => Arc::new(move |_, _, u: &[f64], _| {
                DVector::from_iterator(n, u.iter().map(|&v| scale * v))
            }),
            DriftSpec::AbsSlope { scale } => Arc::new(move |_, x: &[f64], _, _| {
                DVector::from_iterator(n, x.iter().map(|&v| scale * v.abs()))
            }),
        };

        let d = self.noise_dim;
        let sigma: jumphjb_core::coefficients::DiffusionFn = match self.diffusion.clone() {
            DiffusionSpec::Constant { matrix } => {
                let m = DMatrix::from_fn(n, d, |r, c| matrix[r][c]);
                Arc::new(move |_, _, _, _| m.clone())
            }
            DiffusionSpec::Proportional { scale } => {
                Arc::new(move |_, x: &[f64], _, _| DMatrix::from_element(1, 1, scale * x[0]))
            }
            DiffusionSpec::AbsAffine { base, slope } => Arc::new(move |_, x: &[f64], _, _| {
                DMatrix::from_element(1, 1, base + slope * x[0].abs())
            }),
        };

        let g: jumphjb_core::coefficients::JumpSizeFn = match self.jump.clone() {
            JumpSpec::Zero => Arc::new(move |_, _, _, _, _| DVector::zeros(n)),
            JumpSpec::ConstantMark { scale } => Arc::new(move |_, mark: &[f64], _, _, _| {
                DVector::from_iterator(mark.len(), mark.iter().map(|&m| scale * m))
            }),
            JumpSpec::ProportionalMark { scale } => {
                Arc::new(move |_, mark: &[f64], x: &[f64], _, _| {
                    DVector::from_element(1, scale * mark[0] * x[0])
                })
            }
            JumpSpec::AbsMark { scale } => Arc::new(move |_, mark: &[f64], x: &[f64], _, _| {
                DVector::from_element(1, scale * mark[0] * x[0].abs())
            }),
        };

        let f: jumphjb_core::coefficients::DriverFn = match self.driver.clone() {
            DriverSpec::Zero => Arc::new(|_, _, _, _, _, _, _| 0.0),
            DriverSpec::LinearY { rate } => Arc::new(move |_, _, _, y, _, _, _| rate * y),
            DriverSpec::KinkCost { rate, kink_weight } => {
                Arc::new(move |_, x: &[f64], _, y, _, _, _| {
                    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                    rate * y + kink_weight * norm
                })
            }
        };

        let h: jumphjb_core::coefficients::TerminalFn = match self.terminal.clone() {
            TerminalSpec::Constant { value } => Arc::new(move |_| value),
            TerminalSpec::Linear { coeffs, intercept } => Arc::new(move |x: &[f64]| {
                intercept + coeffs.iter().zip(x).map(|(c, v)| c * v).sum::<f64>()
            }),
            TerminalSpec::QuadraticDistance { center } => Arc::new(move |x: &[f64]| {
                x.iter().zip(&center).map(|(v, c)| (v - c) * (v - c)).sum()
            }),
            TerminalSpec::AbsValue => {
                Arc::new(|x: &[f64]| x.iter().map(|v| v * v).sum::<f64>().sqrt())
            }
            TerminalSpec::Gaussian { width } => Arc::new(move |x: &[f64]| {
                let norm2: f64 = x.iter().map(|v| v * v).sum();
                (-norm2 / (2.0 * width * width)).exp()
            }),
        };

        let cs = CoefficientSet {
            n,
            d,
            control_dim: self.control_set[0].len(),
            p: self.growth_exponent,
            control_set: self
                .control_set
                .iter()
                .map(|u| DVector::from_column_slice(u))
                .collect(),
            b,
            sigma,
            g,
            f,
            h,
            l_weight: Arc::new(|_, _| 1.0),
        };
        let atoms = self
            .mark_atoms
            .iter()
            .map(|a| MarkAtom { mark: a.mark.clone(), weight: a.weight, rho: a.rho })
            .collect();
        let mm = MarkMeasure::new(atoms).map_err(|e| e.to_string())?;
        Ok((cs, mm))
    }

    /// Evenly spaced decision nodes (node 0 always included).
    pub fn decision_node_list(&self, steps: usize) -> Vec<usize> {
        let m = self.decision_nodes.unwrap_or(1);
        (0..m).map(|j| j * steps / m).collect()
    }

    /// Probe states: a symmetric tensor grid, `points` per axis.
    pub fn probe_states(&self, half_width: f64, points: usize) -> Vec<Vec<f64>> {
        let n = self.state_dim;
        let axis: Vec<f64> = (0..points)
            .map(|i| -half_width + 2.0 * half_width * i as f64 / (points - 1) as f64)
            .collect();
        match n {
            1 => axis.iter().map(|&v| vec![v]).collect(),
            _ => {
                let mut out = Vec::with_capacity(points * points);
                for &a in &axis {
                    for &b in &axis {
                        out.push(vec![a, b]);
                    }
                }
                out
            }
        }
    }

    /// Canonical JSON used for hashing and for writing builtin files.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serialization is infallible")
    }

    pub fn sha256(&self) -> String {
        hex_digest(self.canonical_json().as_bytes())
    }
}

pub fn hex_digest(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{:02x}", b));
    }
    out
}

fn base_solver() -> SolverSpec {
    SolverSpec {
        basis_degree: 2,
        n_paths: 20_000,
        cloud_per_control: default_cloud(),
        budget: default_budget(),
        dpp_allowance: 0.0,
        projection_paths: default_projection_paths(),
    }
}

fn scenario_zero() -> Scenario {
    Scenario {
        schema_version: SCHEMA_VERSION,
        name: "zero".into(),
        description: "No drift, no noise, no jumps: the state is frozen at x0.".into(),
        state_dim: 1,
        noise_dim: 1,
        growth_exponent: 2.0,
        drift: DriftSpec::Zero,
        diffusion: DiffusionSpec::Constant { matrix: vec![vec![0.0]] },
        jump: JumpSpec::Zero,
        driver: DriverSpec::Zero,
        terminal: TerminalSpec::Linear { coeffs: vec![1.0], intercept: 0.0 },
        mark_atoms: vec![],
        control_set: vec![vec![0.0]],
        x0: vec![1.0],
        time: TimeSpec { t0: 0.0, t_end: 1.0, steps: 16 },
        decision_nodes: None,
        space: None,
        probe: Some(ProbeSpec { half_width: 4.0, points: 41 }),
        solver: SolverSpec { basis_degree: 1, n_paths: 128, ..base_solver() },
        mollify_levels: vec![],
        projection_levels: vec![],
        expected_terminal_mean: Some(1.0),
        expected_y0: Some(1.0),
        comparison_shift: default_comparison_shift(),
        bounding_c_v: default_bounding_c_v(),
        master_seed: 101,
    }
}

fn scenario_constant_drift() -> Scenario {
    Scenario {
        schema_version: SCHEMA_VERSION,
        name: "constant-drift".into(),
        description: "Constant drift with small constant diffusion; X(T) has a closed-form mean."
            .into(),
        state_dim: 1,
        noise_dim: 1,
        growth_exponent: 2.0,
        drift: DriftSpec::Constant { value: vec![0.3] },
        diffusion: DiffusionSpec::Constant { matrix: vec![vec![0.15]] },
        jump: JumpSpec::Zero,
        driver: DriverSpec::Zero,
        terminal: TerminalSpec::Linear { coeffs: vec![1.0], intercept: 0.0 },
        mark_atoms: vec![],
        control_set: vec![vec![0.0]],
        x0: vec![0.5],
        time: TimeSpec { t0: 0.0, t_end: 1.0, steps: 32 },
        decision_nodes: None,
        space: None,
        probe: Some(ProbeSpec { half_width: 4.0, points: 41 }),
        solver: base_solver(),
        mollify_levels: vec![],
        projection_levels: vec![],
        expected_terminal_mean: Some(0.8),
        expected_y0: Some(0.8),
        comparison_shift: default_comparison_shift(),
        bounding_c_v: default_bounding_c_v(),
        master_seed: 202,
    }
}

fn scenario_geometric_jump() -> Scenario {
    Scenario {
        schema_version: SCHEMA_VERSION,
        name: "geometric-jump".into(),
        description:
            "Geometric dynamics with four proportional jump atoms; compensation makes the mean exponential."
                .into(),
        state_dim: 1,
        noise_dim: 1,
        growth_exponent: 2.0,
        drift: DriftSpec::Linear { matrix: vec![vec![0.05]] },
        diffusion: DiffusionSpec::Proportional { scale: 0.2 },
        jump: JumpSpec::ProportionalMark { scale: 0.3 },
        driver: DriverSpec::Zero,
        terminal: TerminalSpec::Linear { coeffs: vec![1.0], intercept: 0.0 },
        mark_atoms: vec![
            AtomSpec { mark: vec![-0.5], weight: 0.4, rho: 0.5 },
            AtomSpec { mark: vec![-0.2], weight: 0.6, rho: 0.8 },
            AtomSpec { mark: vec![0.2], weight: 0.6, rho: 0.8 },
            AtomSpec { mark: vec![0.5], weight: 0.4, rho: 1.5 },
        ],
        control_set: vec![vec![0.0]],
        x0: vec![1.0],
        time: TimeSpec { t0: 0.0, t_end: 1.0, steps: 64 },
        decision_nodes: None,
        space: None,
        probe: Some(ProbeSpec { half_width: 4.0, points: 41 }),
        solver: base_solver(),
        mollify_levels: vec![],
        projection_levels: vec![
            ProjectionLevelSpec { intervals: 2, groups: 1 },
            ProjectionLevelSpec { intervals: 4, groups: 2 },
            ProjectionLevelSpec { intervals: 8, groups: 4 },
        ],
        expected_terminal_mean: Some(1.051_271_096_376_024_1),
        expected_y0: None,
        comparison_shift: default_comparison_shift(),
        bounding_c_v: default_bounding_c_v(),
        master_seed: 303,
    }
}

fn scenario_linear_bsde() -> Scenario {
    Scenario {
        schema_version: SCHEMA_VERSION,
        name: "linear-bsde".into(),
        description:
            "Linear driver with constant terminal cost: the recursive cost is exactly exp(rate * T)."
                .into(),
        state_dim: 1,
        noise_dim: 1,
        growth_exponent: 2.0,
        drift: DriftSpec::Zero,
        diffusion: DiffusionSpec::Constant { matrix: vec![vec![0.3]] },
        jump: JumpSpec::ConstantMark { scale: 0.2 },
        driver: DriverSpec::LinearY { rate: 0.5 },
        terminal: TerminalSpec::Constant { value: 1.0 },
        mark_atoms: vec![AtomSpec { mark: vec![1.0], weight: 0.4, rho: 0.5 }],
        control_set: vec![vec![0.0]],
        x0: vec![0.0],
        time: TimeSpec { t0: 0.0, t_end: 1.0, steps: 64 },
        decision_nodes: None,
        space: None,
        probe: Some(ProbeSpec { half_width: 4.0, points: 41 }),
        solver: SolverSpec { basis_degree: 3, n_paths: 100_000, ..base_solver() },
        mollify_levels: vec![],
        projection_levels: vec![],
        expected_terminal_mean: Some(0.0),
        expected_y0: Some(1.648_721_270_700_128_2),
        comparison_shift: default_comparison_shift(),
        bounding_c_v: default_bounding_c_v(),
        master_seed: 404,
    }
}

fn scenario_two_control_1d() -> Scenario {
    Scenario {
        schema_version: SCHEMA_VERSION,
        name: "two-control-1d".into(),
        description:
            "Bang-bang drift toward a quadratic target; the optimal control is constant, so policy classes agree."
                .into(),
        state_dim: 1,
        noise_dim: 1,
        growth_exponent: 2.0,
        drift: DriftSpec::Control { scale: 1.0 },
        diffusion: DiffusionSpec::Constant { matrix: vec![vec![0.2]] },
        jump: JumpSpec::Zero,
        driver: DriverSpec::Zero,
        terminal: TerminalSpec::QuadraticDistance { center: vec![2.0] },
        mark_atoms: vec![],
        control_set: vec![vec![-1.0], vec![1.0]],
        x0: vec![0.0],
        time: TimeSpec { t0: 0.0, t_end: 0.5, steps: 32 },
        decision_nodes: Some(4),
        space: Some(SpaceSpec { lo: vec![-2.0], hi: vec![4.0], cells: vec![96] }),
        probe: Some(ProbeSpec { half_width: 4.0, points: 41 }),
        solver: SolverSpec {
            basis_degree: 3,
            n_paths: 100_000,
            cloud_per_control: 20_000,
            ..base_solver()
        },
        mollify_levels: vec![],
        projection_levels: vec![],
        expected_terminal_mean: None,
        expected_y0: Some(2.27),
        comparison_shift: default_comparison_shift(),
        bounding_c_v: default_bounding_c_v(),
        master_seed: 505,
    }
}

fn scenario_heat_reduction() -> Scenario {
    Scenario {
        schema_version: SCHEMA_VERSION,
        name: "heat-reduction".into(),
        description:
            "Pure diffusion with Gaussian terminal data: the field is a closed-form Gaussian convolution."
                .into(),
        state_dim: 1,
        noise_dim: 1,
        growth_exponent: 2.0,
        drift: DriftSpec::Zero,
        diffusion: DiffusionSpec::Constant { matrix: vec![vec![0.4]] },
        jump: JumpSpec::Zero,
        driver: DriverSpec::Zero,
        terminal: TerminalSpec::Gaussian { width: 0.5 },
        mark_atoms: vec![],
        control_set: vec![vec![0.0]],
        x0: vec![0.0],
        time: TimeSpec { t0: 0.0, t_end: 0.5, steps: 512 },
        decision_nodes: None,
        space: Some(SpaceSpec { lo: vec![-2.0], hi: vec![2.0], cells: vec![256] }),
        probe: Some(ProbeSpec { half_width: 4.0, points: 41 }),
        solver: SolverSpec { basis_degree: 3, ..base_solver() },
        mollify_levels: vec![],
        projection_levels: vec![],
        expected_terminal_mean: Some(0.0),
        expected_y0: None,
        comparison_shift: 0.1,
        bounding_c_v: default_bounding_c_v(),
        master_seed: 606,
    }
}

fn scenario_jump_transport() -> Scenario {
    Scenario {
        schema_version: SCHEMA_VERSION,
        name: "jump-transport".into(),
        description:
            "Compound-Poisson transport with a diffusion floor and linear terminal data; compensation pins the value."
                .into(),
        state_dim: 1,
        noise_dim: 1,
        growth_exponent: 2.0,
        drift: DriftSpec::Zero,
        diffusion: DiffusionSpec::Constant { matrix: vec![vec![0.05]] },
        jump: JumpSpec::ConstantMark { scale: 0.25 },
        driver: DriverSpec::Zero,
        terminal: TerminalSpec::Linear { coeffs: vec![0.7], intercept: 0.3 },
        mark_atoms: vec![AtomSpec { mark: vec![1.0], weight: 1.2, rho: 0.5 }],
        control_set: vec![vec![0.0]],
        x0: vec![0.0],
        time: TimeSpec { t0: 0.0, t_end: 1.0, steps: 64 },
        decision_nodes: None,
        space: Some(SpaceSpec { lo: vec![-2.5], hi: vec![2.5], cells: vec![160] }),
        probe: Some(ProbeSpec { half_width: 4.0, points: 41 }),
        solver: SolverSpec { basis_degree: 3, ..base_solver() },
        mollify_levels: vec![],
        projection_levels: vec![],
        expected_terminal_mean: Some(0.0),
        expected_y0: Some(0.3),
        comparison_shift: default_comparison_shift(),
        bounding_c_v: default_bounding_c_v(),
        master_seed: 707,
    }
}

fn scenario_lipschitz_kink() -> Scenario {
    Scenario {
        schema_version: SCHEMA_VERSION,
        name: "lipschitz-kink".into(),
        description:
            "Every coefficient carries an absolute-value kink at the origin; the smoothing errors decay like 1/l."
                .into(),
        state_dim: 1,
        noise_dim: 1,
        growth_exponent: 2.0,
        drift: DriftSpec::AbsSlope { scale: -0.2 },
        diffusion: DiffusionSpec::AbsAffine { base: 0.3, slope: 0.1 },
        jump: JumpSpec::AbsMark { scale: 0.1 },
        driver: DriverSpec::KinkCost { rate: 0.5, kink_weight: 0.2 },
        terminal: TerminalSpec::AbsValue,
        mark_atoms: vec![AtomSpec { mark: vec![1.0], weight: 0.8, rho: 0.5 }],
        control_set: vec![vec![0.0]],
        x0: vec![0.5],
        time: TimeSpec { t0: 0.0, t_end: 0.5, steps: 32 },
        decision_nodes: None,
        space: None,
        probe: Some(ProbeSpec { half_width: 2.0, points: 41 }),
        solver: SolverSpec { n_paths: 4_096, ..base_solver() },
        mollify_levels: vec![4, 8, 16, 32],
        projection_levels: vec![],
        expected_terminal_mean: None,
        expected_y0: None,
        comparison_shift: default_comparison_shift(),
        bounding_c_v: 2.0,
        master_seed: 808,
    }
}

/// Built-in scenarios, in a fixed order.
pub fn registry() -> Vec<Scenario> {
    vec![
        scenario_zero(),
        scenario_constant_drift(),
        scenario_geometric_jump(),
        scenario_linear_bsde(),
        scenario_two_control_1d(),
        scenario_heat_reduction(),
        scenario_jump_transport(),
        scenario_lipschitz_kink(),
    ]
}

pub fn builtin(name: &str) -> Option<Scenario> {
    registry().into_iter().find(|s| s.name == name)
}

/// Hash over the canonical JSON of every builtin, in registry order.
pub fn registry_hash() -> String {
    let mut hasher = Sha256::new();
    for scenario in registry() {
        hasher.update(scenario.canonical_json().as_bytes());
    }
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{:02x}", b));
    }
    out
}
