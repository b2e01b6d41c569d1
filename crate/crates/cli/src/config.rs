//! Experiment configuration: one JSON document with `problem`, `schedule`,
//! `solver`, `diagnostics`, `output` and `seed` blocks.
//!
//! Values are resolved as command-line override, then config file, then the
//! defaults below.

use std::path::Path;
use std::sync::Arc;

use fracdesign::diagnostics::Thresholds;
use fracdesign::extension::TopBc;
use fracdesign::field::TraceField;
use fracdesign::grid::{build_extension_grid, ExtensionGrid};
use fracdesign::penalty::{DesignProblem, InitStrategy, MinimizeOptions};
use fracdesign::scheduler::EpsSchedule;
use fracdesign::{Error, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub problem: ProblemConfig,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub diagnostics: DiagnosticsConfig,
    #[serde(default)]
    pub output: OutputConfig,
    /// Seed for every randomized probe.
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemConfig {
    /// Trace dimension, 1 or 2.
    pub n: usize,
    /// Trace window `[-L, L]^n`.
    pub half_width: f64,
    /// Extension height `Y`.
    pub height: f64,
    pub nx: usize,
    pub ny: usize,
    pub alpha: f64,
    #[serde(default = "default_grading")]
    pub grading: f64,
    pub omega: f64,
    #[serde(default = "default_top")]
    pub top_bc: TopBc,
    pub fixed_region: Geometry,
    pub phi: PhiSpec,
}

fn default_grading() -> f64 {
    2.0
}

fn default_top() -> TopBc {
    TopBc::Zero
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Geometry {
    /// `[a, b]` on a 1D trace.
    Interval { a: f64, b: f64 },
    /// Union of two disjoint intervals on a 1D trace.
    TwoIntervals { first: [f64; 2], second: [f64; 2] },
    /// Closed disc on a 2D trace.
    Disc { center: [f64; 2], radius: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PhiSpec {
    Constant { value: f64 },
    /// `height (1 - |x - center|^2 / width^2)_+^2`.
    Bump { height: f64, center: [f64; 2], width: f64 },
    /// `offset + amplitude cos(k x1) [cos(k x2)]`.
    Cosine { offset: f64, amplitude: f64, wavenumber: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub eps0: f64,
    pub ratio: f64,
    pub max_steps: usize,
    /// Acceptable `|volume - omega|` in trace cells.
    pub vol_tol: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig { eps0: 1.0, ratio: 0.5, max_steps: 12, vol_tol: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub tol: f64,
    pub max_outer: usize,
    /// Positivity threshold; ten times `tol` when absent.
    pub theta_pos: Option<f64>,
    pub init: InitStrategy,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig { tol: 1e-10, max_outer: 2000, theta_pos: None, init: InitStrategy::Dilation }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HadamardConfig {
    /// Each trace cell is split into this many for the probe.
    pub refine: usize,
    /// Removed volumes, in cells of the refined grid.
    pub volumes_cells: Vec<f64>,
    pub radius: Option<f64>,
}

impl Default for HadamardConfig {
    fn default() -> Self {
        HadamardConfig { refine: 1, volumes_cells: vec![1.5, 2.5, 4.0, 6.0, 9.0, 14.0], radius: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub count: usize,
    pub radius_cells: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig { count: 0, radius_cells: 3.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagnosticsConfig {
    pub enabled: bool,
    pub growth_radii: Option<Vec<f64>>,
    pub q_radii: Option<Vec<f64>>,
    pub density_radii: Option<Vec<f64>>,
    pub morrey_radii: Option<Vec<f64>>,
    pub hadamard: Option<HadamardConfig>,
    /// Extra sweep for the lambda bounds; skipped when empty.
    pub lambda_eps: Vec<f64>,
    pub lambda_bound: f64,
    pub probe: ProbeConfig,
    pub thresholds: Thresholds,
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        DiagnosticsConfig {
            enabled: true,
            growth_radii: None,
            q_radii: None,
            density_radii: None,
            morrey_radii: None,
            hadamard: None,
            lambda_eps: Vec::new(),
            lambda_bound: 3.0,
            probe: ProbeConfig::default(),
            thresholds: Thresholds::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: String,
    pub write_extension: bool,
    pub trace_csv: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig { dir: "out".into(), write_extension: true, trace_csv: true }
    }
}

fn config_err(field: &str, reason: impl Into<String>) -> Error {
    Error::Config { field: field.into(), reason: reason.into() }
}

fn positive(field: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(config_err(field, format!("must be positive and finite, got {v}")))
    }
}

fn radii(field: &str, r: &Option<Vec<f64>>) -> Result<()> {
    if let Some(r) = r {
        if r.is_empty() {
            return Err(config_err(field, "must not be empty"));
        }
        for v in r {
            positive(field, *v)?;
        }
    }
    Ok(())
}

/// Set `path` (dot-separated) in a JSON document, creating objects on the way.
/// The value is parsed as JSON when possible and kept as a string otherwise.
pub fn set_path(doc: &mut Value, path: &str, raw: &str) -> Result<()> {
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut cur = doc;
    let parts: Vec<&str> = path.split('.').collect();
    for (k, part) in parts.iter().enumerate() {
        if part.is_empty() {
            return Err(config_err(path, "empty path component"));
        }
        if !cur.is_object() {
            return Err(config_err(path, format!("`{}` is not an object", parts[..k].join("."))));
        }
        let map = cur.as_object_mut().unwrap();
        if k + 1 == parts.len() {
            map.insert(part.to_string(), value);
            return Ok(());
        }
        cur = map.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("split yields at least one component")
}

impl ExperimentConfig {
    pub fn from_value(doc: Value) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_value(doc).map_err(|e| config_err("config", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Read a config file and apply `key=value` overrides before validation.
    pub fn load(path: &Path, overrides: &[(String, String)]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| config_err("config", format!("{}: {e}", path.display())))?;
        let mut doc: Value = serde_json::from_str(&text).map_err(|e| config_err("config", e.to_string()))?;
        for (k, v) in overrides {
            set_path(&mut doc, k, v)?;
        }
        Self::from_value(doc)
    }

    pub fn validate(&self) -> Result<()> {
        let p = &self.problem;
        if !(p.n == 1 || p.n == 2) {
            return Err(config_err("problem.n", format!("trace dimension must be 1 or 2, got {}", p.n)));
        }
        positive("problem.half_width", p.half_width)?;
        positive("problem.height", p.height)?;
        if p.nx < 8 {
            return Err(config_err("problem.nx", format!("at least 8 nodes required, got {}", p.nx)));
        }
        if p.ny < 8 {
            return Err(config_err("problem.ny", format!("at least 8 nodes required, got {}", p.ny)));
        }
        if !(p.alpha > 0.0 && p.alpha < 1.0) {
            return Err(config_err("problem.alpha", format!("must lie in (0, 1), got {}", p.alpha)));
        }
        if !(p.grading >= 1.0 && p.grading.is_finite()) {
            return Err(config_err("problem.grading", format!("must be >= 1, got {}", p.grading)));
        }
        positive("problem.omega", p.omega)?;
        let inside = |x: f64| x.abs() < p.half_width;
        match (&p.fixed_region, p.n) {
            (Geometry::Interval { a, b }, 1) => {
                if !(a < b && inside(*a) && inside(*b)) {
                    return Err(config_err("problem.fixed_region", "need -L < a < b < L"));
                }
            }
            (Geometry::TwoIntervals { first, second }, 1) => {
                if !(first[0] < first[1] && first[1] < second[0] && second[0] < second[1]) {
                    return Err(config_err("problem.fixed_region", "intervals must be ordered and disjoint"));
                }
                if !(inside(first[0]) && inside(second[1])) {
                    return Err(config_err("problem.fixed_region", "intervals must lie inside (-L, L)"));
                }
            }
            (Geometry::Disc { center, radius }, 2) => {
                positive("problem.fixed_region.radius", *radius)?;
                if !(center[0].abs() + radius < p.half_width && center[1].abs() + radius < p.half_width) {
                    return Err(config_err("problem.fixed_region", "disc must lie inside the trace window"));
                }
            }
            (_, n) => {
                return Err(config_err("problem.fixed_region.kind", format!("geometry does not fit a {n}-dimensional trace")));
            }
        }
        match &p.phi {
            PhiSpec::Constant { value } => {
                if !(*value >= 0.0 && value.is_finite()) {
                    return Err(config_err("problem.phi.value", "must be nonnegative"));
                }
            }
            PhiSpec::Bump { height, center, width } => {
                if !(*height >= 0.0 && height.is_finite()) {
                    return Err(config_err("problem.phi.height", "must be nonnegative"));
                }
                if !center.iter().all(|c| c.is_finite()) {
                    return Err(config_err("problem.phi.center", "must be finite"));
                }
                positive("problem.phi.width", *width)?;
            }
            PhiSpec::Cosine { offset, amplitude, wavenumber } => {
                if !(offset.is_finite() && amplitude.is_finite() && wavenumber.is_finite()) {
                    return Err(config_err("problem.phi", "cosine parameters must be finite"));
                }
                if offset - amplitude.abs() < 0.0 {
                    return Err(config_err("problem.phi.offset", "offset - |amplitude| must be nonnegative"));
                }
            }
        }

        let s = &self.schedule;
        positive("schedule.eps0", s.eps0)?;
        if !(s.ratio > 0.0 && s.ratio < 1.0) {
            return Err(config_err("schedule.ratio", format!("must lie in (0, 1), got {}", s.ratio)));
        }
        if s.max_steps == 0 {
            return Err(config_err("schedule.max_steps", "must be at least 1"));
        }
        if !(s.vol_tol >= 1.0 && s.vol_tol.is_finite()) {
            return Err(config_err("schedule.vol_tol", format!("must be at least one cell, got {}", s.vol_tol)));
        }

        let v = &self.solver;
        if !(v.tol > 0.0 && v.tol < 1e-3) {
            return Err(config_err("solver.tol", format!("must lie in (0, 1e-3), got {}", v.tol)));
        }
        if v.max_outer == 0 {
            return Err(config_err("solver.max_outer", "must be at least 1"));
        }
        if let Some(t) = v.theta_pos {
            if !(t >= v.tol && t <= 1e-2) {
                return Err(config_err("solver.theta_pos", format!("must lie in [solver.tol, 1e-2], got {t}")));
            }
        }

        let d = &self.diagnostics;
        radii("diagnostics.growth_radii", &d.growth_radii)?;
        radii("diagnostics.q_radii", &d.q_radii)?;
        radii("diagnostics.density_radii", &d.density_radii)?;
        radii("diagnostics.morrey_radii", &d.morrey_radii)?;
        if let Some(h) = &d.hadamard {
            if h.refine == 0 {
                return Err(config_err("diagnostics.hadamard.refine", "must be at least 1"));
            }
            radii("diagnostics.hadamard.volumes_cells", &Some(h.volumes_cells.clone()))?;
            if let Some(r) = h.radius {
                positive("diagnostics.hadamard.radius", r)?;
            }
        }
        for e in &d.lambda_eps {
            positive("diagnostics.lambda_eps", *e)?;
        }
        if !(d.lambda_bound >= 1.0) {
            return Err(config_err("diagnostics.lambda_bound", "must be at least 1"));
        }
        positive("diagnostics.probe.radius_cells", d.probe.radius_cells)?;
        let t = &d.thresholds;
        for (name, value) in [
            ("diagnostics.thresholds.growth_tolerance", t.growth_tolerance),
            ("diagnostics.thresholds.nondegeneracy_min", t.nondegeneracy_min),
            ("diagnostics.thresholds.density_min", t.density_min),
            ("diagnostics.thresholds.morrey_step", t.morrey_step),
            ("diagnostics.thresholds.q_spread", t.q_spread),
            ("diagnostics.thresholds.hadamard_tolerance", t.hadamard_tolerance),
            ("diagnostics.thresholds.pair_ratio", t.pair_ratio),
        ] {
            positive(name, value)?;
        }
        if self.output.dir.is_empty() {
            return Err(config_err("output.dir", "must not be empty"));
        }
        Ok(())
    }

    pub fn grid(&self) -> Result<Arc<ExtensionGrid>> {
        self.grid_with_nx(self.problem.nx)
    }

    pub fn grid_with_nx(&self, nx: usize) -> Result<Arc<ExtensionGrid>> {
        let p = &self.problem;
        build_extension_grid(p.n, p.half_width, p.height, nx, p.ny, p.alpha, p.grading)
            .map(Arc::new)
            .map_err(prefix_problem)
    }

    /// The design problem on `grid`, which must share this config's geometry.
    pub fn problem_on(&self, grid: Arc<ExtensionGrid>) -> Result<Arc<DesignProblem>> {
        let p = &self.problem;
        let tl = grid.trace_len();
        let fixed: Vec<bool> = (0..tl).map(|t| p.fixed_region.contains(grid.trace_point(t))).collect();
        let phi = TraceField::from_fn(grid.clone(), |x1, x2| p.phi.eval([x1, x2], p.n));
        if !fixed.iter().any(|&f| f) {
            return Err(config_err("problem.fixed_region", "contains no trace node"));
        }
        let mut problem = DesignProblem::new(grid, p.top_bc, fixed, phi, p.omega, self.solver.tol).map_err(prefix_problem)?;
        if let Some(t) = self.solver.theta_pos {
            problem = problem.with_theta_pos(t).map_err(|e| rename(e, "solver."))?;
        }
        Ok(Arc::new(problem))
    }

    pub fn build_problem(&self) -> Result<Arc<DesignProblem>> {
        self.problem_on(self.grid()?)
    }

    pub fn eps_schedule(&self, problem: &DesignProblem) -> EpsSchedule {
        let s = &self.schedule;
        EpsSchedule {
            eps0: s.eps0,
            ratio: s.ratio,
            max_steps: s.max_steps,
            vol_tol: s.vol_tol * problem.grid.cell_measure(),
        }
    }

    pub fn minimize_options(&self) -> MinimizeOptions {
        MinimizeOptions { max_outer: self.solver.max_outer, init: self.solver.init.clone() }
    }
}

fn rename(e: Error, prefix: &str) -> Error {
    match e {
        Error::InvalidParameter { field, reason } => Error::Config { field: format!("{prefix}{field}"), reason },
        other => other,
    }
}

fn prefix_problem(e: Error) -> Error {
    match e {
        Error::InvalidParameter { ref field, .. } if field == "tol" || field == "theta_pos" => rename(e, "solver."),
        Error::InvalidParameter { .. } => rename(e, "problem."),
        other => other,
    }
}

impl Geometry {
    pub fn contains(&self, x: [f64; 2]) -> bool {
        const SLACK: f64 = 1e-12;
        match *self {
            Geometry::Interval { a, b } => x[0] >= a - SLACK && x[0] <= b + SLACK,
            Geometry::TwoIntervals { first, second } => {
                (x[0] >= first[0] - SLACK && x[0] <= first[1] + SLACK) || (x[0] >= second[0] - SLACK && x[0] <= second[1] + SLACK)
            }
            Geometry::Disc { center, radius } => {
                (x[0] - center[0]).powi(2) + (x[1] - center[1]).powi(2) <= radius * radius * (1.0 + SLACK)
            }
        }
    }
}

impl PhiSpec {
    pub fn eval(&self, x: [f64; 2], n: usize) -> f64 {
        match *self {
            PhiSpec::Constant { value } => value,
            PhiSpec::Bump { height, center, width } => {
                let mut r2 = (x[0] - center[0]).powi(2);
                if n == 2 {
                    r2 += (x[1] - center[1]).powi(2);
                }
                height * (1.0 - r2 / (width * width)).max(0.0).powi(2)
            }
            PhiSpec::Cosine { offset, amplitude, wavenumber } => {
                let mut c = (wavenumber * x[0]).cos();
                if n == 2 {
                    c *= (wavenumber * x[1]).cos();
                }
                offset + amplitude * c
            }
        }
    }
}

/// The parts of a config that `diagnose` reads; everything else is ignored.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DiagnoseSettings {
    #[serde(default)]
    pub diagnostics: DiagnosticsConfig,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub output: OutputConfig,
    #[serde(default)]
    pub seed: u64,
}

impl DiagnoseSettings {
    /// Pick the relevant blocks from an optional config file, then apply overrides.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut doc = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| config_err("config", format!("{}: {e}", p.display())))?;
                serde_json::from_str(&text).map_err(|e| config_err("config", e.to_string()))?
            }
            None => Value::Object(Default::default()),
        };
        for (k, v) in overrides {
            set_path(&mut doc, k, v)?;
        }
        let mut picked = serde_json::Map::new();
        if let Value::Object(m) = doc {
            for key in ["diagnostics", "schedule", "output", "seed"] {
                if let Some(v) = m.get(key) {
                    picked.insert(key.to_string(), v.clone());
                }
            }
        }
        let s: DiagnoseSettings = serde_json::from_value(Value::Object(picked)).map_err(|e| config_err("config", e.to_string()))?;
        positive("schedule.eps0", s.schedule.eps0)?;
        if s.output.dir.is_empty() {
            return Err(config_err("output.dir", "must not be empty"));
        }
        Ok(s)
    }
}
