//! Experiment drivers behind the subcommands. Each writes its artifacts into
//! the configured output directory and returns the flat report it wrote.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use fracdesign::diagnostics::{
    diagnose, extract_free_boundary, hadamard_check, DiagnosticsOptions, HadamardOptions, HadamardReport,
};
use fracdesign::field::TraceField;
use fracdesign::grid::ExtensionGrid;
use fracdesign::penalty::{
    energy_i_eps, f_eps, minimize_bruteforce_1d, perturb_configuration, positivity_volume, set_energy, Bump,
    Configuration, DesignProblem, PenaltyParams, PerturbationSpec,
};
use fracdesign::scheduler::{fit_volume_envelope, lambda_sweep, solve_constrained, sweep_eps, SweepRecord};
use fracdesign::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::Value;

use crate::artifact::{trace_csv, FieldArtifact, FieldKind};
use crate::config::{DiagnoseSettings, DiagnosticsConfig, ExperimentConfig, HadamardConfig};
use crate::operators::{validate_operators, OperatorReport};

/// Process exit status for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e.root() {
        Error::Config { .. } | Error::InvalidParameter { .. } => 2,
        Error::NonConvergence { .. } | Error::MaskNotStationary { .. } => 3,
        Error::Schema { .. } => 4,
        _ => 1,
    }
}

/// Flat key-value report with dotted keys in sorted order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Report(pub BTreeMap<String, Value>);

fn flatten(prefix: &str, v: Value, out: &mut BTreeMap<String, Value>) {
    match v {
        Value::Object(m) => {
            for (k, x) in m {
                flatten(&format!("{prefix}.{k}"), x, out);
            }
        }
        Value::Array(items) if items.iter().any(|x| x.is_object() || x.is_array()) => {
            for (k, x) in items.into_iter().enumerate() {
                flatten(&format!("{prefix}.{k}"), x, out);
            }
        }
        other => {
            out.insert(prefix.to_string(), other);
        }
    }
}

impl Report {
    pub fn set(&mut self, key: &str, value: impl Serialize) {
        let v = serde_json::to_value(value).expect("report values serialize");
        flatten(key, v, &mut self.0);
    }

    pub fn get(&self, key: &str) -> Option<&Value> {
        self.0.get(key)
    }

    pub fn f64(&self, key: &str) -> Option<f64> {
        self.get(key).and_then(Value::as_f64)
    }

    pub fn bool(&self, key: &str) -> Option<bool> {
        self.get(key).and_then(Value::as_bool)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(&self.0).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::write(dir.join("report.json"), self.to_json())?;
        Ok(())
    }

    fn with_config(command: &str, cfg: &ExperimentConfig) -> Self {
        let mut r = Report::default();
        r.set("command", command);
        r.set("seed", cfg.seed);
        // The output block is left out so that reports do not depend on where they are written.
        r.set("config.problem", &cfg.problem);
        r.set("config.schedule", &cfg.schedule);
        r.set("config.solver", &cfg.solver);
        r.set("config.diagnostics", &cfg.diagnostics);
        r
    }
}

fn output_dir(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let dir = PathBuf::from(&cfg.output.dir);
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn write_configuration(dir: &Path, cfg: &ExperimentConfig, c: &Configuration, eps: f64) -> Result<()> {
    FieldArtifact::from_configuration(c, FieldKind::Trace, Some(eps)).write(&dir.join("trace.fdf"))?;
    if cfg.output.write_extension {
        FieldArtifact::from_configuration(c, FieldKind::Extension, Some(eps)).write(&dir.join("extension.fdf"))?;
    }
    if cfg.output.trace_csv {
        std::fs::write(dir.join("trace.csv"), trace_csv(&c.trace))?;
    }
    Ok(())
}

/// Write whatever a failed sweep left behind and flag the report as partial.
fn write_partial(dir: &Path, report: &mut Report, err: &Error) -> Result<()> {
    report.set("status", status_name(err));
    report.set("partial", true);
    report.set("error", err.to_string());
    if let Error::Sweep { eps, completed, partial, .. } = err {
        let record = SweepRecord { entries: partial.clone(), ..Default::default() };
        std::fs::write(dir.join("sweep.csv"), record.to_csv())?;
        report.set("sweep.failed_eps", eps);
        report.set("sweep.completed", completed);
    }
    report.write(dir)
}

fn status_name(err: &Error) -> &'static str {
    match exit_code(err) {
        2 => "config_error",
        3 => "non_convergence",
        4 => "schema_error",
        _ => "error",
    }
}

fn record_sweep(report: &mut Report, record: &SweepRecord, problem: &DesignProblem) {
    report.set("sweep.attained", record.attained);
    report.set("sweep.steps", record.entries.len());
    if let Some(k) = record.terminal {
        let e = &record.entries[k];
        report.set("sweep.terminal.eps", e.eps);
        report.set("sweep.terminal.volume", e.volume);
        report.set("sweep.terminal.energy", e.energy);
        report.set("sweep.terminal.fb_points", e.fb_points);
        report.set("sweep.terminal.volume_error", e.volume - problem.omega);
    }
    report.set("sweep.stability_volume_change", record.stability_volume_change);
    let cell = problem.grid.cell_measure();
    report.set("sweep.cell_measure", cell);
    match fit_volume_envelope(record, problem.omega, cell) {
        Ok(env) => {
            report.set("sweep.envelope", &env);
            report.set("pass.envelope", env.pass);
        }
        Err(e) => report.set("sweep.envelope.error", e.to_string()),
    }
}

/// Nearest node of `grid` to the trace point `x`.
fn nearest_node(grid: &ExtensionGrid, x: [f64; 2]) -> usize {
    let h = grid.spacing();
    let last = (grid.nx() - 1) as f64;
    let idx = |v: f64| ((v + grid.half_width()) / h).round().clamp(0.0, last) as usize;
    let i2 = if grid.trace_dim() == 2 { idx(x[1]) } else { 0 };
    grid.trace_flat([idx(x[0]), i2])
}

/// The configuration solved exactly on a grid with `refine` times more cells
/// per axis. Fixed region, datum and positivity set are carried over by coarse
/// cell membership, so volumes are preserved.
pub fn refine_configuration(c: &Configuration, refine: usize) -> Result<Configuration> {
    if refine == 1 {
        return Ok(c.clone());
    }
    let coarse = c.grid();
    let mut spec = coarse.spec();
    spec.nx = (coarse.nx() - 1) * refine + 1;
    let fine_grid = Arc::new(spec.build()?);
    let parent: Vec<usize> = (0..fine_grid.trace_len()).map(|t| nearest_node(coarse, fine_grid.trace_point(t))).collect();
    let src = &c.problem;
    let fixed: Vec<bool> = parent.iter().map(|&t| src.fixed_region[t]).collect();
    let phi = TraceField::new(fine_grid.clone(), parent.iter().map(|&t| src.phi.values[t]).collect())?;
    let fine = DesignProblem::new(fine_grid, src.top, fixed, phi, src.omega, src.tol)?.with_theta_pos(src.theta_pos())?;
    let mask: Vec<bool> = parent.iter().map(|&t| c.positivity[t]).collect();
    let (_, u) = set_energy(&fine, &mask)?;
    Configuration::from_trace(Arc::new(fine), u)
}

pub fn refined_hadamard(d: &DiagnosticsConfig, c: &Configuration, eps: f64, hc: &HadamardConfig) -> Result<HadamardReport> {
    let fine = refine_configuration(c, hc.refine)?;
    let g = fine.grid();
    let cell = g.spacing().powi(g.trace_dim() as i32);
    let volumes: Vec<f64> = hc.volumes_cells.iter().map(|v| v * cell).collect();
    let th = &d.thresholds;
    let opts = HadamardOptions { radius: hc.radius, tolerance: th.hadamard_tolerance, pair_ratio: th.pair_ratio };
    hadamard_check(&fine, &fine.problem.params(eps)?, &volumes, &opts)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProbeReport {
    pub seed: u64,
    pub radius: f64,
    pub evaluated: usize,
    pub skipped: usize,
    /// Penalized-energy change of each evaluated perturbation.
    pub changes: Vec<f64>,
    pub min_change: f64,
    pub pass: bool,
}

/// Random single-bump perturbations at free-boundary points; a minimizer
/// should not be improved by any of them.
pub fn minimality_probe(c: &Configuration, p: &PenaltyParams, seed: u64, count: usize, radius_cells: f64) -> Result<ProbeReport> {
    let fb = extract_free_boundary(c);
    if fb.is_empty() {
        return Err(Error::InsufficientData("no free boundary to probe".into()));
    }
    let problem = &c.problem;
    let radius = radius_cells * c.grid().spacing();
    let (e0, _) = set_energy(problem, &c.positivity)?;
    let i0 = e0 + f_eps(positivity_volume(c), p);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut changes = Vec::new();
    let mut skipped = 0;
    for _ in 0..count {
        let pt = fb.points[rng.gen_range(0..fb.len())];
        let sign = if rng.gen::<bool>() { 1.0 } else { -1.0 };
        let amplitude = rng.gen_range(0.05..0.25);
        let spec = PerturbationSpec { bumps: vec![Bump { center: pt.position, normal: pt.normal, sign }], radius, amplitude };
        let moved = match perturb_configuration(c, &spec) {
            Ok(m) => m,
            Err(Error::InvalidParameter { .. }) => {
                skipped += 1;
                continue;
            }
            Err(e) => return Err(e),
        };
        let (e, _) = set_energy(problem, &moved.positivity)?;
        changes.push(e + f_eps(positivity_volume(&moved), p) - i0);
    }
    let min_change = changes.iter().cloned().fold(f64::INFINITY, f64::min);
    Ok(ProbeReport {
        seed,
        radius,
        evaluated: changes.len(),
        skipped,
        pass: changes.iter().all(|d| *d >= -1e-9 * i0.abs().max(1e-300)),
        changes,
        min_change,
    })
}

fn diagnostics_options(d: &DiagnosticsConfig) -> DiagnosticsOptions {
    DiagnosticsOptions {
        growth_radii: d.growth_radii.clone(),
        q_radii: d.q_radii.clone(),
        density_radii: d.density_radii.clone(),
        morrey_radii: d.morrey_radii.clone(),
        hadamard_volumes: None,
        hadamard_radius: None,
        thresholds: d.thresholds.clone(),
    }
}

/// Pointwise diagnostics, the refined Hadamard probe and the random probe.
/// Diagnostics that cannot run on this configuration are reported, not raised.
fn record_diagnostics(report: &mut Report, d: &DiagnosticsConfig, seed: u64, c: &Configuration, eps: f64) -> Result<()> {
    let p = c.problem.params(eps)?;
    report.set("diagnostics.eps", eps);
    match diagnose(c, &p, &diagnostics_options(d)) {
        Ok(mut rep) => {
            if let Some(hc) = &d.hadamard {
                match refined_hadamard(d, c, eps, hc) {
                    Ok(h) => {
                        rep.pass.hadamard = Some(h.pass_slope);
                        rep.pass.hadamard_pair = Some(h.pass_pair);
                        rep.hadamard = Some(h);
                    }
                    Err(e @ Error::InsufficientData(_)) => report.set("diagnostics.hadamard_error", e.to_string()),
                    Err(e) => return Err(e),
                }
                report.set("diagnostics.hadamard_refine", hc.refine);
            }
            report.set("pass", rep.pass);
            report.set("diagnostics", rep);
        }
        Err(e @ Error::InsufficientData(_)) => report.set("diagnostics.error", e.to_string()),
        Err(e) => return Err(e),
    }
    let probe = &d.probe;
    if probe.count > 0 {
        match minimality_probe(c, &p, seed, probe.count, probe.radius_cells) {
            Ok(r) => {
                report.set("pass.probe", r.pass);
                report.set("probe", r);
            }
            Err(e @ Error::InsufficientData(_)) => report.set("probe.error", e.to_string()),
            Err(e) => return Err(e),
        }
    }
    Ok(())
}

fn record_lambda_sweep(report: &mut Report, dir: &Path, cfg: &ExperimentConfig, problem: &Arc<DesignProblem>) -> Result<()> {
    let d = &cfg.diagnostics;
    if d.lambda_eps.is_empty() {
        return Ok(());
    }
    let (_, record) = sweep_eps(problem, &d.lambda_eps, &cfg.minimize_options())?;
    std::fs::write(dir.join("lambda_sweep.csv"), record.to_csv())?;
    match lambda_sweep(&record, d.lambda_bound) {
        Ok(b) => {
            report.set("pass.lambda_sweep", b.pass);
            report.set("lambda_sweep", b);
        }
        Err(e @ Error::InsufficientData(_)) => report.set("lambda_sweep.error", e.to_string()),
        Err(e) => return Err(e),
    }
    Ok(())
}

/// `solve`: the constrained eps loop, artifacts and diagnostics of the terminal configuration.
pub fn run_solve(cfg: &ExperimentConfig) -> Result<Report> {
    let dir = output_dir(cfg)?;
    let problem = cfg.build_problem()?;
    let sched = cfg.eps_schedule(&problem);
    sched.validate(&problem)?;
    let mut report = Report::with_config("solve", cfg);
    let (c, record) = match solve_constrained(&problem, &sched, &cfg.minimize_options()) {
        Ok(v) => v,
        Err(e) => {
            write_partial(&dir, &mut report, &e)?;
            return Err(e);
        }
    };
    std::fs::write(dir.join("sweep.csv"), record.to_csv())?;
    let eps = record.entries[record.terminal.expect("a finished sweep has a terminal entry")].eps;
    write_configuration(&dir, cfg, &c, eps)?;
    record_sweep(&mut report, &record, &problem);
    report.set("pass.volume_recovered", record.attained);
    if cfg.diagnostics.enabled {
        record_diagnostics(&mut report, &cfg.diagnostics, cfg.seed, &c, eps)?;
        if let Err(e) = record_lambda_sweep(&mut report, &dir, cfg, &problem) {
            write_partial(&dir, &mut report, &e)?;
            return Err(e);
        }
    }
    report.set("status", "ok");
    report.set("partial", false);
    report.write(&dir)?;
    Ok(report)
}

/// `sweep-eps`: minimize at every scheduled eps without stopping early.
pub fn run_sweep(cfg: &ExperimentConfig) -> Result<Report> {
    let dir = output_dir(cfg)?;
    let problem = cfg.build_problem()?;
    let sched = cfg.eps_schedule(&problem);
    sched.validate(&problem)?;
    let mut report = Report::with_config("sweep-eps", cfg);
    let (configs, record) = match sweep_eps(&problem, &sched.eps_values(), &cfg.minimize_options()) {
        Ok(v) => v,
        Err(e) => {
            write_partial(&dir, &mut report, &e)?;
            return Err(e);
        }
    };
    std::fs::write(dir.join("sweep.csv"), record.to_csv())?;
    let last = configs.last().expect("schedule has at least one step");
    let eps = record.entries.last().unwrap().eps;
    write_configuration(&dir, cfg, last, eps)?;
    let mut record = record;
    record.terminal = Some(record.entries.len() - 1);
    record_sweep(&mut report, &record, &problem);
    match lambda_sweep(&record, cfg.diagnostics.lambda_bound) {
        Ok(b) => {
            report.set("pass.lambda_sweep", b.pass);
            report.set("lambda_sweep", b);
        }
        Err(e) => report.set("lambda_sweep.error", e.to_string()),
    }
    report.set("status", "ok");
    report.set("partial", false);
    report.write(&dir)?;
    Ok(report)
}

/// `oracle-1d`: exhaustive minimization at `schedule.eps0`.
pub fn run_oracle_1d(cfg: &ExperimentConfig) -> Result<Report> {
    if cfg.problem.n != 1 {
        return Err(Error::Config { field: "problem.n".into(), reason: "the exhaustive oracle is one-dimensional".into() });
    }
    let dir = output_dir(cfg)?;
    let problem = cfg.build_problem()?;
    let eps = cfg.schedule.eps0;
    let p = problem.params(eps)?;
    let c = minimize_bruteforce_1d(&problem, &p)?;
    write_configuration(&dir, cfg, &c, eps)?;
    let mut report = Report::with_config("oracle-1d", cfg);
    report.set("oracle.eps", eps);
    report.set("oracle.energy", energy_i_eps(&c, &p));
    report.set("oracle.volume", positivity_volume(&c));
    let fb: Vec<f64> = extract_free_boundary(&c).points.iter().map(|pt| pt.position[0]).collect();
    report.set("oracle.free_boundary", fb);
    report.set("status", "ok");
    report.set("partial", false);
    report.write(&dir)?;
    Ok(report)
}

/// `diagnose`: full diagnostics of a stored configuration.
///
/// The penalization strength comes from the artifact, else from `schedule.eps0`.
pub fn run_diagnose(artifact: &Path, settings: &DiagnoseSettings) -> Result<Report> {
    let a = FieldArtifact::read(artifact)?;
    let (c, stored_eps) = a.to_configuration()?;
    let dir = PathBuf::from(&settings.output.dir);
    std::fs::create_dir_all(&dir)?;
    let eps = stored_eps.unwrap_or(settings.schedule.eps0);
    let mut report = Report::default();
    report.set("command", "diagnose");
    report.set("seed", settings.seed);
    report.set("config.diagnostics", &settings.diagnostics);
    report.set("artifact.kind", a.header.kind);
    report.set("artifact.grid", a.header.grid);
    report.set("volume", positivity_volume(&c));
    record_diagnostics(&mut report, &settings.diagnostics, settings.seed, &c, eps)?;
    report.set("status", "ok");
    report.set("partial", false);
    report.write(&dir)?;
    Ok(report)
}

/// `validate-operators`: the operator agreement suite on `nx` periodic nodes.
pub fn run_validate_operators(nx: usize, out: &Path) -> Result<(Report, OperatorReport)> {
    std::fs::create_dir_all(out)?;
    let ops = validate_operators(nx)?;
    let mut report = Report::default();
    report.set("command", "validate-operators");
    report.set("operators", &ops);
    report.set("status", "ok");
    report.write(out)?;
    Ok((report, ops))
}
