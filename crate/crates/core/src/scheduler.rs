//! Outer loop over the penalization strength: shrink `eps` geometrically,
//! warm-starting each minimization from the previous positivity set, until
//! the positivity volume settles on the budget.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::diagnostics::{default_fit_radii, estimate_q, extract_free_boundary};
use crate::error::{Error, Result};
use crate::penalty::{minimize_iterative, positivity_volume, Configuration, DesignProblem, InitStrategy, MinimizeOptions};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpsSchedule {
    pub eps0: f64,
    pub ratio: f64,
    pub max_steps: usize,
    /// Acceptable `|volume - omega|`.
    pub vol_tol: f64,
}

impl EpsSchedule {
    pub fn validate(&self, problem: &DesignProblem) -> Result<()> {
        if !(self.eps0 > 0.0 && self.eps0.is_finite()) {
            return Err(Error::Config { field: "schedule.eps0".into(), reason: "must be positive".into() });
        }
        if !(self.ratio > 0.0 && self.ratio < 1.0) {
            return Err(Error::Config { field: "schedule.ratio".into(), reason: "must lie in (0, 1)".into() });
        }
        if self.max_steps == 0 {
            return Err(Error::Config { field: "schedule.max_steps".into(), reason: "must be at least 1".into() });
        }
        let cell = problem.grid.cell_measure();
        if self.vol_tol < cell * (1.0 - 1e-12) {
            return Err(Error::Config {
                field: "schedule.vol_tol".into(),
                reason: format!("must be at least one trace cell ({cell})"),
            });
        }
        Ok(())
    }

    pub fn eps_values(&self) -> Vec<f64> {
        (0..self.max_steps).map(|k| self.eps0 * self.ratio.powi(k as i32)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub eps: f64,
    pub energy: f64,
    pub volume: f64,
    /// Median blow-up coefficient over the free boundary, when it could be fitted.
    pub lambda_est: Option<f64>,
    pub fb_points: usize,
    pub outer_iterations: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    /// Ordered by decreasing `eps`.
    pub entries: Vec<SweepEntry>,
    pub attained: bool,
    pub terminal: Option<usize>,
    /// Volume change after one further `eps` step beyond the terminal one.
    pub stability_volume_change: Option<f64>,
}

impl SweepRecord {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("eps,volume,energy,lambda_est,fb_points\n");
        for e in &self.entries {
            let lambda = e.lambda_est.map(|l| format!("{l:.17e}")).unwrap_or_default();
            out.push_str(&format!("{:.17e},{:.17e},{:.17e},{},{}\n", e.eps, e.volume, e.energy, lambda, e.fb_points));
        }
        out
    }
}

/// Median of `estimate_q` over the free-boundary points.
pub fn lambda_estimate(c: &Configuration) -> Option<f64> {
    let fb = extract_free_boundary(c);
    let radii = default_fit_radii(c.grid().spacing());
    let mut qs: Vec<f64> = fb.points.iter().filter_map(|p| estimate_q(c, p.position, &radii).ok()).map(|e| e.q).collect();
    if qs.is_empty() {
        return None;
    }
    qs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = qs.len();
    Some(if n % 2 == 1 { qs[n / 2] } else { 0.5 * (qs[n / 2 - 1] + qs[n / 2]) })
}

fn run_one(
    problem: &Arc<DesignProblem>,
    eps: f64,
    warm: Option<&Configuration>,
    opts: &MinimizeOptions,
) -> Result<(Configuration, SweepEntry)> {
    let params = problem.params(eps)?;
    let mut o = opts.clone();
    if let Some(prev) = warm {
        o.init = InitStrategy::FromMask { mask: prev.positivity.clone() };
    }
    let report = minimize_iterative(problem, &params, &o)?;
    let c = report.configuration;
    let entry = SweepEntry {
        eps,
        energy: report.energy,
        volume: positivity_volume(&c),
        lambda_est: lambda_estimate(&c),
        fb_points: extract_free_boundary(&c).len(),
        outer_iterations: report.outer_iterations,
    };
    Ok((c, entry))
}

fn sweep_failure(eps: f64, entries: &[SweepEntry], source: Error) -> Error {
    Error::Sweep { eps, completed: entries.len(), partial: entries.to_vec(), source: Box::new(source) }
}

/// Minimize at `eps0, eps0 ratio, ...` until `|volume - omega| <= vol_tol`.
///
/// On success the terminal configuration is returned and one more step is
/// solved to record how much the volume still moves. If the budget is never
/// met, the entry closest to it is returned with `attained = false`.
pub fn solve_constrained(
    problem: &Arc<DesignProblem>,
    sched: &EpsSchedule,
    opts: &MinimizeOptions,
) -> Result<(Configuration, SweepRecord)> {
    sched.validate(problem)?;
    let mut record = SweepRecord::default();
    let mut warm: Option<Configuration> = None;
    let mut best: Option<(f64, Configuration, usize)> = None;
    for eps in sched.eps_values() {
        let (c, entry) = run_one(problem, eps, warm.as_ref(), opts).map_err(|e| sweep_failure(eps, &record.entries, e))?;
        let miss = (entry.volume - problem.omega).abs();
        record.entries.push(entry);
        let idx = record.entries.len() - 1;
        if best.as_ref().map_or(true, |(m, _, _)| miss < *m) {
            best = Some((miss, c.clone(), idx));
        }
        if miss <= sched.vol_tol {
            record.attained = true;
            record.terminal = Some(idx);
            let (_, next) = run_one(problem, eps * sched.ratio, Some(&c), opts)
                .map_err(|e| sweep_failure(eps * sched.ratio, &record.entries, e))?;
            record.stability_volume_change = Some(next.volume - entry.volume);
            return Ok((c, record));
        }
        warm = Some(c);
    }
    let (_, c, idx) = best.ok_or_else(|| Error::InsufficientData("empty schedule".into()))?;
    record.terminal = Some(idx);
    Ok((c, record))
}

/// Minimize at each listed `eps` (sorted into decreasing order) with warm starts.
pub fn sweep_eps(problem: &Arc<DesignProblem>, eps_values: &[f64], opts: &MinimizeOptions) -> Result<(Vec<Configuration>, SweepRecord)> {
    let mut eps: Vec<f64> = eps_values.to_vec();
    if eps.iter().any(|e| !(*e > 0.0)) {
        return Err(Error::param("eps", "values must be positive"));
    }
    eps.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let mut record = SweepRecord::default();
    let mut configs: Vec<Configuration> = Vec::new();
    for e in eps {
        let (c, entry) = run_one(problem, e, configs.last(), opts).map_err(|err| sweep_failure(e, &record.entries, err))?;
        record.entries.push(entry);
        configs.push(c);
    }
    Ok((configs, record))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LambdaBounds {
    pub min: f64,
    pub max: f64,
    pub spread_ratio: f64,
    pub bound: f64,
    pub count: usize,
    pub pass: bool,
}

/// Range of the `lambda` estimates along a sweep and whether `max/min <= bound`.
pub fn lambda_sweep(record: &SweepRecord, bound: f64) -> Result<LambdaBounds> {
    let values: Vec<f64> = record.entries.iter().filter_map(|e| e.lambda_est).filter(|l| *l > 0.0 && l.is_finite()).collect();
    if values.len() < 4 {
        return Err(Error::InsufficientData(format!("{} lambda estimates, need 4", values.len())));
    }
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = values.iter().cloned().fold(0.0, f64::max);
    let spread_ratio = max / min;
    Ok(LambdaBounds { min, max, spread_ratio, bound, count: values.len(), pass: spread_ratio <= bound })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeEnvelope {
    /// Fitted constant in `volume - omega <= C eps`.
    pub constant: f64,
    /// `volume - omega - C eps` per entry.
    pub residuals: Vec<f64>,
    pub max_residual: f64,
    pub min_volume: f64,
    pub pass: bool,
}

/// Least-squares fit of the volume excess `max(volume - omega, 0)` by `C eps`
/// through the origin; passes when no entry exceeds the envelope by more than
/// `cell` and every volume is positive.
pub fn fit_volume_envelope(record: &SweepRecord, omega: f64, cell: f64) -> Result<VolumeEnvelope> {
    if record.entries.is_empty() {
        return Err(Error::InsufficientData("empty sweep".into()));
    }
    let num: f64 = record.entries.iter().map(|e| e.eps * (e.volume - omega).max(0.0)).sum();
    let den: f64 = record.entries.iter().map(|e| e.eps * e.eps).sum();
    let constant = num / den;
    let residuals: Vec<f64> = record.entries.iter().map(|e| e.volume - omega - constant * e.eps).collect();
    let max_residual = residuals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min_volume = record.entries.iter().map(|e| e.volume).fold(f64::INFINITY, f64::min);
    Ok(VolumeEnvelope {
        constant,
        pass: max_residual <= cell * (1.0 + 1e-9) && min_volume > 0.0,
        residuals,
        max_residual,
        min_volume,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(lambdas: &[f64]) -> SweepRecord {
        SweepRecord {
            entries: lambdas
                .iter()
                .enumerate()
                .map(|(k, &l)| SweepEntry {
                    eps: 0.5f64.powi(k as i32),
                    energy: 1.0,
                    volume: 0.5,
                    lambda_est: Some(l),
                    fb_points: 2,
                    outer_iterations: 0,
                })
                .collect(),
            ..Default::default()
        }
    }

    #[test]
    fn constant_lambda_has_unit_spread() {
        let b = lambda_sweep(&record(&[1.3; 5]), 3.0).unwrap();
        assert_eq!(b.spread_ratio, 1.0);
        assert!(b.pass);
    }

    #[test]
    fn doubling_lambda_fails() {
        let b = lambda_sweep(&record(&[1.0, 2.0, 4.0, 8.0]), 3.0).unwrap();
        assert!(!b.pass);
        assert!(lambda_sweep(&record(&[1.0, 2.0, 4.0]), 3.0).is_err());
    }

    #[test]
    fn envelope_of_exact_linear_excess() {
        let mut r = record(&[1.0; 4]);
        for e in &mut r.entries {
            e.volume = 0.5 + 0.3 * e.eps;
        }
        let env = fit_volume_envelope(&r, 0.5, 0.01).unwrap();
        assert!((env.constant - 0.3).abs() < 1e-12);
        assert!(env.max_residual.abs() < 1e-12);
        assert!(env.pass);
    }
}
