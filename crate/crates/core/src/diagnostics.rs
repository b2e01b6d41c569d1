//! Measurements on computed designs: free-boundary extraction, growth and
//! non-degeneracy fits, phase densities, Morrey sequences, blow-up
//! coefficients, the Hadamard energy expansion and the flux measure.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::extension::{fractional_laplacian_via_flux, weighted_dirichlet_energy, Region};
use crate::par;
use crate::penalty::{bump_profile, f_eps, perturb_configuration, positivity_volume, set_energy, Bump, Configuration, PenaltyParams, PerturbationSpec};

/// A point of the discrete free boundary: the midpoint of a trace edge
/// joining a positive node to a zero node, both outside the fixed region.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FreeBoundaryPoint {
    pub position: [f64; 2],
    /// Unit normal pointing into the positivity set. In 1D this is `[+-1, 0]`.
    pub normal: [f64; 2],
    pub inside: usize,
    pub outside: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FreeBoundarySet {
    pub points: Vec<FreeBoundaryPoint>,
}

impl FreeBoundarySet {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Distance from `x` to the nearest point.
    pub fn distance(&self, x: [f64; 2]) -> f64 {
        self.points.iter().map(|p| dist2(p.position, x)).fold(f64::INFINITY, f64::min)
    }

    fn locate(&self, x0: [f64; 2], h: f64) -> Result<&FreeBoundaryPoint> {
        self.points
            .iter()
            .find(|p| dist2(p.position, x0) <= 1e-9 * h)
            .ok_or_else(|| Error::param("x0", format!("{x0:?} is not a free-boundary point")))
    }
}

fn dist2(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Box average of the positivity mask over a 5x5 stencil (5 cells in 1D).
fn smoothed_mask(c: &Configuration) -> Vec<f64> {
    let g = c.grid();
    let nx = g.nx() as isize;
    let dim2 = g.trace_dim() == 2;
    par::map_range(g.trace_len(), |t| {
        let [i1, i2] = g.trace_indices(t);
        let mut sum = 0.0;
        let mut count = 0.0;
        let span2 = if dim2 { -2..=2 } else { 0..=0 };
        for d2 in span2 {
            for d1 in -2isize..=2 {
                let a = i1 as isize + d1;
                let b = i2 as isize + d2;
                if a < 0 || a >= nx || b < 0 || (dim2 && b >= nx) {
                    continue;
                }
                let s = g.trace_flat([a as usize, b as usize]);
                sum += if c.positivity[s] { 1.0 } else { 0.0 };
                count += 1.0;
            }
        }
        sum / count
    })
}

pub fn extract_free_boundary(c: &Configuration) -> FreeBoundarySet {
    let g = c.grid();
    let problem = &c.problem;
    let h = g.spacing();
    let nx = g.nx();
    let smooth = if g.trace_dim() == 2 { smoothed_mask(c) } else { Vec::new() };
    let grad = |t: usize| -> [f64; 2] {
        let [i1, i2] = g.trace_indices(t);
        let at = |a: usize, b: usize| smooth[g.trace_flat([a, b])];
        let d1 = (at((i1 + 1).min(nx - 1), i2) - at(i1.saturating_sub(1), i2)) / (2.0 * h);
        let d2 = (at(i1, (i2 + 1).min(nx - 1)) - at(i1, i2.saturating_sub(1))) / (2.0 * h);
        [d1, d2]
    };
    let mut points = Vec::new();
    for t in 0..g.trace_len() {
        let [i1, i2] = g.trace_indices(t);
        let mut right = vec![];
        if i1 + 1 < nx {
            right.push(g.trace_flat([i1 + 1, i2]));
        }
        if g.trace_dim() == 2 && i2 + 1 < nx {
            right.push(g.trace_flat([i1, i2 + 1]));
        }
        for s in right {
            if c.positivity[t] == c.positivity[s] {
                continue;
            }
            let (inside, outside) = if c.positivity[t] { (t, s) } else { (s, t) };
            if problem.fixed_region[inside] || problem.fixed_region[outside] || g.is_lateral_boundary(outside) {
                continue;
            }
            let (pi, po) = (g.trace_point(inside), g.trace_point(outside));
            let position = [(pi[0] + po[0]) / 2.0, (pi[1] + po[1]) / 2.0];
            let edge = [(pi[0] - po[0]) / h, (pi[1] - po[1]) / h];
            let normal = if g.trace_dim() == 1 {
                edge
            } else {
                let (a, b) = (grad(inside), grad(outside));
                let n = [(a[0] + b[0]) / 2.0, (a[1] + b[1]) / 2.0];
                let len = (n[0] * n[0] + n[1] * n[1]).sqrt();
                if len > 1e-12 / h {
                    [n[0] / len, n[1] / len]
                } else {
                    edge
                }
            };
            points.push(FreeBoundaryPoint { position, normal, inside, outside });
        }
    }
    FreeBoundarySet { points }
}

/// `sup` of the trace over nodes within `r` of `x0`.
fn ball_sup(c: &Configuration, x0: [f64; 2], r: f64) -> f64 {
    let g = c.grid();
    let slack = 1e-9 * g.spacing();
    (0..g.trace_len())
        .filter(|&t| dist2(g.trace_point(t), x0) <= r + slack)
        .map(|t| c.trace.values[t])
        .fold(0.0, f64::max)
}

/// Radii at half-integer cell multiples, roughly a factor `sqrt 2` apart,
/// from 2.5 cells to about 11.5 cells. Inner two cells are excluded.
pub fn default_fit_radii(h: f64) -> Vec<f64> {
    [2usize, 3, 4, 6, 8, 11].iter().map(|&k| (k as f64 + 0.5) * h).collect()
}

/// Octave radii starting at three cells, for density and Morrey sequences.
pub fn default_octave_radii(h: f64) -> Vec<f64> {
    (0..4).map(|k| 3.0 * h * 2f64.powi(k)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub slope_stderr: f64,
}

fn least_squares(x: &[f64], y: &[f64]) -> LinearFit {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let rss: f64 = x.iter().zip(y).map(|(a, b)| (b - intercept - slope * a).powi(2)).sum();
    let slope_stderr = if x.len() > 2 { (rss / (n - 2.0) / sxx).sqrt() } else { 0.0 };
    LinearFit { slope, intercept, slope_stderr }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GrowthFit {
    pub exponent: f64,
    pub stderr: f64,
}

/// Slope of `log sup_{B_r(x0)} u` against `log r`.
pub fn fit_growth_exponent(c: &Configuration, x0: [f64; 2], radii: &[f64]) -> Result<GrowthFit> {
    if radii.len() < 4 {
        return Err(Error::InsufficientData("growth fit needs at least 4 radii".into()));
    }
    let (lo, hi) = radii.iter().fold((f64::INFINITY, 0.0f64), |(a, b), &r| (a.min(r), b.max(r)));
    if !(lo > 0.0 && hi / lo >= 4.0 - 1e-12) {
        return Err(Error::InsufficientData("growth radii must span two octaves".into()));
    }
    let fb = extract_free_boundary(c);
    fb.locate(x0, c.grid().spacing())?;
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for &r in radii {
        let s = ball_sup(c, x0, r);
        if s <= 0.0 {
            return Err(Error::InsufficientData(format!("trace vanishes on the ball of radius {r}")));
        }
        xs.push(r.ln());
        ys.push(s.ln());
    }
    let fit = least_squares(&xs, &ys);
    Ok(GrowthFit { exponent: fit.slope, stderr: fit.slope_stderr })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NondegeneracyReport {
    pub min_ratio: f64,
    pub argmin: usize,
    pub samples: usize,
}

/// `min u(x) / dist(x, free boundary)^alpha` over sample nodes. Without
/// explicit samples, every positive node outside the fixed region at least
/// two cells from the free boundary is used.
pub fn nondegeneracy_check(c: &Configuration, samples: Option<&[usize]>) -> Result<NondegeneracyReport> {
    let g = c.grid();
    let fb = extract_free_boundary(c);
    if fb.is_empty() {
        return Err(Error::InsufficientData("no free boundary".into()));
    }
    let alpha = g.alpha();
    let h = g.spacing();
    let nodes: Vec<usize> = match samples {
        Some(s) => s.to_vec(),
        None => (0..g.trace_len())
            .filter(|&t| c.positivity[t] && !c.problem.fixed_region[t] && fb.distance(g.trace_point(t)) >= 2.0 * h - 1e-12)
            .collect(),
    };
    if nodes.is_empty() {
        return Err(Error::InsufficientData("no admissible sample nodes".into()));
    }
    let ratios = par::map_slice(&nodes, |&t| c.trace.values[t] / fb.distance(g.trace_point(t)).powf(alpha));
    let (k, min_ratio) = ratios
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |(bk, bv), (k, &v)| if v < bv { (k, v) } else { (bk, bv) });
    Ok(NondegeneracyReport { min_ratio, argmin: nodes[k], samples: nodes.len() })
}

pub const DENSITY_CONVENTION: &str = "phase measure in the trace ball divided by half the measure of the ball intersected with the domain";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityReport {
    pub zero_min: f64,
    pub positive_min: f64,
    pub radii: Vec<f64>,
    pub zero: Vec<f64>,
    pub positive: Vec<f64>,
    pub convention: String,
}

pub fn density_check(c: &Configuration, x0: [f64; 2], radii: &[f64]) -> Result<DensityReport> {
    let g = c.grid();
    let h = g.spacing();
    extract_free_boundary(c).locate(x0, h)?;
    if radii.is_empty() || radii.iter().any(|&r| r < 3.0 * h - 1e-12) {
        return Err(Error::param("radii", "density radii must be at least three cells"));
    }
    let mut zero = Vec::new();
    let mut positive = Vec::new();
    for &r in radii {
        let (mut z, mut p, mut all) = (0.0, 0.0, 0.0);
        for t in 0..g.trace_len() {
            if dist2(g.trace_point(t), x0) <= r + 1e-9 * h {
                let m = g.trace_cell_measure(t);
                all += m;
                if c.positivity[t] {
                    p += m;
                } else {
                    z += m;
                }
            }
        }
        zero.push(z / (all / 2.0));
        positive.push(p / (all / 2.0));
    }
    Ok(DensityReport {
        zero_min: zero.iter().cloned().fold(f64::INFINITY, f64::min),
        positive_min: positive.iter().cloned().fold(f64::INFINITY, f64::min),
        radii: radii.to_vec(),
        zero,
        positive,
        convention: DENSITY_CONVENTION.to_string(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MorreyReport {
    pub radii: Vec<f64>,
    pub values: Vec<f64>,
    pub sup: f64,
    /// Largest ratio between consecutive entries of the sequence.
    pub max_step_ratio: f64,
    pub bounded: bool,
}

/// `r^{-n} int_{B_r^+} y^beta |grad v|^2` over half balls about `(x0, 0)`.
pub fn morrey_growth_check(c: &Configuration, x0: [f64; 2], radii: &[f64]) -> Result<MorreyReport> {
    if radii.len() < 2 {
        return Err(Error::InsufficientData("Morrey sequence needs at least 2 radii".into()));
    }
    let g = c.grid();
    let n = g.trace_dim() as i32;
    let op = c.problem.operator();
    let v = c.extension();
    let values: Vec<f64> = radii
        .iter()
        .map(|&r| weighted_dirichlet_energy(op, v, Region::HalfBall { center: x0, radius: r }) / r.powi(n))
        .collect();
    let max_step_ratio = values.windows(2).map(|w| w[1] / w[0]).fold(0.0, f64::max);
    Ok(MorreyReport {
        radii: radii.to_vec(),
        sup: values.iter().cloned().fold(0.0, f64::max),
        values,
        max_step_ratio,
        bounded: max_step_ratio <= 2.0,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QEstimate {
    pub q: f64,
    /// Fitted zero crossing along the normal, relative to the boundary point.
    pub offset: f64,
    pub residual_rms: f64,
}

/// Blow-up profile model along the normal, with zero crossing `t0` fitted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProfileModel {
    /// `u = q (t - t0)^alpha`.
    Pure,
    /// `u = (t - t0)^alpha (q + c (t - t0))`, absorbing the first correction
    /// to the blow-up profile.
    Corrected,
}

/// Linear least squares of `ys` on the given basis columns; returns coefficients and RSS.
fn basis_fit(columns: &[Vec<f64>], ys: &[f64]) -> (Vec<f64>, f64) {
    let k = columns.len();
    let a = nalgebra::DMatrix::from_fn(ys.len(), k, |i, j| columns[j][i]);
    let b = nalgebra::DVector::from_column_slice(ys);
    let coef = a.clone().svd(true, true).solve(&b, 1e-14).expect("svd solve");
    let rss = (&a * &coef - &b).norm_squared();
    (coef.as_slice().to_vec(), rss)
}

fn profile_fit(ts: &[f64], us: &[f64], alpha: f64, model: ProfileModel, t0: f64) -> (Vec<f64>, f64) {
    let mut cols = vec![ts.iter().map(|t| (t - t0).max(0.0).powf(alpha)).collect::<Vec<f64>>()];
    if model == ProfileModel::Corrected {
        cols.push(ts.iter().map(|t| (t - t0).max(0.0).powf(alpha + 1.0)).collect());
    }
    basis_fit(&cols, us)
}

/// Samples of the trace against distance along the normal.
///
/// In 1D these are the values at `x0 + t nu` for each requested `t`. In 2D a
/// single interpolated line picks up the staircase of the discrete boundary,
/// so every node in the slab `|lateral offset| <= 1.5 h` whose normal
/// coordinate lies within the radius window is used instead.
fn normal_samples(c: &Configuration, p: &FreeBoundaryPoint, fit_radii: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let g = c.grid();
    let x0 = p.position;
    if g.trace_dim() == 1 {
        let us = fit_radii
            .iter()
            .map(|&t| c.trace.interpolate([x0[0] + t * p.normal[0], 0.0]).max(0.0))
            .collect();
        return (fit_radii.to_vec(), us);
    }
    let h = g.spacing();
    let t_lo = fit_radii.iter().cloned().fold(f64::INFINITY, f64::min);
    let t_hi = fit_radii.iter().cloned().fold(0.0, f64::max);
    let reach = t_hi + 2.0 * h;
    let [c1, c2] = g.trace_indices(p.inside);
    let span = (reach / h).ceil() as isize;
    let nx = g.nx() as isize;
    let mut samples = Vec::new();
    for d2 in -span..=span {
        for d1 in -span..=span {
            let (a, b) = (c1 as isize + d1, c2 as isize + d2);
            if a < 0 || b < 0 || a >= nx || b >= nx {
                continue;
            }
            let t = g.trace_flat([a as usize, b as usize]);
            let x = g.trace_point(t);
            let d = [x[0] - x0[0], x[1] - x0[1]];
            let along = d[0] * p.normal[0] + d[1] * p.normal[1];
            let lateral = (d[0] * p.normal[1] - d[1] * p.normal[0]).abs();
            if lateral <= 1.5 * h && along >= t_lo - 1e-12 && along <= t_hi + 1e-12 {
                samples.push((along, c.trace.values[t]));
            }
        }
    }
    samples.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.partial_cmp(&b.1).unwrap()));
    samples.into_iter().unzip()
}

/// Fit the blow-up profile `u(x0 + t nu) ~ q (t - t0)^alpha` and return `q`.
///
/// The coefficients enter linearly for a fixed zero crossing `t0`, which is
/// found by a scan over `[-2h, t_min)` refined by golden-section search.
pub fn estimate_q(c: &Configuration, x0: [f64; 2], fit_radii: &[f64]) -> Result<QEstimate> {
    estimate_q_with(c, x0, fit_radii, ProfileModel::Pure)
}

pub fn estimate_q_with(c: &Configuration, x0: [f64; 2], fit_radii: &[f64], model: ProfileModel) -> Result<QEstimate> {
    let g = c.grid();
    let h = g.spacing();
    let fb = extract_free_boundary(c);
    let p = fb.locate(x0, h)?;
    let unknowns = if model == ProfileModel::Pure { 2 } else { 3 };
    if fit_radii.len() < unknowns + 1 {
        return Err(Error::InsufficientData(format!("q fit needs at least {} radii", unknowns + 1)));
    }
    let alpha = g.alpha();
    let (ts, us) = normal_samples(c, p, fit_radii);
    if us.iter().all(|&u| u == 0.0) {
        return Err(Error::InsufficientData("trace vanishes along the normal".into()));
    }
    if ts.len() < unknowns + 1 {
        return Err(Error::InsufficientData("too few samples along the normal".into()));
    }
    let t_min = fit_radii.iter().cloned().fold(f64::INFINITY, f64::min);
    let (lo, hi) = (-2.0 * h, t_min - 1e-3 * h);
    let rss = |t0: f64| profile_fit(&ts, &us, alpha, model, t0).1;
    let steps = 40;
    let mut best = (lo, rss(lo));
    for k in 1..=steps {
        let t0 = lo + (hi - lo) * k as f64 / steps as f64;
        let r = rss(t0);
        if r < best.1 {
            best = (t0, r);
        }
    }
    let width = (hi - lo) / steps as f64;
    let (mut a, mut b) = ((best.0 - width).max(lo), (best.0 + width).min(hi));
    let golden = 0.5 * (5f64.sqrt() - 1.0);
    let mut x1 = b - golden * (b - a);
    let mut x2 = a + golden * (b - a);
    let (mut f1, mut f2) = (rss(x1), rss(x2));
    for _ in 0..60 {
        if f1 < f2 {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - golden * (b - a);
            f1 = rss(x1);
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + golden * (b - a);
            f2 = rss(x2);
        }
    }
    let offset = if f1 < best.1.min(f2) { x1 } else if f2 < best.1 { x2 } else { best.0 };
    let (coef, rss_best) = profile_fit(&ts, &us, alpha, model, offset);
    let q = coef[0];
    if !(q > 0.0) {
        return Err(Error::InsufficientData("fitted blow-up coefficient is not positive".into()));
    }
    Ok(QEstimate { q, offset, residual_rms: (rss_best / ts.len() as f64).sqrt() })
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QSpreadReport {
    pub estimates: Vec<f64>,
    pub median: f64,
    pub spread: f64,
    pub threshold: f64,
    pub pass: bool,
}

/// `(max q - min q) / median q` over all free-boundary points.
pub fn q_constancy_check(c: &Configuration, fit_radii: Option<&[f64]>, threshold: f64) -> Result<QSpreadReport> {
    let fb = extract_free_boundary(c);
    if fb.len() < 2 {
        return Err(Error::InsufficientData(format!("{} free-boundary points, need 2", fb.len())));
    }
    let h = c.grid().spacing();
    let radii = fit_radii.map(|r| r.to_vec()).unwrap_or_else(|| default_fit_radii(h));
    let estimates = par::map_slice(&fb.points, |p| estimate_q(c, p.position, &radii).map(|e| e.q))
        .into_iter()
        .collect::<Result<Vec<f64>>>()?;
    let med = median(&estimates);
    let (lo, hi) = estimates.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &q| (a.min(q), b.max(q)));
    let spread = (hi - lo) / med;
    Ok(QSpreadReport { estimates, median: med, spread, threshold, pass: spread <= threshold })
}

/// Energy released per unit advance of a free boundary with trace profile
/// `q t_+^alpha`, in units of `q^2`: the weighted contour integral of the
/// homogeneous extension `q ((r + x)/2)^alpha` gives
/// `2^{1-2 alpha} alpha^2 pi / sin(pi alpha)`.
pub fn release_rate_constant(alpha: f64) -> f64 {
    2f64.powf(1.0 - 2.0 * alpha) * alpha * alpha * std::f64::consts::PI / (std::f64::consts::PI * alpha).sin()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HadamardOptions {
    /// Bump radius; defaults to just under a hundredth of the distance between the two points.
    pub radius: Option<f64>,
    pub tolerance: f64,
    pub pair_ratio: f64,
}

impl Default for HadamardOptions {
    fn default() -> Self {
        HadamardOptions { radius: None, tolerance: 0.15, pair_ratio: 5.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HadamardReport {
    pub requested: Vec<f64>,
    /// Realized volume removed by the one-sided perturbation.
    pub volumes: Vec<f64>,
    pub energy_changes: Vec<f64>,
    /// Change of the penalized functional for the same perturbations.
    pub penalized_changes: Vec<f64>,
    pub slope: f64,
    pub residuals: Vec<f64>,
    pub residual_rms: f64,
    pub lambda: f64,
    pub relative_error: f64,
    pub slope_over_lambda_sq: f64,
    pub release_rate_constant: f64,
    pub relative_error_vs_release_rate: f64,
    pub pair_volume_changes: Vec<f64>,
    pub pair_energy_changes: Vec<f64>,
    pub pair_min_ratio: f64,
    pub pass_slope: bool,
    pub pass_pair: bool,
    pub notes: Vec<String>,
}

/// Energy change under volume-removing domain perturbations at a free-boundary point.
///
/// The first boundary point is pushed inward by bumps of height `V` (one-sided),
/// and the second is pushed outward by the same amount in the paired run.
/// Each perturbed configuration is re-solved exactly on its new positivity
/// set and the energy difference is fitted as `s V` through the origin.
pub fn hadamard_check(c: &Configuration, p: &PenaltyParams, volumes: &[f64], opts: &HadamardOptions) -> Result<HadamardReport> {
    let g = c.grid();
    let h = g.spacing();
    let fb = extract_free_boundary(c);
    if fb.len() < 2 {
        return Err(Error::InsufficientData("the Hadamard check needs two free-boundary points".into()));
    }
    let (x1, x2) = (fb.points[0], fb.points[fb.len() - 1]);
    let separation = dist2(x1.position, x2.position);
    let radius = opts.radius.unwrap_or(0.99 * separation / 100.0);
    let qs = q_constancy_check(c, None, f64::INFINITY)?;
    let lambda = qs.median;
    let problem = &c.problem;
    let (e0, _) = set_energy(problem, &c.positivity)?;
    let vol0 = positivity_volume(c);
    let i0 = e0 + f_eps(vol0, p);
    let rho0 = bump_profile(0.0);

    let mut report = HadamardReport {
        requested: Vec::new(),
        volumes: Vec::new(),
        energy_changes: Vec::new(),
        penalized_changes: Vec::new(),
        slope: f64::NAN,
        residuals: Vec::new(),
        residual_rms: f64::NAN,
        lambda,
        relative_error: f64::NAN,
        slope_over_lambda_sq: f64::NAN,
        release_rate_constant: release_rate_constant(g.alpha()),
        relative_error_vs_release_rate: f64::NAN,
        pair_volume_changes: Vec::new(),
        pair_energy_changes: Vec::new(),
        pair_min_ratio: f64::NAN,
        pass_slope: false,
        pass_pair: false,
        notes: Vec::new(),
    };
    let evaluate = |spec: &PerturbationSpec| -> Result<(f64, f64, f64)> {
        let moved = perturb_configuration(c, spec)?;
        let (e, _) = set_energy(problem, &moved.positivity)?;
        let vol = positivity_volume(&moved);
        Ok((vol0 - vol, e - e0, e + f_eps(vol, p) - i0))
    };
    let mut pair_ratios = Vec::new();
    let mut pair_pending = Vec::new();
    for &v in volumes {
        if v == 0.0 {
            report.requested.push(0.0);
            report.volumes.push(0.0);
            report.energy_changes.push(0.0);
            report.penalized_changes.push(0.0);
            continue;
        }
        let amplitude = v / (radius * rho0);
        let one = PerturbationSpec {
            bumps: vec![Bump { center: x1.position, normal: x1.normal, sign: 1.0 }],
            radius,
            amplitude,
        };
        let pair = PerturbationSpec {
            bumps: vec![
                Bump { center: x1.position, normal: x1.normal, sign: 1.0 },
                Bump { center: x2.position, normal: x2.normal, sign: -1.0 },
            ],
            radius,
            amplitude,
        };
        if let Err(e) = pair.validate() {
            report.notes.push(format!("V = {v}: skipped, {e}"));
            continue;
        }
        let (dv, de, di) = evaluate(&one)?;
        let (pv, pe, _) = evaluate(&pair)?;
        report.requested.push(v);
        report.volumes.push(dv);
        report.energy_changes.push(de);
        report.penalized_changes.push(di);
        report.pair_volume_changes.push(pv);
        report.pair_energy_changes.push(pe);
        pair_pending.push((dv, pe));
    }
    let fitted: Vec<(f64, f64)> = report
        .volumes
        .iter()
        .zip(&report.energy_changes)
        .filter(|(v, _)| **v > 0.5 * h.powi(g.trace_dim() as i32))
        .map(|(v, e)| (*v, *e))
        .collect();
    if fitted.len() < 2 {
        report.notes.push("fewer than two realized volume changes".into());
        return Ok(report);
    }
    let s = fitted.iter().map(|(v, e)| v * e).sum::<f64>() / fitted.iter().map(|(v, _)| v * v).sum::<f64>();
    report.slope = s;
    report.residuals = report.volumes.iter().zip(&report.energy_changes).map(|(v, e)| e - s * v).collect();
    report.residual_rms = (fitted.iter().map(|(v, e)| (e - s * v).powi(2)).sum::<f64>() / fitted.len() as f64).sqrt();
    let l2 = lambda * lambda;
    report.relative_error = (s - l2).abs() / l2;
    report.slope_over_lambda_sq = s / l2;
    let k = report.release_rate_constant;
    report.relative_error_vs_release_rate = (s - k * l2).abs() / (k * l2);
    for (dv, pe) in pair_pending {
        if dv > 0.0 {
            pair_ratios.push((s * dv).abs() / pe.abs().max(1e-300));
        }
    }
    report.pair_min_ratio = pair_ratios.iter().cloned().fold(f64::INFINITY, f64::min);
    report.pass_slope = report.relative_error <= opts.tolerance;
    report.pass_pair = report.pair_min_ratio >= opts.pair_ratio;
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FluxMeasureReport {
    /// Largest `|(-Delta)^alpha u|` on positive nodes at least three cells from the free boundary.
    pub interior_max_abs: f64,
    /// Smallest `-(-Delta)^alpha u` on nodes adjacent to the free boundary.
    pub near_fb_min: f64,
    /// Measure carried by zero nodes within three cells of the free boundary.
    pub near_fb_mass: f64,
    /// Total negative measure outside the fixed region.
    pub negative_mass: f64,
    pub scale: f64,
    pub tolerance: f64,
    pub pass: bool,
}

/// Sign and support of `mu = -(-Delta)^alpha u`, computed from the extension flux.
pub fn flux_measure_check(c: &Configuration) -> Result<FluxMeasureReport> {
    let g = c.grid();
    let h = g.spacing();
    let fb = extract_free_boundary(c);
    let lap = fractional_laplacian_via_flux(c.problem.operator(), c.extension());
    let fixed = &c.problem.fixed_region;
    let nodes: Vec<usize> = (0..g.trace_len()).filter(|&t| !fixed[t] && !g.is_lateral_boundary(t)).collect();
    let scale = nodes.iter().map(|&t| lap.values[t].abs()).fold(0.0, f64::max).max(1e-300);
    let tolerance = 1e-6;
    let near: std::collections::BTreeSet<usize> = fb.points.iter().flat_map(|p| [p.inside, p.outside]).collect();
    let mut report = FluxMeasureReport {
        interior_max_abs: 0.0,
        near_fb_min: f64::INFINITY,
        near_fb_mass: 0.0,
        negative_mass: 0.0,
        scale,
        tolerance,
        pass: false,
    };
    for &t in &nodes {
        let mu = -lap.values[t];
        let m = g.trace_cell_measure(t);
        let d = fb.distance(g.trace_point(t));
        if c.positivity[t] && d >= 3.0 * h - 1e-12 {
            report.interior_max_abs = report.interior_max_abs.max(mu.abs());
        }
        if near.contains(&t) {
            report.near_fb_min = report.near_fb_min.min(mu);
        }
        if !c.positivity[t] && d <= 3.0 * h + 1e-12 {
            report.near_fb_mass += mu * m;
        }
        if mu < 0.0 {
            report.negative_mass += mu * m;
        }
    }
    if near.is_empty() {
        report.near_fb_min = 0.0;
    }
    report.pass = report.interior_max_abs <= tolerance * scale
        && report.near_fb_min >= -tolerance * scale
        && report.negative_mass >= -tolerance * scale * h;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub growth_tolerance: f64,
    pub nondegeneracy_min: f64,
    pub density_min: f64,
    pub morrey_step: f64,
    pub q_spread: f64,
    pub hadamard_tolerance: f64,
    pub pair_ratio: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds {
            growth_tolerance: 0.07,
            nondegeneracy_min: 0.1,
            density_min: 0.2,
            morrey_step: 2.0,
            q_spread: 0.1,
            hadamard_tolerance: 0.15,
            pair_ratio: 5.0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsOptions {
    pub growth_radii: Option<Vec<f64>>,
    pub q_radii: Option<Vec<f64>>,
    pub density_radii: Option<Vec<f64>>,
    pub morrey_radii: Option<Vec<f64>>,
    /// Volumes for the Hadamard check; skipped when absent.
    pub hadamard_volumes: Option<Vec<f64>>,
    pub hadamard_radius: Option<f64>,
    #[serde(default)]
    pub thresholds: Thresholds,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PassFlags {
    pub holder: bool,
    pub nondegeneracy: bool,
    pub density: bool,
    pub morrey: bool,
    pub q_constancy: bool,
    pub hadamard: Option<bool>,
    pub hadamard_pair: Option<bool>,
    pub flux_measure: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub alpha: f64,
    pub fb_points: usize,
    pub holder_exponents: Vec<f64>,
    pub holder_exponent_fit: f64,
    pub holder_exponent_stderr: f64,
    pub nondegeneracy_min_ratio: f64,
    pub density_min_zero: f64,
    pub density_min_positive: f64,
    pub density_convention: String,
    pub morrey_sup: f64,
    pub morrey_max_step_ratio: f64,
    pub q_estimates: Vec<f64>,
    pub q_median: f64,
    pub q_spread: f64,
    pub hadamard: Option<HadamardReport>,
    pub flux_measure: FluxMeasureReport,
    pub thresholds: Thresholds,
    pub pass: PassFlags,
}

/// Every diagnostic at every free-boundary point, with pass flags.
pub fn diagnose(c: &Configuration, p: &PenaltyParams, opts: &DiagnosticsOptions) -> Result<DiagnosticsReport> {
    let g = c.grid();
    let h = g.spacing();
    let alpha = g.alpha();
    let th = &opts.thresholds;
    let fb = extract_free_boundary(c);
    if fb.is_empty() {
        return Err(Error::InsufficientData("configuration has no free boundary".into()));
    }
    let growth_radii = opts.growth_radii.clone().unwrap_or_else(|| default_fit_radii(h));
    let octave = opts.density_radii.clone().unwrap_or_else(|| default_octave_radii(h));
    let morrey_radii = opts.morrey_radii.clone().unwrap_or_else(|| default_octave_radii(h));
    let fits = par::map_slice(&fb.points, |pt| fit_growth_exponent(c, pt.position, &growth_radii))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let holder_exponents: Vec<f64> = fits.iter().map(|f| f.exponent).collect();
    let nfit = fits.len() as f64;
    let holder_mean = holder_exponents.iter().sum::<f64>() / nfit;
    let holder_stderr = (fits.iter().map(|f| f.stderr * f.stderr).sum::<f64>() / nfit).sqrt();
    let nd = nondegeneracy_check(c, None)?;
    let densities = par::map_slice(&fb.points, |pt| density_check(c, pt.position, &octave))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let density_min_zero = densities.iter().map(|d| d.zero_min).fold(f64::INFINITY, f64::min);
    let density_min_positive = densities.iter().map(|d| d.positive_min).fold(f64::INFINITY, f64::min);
    // One extension solve is shared; Morrey sequences are read at every point.
    let _ = c.extension();
    let morrey = par::map_slice(&fb.points, |pt| morrey_growth_check(c, pt.position, &morrey_radii))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let morrey_sup = morrey.iter().map(|m| m.sup).fold(0.0, f64::max);
    let morrey_max_step_ratio = morrey.iter().map(|m| m.max_step_ratio).fold(0.0, f64::max);
    let (q_estimates, q_median, q_spread, q_pass) = if fb.len() >= 2 {
        let r = q_constancy_check(c, opts.q_radii.as_deref(), th.q_spread)?;
        (r.estimates, r.median, r.spread, r.pass)
    } else {
        let radii = opts.q_radii.clone().unwrap_or_else(|| default_fit_radii(h));
        let e = estimate_q(c, fb.points[0].position, &radii)?;
        (vec![e.q], e.q, 0.0, true)
    };
    let hadamard = match &opts.hadamard_volumes {
        Some(v) => Some(hadamard_check(
            c,
            p,
            v,
            &HadamardOptions { radius: opts.hadamard_radius, tolerance: th.hadamard_tolerance, pair_ratio: th.pair_ratio },
        )?),
        None => None,
    };
    let flux = flux_measure_check(c)?;
    let pass = PassFlags {
        holder: holder_exponents.iter().all(|e| (e - alpha).abs() <= th.growth_tolerance),
        nondegeneracy: nd.min_ratio >= th.nondegeneracy_min,
        density: density_min_zero >= th.density_min && density_min_positive >= th.density_min,
        morrey: morrey_max_step_ratio <= th.morrey_step,
        q_constancy: q_pass,
        hadamard: hadamard.as_ref().map(|r| r.pass_slope),
        hadamard_pair: hadamard.as_ref().map(|r| r.pass_pair),
        flux_measure: flux.pass,
    };
    Ok(DiagnosticsReport {
        alpha,
        fb_points: fb.len(),
        holder_exponents,
        holder_exponent_fit: holder_mean,
        holder_exponent_stderr: holder_stderr,
        nondegeneracy_min_ratio: nd.min_ratio,
        density_min_zero,
        density_min_positive,
        density_convention: DENSITY_CONVENTION.to_string(),
        morrey_sup,
        morrey_max_step_ratio,
        q_estimates,
        q_median,
        q_spread,
        hadamard,
        flux_measure: flux,
        thresholds: th.clone(),
        pass,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::extension::TopBc;
    use crate::field::TraceField;
    use crate::grid::build_extension_grid;
    use crate::penalty::DesignProblem;
    use std::sync::Arc;

    /// Trace `lambda ((x - x0)_+)^s` with `x0` the midpoint of the cell at the origin.
    fn synthetic(nx: usize, alpha: f64, s: f64, lambda: f64) -> (Configuration, [f64; 2]) {
        let g = Arc::new(build_extension_grid(1, 1.0, 1.0, nx, 48, alpha, 2.0).unwrap());
        let h = g.spacing();
        let x0 = 0.5 * h;
        let problem = Arc::new(
            DesignProblem::new(g.clone(), TopBc::Zero, vec![false; g.trace_len()], TraceField::zeros(g.clone()), 0.5, 1e-10).unwrap(),
        );
        let values = (0..g.trace_len())
            .map(|t| {
                if g.is_lateral_boundary(t) {
                    return 0.0;
                }
                let x = g.trace_point(t)[0];
                lambda * (x - x0).max(0.0).powf(s)
            })
            .collect();
        (Configuration::from_trace(problem, values).unwrap(), [x0, 0.0])
    }

    #[test]
    fn interval_has_two_boundary_points() {
        let g = Arc::new(build_extension_grid(1, 1.0, 1.0, 33, 16, 0.5, 1.0).unwrap());
        let problem = Arc::new(
            DesignProblem::new(g.clone(), TopBc::Zero, vec![false; 33], TraceField::zeros(g.clone()), 0.5, 1e-10).unwrap(),
        );
        let values: Vec<f64> = (0..33).map(|t| if (10..=20).contains(&t) { 1.0 } else { 0.0 }).collect();
        let c = Configuration::from_trace(problem.clone(), values).unwrap();
        let fb = extract_free_boundary(&c);
        assert_eq!(fb.len(), 2);
        assert_eq!(fb.points[0].normal, [1.0, 0.0]);
        assert_eq!(fb.points[1].normal, [-1.0, 0.0]);
        // Positivity reaching the lateral boundary leaves one point.
        let values: Vec<f64> = (0..33).map(|t| if (10..32).contains(&t) { 1.0 } else { 0.0 }).collect();
        let c = Configuration::from_trace(problem.clone(), values).unwrap();
        assert_eq!(extract_free_boundary(&c).len(), 1);
        let values: Vec<f64> = (0..33).map(|t| if (1..32).contains(&t) { 1.0 } else { 0.0 }).collect();
        let c = Configuration::from_trace(problem, values).unwrap();
        assert!(extract_free_boundary(&c).is_empty());
    }

    #[test]
    fn growth_exponent_of_power_profiles() {
        for s in [0.25, 0.5, 0.75, 1.0] {
            let (c, x0) = synthetic(513, 0.5, s, 1.0);
            let fit = fit_growth_exponent(&c, x0, &default_fit_radii(c.grid().spacing())).unwrap();
            assert!((fit.exponent - s).abs() < 0.02, "s = {s}: {}", fit.exponent);
        }
    }

    #[test]
    fn growth_fit_is_scale_invariant() {
        let (c, x0) = synthetic(257, 0.5, 0.5, 1.0);
        let (c3, _) = synthetic(257, 0.5, 0.5, 3.0);
        let radii = default_fit_radii(c.grid().spacing());
        let a = fit_growth_exponent(&c, x0, &radii).unwrap().exponent;
        let b = fit_growth_exponent(&c3, x0, &radii).unwrap().exponent;
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn exact_profile_is_nondegenerate_with_unit_ratio() {
        let (c, _) = synthetic(257, 0.5, 0.5, 1.0);
        let r = nondegeneracy_check(&c, None).unwrap();
        assert!((r.min_ratio - 1.0).abs() < 1e-12);
    }

    #[test]
    fn flat_patch_is_degenerate() {
        let (c, _) = synthetic(257, 0.5, 0.5, 1.0);
        let g = c.grid().clone();
        let mut values = c.trace.values.clone();
        for t in 0..g.trace_len() {
            let x = g.trace_point(t)[0];
            if x > 0.05 && x < 0.3 {
                values[t] = 1e-6;
            }
        }
        let c = Configuration::from_trace(c.problem.clone(), values).unwrap();
        assert!(nondegeneracy_check(&c, None).unwrap().min_ratio < 1e-3);
    }

    #[test]
    fn half_line_densities_are_one() {
        let (c, x0) = synthetic(257, 0.5, 0.5, 1.0);
        let r = density_check(&c, x0, &default_octave_radii(c.grid().spacing())).unwrap();
        assert!((r.zero_min - 1.0).abs() < 1e-12 && (r.positive_min - 1.0).abs() < 1e-12);
        assert!(density_check(&c, [0.3, 0.0], &[0.1]).is_err());
    }

    #[test]
    fn q_of_scaled_profile() {
        let (c, x0) = synthetic(257, 0.5, 0.5, 2.0);
        let h = c.grid().spacing();
        let e = estimate_q(&c, x0, &default_fit_radii(h)).unwrap();
        assert!((e.q - 2.0).abs() < 0.04);
        let (c5, _) = synthetic(257, 0.5, 0.5, 10.0);
        let e5 = estimate_q(&c5, x0, &default_fit_radii(h)).unwrap();
        assert!((e5.q / e.q - 5.0).abs() < 1e-10);
    }

    #[test]
    fn release_constant_at_one_half() {
        assert!((release_rate_constant(0.5) - std::f64::consts::PI / 4.0).abs() < 1e-15);
        assert!((release_rate_constant(0.25) - std::f64::consts::PI / 8.0).abs() < 1e-15);
        assert!((release_rate_constant(0.75) - 9.0 * std::f64::consts::PI / 16.0).abs() < 1e-14);
    }
}
