//! Direct realizations of `(-Delta)^alpha` and the Gagliardo energy on a trace grid.
//!
//! The singular integral is written in second-difference form
//! `int_0^inf (2u(x) - u(x+z) - u(x-z)) z^{-1-2 alpha} dz`, and the smooth
//! quotient `D(z) / z^2` is integrated against `z^{1 - 2 alpha}` with exact
//! product weights, so the principal value never has to be taken numerically.

use std::collections::HashMap;
use std::sync::{Mutex, OnceLock};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::TraceField;
use crate::grid::{ExtensionGrid, GridSpec, TraceTopology};
use crate::par;
use crate::transforms::PeriodicTransform;

/// How the trace continues beyond the computational window.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FarFieldModel {
    /// Zero outside the window; edge values must vanish.
    CompactSupport,
    /// `c_pm |x|^exponent` beyond each edge, with `c_pm` matched to the edge values.
    PowerGrowth { exponent: f64 },
    /// The window is one period.
    Periodic,
}

impl FarFieldModel {
    fn check(&self, u: &TraceField, alpha: f64) -> Result<()> {
        let g = &u.grid;
        if g.trace_dim() != 1 {
            return Err(Error::Unsupported("quadrature realization is one-dimensional".into()));
        }
        match *self {
            FarFieldModel::Periodic => {
                if !g.is_periodic() || g.nx() % 2 != 0 {
                    return Err(Error::param("far", "periodic model needs a periodic grid with an even node count"));
                }
            }
            FarFieldModel::CompactSupport => {
                if g.is_periodic() {
                    return Err(Error::param("far", "compact support needs a bounded grid"));
                }
                let scale = u.values.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
                let edge = u.values[0].abs().max(u.values[g.nx() - 1].abs());
                if edge > 1e-12 * scale {
                    return Err(Error::param(
                        "far",
                        format!("compact support assumed but the edge value is {edge:.3e}"),
                    ));
                }
            }
            FarFieldModel::PowerGrowth { exponent } => {
                if g.is_periodic() {
                    return Err(Error::param("far", "power growth needs a bounded grid"));
                }
                if !(exponent >= 0.0 && exponent < 2.0 * alpha) {
                    return Err(Error::param(
                        "far.exponent",
                        format!("tail integral converges only for 0 <= exponent < 2 alpha = {}", 2.0 * alpha),
                    ));
                }
            }
        }
        Ok(())
    }
}

const GL8_NODES: [f64; 8] = [
    -0.960_289_856_497_536_2,
    -0.796_666_477_413_626_7,
    -0.525_532_409_916_329,
    -0.183_434_642_495_649_8,
    0.183_434_642_495_649_8,
    0.525_532_409_916_329,
    0.796_666_477_413_626_7,
    0.960_289_856_497_536_2,
];
const GL8_WEIGHTS: [f64; 8] = [
    0.101_228_536_290_376_26,
    0.222_381_034_453_374_47,
    0.313_706_645_877_887_3,
    0.362_683_783_378_362,
    0.362_683_783_378_362,
    0.313_706_645_877_887_3,
    0.222_381_034_453_374_47,
    0.101_228_536_290_376_26,
];

/// Weights `w_m` with `int_0^{M} g(z) z^gamma dz ~ sum_m w_m g(m)` for `g`
/// piecewise linear on unit cells. Scale by `h^{gamma + 1}` for spacing `h`.
fn product_weights(gamma: f64, cells: usize) -> Vec<f64> {
    let mut w = vec![0.0; cells + 1];
    for m in 0..cells {
        let (left, right) = if m < 4 {
            let a = m as f64;
            let b = a + 1.0;
            let i0 = (b.powf(gamma + 1.0) - a.powf(gamma + 1.0)) / (gamma + 1.0);
            let i1 = (b.powf(gamma + 2.0) - a.powf(gamma + 2.0)) / (gamma + 2.0);
            (b * i0 - i1, i1 - a * i0)
        } else {
            let mut l = 0.0;
            let mut r = 0.0;
            for (x, wt) in GL8_NODES.iter().zip(GL8_WEIGHTS) {
                let tau = 0.5 * (x + 1.0);
                let k = 0.5 * wt * (m as f64 + tau).powf(gamma);
                l += k * (1.0 - tau);
                r += k * tau;
            }
            (l, r)
        };
        w[m] += left;
        w[m + 1] += right;
    }
    w
}

/// `int_0^{M h} D(z) z^{-1 - 2 alpha} dz` from samples `D(m h)`, `m = 0..=M`,
/// with `D(z) / z^2` extrapolated to `z = 0` assuming it is even in `z`.
fn singular_part(samples: &[f64], h: f64, alpha: f64, weights: &[f64]) -> f64 {
    let cells = samples.len() - 1;
    let gamma = 1.0 - 2.0 * alpha;
    let quotient = |m: usize| samples[m] / ((m as f64) * (m as f64));
    let g1 = quotient(1);
    let g2 = if cells >= 2 { quotient(2) } else { g1 };
    let mut acc = weights[0] * (4.0 * g1 - g2) / 3.0;
    for m in 1..=cells {
        acc += weights[m] * quotient(m);
    }
    // D / z^2 with z = m h, integrated against z^gamma dz.
    acc * h.powf(gamma + 1.0) / (h * h)
}

/// Smooth kernel of all periodic images folded onto `[0, P/2]`:
/// `sum_{k >= 1} (k P + t)^{-s} + (k P - t)^{-s}`.
fn image_kernel(t: f64, period: f64, s: f64) -> f64 {
    const TERMS: usize = 64;
    let mut acc = 0.0;
    for k in 1..=TERMS {
        let kp = k as f64 * period;
        acc += (kp + t).powf(-s) + (kp - t).powf(-s);
    }
    // Remainder of the sum by the midpoint rule with its first Euler-Maclaurin correction.
    let start = (TERMS as f64 + 0.5) * period;
    let (a, b) = (start + t, start - t);
    acc + (a.powf(1.0 - s) + b.powf(1.0 - s)) / (period * (s - 1.0))
        - s * period / 24.0 * (a.powf(-s - 1.0) + b.powf(-s - 1.0))
}

/// Precomputed weights for one grid and order.
struct Quadrature {
    alpha: f64,
    h: f64,
    weights: Vec<f64>,
    /// Periodic only: trapezoid weights times the folded image kernel.
    images: Vec<f64>,
}

impl Quadrature {
    fn new(grid: &ExtensionGrid, alpha: f64, periodic: bool) -> Self {
        let h = grid.spacing();
        let cells = if periodic { grid.nx() / 2 } else { grid.nx() };
        let weights = product_weights(1.0 - 2.0 * alpha, cells);
        let images = if periodic {
            let period = grid.nx() as f64 * h;
            (0..=cells)
                .map(|m| {
                    let trap = if m == 0 || m == cells { 0.5 * h } else { h };
                    trap * image_kernel(m as f64 * h, period, 1.0 + 2.0 * alpha)
                })
                .collect()
        } else {
            Vec::new()
        };
        Quadrature { alpha, h, weights, images }
    }

    fn periodic(&self, samples: &[f64]) -> f64 {
        let near = singular_part(samples, self.h, self.alpha, &self.weights[..samples.len()]);
        let far: f64 = samples.iter().zip(&self.images).map(|(d, k)| d * k).sum();
        near + far
    }
}

/// Values of `u` at integer node offsets from the window, continued by the model.
struct Continuation<'a> {
    u: &'a TraceField,
    far: FarFieldModel,
    coef_left: f64,
    coef_right: f64,
}

impl<'a> Continuation<'a> {
    fn new(u: &'a TraceField, far: FarFieldModel) -> Self {
        let g = &u.grid;
        let (coef_left, coef_right) = match far {
            FarFieldModel::PowerGrowth { exponent } => {
                let l = g.half_width();
                (u.values[0] / l.powf(exponent), u.values[g.nx() - 1] / l.powf(exponent))
            }
            _ => (0.0, 0.0),
        };
        Continuation { u, far, coef_left, coef_right }
    }

    fn at(&self, i: i64) -> f64 {
        let g = &self.u.grid;
        let nx = g.nx() as i64;
        if self.far == FarFieldModel::Periodic {
            return self.u.values[i.rem_euclid(nx) as usize];
        }
        if (0..nx).contains(&i) {
            return self.u.values[i as usize];
        }
        self.analytic(-g.half_width() + i as f64 * g.spacing())
    }

    fn analytic(&self, x: f64) -> f64 {
        match self.far {
            FarFieldModel::PowerGrowth { exponent } => {
                if x > 0.0 {
                    self.coef_right * x.powf(exponent)
                } else {
                    self.coef_left * (-x).powf(exponent)
                }
            }
            _ => 0.0,
        }
    }
}

/// `int_Z^inf D(z) z^{-1-2 alpha} dz` where both `x +- z` lie beyond the window.
fn analytic_tail(cont: &Continuation<'_>, x: f64, ux: f64, z0: f64, alpha: f64) -> f64 {
    match cont.far {
        FarFieldModel::CompactSupport => ux * z0.powf(-2.0 * alpha) / alpha,
        FarFieldModel::PowerGrowth { exponent: p } => {
            // z = Z w^{-q} with q (2 alpha - p) = 1 turns the algebraic tail into
            // a bounded integrand on (0, 1]; D(z)/z^p is evaluated in a form
            // that stays finite as z -> infinity.
            let q = 1.0 / (2.0 * alpha - p);
            let s = 1.0 + 2.0 * alpha;
            let scale = q * z0.powf(1.0 - s + p);
            let (cl, cr) = (cont.coef_left, cont.coef_right);
            let f = |w: f64| {
                let inv_z = if w <= 0.0 { 0.0 } else { w.powf(q) / z0 };
                let head = if inv_z == 0.0 { 0.0 } else { 2.0 * ux * inv_z.powf(p) };
                scale * (head - cr * (1.0 + x * inv_z).powf(p) - cl * (1.0 - x * inv_z).powf(p))
            };
            quadrature::double_exponential::integrate(f, 0.0, 1.0, 1e-13).integral
        }
        FarFieldModel::Periodic => 0.0,
    }
}

/// Unnormalized second-difference integral at node `i`.
fn raw_integral(u: &TraceField, i: usize, alpha: f64, far: FarFieldModel, quad: &Quadrature, cont: &Continuation<'_>) -> f64 {
    let g = &u.grid;
    let ui = u.values[i];
    if far == FarFieldModel::Periodic {
        let half = g.nx() / 2;
        let samples: Vec<f64> = (0..=half)
            .map(|m| 2.0 * ui - cont.at(i as i64 + m as i64) - cont.at(i as i64 - m as i64))
            .collect();
        return quad.periodic(&samples);
    }
    let nx = g.nx();
    let reach = i.max(nx - 1 - i) + 1;
    let samples: Vec<f64> = (0..=reach)
        .map(|m| 2.0 * ui - cont.at(i as i64 + m as i64) - cont.at(i as i64 - m as i64))
        .collect();
    let near = singular_part(&samples, quad.h, alpha, &quad.weights[..samples.len()]);
    let x = g.axis_coord(i);
    near + analytic_tail(cont, x, ui, reach as f64 * quad.h, alpha)
}

fn nearest_node(grid: &ExtensionGrid, x: f64) -> Result<usize> {
    let s = (x + grid.half_width()) / grid.spacing();
    let i = s.round();
    if (s - i).abs() > 1e-6 || i < 0.0 || i >= grid.nx() as f64 {
        return Err(Error::param("x", format!("{x} is not a node of the trace grid")));
    }
    Ok(i as usize)
}

/// `(-Delta)^alpha u` at the trace node `x`.
pub fn frac_lap_quadrature(u: &TraceField, x: f64, alpha: f64, far: FarFieldModel) -> Result<f64> {
    far.check(u, alpha)?;
    let i = nearest_node(&u.grid, x)?;
    if !u.grid.is_periodic() && (i == 0 || i + 1 == u.grid.nx()) {
        return Err(Error::param("x", "point must lie strictly inside the trace grid"));
    }
    let c = normalization_constant(1, alpha)?;
    let quad = Quadrature::new(&u.grid, alpha, far == FarFieldModel::Periodic);
    let cont = Continuation::new(u, far);
    Ok(c * raw_integral(u, i, alpha, far, &quad, &cont))
}

/// `(-Delta)^alpha u` at every node (edge nodes of a bounded grid are set to 0).
pub fn frac_lap_quadrature_field(u: &TraceField, alpha: f64, far: FarFieldModel) -> Result<TraceField> {
    far.check(u, alpha)?;
    let c = normalization_constant(1, alpha)?;
    Ok(TraceField {
        grid: u.grid.clone(),
        values: raw_field(u, alpha, far).into_iter().map(|v| c * v).collect(),
    })
}

fn raw_field(u: &TraceField, alpha: f64, far: FarFieldModel) -> Vec<f64> {
    let g = &u.grid;
    let quad = Quadrature::new(g, alpha, far == FarFieldModel::Periodic);
    let cont = Continuation::new(u, far);
    let nx = g.nx();
    par::map_range(nx, |i| {
        if !g.is_periodic() && (i == 0 || i + 1 == nx) {
            0.0
        } else {
            raw_integral(u, i, alpha, far, &quad, &cont)
        }
    })
}

/// Fourier multiplier `|2 pi k / P|^{2 alpha}` on a periodic trace of period `P = 2L`.
/// Accepts `alpha` in `(0, 1]`.
pub fn frac_lap_spectral(u: &TraceField, alpha: f64) -> Result<TraceField> {
    let g = &u.grid;
    if !g.is_periodic() {
        return Err(Error::param("u", "spectral realization needs a periodic grid"));
    }
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::param("alpha", "order must lie in (0, 1]"));
    }
    let nx = g.nx();
    let dim = g.trace_dim();
    let ft = PeriodicTransform::new(nx);
    let mut hat = ft.forward(&u.values, dim);
    let base = 2.0 * std::f64::consts::PI / (2.0 * g.half_width());
    for (q, c) in hat.iter_mut().enumerate() {
        let k1 = ft.frequency(q % nx) as f64;
        let k2 = if dim == 2 { ft.frequency(q / nx) as f64 } else { 0.0 };
        let xi2 = base * base * (k1 * k1 + k2 * k2);
        *c *= xi2.powf(alpha);
    }
    Ok(TraceField {
        grid: g.clone(),
        values: ft.inverse_real(hat, dim),
    })
}

/// `int int |u(x) - u(y)|^2 / |x - y|^{1 + 2 alpha} dx dy` (no normalization
/// constant). Periodic traces give the energy per period.
pub fn gagliardo_energy(u: &TraceField, alpha: f64, far: FarFieldModel) -> Result<f64> {
    far.check(u, alpha)?;
    if matches!(far, FarFieldModel::PowerGrowth { .. }) {
        return Err(Error::Unsupported("energy of a growing trace is infinite".into()));
    }
    let g = &u.grid;
    let nx = g.nx();
    let periodic = far == FarFieldModel::Periodic;
    let quad = Quadrature::new(g, alpha, periodic);
    let cont = Continuation::new(u, far);
    let inner = par::map_range(nx, |i| {
        let ui = u.values[i];
        let reach = if periodic { nx / 2 } else { i.max(nx - 1 - i) + 1 };
        let samples: Vec<f64> = (0..=reach)
            .map(|m| {
                let a = ui - cont.at(i as i64 + m as i64);
                let b = ui - cont.at(i as i64 - m as i64);
                a * a + b * b
            })
            .collect();
        let val = if periodic {
            quad.periodic(&samples)
        } else {
            let near = singular_part(&samples, quad.h, alpha, &quad.weights[..samples.len()]);
            near + ui * ui * (reach as f64 * quad.h).powf(-2.0 * alpha) / alpha
        };
        g.trace_cell_measure(i) * val
    });
    let mut total: f64 = par::ordered_sum(&inner);
    if !periodic {
        // Pairs with the first point outside the window, where u = 0.
        let l = g.half_width();
        for i in 0..nx {
            let ui = u.values[i];
            if ui == 0.0 {
                continue;
            }
            let x = g.axis_coord(i);
            let reach = ((l - x).max(0.5 * g.spacing())).powf(-2.0 * alpha) + ((x + l).max(0.5 * g.spacing())).powf(-2.0 * alpha);
            total += g.trace_cell_measure(i) * ui * ui * reach / (2.0 * alpha);
        }
    }
    Ok(total)
}

fn constant_cache() -> &'static Mutex<HashMap<u64, f64>> {
    static CACHE: OnceLock<Mutex<HashMap<u64, f64>>> = OnceLock::new();
    CACHE.get_or_init(|| Mutex::new(HashMap::new()))
}

/// Calibration resolution: nodes per period.
const CALIBRATION_NODES: usize = 8192;

/// `C_{n,alpha}` such that the quadrature reproduces the multiplier
/// `|xi|^{2 alpha}` on the unit frequency; verified on the third frequency.
pub fn normalization_constant(n: usize, alpha: f64) -> Result<f64> {
    if n != 1 {
        return Err(Error::Unsupported("quadrature constant is calibrated for one trace dimension".into()));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::param("alpha", "order must lie in (0, 1)"));
    }
    let key = alpha.to_bits();
    if let Some(&c) = constant_cache().lock().unwrap().get(&key) {
        return Ok(c);
    }
    let grid = std::sync::Arc::new(ExtensionGrid::new(GridSpec {
        trace_dim: 1,
        half_width: std::f64::consts::PI,
        height: 1.0,
        nx: CALIBRATION_NODES,
        ny: 8,
        alpha,
        grading: 1.0,
        topology: TraceTopology::Periodic,
    })?);
    let quad = Quadrature::new(&grid, alpha, true);
    let origin = CALIBRATION_NODES / 2;
    let raw_at_origin = |k: f64| {
        let u = TraceField::from_fn(grid.clone(), |x, _| (k * x).cos());
        let cont = Continuation::new(&u, FarFieldModel::Periodic);
        raw_integral(&u, origin, alpha, FarFieldModel::Periodic, &quad, &cont)
    };
    let c = 1.0 / raw_at_origin(1.0);
    let check = c * raw_at_origin(3.0) / 3f64.powf(2.0 * alpha);
    if (check - 1.0).abs() > 0.01 {
        return Err(Error::Infeasible(format!(
            "quadrature constant inconsistent across frequencies (ratio {check})"
        )));
    }
    constant_cache().lock().unwrap().insert(key, c);
    Ok(c)
}
