#![allow(dead_code)]

use std::sync::Arc;

use fracdesign::extension::TopBc;
use fracdesign::field::TraceField;
use fracdesign::grid::build_extension_grid;
use fracdesign::penalty::DesignProblem;

pub const TOL: f64 = 1e-10;

/// 1D problem on `[-half_width, half_width]` with `phi` prescribed on `[a, b]`.
pub fn interval_problem(alpha: f64, nx: usize, ny: usize, half_width: f64, fixed: &[(f64, f64)], omega: f64, phi: impl Fn(f64) -> f64) -> Arc<DesignProblem> {
    let g = Arc::new(build_extension_grid(1, half_width, half_width, nx, ny, alpha, 2.0).unwrap());
    let mask: Vec<bool> = (0..g.trace_len())
        .map(|t| {
            let x = g.trace_point(t)[0];
            fixed.iter().any(|&(a, b)| x >= a - 1e-12 && x <= b + 1e-12)
        })
        .collect();
    let phi_field = TraceField::from_fn(g.clone(), |x, _| phi(x));
    let phi_field = TraceField::new(g.clone(), phi_field.values.iter().zip(&mask).map(|(&v, &m)| if m { v } else { 0.0 }).collect()).unwrap();
    Arc::new(DesignProblem::new(g, TopBc::Zero, mask, phi_field, omega, TOL).unwrap())
}

/// 2D problem with `phi = 1` on the disc of `radius` about the origin.
pub fn disc_problem(alpha: f64, nx: usize, ny: usize, half_width: f64, radius: f64, omega: f64) -> Arc<DesignProblem> {
    let g = Arc::new(build_extension_grid(2, half_width, half_width, nx, ny, alpha, 2.0).unwrap());
    let mask: Vec<bool> = (0..g.trace_len())
        .map(|t| {
            let [x1, x2] = g.trace_point(t);
            x1 * x1 + x2 * x2 <= radius * radius + 1e-12
        })
        .collect();
    let phi = TraceField::new(g.clone(), mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect()).unwrap();
    Arc::new(DesignProblem::new(g, TopBc::Zero, mask, phi, omega, TOL).unwrap())
}

/// Indices of the first and last positive node outside the fixed region.
pub fn outer_endpoints(mask: &[bool]) -> (usize, usize) {
    let first = mask.iter().position(|&m| m).unwrap();
    let last = mask.iter().rposition(|&m| m).unwrap();
    (first, last)
}
