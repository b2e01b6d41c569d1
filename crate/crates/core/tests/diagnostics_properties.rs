mod common;

use std::sync::Arc;

use common::{disc_problem, interval_problem};
use fracdesign::diagnostics::{
    default_fit_radii, diagnose, extract_free_boundary, hadamard_check, q_constancy_check, release_rate_constant,
    DiagnosticsOptions, HadamardOptions,
};
use fracdesign::penalty::{minimize_bruteforce_1d, minimize_iterative, set_energy, Configuration, DesignProblem, MinimizeOptions};
use proptest::prelude::*;

/// Energy release rate of the homogeneous profile `r^alpha cos(theta/2)^(2 alpha)`
/// per unit advance, as the path-independent integral over the unit half circle
/// of `y^beta (|grad v|^2 n_x - 2 (grad v . n) v_x)`. The flat parts of the
/// contour contribute nothing: the conormal flux vanishes on the positive side
/// and `v_x` on the zero side.
fn contour_release_rate(alpha: f64) -> f64 {
    let beta = 1.0 - 2.0 * alpha;
    // Integrand in terms of sin/cos of theta/2 and of theta, so the half
    // near theta = pi can be evaluated in the reflected variable without
    // cancellation in cos(theta/2).
    let integrand = |s: f64, c: f64, sin_t: f64, cos_t: f64| {
        let g = c.powf(2.0 * alpha);
        let dg = -alpha * c.powf(2.0 * alpha - 1.0) * s;
        let vr = alpha * g;
        let vx = vr * cos_t - dg * sin_t;
        sin_t.powf(beta) * ((vr * vr + dg * dg) * cos_t - 2.0 * vr * vx)
    };
    let half = std::f64::consts::FRAC_PI_2;
    let near = |theta: f64| {
        let (sin_t, cos_t) = theta.sin_cos();
        integrand((0.5 * theta).sin(), (0.5 * theta).cos(), sin_t, cos_t)
    };
    // theta = pi - phi.
    let far = |phi: f64| {
        let (sin_p, cos_p) = phi.sin_cos();
        integrand((0.5 * phi).cos(), (0.5 * phi).sin(), sin_p, -cos_p)
    };
    // The integrand behaves like theta^beta at 0 and like phi^(2 alpha - 1)
    // at phi = 0; power substitutions make both ends smooth.
    let smoothed = |f: &dyn Fn(f64) -> f64, power: f64| {
        let k = 1.0 / (power + 1.0);
        let upper = half.powf(1.0 / k);
        quadrature::double_exponential::integrate(|w: f64| if w > 0.0 { f(w.powf(k)) * k * w.powf(k - 1.0) } else { 0.0 }, 0.0, upper, 1e-14)
            .integral
    };
    (smoothed(&near, beta) + smoothed(&far, 2.0 * alpha - 1.0)).abs()
}

#[test]
fn release_rate_constant_matches_the_contour_integral() {
    for alpha in [0.2, 0.25, 0.4, 0.5, 0.6, 0.75, 0.9] {
        let contour = contour_release_rate(alpha);
        let closed = release_rate_constant(alpha);
        assert!((contour - closed).abs() <= 1e-10 * closed, "alpha {alpha}: {contour} vs {closed}");
    }
}

fn mirrored_pair(nx: usize) -> (Configuration, Configuration) {
    let left = interval_problem(0.5, nx, 48, 1.0, &[(-0.3, 0.1)], 0.4, |x| 1.0 + 0.5 * x);
    let right = interval_problem(0.5, nx, 48, 1.0, &[(-0.1, 0.3)], 0.4, |x| 1.0 - 0.5 * x);
    let p = left.params(0.5).unwrap();
    (minimize_bruteforce_1d(&left, &p).unwrap(), minimize_bruteforce_1d(&right, &p).unwrap())
}

#[test]
fn minimizers_and_diagnostics_commute_with_reflection() {
    let (a, b) = mirrored_pair(129);
    let n = a.trace.values.len();
    for t in 0..n {
        assert!((a.trace.values[t] - b.trace.values[n - 1 - t]).abs() <= 1e-9);
    }
    let p = a.problem.params(0.5).unwrap();
    let ra = diagnose(&a, &p, &DiagnosticsOptions::default()).unwrap();
    let rb = diagnose(&b, &p, &DiagnosticsOptions::default()).unwrap();
    let close = |x: f64, y: f64| (x - y).abs() <= 1e-7 * (1.0 + x.abs());
    assert!(close(ra.holder_exponent_fit, rb.holder_exponent_fit));
    assert!(close(ra.nondegeneracy_min_ratio, rb.nondegeneracy_min_ratio));
    assert!(close(ra.density_min_zero, rb.density_min_zero));
    assert!(close(ra.density_min_positive, rb.density_min_positive));
    assert!(close(ra.morrey_sup, rb.morrey_sup));
    assert!(close(ra.q_median, rb.q_median));
    assert!(close(ra.q_spread, rb.q_spread));
    let mut qa = ra.q_estimates.clone();
    let mut qb = rb.q_estimates.clone();
    qa.sort_by(f64::total_cmp);
    qb.sort_by(f64::total_cmp);
    for (x, y) in qa.iter().zip(&qb) {
        assert!(close(*x, *y));
    }
}

#[test]
fn one_dimensional_minimizer_has_constant_q() {
    let problem = interval_problem(0.5, 257, 64, 2.0, &[(-0.25, 0.25)], 0.5, |_| 1.0);
    let c = minimize_bruteforce_1d(&problem, &problem.params(0.5).unwrap()).unwrap();
    let r = q_constancy_check(&c, None, 0.1).unwrap();
    assert_eq!(r.estimates.len(), 2);
    assert!(r.spread <= 1e-6, "{}", r.spread);
}

/// Copy of a 1D configuration on a grid refined `factor` times, with each fine
/// node taking the positivity of the coarse cell containing it, solved exactly.
fn refined(c: &Configuration, factor: usize) -> Configuration {
    let g = c.grid();
    let spec = g.spec();
    let nx = (g.nx() - 1) * factor + 1;
    let fine_grid = Arc::new(fracdesign::grid::GridSpec { nx, ..spec }.build().unwrap());
    let nearest = |t: usize| ((t as f64) / factor as f64).round() as usize;
    let fixed: Vec<bool> = (0..nx).map(|t| c.problem.fixed_region[nearest(t)]).collect();
    let phi = fracdesign::field::TraceField::new(fine_grid.clone(), (0..nx).map(|t| c.problem.phi.values[nearest(t)]).collect()).unwrap();
    let problem = Arc::new(DesignProblem::new(fine_grid, c.problem.top, fixed, phi, c.problem.omega, c.problem.tol).unwrap());
    let mask: Vec<bool> = (0..nx).map(|t| c.positivity[nearest(t)]).collect();
    let (_, u) = set_energy(&problem, &mask).unwrap();
    Configuration::from_trace(problem, u).unwrap()
}

/// The fit `dE = s V` only holds up to o(V), so halving every requested
/// volume shrinks the fit residual. Volumes span one decade up to 1% of omega.
#[test]
fn hadamard_residual_shrinks_with_the_volume_range() {
    let problem = interval_problem(0.5, 129, 48, 2.0, &[(-0.25, 0.25)], 0.5, |_| 1.0);
    let coarse = minimize_bruteforce_1d(&problem, &problem.params(0.5).unwrap()).unwrap();
    let c = refined(&coarse, 64);
    let p = c.problem.params(0.5).unwrap();
    let volumes = [0.0, 5e-4, 7.5e-4, 1e-3, 1.7e-3, 2.8e-3, 5e-3];
    let full = hadamard_check(&c, &p, &volumes, &HadamardOptions::default()).unwrap();
    assert_eq!(full.energy_changes[0], 0.0);
    let halved: Vec<f64> = volumes.iter().map(|v| 0.5 * v).collect();
    let half = hadamard_check(&c, &p, &halved, &HadamardOptions::default()).unwrap();
    assert!(half.residual_rms < full.residual_rms, "halved {} vs full {}", half.residual_rms, full.residual_rms);
}

#[test]
fn free_boundary_points_separate_positive_and_zero_nodes() {
    let (c, _) = mirrored_pair(65);
    let fb = extract_free_boundary(&c);
    assert_eq!(fb.len(), 2);
    for p in &fb.points {
        assert!(c.positivity[p.inside] && !c.positivity[p.outside]);
        assert!(((p.normal[0].powi(2) + p.normal[1].powi(2)).sqrt() - 1.0).abs() < 1e-12);
    }
}

/// Positivity set of the disc problem mapped by one of the eight symmetries of the square grid.
fn mapped(mask: &[bool], nx: usize, sym: usize) -> Vec<bool> {
    let mut out = vec![false; mask.len()];
    let last = nx - 1;
    for i2 in 0..nx {
        for i1 in 0..nx {
            let (mut a, mut b) = (i1, i2);
            if sym & 1 == 1 {
                a = last - a;
            }
            if sym & 2 == 2 {
                b = last - b;
            }
            if sym & 4 == 4 {
                std::mem::swap(&mut a, &mut b);
            }
            out[b * nx + a] = mask[i2 * nx + i1];
        }
    }
    out
}

#[test]
fn disc_minimizer_respects_the_grid_symmetries() {
    let nx = 33;
    let problem = disc_problem(0.5, nx, 16, 1.0, 0.2, 0.4);
    let c = minimize_iterative(&problem, &problem.params(0.5).unwrap(), &MinimizeOptions::default()).unwrap().configuration;
    let fb = extract_free_boundary(&c);
    let near_fb: Vec<bool> = (0..c.positivity.len())
        .map(|t| fb.points.iter().any(|p| p.inside == t || p.outside == t))
        .collect();
    for sym in 1..8 {
        let m = mapped(&c.positivity, nx, sym);
        for t in 0..m.len() {
            if m[t] != c.positivity[t] {
                assert!(near_fb[t], "symmetry {sym}: mismatch away from the free boundary at node {t}");
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    /// The fit radii scale with the grid, so scaling the trace scales q exactly.
    #[test]
    fn q_is_linear_in_the_trace(scale in 0.1f64..10.0) {
        let (c, _) = mirrored_pair(65);
        let scaled_phi: Vec<f64> = c.problem.phi.values.iter().map(|v| v * scale).collect();
        let g = c.grid().clone();
        let problem = Arc::new(
            DesignProblem::new(
                g.clone(),
                c.problem.top,
                c.problem.fixed_region.clone(),
                fracdesign::field::TraceField::new(g, scaled_phi).unwrap(),
                c.problem.omega,
                c.problem.tol,
            )
            .unwrap(),
        );
        let cs = Configuration::from_trace(problem, c.trace.values.iter().map(|v| v * scale).collect()).unwrap();
        let radii = default_fit_radii(c.grid().spacing());
        let a = q_constancy_check(&c, Some(&radii), 0.1).unwrap();
        let b = q_constancy_check(&cs, Some(&radii), 0.1).unwrap();
        for (x, y) in a.estimates.iter().zip(&b.estimates) {
            prop_assert!((y / x - scale).abs() <= 1e-8 * scale);
        }
        prop_assert!((a.spread - b.spread).abs() <= 1e-8);
    }
}

/// Profile positive on `(a, b)` over a free trace (no fixed region).
fn lens(nx: usize, a: f64, b: f64) -> Configuration {
    let g = Arc::new(fracdesign::grid::build_extension_grid(1, 1.0, 1.0, nx, 32, 0.5, 2.0).unwrap());
    let phi = fracdesign::field::TraceField::zeros(g.clone());
    let problem = Arc::new(DesignProblem::new(g.clone(), fracdesign::extension::TopBc::Zero, vec![false; nx], phi, 0.5, 1e-10).unwrap());
    let v = (0..nx)
        .map(|t| {
            let x = g.trace_point(t)[0];
            ((x - a).max(0.0) * (b - x).max(0.0)).sqrt() * (1.0 + x - a)
        })
        .collect();
    Configuration::from_trace(problem, v).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn local_diagnostics_are_translation_invariant(shift in 1usize..24) {
        let nx = 257;
        let h = 2.0 / (nx - 1) as f64;
        // Offsets of a quarter cell keep every boundary strictly between nodes.
        let base = lens(nx, -0.4 + 0.25 * h, 0.2 + 0.25 * h);
        let moved = lens(nx, -0.4 + (0.25 + shift as f64) * h, 0.2 + (0.25 + shift as f64) * h);
        let p = base.problem.params(1.0).unwrap();
        let ra = diagnose(&base, &p, &DiagnosticsOptions::default()).unwrap();
        let rb = diagnose(&moved, &p, &DiagnosticsOptions::default()).unwrap();
        let close = |x: f64, y: f64| (x - y).abs() <= 1e-9 * (1.0 + x.abs());
        prop_assert!(close(ra.holder_exponent_fit, rb.holder_exponent_fit));
        prop_assert!(close(ra.q_median, rb.q_median));
        prop_assert!(close(ra.q_spread, rb.q_spread));
        prop_assert!(close(ra.density_min_zero, rb.density_min_zero));
        prop_assert!(close(ra.density_min_positive, rb.density_min_positive));
    }
}
