mod common;

use std::sync::Arc;

use common::{interval_problem, TOL};
use fracdesign::extension::{bilinear_form, weighted_dirichlet_energy, Region, TopBc};
use fracdesign::field::TraceField;
use fracdesign::grid::build_extension_grid;
use fracdesign::penalty::{
    bump_profile_max_slope, energy_i_eps, f_eps, harmonic_replacement, minimize_bruteforce_1d, minimize_iterative, perturb_configuration,
    positivity_volume, set_energy, Bump, Configuration, DesignProblem, MinimizeOptions, PenaltyParams, PerturbationSpec,
};
use proptest::prelude::*;

fn params() -> impl Strategy<Value = PenaltyParams> {
    (1e-3f64..10.0, 1e-2f64..5.0).prop_map(|(eps, omega)| PenaltyParams::new(eps, omega).unwrap())
}

proptest! {
    #[test]
    fn price_vanishes_at_the_budget(p in params()) {
        prop_assert_eq!(f_eps(p.omega, &p), 0.0);
    }

    #[test]
    fn price_is_monotone(p in params(), a in 0.0f64..10.0, b in 0.0f64..10.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(f_eps(lo, &p) <= f_eps(hi, &p));
    }

    #[test]
    fn price_slopes_are_eps_and_its_inverse(p in params(), a in 0.0f64..1.0, b in 0.0f64..1.0) {
        prop_assume!((a - b).abs() > 1e-3);
        let below = |t: f64| p.omega * t;
        let above = |t: f64| p.omega * (1.0 + t);
        let slope_below = (f_eps(below(a), &p) - f_eps(below(b), &p)) / (below(a) - below(b));
        let slope_above = (f_eps(above(a), &p) - f_eps(above(b), &p)) / (above(a) - above(b));
        prop_assert!((slope_below - p.eps).abs() <= 1e-9 * p.eps);
        prop_assert!((slope_above - 1.0 / p.eps).abs() <= 1e-9 / p.eps);
    }

    #[test]
    fn price_is_continuous_at_the_budget(p in params(), k in 20i32..40) {
        let d = 2f64.powi(-k);
        prop_assert!(f_eps(p.omega + d, &p).abs() <= d / p.eps);
        prop_assert!(f_eps(p.omega - d, &p).abs() <= d * p.eps * (1.0 + 1e-12));
    }

    /// With the field fixed, changing eps only changes the volume price.
    #[test]
    fn energy_splits_into_field_and_price(e1 in 1e-2f64..5.0, e2 in 1e-2f64..5.0) {
        let problem = interval_problem(0.5, 33, 16, 1.0, &[(-0.25, 0.25)], 0.5, |_| 1.0);
        let c = minimize_bruteforce_1d(&problem, &problem.params(1.0).unwrap()).unwrap();
        let (p1, p2) = (problem.params(e1).unwrap(), problem.params(e2).unwrap());
        let v = positivity_volume(&c);
        let diff = energy_i_eps(&c, &p1) - energy_i_eps(&c, &p2);
        prop_assert!((diff - (f_eps(v, &p1) - f_eps(v, &p2))).abs() <= 1e-12 * (1.0 + diff.abs()));
    }
}

#[test]
fn price_examples() {
    let p = PenaltyParams::new(0.1, 1.0).unwrap();
    assert!((f_eps(1.2, &p) - 2.0).abs() < 1e-12);
    assert!((f_eps(0.5, &p) + 0.05).abs() < 1e-12);
}

#[test]
fn zero_configuration_costs_minus_eps_omega() {
    let problem = interval_problem(0.5, 33, 16, 1.0, &[(-0.25, 0.25)], 0.5, |_| 0.0);
    let c = Configuration::from_trace(problem.clone(), vec![0.0; 33]).unwrap();
    assert_eq!(positivity_volume(&c), 0.0);
    let p = problem.params(0.2).unwrap();
    assert!((energy_i_eps(&c, &p) + 0.2 * 0.5).abs() < 1e-15);
    let oracle = minimize_bruteforce_1d(&problem, &p).unwrap();
    assert!(oracle.trace.values.iter().all(|&v| v == 0.0));
    assert!((energy_i_eps(&oracle, &p) + 0.1).abs() < 1e-15);
}

fn free_problem(nx: usize) -> Arc<DesignProblem> {
    let g = Arc::new(build_extension_grid(1, 1.0, 1.0, nx, 16, 0.5, 2.0).unwrap());
    let phi = TraceField::zeros(g.clone());
    Arc::new(DesignProblem::new(g, TopBc::Zero, vec![false; nx], phi, 0.5, TOL).unwrap())
}

#[test]
fn half_the_cells_have_unit_volume() {
    let problem = free_problem(33);
    let g = problem.grid.clone();
    // Nodes -0.5 ..= 0.4375 carry 16 cells of width 1/16.
    let values = (0..33).map(|t| {
        let x = g.trace_point(t)[0];
        if (-0.5..0.49).contains(&x) { 1.0 } else { 0.0 }
    });
    let c = Configuration::from_trace(problem, values.collect()).unwrap();
    assert!((positivity_volume(&c) - 1.0).abs() < 1e-12);
}

#[test]
fn volume_is_stable_under_refinement() {
    let profile = |x: f64| (0.3 - x * x).max(0.0);
    let coarse = free_problem(33);
    let fine = free_problem(65);
    let vol = |p: &Arc<DesignProblem>| {
        let g = p.grid.clone();
        let v = (0..g.trace_len()).map(|t| profile(g.trace_point(t)[0])).collect();
        positivity_volume(&Configuration::from_trace(p.clone(), v).unwrap())
    };
    assert!((vol(&coarse) - vol(&fine)).abs() <= coarse.grid.spacing());
}

/// The price is increasing with slope `1/eps` above the budget, so tiny eps
/// caps the volume at the budget and huge eps makes every cell expensive; in
/// between, overflowing the budget pays off.
#[test]
fn volume_response_to_the_price() {
    let problem = interval_problem(0.5, 65, 32, 1.0, &[(-0.25, 0.25)], 0.3, |_| 1.0);
    let h = problem.grid.spacing();
    let vol = |eps: f64| positivity_volume(&minimize_bruteforce_1d(&problem, &problem.params(eps).unwrap()).unwrap());
    assert!(vol(1e-3) <= 0.3 + h);
    assert!(vol(1e3) <= 0.3 + h);
    assert!(vol(1.0) > 0.3);
}

#[test]
fn minimizer_beats_its_competitor_battery() {
    let problem = interval_problem(0.5, 65, 32, 1.0, &[(-0.25, 0.25)], 0.5, |x| 1.0 + 0.5 * x);
    let p = problem.params(0.5).unwrap();
    let c = minimize_iterative(&problem, &p, &MinimizeOptions::default()).unwrap().configuration;
    let e = energy_i_eps(&c, &p);
    let slack = 1e-10 * e.abs();
    let g = problem.grid.clone();
    let tl = g.trace_len();
    let movable: Vec<usize> = (0..tl).filter(|&t| problem.is_movable(t)).collect();

    // Truncations min(u, delta) off the fixed region.
    let top = c.trace.values.iter().cloned().fold(0.0, f64::max);
    for k in 1..8 {
        let delta = top * k as f64 / 8.0;
        let v: Vec<f64> = (0..tl).map(|t| if problem.fixed_region[t] { c.trace.values[t] } else { c.trace.values[t].min(delta) }).collect();
        let competitor = Configuration::from_trace(problem.clone(), v).unwrap();
        assert!(energy_i_eps(&competitor, &p) >= e - slack, "truncation at {delta}");
    }
    // Smooth bumps added off the fixed region.
    for (k, &t0) in movable.iter().step_by(5).enumerate() {
        let x0 = g.trace_point(t0)[0];
        let amp = 0.05 * (1 + k % 3) as f64;
        let v: Vec<f64> = (0..tl)
            .map(|t| {
                let x = g.trace_point(t)[0];
                let bump = if problem.is_movable(t) { amp * (1.0 - ((x - x0) / 0.1).powi(2)).max(0.0) } else { 0.0 };
                c.trace.values[t] + bump
            })
            .collect();
        let competitor = Configuration::from_trace(problem.clone(), v).unwrap();
        assert!(energy_i_eps(&competitor, &p) >= e - slack, "bump at {x0}");
    }
    // Single-node flips of the positivity set, each solved exactly.
    for &t in &movable {
        let mut mask = c.positivity.clone();
        mask[t] = !mask[t];
        let (energy, _) = set_energy(&problem, &mask).unwrap();
        assert!(energy + f_eps(problem.mask_volume(&mask), &p) >= e - slack, "flip at {t}");
    }
}

/// For eps1 < eps2 with minimizers u1, u2, optimality of each against the
/// other gives (f1 - f2)(V1) <= (f1 - f2)(V2).
#[test]
fn volumes_obey_the_exchange_inequality() {
    let eps = [2.0, 1.0, 0.5, 0.25, 0.125, 0.0625];
    for alpha in [0.25, 0.5, 0.75] {
        let problem = interval_problem(alpha, 65, 32, 1.0, &[(-0.2, 0.2)], 0.4, |_| 1.0);
        let vols: Vec<f64> = eps
            .iter()
            .map(|&e| positivity_volume(&minimize_bruteforce_1d(&problem, &problem.params(e).unwrap()).unwrap()))
            .collect();
        for i in 0..eps.len() {
            for j in 0..eps.len() {
                if eps[i] >= eps[j] {
                    continue;
                }
                let (p1, p2) = (problem.params(eps[i]).unwrap(), problem.params(eps[j]).unwrap());
                let gap = |v: f64| f_eps(v, &p1) - f_eps(v, &p2);
                assert!(gap(vols[i]) <= gap(vols[j]) + 1e-12, "alpha {alpha}: eps {} vs {}", eps[i], eps[j]);
            }
        }
        let below: Vec<(f64, f64)> = eps.iter().zip(&vols).filter(|(_, &v)| v <= 0.4 + 1e-12).map(|(&e, &v)| (e, v)).collect();
        for w in below.windows(2) {
            // eps decreases along the sweep, so volume may only grow.
            assert!(w[1].1 >= w[0].1 - 1e-12, "alpha {alpha}: {w:?}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn harmonic_replacement_lowers_local_energy(cx in -0.8f64..0.8, r in 0.1f64..0.5) {
        let problem = interval_problem(0.5, 33, 16, 1.0, &[(-0.25, 0.25)], 0.5, |_| 1.0);
        let c = minimize_bruteforce_1d(&problem, &problem.params(0.5).unwrap()).unwrap();
        // A field that is not harmonic: the exact extension times a bump.
        let g = problem.grid.clone();
        let v0 = c.extension().clone();
        let mut v = v0.clone();
        for j in 0..g.ny() {
            let y = g.y_nodes[j];
            for t in 0..g.trace_len() {
                let x = g.trace_point(t)[0];
                if j > 0 {
                    v.values[j * g.trace_len() + t] *= 1.0 + 0.3 * (3.0 * x).sin() * (-y).exp();
                }
            }
        }
        let c = Configuration::with_extension(problem.clone(), v).unwrap();
        let h = harmonic_replacement(&c, [cx, 0.0], r).unwrap();
        let ball = Region::HalfBall { center: [cx, 0.0], radius: r };
        let op = problem.operator();
        prop_assert!(weighted_dirichlet_energy(op, h.extension(), ball) <= weighted_dirichlet_energy(op, c.extension(), ball) + 1e-12);
        // a(h, u - h) vanishes because u - h is supported where h is harmonic.
        let diff: Vec<f64> = c.extension().values.iter().zip(&h.extension().values).map(|(a, b)| a - b).collect();
        let cross = bilinear_form(op, &h.extension().values, &diff);
        let scale = op.energy(&c.extension().values);
        prop_assert!(cross.abs() <= 1e-7 * scale, "cross {cross} scale {scale}");
        // Replacing again changes nothing.
        let again = harmonic_replacement(&h, [cx, 0.0], r).unwrap();
        let change = again.extension().values.iter().zip(&h.extension().values).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        prop_assert!(change <= 1e-7);
    }
}

/// Asymmetric profile positive on `(-0.3, 0.4)` over a fine free trace.
fn synthetic_profile() -> Configuration {
    let problem = free_problem(4097);
    let g = problem.grid.clone();
    let v = (0..g.trace_len())
        .map(|t| {
            let x = g.trace_point(t)[0];
            ((x + 0.3).max(0.0) * (0.4 - x).max(0.0)).sqrt() * (1.0 + x)
        })
        .collect();
    Configuration::from_trace(problem, v).unwrap()
}

fn boundary_bumps(c: &Configuration) -> [Bump; 2] {
    let h = c.grid().spacing();
    let first = c.positivity.iter().position(|&m| m).unwrap();
    let last = c.positivity.iter().rposition(|&m| m).unwrap();
    let left = c.grid().trace_point(first)[0] - 0.5 * h;
    let right = c.grid().trace_point(last)[0] + 0.5 * h;
    [
        Bump { center: [right, 0.0], normal: [-1.0, 0.0], sign: 1.0 },
        Bump { center: [left, 0.0], normal: [1.0, 0.0], sign: -1.0 },
    ]
}

#[test]
fn zero_amplitude_is_the_identity() {
    let c = synthetic_profile();
    let spec = PerturbationSpec { bumps: boundary_bumps(&c).to_vec(), radius: 0.005, amplitude: 0.0 };
    let out = perturb_configuration(&c, &spec).unwrap();
    assert_eq!(out.trace.values, c.trace.values);
    assert_eq!(out.positivity, c.positivity);
}

/// One bump removes volume proportional to its radius; the opposite pair
/// cancels to within the one-cell quantization at every radius.
#[test]
fn opposite_pair_preserves_volume_as_radius_shrinks() {
    let c = synthetic_profile();
    let h = c.grid().spacing();
    let v0 = positivity_volume(&c);
    let bumps = boundary_bumps(&c);
    let mut last = f64::INFINITY;
    for radius in [0.006, 0.004, 0.002] {
        let one = PerturbationSpec { bumps: vec![bumps[0]], radius, amplitude: 0.5 / bump_profile_max_slope() };
        let pair = PerturbationSpec { bumps: bumps.to_vec(), radius, amplitude: 0.5 / bump_profile_max_slope() };
        let removed = v0 - positivity_volume(&perturb_configuration(&c, &one).unwrap());
        let net = (positivity_volume(&perturb_configuration(&c, &pair).unwrap()) - v0).abs();
        assert!(removed > 0.0 && removed < last, "radius {radius}: removed {removed}");
        assert!(net <= h + 1e-12, "radius {radius}: net {net}");
        last = removed;
    }
}

