use std::f64::consts::PI;
use std::sync::Arc;

use fracdesign::extension::{extend_separable, fractional_laplacian_via_flux, solve_dirichlet, DirichletSpec, DiscreteOperator, LateralBc, TopBc};
use fracdesign::field::TraceField;
use fracdesign::fracops::{frac_lap_quadrature, frac_lap_quadrature_field, frac_lap_spectral, FarFieldModel};
use fracdesign::grid::{build_extension_grid, ExtensionGrid, GridSpec, TraceTopology};
use proptest::prelude::*;

fn bounded(alpha: f64) -> Arc<ExtensionGrid> {
    Arc::new(build_extension_grid(1, 1.0, 1.0, 33, 24, alpha, 2.0).unwrap())
}

fn periodic(nx: usize, alpha: f64) -> Arc<ExtensionGrid> {
    Arc::new(
        GridSpec { trace_dim: 1, half_width: PI, height: 12.0, nx, ny: (nx / 4).max(16), alpha, grading: 3.0, topology: TraceTopology::Periodic }
            .build()
            .unwrap(),
    )
}

fn trace_data() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-2.0f64..2.0, 33)
}

fn rel_l2(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
    (num / b.iter().map(|y| y * y).sum::<f64>()).sqrt()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn dirichlet_solution_stays_within_its_data(alpha in 0.1f64..0.9, data in trace_data()) {
        let g = bounded(alpha);
        let trace = TraceField::new(g.clone(), data.clone()).unwrap();
        let op = DiscreteOperator::new(g);
        let v = solve_dirichlet(&op, &DirichletSpec::full_trace(trace, LateralBc::Zero, TopBc::Zero), 1e-12).unwrap();
        // Lateral and top faces carry zero data.
        let lo = data.iter().cloned().fold(0.0, f64::min);
        let hi = data.iter().cloned().fold(0.0, f64::max);
        let slack = 1e-9 * (hi - lo).max(1.0);
        prop_assert!(v.values.iter().all(|&x| x >= lo - slack && x <= hi + slack));
    }

    #[test]
    fn dirichlet_solution_minimizes_energy(alpha in 0.1f64..0.9, data in trace_data(), node in 0usize..1000, amp in -1.0f64..1.0) {
        prop_assume!(amp.abs() > 1e-3);
        let g = bounded(alpha);
        let trace = TraceField::new(g.clone(), data).unwrap();
        let op = DiscreteOperator::new(g.clone());
        let v = solve_dirichlet(&op, &DirichletSpec::full_trace(trace, LateralBc::Zero, TopBc::Zero), 1e-12).unwrap();
        // A bump on an interior node row, away from every Dirichlet face.
        let tl = g.trace_len();
        let j = 1 + node % (g.ny() - 2);
        let t = 1 + (node / g.ny()) % (tl - 2);
        let mut w = v.values.clone();
        w[j * tl + t] += amp;
        if t + 1 < tl - 1 {
            w[j * tl + t + 1] += 0.5 * amp;
        }
        prop_assert!(op.energy(&w) > op.energy(&v.values));
    }

    #[test]
    fn realizations_are_linear(alpha in 0.1f64..0.9, a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let g = periodic(64, alpha);
        let u = TraceField::from_fn(g.clone(), |x, _| (2.0 * x).cos() + 0.3 * x.sin());
        let w = TraceField::from_fn(g.clone(), |x, _| (-(x * x)).exp());
        let comb = TraceField::new(g.clone(), u.values.iter().zip(&w.values).map(|(p, q)| a * p + b * q).collect()).unwrap();
        for op in [
            |f: &TraceField, al: f64| frac_lap_spectral(f, al).unwrap().values,
            |f: &TraceField, al: f64| frac_lap_quadrature_field(f, al, FarFieldModel::Periodic).unwrap().values,
        ] {
            let (lu, lw, lc) = (op(&u, alpha), op(&w, alpha), op(&comb, alpha));
            let scale = lu.iter().chain(&lw).map(|x| x.abs()).fold(1.0, f64::max) * (a.abs() + b.abs() + 1.0);
            for i in 0..lc.len() {
                prop_assert!((lc[i] - a * lu[i] - b * lw[i]).abs() <= 1e-11 * scale);
            }
        }
    }

    /// The kernel is positive, so at a strict maximum the quadrature is nonnegative.
    #[test]
    fn quadrature_is_nonnegative_at_a_strict_maximum(alpha in 0.1f64..0.9, center in -1.0f64..1.0, width in 0.2f64..1.0) {
        let g = periodic(256, alpha);
        let u = TraceField::from_fn(g.clone(), |x, _| (-((x - center) / width).powi(2)).exp());
        let peak = (0..g.trace_len()).max_by(|&a, &b| u.values[a].total_cmp(&u.values[b])).unwrap();
        let x = g.trace_point(peak)[0];
        prop_assert!(frac_lap_quadrature(&u, x, alpha, FarFieldModel::Periodic).unwrap() >= 0.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    /// Flux route against the spectral multiplier: error shrinks when the grid doubles.
    #[test]
    fn flux_route_converges_to_the_multiplier(alpha in 0.2f64..0.8, k in 1u32..4) {
        let err = |nx: usize| {
            let g = periodic(nx, alpha);
            let u = TraceField::from_fn(g.clone(), |x, _| (k as f64 * x).cos());
            let v = extend_separable(&g, LateralBc::Periodic, TopBc::ZeroFlux, &u.values).unwrap();
            let flux = fractional_laplacian_via_flux(&DiscreteOperator::new(g.clone()), &v);
            rel_l2(&flux.values, &frac_lap_spectral(&u, alpha).unwrap().values)
        };
        let (coarse, fine) = (err(128), err(256));
        prop_assert!(fine < coarse, "alpha {alpha} k {k}: {fine} vs {coarse}");
        prop_assert!(coarse < 0.05);
    }
}
