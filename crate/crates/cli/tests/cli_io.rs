use std::path::Path;
use std::process::Command;
use std::sync::Arc;

use fracdesign::error::Error;
use fracdesign::extension::TopBc;
use fracdesign::field::TraceField;
use fracdesign::grid::build_extension_grid;
use fracdesign::penalty::{Configuration, DesignProblem};
use fracdesign_cli::artifact::{trace_csv, FieldArtifact, FieldKind};
use fracdesign_cli::config::{DiagnoseSettings, ExperimentConfig};
use fracdesign_cli::run::{exit_code, run_diagnose};
use proptest::prelude::*;
use serde_json::json;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_fracdesign"))
}

fn configs() -> &'static Path {
    Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/configs"))
}

/// Configuration on a free trace of `nx` nodes (no fixed region) with the given values.
fn free_configuration(nx: usize, alpha: f64, values: impl Fn(f64) -> f64) -> Configuration {
    let g = Arc::new(build_extension_grid(1, 1.0, 1.0, nx, 32, alpha, 2.0).unwrap());
    let phi = TraceField::zeros(g.clone());
    let problem = Arc::new(DesignProblem::new(g.clone(), TopBc::Zero, vec![false; nx], phi, 0.5, 1e-10).unwrap());
    let v = (0..nx).map(|t| if g.is_lateral_boundary(t) { 0.0 } else { values(g.trace_point(t)[0]) }).collect();
    Configuration::from_trace(problem, v).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn artifacts_round_trip_bit_exactly(values in prop::collection::vec(0.0f64..1e6, 17), alpha in 0.05f64..0.95, eps in prop::option::of(1e-4f64..10.0)) {
        let mut values = values;
        values[0] = 0.0;
        values[16] = 0.0;
        let c = free_configuration(17, alpha, |_| 0.0);
        let c = Configuration::from_trace(c.problem.clone(), values).unwrap();
        for kind in [FieldKind::Trace, FieldKind::Extension] {
            let a = FieldArtifact::from_configuration(&c, kind, eps);
            let bytes = a.to_bytes();
            let back = FieldArtifact::from_bytes(&bytes).unwrap();
            prop_assert_eq!(&back, &a);
            prop_assert!(back.values.iter().zip(&a.values).all(|(x, y)| x.to_bits() == y.to_bits()));
            prop_assert_eq!(back.to_bytes(), bytes);
        }
        let (restored, stored_eps) = FieldArtifact::from_configuration(&c, FieldKind::Trace, eps).to_configuration().unwrap();
        prop_assert_eq!(stored_eps, eps);
        prop_assert_eq!(restored.trace.values, c.trace.values);
    }

    #[test]
    fn every_truncation_is_a_schema_error(cut in 0usize..10_000) {
        let c = free_configuration(33, 0.5, |x| (0.25 - x * x).max(0.0));
        let bytes = FieldArtifact::from_configuration(&c, FieldKind::Trace, Some(0.5)).to_bytes();
        let cut = cut % bytes.len();
        let err = FieldArtifact::from_bytes(&bytes[..cut]).unwrap_err();
        prop_assert!(matches!(err, Error::Schema { .. }), "{err}");
        prop_assert_eq!(exit_code(&err), 4);
    }
}

#[test]
fn schema_errors_name_the_offending_part() {
    let c = free_configuration(33, 0.5, |x| (0.25 - x * x).max(0.0));
    let bytes = FieldArtifact::from_configuration(&c, FieldKind::Trace, None).to_bytes();
    let field_of = |b: &[u8]| match FieldArtifact::from_bytes(b).unwrap_err() {
        Error::Schema { field, .. } => field,
        other => panic!("unexpected {other}"),
    };
    let mut bad_magic = bytes.clone();
    bad_magic[0] = b'X';
    assert_eq!(field_of(&bad_magic), "magic");
    let mut nan = bytes.clone();
    let n = nan.len();
    nan[n - 8..].copy_from_slice(&f64::NAN.to_le_bytes());
    assert_eq!(field_of(&nan), "data");
    let mut long = bytes.clone();
    long.extend_from_slice(&[0u8; 8]);
    assert_eq!(field_of(&long), "data");
}

#[test]
fn trace_csv_has_one_row_per_node() {
    let c = free_configuration(9, 0.5, |x| 1.0 - x * x);
    let csv = trace_csv(&c.trace);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "x,value");
    assert_eq!(lines.len(), 10);
    let row: Vec<f64> = lines[5].split(',').map(|s| s.parse().unwrap()).collect();
    assert_eq!(row, vec![0.0, 1.0]);
}

fn base_config() -> serde_json::Value {
    json!({
        "problem": {
            "n": 1, "half_width": 1.0, "height": 1.0, "nx": 33, "ny": 16, "alpha": 0.5, "omega": 0.4,
            "fixed_region": { "kind": "interval", "a": -0.2, "b": 0.2 },
            "phi": { "kind": "constant", "value": 1.0 }
        }
    })
}

#[test]
fn config_errors_name_the_field() {
    let cases = [
        ("problem.alpha", json!(1.5)),
        ("problem.omega", json!(-1.0)),
        ("problem.nx", json!(1)),
        ("schedule.ratio", json!(1.5)),
        ("schedule.vol_tol", json!(0.5)),
        ("solver.theta_pos", json!(1.0)),
    ];
    for (path, value) in cases {
        let mut doc = base_config();
        let (block, key) = path.split_once('.').unwrap();
        doc.as_object_mut().unwrap().entry(block).or_insert(json!({}))[key] = value;
        match ExperimentConfig::from_value(doc) {
            Err(Error::Config { field, .. }) => assert_eq!(field, path),
            other => panic!("{path}: {other:?}"),
        }
    }
    let mut doc = base_config();
    doc["problem"]["colour"] = json!("red");
    assert!(matches!(ExperimentConfig::from_value(doc), Err(Error::Config { .. })));
    assert!(ExperimentConfig::from_value(base_config()).is_ok());
}

#[test]
fn binary_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    std::fs::write(&cfg, base_config().to_string()).unwrap();
    let run = |args: &[&str]| bin().args(args).output().unwrap();

    let out = run(&["solve", "--config", cfg.to_str().unwrap(), "--set", "problem.alpha=1.5"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("problem.alpha"));

    let out_dir = dir.path().join("ok");
    let out = run(&["solve", "--config", cfg.to_str().unwrap(), "--out", out_dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["report.json", "sweep.csv", "trace.fdf", "extension.fdf", "trace.csv"] {
        assert!(out_dir.join(f).exists(), "{f}");
    }
    let header = std::fs::read_to_string(out_dir.join("sweep.csv")).unwrap();
    assert!(header.starts_with("eps,volume,energy,lambda_est,fb_points\n"));

    let bytes = std::fs::read(out_dir.join("trace.fdf")).unwrap();
    let truncated = dir.path().join("cut.fdf");
    std::fs::write(&truncated, &bytes[..bytes.len() - 3]).unwrap();
    let out = run(&["diagnose", truncated.to_str().unwrap(), "--out", dir.path().join("d").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(4));

    let out = run(&["solve", "--config", cfg.to_str().unwrap(), "--set", "solver.max_outer=1", "--out", dir.path().join("nc").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("nc/report.json")).unwrap()).unwrap();
    assert_eq!(report["partial"], json!(true));

    let out = run(&["oracle-1d", "--config", cfg.to_str().unwrap(), "--eps", "0.5", "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("oracle.energy"));
}

/// A stored `(x_+)^alpha`-type profile diagnosed from disk: Holder exponent,
/// nondegeneracy and densities come out as for the exact profile.
#[test]
fn synthetic_profile_artifact_diagnoses_cleanly() {
    let alpha = 0.5;
    let c = free_configuration(513, alpha, |x| 2.0 * (x + 0.3).max(0.0).powf(alpha) * (0.6 - x).max(0.0).powf(alpha));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("synthetic.fdf");
    FieldArtifact::from_configuration(&c, FieldKind::Trace, Some(1.0)).write(&path).unwrap();
    let out = dir.path().join("diag");
    let settings = DiagnoseSettings::load(None, &[("output.dir".into(), serde_json::to_string(out.to_str().unwrap()).unwrap())]).unwrap();
    let report = run_diagnose(&path, &settings).unwrap();
    assert_eq!(report.f64("diagnostics.fb_points"), Some(2.0));
    let holder = report.f64("diagnostics.holder_exponent_fit").unwrap();
    assert!((holder - alpha).abs() <= 0.07, "{holder}");
    assert_eq!(report.bool("pass.holder"), Some(true));
    assert_eq!(report.bool("pass.nondegeneracy"), Some(true));
    assert_eq!(report.bool("pass.density"), Some(true));
    assert!(out.join("report.json").exists());
}

#[test]
fn shipped_configs_validate() {
    for name in ["ref1d.json", "ref2d.json", "quick1d.json"] {
        let cfg = ExperimentConfig::load(&configs().join(name), &[]).unwrap();
        cfg.build_problem().unwrap();
    }
}
