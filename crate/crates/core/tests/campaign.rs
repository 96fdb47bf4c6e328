use perfhom::campaign::*;
use proptest::prelude::*;

const COMMANDS: [&str; 11] = [
    "cell-solve",
    "effective",
    "flux",
    "solve-eps",
    "solve-hom",
    "solve-resolvent",
    "rate-study",
    "lipschitz-profile",
    "cz-check",
    "extension-check",
    "audit",
];

#[test]
fn default_configs_validate_and_round_trip() {
    for cmd in COMMANDS {
        let cfg = ExperimentConfig::default_for(cmd).unwrap();
        assert_eq!(cfg.problem.name(), cmd);
        let text = serde_json::to_string(&cfg).unwrap();
        let back = ExperimentConfig::from_json(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.content_hash(), cfg.content_hash());
    }
    assert!(ExperimentConfig::default_for("nope").is_err());
}

#[test]
fn content_hash_ignores_output_location_and_threads() {
    let a = ExperimentConfig::default_for("audit").unwrap();
    let mut b = a.clone();
    b.out = "elsewhere".into();
    b.threads = 4;
    assert_eq!(a.content_hash(), b.content_hash());
    b.seed = 9;
    assert_ne!(a.content_hash(), b.content_hash());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn fitted_slope_recovers_power_laws(c in 0.01f64..100.0, s in 0.1f64..2.5, k0 in 1i32..4) {
        let pairs: Vec<(f64, f64)> = (0..4).map(|k| {
            let e = 0.5f64.powi(k0 + k);
            (e, c * e.powf(s))
        }).collect();
        let fit = fit_rate(&pairs).unwrap();
        prop_assert!((fit.slope - s).abs() < 1e-10);
        prop_assert!(fit.residual < 1e-10);
    }

    #[test]
    fn non_dyadic_scales_are_rejected(e in 0.01f64..0.99) {
        prop_assume!((e.log2() - e.log2().round()).abs() > 1e-6);
        let mut cfg = ExperimentConfig::default_for("audit").unwrap();
        cfg.eps = vec![e];
        prop_assert!(cfg.validate().is_err());
    }
}

#[test]
fn drivers_write_consistent_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig::default_for("extension-check").unwrap();
    cfg.problem = ProblemConfig::ExtensionCheck { samples: 6, ps: vec![2.0] };
    cfg.out = dir.path().to_path_buf();
    let out = run_experiment(&cfg).unwrap();
    let (csv, json) = out.write(dir.path()).unwrap();
    let text = std::fs::read_to_string(json).unwrap();
    let value: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(value["passed"].as_bool(), Some(out.passed));
    let back: ExperimentConfig = serde_json::from_value(value["config"].clone()).unwrap();
    assert_eq!(back, cfg);
    assert!(std::fs::read_to_string(csv).unwrap().lines().count() > 1);
}

#[test]
fn rate_report_round_trips_through_json() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig::default_for("rate-study").unwrap();
    cfg.problem = ProblemConfig::ResolventRate { lambda: 1.0, source: default_bump() };
    cfg.eps = vec![0.25, 0.125, 0.0625];
    cfg.out = dir.path().to_path_buf();
    let report = run_campaign(&cfg).unwrap();
    assert!(report.complete && report.fit.is_some());
    let back: ExperimentReport = serde_json::from_str(&serde_json::to_string(&report).unwrap()).unwrap();
    assert_eq!(back.to_csv(), report.to_csv());
    assert_eq!(back.records, report.records);
    assert_eq!(back.flags, report.flags);
    assert_eq!(report.to_csv().lines().next().unwrap(), "eps,l2_error,l2_error_v,h1_corrector_error,slope_so_far");
}

#[test]
fn non_rate_problem_is_not_a_campaign() {
    let cfg = ExperimentConfig::default_for("audit").unwrap();
    assert!(run_campaign(&cfg).is_err());
}
