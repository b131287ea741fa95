use std::collections::HashSet;

use approx::assert_relative_eq;
use foid::harness::{
    builtin_case, csv_header, export, fairness_metrics, from_json, run_extended, run_one, run_sweep,
    run_sweep_detailed, sig6, to_json, validation_report, Outcome, OutputFormat, ScenarioConfig, StrategyKind,
    SweepRange, SweepRow,
};

fn data(name: &str) -> String {
    format!("{}/data/{name}", env!("CARGO_MANIFEST_DIR"))
}

fn short(cfg: ScenarioConfig) -> ScenarioConfig {
    ScenarioConfig {
        sweep: SweepRange {
            start: 6.4,
            stop: 8.0,
            step: 0.8,
        },
        ..cfg
    }
}

#[test]
fn builtin_case_values() {
    let case = builtin_case();
    assert_eq!(case.loads.p_kw[case.net.households()[11]], 5.08);
    let fleet = case.fleet(10.0);
    assert!(fleet.iter().all(|s| s.s_rating == 11.0 && s.pf_min == 0.85));
    assert_relative_eq!(case.ratio(7.0), 12.0 * 7.0 / 17.04, max_relative = 1e-15);
    assert_relative_eq!(case.pv_for_ratio(8.2), 11.644, max_relative = 1e-12);
}

#[test]
fn default_config_file_matches_defaults() {
    let cfg = ScenarioConfig::load(data("sweep.toml")).unwrap();
    assert_eq!(cfg, ScenarioConfig::default());
    assert_eq!(cfg.sweep.points().len(), 16);
}

#[test]
fn config_errors() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.toml");
    std::fs::write(&p, "strategies = []\n").unwrap();
    assert!(ScenarioConfig::load(&p).is_err());
    std::fs::write(&p, "[sweep]\nstart = 1.0\nstop = 2.0\nstep = 0.0\n").unwrap();
    assert!(ScenarioConfig::load(&p).is_err());
    std::fs::write(&p, "[sweep]\nstart = 3.0\nstop = 2.0\nstep = 0.5\n").unwrap();
    assert!(ScenarioConfig::load(&p).is_err());
    std::fs::write(&p, "unknown_key = 1\n").unwrap();
    assert!(ScenarioConfig::load(&p).is_err());
    assert!(ScenarioConfig::load(dir.path().join("missing.toml")).is_err());
}

#[test]
fn relative_network_path_resolves_against_config() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::copy(data("feeder_12pole.toml"), dir.path().join("net.toml")).unwrap();
    let p = dir.path().join("cfg.toml");
    std::fs::write(&p, "network = \"net.toml\"\nstrategies = [\"oid\"]\n").unwrap();
    let cfg = ScenarioConfig::load(&p).unwrap();
    let case = cfg.case().unwrap();
    assert_eq!(case.net.buses.len(), 25);
    assert_relative_eq!(case.reference_load_kw, 17.02, max_relative = 1e-12);
}

#[test]
fn default_sweep_has_every_row_once() {
    let cfg = ScenarioConfig::default();
    let (case, rows) = run_sweep_detailed(&cfg).unwrap();
    assert_eq!(rows.len(), 80);
    let keys: HashSet<(u64, StrategyKind, u64)> = rows
        .iter()
        .map(|d| (d.row.scenario_kw.to_bits(), d.row.strategy, d.row.ck.to_bits()))
        .collect();
    assert_eq!(keys.len(), 80);
    for (i, d) in rows.iter().enumerate() {
        let r = &d.row;
        assert_eq!(r.scenario_kw, cfg.sweep.points()[i / 5]);
        assert_relative_eq!(r.ratio, 12.0 * r.scenario_kw / 17.04, max_relative = 1e-12);
        assert!(!r.status.starts_with("error"), "{}", r.status);
        let sum: f64 = match &d.outcome {
            Outcome::Dispatch(s) => s.p_c.iter().sum(),
            Outcome::Droop(s) => s.p_c.iter().sum(),
            Outcome::Failed(m) => panic!("{m}"),
        };
        assert!((r.total_curtailment_kw - sum).abs() < 1e-9);
        assert!((r.total_curtailment_kw - r.pc.iter().sum::<f64>()).abs() < 1e-9);
    }
    let order: Vec<(StrategyKind, f64)> = rows[..5].iter().map(|d| (d.row.strategy, d.row.ck)).collect();
    assert_eq!(
        order,
        vec![
            (StrategyKind::Oid, 0.0),
            (StrategyKind::VoltVar, 0.0),
            (StrategyKind::Foid, 0.01),
            (StrategyKind::Foid, 0.05),
            (StrategyKind::Foid, 0.1)
        ]
    );
    assert_eq!(case.net.households().len(), 12);
}

#[test]
fn droop_curtailment_monotone_over_sweep() {
    let cfg = ScenarioConfig {
        strategies: vec![StrategyKind::VoltVar],
        ..Default::default()
    };
    let rows = run_sweep(&cfg).unwrap();
    assert_eq!(rows.len(), 16);
    for w in rows.windows(2) {
        assert!(w[1].total_curtailment_kw >= w[0].total_curtailment_kw - 1e-9);
    }
}

#[test]
fn zero_width_sweep_and_zero_pv_droop() {
    let cfg = ScenarioConfig {
        strategies: vec![StrategyKind::VoltVar],
        sweep: SweepRange {
            start: 0.0,
            stop: 0.0,
            step: 0.8,
        },
        ..Default::default()
    };
    let rows = run_sweep(&cfg).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].total_curtailment_kw, 0.0);
    assert!(rows[0].qc.iter().all(|&q| q == 0.0));
}

#[test]
fn runs_are_deterministic_across_worker_counts() {
    let dir = tempfile::tempdir().unwrap();
    let mut outputs = Vec::new();
    for workers in [1, 4, 1] {
        let cfg = short(ScenarioConfig {
            workers,
            ..Default::default()
        });
        let rows = run_sweep(&cfg).unwrap();
        let p = dir.path().join(format!("w{workers}-{}.csv", outputs.len()));
        export(&rows, 12, OutputFormat::Csv, &p).unwrap();
        outputs.push(std::fs::read(&p).unwrap());
    }
    assert_eq!(outputs[0], outputs[1]);
    assert_eq!(outputs[0], outputs[2]);
}

#[test]
fn csv_layout() {
    let dir = tempfile::tempdir().unwrap();
    let rows = run_sweep(&ScenarioConfig::default()).unwrap();
    let p = dir.path().join("out/sweep.csv");
    export(&rows, 12, OutputFormat::Csv, &p).unwrap();
    let text = std::fs::read_to_string(&p).unwrap();
    assert_eq!(text.lines().count(), 81);
    let header = text.lines().next().unwrap();
    assert!(header.starts_with("scenario_kw,ratio,strategy,ck,total_curtailment_kw,losses_kw,max_v_pu,fairness_variance,pc_1,"));
    assert!(header.ends_with(",qc_12,status"));
    assert_eq!(csv_header(12).len(), 8 + 24 + 1);

    let empty = dir.path().join("empty.csv");
    export(&[], 12, OutputFormat::Csv, &empty).unwrap();
    assert_eq!(std::fs::read_to_string(&empty).unwrap().lines().count(), 1);
}

#[test]
fn json_round_trip() {
    let rows = run_sweep(&short(ScenarioConfig::default())).unwrap();
    let text = to_json(&rows).unwrap();
    let back = from_json(&text).unwrap();
    let rounded: Vec<SweepRow> = rows.iter().map(SweepRow::rounded).collect();
    assert_eq!(back, rounded);
    assert_eq!(to_json(&back).unwrap(), text);

    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("rows.json");
    export(&rows, 12, OutputFormat::Json, &p).unwrap();
    assert_eq!(from_json(&std::fs::read_to_string(&p).unwrap()).unwrap(), rounded);
}

#[test]
fn failed_rows_survive_json() {
    let mut row = run_sweep(&short(ScenarioConfig::default())).unwrap().remove(0);
    row.total_curtailment_kw = f64::NAN;
    row.pc[3] = f64::NAN;
    row.status = "error: test".into();
    let back = from_json(&to_json(std::slice::from_ref(&row)).unwrap()).unwrap();
    assert!(back[0].total_curtailment_kw.is_nan() && back[0].pc[3].is_nan());
    assert_eq!(back[0].status, "error: test");
}

#[test]
fn six_significant_digits() {
    assert_eq!(sig6(1.23456789), 1.23457);
    assert_eq!(sig6(-0.000123456789), -0.000123457);
    assert_eq!(sig6(123456789.0), 123457000.0);
    assert_eq!(sig6(0.0), 0.0);
    assert!(sig6(f64::NAN).is_nan());
}

#[test]
fn fairness_metrics_examples() {
    let case = builtin_case();
    let cfg = ScenarioConfig::default();
    let mut row = run_one(&case, &cfg, 8.0, StrategyKind::Oid, 0.0).row;
    row.pc = vec![2.0; 12];
    let m = fairness_metrics(&row, &[8.0; 12]);
    assert_relative_eq!(m.max_share, 0.25);
    assert_eq!(m.full_curtailed, 0);
    assert_relative_eq!(m.variance, 12.0 * 0.0625 / 169.0, max_relative = 1e-12);
    row.pc = vec![0.0; 12];
    assert_eq!(fairness_metrics(&row, &[8.0; 12]).variance, 0.0);
    row.pc[11] = 8.0;
    let one = fairness_metrics(&row, &[8.0; 12]);
    assert!(one.variance > 0.0);
    assert_eq!(one.full_curtailed, 1);
}

#[test]
fn extended_scenarios() {
    let rows = run_extended(&ScenarioConfig::default()).unwrap();
    assert_eq!(rows.len(), 15);
    let case = builtin_case();
    for r in &rows {
        let full = fairness_metrics(r, &vec![r.scenario_kw; 12]).full_curtailed;
        if r.strategy != StrategyKind::VoltVar {
            assert_eq!(full, 0, "{} at {}", r.strategy, r.ratio);
            assert!(r.max_v_pu <= 1.05 + 1e-6);
        }
        assert_relative_eq!(r.scenario_kw, case.pv_for_ratio(r.ratio), max_relative = 1e-12);
    }
}

#[test]
fn validation_report_over_sweep() {
    let case = builtin_case();
    let report = validation_report(&case, &ScenarioConfig::default().sweep.points()).unwrap();
    assert_eq!(report.len(), 16);
    assert!(report.iter().all(|r| r.max_error_pu < 0.01));
    assert_eq!(report[0].scenario_kw, 0.0);
}
