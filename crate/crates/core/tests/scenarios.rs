mod common;

use std::collections::BTreeMap;

use spotsim::allocation::PolicyKind;
use spotsim::error::Error;
use spotsim::report::{self, Format};
use spotsim::scenario::{
    build_workload, compare_policies, comparison_csv, run_scenario, Overrides, RunOptions, ScenarioConfig, BUNDLED,
    COMPARISON_HEADERS,
};

fn exported(cfg: &ScenarioConfig, format: Format) -> BTreeMap<String, Vec<u8>> {
    let run = run_scenario(cfg, Overrides::default(), RunOptions::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    report::export(&run.report, format, dir.path())
        .unwrap()
        .into_iter()
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect()
}

#[test]
fn small_scenarios_export_identical_bytes() {
    for name in ["restarting-interrupted", "randomly-generated", "trace"] {
        let cfg = ScenarioConfig::load(&format!("bundled:{name}")).unwrap();
        for format in [Format::Csv, Format::Json] {
            let a = exported(&cfg, format);
            let b = exported(&cfg, format);
            assert_eq!(a.len(), 5, "{name}");
            assert_eq!(a, b, "{name} {format:?}");
        }
    }
}

#[test]
fn bundled_configs_round_trip() {
    for (name, _) in BUNDLED {
        let cfg = ScenarioConfig::load(&format!("bundled:{name}")).unwrap();
        let again = ScenarioConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(cfg, again, "{name}");
        assert_eq!(build_workload(&cfg, 3).unwrap().digest(), build_workload(&again, 3).unwrap().digest());
    }
}

#[test]
fn workload_does_not_depend_on_policy() {
    let base = ScenarioConfig::load("bundled:randomly-generated").unwrap();
    let digests: Vec<u64> = PolicyKind::ALL
        .iter()
        .map(|p| {
            let ov = Overrides { policy: Some(*p), ..Default::default() };
            run_scenario(&base, ov, RunOptions::default()).unwrap().workload_digest
        })
        .collect();
    assert!(digests.windows(2).all(|w| w[0] == w[1]), "{digests:?}");
    assert_ne!(build_workload(&base, 1).unwrap().digest(), build_workload(&base, 2).unwrap().digest());
}

#[test]
fn ten_seeds_three_policies() {
    let cfg = ScenarioConfig::load("bundled:randomly-generated").unwrap();
    let seeds: Vec<u64> = (1..=10).collect();
    let rows = compare_policies(&cfg, &PolicyKind::ALL, &seeds).unwrap();
    assert_eq!(rows.len(), 30);
    for chunk in rows.chunks(3) {
        assert!(chunk.iter().all(|r| r.seed == chunk[0].seed && r.workload_digest == chunk[0].workload_digest));
        let names: Vec<&str> = chunk.iter().map(|r| r.policy.as_str()).collect();
        assert_eq!(names, ["first-fit", "hlem", "hlem-adjusted"]);
    }
    let table = comparison_csv(&rows).unwrap();
    assert_eq!(table.lines().next().unwrap(), COMPARISON_HEADERS.join(","));
    assert_eq!(table.lines().count(), 31);
    assert_eq!(compare_policies(&cfg, &PolicyKind::ALL, &seeds).unwrap(), rows);
}

#[test]
fn comparison_needs_two_policies() {
    let cfg = ScenarioConfig::load("bundled:randomly-generated").unwrap();
    assert!(matches!(compare_policies(&cfg, &[PolicyKind::Hlem], &[1]), Err(Error::Usage(_))));
}

#[test]
fn overrides_are_validated() {
    let cfg = ScenarioConfig::load("bundled:randomly-generated").unwrap();
    let ov = Overrides { alpha: Some(f64::NAN), ..Default::default() };
    assert!(matches!(run_scenario(&cfg, ov, RunOptions::default()), Err(Error::Config(_))));
}

#[test]
fn every_bundled_scenario_conserves_under_audit() {
    for (name, _) in BUNDLED {
        let mut cfg = ScenarioConfig::load(&format!("bundled:{name}")).unwrap();
        if name == "comparison" {
            cfg.scale = 0.1;
        }
        let run = run_scenario(&cfg, Overrides::default(), RunOptions { audit: true }).unwrap();
        assert!(run.result.log.violations.is_empty(), "{name}: {:?}", run.result.log.violations);
        assert!(run.result.log.audits > 0);
        assert!(run.report.summary.accounting_holds(), "{name}");
        assert_eq!(common::lifecycle_violations(&run.result), Vec::<String>::new(), "{name}");
    }
}

#[test]
fn hibernation_limit_holds_in_the_comparison_scenario() {
    let mut cfg = ScenarioConfig::load("bundled:comparison").unwrap();
    cfg.scale = 0.25;
    for seed in [2, 9] {
        let ov = Overrides { seed: Some(seed), ..Default::default() };
        let run = run_scenario(&cfg, ov, RunOptions::default()).unwrap();
        assert_eq!(common::lifecycle_violations(&run.result), Vec::<String>::new(), "seed {seed}");
        let limit = 3600.0 + run.result.scheduling_interval;
        assert!(run.report.summary.max_interruption_s.map_or(true, |m| m <= limit));
    }
}
