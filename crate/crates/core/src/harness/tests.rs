use super::*;

const QUICK: &str = r#"
[experiment.bench]
samples = 200
[experiment.algorithm1]
iterations = 500
[experiment.demote_time]
samples = 200
counter_ops = 1000
stream_ops = 1000
[experiment.page_levels]
repeats = 50
[experiment.covert]
bits = 2000
sweep_windows = [600, 700, 800]
sweep_bits = 1000
[experiment.kaslr]
trials = 10
reboots = 2
repeats = 2
[experiment.reverse]
iterations = 5
"#;

fn quick() -> Config {
    Config::from_toml(QUICK).unwrap()
}

#[test]
fn defaults_round_trip() {
    let cfg = Config::from_toml("").unwrap();
    assert_eq!(cfg, Config::default());
    assert_eq!(cfg.machine(), crate::exec::MachineConfig::default());
}

#[test]
fn partial_tables_keep_other_defaults() {
    let cfg = Config::from_toml("[hierarchy.llc]\nways = 20\n").unwrap();
    assert_eq!(cfg.hierarchy.llc.ways, 20);
    assert_eq!(cfg.hierarchy.llc.sets, Config::default().hierarchy.llc.sets);
    assert_eq!(cfg.hierarchy.l2.ways, 16);
}

#[test]
fn noise_and_clock_shorthands_override() {
    let cfg = Config::from_toml("clock_ghz = 2.0\n[noise]\nsigma = 3.5\n").unwrap();
    let m = cfg.machine();
    assert_eq!(m.latency.noise_sigma, 3.5);
    assert_eq!(m.latency.clock_ghz, 2.0);
}

#[test]
fn unknown_keys_are_rejected() {
    for text in [
        "bogus = 1\n",
        "[hierarchy.llc]\nwayz = 3\n",
        "[noise]\nsigma = 1.0\nmu = 2.0\n",
    ] {
        assert!(
            matches!(Config::from_toml(text), Err(HarnessError::Config(_))),
            "{text}"
        );
    }
}

#[test]
fn experiment_names_parse_back() {
    for e in Experiment::ALL {
        assert_eq!(e.name().parse::<Experiment>().unwrap(), e);
    }
    assert!(matches!(
        "nope".parse::<Experiment>(),
        Err(HarnessError::UnknownExperiment(_))
    ));
}

#[test]
fn taxonomy_experiment_passes() {
    let r = run(Experiment::Taxonomy, &Config::default(), 0).unwrap();
    assert!(r.passed(), "{:?}", r.checks);
    assert_eq!(r.checks.len(), 8);
}

#[test]
fn quick_runs_are_deterministic() {
    let cfg = quick();
    for e in [
        Experiment::Bench,
        Experiment::Algorithm1,
        Experiment::PageLevels,
        Experiment::Kaslr,
    ] {
        let a = run(e, &cfg, 5).unwrap();
        let b = run(e, &cfg, 5).unwrap();
        assert_eq!(
            a.metric_section().unwrap(),
            b.metric_section().unwrap(),
            "{e}"
        );
        assert!(!a.checks.is_empty(), "{e}");
    }
}

#[test]
fn report_writes_json_and_sidecars() {
    let dir = tempfile::tempdir().unwrap();
    let r = run(Experiment::Taxonomy, &Config::default(), 1).unwrap();
    let files = r.write(dir.path(), Format::Json).unwrap();
    assert!(files.iter().any(|p| p.ends_with("taxonomy.json")));
    assert!(files.iter().any(|p| p.ends_with("taxonomy_marks.csv")));
    let text = std::fs::read_to_string(dir.path().join("taxonomy.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(v["schema_version"], SCHEMA_VERSION);
    assert_eq!(v["experiment"], "taxonomy");

    let files = r.write(dir.path(), Format::Csv).unwrap();
    assert!(files.iter().any(|p| p.ends_with("taxonomy_summary.csv")));
    assert!("xml".parse::<Format>().is_err());
}
