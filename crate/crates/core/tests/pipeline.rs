use demotesim::attacks::kaslr::{kaslr_locate, KaslrLayout, SLOTS};
use demotesim::harness::{run, Config, Experiment};
use proptest::prelude::*;

#[test]
fn modified_llc_ways_flow_through_reverse_llc() {
    let cfg =
        Config::from_toml("[hierarchy.llc]\nways = 20\n[experiment.reverse]\niterations = 30\n")
            .unwrap();
    let r = run(Experiment::ReverseLlc, &cfg, 3).unwrap();
    assert_eq!(r.metrics["report"]["inferred"]["llc_ways"], 20);
    assert_eq!(
        r.metrics["report"]["breakpoints"],
        serde_json::json!([12, 16, 36])
    );
    assert!(r.passed(), "{:?}", r.checks);
}

#[test]
fn zero_noise_gives_exact_means() {
    let cfg =
        Config::from_toml("[noise]\nsigma = 0.0\n[experiment.bench]\nsamples = 50\n").unwrap();
    let r = run(Experiment::Bench, &cfg, 9).unwrap();
    assert_eq!(r.metrics["cldemote"]["l1"], 210.0);
    assert_eq!(r.metrics["primitives"]["flush-demote"]["miss_mean"], 121.0);
}

#[test]
fn report_embeds_config_and_seed() {
    let cfg = Config::from_toml("clock_ghz = 3.0\n").unwrap();
    let r = run(Experiment::Taxonomy, &cfg, 42).unwrap();
    let v: serde_json::Value = serde_json::from_str(&r.to_json().unwrap()).unwrap();
    assert_eq!(v["seed"], 42);
    assert_eq!(v["clock_ghz"], 3.0);
    assert_eq!(v["config"]["clock_ghz"], 3.0);
}

#[test]
fn different_seeds_change_kaslr_layout() {
    let cfg =
        Config::from_toml("[experiment.kaslr]\ntrials = 2\nreboots = 1\nrepeats = 1\n").unwrap();
    let a = run(Experiment::Kaslr, &cfg, 1).unwrap();
    let b = run(Experiment::Kaslr, &cfg, 2).unwrap();
    assert_ne!(a.metrics["example_layout"], b.metrics["example_layout"]);
}

proptest! {
    #[test]
    fn locate_finds_any_clean_layout(start in 0usize..=SLOTS - 22, noise in 0.0f64..10.0) {
        let layout = KaslrLayout::new(start, 22).unwrap();
        let means: Vec<f64> = (0..SLOTS)
            .map(|s| if layout.occupied(s) { 114.0 + noise } else { 149.0 - noise })
            .collect();
        prop_assert_eq!(kaslr_locate(&means, 131).unwrap(), layout.base());
    }
}
