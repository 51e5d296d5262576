use std::collections::BTreeMap;

use serde_json::json;

use super::config::Config;
use super::report::{Check, ExperimentReport, Table, SCHEMA_VERSION};
use super::{Experiment, HarnessError};
use crate::primitives::{self, Lab, ProbeKind, Threshold};

struct Outcome {
    metrics: serde_json::Value,
    checks: Vec<Check>,
    tables: BTreeMap<String, Table>,
}

impl Outcome {
    fn new(metrics: serde_json::Value) -> Self {
        Outcome {
            metrics,
            checks: Vec::new(),
            tables: BTreeMap::new(),
        }
    }

    fn check(&mut self, name: &str, pass: bool, detail: impl Into<String>) {
        self.checks.push(Check::new(name, pass, detail));
    }

    fn table(&mut self, name: &str, table: Table) {
        self.tables.insert(name.to_string(), table);
    }
}

fn ctx<E: std::fmt::Display>(exp: Experiment) -> impl Fn(E) -> HarnessError {
    move |e| HarnessError::Experiment {
        experiment: exp.name(),
        message: e.to_string(),
    }
}

fn within(got: f64, want: f64, tol: f64) -> bool {
    (got - want).abs() <= tol
}

fn f(x: f64) -> String {
    format!("{x:.4}")
}

/// Runs one experiment on a fresh simulator.
pub fn run(
    experiment: Experiment,
    config: &Config,
    seed: u64,
) -> Result<ExperimentReport, HarnessError> {
    let outcome = match experiment {
        Experiment::Bench => bench(config, seed),
        Experiment::Algorithm1 => algorithm1(config, seed),
        Experiment::DemoteTime => demote_time(config, seed),
        Experiment::PageLevels => page_levels(config, seed),
        Experiment::Covert => covert(config, seed),
        Experiment::Kaslr => kaslr(config, seed),
        Experiment::Evset => evset(config, seed),
        Experiment::ReverseLlc => reverse(config, seed, false),
        Experiment::ReverseDir => reverse(config, seed, true),
        Experiment::Taxonomy => Ok(taxonomy()),
    }
    .map_err(ctx(experiment))?;
    Ok(ExperimentReport {
        schema_version: SCHEMA_VERSION,
        experiment: experiment.name().to_string(),
        seed,
        clock_ghz: config.machine().latency.clock_ghz,
        config: config.clone(),
        metrics: outcome.metrics,
        checks: outcome.checks,
        tables: outcome.tables,
    })
}

const PRIMITIVES: [ProbeKind; 4] = [
    ProbeKind::StreamReload,
    ProbeKind::FlushReload,
    ProbeKind::FlushFlush,
    ProbeKind::FlushDemote,
];

fn bench(config: &Config, seed: u64) -> Result<Outcome, String> {
    let mc = config.machine();
    let n = config.experiment.bench.samples;
    let mut lab = Lab::new(mc.clone(), seed).map_err(|e| e.to_string())?;
    let (t, attacker) = (lab.shared_rw, lab.attacker);
    let demote = primitives::characterize_cldemote(&mut lab.machine, attacker, t, n)
        .map_err(|e| e.to_string())?;
    let c = &mc.latency.characterize;
    let mut out = Outcome::new(json!({}));
    for (state, got, want) in [
        ("l1", demote.l1, c.cldemote_l1),
        ("l2", demote.l2, c.cldemote_l2),
        ("llc", demote.llc, c.cldemote_other),
        ("absent", demote.absent, c.cldemote_other),
    ] {
        out.check(
            &format!("cldemote_{state}"),
            within(got, want, 2.0),
            format!("mean {got:.2}, model {want}"),
        );
    }
    let mut table = Table::new(&["primitive", "hit_mean", "miss_mean", "threshold", "overlap"]);
    let mut per_kind = serde_json::Map::new();
    let only = config.experiment.bench.kind;
    for kind in PRIMITIVES
        .into_iter()
        .filter(|k| only.is_none_or(|o| o == *k))
    {
        let mut lab = Lab::new(mc.clone(), seed).map_err(|e| e.to_string())?;
        let target = lab.target_for(kind);
        let (a, v) = (lab.attacker, lab.sibling);
        let cal = primitives::calibrate(&mut lab.machine, a, v, kind, target, n, 0.01)
            .map_err(|e| format!("{}: {e}", kind.name()))?;
        let th = cal.threshold;
        let want = mc.latency.primitive.get(kind).ok_or("no primitive row")?;
        out.check(
            &format!("{}_means", kind.name()),
            within(th.hit_mean, want.hit, 2.0) && within(th.miss_mean, want.miss, 2.0),
            format!(
                "hit {:.2} / miss {:.2}, model {} / {}",
                th.hit_mean, th.miss_mean, want.hit, want.miss
            ),
        );
        table.push(vec![
            kind.name().into(),
            f(th.hit_mean),
            f(th.miss_mean),
            th.cycles.to_string(),
            f(cal.overlap),
        ]);
        per_kind.insert(kind.name().into(), json!(cal.threshold));
        if only.is_some() {
            let mut samples = Table::new(&["round", "state", "cycles"]);
            for s in &cal.samples {
                let state = if s.accessed { "hit" } else { "miss" };
                samples.push(vec![
                    s.round.to_string(),
                    state.into(),
                    s.cycles.to_string(),
                ]);
            }
            out.table("samples", samples);
        }
    }
    if let Some(k) = only.filter(|k| !PRIMITIVES.contains(k)) {
        return Err(format!("{} is not a bench primitive", k.name()));
    }
    out.metrics = json!({ "cldemote": demote, "primitives": per_kind, "samples": n });
    out.table("primitives", table);
    Ok(out)
}

fn algorithm1(config: &Config, seed: u64) -> Result<Outcome, String> {
    let mc = config.machine();
    let p = &config.experiment.algorithm1;
    let mut out = Outcome::new(json!({}));
    let mut table = Table::new(&["primitive", "accuracy", "hit_mean", "miss_mean"]);
    let mut metrics = serde_json::Map::new();
    for kind in PRIMITIVES {
        let mut lab = Lab::new(mc.clone(), seed).map_err(|e| e.to_string())?;
        let target = lab.target_for(kind);
        let hm = mc.latency.primitive.get(kind).ok_or("no primitive row")?;
        let th = Threshold::midpoint(kind, hm.hit, hm.miss);
        let (a, v) = (lab.attacker, lab.sibling);
        let r = primitives::run_algorithm1(&mut lab.machine, a, v, kind, target, p.iterations, &th)
            .map_err(|e| format!("{}: {e}", kind.name()))?;
        out.check(
            &format!("{}_accuracy", kind.name()),
            r.accuracy >= p.min_accuracy,
            format!("{:.5} (min {})", r.accuracy, p.min_accuracy),
        );
        table.push(vec![
            kind.name().into(),
            f(r.accuracy),
            f(r.hit_mean),
            f(r.miss_mean),
        ]);
        metrics.insert(
            kind.name().into(),
            json!({ "accuracy": r.accuracy, "hit_mean": r.hit_mean, "miss_mean": r.miss_mean }),
        );
    }
    out.metrics = json!({ "iterations": p.iterations, "primitives": metrics });
    out.table("accuracy", table);
    Ok(out)
}

fn demote_time(config: &Config, seed: u64) -> Result<Outcome, String> {
    use crate::exec::{Instruction, PrefetchHint};
    use crate::vm::VirtualAddress;

    let mc = config.machine();
    let p = &config.experiment.demote_time;
    let mut out = Outcome::new(json!({}));

    let mut lab = Lab::new(mc.clone(), seed).map_err(|e| e.to_string())?;
    let a = lab.attacker;
    let rows =
        primitives::permission_table(&mut lab.machine, a, p.samples).map_err(|e| e.to_string())?;
    let mut table = Table::new(&[
        "present",
        "user",
        "dirty",
        "no_execute",
        "accessed",
        "memtype",
        "cldemote_hit",
        "cldemote_miss",
        "prefetch_hit",
        "prefetch_miss",
        "max_error",
    ]);
    let worst = rows.iter().map(|r| r.max_error()).fold(0.0, f64::max);
    out.check(
        "permission_rows",
        worst <= p.tolerance,
        format!("{} rows, worst deviation {worst:.2}", rows.len()),
    );
    let flat_gap = rows
        .iter()
        .filter(|r| !r.class.accessed)
        .map(|r| (r.cldemote.hit - r.cldemote.miss).abs())
        .fold(0.0, f64::max);
    out.check(
        "unaccessed_rows_flat",
        flat_gap <= 2.0,
        format!("largest hit/miss gap {flat_gap:.2}"),
    );
    for r in &rows {
        let c = r.class;
        table.push(vec![
            c.present.to_string(),
            c.user.to_string(),
            c.dirty.to_string(),
            c.no_execute.to_string(),
            c.accessed.to_string(),
            format!("{:?}", c.memtype),
            f(r.cldemote.hit),
            f(r.cldemote.miss),
            f(r.prefetch.hit),
            f(r.prefetch.miss),
            f(r.max_error()),
        ]);
    }
    out.table("permissions", table);

    let mut lab = Lab::new(mc.clone(), seed).map_err(|e| e.to_string())?;
    let ki = lab.kernel_invalid;
    let store = primitives::walk_counters(
        &mut lab.machine,
        a,
        Instruction::cldemote(ki),
        p.counter_ops,
    );
    let mut lab = Lab::new(mc.clone(), seed).map_err(|e| e.to_string())?;
    let load = primitives::walk_counters(
        &mut lab.machine,
        a,
        Instruction::prefetch(PrefetchHint::T2, ki),
        p.counter_ops,
    );
    out.check(
        "cldemote_store_walks",
        store.dtlb_store_walk_completed == 2 * p.counter_ops,
        format!(
            "{} for {} ops",
            store.dtlb_store_walk_completed, p.counter_ops
        ),
    );
    out.check(
        "prefetch_load_walks",
        load.dtlb_load_walk_completed <= 1,
        format!(
            "{} for {} ops",
            load.dtlb_load_walk_completed, p.counter_ops
        ),
    );

    let mut lab = Lab::new(mc, seed).map_err(|e| e.to_string())?;
    let targets = [
        VirtualAddress::new(0x1000_0000),
        lab.kernel_valid,
        lab.kernel_invalid,
    ];
    let faults = primitives::fault_stream(&mut lab.machine, a, &targets, p.stream_ops, seed);
    out.check(
        "fault_free",
        faults == 0,
        format!("{faults} faults in {} ops", p.stream_ops),
    );

    out.metrics = json!({
        "rows": rows,
        "cldemote_invalid": store,
        "prefetch_invalid": load,
        "stream_faults": faults,
    });
    Ok(out)
}

fn page_levels(config: &Config, seed: u64) -> Result<Outcome, String> {
    let mut lab = Lab::new(config.machine(), seed).map_err(|e| e.to_string())?;
    let a = lab.attacker;
    let addrs = primitives::page_level_addresses(&mut lab.machine).map_err(|e| e.to_string())?;
    let r = primitives::page_level_scan(
        &mut lab.machine,
        a,
        &addrs,
        config.experiment.page_levels.repeats,
    );
    let mut out = Outcome::new(json!(r));
    let pt = r.cldemote_means[4];
    out.check(
        "cldemote_monotone",
        r.cldemote_strictly_decreasing(),
        format!(
            "{:?}",
            r.cldemote_means.iter().map(|m| f(*m)).collect::<Vec<_>>()
        ),
    );
    let want = config.tlb.walk_ladder[4] as f64;
    out.check(
        "pt_level",
        within(pt, want, 2.0),
        format!("{pt:.2}, model {want}"),
    );
    out.check(
        "prefetch_flat",
        r.prefetch_spread() <= 3.0,
        format!("spread {:.2}", r.prefetch_spread()),
    );
    out.check(
        "no_faults",
        lab.machine.fault_count() == 0,
        lab.machine.fault_count().to_string(),
    );
    let mut table = Table::new(&["level", "cldemote", "prefetcht2"]);
    for (i, level) in r.levels.iter().enumerate() {
        table.push(vec![
            format!("{level:?}"),
            f(r.cldemote_means[i]),
            f(r.prefetch_means[i]),
        ]);
    }
    out.table("levels", table);
    Ok(out)
}

/// Published (window cycles, error rate, capacity in Mbps) triples.
const CHANNEL_TRIPLES: [(&str, u64, f64, f64); 3] = [
    ("flush-demote", 700, 1.8e-4, 2.849),
    ("flush-flush", 700, 2.2e-4, 2.848),
    ("flush-reload", 1600, 1.5e-4, 1.248),
];

fn covert(config: &Config, seed: u64) -> Result<Outcome, String> {
    use crate::attacks::{
        channel_run, channel_sweep, single_interior_maximum, ChannelConfig, ChannelReport,
    };

    let mc = config.machine();
    let p = &config.experiment.covert;
    let mut cfg = ChannelConfig::balanced(p.window, p.bits, p.primitive, seed);
    cfg.sync = p.sync;
    let main = channel_run(&mc, &cfg, seed).map_err(|e| e.to_string())?;
    let mut out = Outcome::new(json!({}));
    out.check(
        "ber",
        main.ber <= p.max_ber,
        format!(
            "{:.6} over {} bits at W={} (max {})",
            main.ber, main.bits, main.window_cycles, p.max_ber
        ),
    );

    let clock = mc.latency.clock_ghz * 1e9;
    let mut triples = Vec::new();
    for (name, window, ber, published) in CHANNEL_TRIPLES {
        let r = ChannelReport::synthetic(clock / window as f64, ber);
        let mbps = r.capacity / 1e6;
        out.check(
            &format!("capacity_formula_{name}"),
            within(mbps, published, 0.005),
            format!("{mbps:.4} vs {published} Mbps"),
        );
        triples.push(
            json!({ "primitive": name, "window": window, "ber": ber, "capacity_mbps": mbps }),
        );
    }

    let mut table = Table::new(&[
        "primitive",
        "window",
        "bits",
        "errors",
        "ber",
        "raw_mbps",
        "capacity_mbps",
    ]);
    let mut sweeps = serde_json::Map::new();
    let mut peaks = Vec::new();
    for kind in [p.primitive, p.baseline] {
        let curve = channel_sweep(&mc, kind, p.sync, &p.sweep_windows, p.sweep_bits, seed)
            .map_err(|e| e.to_string())?;
        for r in &curve {
            table.push(vec![
                kind.name().into(),
                r.window_cycles.to_string(),
                r.bits.to_string(),
                r.errors.to_string(),
                format!("{:.6}", r.ber),
                f(r.raw_rate / 1e6),
                f(r.capacity / 1e6),
            ]);
        }
        let peak = curve.iter().map(|r| r.capacity).fold(0.0, f64::max);
        peaks.push(peak);
        if kind == p.primitive {
            let interior = single_interior_maximum(&curve);
            out.check(
                "single_interior_maximum",
                interior.is_some(),
                match interior {
                    Some(i) => format!("peak at W={}", curve[i].window_cycles),
                    None => "no unique interior peak".into(),
                },
            );
        }
        sweeps.insert(kind.name().into(), json!(curve));
    }
    out.check(
        "beats_baseline",
        peaks[0] > peaks[1],
        format!(
            "{} {:.4} vs {} {:.4} Mbps",
            p.primitive.name(),
            peaks[0] / 1e6,
            p.baseline.name(),
            peaks[1] / 1e6
        ),
    );
    out.metrics = json!({ "run": main, "published_triples": triples, "sweeps": sweeps });
    out.table("sweep", table);
    Ok(out)
}

fn kaslr(config: &Config, seed: u64) -> Result<Outcome, String> {
    use crate::attacks::kaslr::{kaslr_evaluate, kaslr_randomize, kaslr_scan, slot_threshold};
    use crate::exec::{Machine, Thread};

    let mc = config.machine();
    let p = &config.experiment.kaslr;
    let e = kaslr_evaluate(&mc, p.kernel_slots, p.trials, p.reboots, p.repeats, seed)
        .map_err(|e| e.to_string())?;
    let mut out = Outcome::new(json!({}));
    out.check(
        "accuracy",
        e.accuracy >= p.min_accuracy,
        format!("{}/{} (min {})", e.correct, e.trials, p.min_accuracy),
    );
    out.check(
        "scan_time",
        (p.scan_ms.0..=p.scan_ms.1).contains(&e.mean_scan_ms),
        format!("{:.3} ms at {} GHz", e.mean_scan_ms, e.clock_ghz),
    );
    out.check("no_faults", e.faults == 0, e.faults.to_string());

    let mut hardened = mc.clone();
    hardened.countermeasures.privileged_only = true;
    let h_trials = (p.trials / 10).max(1);
    let h = kaslr_evaluate(
        &hardened,
        p.kernel_slots,
        h_trials,
        p.reboots.min(h_trials),
        p.repeats,
        seed,
    )
    .map_err(|e| e.to_string())?;
    out.check(
        "privileged_only_defeats",
        h.accuracy <= 0.01,
        format!("{}/{}", h.correct, h.trials),
    );

    // one scan for plotting
    let layout = kaslr_randomize(p.kernel_slots, seed).map_err(|e| e.to_string())?;
    let mut m = Machine::new(mc.clone(), seed).map_err(|e| e.to_string())?;
    layout.install(&mut m).map_err(|e| e.to_string())?;
    let scan = kaslr_scan(&mut m, Thread::user(0, 0), p.repeats);
    let threshold = slot_threshold(&mc.latency);
    let mut table = Table::new(&["slot", "mean_cycles", "occupied", "below_threshold"]);
    for (slot, mean) in scan.slot_means.iter().enumerate() {
        table.push(vec![
            slot.to_string(),
            f(*mean),
            layout.occupied(slot).to_string(),
            (*mean < threshold as f64).to_string(),
        ]);
    }
    out.table("slots", table);
    out.metrics = json!({
        "evaluation": e,
        "privileged_only": h,
        "example_layout": layout,
        "example_base": format!("{:#x}", layout.base().canonical()),
    });
    Ok(out)
}

fn evset(config: &Config, seed: u64) -> Result<Outcome, String> {
    use crate::evset::{construct, recency_check, Placement};
    use crate::rng::child_seed;

    let mc = config.machine();
    let p = &config.experiment.evset;
    let runs = p.runs.max(1);
    let mut table = Table::new(&[
        "run",
        "placement",
        "success",
        "memory_ops",
        "cycles",
        "cores",
    ]);
    let mut totals = [(0u64, 0u64); 2];
    for run in 0..runs {
        let s = child_seed(seed, run);
        for (k, placement) in [Placement::Cldemote, Placement::HelperThread]
            .into_iter()
            .enumerate()
            .filter(|(_, pl)| p.placement.is_none_or(|o| o == *pl))
        {
            let c = construct(&mc, &p.build, placement, s).map_err(|e| e.to_string())?;
            totals[k].0 += c.stats.success as u64;
            totals[k].1 += c.stats.simulated_cycles;
            table.push(vec![
                run.to_string(),
                format!("{placement:?}"),
                c.stats.success.to_string(),
                c.stats.memory_ops.to_string(),
                c.stats.simulated_cycles.to_string(),
                c.stats.cores_used.to_string(),
            ]);
        }
    }
    let rate = |k: usize| totals[k].0 as f64 / runs as f64;
    let ratio = totals[0].1 as f64 / totals[1].1.max(1) as f64;
    let mut out = Outcome::new(json!({
        "runs": runs,
        "cldemote_success": rate(0),
        "helper_success": rate(1),
        "cldemote_cycles": totals[0].1,
        "helper_cycles": totals[1].1,
        "cycle_ratio": ratio,
    }));
    for (k, name, placement) in [
        (0, "cldemote", Placement::Cldemote),
        (1, "helper", Placement::HelperThread),
    ] {
        if p.placement.is_some_and(|o| o != placement) {
            continue;
        }
        out.check(
            &format!("{name}_success"),
            rate(k) >= p.min_success,
            format!("{:.3} (min {})", rate(k), p.min_success),
        );
    }
    if p.placement.is_none() {
        out.check(
            "cycle_ratio",
            (p.cycle_ratio.0..=p.cycle_ratio.1).contains(&ratio),
            format!("{ratio:.3} in [{}, {}]", p.cycle_ratio.0, p.cycle_ratio.1),
        );
    }
    let recency = recency_check(&mc.hierarchy, 5);
    out.check("demoted_recency", recency.holds(), format!("{recency:?}"));
    out.metrics["recency"] = json!(recency);
    out.table("runs", table);
    Ok(out)
}

fn reverse(config: &Config, seed: u64, directory: bool) -> Result<Outcome, String> {
    use crate::evset::{reverse_directory, reverse_llc, InferredGeometry};
    use crate::exec::Machine;
    use crate::rng::child_seed;

    let mc = config.machine();
    let p = &config.experiment.reverse;
    let h = &mc.hierarchy;
    let (want_breaks, want) = if directory {
        let d = h.directory.ways;
        (
            vec![d, h.l2.ways + h.llc.ways],
            InferredGeometry {
                directory_ways: Some(d),
                ..Default::default()
            },
        )
    } else {
        (
            vec![h.l1d.ways, h.l2.ways, h.l2.ways + h.llc.ways],
            InferredGeometry {
                l1_ways: Some(h.l1d.ways),
                l2_ways: Some(h.l2.ways),
                llc_ways: Some(h.llc.ways),
                directory_ways: None,
            },
        )
    };
    let runs = p.runs.max(1);
    let mut matched = 0u64;
    let mut first = None;
    for run in 0..runs {
        let mut m = Machine::new(mc.clone(), child_seed(seed, run)).map_err(|e| e.to_string())?;
        let r = if directory {
            reverse_directory(&mut m, p.max_n, p.iterations, p.jump)
        } else {
            reverse_llc(&mut m, p.max_n, p.iterations, p.jump)
        }
        .map_err(|e| e.to_string())?;
        matched += (r.inferred == want && r.breakpoints == want_breaks) as u64;
        first.get_or_insert(r);
    }
    let r = first.expect("at least one run");
    let success = matched as f64 / runs as f64;
    let mut out = Outcome::new(json!({ "runs": runs, "matched": matched, "report": r }));
    out.check(
        "breakpoints",
        r.breakpoints == want_breaks,
        format!("{:?}, model {:?}", r.breakpoints, want_breaks),
    );
    out.check("geometry", r.inferred == want, format!("{:?}", r.inferred));
    out.check("success_rate", success >= 0.95, format!("{matched}/{runs}"));
    let mut table = Table::new(&["n", "mean_cycles"]);
    for (n, v) in r.curve.iter().enumerate() {
        table.push(vec![n.to_string(), f(*v)]);
    }
    out.table("curve", table);
    Ok(out)
}

fn taxonomy() -> Outcome {
    use crate::taxonomy::{predicates_monotone, verify_table, KnowledgeBase};

    let kb = KnowledgeBase::embedded();
    let rows = verify_table(&kb);
    let mut out = Outcome::new(json!({ "rows": rows }));
    let mut table = Table::new(&["instruction", "attack", "expected", "computed"]);
    for row in &rows {
        out.check(
            &row.name,
            row.pass,
            if row.pass { "match" } else { "mismatch" },
        );
        for c in &row.cells {
            table.push(vec![
                row.name.clone(),
                c.attack.name().into(),
                c.expected.map(|m| m.to_string()).unwrap_or_default(),
                c.computed.to_string(),
            ]);
        }
    }
    out.check(
        "monotone",
        predicates_monotone(),
        "adding a characteristic never removes an attack",
    );
    out.table("marks", table);
    out
}
