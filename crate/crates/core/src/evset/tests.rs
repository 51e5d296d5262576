use super::*;
use crate::exec::MachineConfig;

fn machine(seed: u64) -> Machine {
    Machine::new(MachineConfig::default(), seed).unwrap()
}

fn target(m: &mut Machine) -> VirtualAddress {
    m.map_region(TARGET_PAGE, PAGE_SIZE, PageFlags::user_rw())
        .unwrap();
    TARGET_PAGE.add(TARGET_OFFSET)
}

#[test]
fn eviction_test_threshold_at_associativity() {
    let mut m = machine(3);
    let t = target(&mut m);
    let lines = oracle_congruent(&mut m, t, 31).unwrap();
    let mut a = Attacker::new(&mut m, EvsetConfig::default());
    for placement in [Placement::Cldemote, Placement::HelperThread] {
        let lvl = EvictionLevel::Llc;
        assert!(!a.is_eviction_set(t, &[], lvl, placement).unwrap());
        assert!(!a.is_eviction_set(t, &lines[..14], lvl, placement).unwrap());
        assert!(a.is_eviction_set(t, &lines[..15], lvl, placement).unwrap());
        assert!(a.is_eviction_set(t, &lines, lvl, placement).unwrap());
    }
}

#[test]
fn directory_level_test_uses_cross_core_evictor() {
    let mut m = machine(4);
    let t = target(&mut m);
    let lines = oracle_congruent(&mut m, t, 25).unwrap();
    let mut a = Attacker::new(&mut m, EvsetConfig::default());
    let lvl = EvictionLevel::Directory;
    assert!(!a
        .is_eviction_set(t, &lines[..24], lvl, Placement::Cldemote)
        .unwrap());
    assert!(a
        .is_eviction_set(t, &lines, lvl, Placement::Cldemote)
        .unwrap());
}

#[test]
fn reduce_extracts_congruent_members() {
    let mut m = machine(5);
    let t = target(&mut m);
    let mut pool = generate_candidates(&mut m, t, 400).unwrap();
    pool.extend(oracle_congruent(&mut m, t, 20).unwrap());
    pool.rotate_left(123);
    let mut a = Attacker::new(&mut m, EvsetConfig::default());
    let set = a
        .reduce(t, pool, 15, EvictionLevel::Llc, Placement::Cldemote)
        .unwrap();
    assert_eq!(set.members.len(), 15);
    assert!(verify(&m, &set));
}

#[test]
fn non_evicting_pool_is_rejected() {
    let mut m = machine(6);
    let t = target(&mut m);
    let pool = oracle_congruent(&mut m, t, 10).unwrap();
    let mut a = Attacker::new(&mut m, EvsetConfig::default());
    let err = a
        .reduce(t, pool, 15, EvictionLevel::Llc, Placement::Cldemote)
        .unwrap_err();
    assert_eq!(err, EvsetError::NotEvictionSet);
}

#[test]
fn construct_placements_agree() {
    let cfg = MachineConfig::default();
    let ev = EvsetConfig::default();
    let demote = construct(&cfg, &ev, Placement::Cldemote, 11).unwrap();
    let helper = construct(&cfg, &ev, Placement::HelperThread, 11).unwrap();
    assert!(demote.stats.success, "{:?}", demote.error);
    assert!(helper.stats.success, "{:?}", helper.error);
    assert_eq!(demote.stats.cores_used, 1);
    assert_eq!(helper.stats.cores_used, 2);
    assert_eq!(demote.set, helper.set);
    assert!(demote.stats.simulated_cycles >= demote.stats.memory_ops);
    let ratio = demote.stats.simulated_cycles as f64 / helper.stats.simulated_cycles as f64;
    eprintln!(
        "ops {} / {}, cycles {} / {}, ratio {ratio:.3}",
        demote.stats.memory_ops,
        helper.stats.memory_ops,
        demote.stats.simulated_cycles,
        helper.stats.simulated_cycles
    );
}

#[test]
fn helper_needs_two_cores() {
    let mut cfg = MachineConfig::default();
    cfg.hierarchy.cores = 1;
    let err = construct(&cfg, &EvsetConfig::default(), Placement::HelperThread, 1).unwrap_err();
    assert_eq!(err, EvsetError::SingleCore);
    let mut m = Machine::new(cfg, 1).unwrap();
    let t = target(&mut m);
    assert_eq!(
        place_in_llc(&mut m, t, Placement::HelperThread, 600).unwrap_err(),
        EvsetError::SingleCore
    );
    assert!(place_in_llc(&mut m, t, Placement::Cldemote, 600).is_ok());
}

#[test]
fn breakpoint_detection_matches_hand_oracle() {
    let curve = [58.0, 58.5, 57.9, 72.0, 72.4, 130.0, 131.0, 308.0];
    assert_eq!(detect_breakpoints(&curve, 8.0), vec![3, 5, 7]);
    assert!(detect_breakpoints(&[1.0, 5.0, 9.0], 8.0).is_empty());
}

#[test]
fn reverse_sweeps_recover_geometry() {
    let mut m = machine(21);
    let r = reverse_llc(&mut m, 40, 40, 8.0).unwrap();
    assert_eq!(r.breakpoints, vec![12, 16, 31]);
    assert_eq!(r.inferred.l1_ways, Some(12));
    assert_eq!(r.inferred.l2_ways, Some(16));
    assert_eq!(r.inferred.llc_ways, Some(15));

    let mut m = machine(22);
    let r = reverse_directory(&mut m, 40, 40, 8.0).unwrap();
    assert_eq!(r.breakpoints, vec![25, 31]);
    assert_eq!(r.inferred.directory_ways, Some(25));
}

#[test]
fn short_directory_sweep_is_inconclusive() {
    let mut m = machine(23);
    let r = reverse_directory(&mut m, 20, 20, 8.0).unwrap();
    assert!(!r.conclusive());
    assert_eq!(r.inferred.directory_ways, None);
}

#[test]
fn reverse_tracks_modified_geometry() {
    let mut cfg = MachineConfig::default();
    cfg.hierarchy.llc.ways = 20;
    let mut m = Machine::new(cfg, 24).unwrap();
    let r = reverse_llc(&mut m, 40, 30, 8.0).unwrap();
    assert_eq!(r.inferred.llc_ways, Some(20));
}

#[test]
fn demoted_line_recency() {
    let r = recency_check(&crate::cache::HierarchyConfig::default(), 5);
    assert!(r.holds(), "{r:?}");
    assert_eq!(r.rank_after_demotes, Some(5));
}
