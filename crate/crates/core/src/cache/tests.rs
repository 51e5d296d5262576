use super::*;
use proptest::prelude::*;

const T: u64 = 0x1234_5000 + 0x40 * 7;

fn hier() -> CacheHierarchy {
    CacheHierarchy::new(HierarchyConfig::default())
}

/// Same-core reload level after priming `n` congruent lines.
fn same_core_level(cfg: &HierarchyConfig, n: usize) -> HitLevel {
    let mut h = CacheHierarchy::new(cfg.clone());
    h.load(0, T);
    for pa in congruent_addresses(cfg, T, n) {
        h.load(0, pa);
    }
    h.load(0, T)
}

fn cross_core_level(cfg: &HierarchyConfig, n: usize) -> HitLevel {
    let mut h = CacheHierarchy::new(cfg.clone());
    h.load(0, T);
    for pa in congruent_addresses(cfg, T, n) {
        h.load(1, pa);
    }
    h.load(0, T)
}

fn steps(levels: &[HitLevel]) -> Vec<usize> {
    (1..levels.len())
        .filter(|&i| levels[i] != levels[i - 1])
        .collect()
}

#[test]
fn congruent_generator_is_sound() {
    let cfg = HierarchyConfig::default();
    let lines = congruent_addresses(&cfg, T, 40);
    assert_eq!(lines.len(), 40);
    for pa in lines {
        assert_ne!(pa, T);
        assert!(cfg.congruent(pa, T));
    }
}

#[test]
fn load_fills_private_only() {
    let mut h = hier();
    assert_eq!(h.load(0, T), HitLevel::Memory);
    let st = h.locate(T);
    assert_eq!(st.residency, vec![Residency::L1d(0), Residency::L2(0)]);
    assert!(!st.in_llc());
    assert_eq!(st.directory.unwrap().state, DirState::Private(1));
    assert_eq!(h.load(0, T), HitLevel::L1);
}

#[test]
fn demote_moves_line_to_llc() {
    let mut h = hier();
    h.load(0, T);
    assert_eq!(h.demote(0, T), DemoteOutcome::Moved);
    let st = h.locate(T);
    assert_eq!(st.residency, vec![Residency::Llc]);
    assert_eq!(st.directory.unwrap().state, DirState::Llc);
    // already in the LLC only
    assert_eq!(h.demote(0, T), DemoteOutcome::Nop);
    assert_eq!(h.load(0, T), HitLevel::Llc);
}

#[test]
fn demote_ignores_other_cores() {
    let mut h = hier();
    h.load(1, T);
    assert_eq!(h.demote(0, T), DemoteOutcome::Nop);
    assert_eq!(
        h.locate(T).residency,
        vec![Residency::L1d(1), Residency::L2(1)]
    );
}

#[test]
fn flush_removes_everything_and_is_idempotent() {
    let mut h = hier();
    h.load(0, T);
    h.load(1, T);
    assert!(h.flush(T));
    assert!(h.locate(T).is_absent());
    assert!(h.locate(T).directory.is_none());
    assert!(!h.flush(T));
    assert_eq!(h.load(0, T), HitLevel::Memory);
}

#[test]
fn flush_after_demote_clears_llc() {
    let mut h = hier();
    h.load(0, T);
    h.demote(0, T);
    h.flush(T);
    assert!(h.locate(T).is_absent());
}

#[test]
fn dirty_flush_writes_back() {
    let mut h = hier();
    h.store(0, T);
    assert_eq!(h.locate(T).coherence, Coherence::M);
    h.flush(T);
    assert_eq!(h.stats().writebacks, 1);
}

#[test]
fn two_cores_share_through_llc() {
    let mut h = hier();
    h.load(0, T);
    assert_eq!(h.load(1, T), HitLevel::RemotePrivate);
    let st = h.locate(T);
    assert!(st.in_llc());
    assert_eq!(st.coherence, Coherence::S);
    assert_eq!(st.directory.unwrap().state, DirState::Private(0b11));
}

#[test]
fn stream_store_invalidates() {
    let mut h = hier();
    h.load(0, T);
    h.stream_store(0, T);
    assert!(h.locate(T).is_absent());
    // uncached target: memory write only
    h.stream_store(0, T);
    assert_eq!(h.stats().memory_writes, 2);
}

#[test]
fn prefetch_fills_l2() {
    let mut h = hier();
    h.prefetch_fill(0, T);
    assert_eq!(h.locate(T).residency, vec![Residency::L2(0)]);
    assert_eq!(h.load(0, T), HitLevel::L2);
}

#[test]
fn fetch_uses_l1i() {
    let mut h = hier();
    h.fetch(2, T);
    assert_eq!(
        h.locate(T).residency,
        vec![Residency::L1i(2), Residency::L2(2)]
    );
    assert_eq!(h.demote(2, T), DemoteOutcome::Moved);
    assert_eq!(h.locate(T).residency, vec![Residency::Llc]);
}

#[test]
fn same_core_breakpoints() {
    let cfg = HierarchyConfig::default();
    let levels: Vec<_> = (0..=40).map(|n| same_core_level(&cfg, n)).collect();
    assert_eq!(steps(&levels), vec![12, 16, 31]);
    assert_eq!(levels[11], HitLevel::L1);
    assert_eq!(levels[12], HitLevel::L2);
    assert_eq!(levels[16], HitLevel::Llc);
    assert_eq!(levels[31], HitLevel::Memory);
}

#[test]
fn cross_core_breakpoints() {
    let cfg = HierarchyConfig::default();
    let levels: Vec<_> = (0..=40).map(|n| cross_core_level(&cfg, n)).collect();
    assert_eq!(steps(&levels), vec![25, 31]);
    assert_eq!(levels[24], HitLevel::L1);
    assert_eq!(levels[25], HitLevel::Llc);
    assert_eq!(levels[31], HitLevel::Memory);
}

#[test]
fn breakpoints_follow_geometry() {
    let mut cfg = HierarchyConfig::default();
    cfg.l2.ways = 8;
    cfg.l1d.ways = 6;
    cfg.llc.ways = 20;
    let levels: Vec<_> = (0..=40).map(|n| same_core_level(&cfg, n)).collect();
    assert_eq!(steps(&levels), vec![6, 8, 28]);
    let mut cfg = HierarchyConfig::default();
    cfg.directory.ways = 20;
    let levels: Vec<_> = (0..=40).map(|n| cross_core_level(&cfg, n)).collect();
    assert_eq!(steps(&levels)[0], 20);
}

#[test]
fn llc_recency_after_demote_and_private_hit() {
    let cfg = HierarchyConfig::default();
    let mut h = CacheHierarchy::new(cfg.clone());
    let others = congruent_addresses(&cfg, T, 5);
    h.load(0, T);
    h.demote(0, T);
    for pa in &others {
        h.load(0, *pa);
        h.demote(0, *pa);
    }
    assert_eq!(h.locate(T).llc_rank, Some(5));
    // served by the LLC: promoted
    assert_eq!(h.load(0, T), HitLevel::Llc);
    assert_eq!(h.locate(T).llc_rank, Some(0));
    for pa in &others {
        h.load(0, *pa);
        h.demote(0, *pa);
    }
    let before = h.locate(T).llc_rank;
    assert_eq!(before, Some(5));
    // served by L1: LLC order untouched
    assert_eq!(h.load(0, T), HitLevel::L1);
    assert_eq!(h.locate(T).llc_rank, before);
}

#[derive(Debug, Clone)]
enum Op {
    Load(usize, usize),
    Store(usize, usize),
    Demote(usize, usize),
    Flush(usize),
    Prefetch(usize, usize),
    Movnt(usize),
}

fn op() -> impl Strategy<Value = Op> {
    let core = 0usize..3;
    let line = 0usize..48;
    prop_oneof![
        4 => (core.clone(), line.clone()).prop_map(|(c, l)| Op::Load(c, l)),
        1 => (core.clone(), line.clone()).prop_map(|(c, l)| Op::Store(c, l)),
        2 => (core.clone(), line.clone()).prop_map(|(c, l)| Op::Demote(c, l)),
        1 => line.clone().prop_map(Op::Flush),
        1 => (core, line.clone()).prop_map(|(c, l)| Op::Prefetch(c, l)),
        1 => line.prop_map(Op::Movnt),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn invariants_hold_under_random_traffic(ops in prop::collection::vec(op(), 1..400)) {
        // small geometry so that every eviction path is exercised
        let cfg = HierarchyConfig {
            cores: 3,
            l1d: LevelGeometry::new(2, 2),
            l1i: LevelGeometry::new(2, 2),
            l2: LevelGeometry::new(4, 3),
            llc: LevelGeometry::new(4, 3),
            directory: LevelGeometry::new(4, 5),
        };
        let lines: Vec<u64> = (0..48u64).map(|i| 0x10_0000 + i * 0x40 * 3).collect();
        let mut h = CacheHierarchy::new(cfg);
        for o in ops {
            match o {
                Op::Load(c, l) => { h.load(c, lines[l]); }
                Op::Store(c, l) => { h.store(c, lines[l]); }
                Op::Demote(c, l) => {
                    let before = h.locate(lines[l]);
                    let moved = h.demote(c, lines[l]);
                    let held = before.residency.contains(&Residency::L2(c));
                    prop_assert_eq!(moved == DemoteOutcome::Moved, held);
                }
                Op::Flush(l) => {
                    h.flush(lines[l]);
                    prop_assert!(h.locate(lines[l]).is_absent());
                }
                Op::Prefetch(c, l) => h.prefetch_fill(c, lines[l]),
                Op::Movnt(l) => { h.stream_store(0, lines[l]); }
            }
            if let Err(e) = h.check_invariants() {
                prop_assert!(false, "{}", e);
            }
        }
    }

    #[test]
    fn single_core_load_never_creates_llc_copy(ls in prop::collection::vec(0u64..4096, 1..200)) {
        let mut h = hier();
        for l in &ls {
            let pa = l << 12;
            // fresh line on a single core with no eviction pressure
            if h.locate(pa).is_absent() {
                h.load(0, pa);
                prop_assert!(!h.locate(pa).in_llc());
            }
        }
    }
}
