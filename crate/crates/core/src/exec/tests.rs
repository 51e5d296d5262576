use super::*;
use crate::cache::Residency;
use crate::vm::{Level, MemType, PageFlags, VirtualAddress};

const USER: VirtualAddress = VirtualAddress::new(0x7f00_0000_0000);
const KVALID: VirtualAddress = VirtualAddress::new(0xffff_ffff_b320_0000);
const KINVALID: VirtualAddress = VirtualAddress::new(0xffff_ffff_b800_0000);
const T0: Thread = Thread::user(0, 0);

fn machine(sigma: f64) -> Machine {
    let mut cfg = MachineConfig::default();
    cfg.latency.noise_sigma = sigma;
    let mut m = Machine::new(cfg, 11).unwrap();
    m.map_region(USER, 4096, PageFlags::user_rw()).unwrap();
    m.map_region(KVALID, 2 << 20, PageFlags::kernel()).unwrap();
    m.space.reserve_path(KINVALID, Level::Pmd, false).unwrap();
    m
}

#[test]
fn cldemote_latency_tracks_residency() {
    let mut m = machine(0.0);
    m.execute(T0, Instruction::load(USER));
    assert_eq!(m.measure(T0, Instruction::cldemote(USER)), 210);
    assert_eq!(m.locate(USER).unwrap().residency, vec![Residency::Llc]);
    assert_eq!(m.measure(T0, Instruction::cldemote(USER)), 132);
    m.execute(T0, Instruction::prefetch(PrefetchHint::T2, USER));
    assert_eq!(m.measure(T0, Instruction::cldemote(USER)), 200);
}

#[test]
fn table_latencies_for_kernel_page() {
    let mut m = machine(0.0);
    m.set_context(LatencyContext::TlbProbe);
    m.flush_tlbs(0);
    assert_eq!(m.measure(T0, Instruction::cldemote(KVALID)), 136);
    assert_eq!(m.measure(T0, Instruction::cldemote(KVALID)), 114);
    m.flush_tlbs(0);
    assert_eq!(m.measure(T0, Instruction::cldemote(KINVALID)), 149);
    assert_eq!(m.measure(T0, Instruction::cldemote(KINVALID)), 138);
}

#[test]
fn faults_only_for_architectural_accesses() {
    let mut m = machine(6.0);
    let r = m.execute(T0, Instruction::load(KINVALID));
    assert_eq!(r.fault.unwrap().kind, FaultKind::NotPresent);
    let r = m.execute(T0, Instruction::load(KVALID));
    assert_eq!(r.fault.unwrap().kind, FaultKind::Supervisor);
    for va in [KINVALID, KVALID, USER.add(1 << 30)] {
        assert!(m.execute(T0, Instruction::cldemote(va)).fault.is_none());
        let pf = Instruction::prefetch(PrefetchHint::T0, va);
        assert!(m.execute(T0, pf).fault.is_none());
    }
    // a privileged thread may load kernel memory
    assert!(m
        .execute(Thread::kernel(0), Instruction::load(KVALID))
        .fault
        .is_none());
}

#[test]
fn movnt_needs_a_writable_page() {
    let mut m = machine(0.0);
    let ro = VirtualAddress::new(0x7f00_0010_0000);
    m.map_region(ro, 4096, PageFlags::user_ro()).unwrap();
    let r = m.execute(T0, Instruction::movnt(ro));
    assert_eq!(r.fault.unwrap().kind, FaultKind::ReadOnly);
    m.execute(T0, Instruction::load(USER));
    assert!(m.execute(T0, Instruction::movnt(USER)).fault.is_none());
    assert!(m.locate(USER).unwrap().is_absent());
}

#[test]
fn demote_and_prefetch_leave_accessed_bit_alone() {
    let mut m = machine(0.0);
    let page = VirtualAddress::new(0x7f00_0020_0000);
    let flags = PageFlags {
        accessed: false,
        ..PageFlags::user_rw()
    };
    m.map_region(page, 4096, flags).unwrap();
    m.execute(T0, Instruction::cldemote(page));
    m.execute(T0, Instruction::prefetch(PrefetchHint::T2, page));
    assert!(!m.space.lookup(page).unwrap().flags.accessed);
    m.execute(T0, Instruction::load(page));
    assert!(m.space.lookup(page).unwrap().flags.accessed);
}

#[test]
fn uncacheable_prefetch_still_fills_tlb() {
    let mut m = machine(0.0);
    let uc = VirtualAddress::new(0x7f00_0030_0000);
    let flags = PageFlags {
        memtype: MemType::Uncacheable,
        ..PageFlags::user_rw()
    };
    m.map_region(uc, 4096, flags).unwrap();
    m.execute(T0, Instruction::prefetch(PrefetchHint::T0, uc));
    assert!(m.locate(uc).unwrap().is_absent());
    assert!(m.tlb(0).load_tlb.contains(&uc.page_number()));
}

#[test]
fn invalid_address_counters() {
    let mut m = machine(6.0);
    for _ in 0..100_000 {
        m.execute(T0, Instruction::cldemote(KINVALID));
        m.execute(T0, Instruction::prefetch(PrefetchHint::T2, KINVALID));
    }
    let c = m.counters();
    assert_eq!(c.dtlb_store_walk_completed, 200_000);
    assert_eq!(c.dtlb_load_walk_completed, 1);
    assert_eq!(m.fault_count(), 0);
}

#[test]
fn no_memory_ops_no_counts() {
    let m = machine(6.0);
    assert_eq!(m.counters(), PerfCounters::default());
}

#[test]
fn privileged_only_freezes_state() {
    let mut cfg = MachineConfig::default();
    cfg.countermeasures.privileged_only = true;
    let mut m = Machine::new(cfg, 3).unwrap();
    m.map_region(USER, 4096, PageFlags::user_rw()).unwrap();
    m.execute(T0, Instruction::load(USER));
    let before = m.locate(USER);
    let counters = m.counters();
    let lat: Vec<u32> = (0..10)
        .map(|_| m.measure(T0, Instruction::cldemote(USER)))
        .collect();
    assert!(lat.iter().all(|l| *l == 132));
    assert_eq!(m.locate(USER), before);
    assert_eq!(m.counters(), counters);
    // the kernel itself still demotes
    assert_eq!(
        m.execute(Thread::kernel(0), Instruction::cldemote(USER))
            .demoted,
        Some(crate::cache::DemoteOutcome::Moved)
    );
}

#[test]
fn noise_injection_only_hits_cldemote() {
    let mut cfg = MachineConfig::default();
    cfg.latency.noise_sigma = 0.0;
    cfg.countermeasures.noise_injection = 50;
    let mut m = Machine::new(cfg, 3).unwrap();
    m.map_region(USER, 4096, PageFlags::user_rw()).unwrap();
    let demotes: Vec<u32> = (0..200)
        .map(|_| m.measure(T0, Instruction::cldemote(USER)))
        .collect();
    assert!(demotes.iter().all(|l| (132..=182).contains(l)));
    assert!(demotes.iter().any(|l| *l != 132));
    m.execute(T0, Instruction::load(USER));
    assert_eq!(m.measure(T0, Instruction::load(USER)), 58);
}

#[test]
fn flush_demote_separation() {
    // hit 208 vs miss 121 at sigma 6: the midpoint splits them essentially always
    let mut m = machine(6.0);
    m.set_context(LatencyContext::Primitive(ProbeKind::FlushDemote));
    let mut wrong = 0;
    for _ in 0..10_000 {
        m.execute(T0, Instruction::load(USER));
        let hit = m.measure(T0, Instruction::cldemote(USER));
        m.execute(T0, Instruction::clflush(USER));
        let miss = m.measure(T0, Instruction::cldemote(USER));
        if hit <= miss {
            wrong += 1;
        }
    }
    assert_eq!(wrong, 0);
}

#[test]
fn identical_seeds_identical_results() {
    let run = || {
        let mut m = machine(6.0);
        (0..1000)
            .map(|i| {
                let va = if i % 3 == 0 { KINVALID } else { USER };
                m.execute(T0, Instruction::cldemote(va))
            })
            .collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

#[test]
fn rejects_bad_threads() {
    let m = machine(0.0);
    assert!(m.thread(0, 1).is_ok());
    assert!(m.thread(0, 2).is_err());
    assert!(m.thread(12, 0).is_err());
}
