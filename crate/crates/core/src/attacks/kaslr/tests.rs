use super::*;
use crate::vm::PAGE_SIZE;

fn means_with_run(start: usize, len: usize, low: f64, high: f64) -> Vec<f64> {
    (0..SLOTS)
        .map(|s| {
            if (start..start + len).contains(&s) {
                low
            } else {
                high
            }
        })
        .collect()
}

#[test]
fn layout_arithmetic() {
    let l = KaslrLayout::new(409, 22).unwrap();
    assert_eq!(l.base().canonical(), 0xffff_ffff_b320_0000);
    assert!(l.occupied(409) && l.occupied(430));
    assert!(!l.occupied(408) && !l.occupied(431));
    assert_eq!(l.choices(), 491);
    assert!(KaslrLayout::new(490, 22).is_ok());
    assert_eq!(
        KaslrLayout::new(491, 22).unwrap_err(),
        KaslrError::TooLarge(22)
    );
}

#[test]
fn randomize_is_seeded_and_bounded() {
    assert_eq!(
        kaslr_randomize(22, 7).unwrap(),
        kaslr_randomize(22, 7).unwrap()
    );
    assert_eq!(kaslr_randomize(512, 3).unwrap().start_slot, 0);
    assert!(kaslr_randomize(513, 3).is_err());
    let starts: std::collections::BTreeSet<usize> = (0..400)
        .map(|s| kaslr_randomize(22, s).unwrap().start_slot)
        .collect();
    assert!(starts.iter().all(|s| *s <= 490));
    assert!(starts.len() > 250);
}

#[test]
fn install_maps_supervisor_accessed_pages() {
    let mut m = Machine::new(MachineConfig::default(), 1).unwrap();
    let l = KaslrLayout::new(100, 2).unwrap();
    l.install(&mut m).unwrap();
    let last = l.base().add(2 * SLOT_SIZE - PAGE_SIZE);
    let pte = m.space.lookup(last).unwrap();
    assert!(pte.flags.present && !pte.flags.user && pte.flags.accessed);
    assert!(m.space.lookup(l.base().add(2 * SLOT_SIZE)).is_none());
}

#[test]
fn threshold_is_table_midpoint() {
    assert_eq!(slot_threshold(&LatencyProfile::default()), 131);
}

#[test]
fn locate_picks_longest_low_run() {
    let m = means_with_run(409, 22, 114.0, 149.0);
    assert_eq!(
        kaslr_locate(&m, 131).unwrap().canonical(),
        0xffff_ffff_b320_0000
    );
    let m = means_with_run(0, 22, 114.0, 149.0);
    assert_eq!(kaslr_locate(&m, 131).unwrap(), KERNEL_REGION_START);
    let mut m = means_with_run(300, 22, 114.0, 149.0);
    m[10] = 100.0;
    assert_eq!(
        kaslr_locate(&m, 131).unwrap(),
        KaslrLayout::slot_address(300)
    );
    let m = vec![149.0; SLOTS];
    assert_eq!(
        kaslr_locate(&m, 131).unwrap_err(),
        KaslrError::NotFound(131)
    );
    assert_eq!(
        kaslr_locate(&m[..5], 131).unwrap_err(),
        KaslrError::SlotCount(5)
    );
}

#[test]
fn scan_separates_slots_without_faults() {
    let mut m = Machine::new(MachineConfig::default(), 2).unwrap();
    let l = kaslr_randomize(22, 2).unwrap();
    l.install(&mut m).unwrap();
    let scan = kaslr_scan(&mut m, Thread::user(0, 0), 100);
    assert_eq!(scan.probes, 51_200);
    assert_eq!(scan.faults, 0);
    for (slot, mean) in scan.slot_means.iter().enumerate() {
        if l.occupied(slot) {
            assert!((mean - 114.0).abs() < 3.0, "slot {slot}: {mean}");
        } else {
            assert!(*mean > 131.0 && *mean < 152.0, "slot {slot}: {mean}");
        }
    }
    let ms = m.profile().cycles_to_seconds(scan.cycles as f64) * 1e3;
    assert!((2.0..=4.0).contains(&ms), "{ms}");
    assert_eq!(kaslr_locate(&scan.slot_means, 131).unwrap(), l.base());
}

#[test]
fn noiseless_evaluation_is_exact() {
    let mut cfg = MachineConfig::default();
    cfg.latency.noise_sigma = 0.0;
    let e = kaslr_evaluate(&cfg, 22, 20, 4, 10, 8).unwrap();
    assert_eq!(e.correct, 20);
    assert_eq!(e.accuracy, 1.0);
    assert_eq!(e.faults, 0);
}

#[test]
fn privileged_only_defeats_scan() {
    let mut cfg = MachineConfig::default();
    cfg.countermeasures.privileged_only = true;
    let e = kaslr_evaluate(&cfg, 22, 10, 2, 10, 9).unwrap();
    assert_eq!(e.correct, 0);
}
