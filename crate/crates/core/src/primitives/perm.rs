//! Permission-class timing, walk counters and fault freedom of the
//! non-architectural probes.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::PrimitiveError;
use crate::exec::{
    HitMiss, Instruction, LatencyContext, Machine, PerfCounters, PrefetchHint, Thread,
};
use crate::rng::{stream, Stream};
use crate::vm::{PageFlags, PermClass, VirtualAddress, KERNEL_REGION_START};

const USER_ROWS: VirtualAddress = VirtualAddress::new(0x6000_0000_0000);
/// Kernel rows sit high in the region, clear of any kernel image.
const KERNEL_ROWS: u64 = 0x3000_0000;
const ROW_STRIDE: u64 = 2 << 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PermRow {
    pub class: PermClass,
    pub address: VirtualAddress,
    pub cldemote: HitMiss,
    pub prefetch: HitMiss,
    pub expected_cldemote: HitMiss,
    pub expected_prefetch: HitMiss,
}

impl PermRow {
    /// Largest deviation of any measured mean from its table value.
    pub fn max_error(&self) -> f64 {
        [
            self.cldemote.hit - self.expected_cldemote.hit,
            self.cldemote.miss - self.expected_cldemote.miss,
            self.prefetch.hit - self.expected_prefetch.hit,
            self.prefetch.miss - self.expected_prefetch.miss,
        ]
        .iter()
        .fold(0.0, |m, d| m.max(d.abs()))
    }
}

fn mean_of(machine: &mut Machine, thread: Thread, instr: Instruction, n: u32, cold: bool) -> f64 {
    let n = n.max(1);
    let mut sum = 0u64;
    if !cold {
        machine.execute(thread, instr);
    }
    for _ in 0..n {
        if cold {
            machine.flush_tlbs(thread.core);
        }
        sum += machine.measure(thread, instr) as u64;
    }
    sum as f64 / n as f64
}

/// Maps one page per configured permission row and measures `cldemote` and
/// `prefetcht2` with a warm TLB ("hit") and after a TLB flush ("miss").
pub fn permission_table(
    machine: &mut Machine,
    thread: Thread,
    samples: u32,
) -> Result<Vec<PermRow>, PrimitiveError> {
    let rows = machine.profile().tlb_probe.clone();
    machine.set_context(LatencyContext::TlbProbe);
    let mut out = Vec::with_capacity(rows.len());
    for (i, row) in rows.iter().enumerate() {
        let offset = i as u64 * ROW_STRIDE;
        let address = if row.user {
            USER_ROWS.add(offset)
        } else {
            KERNEL_REGION_START.add(KERNEL_ROWS + offset)
        };
        let flags = PageFlags {
            present: row.present,
            writable: true,
            user: row.user,
            dirty: row.dirty,
            no_execute: row.no_execute,
            accessed: row.accessed,
            memtype: row.memtype,
        };
        machine.map_region(address, 4096, flags)?;
        let demote = Instruction::cldemote(address);
        let prefetch = Instruction::prefetch(PrefetchHint::T2, address);
        let cldemote = HitMiss::new(
            mean_of(machine, thread, demote, samples, false),
            mean_of(machine, thread, demote, samples, true),
        );
        let prefetch = HitMiss::new(
            mean_of(machine, thread, prefetch, samples, false),
            mean_of(machine, thread, prefetch, samples, true),
        );
        out.push(PermRow {
            class: row.class(),
            address,
            cldemote,
            prefetch,
            expected_cldemote: row.cldemote,
            expected_prefetch: row.prefetch,
        });
    }
    Ok(out)
}

/// Counter deltas after `n` back-to-back executions of `instr`.
pub fn walk_counters(
    machine: &mut Machine,
    thread: Thread,
    instr: Instruction,
    n: u64,
) -> PerfCounters {
    let before = machine.counters();
    for _ in 0..n {
        machine.execute(thread, instr);
    }
    let after = machine.counters();
    PerfCounters {
        dtlb_load_walk_completed: after.dtlb_load_walk_completed - before.dtlb_load_walk_completed,
        dtlb_store_walk_completed: after.dtlb_store_walk_completed
            - before.dtlb_store_walk_completed,
    }
}

/// Issues `n` randomly chosen `cldemote`/`prefetch` operations over the given
/// targets and returns the number of faults raised.
pub fn fault_stream(
    machine: &mut Machine,
    thread: Thread,
    targets: &[VirtualAddress],
    n: u64,
    seed: u64,
) -> u64 {
    let mut rng = stream(seed, Stream::Workload);
    let before = machine.fault_count();
    for _ in 0..n {
        let va = targets[rng.random_range(0..targets.len())];
        let instr = if rng.random_bool(0.5) {
            Instruction::cldemote(va)
        } else {
            Instruction::prefetch(PrefetchHint::T0, va)
        };
        machine.execute(thread, instr);
    }
    machine.fault_count() - before
}
