use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::exec::{
    ExecError, Instruction, LatencyContext, LatencyProfile, Machine, MachineConfig, Thread,
};
use crate::rng::{child_seed, stream, Stream};
use crate::vm::{MemType, PageFlags, PermClass, VirtualAddress, KERNEL_REGION_START};

pub const SLOT_SIZE: u64 = 2 << 20;
pub const SLOTS: usize = 512;
pub const DEFAULT_KERNEL_SLOTS: usize = 22;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum KaslrError {
    #[error("kernel of {0} slots does not fit in {SLOTS} slots")]
    TooLarge(usize),
    #[error("no slot reads below {0} cycles")]
    NotFound(u32),
    #[error("expected {SLOTS} slot latencies, got {0}")]
    SlotCount(usize),
    #[error(transparent)]
    Exec(#[from] ExecError),
}

/// Where the kernel image sits among the 2 MiB slots of the kernel text
/// region.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KaslrLayout {
    pub start_slot: usize,
    pub kernel_slots: usize,
}

impl KaslrLayout {
    pub fn new(start_slot: usize, kernel_slots: usize) -> Result<Self, KaslrError> {
        if kernel_slots == 0 || start_slot + kernel_slots > SLOTS {
            return Err(KaslrError::TooLarge(kernel_slots));
        }
        Ok(KaslrLayout {
            start_slot,
            kernel_slots,
        })
    }

    pub fn slot_address(slot: usize) -> VirtualAddress {
        KERNEL_REGION_START.add(slot as u64 * SLOT_SIZE)
    }

    pub fn base(&self) -> VirtualAddress {
        Self::slot_address(self.start_slot)
    }

    pub fn occupied(&self, slot: usize) -> bool {
        (self.start_slot..self.start_slot + self.kernel_slots).contains(&slot)
    }

    /// Number of possible start slots.
    pub fn choices(&self) -> usize {
        SLOTS - self.kernel_slots + 1
    }

    /// Maps every page of the image as present, supervisor-only, accessed.
    pub fn install(&self, machine: &mut Machine) -> Result<(), KaslrError> {
        machine.map_region(
            self.base(),
            self.kernel_slots as u64 * SLOT_SIZE,
            PageFlags::kernel(),
        )?;
        Ok(())
    }
}

/// Uniform start slot among those that keep the image inside the region.
pub fn kaslr_randomize(kernel_slots: usize, seed: u64) -> Result<KaslrLayout, KaslrError> {
    if kernel_slots == 0 || kernel_slots > SLOTS {
        return Err(KaslrError::TooLarge(kernel_slots));
    }
    let start = stream(seed, Stream::Layout).random_range(0..=SLOTS - kernel_slots);
    KaslrLayout::new(start, kernel_slots)
}

/// Midpoint between a mapped kernel page's warm `cldemote` time and an
/// unmapped one's cold time.
pub fn slot_threshold(profile: &LatencyProfile) -> u32 {
    let class = |present| PermClass {
        present,
        user: false,
        dirty: true,
        no_execute: true,
        accessed: true,
        memtype: MemType::WriteBack,
    };
    let valid = profile.tlb_row(&class(true)).map(|r| r.cldemote.hit);
    let invalid = profile.tlb_row(&class(false)).map(|r| r.cldemote.miss);
    match (valid, invalid) {
        (Some(v), Some(i)) => ((v + i) / 2.0).floor() as u32,
        _ => profile.characterize.cldemote_other.floor() as u32,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KaslrScan {
    /// Mean `cldemote` latency at the first address of each slot.
    pub slot_means: Vec<f64>,
    pub probes: u64,
    /// Sum of all probe latencies.
    pub cycles: u64,
    pub faults: u64,
}

/// Times `repeats` back-to-back `cldemote`s on every slot.
pub fn kaslr_scan(machine: &mut Machine, thread: Thread, repeats: u32) -> KaslrScan {
    machine.set_context(LatencyContext::TlbProbe);
    let repeats = repeats.max(1);
    let faults = machine.fault_count();
    let mut cycles = 0u64;
    let slot_means = (0..SLOTS)
        .map(|slot| {
            let va = KaslrLayout::slot_address(slot);
            let sum: u64 = (0..repeats)
                .map(|_| machine.measure(thread, Instruction::cldemote(va)) as u64)
                .sum();
            cycles += sum;
            sum as f64 / repeats as f64
        })
        .collect();
    KaslrScan {
        slot_means,
        probes: SLOTS as u64 * repeats as u64,
        cycles,
        faults: machine.fault_count() - faults,
    }
}

/// Base of the longest run of slots reading below `threshold`.
pub fn kaslr_locate(slot_means: &[f64], threshold: u32) -> Result<VirtualAddress, KaslrError> {
    if slot_means.len() != SLOTS {
        return Err(KaslrError::SlotCount(slot_means.len()));
    }
    let mut best: Option<(usize, usize)> = None;
    let mut run_start = None;
    for (i, &m) in slot_means.iter().chain([f64::INFINITY].iter()).enumerate() {
        match (m < threshold as f64, run_start) {
            (true, None) => run_start = Some(i),
            (false, Some(s)) => {
                if best.is_none_or(|(_, len)| i - s > len) {
                    best = Some((s, i - s));
                }
                run_start = None;
            }
            _ => {}
        }
    }
    best.map(|(s, _)| KaslrLayout::slot_address(s))
        .ok_or(KaslrError::NotFound(threshold))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KaslrEvaluation {
    pub trials: u64,
    pub correct: u64,
    pub accuracy: f64,
    pub threshold: u32,
    pub mean_scan_cycles: f64,
    pub mean_scan_ms: f64,
    pub faults: u64,
    pub clock_ghz: f64,
}

/// Runs `trials` scans. The kernel is re-randomized on a fresh machine
/// `reboots` times, evenly spread over the trials.
pub fn kaslr_evaluate(
    machine_config: &MachineConfig,
    kernel_slots: usize,
    trials: u64,
    reboots: u64,
    repeats: u32,
    seed: u64,
) -> Result<KaslrEvaluation, KaslrError> {
    let threshold = slot_threshold(&machine_config.latency);
    let per_boot = trials.div_ceil(reboots.max(1)).max(1);
    let mut correct = 0;
    let mut cycles = 0u64;
    let mut faults = 0;
    let mut done = 0;
    let mut boot = 0;
    while done < trials {
        let s = child_seed(seed, boot);
        let layout = kaslr_randomize(kernel_slots, s)?;
        let mut machine = Machine::new(machine_config.clone(), s)?;
        layout.install(&mut machine)?;
        let thread = Thread::user(0, 0);
        for _ in 0..per_boot.min(trials - done) {
            let scan = kaslr_scan(&mut machine, thread, repeats);
            cycles += scan.cycles;
            faults += scan.faults;
            if kaslr_locate(&scan.slot_means, threshold).ok() == Some(layout.base()) {
                correct += 1;
            }
            done += 1;
        }
        boot += 1;
    }
    let mean_scan_cycles = cycles as f64 / trials.max(1) as f64;
    Ok(KaslrEvaluation {
        trials,
        correct,
        accuracy: correct as f64 / trials.max(1) as f64,
        threshold,
        mean_scan_cycles,
        mean_scan_ms: machine_config.latency.cycles_to_seconds(mean_scan_cycles) * 1e3,
        faults,
        clock_ghz: machine_config.latency.clock_ghz,
    })
}

#[cfg(test)]
mod tests;
