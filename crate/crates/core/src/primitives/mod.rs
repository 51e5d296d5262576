//! Timing probes built from single instructions, threshold calibration, the
//! sibling-thread attacker/victim loop and page-walk level probing.

use serde::{Deserialize, Serialize};

mod perm;

pub use crate::exec::ProbeKind;
use crate::exec::{
    run, Action, ExecError, ExecResult, Fault, Instruction, LatencyContext, Machine, MachineConfig,
    PrefetchHint, Program, SchedError, Thread,
};
use crate::vm::{Level, PageFlags, VirtualAddress, KERNEL_REGION_START};
pub use perm::{fault_stream, permission_table, walk_counters, PermRow};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PrimitiveError {
    #[error("hit and miss distributions overlap by {overlap:.4} (limit {limit})")]
    Calibration { overlap: f64, limit: f64 },
    #[error("probe faulted: {0:?}")]
    Fault(Fault),
    #[error("{0:?} has no hit/miss calibration")]
    Unsupported(ProbeKind),
    #[error(transparent)]
    Exec(#[from] ExecError),
    #[error(transparent)]
    Sched(#[from] SchedError),
}

impl ProbeKind {
    pub fn context(self) -> LatencyContext {
        match self {
            ProbeKind::DemoteTime => LatencyContext::TlbProbe,
            k => LatencyContext::Primitive(k),
        }
    }

    /// Whether a victim access makes the timed step slower.
    pub fn slow_when_accessed(self) -> bool {
        matches!(self, ProbeKind::FlushDemote | ProbeKind::FlushFlush)
    }

    pub(crate) fn timed(self, va: VirtualAddress) -> Instruction {
        match self {
            ProbeKind::FlushDemote | ProbeKind::DemoteTime => Instruction::cldemote(va),
            ProbeKind::FlushReload | ProbeKind::StreamReload => Instruction::load(va),
            ProbeKind::FlushFlush => Instruction::clflush(va),
        }
    }

    /// Instruction that returns the target to the not-accessed state.
    pub(crate) fn reset(self, va: VirtualAddress) -> Option<Instruction> {
        match self {
            ProbeKind::FlushDemote | ProbeKind::FlushReload | ProbeKind::FlushFlush => {
                Some(Instruction::clflush(va))
            }
            ProbeKind::StreamReload => Some(Instruction::movnt(va)),
            ProbeKind::DemoteTime => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Threshold {
    pub cycles: u32,
    pub hit_mean: f64,
    pub miss_mean: f64,
    pub slow_when_accessed: bool,
}

impl Threshold {
    /// Threshold halfway between two means.
    pub fn midpoint(kind: ProbeKind, hit_mean: f64, miss_mean: f64) -> Self {
        Threshold {
            cycles: ((hit_mean + miss_mean) / 2.0).floor() as u32,
            hit_mean,
            miss_mean,
            slow_when_accessed: kind.slow_when_accessed(),
        }
    }

    pub fn accessed(&self, latency: u32) -> bool {
        if self.slow_when_accessed {
            latency > self.cycles
        } else {
            latency <= self.cycles
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeOutcome {
    pub latency: u32,
    pub accessed: bool,
}

fn exec_checked(m: &mut Machine, t: Thread, i: Instruction) -> Result<ExecResult, PrimitiveError> {
    let r = m.execute(t, i);
    match r.fault {
        Some(f) => Err(PrimitiveError::Fault(f)),
        None => Ok(r),
    }
}

/// One probe round: the timed step followed by the reset step.
pub fn probe(
    machine: &mut Machine,
    attacker: Thread,
    kind: ProbeKind,
    target: VirtualAddress,
    threshold: &Threshold,
) -> Result<ProbeOutcome, PrimitiveError> {
    machine.set_context(kind.context());
    let latency = exec_checked(machine, attacker, kind.timed(target))?.latency;
    if let Some(reset) = kind.reset(target) {
        exec_checked(machine, attacker, reset)?;
    }
    Ok(ProbeOutcome {
        latency,
        accessed: threshold.accessed(latency),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchSample {
    pub round: u64,
    pub accessed: bool,
    pub cycles: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub threshold: Threshold,
    pub overlap: f64,
    pub samples: Vec<BenchSample>,
}

fn mean(xs: impl Iterator<Item = u32>) -> f64 {
    let (sum, n) = xs.fold((0u64, 0u64), |(s, n), x| (s + x as u64, n + 1));
    if n == 0 {
        0.0
    } else {
        sum as f64 / n as f64
    }
}

/// Samples the accessed and idle states `samples` times each, alternating,
/// and places the threshold at the midpoint of the two means.
pub fn calibrate(
    machine: &mut Machine,
    attacker: Thread,
    victim: Thread,
    kind: ProbeKind,
    target: VirtualAddress,
    samples: usize,
    overlap_limit: f64,
) -> Result<Calibration, PrimitiveError> {
    let reset = kind
        .reset(target)
        .ok_or(PrimitiveError::Unsupported(kind))?;
    machine.set_context(kind.context());
    let mut out = Vec::with_capacity(2 * samples);
    exec_checked(machine, attacker, reset)?;
    for round in 0..2 * samples as u64 {
        let accessed = round % 2 == 0;
        if accessed {
            exec_checked(machine, victim, Instruction::load(target))?;
        }
        let cycles = exec_checked(machine, attacker, kind.timed(target))?.latency;
        exec_checked(machine, attacker, reset)?;
        out.push(BenchSample {
            round,
            accessed,
            cycles,
        });
    }
    let hit = mean(out.iter().filter(|s| s.accessed).map(|s| s.cycles));
    let miss = mean(out.iter().filter(|s| !s.accessed).map(|s| s.cycles));
    let threshold = Threshold::midpoint(kind, hit, miss);
    let wrong = out
        .iter()
        .filter(|s| threshold.accessed(s.cycles) != s.accessed)
        .count();
    let overlap = wrong as f64 / out.len().max(1) as f64;
    let separated = if threshold.slow_when_accessed {
        hit > miss
    } else {
        hit < miss
    };
    if !separated || overlap > overlap_limit {
        return Err(PrimitiveError::Calibration {
            overlap: if separated { overlap } else { 1.0 },
            limit: overlap_limit,
        });
    }
    Ok(Calibration {
        threshold,
        overlap,
        samples: out,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Algorithm1Report {
    pub kind: ProbeKind,
    pub iterations: u64,
    pub accuracy: f64,
    pub hit_mean: f64,
    pub miss_mean: f64,
    pub samples: Vec<BenchSample>,
    pub detected: Vec<bool>,
}

struct Attacker {
    kind: ProbeKind,
    target: VirtualAddress,
    iterations: u64,
    i: u64,
    step: u8,
    latencies: Vec<u32>,
}

impl Program for Attacker {
    fn next(&mut self, _now: u64, last: Option<&ExecResult>) -> Action {
        loop {
            match self.step {
                0 => {
                    if self.i == self.iterations {
                        return Action::Done;
                    }
                    self.i += 1;
                    self.step = 1;
                    let reset = self.kind.reset(self.target).expect("resettable kind");
                    return Action::Exec(reset);
                }
                1 => {
                    self.step = 2;
                    return Action::Barrier("victim-turn");
                }
                2 => {
                    self.step = 3;
                    return Action::Barrier("victim-done");
                }
                3 => {
                    self.step = 4;
                    return Action::Exec(self.kind.timed(self.target));
                }
                _ => {
                    if let Some(r) = last {
                        self.latencies.push(r.latency);
                    }
                    self.step = 0;
                }
            }
        }
    }
}

struct Victim {
    target: VirtualAddress,
    iterations: u64,
    i: u64,
    step: u8,
}

impl Program for Victim {
    fn next(&mut self, _now: u64, _last: Option<&ExecResult>) -> Action {
        loop {
            match self.step {
                0 => {
                    if self.i == self.iterations {
                        return Action::Done;
                    }
                    self.i += 1;
                    self.step = 1;
                    return Action::Barrier("victim-turn");
                }
                1 => {
                    self.step = 2;
                    if self.i.is_multiple_of(2) {
                        return Action::Exec(Instruction::load(self.target));
                    }
                }
                _ => {
                    self.step = 0;
                    return Action::Barrier("victim-done");
                }
            }
        }
    }
}

/// Attacker and victim threads with a two-phase barrier per iteration; the
/// victim touches the target on even iterations only.
pub fn run_algorithm1(
    machine: &mut Machine,
    attacker: Thread,
    victim: Thread,
    kind: ProbeKind,
    target: VirtualAddress,
    iterations: u64,
    threshold: &Threshold,
) -> Result<Algorithm1Report, PrimitiveError> {
    if kind.reset(target).is_none() {
        return Err(PrimitiveError::Unsupported(kind));
    }
    machine.set_context(kind.context());
    let faults_before = machine.fault_count();
    let mut a = Attacker {
        kind,
        target,
        iterations,
        i: 0,
        step: 0,
        latencies: Vec::with_capacity(iterations as usize),
    };
    let mut v = Victim {
        target,
        iterations,
        i: 0,
        step: 0,
    };
    run(machine, vec![(attacker, &mut a), (victim, &mut v)], 0)?;
    if machine.fault_count() != faults_before {
        // the only faulting step is a reset on a read-only page
        return Err(PrimitiveError::Fault(Fault {
            va: target,
            kind: crate::exec::FaultKind::ReadOnly,
        }));
    }
    let mut samples = Vec::with_capacity(a.latencies.len());
    let mut detected = Vec::with_capacity(a.latencies.len());
    let mut correct = 0u64;
    for (idx, cycles) in a.latencies.iter().enumerate() {
        let round = idx as u64 + 1;
        let accessed = round.is_multiple_of(2);
        let guess = threshold.accessed(*cycles);
        if guess == accessed {
            correct += 1;
        }
        detected.push(guess);
        samples.push(BenchSample {
            round,
            accessed,
            cycles: *cycles,
        });
    }
    let hit_mean = mean(samples.iter().filter(|s| s.accessed).map(|s| s.cycles));
    let miss_mean = mean(samples.iter().filter(|s| !s.accessed).map(|s| s.cycles));
    Ok(Algorithm1Report {
        kind,
        iterations,
        accuracy: correct as f64 / iterations.max(1) as f64,
        hit_mean,
        miss_mean,
        samples,
        detected,
    })
}

/// Mean latency of `repeats` back-to-back `cldemote`s on one address.
pub fn demote_time(machine: &mut Machine, thread: Thread, va: VirtualAddress, repeats: u32) -> f64 {
    machine.set_context(LatencyContext::TlbProbe);
    let repeats = repeats.max(1);
    let total: u64 = (0..repeats)
        .map(|_| machine.measure(thread, Instruction::cldemote(va)) as u64)
        .sum();
    total as f64 / repeats as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PageLevelReport {
    pub levels: Vec<Level>,
    pub cldemote_means: Vec<f64>,
    pub prefetch_means: Vec<f64>,
}

impl PageLevelReport {
    pub fn cldemote_strictly_decreasing(&self) -> bool {
        self.cldemote_means.windows(2).all(|w| w[0] > w[1])
    }

    pub fn prefetch_spread(&self) -> f64 {
        let max = self.prefetch_means.iter().cloned().fold(f64::MIN, f64::max);
        let min = self.prefetch_means.iter().cloned().fold(f64::MAX, f64::min);
        max - min
    }
}

/// Five supervisor addresses whose walks stop at PGD, P4D, PUD, PMD and PT
/// respectively. Each lives under its own root entry.
pub fn page_level_addresses(machine: &mut Machine) -> Result<[VirtualAddress; 5], ExecError> {
    let mut out = [VirtualAddress::new(0); 5];
    for level in Level::ALL {
        let root = 0xa0 + level.index() as u64;
        let va = VirtualAddress::new((root << Level::Pgd.shift()) | 0x1234_5000);
        machine.space.reserve_path(va, level, false)?;
        out[level.index()] = va;
    }
    Ok(out)
}

/// Per-level `cldemote` and `prefetcht2` means, `repeats` each, without
/// flushing the TLB in between.
pub fn page_level_scan(
    machine: &mut Machine,
    thread: Thread,
    addresses: &[VirtualAddress; 5],
    repeats: u32,
) -> PageLevelReport {
    machine.set_context(LatencyContext::PageWalk);
    let repeats = repeats.max(1);
    let run_mean = |m: &mut Machine, i: Instruction| {
        (0..repeats)
            .map(|_| m.measure(thread, i) as u64)
            .sum::<u64>() as f64
            / repeats as f64
    };
    let mut cldemote_means = Vec::new();
    let mut prefetch_means = Vec::new();
    for va in addresses {
        cldemote_means.push(run_mean(machine, Instruction::cldemote(*va)));
    }
    for va in addresses {
        prefetch_means.push(run_mean(
            machine,
            Instruction::prefetch(PrefetchHint::T2, *va),
        ));
    }
    PageLevelReport {
        levels: Level::ALL.to_vec(),
        cldemote_means,
        prefetch_means,
    }
}

/// Mean `cldemote` latency per private residency state of a user line.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DemoteProfile {
    pub l1: f64,
    pub l2: f64,
    pub llc: f64,
    pub absent: f64,
}

pub fn characterize_cldemote(
    machine: &mut Machine,
    thread: Thread,
    va: VirtualAddress,
    samples: usize,
) -> Result<DemoteProfile, PrimitiveError> {
    machine.set_context(LatencyContext::Characterize);
    let demote = Instruction::cldemote(va);
    let mut sums = [0u64; 4];
    for _ in 0..samples {
        exec_checked(machine, thread, Instruction::load(va))?;
        sums[0] += machine.measure(thread, demote) as u64;
        // now in the LLC only
        sums[2] += machine.measure(thread, demote) as u64;
        exec_checked(machine, thread, Instruction::clflush(va))?;
        exec_checked(machine, thread, Instruction::prefetch(PrefetchHint::T2, va))?;
        sums[1] += machine.measure(thread, demote) as u64;
        exec_checked(machine, thread, Instruction::clflush(va))?;
        sums[3] += machine.measure(thread, demote) as u64;
    }
    let n = samples.max(1) as f64;
    Ok(DemoteProfile {
        l1: sums[0] as f64 / n,
        l2: sums[1] as f64 / n,
        llc: sums[2] as f64 / n,
        absent: sums[3] as f64 / n,
    })
}

/// A machine with the pages every probe experiment needs.
#[derive(Debug, Clone)]
pub struct Lab {
    pub machine: Machine,
    pub attacker: Thread,
    pub sibling: Thread,
    pub remote: Thread,
    /// Read-only shared page, as a victim library would map it.
    pub shared_ro: VirtualAddress,
    pub shared_rw: VirtualAddress,
    pub kernel_valid: VirtualAddress,
    pub kernel_invalid: VirtualAddress,
}

pub const SHARED_RO: VirtualAddress = VirtualAddress::new(0x7f12_3456_7000);
pub const SHARED_RW: VirtualAddress = VirtualAddress::new(0x7f12_3456_9000);

impl Lab {
    pub fn new(config: MachineConfig, seed: u64) -> Result<Self, PrimitiveError> {
        let mut machine = Machine::new(config, seed)?;
        machine.map_region(SHARED_RO, 4096, PageFlags::user_ro())?;
        machine.map_region(SHARED_RW, 4096, PageFlags::user_rw())?;
        // one mapped 2 MiB slot and an empty neighbour under the same PUD entry
        let kernel_valid = KERNEL_REGION_START.add(64 << 21);
        let kernel_invalid = KERNEL_REGION_START.add(200 << 21);
        machine.map_region(kernel_valid, 2 << 20, PageFlags::kernel())?;
        machine
            .space
            .reserve_path(kernel_invalid, Level::Pmd, false)
            .map_err(ExecError::from)?;
        let remote_core = if machine.config().hierarchy.cores > 1 {
            1
        } else {
            0
        };
        let sibling = if machine.config().threads_per_core > 1 {
            1
        } else {
            0
        };
        Ok(Lab {
            attacker: Thread::user(0, 0),
            sibling: Thread::user(0, sibling),
            remote: Thread::user(remote_core, 0),
            machine,
            shared_ro: SHARED_RO.add(0x240),
            shared_rw: SHARED_RW.add(0x240),
            kernel_valid,
            kernel_invalid,
        })
    }

    /// The natural target page for a probe kind.
    pub fn target_for(&self, kind: ProbeKind) -> VirtualAddress {
        match kind {
            ProbeKind::StreamReload => self.shared_rw,
            ProbeKind::DemoteTime => self.kernel_valid,
            _ => self.shared_ro,
        }
    }
}
