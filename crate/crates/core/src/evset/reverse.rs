use serde::{Deserialize, Serialize};

use super::{EvsetError, TARGET_OFFSET, TARGET_PAGE};
use crate::exec::{Instruction, LatencyContext, Machine, Thread};
use crate::vm::{PageFlags, VirtualAddress, PAGE_SIZE};

/// Where oracle-congruent pages get mapped.
pub const ORACLE_BASE: VirtualAddress = VirtualAddress::new(0x5600_0000_0000);

/// Maps `count` pages whose lines at the target's offset land in the target's
/// LLC slice and set. Uses physical knowledge, so it is a test fixture rather
/// than something an attacker could do.
pub fn oracle_congruent(
    machine: &mut Machine,
    target: VirtualAddress,
    count: usize,
) -> Result<Vec<VirtualAddress>, EvsetError> {
    let t = machine.physical(target)?;
    let geometry = machine.config().hierarchy.clone();
    let offset = target.page_offset();
    let mut out = Vec::with_capacity(count);
    for i in 0..count as u64 {
        let va = ORACLE_BASE.add(i * PAGE_SIZE);
        let frame = machine
            .space
            .frames()
            .alloc_where(|f| geometry.congruent((f << 12) | offset, t));
        machine.space.map_page_at(va, PageFlags::user_rw(), frame)?;
        out.push(va.add(offset));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct InferredGeometry {
    pub l1_ways: Option<usize>,
    pub l2_ways: Option<usize>,
    pub llc_ways: Option<usize>,
    pub directory_ways: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReverseReport {
    /// Mean reload latency of the target after `n` congruent accesses,
    /// indexed by `n` from zero.
    pub curve: Vec<f64>,
    pub breakpoints: Vec<usize>,
    pub inferred: InferredGeometry,
}

impl ReverseReport {
    pub fn conclusive(&self) -> bool {
        !self.breakpoints.is_empty()
    }
}

/// Every `n` whose mean exceeds the mean at `n - 1` by more than `jump`.
pub fn detect_breakpoints(curve: &[f64], jump: f64) -> Vec<usize> {
    curve
        .windows(2)
        .enumerate()
        .filter(|(_, w)| w[1] - w[0] > jump)
        .map(|(i, _)| i + 1)
        .collect()
}

fn sweep(
    machine: &mut Machine,
    owner: Thread,
    evictor: Thread,
    target: VirtualAddress,
    lines: &[VirtualAddress],
    iterations: u32,
) -> Vec<f64> {
    machine.set_context(LatencyContext::Characterize);
    let iterations = iterations.max(1);
    (0..=lines.len())
        .map(|n| {
            let mut total = 0u64;
            for _ in 0..iterations {
                machine.execute(owner, Instruction::clflush(target));
                for l in &lines[..n] {
                    machine.execute(owner, Instruction::clflush(*l));
                }
                machine.execute(owner, Instruction::load(target));
                for l in &lines[..n] {
                    machine.execute(evictor, Instruction::load(*l));
                }
                total += machine.measure(owner, Instruction::load(target)) as u64;
            }
            total as f64 / iterations as f64
        })
        .collect()
}

fn prepare(
    machine: &mut Machine,
    max_n: usize,
) -> Result<(VirtualAddress, Vec<VirtualAddress>), EvsetError> {
    if machine.physical(TARGET_PAGE).is_err() {
        machine.map_region(TARGET_PAGE, PAGE_SIZE, PageFlags::user_rw())?;
    }
    let target = TARGET_PAGE.add(TARGET_OFFSET);
    let lines = oracle_congruent(machine, target, max_n)?;
    Ok((target, lines))
}

/// Same-core sweep: steps mark the L1, L2 and combined L2+LLC capacity.
pub fn reverse_llc(
    machine: &mut Machine,
    max_n: usize,
    iterations: u32,
    jump: f64,
) -> Result<ReverseReport, EvsetError> {
    let (target, lines) = prepare(machine, max_n)?;
    let t = Thread::user(0, 0);
    let curve = sweep(machine, t, t, target, &lines, iterations);
    let breakpoints = detect_breakpoints(&curve, jump);
    let mut inferred = InferredGeometry::default();
    if let [l1, l2, l3, ..] = breakpoints[..] {
        inferred.l1_ways = Some(l1);
        inferred.l2_ways = Some(l2);
        inferred.llc_ways = Some(l3 - l2);
    }
    Ok(ReverseReport {
        curve,
        breakpoints,
        inferred,
    })
}

/// Cross-core sweep: the first step marks directory capacity.
pub fn reverse_directory(
    machine: &mut Machine,
    max_n: usize,
    iterations: u32,
    jump: f64,
) -> Result<ReverseReport, EvsetError> {
    if machine.config().hierarchy.cores < 2 {
        return Err(EvsetError::SingleCore);
    }
    let (target, lines) = prepare(machine, max_n)?;
    let curve = sweep(
        machine,
        Thread::user(0, 0),
        Thread::user(1, 0),
        target,
        &lines,
        iterations,
    );
    let breakpoints = detect_breakpoints(&curve, jump);
    let inferred = InferredGeometry {
        directory_ways: breakpoints.first().copied(),
        ..InferredGeometry::default()
    };
    Ok(ReverseReport {
        curve,
        breakpoints,
        inferred,
    })
}
