//! Eviction-set construction by group testing, LLC placement strategies, and
//! associativity recovery from reload-latency curves.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::exec::{ExecError, Instruction, LatencyContext, Machine, MachineConfig, Thread};
use crate::vm::{PageFlags, VirtualAddress, VmError, PAGE_SIZE};

mod recency;
mod reverse;
pub use recency::{recency_check, RecencyCheck};
pub use reverse::{
    detect_breakpoints, oracle_congruent, reverse_directory, reverse_llc, InferredGeometry,
    ReverseReport,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvictionLevel {
    L2,
    Llc,
    Directory,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Placement {
    /// A second physical core touches the line first, so the main core's
    /// access makes it shared and the LLC keeps a copy.
    HelperThread,
    /// Access, then demote on the same core.
    Cldemote,
}

impl std::str::FromStr for Placement {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "helper" | "helper-thread" => Ok(Placement::HelperThread),
            "demote" | "cldemote" => Ok(Placement::Cldemote),
            other => Err(format!("unknown placement `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvsetConfig {
    pub pool_size: usize,
    /// Cross-core handoff cost charged per helper-thread placement.
    pub helper_cost: u64,
    /// Repetitions per eviction test, decided by majority.
    pub vote_repeats: u32,
    pub reverse_iterations: u32,
    pub max_n: usize,
    /// Minimum rise in mean reload latency that counts as a step.
    pub breakpoint_jump: f64,
}

impl Default for EvsetConfig {
    fn default() -> Self {
        EvsetConfig {
            pool_size: 12288,
            helper_cost: 400,
            vote_repeats: 3,
            reverse_iterations: 1000,
            max_n: 40,
            breakpoint_jump: 8.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvictionSet {
    pub target: VirtualAddress,
    pub members: Vec<VirtualAddress>,
    pub level: EvictionLevel,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BuildStats {
    pub memory_ops: u64,
    pub simulated_cycles: u64,
    pub success: bool,
    pub cores_used: usize,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EvsetError {
    #[error("this placement needs two physical cores, the machine has one")]
    SingleCore,
    #[error("candidate set does not evict the target")]
    NotEvictionSet,
    #[error("reduction stalled with {0} members left")]
    ReductionStuck(usize),
    #[error("reduced set fails ground-truth congruence")]
    Unsound,
    #[error("evset access faulted at {0}")]
    Fault(VirtualAddress),
    #[error(transparent)]
    Exec(#[from] ExecError),
}

impl From<VmError> for EvsetError {
    fn from(e: VmError) -> Self {
        EvsetError::Exec(e.into())
    }
}

pub const TARGET_PAGE: VirtualAddress = VirtualAddress::new(0x5400_0000_0000);
pub const POOL_BASE: VirtualAddress = VirtualAddress::new(0x5500_0000_0000);
/// Line offset of the default target inside its page.
pub const TARGET_OFFSET: u64 = 0x340;

/// Attacker-side driver that counts every instruction it issues.
pub struct Attacker<'m> {
    pub machine: &'m mut Machine,
    pub main: Thread,
    pub helper: Option<Thread>,
    cfg: EvsetConfig,
    ops: u64,
    extra_cycles: u64,
    start_elapsed: u64,
    cores: BTreeSet<usize>,
}

impl<'m> Attacker<'m> {
    pub fn new(machine: &'m mut Machine, cfg: EvsetConfig) -> Self {
        let helper = (machine.config().hierarchy.cores > 1).then(|| Thread::user(1, 0));
        let start_elapsed = machine.elapsed();
        machine.set_context(LatencyContext::Characterize);
        Attacker {
            machine,
            main: Thread::user(0, 0),
            helper,
            cfg,
            ops: 0,
            extra_cycles: 0,
            start_elapsed,
            cores: BTreeSet::new(),
        }
    }

    pub fn stats(&self, success: bool) -> BuildStats {
        BuildStats {
            memory_ops: self.ops,
            simulated_cycles: self.machine.elapsed() - self.start_elapsed + self.extra_cycles,
            success,
            cores_used: self.cores.len(),
        }
    }

    fn exec(&mut self, thread: Thread, instr: Instruction) -> Result<u32, EvsetError> {
        self.ops += 1;
        self.cores.insert(thread.core);
        let r = self.machine.execute(thread, instr);
        match r.fault {
            Some(f) => Err(EvsetError::Fault(f.va)),
            None => Ok(r.latency),
        }
    }

    fn helper(&self) -> Result<Thread, EvsetError> {
        self.helper.ok_or(EvsetError::SingleCore)
    }

    /// Leaves `va` resident in the LLC.
    pub fn place(&mut self, va: VirtualAddress, placement: Placement) -> Result<(), EvsetError> {
        match placement {
            Placement::Cldemote => {
                self.exec(self.main, Instruction::load(va))?;
                self.exec(self.main, Instruction::cldemote(va))?;
            }
            Placement::HelperThread => {
                let helper = self.helper()?;
                self.exec(helper, Instruction::load(va))?;
                self.exec(self.main, Instruction::load(va))?;
                self.extra_cycles += self.cfg.helper_cost;
            }
        }
        Ok(())
    }

    fn threshold(&self, level: EvictionLevel) -> u32 {
        let c = &self.machine.profile().characterize;
        let mid = match level {
            EvictionLevel::Llc => (c.load_llc + c.load_memory) / 2.0,
            EvictionLevel::L2 | EvictionLevel::Directory => (c.load_l2 + c.load_llc) / 2.0,
        };
        mid as u32
    }

    fn trial(
        &mut self,
        target: VirtualAddress,
        members: &[VirtualAddress],
        level: EvictionLevel,
        placement: Placement,
    ) -> Result<bool, EvsetError> {
        self.exec(self.main, Instruction::clflush(target))?;
        for m in members {
            self.exec(self.main, Instruction::clflush(*m))?;
        }
        match level {
            EvictionLevel::Llc => {
                self.place(target, placement)?;
                for m in members {
                    self.place(*m, placement)?;
                }
            }
            EvictionLevel::L2 => {
                self.exec(self.main, Instruction::load(target))?;
                for m in members {
                    self.exec(self.main, Instruction::load(*m))?;
                }
            }
            EvictionLevel::Directory => {
                let evictor = self.helper()?;
                self.exec(self.main, Instruction::load(target))?;
                for m in members {
                    self.exec(evictor, Instruction::load(*m))?;
                }
            }
        }
        let t = self.exec(self.main, Instruction::load(target))?;
        Ok(t > self.threshold(level))
    }

    /// Timing-only eviction test, majority of `vote_repeats` trials.
    pub fn is_eviction_set(
        &mut self,
        target: VirtualAddress,
        members: &[VirtualAddress],
        level: EvictionLevel,
        placement: Placement,
    ) -> Result<bool, EvsetError> {
        if members.is_empty() {
            return Ok(false);
        }
        let repeats = self.cfg.vote_repeats.max(1);
        let need = repeats / 2 + 1;
        let (mut yes, mut no) = (0, 0);
        while yes < need && no < need {
            if self.trial(target, members, level, placement)? {
                yes += 1;
            } else {
                no += 1;
            }
        }
        Ok(yes >= need)
    }

    /// Group-testing reduction down to `ways` members.
    pub fn reduce(
        &mut self,
        target: VirtualAddress,
        candidates: Vec<VirtualAddress>,
        ways: usize,
        level: EvictionLevel,
        placement: Placement,
    ) -> Result<EvictionSet, EvsetError> {
        if !self.is_eviction_set(target, &candidates, level, placement)? {
            return Err(EvsetError::NotEvictionSet);
        }
        let mut set = candidates;
        while set.len() > ways {
            let groups = ways + 1;
            let n = set.len();
            let mut removed = false;
            for g in 0..groups {
                let (lo, hi) = (g * n / groups, (g + 1) * n / groups);
                if lo == hi {
                    continue;
                }
                let rest: Vec<VirtualAddress> =
                    set[..lo].iter().chain(&set[hi..]).copied().collect();
                if self.is_eviction_set(target, &rest, level, placement)? {
                    set = rest;
                    removed = true;
                    break;
                }
            }
            if !removed {
                return Err(EvsetError::ReductionStuck(set.len()));
            }
        }
        Ok(EvictionSet {
            target,
            members: set,
            level,
        })
    }
}

/// Maps `pool_size` fresh pages and returns one address per page with the
/// target's page offset, so bits 11:6 match and the rest is unknown.
pub fn generate_candidates(
    machine: &mut Machine,
    target: VirtualAddress,
    pool_size: usize,
) -> Result<Vec<VirtualAddress>, EvsetError> {
    if pool_size == 0 {
        return Ok(Vec::new());
    }
    machine.map_region(
        POOL_BASE,
        pool_size as u64 * PAGE_SIZE,
        PageFlags::user_rw(),
    )?;
    Ok((0..pool_size as u64)
        .map(|i| POOL_BASE.add(i * PAGE_SIZE + target.page_offset()))
        .collect())
}

/// Ground-truth congruence of every member with the target.
pub fn verify(machine: &Machine, set: &EvictionSet) -> bool {
    let cfg = machine.config().hierarchy.clone();
    let Ok(t) = machine.physical(set.target) else {
        return false;
    };
    set.members.iter().all(|m| match machine.physical(*m) {
        Ok(pa) => {
            let (a, b) = (cfg.coordinates(pa), cfg.coordinates(t));
            match set.level {
                EvictionLevel::L2 => {
                    (pa >> 6) % cfg.l2.sets as u64 == (t >> 6) % cfg.l2.sets as u64
                }
                _ => a.set == b.set && a.slice == b.slice,
            }
        }
        Err(_) => false,
    })
}

pub fn ways_for(config: &MachineConfig, level: EvictionLevel) -> usize {
    match level {
        EvictionLevel::L2 => config.hierarchy.l2.ways,
        EvictionLevel::Llc => config.hierarchy.llc.ways,
        EvictionLevel::Directory => config.hierarchy.directory.ways,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Construction {
    pub set: Option<EvictionSet>,
    pub stats: BuildStats,
    pub error: Option<String>,
}

/// Builds an LLC eviction set end to end on a fresh machine seeded with
/// `seed`: candidate pool, placement of every tested line, reduction, and a
/// ground-truth check of the result.
pub fn construct(
    config: &MachineConfig,
    evcfg: &EvsetConfig,
    placement: Placement,
    seed: u64,
) -> Result<Construction, EvsetError> {
    let mut machine = Machine::new(config.clone(), seed)?;
    if placement == Placement::HelperThread && config.hierarchy.cores < 2 {
        return Err(EvsetError::SingleCore);
    }
    machine.map_region(TARGET_PAGE, PAGE_SIZE, PageFlags::user_rw())?;
    let target = TARGET_PAGE.add(TARGET_OFFSET);
    let candidates = generate_candidates(&mut machine, target, evcfg.pool_size)?;
    let ways = ways_for(config, EvictionLevel::Llc);
    let mut attacker = Attacker::new(&mut machine, evcfg.clone());
    let result = attacker.reduce(target, candidates, ways, EvictionLevel::Llc, placement);
    let ok_stats = |a: &Attacker, s| a.stats(s);
    match result {
        Ok(set) => {
            let stats_ok = ok_stats(&attacker, true);
            drop(attacker);
            let sound = verify(&machine, &set);
            let stats = BuildStats {
                success: sound,
                ..stats_ok
            };
            Ok(Construction {
                error: (!sound).then(|| EvsetError::Unsound.to_string()),
                set: Some(set),
                stats,
            })
        }
        Err(e @ (EvsetError::NotEvictionSet | EvsetError::ReductionStuck(_))) => Ok(Construction {
            set: None,
            stats: attacker.stats(false),
            error: Some(e.to_string()),
        }),
        Err(e) => Err(e),
    }
}

/// Standalone placement on a machine, returning the cycles it cost.
pub fn place_in_llc(
    machine: &mut Machine,
    va: VirtualAddress,
    placement: Placement,
    helper_cost: u64,
) -> Result<u64, EvsetError> {
    let cfg = EvsetConfig {
        helper_cost,
        ..EvsetConfig::default()
    };
    let mut a = Attacker::new(machine, cfg);
    a.place(va, placement)?;
    Ok(a.stats(true).simulated_cycles)
}

#[cfg(test)]
mod tests;
