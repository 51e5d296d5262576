use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::instr::{InstrKind, Instruction};
use super::latency::{LatencyContext, LatencyProfile, NoiseModel, ProbeKind, ProfileError};
use crate::cache::{
    CacheHierarchy, DemoteOutcome, GeometryError, HierarchyConfig, HitLevel, LineState,
    PrivateLevel,
};
use crate::rng::{stream, Stream};
use crate::vm::{
    AddressSpace, CounterEvent, Events, PageFlags, TlbConfig, TlbState, TranslationKind,
    TranslationOutcome, VirtualAddress, VmError, WalkDepth,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Countermeasures {
    /// Amplitude of uniform jitter added to every `cldemote`; 0 disables it.
    pub noise_injection: u32,
    /// Turns unprivileged `cldemote` into a fixed-cost no-op.
    pub privileged_only: bool,
    pub privileged_nop_latency: u32,
}

impl Default for Countermeasures {
    fn default() -> Self {
        Countermeasures {
            noise_injection: 0,
            privileged_only: false,
            privileged_nop_latency: 132,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MachineConfig {
    pub hierarchy: HierarchyConfig,
    pub tlb: TlbConfig,
    pub latency: LatencyProfile,
    pub countermeasures: Countermeasures,
    /// Logical threads sharing each physical core.
    pub threads_per_core: usize,
}

impl Default for MachineConfig {
    fn default() -> Self {
        MachineConfig {
            hierarchy: HierarchyConfig::default(),
            tlb: TlbConfig::default(),
            latency: LatencyProfile::default(),
            countermeasures: Countermeasures::default(),
            threads_per_core: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ExecError {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Profile(#[from] ProfileError),
    #[error(transparent)]
    Vm(#[from] VmError),
    #[error("threads_per_core must be at least 1")]
    Threads,
    #[error("walk ladder must be non-increasing from PGD to PT")]
    Ladder,
    #[error("no logical thread {sibling} on core {core}")]
    NoSuchThread { core: usize, sibling: usize },
    #[error("{0} is not mapped")]
    Unmapped(VirtualAddress),
}

impl MachineConfig {
    pub fn validate(&self) -> Result<(), ExecError> {
        self.hierarchy.validate()?;
        self.latency.validate()?;
        if self.threads_per_core == 0 {
            return Err(ExecError::Threads);
        }
        if self.tlb.walk_ladder.windows(2).any(|w| w[0] < w[1]) {
            return Err(ExecError::Ladder);
        }
        Ok(())
    }
}

/// A logical thread: physical core, SMT sibling and privilege.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Thread {
    pub core: usize,
    pub sibling: usize,
    pub privileged: bool,
}

impl Thread {
    pub const fn user(core: usize, sibling: usize) -> Self {
        Thread {
            core,
            sibling,
            privileged: false,
        }
    }

    pub const fn kernel(core: usize) -> Self {
        Thread {
            core,
            sibling: 0,
            privileged: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultKind {
    NotPresent,
    Supervisor,
    ReadOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fault {
    pub va: VirtualAddress,
    pub kind: FaultKind,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExecResult {
    pub latency: u32,
    pub fault: Option<Fault>,
    pub events: Events,
    pub level: Option<HitLevel>,
    pub demoted: Option<DemoteOutcome>,
    pub tlb_hit: Option<bool>,
}

impl ExecResult {
    fn plain(latency: u32) -> Self {
        ExecResult {
            latency,
            fault: None,
            events: Events::new(),
            level: None,
            demoted: None,
            tlb_hit: None,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PerfCounters {
    pub dtlb_load_walk_completed: u64,
    pub dtlb_store_walk_completed: u64,
}

impl PerfCounters {
    fn record(&mut self, events: &[CounterEvent]) {
        for e in events {
            match e {
                CounterEvent::DtlbLoadWalkCompleted => self.dtlb_load_walk_completed += 1,
                CounterEvent::DtlbStoreWalkCompleted => self.dtlb_store_walk_completed += 1,
            }
        }
    }
}

/// A whole simulated package: page tables, per-core TLBs, the cache
/// hierarchy, counters and the timing model.
#[derive(Debug, Clone)]
pub struct Machine {
    config: MachineConfig,
    pub space: AddressSpace,
    pub caches: CacheHierarchy,
    tlbs: Vec<TlbState>,
    counters: PerfCounters,
    noise: NoiseModel,
    noise_rng: ChaCha8Rng,
    cm_rng: ChaCha8Rng,
    context: LatencyContext,
    elapsed: u64,
    faults: u64,
}

impl Machine {
    pub fn new(config: MachineConfig, seed: u64) -> Result<Self, ExecError> {
        config.validate()?;
        let cores = config.hierarchy.cores;
        Ok(Machine {
            space: AddressSpace::new(seed),
            caches: CacheHierarchy::new(config.hierarchy.clone()),
            tlbs: (0..cores)
                .map(|_| TlbState::new(config.tlb.clone()))
                .collect(),
            counters: PerfCounters::default(),
            noise: NoiseModel::new(config.latency.noise_sigma),
            noise_rng: stream(seed, Stream::Noise),
            cm_rng: stream(seed, Stream::Countermeasure),
            context: LatencyContext::Characterize,
            elapsed: 0,
            faults: 0,
            config,
        })
    }

    pub fn config(&self) -> &MachineConfig {
        &self.config
    }

    pub fn profile(&self) -> &LatencyProfile {
        &self.config.latency
    }

    pub fn context(&self) -> LatencyContext {
        self.context
    }

    pub fn set_context(&mut self, context: LatencyContext) {
        self.context = context;
    }

    pub fn thread(&self, core: usize, sibling: usize) -> Result<Thread, ExecError> {
        if core >= self.config.hierarchy.cores || sibling >= self.config.threads_per_core {
            return Err(ExecError::NoSuchThread { core, sibling });
        }
        Ok(Thread::user(core, sibling))
    }

    pub fn counters(&self) -> PerfCounters {
        self.counters
    }

    /// Sum of latencies of every instruction executed so far.
    pub fn elapsed(&self) -> u64 {
        self.elapsed
    }

    pub fn fault_count(&self) -> u64 {
        self.faults
    }

    pub fn tlb(&self, core: usize) -> &TlbState {
        &self.tlbs[core]
    }

    pub fn flush_tlbs(&mut self, core: usize) {
        self.tlbs[core].flush();
    }

    pub fn map_region(
        &mut self,
        va: VirtualAddress,
        length: u64,
        flags: PageFlags,
    ) -> Result<(), ExecError> {
        self.space.map_region(va, length, flags)?;
        Ok(())
    }

    pub fn physical(&self, va: VirtualAddress) -> Result<u64, ExecError> {
        self.space.resolve(va).ok_or(ExecError::Unmapped(va))
    }

    pub fn locate(&self, va: VirtualAddress) -> Option<LineState> {
        self.space.resolve(va).map(|pa| self.caches.locate(pa))
    }

    fn noisy(&mut self, mean: f64) -> u32 {
        self.noise.sample(mean, &mut self.noise_rng)
    }

    fn load_mean(&self, level: HitLevel) -> f64 {
        let c = &self.config.latency.characterize;
        let primitive = match self.context {
            LatencyContext::Primitive(k @ (ProbeKind::FlushReload | ProbeKind::StreamReload)) => {
                self.config.latency.primitive.get(k)
            }
            _ => None,
        };
        if let Some(hm) = primitive {
            return hm.pick(level != HitLevel::Memory);
        }
        match level {
            HitLevel::L1 => c.load_l1,
            HitLevel::L2 => c.load_l2,
            HitLevel::Llc => c.load_llc,
            HitLevel::RemotePrivate => c.load_remote,
            HitLevel::Memory => c.load_memory,
        }
    }

    /// Nominal (noise-free) delay from issue until the instruction's cache
    /// effect lands. Only fills take time to land; everything else acts at
    /// issue.
    pub fn effect_delay(&self, thread: Thread, instr: &Instruction) -> u64 {
        match (instr.kind, instr.operand) {
            (InstrKind::Load | InstrKind::Store, Some(va)) => match self.space.resolve(va) {
                Some(pa) => self.load_mean(self.caches.peek_load(thread.core, pa)) as u64,
                None => 0,
            },
            (InstrKind::Prefetch(_), Some(_)) => self.config.latency.characterize.prefetch as u64,
            _ => 0,
        }
    }

    /// Executes an instruction whose nominal effect delay was fixed at issue.
    /// A load that missed at issue keeps its miss latency even if a fill from
    /// another thread landed in between, and vice versa.
    pub fn execute_issued(
        &mut self,
        thread: Thread,
        instr: Instruction,
        issue_delay: u64,
    ) -> ExecResult {
        let landing_delay = self.effect_delay(thread, &instr);
        let mut result = self.execute(thread, instr);
        let access = matches!(instr.kind, InstrKind::Load | InstrKind::Store);
        if access && result.fault.is_none() && landing_delay != issue_delay {
            let latency = self.noisy(issue_delay as f64);
            self.elapsed = self.elapsed - result.latency as u64 + latency as u64;
            result.latency = latency;
        }
        result
    }

    /// Executes one instruction with serializing semantics and returns its
    /// sampled latency.
    pub fn measure(&mut self, thread: Thread, instr: Instruction) -> u32 {
        self.execute(thread, instr).latency
    }

    pub fn execute(&mut self, thread: Thread, instr: Instruction) -> ExecResult {
        let result = match (instr.kind, instr.operand) {
            (InstrKind::Fence, _) | (_, None) => {
                let mean = self.config.latency.characterize.fence;
                ExecResult::plain(self.noisy(mean))
            }
            (InstrKind::Load, Some(va)) => self.exec_access(thread, va, false),
            (InstrKind::Store, Some(va)) => self.exec_access(thread, va, true),
            (InstrKind::Clflush, Some(va)) => self.exec_clflush(thread, va),
            (InstrKind::Cldemote, Some(va)) => self.exec_cldemote(thread, va),
            (InstrKind::Prefetch(_), Some(va)) => self.exec_prefetch(thread, va),
            (InstrKind::Movnt, Some(va)) => self.exec_movnt(thread, va),
        };
        self.counters.record(&result.events);
        self.elapsed += result.latency as u64;
        if result.fault.is_some() {
            self.faults += 1;
        }
        result
    }

    fn translate(
        &mut self,
        thread: Thread,
        kind: TranslationKind,
        va: VirtualAddress,
    ) -> TranslationOutcome {
        self.tlbs[thread.core].translate(&self.space, kind, va)
    }

    fn fault(&mut self, t: TranslationOutcome, va: VirtualAddress, kind: FaultKind) -> ExecResult {
        let mean = self.config.latency.characterize.load_memory;
        ExecResult {
            latency: self.noisy(mean),
            fault: Some(Fault { va, kind }),
            events: t.events,
            level: None,
            demoted: None,
            tlb_hit: Some(t.tlb_hit),
        }
    }

    fn permission_fault(thread: Thread, t: &TranslationOutcome, write: bool) -> Option<FaultKind> {
        if !t.backed {
            Some(FaultKind::NotPresent)
        } else if !thread.privileged && !t.class.user {
            Some(FaultKind::Supervisor)
        } else if write && !t.writable {
            Some(FaultKind::ReadOnly)
        } else {
            None
        }
    }

    fn exec_access(&mut self, thread: Thread, va: VirtualAddress, write: bool) -> ExecResult {
        let kind = if write {
            TranslationKind::Store
        } else {
            TranslationKind::Load
        };
        let t = self.translate(thread, kind, va);
        if let Some(f) = Self::permission_fault(thread, &t, write) {
            return self.fault(t, va, f);
        }
        self.space.mark_accessed(va, write);
        let pa = t.physical(va).expect("backed translation has a frame");
        let level = if !t.class.memtype.cacheable() {
            HitLevel::Memory
        } else if write {
            self.caches.store(thread.core, pa)
        } else {
            self.caches.load(thread.core, pa)
        };
        let mean = self.load_mean(level);
        ExecResult {
            latency: self.noisy(mean),
            fault: None,
            events: t.events,
            level: Some(level),
            demoted: None,
            tlb_hit: Some(t.tlb_hit),
        }
    }

    fn exec_clflush(&mut self, thread: Thread, va: VirtualAddress) -> ExecResult {
        let t = self.translate(thread, TranslationKind::Load, va);
        let cached = match t.physical(va) {
            Some(pa) if t.backed => self.caches.flush(pa),
            _ => false,
        };
        let mean = match self.context {
            LatencyContext::Primitive(ProbeKind::FlushFlush) => {
                self.config.latency.primitive.flush_flush.pick(cached)
            }
            _ => {
                let c = &self.config.latency.characterize;
                if cached {
                    c.clflush_cached
                } else {
                    c.clflush_absent
                }
            }
        };
        ExecResult {
            latency: self.noisy(mean),
            fault: None,
            events: t.events,
            level: None,
            demoted: None,
            tlb_hit: Some(t.tlb_hit),
        }
    }

    /// TLB-probe tables use the "hit" column unless the walk began at the root.
    fn warm(t: &TranslationOutcome) -> bool {
        t.tlb_hit || t.walk_depth != WalkDepth::FromPgd
    }

    fn exec_cldemote(&mut self, thread: Thread, va: VirtualAddress) -> ExecResult {
        let cm = &self.config.countermeasures;
        if cm.privileged_only && !thread.privileged {
            return ExecResult::plain(cm.privileged_nop_latency);
        }
        let t = self.translate(thread, TranslationKind::Store, va);
        let pa = t.physical(va).filter(|_| t.backed);
        let before = pa.and_then(|pa| self.caches.private_level(thread.core, pa));
        let demoted = match pa {
            Some(pa) if t.class.memtype.cacheable() => Some(self.caches.demote(thread.core, pa)),
            _ => None,
        };
        let p = &self.config.latency;
        let c = &p.characterize;
        let by_level = match before {
            Some(PrivateLevel::L1) => c.cldemote_l1,
            Some(PrivateLevel::L2) => c.cldemote_l2,
            None => c.cldemote_other,
        };
        let mean = match self.context {
            LatencyContext::Characterize => by_level,
            LatencyContext::Primitive(ProbeKind::FlushDemote) => {
                p.primitive.flush_demote.pick(before.is_some())
            }
            LatencyContext::Primitive(_) => by_level,
            LatencyContext::TlbProbe => match p.tlb_row(&t.class) {
                Some(row) => row.cldemote.pick(Self::warm(&t)),
                None => by_level,
            },
            LatencyContext::PageWalk => {
                if t.tlb_hit {
                    self.pagewalk_hit(&t)
                } else {
                    self.config.tlb.walk_cost(t.walk_depth) as f64
                }
            }
        };
        let mut latency = self.noisy(mean);
        let amp = self.config.countermeasures.noise_injection;
        if amp > 0 {
            latency += self.cm_rng.random_range(0..=amp);
        }
        ExecResult {
            latency,
            fault: None,
            events: t.events,
            level: None,
            demoted,
            tlb_hit: Some(t.tlb_hit),
        }
    }

    fn pagewalk_hit(&self, t: &TranslationOutcome) -> f64 {
        let pw = &self.config.latency.page_walk;
        if t.backed {
            pw.tlb_hit_backed
        } else {
            pw.tlb_hit_unbacked
        }
    }

    fn exec_prefetch(&mut self, thread: Thread, va: VirtualAddress) -> ExecResult {
        let t = self.translate(thread, TranslationKind::Load, va);
        let allowed = t.backed && (thread.privileged || t.class.user);
        if allowed && t.class.memtype.cacheable() {
            let pa = t.physical(va).expect("backed translation has a frame");
            self.caches.prefetch_fill(thread.core, pa);
        }
        let p = &self.config.latency;
        let mean = match self.context {
            LatencyContext::TlbProbe => match p.tlb_row(&t.class) {
                Some(row) => row.prefetch.pick(Self::warm(&t)),
                None => p.characterize.prefetch,
            },
            LatencyContext::PageWalk => {
                if t.tlb_hit {
                    self.pagewalk_hit(&t)
                } else {
                    self.config.tlb.walk_cost(t.walk_depth) as f64
                }
            }
            _ => p.characterize.prefetch,
        };
        ExecResult {
            latency: self.noisy(mean),
            fault: None,
            events: t.events,
            level: None,
            demoted: None,
            tlb_hit: Some(t.tlb_hit),
        }
    }

    fn exec_movnt(&mut self, thread: Thread, va: VirtualAddress) -> ExecResult {
        let t = self.translate(thread, TranslationKind::Store, va);
        if let Some(f) = Self::permission_fault(thread, &t, true) {
            return self.fault(t, va, f);
        }
        self.space.mark_accessed(va, true);
        let pa = t.physical(va).expect("backed translation has a frame");
        self.caches.stream_store(thread.core, pa);
        let mean = self.config.latency.characterize.movnt;
        ExecResult {
            latency: self.noisy(mean),
            fault: None,
            events: t.events,
            level: None,
            demoted: None,
            tlb_hit: Some(t.tlb_hit),
        }
    }
}
