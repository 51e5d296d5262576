use rustc_hash::FxHashSet;

use serde::{Deserialize, Serialize};

use super::geometry::{HierarchyConfig, LINE_SHIFT};
use super::set_assoc::SetAssoc;

/// Where a load was served from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HitLevel {
    L1,
    L2,
    Llc,
    RemotePrivate,
    Memory,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DemoteOutcome {
    Moved,
    Nop,
}

/// Private level holding a line on one core.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrivateLevel {
    L1,
    L2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "cache", content = "core", rename_all = "snake_case")]
pub enum Residency {
    L1d(usize),
    L1i(usize),
    L2(usize),
    Llc,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Coherence {
    M,
    E,
    S,
    I,
}

/// Directory entry state: a bitmask of cores with private copies, or a line
/// that has left every private cache.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DirState {
    Private(u64),
    #[default]
    Llc,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DirSnapshot {
    pub state: DirState,
    pub rank: usize,
}

/// Read-only view of one line across the hierarchy.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LineState {
    pub residency: Vec<Residency>,
    pub coherence: Coherence,
    pub llc_rank: Option<usize>,
    pub directory: Option<DirSnapshot>,
}

impl LineState {
    pub fn is_absent(&self) -> bool {
        self.residency.is_empty()
    }

    pub fn in_llc(&self) -> bool {
        self.residency.contains(&Residency::Llc)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheStats {
    pub writebacks: u64,
    pub memory_writes: u64,
    pub back_invalidations: u64,
}

/// Multi-core hierarchy: private L1d/L1i/L2 per core, a sliced
/// non-inclusive LLC and a sliced coherence directory.
#[derive(Debug, Clone)]
pub struct CacheHierarchy {
    config: HierarchyConfig,
    l1d: Vec<SetAssoc<()>>,
    l1i: Vec<SetAssoc<()>>,
    l2: Vec<SetAssoc<()>>,
    llc: Vec<SetAssoc<()>>,
    dir: Vec<SetAssoc<DirState>>,
    dirty: FxHashSet<u64>,
    stats: CacheStats,
}

fn bit(core: usize) -> u64 {
    1u64 << core
}

fn cores_in(mut mask: u64) -> impl Iterator<Item = usize> {
    std::iter::from_fn(move || {
        (mask != 0).then(|| {
            let c = mask.trailing_zeros() as usize;
            mask &= mask - 1;
            c
        })
    })
}

impl CacheHierarchy {
    pub fn new(config: HierarchyConfig) -> Self {
        let n = config.cores;
        fn per_core<V: Copy + Default>(n: usize, g: super::LevelGeometry) -> Vec<SetAssoc<V>> {
            (0..n).map(|_| SetAssoc::new(g.sets, g.ways)).collect()
        }
        CacheHierarchy {
            l1d: per_core(n, config.l1d),
            l1i: per_core(n, config.l1i),
            l2: per_core(n, config.l2),
            llc: per_core(n, config.llc),
            dir: per_core(n, config.directory),
            dirty: FxHashSet::default(),
            stats: CacheStats::default(),
            config,
        }
    }

    pub fn config(&self) -> &HierarchyConfig {
        &self.config
    }

    pub fn stats(&self) -> CacheStats {
        self.stats
    }

    fn slice(&self, line: u64) -> usize {
        self.config.slice_of(line << LINE_SHIFT)
    }

    /// Private level of `pa` on `core`, if any.
    pub fn private_level(&self, core: usize, pa: u64) -> Option<PrivateLevel> {
        let line = pa >> LINE_SHIFT;
        if self.l1d[core].contains(line) || self.l1i[core].contains(line) {
            Some(PrivateLevel::L1)
        } else if self.l2[core].contains(line) {
            Some(PrivateLevel::L2)
        } else {
            None
        }
    }

    pub fn any_cached(&self, pa: u64) -> bool {
        let line = pa >> LINE_SHIFT;
        let s = self.slice(line);
        self.llc[s].contains(line) || (0..self.config.cores).any(|c| self.l2[c].contains(line))
    }

    /// Level a load from `core` would hit, with no state change.
    pub fn peek_load(&self, core: usize, pa: u64) -> HitLevel {
        let line = pa >> LINE_SHIFT;
        if self.l1d[core].contains(line) {
            return HitLevel::L1;
        }
        if self.l2[core].contains(line) {
            return HitLevel::L2;
        }
        let s = self.slice(line);
        match self.dir[s].get(line) {
            Some(DirState::Private(mask)) if mask & !bit(core) != 0 => HitLevel::RemotePrivate,
            _ if self.llc[s].contains(line) => HitLevel::Llc,
            _ => HitLevel::Memory,
        }
    }

    pub fn load(&mut self, core: usize, pa: u64) -> HitLevel {
        self.access(core, pa >> LINE_SHIFT, false)
    }

    /// Instruction fetch path: fills L1i instead of L1d.
    pub fn fetch(&mut self, core: usize, pa: u64) -> HitLevel {
        self.access(core, pa >> LINE_SHIFT, true)
    }

    /// Store: a load for ownership, then the line is dirty in `core` only.
    pub fn store(&mut self, core: usize, pa: u64) -> HitLevel {
        let line = pa >> LINE_SHIFT;
        let level = self.access(core, line, false);
        let s = self.slice(line);
        if let Some(DirState::Private(mask)) = self.dir[s].get(line).copied() {
            for other in cores_in(mask & !bit(core)) {
                self.drop_private(other, line);
            }
            *self.dir[s].get_mut(line).expect("entry present") = DirState::Private(bit(core));
        }
        self.llc[s].remove(line);
        self.dirty.insert(line);
        level
    }

    fn access(&mut self, core: usize, line: u64, instr: bool) -> HitLevel {
        let l1 = if instr {
            &mut self.l1i[core]
        } else {
            &mut self.l1d[core]
        };
        if l1.touch(line) {
            return HitLevel::L1;
        }
        if self.l2[core].touch(line) {
            self.fill_l1(core, line, instr);
            return HitLevel::L2;
        }
        let s = self.slice(line);
        let remote = match self.dir[s].get(line) {
            Some(DirState::Private(mask)) => mask & !bit(core) != 0,
            _ => false,
        };
        let level = if remote {
            self.llc[s].touch(line);
            HitLevel::RemotePrivate
        } else if self.llc[s].touch(line) {
            HitLevel::Llc
        } else {
            HitLevel::Memory
        };
        self.dir_add_sharer(line, core);
        self.fill_l2(core, line);
        self.fill_l1(core, line, instr);
        if remote && !self.llc[s].contains(line) {
            // shared now: the LLC keeps a copy, installed after the
            // requester's own victims have settled
            self.llc_insert(line, false);
        }
        level
    }

    fn fill_l1(&mut self, core: usize, line: u64, instr: bool) {
        let l1 = if instr {
            &mut self.l1i[core]
        } else {
            &mut self.l1d[core]
        };
        if !l1.touch(line) {
            // L1 victims stay in L2
            l1.insert_mru(line, ());
        }
    }

    fn fill_l2(&mut self, core: usize, line: u64) {
        if self.l2[core].touch(line) {
            return;
        }
        if let Some((victim, ())) = self.l2[core].insert_mru(line, ()) {
            self.l2_victim(core, victim);
        }
    }

    fn l2_victim(&mut self, core: usize, victim: u64) {
        self.l1d[core].remove(victim);
        self.l1i[core].remove(victim);
        self.dir_remove_sharer(victim, core);
        let s = self.slice(victim);
        if !self.llc[s].contains(victim) {
            self.llc_insert(victim, false);
        }
    }

    /// Installs an absent line into its LLC set, at the LRU position when
    /// `lru` is set.
    fn llc_insert(&mut self, line: u64, lru: bool) {
        let s = self.slice(line);
        let victim = if lru {
            self.llc[s].insert_lru(line, ())
        } else {
            self.llc[s].insert_mru(line, ())
        };
        if let Some((v, ())) = victim {
            self.llc_victim(v);
        }
    }

    fn llc_victim(&mut self, line: u64) {
        let s = self.slice(line);
        match self.dir[s].get(line).copied() {
            Some(DirState::Llc) => {
                self.dir[s].remove(line);
                self.write_back(line);
            }
            Some(DirState::Private(mask)) if mask.count_ones() >= 2 => {
                // shared lines are kept inclusive
                for c in cores_in(mask) {
                    self.drop_private(c, line);
                    self.stats.back_invalidations += 1;
                }
                self.dir[s].remove(line);
                self.write_back(line);
            }
            // a single private owner keeps the up-to-date copy
            _ => {}
        }
    }

    fn write_back(&mut self, line: u64) {
        if self.dirty.remove(&line) {
            self.stats.writebacks += 1;
        }
    }

    fn drop_private(&mut self, core: usize, line: u64) {
        self.l1d[core].remove(line);
        self.l1i[core].remove(line);
        self.l2[core].remove(line);
    }

    fn dir_add_sharer(&mut self, line: u64, core: usize) {
        let s = self.slice(line);
        if let Some(state) = self.dir[s].get_mut(line) {
            *state = match *state {
                DirState::Private(mask) => DirState::Private(mask | bit(core)),
                DirState::Llc => DirState::Private(bit(core)),
            };
            self.dir[s].touch(line);
            return;
        }
        if let Some((victim, state)) = self.dir[s].insert_mru(line, DirState::Private(bit(core))) {
            self.dir_victim(victim, state);
        }
    }

    fn dir_victim(&mut self, line: u64, state: DirState) {
        if let DirState::Private(mask) = state {
            for c in cores_in(mask) {
                self.drop_private(c, line);
                self.stats.back_invalidations += 1;
            }
            let s = self.slice(line);
            if !self.llc[s].contains(line) {
                self.llc_insert(line, true);
            }
        }
    }

    /// Clears `core` from the line's sharer mask; the entry keeps its
    /// recency and falls back to the `Llc` state once no sharer remains.
    fn dir_remove_sharer(&mut self, line: u64, core: usize) {
        let s = self.slice(line);
        if let Some(state) = self.dir[s].get_mut(line) {
            if let DirState::Private(mask) = *state {
                let rest = mask & !bit(core);
                *state = if rest == 0 {
                    DirState::Llc
                } else {
                    DirState::Private(rest)
                };
            }
        }
    }

    /// Moves the line from `core`'s private caches to the LLC.
    pub fn demote(&mut self, core: usize, pa: u64) -> DemoteOutcome {
        let line = pa >> LINE_SHIFT;
        if !self.l2[core].contains(line) {
            return DemoteOutcome::Nop;
        }
        self.drop_private(core, line);
        self.dir_remove_sharer(line, core);
        let s = self.slice(line);
        if !self.llc[s].touch(line) {
            self.llc_insert(line, false);
        }
        DemoteOutcome::Moved
    }

    /// Removes the line everywhere. Returns whether any copy existed.
    pub fn flush(&mut self, pa: u64) -> bool {
        let line = pa >> LINE_SHIFT;
        let s = self.slice(line);
        let mut found = self.llc[s].remove(line).is_some();
        // private copies always have a directory entry naming their core
        if let Some(DirState::Private(mask)) = self.dir[s].remove(line) {
            for c in cores_in(mask) {
                found |= self.l2[c].contains(line);
                self.drop_private(c, line);
            }
        }
        self.write_back(line);
        found
    }

    /// Non-temporal store: drops every cached copy and writes memory.
    pub fn stream_store(&mut self, _core: usize, pa: u64) -> bool {
        let line = pa >> LINE_SHIFT;
        self.dirty.remove(&line);
        let found = self.flush(pa);
        self.stats.memory_writes += 1;
        found
    }

    /// Software prefetch into L2 only.
    pub fn prefetch_fill(&mut self, core: usize, pa: u64) {
        let line = pa >> LINE_SHIFT;
        if self.l2[core].contains(line) {
            return;
        }
        let s = self.slice(line);
        if let Some(DirState::Private(mask)) = self.dir[s].get(line) {
            if mask & !bit(core) != 0 && !self.llc[s].contains(line) {
                self.llc_insert(line, false);
            }
        }
        self.dir_add_sharer(line, core);
        self.fill_l2(core, line);
    }

    pub fn locate(&self, pa: u64) -> LineState {
        let line = pa >> LINE_SHIFT;
        let s = self.slice(line);
        let mut residency = Vec::new();
        let mut holders = 0;
        for c in 0..self.config.cores {
            if self.l1d[c].contains(line) {
                residency.push(Residency::L1d(c));
            }
            if self.l1i[c].contains(line) {
                residency.push(Residency::L1i(c));
            }
            if self.l2[c].contains(line) {
                residency.push(Residency::L2(c));
                holders += 1;
            }
        }
        let llc_rank = self.llc[s].rank(line);
        if llc_rank.is_some() {
            residency.push(Residency::Llc);
        }
        let coherence = if residency.is_empty() {
            Coherence::I
        } else if self.dirty.contains(&line) {
            Coherence::M
        } else if holders >= 2 {
            Coherence::S
        } else {
            Coherence::E
        };
        let directory = self.dir[s].rank(line).map(|rank| DirSnapshot {
            state: *self.dir[s].get(line).expect("ranked entry"),
            rank,
        });
        LineState {
            residency,
            coherence,
            llc_rank,
            directory,
        }
    }

    /// Structural invariants, for tests.
    pub fn check_invariants(&self) -> Result<(), String> {
        for c in 0..self.config.cores {
            for l1 in [&self.l1d[c], &self.l1i[c]] {
                for (line, _) in l1.iter() {
                    if !self.l2[c].contains(line) {
                        return Err(format!("line {line:#x} in L1 of core {c} but not L2"));
                    }
                }
            }
            for (line, _) in self.l2[c].iter() {
                let s = self.slice(line);
                match self.dir[s].get(line) {
                    Some(DirState::Private(mask)) if mask & bit(c) != 0 => {}
                    other => {
                        return Err(format!(
                            "line {line:#x} in L2 of core {c} with directory state {other:?}"
                        ))
                    }
                }
            }
        }
        for d in &self.dir {
            for (line, _) in d.iter() {
                if d.occupancy(line) > d.ways() {
                    return Err("directory set over capacity".into());
                }
            }
        }
        Ok(())
    }

    pub fn clear(&mut self) {
        for c in self
            .l1d
            .iter_mut()
            .chain(self.l1i.iter_mut())
            .chain(self.l2.iter_mut())
            .chain(self.llc.iter_mut())
        {
            c.clear();
        }
        for d in &mut self.dir {
            d.clear();
        }
        self.dirty.clear();
    }
}
