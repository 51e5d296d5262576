use std::hash::Hash;

use rustc_hash::FxHashMap;
use serde::{Deserialize, Serialize};
use smallvec::{smallvec, SmallVec};

use super::addr::{Level, VirtualAddress};
use super::table::{AddressSpace, MemType, Walk};

const NIL: usize = usize::MAX;

#[derive(Debug, Clone)]
struct Node<K, V> {
    key: K,
    value: V,
    prev: usize,
    next: usize,
}

/// Small fully associative LRU map: a hash index over a doubly linked
/// recency list stored in a vector.
#[derive(Debug, Clone)]
pub struct LruMap<K, V> {
    capacity: usize,
    index: FxHashMap<K, usize>,
    nodes: Vec<Node<K, V>>,
    free: Vec<usize>,
    head: usize,
    tail: usize,
}

impl<K: Hash + Eq + Copy, V> LruMap<K, V> {
    pub fn new(capacity: usize) -> Self {
        LruMap {
            capacity,
            index: FxHashMap::default(),
            nodes: Vec::with_capacity(capacity),
            free: Vec::new(),
            head: NIL,
            tail: NIL,
        }
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    fn unlink(&mut self, i: usize) {
        let (prev, next) = (self.nodes[i].prev, self.nodes[i].next);
        match prev {
            NIL => self.head = next,
            p => self.nodes[p].next = next,
        }
        match next {
            NIL => self.tail = prev,
            n => self.nodes[n].prev = prev,
        }
    }

    fn push_front(&mut self, i: usize) {
        self.nodes[i].prev = NIL;
        self.nodes[i].next = self.head;
        match self.head {
            NIL => self.tail = i,
            h => self.nodes[h].prev = i,
        }
        self.head = i;
    }

    pub fn contains(&self, key: &K) -> bool {
        self.index.contains_key(key)
    }

    /// Looks up `key` and promotes it on a hit.
    pub fn touch(&mut self, key: &K) -> Option<&V> {
        let i = *self.index.get(key)?;
        if self.head != i {
            self.unlink(i);
            self.push_front(i);
        }
        Some(&self.nodes[i].value)
    }

    pub fn peek(&self, key: &K) -> Option<&V> {
        self.index.get(key).map(|&i| &self.nodes[i].value)
    }

    /// Inserts or replaces at MRU; returns the evicted LRU entry, if any.
    pub fn insert(&mut self, key: K, value: V) -> Option<(K, V)> {
        if self.capacity == 0 {
            return None;
        }
        if let Some(&i) = self.index.get(&key) {
            self.nodes[i].value = value;
            self.unlink(i);
            self.push_front(i);
            return None;
        }
        let mut evicted = None;
        let node = Node {
            key,
            value,
            prev: NIL,
            next: NIL,
        };
        let i = if self.index.len() == self.capacity {
            let lru = self.tail;
            self.unlink(lru);
            let old = std::mem::replace(&mut self.nodes[lru], node);
            self.index.remove(&old.key);
            evicted = Some((old.key, old.value));
            lru
        } else if let Some(i) = self.free.pop() {
            self.nodes[i] = node;
            i
        } else {
            self.nodes.push(node);
            self.nodes.len() - 1
        };
        self.index.insert(key, i);
        self.push_front(i);
        evicted
    }

    pub fn remove(&mut self, key: &K) -> Option<V>
    where
        V: Clone,
    {
        let i = self.index.remove(key)?;
        self.unlink(i);
        self.free.push(i);
        Some(self.nodes[i].value.clone())
    }

    pub fn clear(&mut self) {
        self.index.clear();
        self.nodes.clear();
        self.free.clear();
        self.head = NIL;
        self.tail = NIL;
    }

    /// Keys from most to least recently used.
    pub fn keys(&self) -> Vec<K> {
        let mut out = Vec::with_capacity(self.len());
        let mut i = self.head;
        while i != NIL {
            out.push(self.nodes[i].key);
            i = self.nodes[i].next;
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TranslationKind {
    Load,
    Store,
}

/// Level the walker started from after consulting the paging-structure caches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WalkDepth {
    None,
    FromPgd,
    FromP4d,
    FromPud,
    FromPmd,
    FromPt,
}

impl WalkDepth {
    pub fn from_level(level: Level) -> Self {
        match level {
            Level::Pgd => WalkDepth::FromPgd,
            Level::P4d => WalkDepth::FromP4d,
            Level::Pud => WalkDepth::FromPud,
            Level::Pmd => WalkDepth::FromPmd,
            Level::Pt => WalkDepth::FromPt,
        }
    }

    pub fn level(self) -> Option<Level> {
        match self {
            WalkDepth::None => None,
            WalkDepth::FromPgd => Some(Level::Pgd),
            WalkDepth::FromP4d => Some(Level::P4d),
            WalkDepth::FromPud => Some(Level::Pud),
            WalkDepth::FromPmd => Some(Level::Pmd),
            WalkDepth::FromPt => Some(Level::Pt),
        }
    }
}

/// Counter events raised by one translation; at most two walks.
pub type Events = SmallVec<[CounterEvent; 2]>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CounterEvent {
    DtlbLoadWalkCompleted,
    DtlbStoreWalkCompleted,
}

impl CounterEvent {
    fn walk(kind: TranslationKind) -> Self {
        match kind {
            TranslationKind::Load => CounterEvent::DtlbLoadWalkCompleted,
            TranslationKind::Store => CounterEvent::DtlbStoreWalkCompleted,
        }
    }
}

/// Effective permission view of a translation, as timing tables key it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PermClass {
    pub present: bool,
    pub user: bool,
    pub dirty: bool,
    pub no_execute: bool,
    pub accessed: bool,
    pub memtype: MemType,
}

impl PermClass {
    pub fn of_walk(walk: &Walk) -> Self {
        let user = walk.user_path();
        match walk.leaf {
            Some(leaf) => PermClass {
                present: leaf.flags.present,
                user,
                dirty: leaf.flags.dirty,
                no_execute: leaf.flags.no_execute,
                accessed: leaf.flags.accessed,
                memtype: leaf.flags.memtype,
            },
            None => PermClass {
                present: false,
                user,
                dirty: true,
                no_execute: true,
                accessed: true,
                memtype: MemType::WriteBack,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TlbEntry {
    pub frame: Option<u64>,
    pub backed: bool,
    pub class: PermClass,
    pub writable: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TlbConfig {
    pub load_entries: usize,
    pub store_entries: usize,
    pub psc_entries: usize,
    /// Walk cost by start level, PGD first.
    pub walk_ladder: [u32; 5],
}

impl Default for TlbConfig {
    fn default() -> Self {
        TlbConfig {
            load_entries: 64,
            store_entries: 64,
            psc_entries: 16,
            walk_ladder: [137, 131, 125, 119, 113],
        }
    }
}

impl TlbConfig {
    pub fn walk_cost(&self, depth: WalkDepth) -> u32 {
        match depth.level() {
            None => 0,
            Some(level) => self.walk_ladder[level.index()],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TranslationOutcome {
    pub kind: TranslationKind,
    pub tlb_hit: bool,
    /// Start level of the first walk; `None` on a TLB hit.
    pub walk_depth: WalkDepth,
    pub walks_performed: u32,
    pub frame: Option<u64>,
    pub backed: bool,
    pub writable: bool,
    pub class: PermClass,
    pub latency_contrib: u32,
    pub events: Events,
}

impl TranslationOutcome {
    pub fn physical(&self, va: VirtualAddress) -> Option<u64> {
        self.frame.map(|f| (f << 12) | va.page_offset())
    }
}

/// Paging-structure caches exist for the four non-leaf levels.
const PSC_LEVELS: [Level; 4] = [Level::Pgd, Level::P4d, Level::Pud, Level::Pmd];

/// Split data TLBs and per-level paging-structure caches of one physical core.
#[derive(Debug, Clone)]
pub struct TlbState {
    config: TlbConfig,
    pub load_tlb: LruMap<u64, TlbEntry>,
    pub store_tlb: LruMap<u64, TlbEntry>,
    psc: [LruMap<u64, ()>; 4],
}

impl TlbState {
    pub fn new(config: TlbConfig) -> Self {
        let psc = std::array::from_fn(|_| LruMap::new(config.psc_entries));
        TlbState {
            load_tlb: LruMap::new(config.load_entries),
            store_tlb: LruMap::new(config.store_entries),
            psc,
            config,
        }
    }

    pub fn config(&self) -> &TlbConfig {
        &self.config
    }

    pub fn flush(&mut self) {
        self.load_tlb.clear();
        self.store_tlb.clear();
        for p in &mut self.psc {
            p.clear();
        }
    }

    /// Start level a walk for `va` would use right now, without side effects.
    pub fn peek_depth(&self, va: VirtualAddress) -> WalkDepth {
        for (i, level) in PSC_LEVELS.iter().enumerate().rev() {
            if self.psc[i].contains(&va.prefix(*level)) {
                return WalkDepth::from_level(Level::ALL[i + 1]);
            }
        }
        WalkDepth::FromPgd
    }

    pub fn psc_holds(&self, va: VirtualAddress, level: Level) -> bool {
        PSC_LEVELS
            .iter()
            .position(|l| *l == level)
            .is_some_and(|i| self.psc[i].contains(&va.prefix(level)))
    }

    fn psc_depth(&mut self, va: VirtualAddress) -> WalkDepth {
        for (i, level) in PSC_LEVELS.iter().enumerate().rev() {
            if self.psc[i].touch(&va.prefix(*level)).is_some() {
                return WalkDepth::from_level(Level::ALL[i + 1]);
            }
        }
        WalkDepth::FromPgd
    }

    fn fill_psc(&mut self, va: VirtualAddress, walk: &Walk) {
        for step in walk.steps() {
            if step.level == Level::Pt || !step.present || !step.accessed {
                break;
            }
            let i = step.level.index();
            self.psc[i].insert(va.prefix(step.level), ());
        }
    }

    fn tlb(&mut self, kind: TranslationKind) -> &mut LruMap<u64, TlbEntry> {
        match kind {
            TranslationKind::Load => &mut self.load_tlb,
            TranslationKind::Store => &mut self.store_tlb,
        }
    }

    /// Translates `va` through the `kind` TLB, walking on a miss.
    pub fn translate(
        &mut self,
        space: &AddressSpace,
        kind: TranslationKind,
        va: VirtualAddress,
    ) -> TranslationOutcome {
        let page = va.page_number();
        if let Some(entry) = self.tlb(kind).touch(&page).copied() {
            return TranslationOutcome {
                kind,
                tlb_hit: true,
                walk_depth: WalkDepth::None,
                walks_performed: 0,
                frame: entry.frame,
                backed: entry.backed,
                writable: entry.writable,
                class: entry.class,
                latency_contrib: 0,
                events: Events::new(),
            };
        }

        let walk = space.walk(va);
        let class = PermClass::of_walk(&walk);
        let backed = walk.backed();
        let frame = walk.leaf.and_then(|l| l.frame().ok());
        let writable = walk.leaf.is_some_and(|l| l.flags.writable);
        let fillable = walk.all_accessed();

        let first_depth = self.psc_depth(va);
        let mut latency = self.config.walk_cost(first_depth);
        let mut events = smallvec![CounterEvent::walk(kind)];
        self.fill_psc(va, &walk);

        let mut walks = 1;
        if kind == TranslationKind::Store && !backed {
            // The store path retries the walk once before giving up.
            let second = self.psc_depth(va);
            latency += self.config.walk_cost(second);
            events.push(CounterEvent::walk(kind));
            walks = 2;
        }

        let fill = fillable && (kind == TranslationKind::Load || backed);
        if fill {
            let entry = TlbEntry {
                frame,
                backed,
                class,
                writable,
            };
            self.tlb(kind).insert(page, entry);
        }

        TranslationOutcome {
            kind,
            tlb_hit: false,
            walk_depth: first_depth,
            walks_performed: walks,
            frame,
            backed,
            writable,
            class,
            latency_contrib: latency,
            events,
        }
    }

    /// Drops any cached translation for one page, e.g. after a remap.
    pub fn invalidate_page(&mut self, va: VirtualAddress) {
        let page = va.page_number();
        self.load_tlb.remove(&page);
        self.store_tlb.remove(&page);
    }
}
