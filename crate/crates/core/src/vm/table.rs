use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustc_hash::FxHashMap;
use serde::{Deserialize, Serialize};

use super::addr::{Level, VirtualAddress, PAGE_SIZE};
use super::VmError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MemType {
    #[default]
    WriteBack,
    WriteProtected,
    Uncacheable,
}

impl MemType {
    pub fn cacheable(self) -> bool {
        self != MemType::Uncacheable
    }
}

/// Permission and type bits of a leaf mapping.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PageFlags {
    pub present: bool,
    pub writable: bool,
    pub user: bool,
    pub dirty: bool,
    pub no_execute: bool,
    pub accessed: bool,
    pub memtype: MemType,
}

impl Default for PageFlags {
    fn default() -> Self {
        PageFlags {
            present: true,
            writable: true,
            user: true,
            dirty: false,
            no_execute: false,
            accessed: true,
            memtype: MemType::WriteBack,
        }
    }
}

impl PageFlags {
    pub fn user_rw() -> Self {
        PageFlags::default()
    }

    pub fn user_ro() -> Self {
        PageFlags {
            writable: false,
            ..PageFlags::default()
        }
    }

    pub fn kernel() -> Self {
        PageFlags {
            user: false,
            ..PageFlags::default()
        }
    }
}

/// A leaf page-table entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PageTableEntry {
    pub flags: PageFlags,
    frame: Option<u64>,
}

impl PageTableEntry {
    pub fn frame(&self) -> Result<u64, VmError> {
        match (self.flags.present, self.frame) {
            (true, Some(f)) => Ok(f),
            _ => Err(VmError::NotPresent),
        }
    }
}

#[derive(Debug, Clone)]
struct TableEntry {
    user: bool,
    accessed: bool,
    child: Box<PageTable>,
}

#[derive(Debug, Clone)]
enum Slot {
    Table(TableEntry),
    Leaf(PageTableEntry),
}

#[derive(Debug, Clone, Default)]
struct PageTable {
    slots: FxHashMap<u16, Slot>,
}

/// One traversed entry, as seen by the hardware walker.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WalkStep {
    pub level: Level,
    pub present: bool,
    pub user: bool,
    pub accessed: bool,
}

/// Result of walking the radix tree for one address.
#[derive(Debug, Clone)]
pub struct Walk {
    path: [WalkStep; 5],
    depth: usize,
    pub leaf: Option<PageTableEntry>,
}

impl Walk {
    fn push(&mut self, step: WalkStep) {
        self.path[self.depth] = step;
        self.depth += 1;
    }

    /// Entries visited, root first.
    pub fn steps(&self) -> &[WalkStep] {
        &self.path[..self.depth]
    }

    /// Level at which translation stopped for lack of a present entry.
    pub fn abort_level(&self) -> Option<Level> {
        self.steps().iter().find(|s| !s.present).map(|s| s.level)
    }

    pub fn backed(&self) -> bool {
        self.leaf.map(|l| l.flags.present).unwrap_or(false)
    }

    pub fn all_accessed(&self) -> bool {
        self.steps().iter().all(|s| s.accessed)
    }

    pub fn user_path(&self) -> bool {
        self.steps().iter().all(|s| s.user)
    }
}

/// Random physical frame allocation over a fixed-size physical memory.
#[derive(Debug, Clone)]
pub struct FrameAllocator {
    rng: ChaCha8Rng,
    frames: u64,
    used: HashSet<u64>,
}

impl FrameAllocator {
    pub fn new(seed: u64, frames: u64) -> Self {
        FrameAllocator {
            rng: ChaCha8Rng::seed_from_u64(seed),
            frames,
            used: HashSet::new(),
        }
    }

    pub fn alloc(&mut self) -> u64 {
        loop {
            let f = self.rng.random_range(1..self.frames);
            if self.used.insert(f) {
                return f;
            }
        }
    }

    /// Draws frames until `accept` holds; rejected frames stay free.
    pub fn alloc_where(&mut self, mut accept: impl FnMut(u64) -> bool) -> u64 {
        loop {
            let f = self.rng.random_range(1..self.frames);
            if !self.used.contains(&f) && accept(f) {
                self.used.insert(f);
                return f;
            }
        }
    }
}

/// Start of the kernel text randomization window.
pub const KERNEL_REGION_START: VirtualAddress = VirtualAddress::new(0xffff_ffff_8000_0000);
pub const KERNEL_REGION_END: VirtualAddress = VirtualAddress::new(0xffff_ffff_c000_0000);

/// A process view of memory: one 5-level radix table plus a frame allocator.
#[derive(Debug, Clone)]
pub struct AddressSpace {
    root: PageTable,
    pub kernel_region: (VirtualAddress, VirtualAddress),
    frames: FrameAllocator,
}

impl AddressSpace {
    pub fn new(seed: u64) -> Self {
        AddressSpace {
            root: PageTable::default(),
            kernel_region: (KERNEL_REGION_START, KERNEL_REGION_END),
            frames: FrameAllocator::new(seed, 1 << 24),
        }
    }

    pub fn in_kernel_region(&self, va: VirtualAddress) -> bool {
        va >= self.kernel_region.0 && va < self.kernel_region.1
    }

    pub fn frames(&mut self) -> &mut FrameAllocator {
        &mut self.frames
    }

    /// Maps `length` bytes starting at `va_start` as 4 KiB leaves with `flags`.
    /// Present leaves get freshly allocated frames.
    pub fn map_region(
        &mut self,
        va_start: VirtualAddress,
        length: u64,
        flags: PageFlags,
    ) -> Result<(), VmError> {
        if !va_start.is_page_aligned() {
            return Err(VmError::Unaligned(va_start));
        }
        let pages = length.div_ceil(PAGE_SIZE);
        for i in 0..pages {
            let va = va_start.add(i * PAGE_SIZE);
            let frame = if flags.present {
                match self.lookup(va) {
                    Some(existing) if existing.flags == flags => continue,
                    _ => Some(self.frames.alloc()),
                }
            } else {
                None
            };
            self.install(va, flags, frame)?;
        }
        Ok(())
    }

    /// Maps one page at a caller-chosen frame.
    pub fn map_page_at(
        &mut self,
        va: VirtualAddress,
        flags: PageFlags,
        frame: u64,
    ) -> Result<(), VmError> {
        if !va.is_page_aligned() {
            return Err(VmError::Unaligned(va));
        }
        self.install(va, flags, Some(frame))
    }

    /// Creates the intermediate tables down to (but excluding) `stop`, so that
    /// a walk for `va` ends at a missing entry in the `stop` level.
    pub fn reserve_path(
        &mut self,
        va: VirtualAddress,
        stop: Level,
        user: bool,
    ) -> Result<(), VmError> {
        let parts = va.decompose();
        let mut table = &mut self.root;
        for level in Level::ALL {
            if level == stop {
                return Ok(());
            }
            let idx = parts.indices[level.index()];
            let slot = table.slots.entry(idx).or_insert_with(|| {
                Slot::Table(TableEntry {
                    user,
                    accessed: true,
                    child: Box::default(),
                })
            });
            table = match slot {
                Slot::Table(t) => {
                    t.user |= user;
                    &mut t.child
                }
                Slot::Leaf(_) => return Err(VmError::MappingConflict(va)),
            };
        }
        Ok(())
    }

    fn install(
        &mut self,
        va: VirtualAddress,
        flags: PageFlags,
        frame: Option<u64>,
    ) -> Result<(), VmError> {
        let parts = va.decompose();
        let mut table = &mut self.root;
        for level in &Level::ALL[..4] {
            let idx = parts.indices[level.index()];
            let slot = table.slots.entry(idx).or_insert_with(|| {
                Slot::Table(TableEntry {
                    user: flags.user,
                    accessed: true,
                    child: Box::default(),
                })
            });
            table = match slot {
                Slot::Table(t) => {
                    t.user |= flags.user;
                    &mut t.child
                }
                Slot::Leaf(_) => return Err(VmError::MappingConflict(va)),
            };
        }
        let idx = parts.indices[Level::Pt.index()];
        match table.slots.get(&idx) {
            Some(Slot::Leaf(existing)) if existing.flags != flags => {
                Err(VmError::MappingConflict(va))
            }
            Some(Slot::Table(_)) => Err(VmError::MappingConflict(va)),
            _ => {
                table
                    .slots
                    .insert(idx, Slot::Leaf(PageTableEntry { flags, frame }));
                Ok(())
            }
        }
    }

    /// Removes a leaf, leaving the intermediate tables in place.
    pub fn unmap(&mut self, va: VirtualAddress) {
        let parts = va.decompose();
        let mut table = &mut self.root;
        for level in &Level::ALL[..4] {
            match table.slots.get_mut(&parts.indices[level.index()]) {
                Some(Slot::Table(t)) => table = &mut t.child,
                _ => return,
            }
        }
        table.slots.remove(&parts.indices[Level::Pt.index()]);
    }

    pub fn lookup(&self, va: VirtualAddress) -> Option<PageTableEntry> {
        self.walk(va).leaf
    }

    /// Physical address for `va`, if it is backed.
    pub fn resolve(&self, va: VirtualAddress) -> Option<u64> {
        let leaf = self.lookup(va)?;
        leaf.frame().ok().map(|f| (f << 12) | va.page_offset())
    }

    pub fn walk(&self, va: VirtualAddress) -> Walk {
        let parts = va.decompose();
        let blank = WalkStep {
            level: Level::Pgd,
            present: false,
            user: false,
            accessed: false,
        };
        let mut walk = Walk {
            path: [blank; 5],
            depth: 0,
            leaf: None,
        };
        let mut table = &self.root;
        for level in Level::ALL {
            match table.slots.get(&parts.indices[level.index()]) {
                None => {
                    let user = walk.user_path();
                    walk.push(WalkStep {
                        level,
                        present: false,
                        user,
                        accessed: true,
                    });
                    return walk;
                }
                Some(Slot::Table(t)) => {
                    walk.push(WalkStep {
                        level,
                        present: true,
                        user: t.user,
                        accessed: t.accessed,
                    });
                    table = &t.child;
                }
                Some(Slot::Leaf(pte)) => {
                    walk.push(WalkStep {
                        level,
                        present: pte.flags.present,
                        user: pte.flags.user,
                        accessed: pte.flags.accessed,
                    });
                    walk.leaf = Some(*pte);
                    return walk;
                }
            }
        }
        walk
    }

    /// Architectural access side effect: sets A on every entry of the path,
    /// and D on the leaf for writes.
    pub fn mark_accessed(&mut self, va: VirtualAddress, write: bool) {
        let parts = va.decompose();
        let mut table = &mut self.root;
        for level in Level::ALL {
            match table.slots.get_mut(&parts.indices[level.index()]) {
                Some(Slot::Table(t)) => {
                    t.accessed = true;
                    table = &mut t.child;
                }
                Some(Slot::Leaf(pte)) => {
                    pte.flags.accessed = true;
                    if write {
                        pte.flags.dirty = true;
                    }
                    return;
                }
                None => return,
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_and_resolve() {
        let mut space = AddressSpace::new(1);
        let va = VirtualAddress::new(0x1000);
        space.map_region(va, 4096, PageFlags::user_rw()).unwrap();
        let pa = space.resolve(va.add(0x40)).unwrap();
        assert_eq!(pa & 0xfff, 0x40);
        let walk = space.walk(va);
        assert_eq!(walk.steps().len(), 5);
        assert!(walk.backed());
        assert!(walk.user_path());
    }

    #[test]
    fn unaligned_start_rejected() {
        let mut space = AddressSpace::new(1);
        let err = space
            .map_region(VirtualAddress::new(0x1008), 4096, PageFlags::user_rw())
            .unwrap_err();
        assert!(matches!(err, VmError::Unaligned(_)));
    }

    #[test]
    fn conflicting_remap_is_an_error() {
        let mut space = AddressSpace::new(1);
        let va = VirtualAddress::new(0x4000);
        space.map_region(va, 4096, PageFlags::user_rw()).unwrap();
        // identical flags are fine and keep the frame
        let before = space.resolve(va);
        space.map_region(va, 4096, PageFlags::user_rw()).unwrap();
        assert_eq!(space.resolve(va), before);
        let err = space.map_region(va, 4096, PageFlags::kernel()).unwrap_err();
        assert!(matches!(err, VmError::MappingConflict(_)));
    }

    #[test]
    fn non_present_leaf_has_no_frame() {
        let mut space = AddressSpace::new(1);
        let va = VirtualAddress::new(0x8000);
        let flags = PageFlags {
            present: false,
            ..PageFlags::kernel()
        };
        space.map_region(va, 4096, flags).unwrap();
        let leaf = space.lookup(va).unwrap();
        assert_eq!(leaf.frame(), Err(VmError::NotPresent));
        assert_eq!(space.walk(va).abort_level(), Some(Level::Pt));
    }

    #[test]
    fn reserve_path_aborts_at_requested_level() {
        let mut space = AddressSpace::new(1);
        let va = VirtualAddress::new(0xffff_ffff_8000_0000);
        for stop in Level::ALL {
            let probe = va.add((stop.index() as u64 + 1) << 39);
            space.reserve_path(probe, stop, false).unwrap();
            assert_eq!(space.walk(probe).abort_level(), Some(stop));
        }
    }

    #[test]
    fn two_mib_region_is_512_leaves() {
        let mut space = AddressSpace::new(3);
        let base = VirtualAddress::new(0xffff_ffff_b320_0000);
        space
            .map_region(base, 2 << 20, PageFlags::kernel())
            .unwrap();
        for i in 0..512 {
            assert!(space.resolve(base.add(i * 4096)).is_some());
        }
        assert!(space.resolve(base.add(2 << 20)).is_none());
    }

    #[test]
    fn mark_accessed_sets_bits() {
        let mut space = AddressSpace::new(1);
        let va = VirtualAddress::new(0x2000);
        let flags = PageFlags {
            accessed: false,
            ..PageFlags::user_rw()
        };
        space.map_region(va, 4096, flags).unwrap();
        assert!(!space.walk(va).all_accessed());
        space.mark_accessed(va, true);
        let leaf = space.lookup(va).unwrap();
        assert!(leaf.flags.accessed && leaf.flags.dirty);
    }
}
