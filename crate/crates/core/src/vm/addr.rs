use std::fmt;

use serde::{Deserialize, Serialize};

/// Width of the modeled virtual address space.
pub const VA_BITS: u32 = 56;
pub const VA_MASK: u64 = (1 << VA_BITS) - 1;
pub const PAGE_SHIFT: u32 = 12;
pub const PAGE_SIZE: u64 = 1 << PAGE_SHIFT;
pub const INDEX_BITS: u32 = 9;
const INDEX_MASK: u64 = (1 << INDEX_BITS) - 1;

/// Paging-structure level, ordered from the root down.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Pgd,
    P4d,
    Pud,
    Pmd,
    Pt,
}

impl Level {
    pub const ALL: [Level; 5] = [Level::Pgd, Level::P4d, Level::Pud, Level::Pmd, Level::Pt];

    pub fn index(self) -> usize {
        self as usize
    }

    /// Bit position of the lowest index bit selected by this level.
    pub fn shift(self) -> u32 {
        PAGE_SHIFT + INDEX_BITS * (4 - self as u32)
    }

    pub fn next(self) -> Option<Level> {
        Level::ALL.get(self.index() + 1).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Level::Pgd => "PGD",
            Level::P4d => "P4D",
            Level::Pud => "PUD",
            Level::Pmd => "PMD",
            Level::Pt => "PT",
        }
    }
}

/// A 56-bit virtual address. Higher bits are discarded on construction.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct VirtualAddress(u64);

/// Five table indices (root first) plus the page offset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VaParts {
    pub indices: [u16; 5],
    pub offset: u16,
}

impl VirtualAddress {
    pub const fn new(raw: u64) -> Self {
        VirtualAddress(raw & VA_MASK)
    }

    pub const fn value(self) -> u64 {
        self.0
    }

    /// Sign-extends bit 55 into the upper byte, the form kernels print.
    pub fn canonical(self) -> u64 {
        if self.0 & (1 << (VA_BITS - 1)) != 0 {
            self.0 | !VA_MASK
        } else {
            self.0
        }
    }

    pub fn decompose(self) -> VaParts {
        let mut indices = [0u16; 5];
        for level in Level::ALL {
            indices[level.index()] = ((self.0 >> level.shift()) & INDEX_MASK) as u16;
        }
        VaParts {
            indices,
            offset: (self.0 & (PAGE_SIZE - 1)) as u16,
        }
    }

    pub fn recompose(parts: VaParts) -> Self {
        let mut raw = parts.offset as u64 & (PAGE_SIZE - 1);
        for level in Level::ALL {
            raw |= (parts.indices[level.index()] as u64 & INDEX_MASK) << level.shift();
        }
        VirtualAddress::new(raw)
    }

    pub fn page_number(self) -> u64 {
        self.0 >> PAGE_SHIFT
    }

    pub fn page_offset(self) -> u64 {
        self.0 & (PAGE_SIZE - 1)
    }

    pub fn is_page_aligned(self) -> bool {
        self.page_offset() == 0
    }

    /// The address prefix that identifies the entry at `level`, i.e. all bits
    /// above that level's index field plus the index itself.
    pub fn prefix(self, level: Level) -> u64 {
        self.0 >> level.shift()
    }

    #[allow(clippy::should_implement_trait)]
    pub fn add(self, bytes: u64) -> Self {
        VirtualAddress::new(self.0.wrapping_add(bytes))
    }
}

impl fmt::Debug for VirtualAddress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "VirtualAddress({:#x})", self.0)
    }
}

impl fmt::Display for VirtualAddress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#x}", self.canonical())
    }
}

impl From<u64> for VirtualAddress {
    fn from(raw: u64) -> Self {
        VirtualAddress::new(raw)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    // Independent of `decompose`: peel fields off with division and remainder.
    fn oracle_split(va: u64) -> ([u64; 5], u64) {
        let mut rest = va & VA_MASK;
        let offset = rest % 4096;
        rest /= 4096;
        let mut idx = [0u64; 5];
        for slot in (0..5).rev() {
            idx[slot] = rest % 512;
            rest /= 512;
        }
        (idx, offset)
    }

    #[test]
    fn zero_address() {
        let parts = VirtualAddress::new(0).decompose();
        assert_eq!(parts.indices, [0; 5]);
        assert_eq!(parts.offset, 0);
    }

    #[test]
    fn kernel_base_slices() {
        let va = VirtualAddress::new(0xFFFF_FFFF_B320_0000);
        let (idx, off) = oracle_split(0xFFFF_FFFF_B320_0000);
        let parts = va.decompose();
        for l in 0..5 {
            assert_eq!(parts.indices[l] as u64, idx[l]);
        }
        assert_eq!(parts.offset as u64, off);
        // frozen from the oracle above
        assert_eq!(parts.indices, [0xff, 0x1ff, 0x1fe, 0x199, 0x0]);
        assert_eq!(parts.offset, 0);
        assert_eq!(va.canonical(), 0xFFFF_FFFF_B320_0000);
    }

    #[test]
    fn level_shifts() {
        assert_eq!(Level::Pt.shift(), 12);
        assert_eq!(Level::Pmd.shift(), 21);
        assert_eq!(Level::Pgd.shift(), 48);
        assert_eq!(Level::Pmd.next(), Some(Level::Pt));
        assert_eq!(Level::Pt.next(), None);
    }

    #[test]
    fn million_random_roundtrips() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1_000_000 {
            let va = VirtualAddress::new(rng.random());
            assert_eq!(VirtualAddress::recompose(va.decompose()), va);
        }
    }

    proptest! {
        #[test]
        fn decompose_matches_oracle(raw in any::<u64>()) {
            let (idx, off) = oracle_split(raw);
            let parts = VirtualAddress::new(raw).decompose();
            for l in 0..5 {
                prop_assert_eq!(parts.indices[l] as u64, idx[l]);
            }
            prop_assert_eq!(parts.offset as u64, off);
        }
    }
}
