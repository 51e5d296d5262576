use serde::{Deserialize, Serialize};

pub const LINE_SHIFT: u32 = 6;
pub const LINE_SIZE: u64 = 1 << LINE_SHIFT;
/// Lowest physical-address bit that feeds the slice hash.
pub const SLICE_HASH_SHIFT: u32 = 17;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LevelGeometry {
    pub sets: usize,
    pub ways: usize,
}

impl LevelGeometry {
    pub const fn new(sets: usize, ways: usize) -> Self {
        LevelGeometry { sets, ways }
    }

    pub fn set_of(&self, line: u64) -> usize {
        (line as usize) & (self.sets - 1)
    }
}

/// Geometry of the whole hierarchy. LLC and directory figures are per slice;
/// there is one slice per core.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HierarchyConfig {
    pub cores: usize,
    pub l1d: LevelGeometry,
    pub l1i: LevelGeometry,
    pub l2: LevelGeometry,
    pub llc: LevelGeometry,
    pub directory: LevelGeometry,
}

impl Default for HierarchyConfig {
    fn default() -> Self {
        HierarchyConfig {
            cores: 12,
            l1d: LevelGeometry::new(64, 12),
            l1i: LevelGeometry::new(64, 8),
            l2: LevelGeometry::new(2048, 16),
            llc: LevelGeometry::new(2048, 15),
            directory: LevelGeometry::new(2048, 25),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum GeometryError {
    #[error("{0}: set count {1} is not a nonzero power of two")]
    Sets(&'static str, usize),
    #[error("{0}: way count must be nonzero")]
    Ways(&'static str),
    #[error("core count must be between 1 and 64, got {0}")]
    Cores(usize),
    #[error("llc and directory must have the same set count")]
    SliceMismatch,
    #[error("l1 sets ({0}) must not exceed l2 sets ({1})")]
    L1Sets(usize, usize),
}

impl HierarchyConfig {
    pub fn validate(&self) -> Result<(), GeometryError> {
        if self.cores == 0 || self.cores > 64 {
            return Err(GeometryError::Cores(self.cores));
        }
        for (name, g) in [
            ("l1d", self.l1d),
            ("l1i", self.l1i),
            ("l2", self.l2),
            ("llc", self.llc),
            ("directory", self.directory),
        ] {
            if g.sets == 0 || !g.sets.is_power_of_two() {
                return Err(GeometryError::Sets(name, g.sets));
            }
            if g.ways == 0 {
                return Err(GeometryError::Ways(name));
            }
        }
        if self.llc.sets != self.directory.sets {
            return Err(GeometryError::SliceMismatch);
        }
        for l1 in [self.l1d, self.l1i] {
            if l1.sets > self.l2.sets {
                return Err(GeometryError::L1Sets(l1.sets, self.l2.sets));
            }
        }
        Ok(())
    }

    /// Slice owning `pa`: 16-bit XOR fold of the bits above the set index,
    /// reduced modulo the core count.
    pub fn slice_of(&self, pa: u64) -> usize {
        let mut rest = pa >> SLICE_HASH_SHIFT;
        let mut folded = 0u64;
        while rest != 0 {
            folded ^= rest & 0xffff;
            rest >>= 16;
        }
        (folded % self.cores as u64) as usize
    }

    pub fn coordinates(&self, pa: u64) -> CacheCoordinates {
        let line = pa >> LINE_SHIFT;
        let set = self.llc.set_of(line);
        CacheCoordinates {
            offset: (pa & (LINE_SIZE - 1)) as u8,
            set: set as u32,
            slice: self.slice_of(pa) as u32,
            tag: line >> self.llc.sets.trailing_zeros(),
        }
    }

    /// True if two addresses compete for the same LLC/directory set.
    pub fn congruent(&self, a: u64, b: u64) -> bool {
        let (ca, cb) = (self.coordinates(a), self.coordinates(b));
        ca.set == cb.set && ca.slice == cb.slice
    }
}

/// Decomposition of a physical address as the shared cache sees it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheCoordinates {
    pub offset: u8,
    pub set: u32,
    pub slice: u32,
    pub tag: u64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn defaults_are_valid() {
        HierarchyConfig::default().validate().unwrap();
    }

    #[test]
    fn rejects_bad_geometry() {
        let mut cfg = HierarchyConfig::default();
        cfg.llc.sets = 1000;
        assert!(cfg.validate().is_err());
        let mut cfg = HierarchyConfig::default();
        cfg.directory.sets = 1024;
        assert_eq!(cfg.validate(), Err(GeometryError::SliceMismatch));
    }

    #[test]
    fn single_core_has_one_slice() {
        let cfg = HierarchyConfig {
            cores: 1,
            ..HierarchyConfig::default()
        };
        assert_eq!(cfg.slice_of(0x0dea_dbee_f000), 0);
    }

    proptest! {
        #[test]
        fn set_is_bits_16_to_6(pa in 0u64..(1 << 40)) {
            let cfg = HierarchyConfig::default();
            let c = cfg.coordinates(pa);
            prop_assert_eq!(c.set as u64, (pa >> 6) % 2048);
            prop_assert_eq!(c.offset as u64, pa % 64);
            prop_assert!((c.slice as usize) < cfg.cores);
            // reassemble the line address from tag and set
            prop_assert_eq!((c.tag << 11) | c.set as u64, pa >> 6);
        }
    }
}
