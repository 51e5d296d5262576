//! Cache hierarchy state machine.

pub mod geometry;
pub mod hierarchy;
pub mod set_assoc;

pub use geometry::{CacheCoordinates, GeometryError, HierarchyConfig, LevelGeometry, LINE_SIZE};
pub use hierarchy::{
    CacheHierarchy, CacheStats, Coherence, DemoteOutcome, DirSnapshot, DirState, HitLevel,
    LineState, PrivateLevel, Residency,
};

/// Physical addresses congruent with `target` (same set and slice), found by
/// stepping bit 17 and above. Ground truth for tests and oracle tooling.
pub fn congruent_addresses(cfg: &HierarchyConfig, target: u64, count: usize) -> Vec<u64> {
    let stride = (cfg.llc.sets as u64) << geometry::LINE_SHIFT;
    (1u64..)
        .map(|k| target ^ (k * stride))
        .filter(|pa| cfg.congruent(*pa, target))
        .take(count)
        .collect()
}

#[cfg(test)]
mod tests;
