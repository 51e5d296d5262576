use serde::{Deserialize, Serialize};

use crate::cache::{congruent_addresses, CacheHierarchy, HierarchyConfig, HitLevel};

/// LLC recency of a demoted line before and after a reload, once when the
/// reload is served by the LLC and once when it hits in the private cache.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecencyCheck {
    pub rank_after_demotes: Option<usize>,
    pub llc_reload_level: HitLevel,
    pub rank_after_llc_reload: Option<usize>,
    pub rank_before_private_hit: Option<usize>,
    pub private_reload_level: HitLevel,
    pub rank_after_private_hit: Option<usize>,
}

impl RecencyCheck {
    /// An LLC-served reload moves the line to MRU; a private hit does not
    /// touch LLC order, so a scope line cannot be refreshed that way.
    pub fn holds(&self) -> bool {
        self.llc_reload_level == HitLevel::Llc
            && self.rank_after_llc_reload == Some(0)
            && self.rank_after_demotes != Some(0)
            && self.private_reload_level == HitLevel::L1
            && self.rank_before_private_hit.is_some()
            && self.rank_after_private_hit == self.rank_before_private_hit
    }
}

pub fn recency_check(config: &HierarchyConfig, others: usize) -> RecencyCheck {
    let target = 0x4_0000u64;
    let mut h = CacheHierarchy::new(config.clone());
    let lines = congruent_addresses(config, target, others.max(1));
    let push_behind = |h: &mut CacheHierarchy| {
        for pa in &lines {
            h.load(0, *pa);
            h.demote(0, *pa);
        }
    };
    h.load(0, target);
    h.demote(0, target);
    push_behind(&mut h);
    let rank_after_demotes = h.locate(target).llc_rank;
    let llc_reload_level = h.load(0, target);
    let rank_after_llc_reload = h.locate(target).llc_rank;
    push_behind(&mut h);
    let rank_before_private_hit = h.locate(target).llc_rank;
    let private_reload_level = h.load(0, target);
    RecencyCheck {
        rank_after_demotes,
        llc_reload_level,
        rank_after_llc_reload,
        rank_before_private_hit,
        private_reload_level,
        rank_after_private_hit: h.locate(target).llc_rank,
    }
}
