use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::vm::{MemType, PermClass};

/// Probe primitives. Each selects its own timing context.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProbeKind {
    FlushDemote,
    FlushReload,
    FlushFlush,
    StreamReload,
    DemoteTime,
}

impl ProbeKind {
    pub const ALL: [ProbeKind; 5] = [
        ProbeKind::FlushDemote,
        ProbeKind::FlushReload,
        ProbeKind::FlushFlush,
        ProbeKind::StreamReload,
        ProbeKind::DemoteTime,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ProbeKind::FlushDemote => "flush-demote",
            ProbeKind::FlushReload => "flush-reload",
            ProbeKind::FlushFlush => "flush-flush",
            ProbeKind::StreamReload => "stream-reload",
            ProbeKind::DemoteTime => "demote-time",
        }
    }
}

impl std::str::FromStr for ProbeKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ProbeKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| format!("unknown probe kind `{s}`"))
    }
}

/// Which measured table prices an instruction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LatencyContext {
    /// Per-level instruction costs used for characterization and eviction.
    Characterize,
    /// Aggregate hit/miss figures of one probe primitive's timed step.
    Primitive(ProbeKind),
    /// Permission and TLB-state dependent costs of address probing.
    TlbProbe,
    /// Costs dominated by page-walk depth.
    PageWalk,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HitMiss {
    pub hit: f64,
    pub miss: f64,
}

impl HitMiss {
    pub const fn new(hit: f64, miss: f64) -> Self {
        HitMiss { hit, miss }
    }

    pub fn pick(&self, hit: bool) -> f64 {
        if hit {
            self.hit
        } else {
            self.miss
        }
    }

    pub fn midpoint(&self) -> f64 {
        (self.hit + self.miss) / 2.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CharacterizeTable {
    pub cldemote_l1: f64,
    pub cldemote_l2: f64,
    pub cldemote_other: f64,
    pub load_l1: f64,
    pub load_l2: f64,
    pub load_llc: f64,
    pub load_remote: f64,
    pub load_memory: f64,
    pub clflush_cached: f64,
    pub clflush_absent: f64,
    pub prefetch: f64,
    pub movnt: f64,
    pub fence: f64,
}

impl Default for CharacterizeTable {
    fn default() -> Self {
        CharacterizeTable {
            cldemote_l1: 210.0,
            cldemote_l2: 200.0,
            cldemote_other: 132.0,
            load_l1: 58.0,
            load_l2: 72.0,
            load_llc: 130.0,
            load_remote: 165.0,
            load_memory: 308.0,
            clflush_cached: 213.0,
            clflush_absent: 139.0,
            prefetch: 113.0,
            movnt: 160.0,
            fence: 30.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrimitiveTable {
    pub stream_reload: HitMiss,
    pub flush_reload: HitMiss,
    pub flush_flush: HitMiss,
    pub flush_demote: HitMiss,
}

impl Default for PrimitiveTable {
    fn default() -> Self {
        PrimitiveTable {
            stream_reload: HitMiss::new(61.0, 309.0),
            flush_reload: HitMiss::new(58.0, 308.0),
            flush_flush: HitMiss::new(213.0, 139.0),
            flush_demote: HitMiss::new(208.0, 121.0),
        }
    }
}

impl PrimitiveTable {
    pub fn get(&self, kind: ProbeKind) -> Option<HitMiss> {
        match kind {
            ProbeKind::StreamReload => Some(self.stream_reload),
            ProbeKind::FlushReload => Some(self.flush_reload),
            ProbeKind::FlushFlush => Some(self.flush_flush),
            ProbeKind::FlushDemote => Some(self.flush_demote),
            ProbeKind::DemoteTime => None,
        }
    }
}

/// One row of the permission/memory-type table. "hit" applies to a TLB hit
/// or a walk that starts below the root; "miss" to a walk from the root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TlbProbeRow {
    pub present: bool,
    pub user: bool,
    pub dirty: bool,
    pub no_execute: bool,
    pub accessed: bool,
    pub memtype: MemType,
    pub prefetch: HitMiss,
    pub cldemote: HitMiss,
}

impl TlbProbeRow {
    #[allow(clippy::too_many_arguments)]
    const fn new(
        bits: [bool; 5],
        memtype: MemType,
        prefetch: (f64, f64),
        cldemote: (f64, f64),
    ) -> Self {
        let [present, user, dirty, no_execute, accessed] = bits;
        TlbProbeRow {
            present,
            user,
            dirty,
            no_execute,
            accessed,
            memtype,
            prefetch: HitMiss::new(prefetch.0, prefetch.1),
            cldemote: HitMiss::new(cldemote.0, cldemote.1),
        }
    }

    pub fn class(&self) -> PermClass {
        PermClass {
            present: self.present,
            user: self.user,
            dirty: self.dirty,
            no_execute: self.no_execute,
            accessed: self.accessed,
            memtype: self.memtype,
        }
    }
}

pub fn default_tlb_probe_rows() -> Vec<TlbProbeRow> {
    use MemType::*;
    const T: bool = true;
    const F: bool = false;
    // bits: P, U, D, NX, A
    vec![
        TlbProbeRow::new([T, T, T, T, T], WriteBack, (113.0, 133.0), (160.0, 180.0)),
        TlbProbeRow::new([T, F, T, T, F], WriteBack, (132.0, 132.0), (137.0, 136.0)),
        TlbProbeRow::new([T, T, T, T, F], WriteBack, (132.0, 133.0), (137.0, 136.0)),
        TlbProbeRow::new([T, F, T, T, T], WriteBack, (112.0, 132.0), (114.0, 136.0)),
        TlbProbeRow::new([F, T, T, T, T], WriteBack, (115.0, 133.0), (139.0, 148.0)),
        TlbProbeRow::new([F, F, T, T, T], WriteBack, (115.0, 132.0), (138.0, 149.0)),
        TlbProbeRow::new([T, T, T, F, T], WriteBack, (113.0, 132.0), (160.0, 180.0)),
        TlbProbeRow::new([T, T, F, T, T], WriteBack, (112.0, 134.0), (160.0, 180.0)),
        TlbProbeRow::new([F, F, T, T, F], WriteBack, (132.0, 132.0), (148.0, 148.0)),
        TlbProbeRow::new(
            [T, T, T, T, T],
            WriteProtected,
            (113.0, 132.0),
            (114.0, 137.0),
        ),
        TlbProbeRow::new([T, T, T, T, T], Uncacheable, (113.0, 135.0), (115.0, 138.0)),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PageWalkTable {
    pub tlb_hit_backed: f64,
    pub tlb_hit_unbacked: f64,
}

impl Default for PageWalkTable {
    fn default() -> Self {
        PageWalkTable {
            tlb_hit_backed: 108.0,
            tlb_hit_unbacked: 112.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LatencyProfile {
    pub noise_sigma: f64,
    pub clock_ghz: f64,
    pub characterize: CharacterizeTable,
    pub primitive: PrimitiveTable,
    pub tlb_probe: Vec<TlbProbeRow>,
    pub page_walk: PageWalkTable,
}

impl Default for LatencyProfile {
    fn default() -> Self {
        LatencyProfile {
            noise_sigma: 6.0,
            clock_ghz: 2.0,
            characterize: CharacterizeTable::default(),
            primitive: PrimitiveTable::default(),
            tlb_probe: default_tlb_probe_rows(),
            page_walk: PageWalkTable::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ProfileError {
    #[error("latency `{0}` must be positive, got {1}")]
    NonPositive(String, f64),
    #[error("noise sigma must be finite and non-negative, got {0}")]
    Sigma(f64),
    #[error("clock frequency must be positive, got {0}")]
    Clock(f64),
}

impl LatencyProfile {
    pub fn validate(&self) -> Result<(), ProfileError> {
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(ProfileError::Sigma(self.noise_sigma));
        }
        if !(self.clock_ghz.is_finite() && self.clock_ghz > 0.0) {
            return Err(ProfileError::Clock(self.clock_ghz));
        }
        let c = &self.characterize;
        let p = &self.primitive;
        let pw = &self.page_walk;
        let mut named: Vec<(String, f64)> = vec![
            ("cldemote_l1".into(), c.cldemote_l1),
            ("cldemote_l2".into(), c.cldemote_l2),
            ("cldemote_other".into(), c.cldemote_other),
            ("load_l1".into(), c.load_l1),
            ("load_l2".into(), c.load_l2),
            ("load_llc".into(), c.load_llc),
            ("load_remote".into(), c.load_remote),
            ("load_memory".into(), c.load_memory),
            ("clflush_cached".into(), c.clflush_cached),
            ("clflush_absent".into(), c.clflush_absent),
            ("prefetch".into(), c.prefetch),
            ("movnt".into(), c.movnt),
            ("fence".into(), c.fence),
            ("tlb_hit_backed".into(), pw.tlb_hit_backed),
            ("tlb_hit_unbacked".into(), pw.tlb_hit_unbacked),
        ];
        for (name, hm) in [
            ("stream_reload", p.stream_reload),
            ("flush_reload", p.flush_reload),
            ("flush_flush", p.flush_flush),
            ("flush_demote", p.flush_demote),
        ] {
            named.push((format!("{name}.hit"), hm.hit));
            named.push((format!("{name}.miss"), hm.miss));
        }
        for (i, row) in self.tlb_probe.iter().enumerate() {
            named.push((format!("tlb_probe[{i}].prefetch.hit"), row.prefetch.hit));
            named.push((format!("tlb_probe[{i}].prefetch.miss"), row.prefetch.miss));
            named.push((format!("tlb_probe[{i}].cldemote.hit"), row.cldemote.hit));
            named.push((format!("tlb_probe[{i}].cldemote.miss"), row.cldemote.miss));
        }
        for (name, v) in named {
            if !(v.is_finite() && v > 0.0) {
                return Err(ProfileError::NonPositive(name, v));
            }
        }
        Ok(())
    }

    /// Best matching permission row: exact, then ignoring D/NX, then also
    /// ignoring memory type, then also ignoring A.
    pub fn tlb_row(&self, class: &PermClass) -> Option<&TlbProbeRow> {
        let passes: [&dyn Fn(&TlbProbeRow) -> bool; 4] = [
            &|r| r.class() == *class,
            &|r| {
                r.present == class.present
                    && r.user == class.user
                    && r.accessed == class.accessed
                    && r.memtype == class.memtype
            },
            &|r| r.present == class.present && r.user == class.user && r.accessed == class.accessed,
            &|r| r.present == class.present && r.user == class.user,
        ];
        passes
            .iter()
            .find_map(|pred| self.tlb_probe.iter().find(|r| pred(r)))
    }

    pub fn cycles_to_seconds(&self, cycles: f64) -> f64 {
        cycles / (self.clock_ghz * 1e9)
    }
}

/// Gaussian measurement noise around a table mean.
#[derive(Debug, Clone)]
pub struct NoiseModel {
    normal: Option<Normal<f64>>,
}

impl NoiseModel {
    pub fn new(sigma: f64) -> Self {
        NoiseModel {
            normal: (sigma > 0.0).then(|| Normal::new(0.0, sigma).expect("validated sigma")),
        }
    }

    /// round(mean + N(0, sigma)), never below one cycle.
    pub fn sample<R: Rng + ?Sized>(&self, mean: f64, rng: &mut R) -> u32 {
        let v = match &self.normal {
            Some(n) => mean + n.sample(rng),
            None => mean,
        };
        v.round().max(1.0) as u32
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn defaults_validate() {
        LatencyProfile::default().validate().unwrap();
        assert_eq!(default_tlb_probe_rows().len(), 11);
    }

    #[test]
    fn zero_sigma_is_exact() {
        let n = NoiseModel::new(0.0);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        assert_eq!(n.sample(210.0, &mut rng), 210);
        assert_eq!(n.sample(-5.0, &mut rng), 1);
    }

    #[test]
    fn sample_mean_converges() {
        let n = NoiseModel::new(6.0);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let total: u64 = (0..100_000).map(|_| n.sample(132.0, &mut rng) as u64).sum();
        let mean = total as f64 / 1e5;
        assert!((mean - 132.0).abs() < 0.2, "{mean}");
    }

    #[test]
    fn row_fallbacks() {
        let p = LatencyProfile::default();
        // a plain user page carries D=0, NX=0: falls back to the P,U,A row
        let user_page = PermClass {
            present: true,
            user: true,
            dirty: false,
            no_execute: false,
            accessed: true,
            memtype: MemType::WriteBack,
        };
        assert_eq!(p.tlb_row(&user_page).unwrap().cldemote.hit, 160.0);
        let wp = PermClass {
            memtype: MemType::WriteProtected,
            ..user_page
        };
        assert_eq!(p.tlb_row(&wp).unwrap().cldemote.miss, 137.0);
        let kernel = PermClass {
            user: false,
            ..user_page
        };
        assert_eq!(p.tlb_row(&kernel).unwrap().cldemote.hit, 114.0);
    }

    #[test]
    fn bad_profile_rejected() {
        let p = LatencyProfile {
            noise_sigma: -1.0,
            ..Default::default()
        };
        assert!(p.validate().is_err());
        let mut p = LatencyProfile::default();
        p.characterize.load_l1 = 0.0;
        assert!(matches!(p.validate(), Err(ProfileError::NonPositive(..))));
    }

    #[test]
    fn probe_kind_names_roundtrip() {
        for k in ProbeKind::ALL {
            assert_eq!(k.name().parse::<ProbeKind>().unwrap(), k);
        }
    }
}
