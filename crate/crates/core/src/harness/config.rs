use std::path::Path;

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::attacks::SyncModel;
use crate::cache::HierarchyConfig;
use crate::evset::{EvsetConfig, Placement};
use crate::exec::{Countermeasures, LatencyProfile, MachineConfig};
use crate::primitives::ProbeKind;
use crate::vm::TlbConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchParams {
    /// Samples per residency state and per primitive state.
    pub samples: usize,
    /// Restricts the primitive pass to one kind and keeps its raw samples.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kind: Option<ProbeKind>,
}

impl Default for BenchParams {
    fn default() -> Self {
        BenchParams {
            samples: 100_000,
            kind: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Algorithm1Params {
    pub iterations: u64,
    pub min_accuracy: f64,
}

impl Default for Algorithm1Params {
    fn default() -> Self {
        Algorithm1Params {
            iterations: 100_000,
            min_accuracy: 0.99,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DemoteTimeParams {
    /// Samples per permission-row column.
    pub samples: u32,
    /// Invalid-address operations for the walk counters.
    pub counter_ops: u64,
    /// Operations in the adversarial fault stream.
    pub stream_ops: u64,
    pub tolerance: f64,
}

impl Default for DemoteTimeParams {
    fn default() -> Self {
        DemoteTimeParams {
            samples: 20_000,
            counter_ops: 1_000_000,
            stream_ops: 1_000_000,
            tolerance: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PageLevelParams {
    pub repeats: u32,
}

impl Default for PageLevelParams {
    fn default() -> Self {
        PageLevelParams { repeats: 100_000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CovertParams {
    pub window: u64,
    pub bits: usize,
    pub primitive: ProbeKind,
    pub sync: SyncModel,
    pub max_ber: f64,
    pub sweep_windows: Vec<u64>,
    pub sweep_bits: usize,
    /// Primitive whose sweep maximum must stay below the main one's.
    pub baseline: ProbeKind,
}

impl Default for CovertParams {
    fn default() -> Self {
        CovertParams {
            window: 700,
            bits: 1_000_000,
            primitive: ProbeKind::FlushDemote,
            sync: SyncModel::default(),
            max_ber: 1e-3,
            sweep_windows: (550..=1000).step_by(50).collect(),
            sweep_bits: 200_000,
            baseline: ProbeKind::FlushReload,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KaslrParams {
    pub trials: u64,
    pub reboots: u64,
    pub repeats: u32,
    pub kernel_slots: usize,
    pub min_accuracy: f64,
    pub scan_ms: (f64, f64),
}

impl Default for KaslrParams {
    fn default() -> Self {
        KaslrParams {
            trials: 1000,
            reboots: 10,
            repeats: 100,
            kernel_slots: crate::attacks::kaslr::DEFAULT_KERNEL_SLOTS,
            min_accuracy: 0.99,
            scan_ms: (2.0, 4.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvsetParams {
    pub runs: u64,
    pub build: EvsetConfig,
    pub min_success: f64,
    pub cycle_ratio: (f64, f64),
    /// Builds with one placement only; the cycle comparison is skipped.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub placement: Option<Placement>,
}

impl Default for EvsetParams {
    fn default() -> Self {
        EvsetParams {
            runs: 1,
            build: EvsetConfig::default(),
            min_success: 0.95,
            cycle_ratio: (0.5, 0.75),
            placement: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReverseParams {
    pub max_n: usize,
    pub iterations: u32,
    pub jump: f64,
    pub runs: u64,
}

impl Default for ReverseParams {
    fn default() -> Self {
        ReverseParams {
            max_n: 40,
            iterations: 1000,
            jump: 8.0,
            runs: 1,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentParams {
    pub bench: BenchParams,
    pub algorithm1: Algorithm1Params,
    pub demote_time: DemoteTimeParams,
    pub page_levels: PageLevelParams,
    pub covert: CovertParams,
    pub kaslr: KaslrParams,
    pub evset: EvsetParams,
    pub reverse: ReverseParams,
}

/// Everything a run reads: machine model, optional seed and experiment knobs.
/// `noise.sigma` and `clock_ghz` are shorthands for the matching latency keys
/// and win over them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub clock_ghz: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub noise: Option<NoiseConfig>,
    pub threads_per_core: usize,
    pub hierarchy: HierarchyConfig,
    pub tlb: TlbConfig,
    pub countermeasures: Countermeasures,
    pub latency: LatencyProfile,
    pub experiment: ExperimentParams,
}

impl Default for Config {
    fn default() -> Self {
        let m = MachineConfig::default();
        Config {
            seed: None,
            clock_ghz: None,
            noise: None,
            threads_per_core: m.threads_per_core,
            hierarchy: m.hierarchy,
            tlb: m.tlb,
            countermeasures: m.countermeasures,
            latency: m.latency,
            experiment: ExperimentParams::default(),
        }
    }
}

impl Config {
    pub fn machine(&self) -> MachineConfig {
        let mut latency = self.latency.clone();
        if let Some(n) = &self.noise {
            latency.noise_sigma = n.sigma;
        }
        if let Some(c) = self.clock_ghz {
            latency.clock_ghz = c;
        }
        MachineConfig {
            hierarchy: self.hierarchy.clone(),
            tlb: self.tlb.clone(),
            latency,
            countermeasures: self.countermeasures.clone(),
            threads_per_core: self.threads_per_core,
        }
    }

    /// Parses TOML laid over the defaults, so partial tables keep the
    /// defaults of the keys they omit. Unknown keys are errors.
    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        let user: toml::Table =
            toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        let mut base = toml::Table::try_from(Config::default())
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        merge(&mut base, user);
        let cfg: Config = toml::Value::Table(base)
            .try_into()
            .map_err(|e: toml::de::Error| HarnessError::Config(e.to_string()))?;
        cfg.machine()
            .validate()
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        Ok(cfg)
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

pub fn load_config(path: &Path) -> Result<Config, HarnessError> {
    let text = std::fs::read_to_string(path).map_err(|e| HarnessError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    Config::from_toml(&text).map_err(|e| match e {
        HarnessError::Config(m) => HarnessError::Config(format!("{}: {m}", path.display())),
        other => other,
    })
}
