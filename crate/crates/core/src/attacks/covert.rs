use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::exec::{run, Action, ExecResult, LatencyProfile, MachineConfig, Program, SchedError};
use crate::primitives::{Lab, PrimitiveError, ProbeKind, Threshold};
use crate::rng::{child_seed, stream, Stream};
use crate::vm::VirtualAddress;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ChannelError {
    #[error("window of {window} cycles does not exceed the {round:.0}-cycle probe round")]
    WindowTooSmall { window: u64, round: f64 },
    #[error("{0:?} cannot carry a channel")]
    Unsupported(ProbeKind),
    #[error("sender and receiver need sibling threads on one core")]
    NoSibling,
    #[error("sync jitter sigma must be finite and non-negative, got {0}")]
    Sigma(f64),
    #[error(transparent)]
    Primitive(#[from] PrimitiveError),
    #[error(transparent)]
    Sched(#[from] SchedError),
}

/// Imperfect agreement on window boundaries. Each thread starts every window
/// with an independent Gaussian skew.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyncModel {
    pub sigma: f64,
    /// Idle cycles the sender leaves after the receiver's expected probe.
    pub guard: u64,
}

impl Default for SyncModel {
    fn default() -> Self {
        SyncModel {
            sigma: 27.0,
            guard: 55,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelConfig {
    pub window_cycles: u64,
    pub message: Vec<bool>,
    pub primitive: ProbeKind,
    pub sync: SyncModel,
}

impl ChannelConfig {
    /// A shuffled message with equal numbers of ones and zeros.
    pub fn balanced(window_cycles: u64, bits: usize, primitive: ProbeKind, seed: u64) -> Self {
        let mut message: Vec<bool> = (0..bits).map(|i| i < bits / 2).collect();
        message.shuffle(&mut stream(seed, Stream::Workload));
        ChannelConfig {
            window_cycles,
            message,
            primitive,
            sync: SyncModel::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelReport {
    pub primitive: ProbeKind,
    pub window_cycles: u64,
    pub bits: u64,
    pub errors: u64,
    pub clock_ghz: f64,
    /// Bits per second.
    pub raw_rate: f64,
    pub ber: f64,
    /// Binary-symmetric-channel capacity in bits per second.
    pub capacity: f64,
}

impl ChannelReport {
    /// Report for a given raw rate and error probability, without running.
    pub fn synthetic(raw_rate: f64, ber: f64) -> Self {
        ChannelReport {
            primitive: ProbeKind::FlushDemote,
            window_cycles: 0,
            bits: 0,
            errors: 0,
            clock_ghz: 0.0,
            raw_rate,
            ber,
            capacity: bsc_capacity(raw_rate, ber),
        }
    }
}

/// H(p) in bits.
pub fn binary_entropy(p: f64) -> f64 {
    if p <= 0.0 || p >= 1.0 {
        return 0.0;
    }
    -p * p.log2() - (1.0 - p) * (1.0 - p).log2()
}

pub fn bsc_capacity(raw_rate: f64, ber: f64) -> f64 {
    raw_rate * (1.0 - binary_entropy(ber))
}

/// Slowest nominal latency of the timed step.
fn timed_max(profile: &LatencyProfile, kind: ProbeKind) -> Option<f64> {
    profile.primitive.get(kind).map(|hm| hm.hit.max(hm.miss))
}

/// Nominal worst case of one timed step plus its reset.
pub fn round_latency(profile: &LatencyProfile, kind: ProbeKind) -> Option<f64> {
    let c = &profile.characterize;
    let reset = match kind {
        ProbeKind::StreamReload => c.movnt,
        _ => c.clflush_cached.max(c.clflush_absent),
    };
    timed_max(profile, kind).map(|t| t + reset)
}

/// Per-window start skew of one thread.
struct Skew {
    rng: ChaCha8Rng,
    normal: Option<Normal<f64>>,
}

impl Skew {
    fn new(seed: u64, sigma: f64) -> Self {
        Skew {
            rng: stream(seed, Stream::Sync),
            normal: (sigma > 0.0).then(|| Normal::new(0.0, sigma).expect("finite sigma")),
        }
    }

    fn next(&mut self) -> i64 {
        match &self.normal {
            Some(n) => n.sample(&mut self.rng).round() as i64,
            None => 0,
        }
    }
}

fn at(base: u64, offset: i64) -> u64 {
    base.saturating_add_signed(offset)
}

/// Probes once per window and records the timed latency.
struct Receiver {
    kind: ProbeKind,
    target: VirtualAddress,
    window: u64,
    start: u64,
    windows: u64,
    skew: Skew,
    i: u64,
    step: u8,
    latencies: Vec<u32>,
}

impl Program for Receiver {
    fn next(&mut self, _now: u64, last: Option<&ExecResult>) -> Action {
        loop {
            match self.step {
                0 => {
                    if self.i == self.windows {
                        return Action::Done;
                    }
                    self.step = 1;
                    let base = self.start + self.i * self.window;
                    return Action::WaitUntil(at(base, self.skew.next()));
                }
                1 => {
                    self.step = 2;
                    return Action::Exec(self.kind.timed(self.target));
                }
                2 => {
                    if let Some(r) = last {
                        self.latencies.push(r.latency);
                    }
                    self.step = 3;
                    if let Some(reset) = self.kind.reset(self.target) {
                        return Action::Exec(reset);
                    }
                }
                _ => {
                    self.i += 1;
                    self.step = 0;
                }
            }
        }
    }
}

/// Keeps the target cached through each '1' window; idles through '0's.
struct Sender<'a> {
    message: &'a [bool],
    target: VirtualAddress,
    window: u64,
    start: u64,
    /// Offset of the first load from the sender's window start.
    lead: u64,
    /// Conservative load latency used to stop before the window closes.
    load_cost: u64,
    skew: Skew,
    i: usize,
    end: u64,
    loading: bool,
}

impl Program for Sender<'_> {
    fn next(&mut self, now: u64, _last: Option<&ExecResult>) -> Action {
        loop {
            if self.loading {
                if now + self.load_cost <= self.end {
                    return Action::Exec(crate::exec::Instruction::load(self.target));
                }
                self.loading = false;
                self.i += 1;
            }
            let Some(&bit) = self.message.get(self.i) else {
                return Action::Done;
            };
            let skew = self.skew.next();
            if !bit {
                self.i += 1;
                continue;
            }
            let base = self.start + self.i as u64 * self.window;
            self.end = at(base + self.window, skew);
            self.loading = true;
            return Action::WaitUntil(at(base + self.lead, skew));
        }
    }
}

/// Transmits `config.message` between sibling threads through the cache state
/// of one shared read-only line.
pub fn channel_run(
    machine_config: &MachineConfig,
    config: &ChannelConfig,
    seed: u64,
) -> Result<ChannelReport, ChannelError> {
    let kind = config.primitive;
    let profile = &machine_config.latency;
    let (Some(hm), Some(round), Some(timed)) = (
        profile.primitive.get(kind),
        round_latency(profile, kind),
        timed_max(profile, kind),
    ) else {
        return Err(ChannelError::Unsupported(kind));
    };
    let window = config.window_cycles;
    if (window as f64) <= round {
        return Err(ChannelError::WindowTooSmall { window, round });
    }
    let sigma = config.sync.sigma;
    if !(sigma.is_finite() && sigma >= 0.0) {
        return Err(ChannelError::Sigma(sigma));
    }
    if machine_config.threads_per_core < 2 {
        return Err(ChannelError::NoSibling);
    }

    let mut lab = Lab::new(machine_config.clone(), seed)?;
    let target = lab.target_for(kind);
    let threshold = Threshold::midpoint(kind, hm.hit, hm.miss);
    lab.machine.set_context(kind.context());
    lab.machine
        .execute(lab.attacker, crate::exec::Instruction::clflush(target));

    let bits = config.message.len();
    let start = window + (8.0 * sigma).ceil() as u64;
    let mut receiver = Receiver {
        kind,
        target,
        window,
        start,
        windows: bits as u64 + 1,
        skew: Skew::new(child_seed(seed, 0), sigma),
        i: 0,
        step: 0,
        latencies: Vec::with_capacity(bits + 1),
    };
    let mut sender = Sender {
        message: &config.message,
        target,
        window,
        start,
        lead: timed.ceil() as u64 + config.sync.guard,
        load_cost: profile.characterize.load_memory.ceil() as u64,
        skew: Skew::new(child_seed(seed, 1), sigma),
        i: 0,
        end: 0,
        loading: false,
    };
    run(
        &mut lab.machine,
        vec![(lab.attacker, &mut receiver), (lab.sibling, &mut sender)],
        0,
    )?;

    // the probe in window i + 1 reads bit i
    let errors = config
        .message
        .iter()
        .zip(&receiver.latencies[1..])
        .filter(|(bit, lat)| threshold.accessed(**lat) != **bit)
        .count() as u64;
    let ber = if bits == 0 {
        0.0
    } else {
        errors as f64 / bits as f64
    };
    let raw_rate = profile.clock_ghz * 1e9 / window as f64;
    Ok(ChannelReport {
        primitive: kind,
        window_cycles: window,
        bits: bits as u64,
        errors,
        clock_ghz: profile.clock_ghz,
        raw_rate,
        ber,
        capacity: bsc_capacity(raw_rate, ber),
    })
}

/// One balanced run per window, each on a fresh machine.
pub fn channel_sweep(
    machine_config: &MachineConfig,
    primitive: ProbeKind,
    sync: SyncModel,
    windows: &[u64],
    bits: usize,
    seed: u64,
) -> Result<Vec<ChannelReport>, ChannelError> {
    windows
        .iter()
        .enumerate()
        .map(|(i, &w)| {
            let s = child_seed(seed, i as u64);
            let mut cfg = ChannelConfig::balanced(w, bits, primitive, s);
            cfg.sync = sync;
            channel_run(machine_config, &cfg, s)
        })
        .collect()
}

/// Index of the capacity peak when it is interior and unique: capacity never
/// falls on the way up to it and strictly falls after it.
pub fn single_interior_maximum(curve: &[ChannelReport]) -> Option<usize> {
    let caps: Vec<f64> = curve.iter().map(|r| r.capacity).collect();
    let peak = caps.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1))?.0;
    if peak == 0 || peak + 1 == caps.len() {
        return None;
    }
    let rising = caps[..=peak].windows(2).all(|w| w[0] <= w[1]);
    let falling = caps[peak..].windows(2).all(|w| w[0] > w[1]);
    (rising && falling).then_some(peak)
}
