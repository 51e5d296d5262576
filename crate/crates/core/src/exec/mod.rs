//! Instruction semantics, timing and the cooperative thread scheduler.

pub mod instr;
pub mod latency;
pub mod machine;
pub mod sched;

pub use instr::{InstrKind, Instruction, PrefetchHint};
pub use latency::{
    CharacterizeTable, HitMiss, LatencyContext, LatencyProfile, NoiseModel, PageWalkTable,
    PrimitiveTable, ProbeKind, ProfileError, TlbProbeRow,
};
pub use machine::{
    Countermeasures, ExecError, ExecResult, Fault, FaultKind, Machine, MachineConfig, PerfCounters,
    Thread,
};
pub use sched::{run, Action, FnProgram, Program, RunStats, SchedError};

#[cfg(test)]
mod tests;
