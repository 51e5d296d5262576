use std::fmt;

use serde::{Deserialize, Serialize};

use crate::vm::VirtualAddress;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PrefetchHint {
    T0,
    T1,
    T2,
    Nta,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InstrKind {
    Load,
    Store,
    Clflush,
    Cldemote,
    Prefetch(PrefetchHint),
    Movnt,
    Fence,
}

/// One memory instruction. `Fence` carries no operand.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Instruction {
    pub kind: InstrKind,
    pub operand: Option<VirtualAddress>,
}

impl Instruction {
    fn with(kind: InstrKind, va: VirtualAddress) -> Self {
        Instruction {
            kind,
            operand: Some(va),
        }
    }

    pub fn load(va: VirtualAddress) -> Self {
        Self::with(InstrKind::Load, va)
    }

    pub fn store(va: VirtualAddress) -> Self {
        Self::with(InstrKind::Store, va)
    }

    pub fn clflush(va: VirtualAddress) -> Self {
        Self::with(InstrKind::Clflush, va)
    }

    pub fn cldemote(va: VirtualAddress) -> Self {
        Self::with(InstrKind::Cldemote, va)
    }

    pub fn prefetch(hint: PrefetchHint, va: VirtualAddress) -> Self {
        Self::with(InstrKind::Prefetch(hint), va)
    }

    pub fn movnt(va: VirtualAddress) -> Self {
        Self::with(InstrKind::Movnt, va)
    }

    pub fn fence() -> Self {
        Instruction {
            kind: InstrKind::Fence,
            operand: None,
        }
    }
}

impl fmt::Display for Instruction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self.kind {
            InstrKind::Load => "load",
            InstrKind::Store => "store",
            InstrKind::Clflush => "clflush",
            InstrKind::Cldemote => "cldemote",
            InstrKind::Prefetch(PrefetchHint::T0) => "prefetcht0",
            InstrKind::Prefetch(PrefetchHint::T1) => "prefetcht1",
            InstrKind::Prefetch(PrefetchHint::T2) => "prefetcht2",
            InstrKind::Prefetch(PrefetchHint::Nta) => "prefetchnta",
            InstrKind::Movnt => "movnti",
            InstrKind::Fence => "mfence",
        };
        match self.operand {
            Some(va) => write!(f, "{name} [{va}]"),
            None => f.write_str(name),
        }
    }
}
