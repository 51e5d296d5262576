//! Deterministic simulator of a cache/TLB hierarchy with `cldemote`, plus the
//! probes and attacks built on top of it.

pub mod attacks;
pub mod cache;
pub mod evset;
pub mod exec;
pub mod harness;
pub mod primitives;
pub mod rng;
pub mod taxonomy;
pub mod vm;
