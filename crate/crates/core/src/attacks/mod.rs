//! End-to-end attacks: a cache covert channel between sibling threads and a
//! kernel base scan.

pub mod covert;
pub mod kaslr;

pub use covert::{
    binary_entropy, bsc_capacity, channel_run, channel_sweep, single_interior_maximum,
    ChannelConfig, ChannelError, ChannelReport, SyncModel,
};
pub use kaslr::{
    kaslr_evaluate, kaslr_locate, kaslr_randomize, kaslr_scan, KaslrError, KaslrEvaluation,
    KaslrLayout, KaslrScan,
};
