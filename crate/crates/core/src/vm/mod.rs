//! Virtual memory: address layout, radix page tables, split TLBs and
//! paging-structure caches.

pub mod addr;
pub mod table;
pub mod tlb;

pub use addr::{Level, VaParts, VirtualAddress, PAGE_SIZE};
pub use table::{
    AddressSpace, FrameAllocator, MemType, PageFlags, PageTableEntry, Walk, WalkStep,
    KERNEL_REGION_END, KERNEL_REGION_START,
};
pub use tlb::{
    CounterEvent, Events, LruMap, PermClass, TlbConfig, TlbEntry, TlbState, TranslationKind,
    TranslationOutcome, WalkDepth,
};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum VmError {
    #[error("page is not present")]
    NotPresent,
    #[error("address {0} is not page aligned")]
    Unaligned(VirtualAddress),
    #[error("mapping at {0} conflicts with an existing mapping")]
    MappingConflict(VirtualAddress),
}
