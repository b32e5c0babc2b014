//! Region descriptors, the memory bank, and hierarchical similarity search.

mod bank;
mod query;
mod roi;

pub use bank::{
    build_bank, load_bank, most_confident, retained_count, save_bank, BankEntry, BankParams,
    BankScene, MemoryBank, BANK_VERSION, DEFAULT_KEEP_FRACTION,
};
pub use query::{
    query_hierarchical, RetrievalMatch, RetrievalParams, DEFAULT_TOP_IMAGES, DEFAULT_TOP_REGIONS,
};
pub use roi::{cosine, normalized, roi_align, unit_dot, PatchGrid, RegionFeature};
