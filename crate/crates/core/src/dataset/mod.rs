//! Fingerprint datasets: deterministic generation, the `RISD` binary format,
//! and seeded splits.

mod format;
mod generate;
mod split;

pub use format::{
    load_dataset, read_dataset, record_size, sha256_hex, DatasetHeader, DatasetReader, DatasetWriter, PhaseMode,
    SampleRecord, FORMAT_VERSION, MAGIC,
};
pub use generate::{
    fixed_phase_profile, generate_dataset, sample_phase_shifts, simulate_sample, GenerationParams, SampleSeeds,
    PHASE_OPT_MAX_ITERS, PHASE_OPT_TOL,
};
pub use split::{split_dataset, split_indices, Split};
