//! Optimization loop, checkpoint persistence, and training configuration.

pub mod checkpoint;
pub mod optim;
pub mod trainer;

pub use checkpoint::{
    load_checkpoint, read_manifest, save_checkpoint, CheckpointError, CheckpointManifest,
    EntryKind, ManifestEntry, TrainMeta, FORMAT_VERSION,
};
pub use optim::{adam_step, poly_lr, AdamHyper, AdamState, OptimError};
pub use trainer::{trace_csv, train_loop, TraceRow, TrainConfig, TrainError, TrainOutcome};
