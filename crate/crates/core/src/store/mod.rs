//! On-disk formats: checkpoints, enrollment records, datasets, run
//! configuration and training curves.

mod checkpoint;
mod config;
mod dataset;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta, EnrollmentRecord, MAGIC, VERSION};
pub use config::{curve_csv, parse_flat, RunConfig};
pub use dataset::{load_dataset, read_image, write_dataset, LoadedDataset};
