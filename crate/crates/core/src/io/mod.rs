//! Files: datasets, checkpoints, run configuration and synthetic data.

pub mod checkpoint;
pub mod dataset;
pub mod runconfig;
pub mod synthetic;

pub use checkpoint::{checkpoint_bytes, checkpoint_from_bytes, load_checkpoint, save_checkpoint};
pub use dataset::{dataset_csv, load_dataset, parse_dataset, save_dataset, Dataset};
pub use runconfig::{parse_duration, GranularityEntry, RunConfig, WindowSize};
pub use synthetic::{generate_synthetic, static_gaussian_params, SyntheticKind};
