//! Synthetic data, optimization, evaluation and diagnostics for toy runs.

pub mod dataset;
pub mod diagnostics;
pub mod eval;
pub mod optim;
pub mod train;

pub use dataset::{generate_sample, generate_split, Sample, Shape, Split, SyntheticDatasetSpec};
pub use diagnostics::{grad_heatmap, read_heatmap_csv, track_distances, write_heatmap_csv, DistanceSums, Distances};
pub use eval::{evaluate_ap, EvalConfig};
pub use optim::{Sgd, SgdConfig};
pub use train::{train, Datasets, EpochRecord, LossPipeline, TrainConfig, TrainLog, TrainRun};

#[cfg(test)]
mod tests;
