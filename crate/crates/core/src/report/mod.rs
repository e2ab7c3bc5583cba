//! Run configurations, reference recipes, experiment drivers and figures.

pub mod commands;
pub mod config;
pub mod experiments;
pub mod plot;
pub mod recipes;

pub use config::{CompareConfig, ConflictConfig, Expectations, RunConfig, StudentConfig, TeacherConfig};
pub use experiments::{Experiment, Model, SplitRow, SplitTable, Variant, VariantResult};
pub use recipes::{Check, Recipe};
