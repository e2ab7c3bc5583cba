//! Cross-head knowledge distillation for tiny dense object detectors.

pub mod assign;
pub mod conflict;
pub mod detector;
pub mod engine;
pub mod error;
pub mod geometry;
pub mod harness;
pub mod losses;
pub mod nn;
pub mod objective;
pub mod report;
pub mod scalar;
#[cfg(test)]
mod testutil;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type DetectorF32 = detector::DetectorModel<f32>;
pub type DetectorF64 = detector::DetectorModel<f64>;
pub type PredictionMapF32 = detector::PredictionMap<f32>;
pub type PredictionMapF64 = detector::PredictionMap<f64>;
pub type SampleF32 = harness::Sample<f32>;
pub type SampleF64 = harness::Sample<f64>;
