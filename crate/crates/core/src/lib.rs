//! Teacher nonverbal immediacy (NVI) estimation from classroom video.
//!
//! The crate covers the whole batch pipeline: dataset manifests and splits,
//! perception backends, the gesture-intensity and perceived-distance frame
//! regressors, segment-level fusion with the NVI perceptron, rater statistics,
//! evaluation reports and deterministic synthetic data.

pub mod data;
pub mod error;
pub mod evaluation;
pub mod fusion;
pub mod model;
pub mod nn;
pub mod perception;
pub mod pipeline;
pub mod regressors;
pub mod stats;
pub mod synth;
pub mod training;

pub use error::{Error, Result, Stage};
