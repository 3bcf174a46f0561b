//! Worn/unworn person–clothing relationship classification.
//!
//! A pre-activation residual backbone receives the person and clothing masks
//! through per-bottleneck soft attention units (or, as baselines, through the
//! network input or through bounding boxes). Around the model sit a synthetic
//! scene generator, a training/evaluation harness and the triplet-confidence
//! composition used downstream of a detector.

pub mod data;
pub mod error;
pub mod nn;
pub mod relation;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
