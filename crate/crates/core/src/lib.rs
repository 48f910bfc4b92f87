//! Multi-task training for machine reading comprehension.
//!
//! The crate covers the whole pipeline: loading span and cloze datasets,
//! scoring auxiliary samples by cross-entropy difference against the target
//! task, scheduling task-tagged minibatches, and training a compact
//! attention-based reader with the weighted loss.

pub mod corpus;
pub mod error;
pub mod lm;
pub mod metrics;
pub mod model;
pub mod scheduler;
pub mod seed;
pub mod synth;
pub mod trainer;
pub mod weighting;

pub use error::{Error, Result};
