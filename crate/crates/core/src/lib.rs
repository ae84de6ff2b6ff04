//! Semantic-sensitivity evaluation for NLI classifiers.
//!
//! The pipeline keeps only records a classifier already gets right, generates
//! paraphrases of each hypothesis, accepts a paraphrase only when the
//! classifier judges it and the original to entail each other, and then
//! measures how often an accepted paraphrase changes the prediction.

pub mod analysis;
pub mod annotation;
pub mod artifacts;
pub mod backend;
pub mod error;
pub mod ingest;
pub mod metrics;
pub mod pipeline;
pub mod report;
pub mod text;
pub mod types;
pub mod variation;

pub use error::{Error, Result};
pub use types::{argmax_label, opposite_label, Label, LabelDistribution, NliRecord, Prediction};
