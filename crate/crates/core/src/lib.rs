//! Confidence-filtered iterative pseudo-labeling for CTC sequence models.
//!
//! A teacher is trained on a small labeled split, transcribes the unlabeled
//! split, and keeps only hypotheses whose mean per-frame max log-probability
//! clears a decision boundary. The student is retrained on the fused set and
//! the loop repeats. The boundary itself is tuned either by a descending sweep
//! or by matching score-filtered and WER-filtered selections on a probe set.
//!
//! Everything runs on a synthetic token-conditioned Gaussian corpus so the
//! whole loop finishes in seconds.

pub mod cli;
pub mod corpus;
pub mod ctc;
pub mod error;
pub mod jsonl;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod pseudolabel;

pub use error::{Error, Result};
