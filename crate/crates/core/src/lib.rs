//! Tag-based semantic features for scene classification.
//!
//! Pipeline: tag corpus → per-category filter banks (tags semantically close to
//! the category label) → codebook of filter words → per-document similarity
//! histograms → one-vs-rest RBF SVM.

pub mod classifier;
pub mod cli;
pub mod corpus;
pub mod embeddings;
pub mod error;
pub mod eval;
pub mod features;
pub mod filterbank;
mod fsutil;
pub mod smo;
pub mod synth;

pub use error::{Error, ErrorKind, Result};
pub use fsutil::write_atomic;
