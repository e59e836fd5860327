//! Language-guided deep metric learning over frozen features.
//!
//! The crate trains a small embedding head with a standard metric learning
//! objective plus a term that distills the similarity structure of language
//! embeddings (expert class names or classifier pseudolabels) into the
//! image similarity matrix.

pub mod cli;
pub mod datastore;
pub mod dd;
pub mod error;
pub mod eval;
pub mod guidance;
pub mod linalg;
pub mod losses;
pub mod pseudolabel;
pub mod rng;
pub mod simcore;
pub mod tape;
pub mod trainer;

pub use error::{Error, Result};
pub use linalg::{Matrix, Real};
