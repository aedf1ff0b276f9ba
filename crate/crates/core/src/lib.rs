//! Multi-space cross-modal retrieval: feature-specific common spaces with
//! attention fusion, a partial de-correlation loss that diversifies
//! negative-sample rankings across spaces, and an entropy-gated fair
//! multi-space triplet ranking loss, plus training and evaluation tooling.

pub mod checkpoint;
pub mod cli;
pub mod error;
pub mod feature_store;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod retrieval_eval;
pub mod trainer;

pub use error::{Error, Result};
