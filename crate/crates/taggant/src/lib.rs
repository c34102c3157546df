//! Clean-label dataset signing ("data taggants") and black-box detection of
//! models trained on the signed data.
//!
//! The pipeline: generate secret key image/label pairs, perturb a small
//! signing set so its training gradients align with the key gradients, ship
//! the signed dataset, then probe a suspect model with the key images and
//! run an exact binomial test on top-k hits.
//!
//! See the `examples/` directory for one runnable example per capability,
//! and the `taggant` binary for the file-based workflow.

pub mod augment;
pub mod data;
pub mod detector;
pub mod diffcore;
pub mod error;
pub mod experiment;
pub mod keys;
pub mod models;
pub mod signer;
pub mod stealth;
pub mod trainer;

pub use error::{Error, Result};
