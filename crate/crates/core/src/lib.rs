//! Differentially private local clustering of class centers on the unit
//! sphere, a consensus-aware margin-softmax loss, and a simulated federated
//! training loop built on them.
//!
//! Heavy inner loops (pairwise angles, cap counting, per-sample loss terms,
//! per-client work) go through [`exec::Exec`], which uses rayon when the
//! `parallel` feature is enabled and falls back to plain iteration otherwise.

pub mod dp;
pub mod dplc;
pub mod error;
pub mod exec;
pub mod federation;
pub mod geometry;
pub mod linalg;
pub mod losses;
pub mod rng;
pub mod special;
pub mod synth;

pub use error::{Error, Result};
pub use exec::Exec;
