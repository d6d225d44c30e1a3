//! Low-rank pre-factorized network training at desk scale.
//!
//! The crate builds vanilla and hybrid (partially factorized) networks,
//! counts their parameters and forward-pass MACs exactly, trains them with
//! SGD, converts a partially trained vanilla model into its low-rank
//! counterpart via a balanced truncated SVD, and models the ring-allreduce
//! communication cost of exchanging their gradients.
//!
//! Data-parallel inner loops (matrix products, per-layer SVDs) run on rayon
//! when the default `parallel` feature is enabled and fall back to
//! sequential code otherwise; both paths produce bitwise-identical results.

pub mod commsim;
pub mod error;
pub mod factorize;
pub mod io;
pub mod layers;
pub mod numerics;
pub mod train;
pub mod zoo;

pub mod cli;

pub use error::{Error, Result};
