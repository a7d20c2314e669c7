//! Multi-agent trajectory prediction with relational attention at two
//! scales: pair-wise attention over a fully connected directed graph, and
//! group-wise attention over hyperedges inferred at runtime by a learnable
//! similarity threshold trained with a straight-through surrogate gradient.
//!
//! The crate is self-contained: dense arrays and reverse-mode
//! differentiation live in [`numerics`], model blocks in [`features`],
//! [`grouping`], [`pairwise`], [`hyper`], [`encoder`] and [`decoder`], and
//! the operational shell (training, evaluation, counting, gradient
//! checking) in [`train`], [`metrics`], [`counting`] and [`gradcheck`].
//!
//! See the `examples/` directory for runnable entry points covering each
//! major capability, and the `groupcast` binary for the file-based CLI.

pub mod config;
pub mod counting;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod features;
pub mod gradcheck;
pub mod grouping;
pub mod hyper;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod pairwise;
pub mod params;
pub mod train;

pub use error::{Error, Result};
