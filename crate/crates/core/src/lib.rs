//! Self-knowledge-distillation based self-supervised learning on grayscale images.
//!
//! The crate is organized as a small stack: a reverse-mode differentiable
//! tensor engine ([`tensor`]), stochastic two-view augmentation ([`augment`]),
//! the three-network online/target/distillation-head model ([`model`]), the
//! loss mathematics including batch-similarity soft-target propagation
//! ([`losses`]), dataset handling ([`data`]), the training orchestration and
//! checkpoint format ([`train`]), and one-vs-rest evaluation ([`metrics`]).

pub mod augment;
pub mod data;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod raster;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
