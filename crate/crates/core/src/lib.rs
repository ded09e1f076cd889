//! Fully convolutional sequence-to-sequence voice conversion.
//!
//! The crate is organised bottom-up:
//!
//! * [`kernel`]: a small reverse-mode differentiation tape with the
//!   convolution, normalisation, attention and loss primitives the networks use.
//! * [`features`]: acoustic feature sequences, speaker statistics, frame
//!   stacking and position encodings.
//! * [`model`]: source/target encoders, target decoder and reconstructor.
//! * [`losses`]: decoder, context-preservation and attention losses.
//! * [`trainer`]: batching, Adam, the training loop and checkpoints.
//! * [`inference`]: autoregressive, forward-attention and real-time conversion.
//! * [`metrics`]: DTW, MCD, log-F0 correlation and local duration ratio.
//! * [`corpus`]: synthetic parallel corpora with known ground truth.
//! * [`config`]: the run configuration file.
//! * [`pipeline`]: corpus-to-report steps shared by the command line.

pub mod config;
pub mod corpus;
pub mod error;
pub mod features;
pub mod inference;
pub mod kernel;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod trainer;

pub use error::{Error, Result};

/// Scalar type used by every numeric routine.
#[cfg(not(feature = "f32"))]
pub type Real = f64;
/// Scalar type used by every numeric routine.
#[cfg(feature = "f32")]
pub type Real = f32;
