//! Streaming Transformer acoustic-model toolkit.

// Numeric inner loops index several arrays with one variable; iterator
// rewrites obscure the stride arithmetic.
#![allow(clippy::needless_range_loop)]
//!
//! A desk-scale library for the mechanisms behind chunk-recurrent and
//! mask-lookahead streaming Transformers in hybrid speech recognition:
//! multi-head self-attention, depth-scaled initialization, Pre-Norm /
//! Post-Norm residual blocks, convolutional front-ends, receptive-field and
//! latency accounting, and chunk recurrence with stop-gradient hidden-state
//! caching. A minimal reverse-mode tape underneath makes every mechanism
//! verifiable: gradients against central finite differences, streaming
//! against offline block-mask oracles.

pub mod attention;
pub mod error;
pub mod gradcheck;
pub mod init;
pub mod io;
pub mod layers;
pub mod model;
pub mod rng;
pub mod streaming;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Mask, Scalar, Tensor};
