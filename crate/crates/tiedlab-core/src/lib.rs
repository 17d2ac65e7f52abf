//! CPU kernels and verification tooling for tied block operators.
//!
//! The crate implements convolution and fully connected layers whose channel
//! axis is partitioned into equal blocks that share one thin filter bank
//! (tied block convolution and friends), alongside their untied references,
//! explicit backward passes, a finite-difference gradient checker, exact
//! parameter/MAC accounting, a declarative model builder and a small
//! deterministic training loop. Everything is 64-bit float and seeded, so
//! any two computation paths that should agree can be compared bitwise.

pub mod autograd;
pub mod count;
pub mod diff;
pub mod error;
pub mod model;
pub mod ops;
pub mod rng;
pub mod tensor;
pub mod tied;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use ops::{ConvSpec, ConvWeights};
pub use rng::Rng;
pub use tensor::{Tensor2, Tensor4};
