//! Masked concept learning with a multi-layer concept map.
//!
//! An encoder runs on the visible patches of a masked image alongside a set
//! of learnable concept tokens; concept snapshots taken every second encoder
//! layer feed a decoder half as deep, which reconstructs the masked patches
//! by cross-attending to them.

pub mod autograd;
pub mod data;
pub mod error;
pub mod losses;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod trainer;

pub use autograd::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use tensor::{Dtype, Real, Tensor};
