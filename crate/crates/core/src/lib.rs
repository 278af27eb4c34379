//! Lorentz-model hyperbolic alignment objectives with a soft
//! mixture-of-experts fusion layer, trained at desk scale on synthetic
//! hierarchical pair data, with tape-based reverse-mode differentiation and
//! finite-difference verification throughout.

pub mod checkpoint;
pub mod data;
pub mod entailment;
pub mod error;
mod fsutil;
pub mod gradcheck;
pub mod lorentz;
pub mod model;
pub mod softmoe;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tape::{ElementwiseKind, Gradients, Tape};
pub use tensor::Tensor;
