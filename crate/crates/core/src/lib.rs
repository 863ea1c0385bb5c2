//! Training-free spatial modulation of ControlNet guidance.
//!
//! An auxiliary sampling pass with a surrogate prompt (one that matches the
//! visual condition) records cross-attention. The maps of tokens shared with
//! the real prompt become per-layer control-scale masks; the maps of the
//! tokens that conflict with it become an attention bias for the target
//! tokens. The target pass then applies both.

pub mod adapters;
pub mod artifacts;
pub mod attention;
pub mod backbone;
pub mod bias;
pub mod condition;
pub mod container;
pub mod error;
pub mod grid;
pub mod image_io;
pub mod jobfile;
pub mod mask;
pub mod modulation;
pub mod pipeline;
pub mod prompt;
pub mod rng;
pub mod sampler;
pub mod scorer;
pub mod tensor;
pub mod toy;

pub use error::{Error, Result};
