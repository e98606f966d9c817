//! Hierarchical vision transformer with unit-exact sparse masking.
//!
//! The crate is built around one structural property: every operation before
//! the final, global-attention stage acts strictly inside a 16×16-px masking
//! unit (MLPs, layer norms, and 2×2 patch merges that never cross a unit
//! boundary). Dropping masked units at the input is therefore *exact*: the
//! visible units' activations are bit-identical to a dense pass, and the
//! main stage simply attends over the serialized visible set.
//!
//! Modules:
//! - [`tensor`]: dense tensors with reverse-mode autodiff on a per-pass tape
//! - [`config`]: model geometry, presets, and the key=value config format
//! - [`model`]: parameters, blocks, the dense encoder, analytic profiling
//! - [`mim`]: mask plans, the sparse encoder, decoder, loss, and the
//!   dense/sparse equivalence oracles
//! - [`train`]: AdamW/LARS, schedules, layer-wise decay, training loops
//! - [`data`]: corpus + checkpoint binary formats, synthesis, metrics
//! - [`verify`]: the runnable invariant suite behind `hivit verify`
//! - [`bench`]: wall-clock sparse-vs-dense comparison behind `hivit bench`

pub mod bench;
pub mod config;
pub mod data;
pub mod mim;
pub mod model;
pub mod parallel;
pub mod scalar;
pub mod tensor;
pub mod train;
pub mod verify;

pub use config::HiViTConfig;
pub use scalar::Scalar;
pub use tensor::{Tape, TensorId};
