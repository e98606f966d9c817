//! Model definition: named parameters, position tables, block forwards, the
//! dense encoder, and the analytic parameter/FLOP profiler.

pub mod blocks;
pub mod encoder;
pub mod params;
pub mod pos;
pub mod profile;

pub use encoder::{forward_dense, logits_from_tokens, DenseTrace};
pub use params::{Bound, ParamEntry, ParamSet};
pub use profile::{profile_config, ProfileReport, ProfileRow};
