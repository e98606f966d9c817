//! Masked image modeling: mask plans, the sparse encoder path that skips
//! masked units entirely, the reconstruction decoder and loss, the dense
//! masked baseline it is benchmarked against, and the dense/sparse
//! equivalence oracles.

pub mod baseline;
pub mod decoder;
pub mod loss;
pub mod mask;
pub mod oracle;
pub mod sparse;

pub use mask::{MaskError, MaskPlan};
pub use oracle::{oracle_check, OracleReport};
pub use sparse::{encode_sparse, SparseTrace};
