//! The sparse encoder path: masked units are dropped at the pixel level and
//! never touched again. No activation for a masked unit is ever
//! materialized; the main stage attends over the serialized visible set
//! with position information carried alongside (gathered sin-cos rows and
//! RPE rows for exactly the visible pairs).

use crate::config::HiViTConfig;
use crate::model::blocks::DropFactors;
use crate::model::encoder::{encode_pre_main, main_stage};
use crate::model::params::Bound;
use crate::scalar::Scalar;
use crate::tensor::{Rows, Tape, TensorId};

/// Activations of one sparse pass over the visible units.
pub struct SparseTrace {
    pub stage1_out: Option<TensorId>,
    pub stage2_out: Option<TensorId>,
    /// One token per visible unit, before the main stage.
    pub pre_main: TensorId,
    /// Final visible-token latents, `[b, visible, dims[2]]`.
    pub latent: TensorId,
}

/// Encode only the visible units of `images` (`[b, 3, px, px]`).
pub fn encode_sparse<T: Scalar>(
    t: &mut Tape<T>,
    p: &Bound,
    cfg: &HiViTConfig,
    images: TensorId,
    visible: &Rows,
    drops: &[DropFactors<T>],
) -> SparseTrace {
    let pre = encode_pre_main(t, p, cfg, images, visible, drops);
    let latent = main_stage(t, p, cfg, pre.pre_main, visible, drops);
    SparseTrace {
        stage1_out: pre.stage1_out,
        stage2_out: pre.stage2_out,
        pre_main: pre.pre_main,
        latent,
    }
}
