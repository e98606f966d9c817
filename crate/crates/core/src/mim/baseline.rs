//! Dense masked baseline: the conventional route that embeds *all* units,
//! overwrites the masked ones with a learned input token, and runs the full
//! dense encoder and decoder. Same objective as the sparse path, same
//! parameter count in play, but every stage pays for all `M` units; the
//! benchmark measures the sparse path against this.

use crate::config::HiViTConfig;
use crate::model::blocks::DropFactors;
use crate::model::encoder::{early_stages, embed_units, main_stage};
use crate::model::params::Bound;
use crate::scalar::Scalar;
use crate::tensor::{Rows, Tape, TensorId};

use super::mask::MaskPlan;

/// Token rows (stage-1 granularity) covered by each plan's masked units.
fn masked_token_rows(plans: &[MaskPlan], tokens_per_unit: usize) -> Rows {
    Rows::per_batch(
        plans
            .iter()
            .map(|p| {
                p.masked
                    .iter()
                    .flat_map(|&u| u * tokens_per_unit..(u + 1) * tokens_per_unit)
                    .collect()
            })
            .collect(),
    )
}

/// Dense masked encoding: `[b, num_units, dims[2]]` latents for every unit,
/// with masked units' inputs replaced by `dense.mask_token` right after the
/// embed.
pub fn encode_dense_masked<T: Scalar>(
    t: &mut Tape<T>,
    p: &Bound,
    cfg: &HiViTConfig,
    images: TensorId,
    plans: &[MaskPlan],
    drops: &[DropFactors<T>],
) -> TensorId {
    let m = cfg.num_units();
    let all = Rows::shared((0..m).collect());
    let x = embed_units(t, p, cfg, images, &all);
    let side = cfg.stage1_tokens_per_side();
    let rows = masked_token_rows(plans, side * side);
    let x = t
        .fill_units(x, p.id("dense.mask_token"), &rows)
        .expect("masked token rows in range");
    let pre = early_stages(t, p, cfg, x, m, drops);
    main_stage(t, p, cfg, pre.pre_main, &all, drops)
}
