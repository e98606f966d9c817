//! Reconstruction decoder: visible latents are projected to the decoder
//! width, masked slots are filled with a learned token, fixed positions are
//! added over the full unit grid, and a short stack of global attention
//! blocks regresses every unit's pixels.

use crate::config::HiViTConfig;
use crate::model::blocks::attn_block_forward;
use crate::model::encoder::gathered_sincos;
use crate::model::params::Bound;
use crate::scalar::Scalar;
use crate::tensor::{Rows, Tape, TensorId};

fn decoder_trunk<T: Scalar>(
    t: &mut Tape<T>,
    p: &Bound,
    cfg: &HiViTConfig,
    mut x: TensorId,
) -> TensorId {
    let b = t.shape(x)[0];
    let all = Rows::shared((0..cfg.num_units()).collect());
    let pos = gathered_sincos(t, cfg.dec_dim, cfg.units_per_side(), &all, b);
    x = t.add(x, pos).expect("decoder pos matches");
    for i in 0..cfg.dec_depth {
        x = attn_block_forward(t, p, &format!("dec.{i}"), x, cfg.dec_heads, None, "mlp", &None);
    }
    let g = p.id("dec.norm.g");
    let nb = p.id("dec.norm.b");
    let x = t.layer_norm(x, g, nb, crate::model::blocks::LN_EPS).expect("decoder norm");
    let y = t.matmul(x, p.id("dec.head.w")).expect("pixel head width");
    t.add_bias(y, p.id("dec.head.b")).expect("pixel head bias")
}

/// Decode from sparse visible latents: scatter into the full grid with the
/// learned mask token, then reconstruct all units.
/// Returns `[b, num_units, unit_pixels]`.
pub fn decode<T: Scalar>(
    t: &mut Tape<T>,
    p: &Bound,
    cfg: &HiViTConfig,
    latent: TensorId,
    visible: &Rows,
) -> TensorId {
    let y = t.matmul(latent, p.id("dec.embed.w")).expect("decoder embed width");
    let y = t.add_bias(y, p.id("dec.embed.b")).expect("decoder embed bias");
    let full = t
        .scatter_units(y, p.id("dec.mask_token"), visible, cfg.num_units())
        .expect("scatter into full grid");
    decoder_trunk(t, p, cfg, full)
}

/// Decode fully-populated latents (the dense baseline): no scatter, every
/// unit already has a latent.
pub fn decode_full<T: Scalar>(
    t: &mut Tape<T>,
    p: &Bound,
    cfg: &HiViTConfig,
    latent: TensorId,
) -> TensorId {
    let y = t.matmul(latent, p.id("dec.embed.w")).expect("decoder embed width");
    let y = t.add_bias(y, p.id("dec.embed.b")).expect("decoder embed bias");
    decoder_trunk(t, p, cfg, y)
}
