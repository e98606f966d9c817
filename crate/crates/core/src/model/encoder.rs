//! Encoder forwards. One code path serves both the dense pass (all units)
//! and the sparse pass (a visible subset): every stage takes the unit row
//! set explicitly, and nothing before the main stage looks outside a unit.

use crate::config::HiViTConfig;
use crate::scalar::Scalar;
use crate::tensor::{Rows, Tape, TensorId};

use super::blocks::{
    attn_block_forward, cross_unit_leak, early_block_forward, final_norm, merge_forward,
    DropFactors,
};
use super::params::Bound;
use super::pos::{rpe_pairs, sincos_2d};

/// Intermediate activations of a dense pass, kept for the equivalence
/// oracles and the supervised head.
pub struct DenseTrace {
    /// After stage-1 blocks, before the first merge (absent for a
    /// direct-embed model).
    pub stage1_out: Option<TensorId>,
    /// After stage-2 blocks, before the second merge.
    pub stage2_out: Option<TensorId>,
    /// One token per unit, before position embeddings and the main stage.
    pub pre_main: TensorId,
    /// Final tokens after the main stage and last norm.
    pub tokens: TensorId,
}

/// Everything up to (not including) the main stage, over the given units.
pub struct PreMain {
    pub stage1_out: Option<TensorId>,
    pub stage2_out: Option<TensorId>,
    pub pre_main: TensorId,
}

pub fn no_drops<T: Scalar>(cfg: &HiViTConfig) -> Vec<DropFactors<T>> {
    vec![None; cfg.depths.iter().sum()]
}

/// Cut the selected units out of `images` (`[b, 3, px, px]`) and embed their
/// inner patches: `[b, sel * side^2, embed_dim]`, tokens unit-major in the
/// order of `rows`.
pub fn embed_units<T: Scalar>(
    t: &mut Tape<T>,
    p: &Bound,
    cfg: &HiViTConfig,
    images: TensorId,
    rows: &Rows,
) -> TensorId {
    let b = t.shape(images)[0];
    let sel = rows.sel_len();
    let side = cfg.stage1_tokens_per_side();
    let plen = 3 * cfg.inner_patch * cfg.inner_patch;
    let units = t.extract_units(images, rows, cfg.patch_geom()).expect("unit extraction");
    let flat = t.reshape(units, &[b, sel * side * side, plen]).expect("token rows");
    let w = p.id("embed.w");
    let bias = p.id("embed.b");
    let x = t.matmul(flat, w).expect("embed width");
    let x = t.add_bias(x, bias).expect("embed bias");
    let g = p.id("patch_norm.g");
    let nb = p.id("patch_norm.b");
    t.layer_norm(x, g, nb, super::blocks::LN_EPS).expect("patch norm")
}

/// Per-unit stages over already-embedded tokens (`sel` units, unit-major).
pub fn early_stages<T: Scalar>(
    t: &mut Tape<T>,
    p: &Bound,
    cfg: &HiViTConfig,
    mut x: TensorId,
    sel: usize,
    drops: &[DropFactors<T>],
) -> PreMain {
    assert_eq!(drops.len(), cfg.depths.iter().sum::<usize>(), "one drop slot per block");
    if cfg.direct_embed() {
        return PreMain { stage1_out: None, stage2_out: None, pre_main: x };
    }
    let side = cfg.stage1_tokens_per_side();

    for i in 0..cfg.depths[0] {
        x = early_block_forward(t, p, &format!("s1.{i}"), x, &drops[i]);
        if cfg.debug_cross_unit_mix {
            x = cross_unit_leak(t, x, sel);
        }
    }
    let stage1_out = x;
    x = merge_forward(t, p, "merge1", x, sel, side);

    for i in 0..cfg.depths[1] {
        x = early_block_forward(t, p, &format!("s2.{i}"), x, &drops[cfg.depths[0] + i]);
        if cfg.debug_cross_unit_mix {
            x = cross_unit_leak(t, x, sel);
        }
    }
    let stage2_out = x;
    x = merge_forward(t, p, "merge2", x, sel, side / 2);

    PreMain { stage1_out: Some(stage1_out), stage2_out: Some(stage2_out), pre_main: x }
}

/// Embed the selected units and run the per-unit stages.
pub fn encode_pre_main<T: Scalar>(
    t: &mut Tape<T>,
    p: &Bound,
    cfg: &HiViTConfig,
    images: TensorId,
    rows: &Rows,
    drops: &[DropFactors<T>],
) -> PreMain {
    let x = embed_units(t, p, cfg, images, rows);
    early_stages(t, p, cfg, x, rows.sel_len(), drops)
}

/// Fixed sine-cosine rows for the selected units, one `[sel, dim]` block per
/// batch element, built host-side (it is a constant).
pub fn gathered_sincos<T: Scalar>(
    t: &mut Tape<T>,
    dim: usize,
    grid: usize,
    rows: &Rows,
    batch: usize,
) -> TensorId {
    let table = sincos_2d::<T>(dim, grid);
    let sel = rows.sel_len();
    let mut data = Vec::with_capacity(batch * sel * dim);
    for bi in 0..batch {
        for &u in rows.for_batch(bi) {
            data.extend_from_slice(&table[u * dim..(u + 1) * dim]);
        }
    }
    t.constant(&[batch, sel, dim], data).expect("pos constant")
}

/// RPE table rows for every (q, k) pair of the selected units.
pub fn rpe_rows(grid: usize, rows: &Rows, batch: usize) -> Rows {
    match rows {
        Rows::Shared(units) => Rows::shared(rpe_pairs(grid, units)),
        Rows::PerBatch(lists) => {
            assert_eq!(lists.len(), batch);
            Rows::per_batch(lists.iter().map(|u| rpe_pairs(grid, u)).collect())
        }
    }
}

/// Main stage over one token per selected unit: absolute positions, the
/// attention blocks (with RPE rows for exactly these units), final norm.
pub fn main_stage<T: Scalar>(
    t: &mut Tape<T>,
    p: &Bound,
    cfg: &HiViTConfig,
    x: TensorId,
    rows: &Rows,
    drops: &[DropFactors<T>],
) -> TensorId {
    let shape = t.shape(x).to_vec();
    let (b, _n, d) = (shape[0], shape[1], shape[2]);
    let grid = cfg.units_per_side();
    let mut x = x;
    if cfg.use_abs_pos {
        let pos = gathered_sincos(t, d, grid, rows, b);
        x = t.add(x, pos).expect("pos matches tokens");
    }
    let pairs = cfg.use_rpe.then(|| rpe_rows(grid, rows, b));
    let early = cfg.depths[0] + cfg.depths[1];
    for i in 0..cfg.depths[2] {
        let rpe = pairs.as_ref().map(|pr| (p.id(&format!("s3.{i}.rpe")), pr));
        x = attn_block_forward(
            t,
            p,
            &format!("s3.{i}"),
            x,
            cfg.heads,
            rpe,
            "mlp",
            &drops[early + i],
        );
    }
    final_norm(t, p, x)
}

/// Dense pass over all units in row-major order.
pub fn forward_dense<T: Scalar>(
    t: &mut Tape<T>,
    p: &Bound,
    cfg: &HiViTConfig,
    images: TensorId,
    drops: &[DropFactors<T>],
) -> DenseTrace {
    let all = Rows::shared((0..cfg.num_units()).collect());
    let pre = encode_pre_main(t, p, cfg, images, &all, drops);
    let tokens = main_stage(t, p, cfg, pre.pre_main, &all, drops);
    DenseTrace {
        stage1_out: pre.stage1_out,
        stage2_out: pre.stage2_out,
        pre_main: pre.pre_main,
        tokens,
    }
}

/// Mean-pooled classification logits.
pub fn logits_from_tokens<T: Scalar>(t: &mut Tape<T>, p: &Bound, tokens: TensorId) -> TensorId {
    let pooled = t.mean_tokens(tokens).expect("tokens are [b, n, d]");
    let y = t.matmul(pooled, p.id("head.w")).expect("head width");
    t.add_bias(y, p.id("head.b")).expect("head bias")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::params::ParamSet;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toy_images<T: Scalar>(b: usize, cfg: &HiViTConfig, seed: u64) -> Vec<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..b * 3 * cfg.img_size * cfg.img_size)
            .map(|_| T::from_f64(rng.gen::<f64>() * 2.0 - 1.0))
            .collect()
    }

    #[test]
    fn dense_forward_shapes() {
        let cfg = HiViTConfig::preset("toy").unwrap();
        let set: ParamSet<f32> = ParamSet::build(&cfg, 1, false);
        let mut t: Tape<f32> = Tape::new();
        let p = set.bind(&mut t);
        let img = t
            .constant(&[2, 3, cfg.img_size, cfg.img_size], toy_images(2, &cfg, 5))
            .unwrap();
        let drops = no_drops::<f32>(&cfg);
        let trace = forward_dense(&mut t, &p, &cfg, img, &drops);
        assert_eq!(t.shape(trace.stage1_out.unwrap()), &[2, 16 * 16, 16]);
        assert_eq!(t.shape(trace.stage2_out.unwrap()), &[2, 16 * 4, 32]);
        assert_eq!(t.shape(trace.pre_main), &[2, 16, 64]);
        assert_eq!(t.shape(trace.tokens), &[2, 16, 64]);
        let logits = logits_from_tokens(&mut t, &p, trace.tokens);
        assert_eq!(t.shape(logits), &[2, 4]);
        assert!(!t.saw_non_finite());
        assert!(t.data(logits).iter().all(|v| v.is_finite()));
    }

    #[test]
    fn supervised_loss_backward_reaches_all_encoder_params() {
        let cfg = HiViTConfig::preset("toy").unwrap();
        let set: ParamSet<f64> = ParamSet::build(&cfg, 2, false);
        let mut t: Tape<f64> = Tape::new();
        let p = set.bind(&mut t);
        let img = t
            .constant(&[2, 3, cfg.img_size, cfg.img_size], toy_images(2, &cfg, 6))
            .unwrap();
        let drops = no_drops::<f64>(&cfg);
        let trace = forward_dense(&mut t, &p, &cfg, img, &drops);
        let logits = logits_from_tokens(&mut t, &p, trace.tokens);
        let loss = t.cross_entropy(logits, std::sync::Arc::new(vec![0, 3])).unwrap();
        t.backward(loss).unwrap();
        for (i, e) in set.entries().iter().enumerate() {
            let g = t.grad(p.ids()[i]).unwrap_or_else(|| panic!("no grad for {}", e.name));
            let norm: f64 = g.iter().map(|v| v * v).sum();
            assert!(norm.is_finite(), "{} grad not finite", e.name);
            assert!(norm > 0.0, "{} grad identically zero", e.name);
        }
    }

    #[test]
    fn direct_embed_forward_runs() {
        let mut cfg = HiViTConfig::preset("toy").unwrap();
        cfg.depths = [0, 0, 4];
        cfg.inner_patch = cfg.unit_size;
        cfg.validate().unwrap();
        let set: ParamSet<f32> = ParamSet::build(&cfg, 3, false);
        let mut t: Tape<f32> = Tape::new();
        let p = set.bind(&mut t);
        let img = t
            .constant(&[1, 3, cfg.img_size, cfg.img_size], toy_images(1, &cfg, 7))
            .unwrap();
        let drops = no_drops::<f32>(&cfg);
        let trace = forward_dense(&mut t, &p, &cfg, img, &drops);
        assert!(trace.stage1_out.is_none());
        assert_eq!(t.shape(trace.tokens), &[1, 16, 64]);
    }
}
