//! Block forwards. All functions take the bound parameter map plus a name
//! prefix and push onto the caller's tape; none of them allocates
//! parameters. The early-stage block and the merge touch one unit at a time
//! by construction, which is the property the sparse path relies on.

use std::sync::Arc;

use crate::scalar::Scalar;
use crate::tensor::{Rows, Tape, TensorId};

use super::params::Bound;

pub const LN_EPS: f64 = 1e-6;

/// Per-sample stochastic-depth factors for one block: 0 drops the residual
/// branch, `1/(1-p)` keeps it rescaled. `None` means identity (eval mode or
/// rate 0).
pub type DropFactors<T> = Option<Arc<Vec<T>>>;

fn residual<T: Scalar>(
    t: &mut Tape<T>,
    x: TensorId,
    branch: TensorId,
    drop: &DropFactors<T>,
) -> TensorId {
    let branch = match drop {
        Some(f) => t.scale_rows(branch, Arc::clone(f)).expect("drop factors sized per sample"),
        None => branch,
    };
    t.add(x, branch).expect("residual shapes match")
}

fn layer_norm<T: Scalar>(t: &mut Tape<T>, p: &Bound, prefix: &str, x: TensorId) -> TensorId {
    let g = p.id(&format!("{prefix}.g"));
    let b = p.id(&format!("{prefix}.b"));
    t.layer_norm(x, g, b, LN_EPS).expect("norm width matches")
}

fn linear<T: Scalar>(t: &mut Tape<T>, p: &Bound, prefix: &str, x: TensorId) -> TensorId {
    let w = p.id(&format!("{prefix}.w"));
    let b = p.id(&format!("{prefix}.b"));
    let y = t.matmul(x, w).expect("linear input width matches");
    t.add_bias(y, b).expect("bias width matches")
}

pub fn mlp_forward<T: Scalar>(t: &mut Tape<T>, p: &Bound, prefix: &str, x: TensorId) -> TensorId {
    let h = linear(t, p, &format!("{prefix}.fc1"), x);
    let h = t.gelu(h);
    linear(t, p, &format!("{prefix}.fc2"), h)
}

/// Early-stage block: two pre-norm residual MLP sub-units. The first sits in
/// the slot where a ViT block has attention (hidden ratio
/// `mlp_ratio_replace`), the second is the usual MLP. Strictly per-token.
pub fn early_block_forward<T: Scalar>(
    t: &mut Tape<T>,
    p: &Bound,
    prefix: &str,
    x: TensorId,
    drop: &DropFactors<T>,
) -> TensorId {
    let h = layer_norm(t, p, &format!("{prefix}.norm1"), x);
    let h = mlp_forward(t, p, &format!("{prefix}.mlp1"), h);
    let x = residual(t, x, h, drop);
    let h = layer_norm(t, p, &format!("{prefix}.norm2"), x);
    let h = mlp_forward(t, p, &format!("{prefix}.mlp2"), h);
    residual(t, x, h, drop)
}

/// 2x2 patch merge inside each unit: `x` is `[b, units * side^2, d]` with
/// tokens unit-major and row-major inside the unit. Children are gathered in
/// row-major 2x2 order, concatenated to width `4d`, and projected to the
/// next stage's width. Token groups never span two units.
pub fn merge_forward<T: Scalar>(
    t: &mut Tape<T>,
    p: &Bound,
    prefix: &str,
    x: TensorId,
    units: usize,
    side: usize,
) -> TensorId {
    let shape = t.shape(x).to_vec();
    let (b, rows, d) = (shape[0], shape[1], shape[2]);
    assert_eq!(rows, units * side * side, "merge expects unit-major token rows");
    assert!(side % 2 == 0, "merge needs an even token side, got {side}");
    let half = side / 2;
    let mut order = Vec::with_capacity(rows);
    for u in 0..units {
        let base = u * side * side;
        for i in 0..half {
            for j in 0..half {
                let tl = base + (2 * i) * side + 2 * j;
                order.extend_from_slice(&[tl, tl + 1, tl + side, tl + side + 1]);
            }
        }
    }
    let gathered = t.gather_units(x, &Rows::shared(order)).expect("merge order in range");
    let grouped = t.reshape(gathered, &[b, rows / 4, 4 * d]).expect("grouped view");
    linear(t, p, prefix, grouped)
}

/// Multi-head self-attention with optional relative-position bias.
/// `rpe`: the bias table handle plus one table row per (q, k) pair.
pub fn attention_forward<T: Scalar>(
    t: &mut Tape<T>,
    p: &Bound,
    prefix: &str,
    x: TensorId,
    heads: usize,
    rpe: Option<(TensorId, &Rows)>,
) -> TensorId {
    let shape = t.shape(x).to_vec();
    let (b, n, d) = (shape[0], shape[1], shape[2]);
    assert!(d % heads == 0);
    let dh = d / heads;
    let split = |t: &mut Tape<T>, y: TensorId| {
        let y = t.reshape(y, &[b, n, heads, dh]).expect("head split");
        t.swap_axes12(y) // [b, heads, n, dh]
    };
    let q = linear(t, p, &format!("{prefix}.q"), x);
    let k = linear(t, p, &format!("{prefix}.k"), x);
    let v = linear(t, p, &format!("{prefix}.v"), x);
    let (q, k, v) = (split(t, q), split(t, k), split(t, v));
    let scores = t.matmul_nt(q, k).expect("qk shapes agree");
    let mut scores = t.scale(scores, 1.0 / (dh as f64).sqrt());
    if let Some((table, pairs)) = rpe {
        let bias = t.rpe_bias(table, pairs, n, b).expect("rpe pairs sized n*n");
        scores = t.add(scores, bias).expect("bias matches scores");
    }
    let attn = t.softmax(scores);
    let out = t.matmul(attn, v).expect("attn applies to v");
    let out = t.swap_axes12(out);
    let out = t.reshape(out, &[b, n, d]).expect("head join");
    linear(t, p, &format!("{prefix}.proj"), out)
}

/// Main-stage (and decoder) block: pre-norm attention then pre-norm MLP.
pub fn attn_block_forward<T: Scalar>(
    t: &mut Tape<T>,
    p: &Bound,
    prefix: &str,
    x: TensorId,
    heads: usize,
    rpe: Option<(TensorId, &Rows)>,
    mlp_name: &str,
    drop: &DropFactors<T>,
) -> TensorId {
    let h = layer_norm(t, p, &format!("{prefix}.norm1"), x);
    let h = attention_forward(t, p, &format!("{prefix}.attn"), h, heads, rpe);
    let x = residual(t, x, h, drop);
    let h = layer_norm(t, p, &format!("{prefix}.norm2"), x);
    let h = mlp_forward(t, p, &format!("{prefix}.{mlp_name}"), h);
    residual(t, x, h, drop)
}

pub fn final_norm<T: Scalar>(t: &mut Tape<T>, p: &Bound, x: TensorId) -> TensorId {
    layer_norm(t, p, "final_norm", x)
}

/// Deliberate locality violation for negative-control tests: mixes 1% of the
/// next unit's tokens (cyclically) into each unit.
pub fn cross_unit_leak<T: Scalar>(t: &mut Tape<T>, x: TensorId, units: usize) -> TensorId {
    let rows = t.shape(x)[1];
    assert_eq!(rows % units, 0);
    let per_unit = rows / units;
    let mut order = Vec::with_capacity(rows);
    for u in 0..units {
        let nu = (u + 1) % units;
        for i in 0..per_unit {
            order.push(nu * per_unit + i);
        }
    }
    let shifted = t.gather_units(x, &Rows::shared(order)).expect("shift in range");
    let shifted = t.scale(shifted, 0.01);
    t.add(x, shifted).expect("same shape")
}
