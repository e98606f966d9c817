//! Dense/sparse equivalence oracles. The claim under test: because nothing
//! before the main stage crosses a unit boundary, dropping masked units at
//! the input is exact, not approximate.
//!
//! Oracle A: run the dense encoder over all units, select the visible rows
//! of each pre-main activation, and compare against the sparse encoder's
//! activations. Oracle B: continue the dense route through the main stage
//! restricted to the visible subset (same positions, same RPE rows) and
//! compare final latents. Both routes share parameters but nothing else:
//! separate tapes, and the reference selects rows from a computation that
//! never saw the mask.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::HiViTConfig;
use crate::model::encoder::{forward_dense, main_stage, no_drops};
use crate::model::params::ParamSet;
use crate::scalar::Scalar;
use crate::tensor::Tape;

use super::mask::MaskPlan;
use super::sparse::encode_sparse;

/// Worst normalized error per compared activation
/// (`|a-b| / max(|a|, |b|, 1)`); exact equality reports 0.
#[derive(Debug, Clone, Copy)]
pub struct OracleReport {
    pub stage1: f64,
    pub stage2: f64,
    pub pre_main: f64,
    pub latent: f64,
}

impl OracleReport {
    /// Worst error among the pre-main comparisons (oracle A).
    pub fn worst_pre_main(&self) -> f64 {
        self.stage1.max(self.stage2).max(self.pre_main)
    }
}

fn worst_err<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    assert_eq!(a.len(), b.len(), "comparing equal-sized activations");
    let mut worst = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        let (x, y) = (Scalar::to_f64(*x), Scalar::to_f64(*y));
        let err = (x - y).abs() / x.abs().max(y.abs()).max(1.0);
        worst = worst.max(err);
    }
    worst
}

/// Select, host-side, the token rows of the listed units from a dense
/// `[b, total_units * tokens_per_unit, width]` buffer.
fn select_unit_tokens<T: Scalar>(
    data: &[T],
    batch: usize,
    total_units: usize,
    tokens_per_unit: usize,
    width: usize,
    plans: &[MaskPlan],
) -> Vec<T> {
    let per_batch = total_units * tokens_per_unit * width;
    assert_eq!(data.len(), batch * per_batch);
    let mut out = Vec::new();
    for (b, plan) in plans.iter().enumerate() {
        for &u in &plan.visible {
            let start = b * per_batch + u * tokens_per_unit * width;
            out.extend_from_slice(&data[start..start + tokens_per_unit * width]);
        }
    }
    out
}

/// Run both routes for one random (images, masks) draw and report the worst
/// errors. `param_seed` fixes the weights, `data_seed` the images and plans.
pub fn oracle_check<T: Scalar>(
    cfg: &HiViTConfig,
    param_seed: u64,
    data_seed: u64,
    batch: usize,
    ratio: f64,
) -> OracleReport {
    let set: ParamSet<T> = ParamSet::build(cfg, param_seed, false);
    let mut rng = ChaCha8Rng::seed_from_u64(data_seed);
    let n = batch * 3 * cfg.img_size * cfg.img_size;
    let images: Vec<T> = (0..n).map(|_| T::from_f64(rng.gen::<f64>() * 2.0 - 1.0)).collect();
    let plans: Vec<MaskPlan> = (0..batch)
        .map(|i| {
            MaskPlan::sample(cfg.num_units(), ratio, data_seed ^ (i as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
                .expect("valid plan")
        })
        .collect();
    let visible = MaskPlan::visible_rows(&plans);
    let m = cfg.num_units();
    let tokens1 = cfg.stage1_tokens_per_side() * cfg.stage1_tokens_per_side();

    // Dense route + subset-attention reference.
    let mut td: Tape<T> = Tape::new();
    let pd = set.bind(&mut td);
    let img = td
        .constant(&[batch, 3, cfg.img_size, cfg.img_size], images.clone())
        .expect("image tensor");
    let drops = no_drops::<T>(cfg);
    let trace = forward_dense(&mut td, &pd, cfg, img, &drops);
    let gathered = td.gather_units(trace.pre_main, &visible).expect("visible rows");
    let latent_ref = main_stage(&mut td, &pd, cfg, gathered, &visible, &drops);

    // Sparse route on its own tape.
    let mut ts: Tape<T> = Tape::new();
    let ps = set.bind(&mut ts);
    let img_s = ts
        .constant(&[batch, 3, cfg.img_size, cfg.img_size], images)
        .expect("image tensor");
    let sparse = encode_sparse(&mut ts, &ps, cfg, img_s, &visible, &drops);

    let compare_stage = |dense: Option<crate::tensor::TensorId>,
                         sparse_id: Option<crate::tensor::TensorId>,
                         tokens_per_unit: usize,
                         width: usize|
     -> f64 {
        match (dense, sparse_id) {
            (Some(d), Some(s)) => {
                let want =
                    select_unit_tokens(td.data(d), batch, m, tokens_per_unit, width, &plans);
                worst_err(&want, ts.data(s))
            }
            _ => 0.0,
        }
    };

    let stage1 = compare_stage(trace.stage1_out, sparse.stage1_out, tokens1, cfg.dims[0]);
    let stage2 = compare_stage(trace.stage2_out, sparse.stage2_out, tokens1 / 4, cfg.dims[1]);
    let pre_main = {
        let want = select_unit_tokens(td.data(trace.pre_main), batch, m, 1, cfg.dims[2], &plans);
        worst_err(&want, ts.data(sparse.pre_main))
    };
    let latent = worst_err(td.data(latent_ref), ts.data(sparse.latent));

    OracleReport { stage1, stage2, pre_main, latent }
}
