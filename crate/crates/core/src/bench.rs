//! Wall-clock comparison of the sparse MIM step against the dense masked
//! baseline. Both run the identical task (same images, same mask plans,
//! same loss, forward plus backward); the only difference is whether masked
//! units enter the encoder.

use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::HiViTConfig;
use crate::mim::baseline::encode_dense_masked;
use crate::mim::decoder::{decode, decode_full};
use crate::mim::loss::{recon_loss, unit_targets};
use crate::mim::mask::MaskPlan;
use crate::mim::sparse::encode_sparse;
use crate::model::encoder::no_drops;
use crate::model::params::ParamSet;
use crate::model::profile::profile_config;
use crate::scalar::Scalar;
use crate::tensor::Tape;

#[derive(Debug, Clone, serde::Serialize)]
pub struct BenchReport {
    pub batch: usize,
    pub mask_ratio: f64,
    pub warmups: usize,
    pub repeats: usize,
    /// Median wall time of one full step (forward + backward), milliseconds.
    pub sparse_ms: f64,
    pub dense_ms: f64,
    /// sparse_ms / dense_ms; the acceptance gate on bench-medium is 0.67.
    pub wall_ratio: f64,
    pub sparse_img_s: f64,
    pub dense_img_s: f64,
    /// Analytic dense/sparse cost ratios from the FLOP model, for the
    /// cross-check column.
    pub per_token_flop_ratio: f64,
    pub interaction_flop_ratio: f64,
    pub analytic_encoder_speedup: f64,
}

impl BenchReport {
    pub fn render_text(&self) -> String {
        format!(
            "batch {b}  mask ratio {r}  median of {n} after {w} warmups\n\
             sparse step  {s:>10.2} ms   {si:>8.1} img/s\n\
             dense step   {d:>10.2} ms   {di:>8.1} img/s\n\
             wall ratio sparse/dense  {wr:.3}  (speedup {sp:.2}x)\n\
             analytic: per-token {pt:.2}x, interaction {ia:.2}x, encoder {enc:.2}x\n",
            b = self.batch,
            r = self.mask_ratio,
            n = self.repeats,
            w = self.warmups,
            s = self.sparse_ms,
            si = self.sparse_img_s,
            d = self.dense_ms,
            di = self.dense_img_s,
            wr = self.wall_ratio,
            sp = 1.0 / self.wall_ratio,
            pt = self.per_token_flop_ratio,
            ia = self.interaction_flop_ratio,
            enc = self.analytic_encoder_speedup,
        )
    }
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    xs[xs.len() / 2]
}

/// Everything one MIM step consumes, built once and reused across timed
/// iterations (and shared between the sparse and dense paths).
pub struct BenchInputs<T> {
    pub batch: usize,
    pub pixels: Arc<Vec<T>>,
    pub targets: Arc<Vec<T>>,
    pub plans: Vec<MaskPlan>,
    pub visible: crate::tensor::Rows,
    pub masked: crate::tensor::Rows,
}

pub fn bench_inputs<T: Scalar>(
    cfg: &HiViTConfig,
    mask_ratio: f64,
    batch: usize,
    seed: u64,
) -> BenchInputs<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xbe9c);
    let px = cfg.img_size;
    let m = cfg.num_units();
    let pixels: Vec<T> =
        (0..batch * 3 * px * px).map(|_| T::from_f64(rng.gen::<f64>() * 2.0 - 1.0)).collect();
    let plans: Vec<MaskPlan> = (0..batch)
        .map(|_| MaskPlan::sample(m, mask_ratio, rng.gen()).expect("valid plan"))
        .collect();
    let targets: Vec<T> = unit_targets(cfg, &pixels, batch, true, 1e-6);
    BenchInputs {
        batch,
        pixels: Arc::new(pixels),
        targets: Arc::new(targets),
        visible: MaskPlan::visible_rows(&plans),
        masked: MaskPlan::masked_rows(&plans),
        plans,
    }
}

/// One full MIM step, forward and backward, on a fresh tape. Returns the
/// loss so callers can keep the computation observable.
pub fn mim_step<T: Scalar>(
    cfg: &HiViTConfig,
    set: &ParamSet<T>,
    inputs: &BenchInputs<T>,
    sparse: bool,
) -> f64 {
    let px = cfg.img_size;
    let m = cfg.num_units();
    let drops = no_drops::<T>(cfg);
    let mut t = Tape::new();
    let bound = set.bind(&mut t);
    let img = t
        .constant_shared(&[inputs.batch, 3, px, px], Arc::clone(&inputs.pixels))
        .expect("image shape");
    let tgt = t
        .constant_shared(&[inputs.batch, m, cfg.unit_pixels()], Arc::clone(&inputs.targets))
        .expect("target shape");
    let pred = if sparse {
        let trace = encode_sparse(&mut t, &bound, cfg, img, &inputs.visible, &drops);
        decode(&mut t, &bound, cfg, trace.latent, &inputs.visible)
    } else {
        let latent = encode_dense_masked(&mut t, &bound, cfg, img, &inputs.plans, &drops);
        decode_full(&mut t, &bound, cfg, latent)
    };
    let loss = recon_loss(&mut t, pred, tgt, &inputs.masked);
    t.backward(loss).expect("loss is scalar");
    Scalar::to_f64(t.data(loss)[0])
}

/// Time both paths. The parameter set, inputs and plans are built once and
/// shared; each timed iteration builds its tape, runs forward and backward,
/// and drops the graph, matching one training step.
pub fn run_bench<T: Scalar>(
    cfg: &HiViTConfig,
    mask_ratio: f64,
    batch: usize,
    warmups: usize,
    repeats: usize,
    seed: u64,
) -> BenchReport {
    let set: ParamSet<T> = ParamSet::build(cfg, seed, true);
    let inputs = bench_inputs::<T>(cfg, mask_ratio, batch, seed);

    let time_path = |sparse: bool| -> f64 {
        let mut samples = Vec::with_capacity(repeats);
        for i in 0..warmups + repeats {
            let started = Instant::now();
            let loss = mim_step(cfg, &set, &inputs, sparse);
            assert!(loss.is_finite());
            if i >= warmups {
                samples.push(started.elapsed().as_secs_f64() * 1e3);
            }
        }
        median(samples)
    };

    let sparse_ms = time_path(true);
    let dense_ms = time_path(false);

    let mim = profile_config(cfg, mask_ratio).mim;
    BenchReport {
        batch,
        mask_ratio,
        warmups,
        repeats,
        sparse_ms,
        dense_ms,
        wall_ratio: sparse_ms / dense_ms,
        sparse_img_s: batch as f64 / (sparse_ms / 1e3),
        dense_img_s: batch as f64 / (dense_ms / 1e3),
        per_token_flop_ratio: mim.per_token_ratio,
        interaction_flop_ratio: mim.interaction_ratio,
        analytic_encoder_speedup: mim.encoder_speedup,
    }
}
