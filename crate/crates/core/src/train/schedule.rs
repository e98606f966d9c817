//! Learning-rate and regularization schedules. All pure functions of the
//! step index so resumed runs replay the same values.

use crate::config::HiViTConfig;
use crate::model::params::ParamSet;
use crate::scalar::Scalar;

/// Linear warmup to `base`, then cosine decay to `min`. `step` counts from 0.
pub fn lr_at(step: u64, total_steps: u64, warmup_steps: u64, base: f64, min: f64) -> f64 {
    if warmup_steps > 0 && step < warmup_steps {
        return base * (step + 1) as f64 / warmup_steps as f64;
    }
    if total_steps <= warmup_steps {
        return base;
    }
    let progress = (step - warmup_steps) as f64 / (total_steps - warmup_steps) as f64;
    let progress = progress.min(1.0);
    min + 0.5 * (base - min) * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Per-block drop-path rates ramping linearly from 0 to `peak` over the
/// block index.
pub fn drop_path_schedule(peak: f64, blocks: usize) -> Vec<f64> {
    (0..blocks)
        .map(|i| if blocks <= 1 { peak } else { peak * i as f64 / (blocks - 1) as f64 })
        .collect()
}

/// Block index of an encoder parameter on the layer-decay ladder. The embed
/// sits below block 0, the head above the last block; merges share the index
/// of the following stage's first block. Decoder and baseline parameters are
/// not on the ladder.
fn ladder_index(name: &str, cfg: &HiViTConfig) -> Option<i64> {
    let [d1, d2, d3] = cfg.depths;
    let total = (d1 + d2 + d3) as i64;
    let block_of = |name: &str, prefix: &str| -> i64 {
        let rest = &name[prefix.len()..];
        rest.split('.').next().unwrap().parse::<i64>().unwrap()
    };
    if name.starts_with("embed.") || name.starts_with("patch_norm.") {
        Some(-1)
    } else if name.starts_with("s1.") {
        Some(block_of(name, "s1."))
    } else if name.starts_with("merge1.") {
        Some(d1 as i64)
    } else if name.starts_with("s2.") {
        Some(d1 as i64 + block_of(name, "s2."))
    } else if name.starts_with("merge2.") {
        Some((d1 + d2) as i64)
    } else if name.starts_with("s3.") {
        Some((d1 + d2) as i64 + block_of(name, "s3."))
    } else if name.starts_with("final_norm.") || name.starts_with("head.") {
        Some(total)
    } else {
        None
    }
}

/// Per-entry learning-rate multipliers `decay^(L - index)` where L is the
/// total block count. `decay = 1.0` makes every multiplier 1.
pub fn layer_multipliers<T: Scalar>(
    set: &ParamSet<T>,
    cfg: &HiViTConfig,
    decay: f64,
) -> Vec<f64> {
    let total = cfg.depths.iter().sum::<usize>() as i64;
    set.entries()
        .iter()
        .map(|e| match ladder_index(&e.name, cfg) {
            Some(idx) => decay.powi((total - idx) as i32),
            None => 1.0,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_then_cosine_hits_landmarks() {
        // 10 warmup steps into 110 total: step 0 is base/10, step 9 is base,
        // the midpoint is (base+min)/2, the last step approaches min.
        let base = 1e-3;
        let min = 1e-5;
        assert!((lr_at(0, 110, 10, base, min) - base / 10.0).abs() < 1e-18);
        assert!((lr_at(9, 110, 10, base, min) - base).abs() < 1e-18);
        let mid = lr_at(60, 110, 10, base, min);
        assert!((mid - 0.5 * (base + min)).abs() < 1e-12, "{mid}");
        let last = lr_at(109, 110, 10, base, min);
        assert!(last > min && last < min + 0.01 * base, "{last}");
        // Past the end it clamps at min.
        assert!((lr_at(500, 110, 10, base, min) - min).abs() < 1e-18);
    }

    #[test]
    fn no_warmup_starts_at_base() {
        assert!((lr_at(0, 100, 0, 2e-4, 0.0) - 2e-4).abs() < 1e-18);
    }

    #[test]
    fn drop_path_ramp_is_linear() {
        let r = drop_path_schedule(0.3, 4);
        assert_eq!(r.len(), 4);
        assert!((r[0] - 0.0).abs() < 1e-15);
        assert!((r[1] - 0.1).abs() < 1e-15);
        assert!((r[3] - 0.3).abs() < 1e-15);
        assert_eq!(drop_path_schedule(0.2, 1), vec![0.2]);
    }

    #[test]
    fn ladder_spans_embed_to_head() {
        use crate::config::HiViTConfig;
        let cfg = HiViTConfig::preset("toy").unwrap(); // depths (1,1,4), L=6
        let set: ParamSet<f32> = ParamSet::build(&cfg, 1, true);
        let mult = layer_multipliers(&set, &cfg, 0.5);
        let get = |name: &str| {
            let i = set
                .entries()
                .iter()
                .position(|e| e.name == name)
                .unwrap_or_else(|| panic!("{name} missing"));
            mult[i]
        };
        // decay^(L - idx) with L=6.
        assert!((get("embed.w") - 0.5f64.powi(7)).abs() < 1e-12);
        assert!((get("s1.0.mlp1.fc1.w") - 0.5f64.powi(6)).abs() < 1e-12);
        assert!((get("merge1.w") - 0.5f64.powi(5)).abs() < 1e-12);
        assert!((get("s2.0.norm1.g") - 0.5f64.powi(5)).abs() < 1e-12);
        assert!((get("merge2.w") - 0.5f64.powi(4)).abs() < 1e-12);
        assert!((get("s3.0.attn.q.w") - 0.5f64.powi(4)).abs() < 1e-12);
        assert!((get("s3.3.attn.q.w") - 0.5f64.powi(1)).abs() < 1e-12);
        assert!((get("head.w") - 1.0).abs() < 1e-12);
        assert!((get("final_norm.g") - 1.0).abs() < 1e-12);
        // Decoder parameters sit off the ladder.
        assert!((get("dec.mask_token") - 1.0).abs() < 1e-12);
        assert!((get("dense.mask_token") - 1.0).abs() < 1e-12);
    }

    #[test]
    fn decay_one_is_flat() {
        use crate::config::HiViTConfig;
        let cfg = HiViTConfig::preset("toy").unwrap();
        let set: ParamSet<f32> = ParamSet::build(&cfg, 1, false);
        assert!(layer_multipliers(&set, &cfg, 1.0).iter().all(|&m| m == 1.0));
    }
}
