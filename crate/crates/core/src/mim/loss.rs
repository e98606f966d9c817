//! Reconstruction loss: mean squared error between predicted and true
//! pixels, over masked units only. Targets are constants (no gradient), in
//! the same flattened `(c, y, x)` per-unit order the decoder head emits.

use crate::config::HiViTConfig;
use crate::scalar::Scalar;
use crate::tensor::{Rows, Tape, TensorId};

/// Flatten every unit of every image into its `(c, y, x)` pixel vector:
/// `[batch, num_units, unit_pixels]`. With `normalize_per_unit`, each unit
/// is standardized to zero mean and unit variance (variance floor `eps`),
/// which makes the loss weight local contrast instead of absolute intensity.
pub fn unit_targets<T: Scalar>(
    cfg: &HiViTConfig,
    images: &[T],
    batch: usize,
    normalize_per_unit: bool,
    eps: f64,
) -> Vec<T> {
    let px = cfg.img_size;
    let m = cfg.num_units();
    let grid = cfg.units_per_side();
    let u = cfg.unit_size;
    let upix = cfg.unit_pixels();
    assert_eq!(images.len(), batch * 3 * px * px, "image buffer size");
    let mut out = Vec::with_capacity(batch * m * upix);
    for b in 0..batch {
        for unit in 0..m {
            let (uy, ux) = (unit / grid, unit % grid);
            let start = out.len();
            for c in 0..3 {
                for y in 0..u {
                    for x in 0..u {
                        let py = uy * u + y;
                        let pxx = ux * u + x;
                        out.push(images[((b * 3 + c) * px + py) * px + pxx]);
                    }
                }
            }
            if normalize_per_unit {
                let slice = &mut out[start..];
                let n = slice.len() as f64;
                let mean = slice.iter().map(|v| Scalar::to_f64(*v)).sum::<f64>() / n;
                let var = slice
                    .iter()
                    .map(|v| (Scalar::to_f64(*v) - mean).powi(2))
                    .sum::<f64>()
                    / n;
                let inv = 1.0 / (var + eps).sqrt();
                for v in slice.iter_mut() {
                    *v = T::from_f64((Scalar::to_f64(*v) - mean) * inv);
                }
            }
        }
    }
    out
}

/// MSE over the masked units: gather the masked rows of both the prediction
/// (`[b, num_units, unit_pixels]`) and the target constant, and average the
/// squared difference over every masked pixel.
pub fn recon_loss<T: Scalar>(
    t: &mut Tape<T>,
    pred: TensorId,
    targets: TensorId,
    masked: &Rows,
) -> TensorId {
    let pg = t.gather_units(pred, masked).expect("masked rows in range");
    let tg = t.gather_units(targets, masked).expect("targets share the grid");
    let d = t.sub(pg, tg).expect("same shape");
    let sq = t.mul(d, d).expect("same shape");
    t.mean_all(sq)
}
