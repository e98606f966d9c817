//! The training loop. One RNG drives every stochastic choice in a fixed
//! order (shuffle, then per batch: mask seeds, augmentation, drop-path), so
//! a run is a pure function of (config, recipe, corpus) and a resumed run
//! replays the exact byte sequence the uninterrupted run would have
//! produced.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::config::HiViTConfig;
use crate::data::checkpoint::{Checkpoint, CheckpointError};
use crate::data::corpus::{Corpus, CorpusError};
use crate::data::metrics::{MetricRow, MetricsWriter};
use crate::data::augment::augment_image;
use crate::mim::decoder::decode;
use crate::mim::loss::{recon_loss, unit_targets};
use crate::mim::mask::{MaskError, MaskPlan};
use crate::mim::sparse::encode_sparse;
use crate::model::blocks::DropFactors;
use crate::model::encoder::{forward_dense, logits_from_tokens, no_drops};
use crate::model::params::{Bound, ParamSet};
use crate::scalar::Scalar;
use crate::tensor::{Tape, TensorError};
use crate::train::optim::{AdamW, Lars, OptimError, Optimizer};
use crate::train::recipe::{Mode, Recipe};
use crate::train::schedule::{drop_path_schedule, layer_multipliers, lr_at};

const TARGET_EPS: f64 = 1e-6;
const AUGMENT_MAX_SHIFT: usize = 4;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("non-finite loss at step {0}")]
    NonFiniteLoss(u64),
    #[error("corpus `{0}` has no labels; finetune and linprobe need them")]
    MissingLabels(PathBuf),
    #[error("label {label} outside the model's {classes} classes")]
    LabelRange { label: u16, classes: usize },
    #[error("{0}")]
    Geometry(String),
    #[error("cannot resume: {0}")]
    BadResume(String),
    #[error("cannot initialize from checkpoint: {0}")]
    BadInit(String),
}

#[derive(Debug)]
pub struct RunOutcome {
    pub first_loss: f64,
    pub final_loss: f64,
    /// Optimizer steps completed over the whole run, resumed segments
    /// included.
    pub steps: u64,
    pub val_loss: Option<f64>,
    pub val_acc: Option<f64>,
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
}

fn echo_text(cfg: &HiViTConfig, recipe: &Recipe) -> String {
    format!("{}\n---\n{}", cfg.to_config_string(), recipe.to_recipe_string())
}

fn checkpoint_path(out_dir: &Path, epoch: usize) -> PathBuf {
    out_dir.join(format!("checkpoint-ep{epoch}.hvck"))
}

fn draw_drop_factors<T: Scalar>(
    rates: &[f64],
    batch: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<DropFactors<T>> {
    rates
        .iter()
        .map(|&r| {
            if r <= 0.0 {
                return None;
            }
            let f: Vec<T> = (0..batch)
                .map(|_| {
                    if rng.gen::<f64>() < r {
                        T::zero()
                    } else {
                        T::from_f64(1.0 / (1.0 - r))
                    }
                })
                .collect();
            Some(Arc::new(f))
        })
        .collect()
}

fn collect_grads<T: Scalar>(t: &Tape<T>, bound: &Bound) -> Vec<Option<Vec<T>>> {
    bound.ids().iter().map(|&id| t.grad(id).map(|g| g.to_vec())).collect()
}

/// Loads pixels for one batch and, for labeled modes, their labels.
/// Augmentation consumes RNG draws per image in batch order.
fn load_batch<T: Scalar>(
    corpus: &Corpus,
    idxs: &[usize],
    augment: bool,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<T>, Vec<u16>), TrainError> {
    let px = corpus.header().width;
    let mut pixels = Vec::with_capacity(idxs.len() * 3 * px * px);
    let mut labels = Vec::with_capacity(idxs.len());
    for &i in idxs {
        let (mut raw, label) = corpus.get_raw(i)?;
        if augment {
            augment_image(&mut raw, px, AUGMENT_MAX_SHIFT, rng);
        }
        pixels.extend(corpus.normalize::<T>(&raw));
        if let Some(l) = label {
            labels.push(l);
        }
    }
    Ok((pixels, labels))
}

struct StepResult {
    loss: f64,
}

/// One pretraining step: sample masks, encode visible units, reconstruct
/// masked ones, regress on pixels.
#[allow(clippy::too_many_arguments)]
fn pretrain_step<T: Scalar>(
    cfg: &HiViTConfig,
    recipe: &Recipe,
    set: &mut ParamSet<T>,
    opt: &mut Optimizer<T>,
    corpus: &Corpus,
    idxs: &[usize],
    rates: &[f64],
    lr: f64,
    step: u64,
    rng: &mut ChaCha8Rng,
) -> Result<StepResult, TrainError> {
    let b = idxs.len();
    let m = cfg.num_units();
    let mut plans = Vec::with_capacity(b);
    if recipe.shared_mask {
        let seed = rng.gen::<u64>();
        for _ in 0..b {
            plans.push(MaskPlan::sample(m, recipe.mask_ratio, seed)?);
        }
    } else {
        for _ in 0..b {
            plans.push(MaskPlan::sample(m, recipe.mask_ratio, rng.gen::<u64>())?);
        }
    }
    let (pixels, _) = load_batch::<T>(corpus, idxs, recipe.augment, rng)?;
    let drops = draw_drop_factors::<T>(rates, b, rng);

    let targets = unit_targets(cfg, &pixels, b, recipe.normalize_target, TARGET_EPS);
    let px = cfg.img_size;
    let mut t = Tape::new();
    let bound = set.bind(&mut t);
    let images = t.constant(&[b, 3, px, px], pixels)?;
    let tgt = t.constant(&[b, m, cfg.unit_pixels()], targets)?;
    let visible = MaskPlan::visible_rows(&plans);
    let masked = MaskPlan::masked_rows(&plans);
    let trace = encode_sparse(&mut t, &bound, cfg, images, &visible, &drops);
    let pred = decode(&mut t, &bound, cfg, trace.latent, &visible);
    let loss = recon_loss(&mut t, pred, tgt, &masked);

    let loss_val = Scalar::to_f64(t.data(loss)[0]);
    if !loss_val.is_finite() || t.saw_non_finite() {
        return Err(TrainError::NonFiniteLoss(step));
    }
    t.backward(loss)?;
    let grads = collect_grads(&t, &bound);
    opt.step(set, &grads, lr)?;
    Ok(StepResult { loss: loss_val })
}

/// One supervised step (finetune or linear probe): dense forward over every
/// unit, cross-entropy on the pooled logits.
#[allow(clippy::too_many_arguments)]
fn supervised_step<T: Scalar>(
    cfg: &HiViTConfig,
    recipe: &Recipe,
    set: &mut ParamSet<T>,
    opt: &mut Optimizer<T>,
    corpus: &Corpus,
    idxs: &[usize],
    rates: &[f64],
    lr: f64,
    step: u64,
    rng: &mut ChaCha8Rng,
) -> Result<StepResult, TrainError> {
    let b = idxs.len();
    let (pixels, labels) = load_batch::<T>(corpus, idxs, recipe.augment, rng)?;
    for &l in &labels {
        if l as usize >= cfg.num_classes {
            return Err(TrainError::LabelRange { label: l, classes: cfg.num_classes });
        }
    }
    let drops = draw_drop_factors::<T>(rates, b, rng);

    let px = cfg.img_size;
    let mut t = Tape::new();
    let bound = set.bind(&mut t);
    let images = t.constant(&[b, 3, px, px], pixels)?;
    let trace = forward_dense(&mut t, &bound, cfg, images, &drops);
    let logits = logits_from_tokens(&mut t, &bound, trace.tokens);
    let loss = t.cross_entropy(logits, Arc::new(labels))?;

    let loss_val = Scalar::to_f64(t.data(loss)[0]);
    if !loss_val.is_finite() || t.saw_non_finite() {
        return Err(TrainError::NonFiniteLoss(step));
    }
    t.backward(loss)?;
    let grads = collect_grads(&t, &bound);
    opt.step(set, &grads, lr)?;
    Ok(StepResult { loss: loss_val })
}

/// Mean loss and top-1 accuracy over a labeled corpus, eval mode (no
/// augmentation, no drop-path).
pub fn evaluate<T: Scalar>(
    cfg: &HiViTConfig,
    set: &ParamSet<T>,
    corpus: &Corpus,
    batch_size: usize,
) -> Result<(f64, f64), TrainError> {
    let n = corpus.len();
    let px = cfg.img_size;
    let drops = no_drops::<T>(cfg);
    let mut loss_sum = 0.0;
    let mut correct = 0usize;
    let indices: Vec<usize> = (0..n).collect();
    for chunk in indices.chunks(batch_size) {
        let b = chunk.len();
        let mut pixels = Vec::with_capacity(b * 3 * px * px);
        let mut labels = Vec::with_capacity(b);
        for &i in chunk {
            let (p, label) = corpus.get_normalized::<T>(i)?;
            pixels.extend(p);
            labels.push(label.expect("caller checked the corpus is labeled"));
        }
        for &l in &labels {
            if l as usize >= cfg.num_classes {
                return Err(TrainError::LabelRange { label: l, classes: cfg.num_classes });
            }
        }
        let mut t = Tape::new();
        let bound = set.bind(&mut t);
        let images = t.constant(&[b, 3, px, px], pixels)?;
        let trace = forward_dense(&mut t, &bound, cfg, images, &drops);
        let logits = logits_from_tokens(&mut t, &bound, trace.tokens);
        let classes = cfg.num_classes;
        let data = t.data(logits);
        for (row, &label) in labels.iter().enumerate() {
            let row = &data[row * classes..(row + 1) * classes];
            let pred = row
                .iter()
                .enumerate()
                .max_by(|a, b| Scalar::to_f64(*a.1).total_cmp(&Scalar::to_f64(*b.1)))
                .map(|(i, _)| i)
                .unwrap();
            if pred == label as usize {
                correct += 1;
            }
        }
        let loss = t.cross_entropy(logits, Arc::new(labels))?;
        loss_sum += Scalar::to_f64(t.data(loss)[0]) * b as f64;
    }
    Ok((loss_sum / n as f64, correct as f64 / n as f64))
}

/// Mean masked-reconstruction loss over a corpus, eval mode. Mask plans are
/// derived from `seed` and the image index alone, so repeated calls score
/// the identical task and two parameter sets can be compared on it.
pub fn evaluate_mim<T: Scalar>(
    cfg: &HiViTConfig,
    set: &ParamSet<T>,
    corpus: &Corpus,
    batch_size: usize,
    mask_ratio: f64,
    normalize_target: bool,
    seed: u64,
) -> Result<f64, TrainError> {
    let n = corpus.len();
    let px = cfg.img_size;
    let m = cfg.num_units();
    let drops = no_drops::<T>(cfg);
    let mut loss_sum = 0.0;
    let indices: Vec<usize> = (0..n).collect();
    for chunk in indices.chunks(batch_size) {
        let b = chunk.len();
        let mut pixels = Vec::with_capacity(b * 3 * px * px);
        for &i in chunk {
            let (p, _) = corpus.get_normalized::<T>(i)?;
            pixels.extend(p);
        }
        let mut plans = Vec::with_capacity(b);
        for &i in chunk {
            let mix = (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
            plans.push(MaskPlan::sample(m, mask_ratio, seed ^ mix)?);
        }
        let targets = unit_targets(cfg, &pixels, b, normalize_target, TARGET_EPS);
        let mut t = Tape::new();
        let bound = set.bind(&mut t);
        let images = t.constant(&[b, 3, px, px], pixels)?;
        let tgt = t.constant(&[b, m, cfg.unit_pixels()], targets)?;
        let visible = MaskPlan::visible_rows(&plans);
        let masked = MaskPlan::masked_rows(&plans);
        let trace = encode_sparse(&mut t, &bound, cfg, images, &visible, &drops);
        let pred = decode(&mut t, &bound, cfg, trace.latent, &visible);
        let loss = recon_loss(&mut t, pred, tgt, &masked);
        loss_sum += Scalar::to_f64(t.data(loss)[0]) * b as f64;
    }
    Ok(loss_sum / n as f64)
}

fn save_checkpoint<T: Scalar>(
    path: &Path,
    set: &ParamSet<T>,
    opt: &Optimizer<T>,
    step: u64,
    epoch: u64,
    rng: &ChaCha8Rng,
    echo: &str,
) -> Result<(), TrainError> {
    let mut arrays: Vec<(String, Vec<usize>, Vec<T>)> = set
        .entries()
        .iter()
        .map(|e| (e.name.clone(), e.shape.clone(), e.data.to_vec()))
        .collect();
    arrays.extend(opt.state_arrays(set));
    let ck = Checkpoint {
        step,
        epoch,
        rng_seed: rng.get_seed(),
        rng_word_pos: rng.get_word_pos(),
        config_text: echo.to_string(),
        arrays,
    };
    ck.save(path)?;
    Ok(())
}

/// Copy weights from a checkpoint into `set` by name, ignoring optimizer
/// state and anything the current model does not have (a pretraining
/// checkpoint carries decoder weights a finetune model drops). Returns how
/// many entries were copied.
pub fn apply_init_from<T: Scalar>(
    set: &mut ParamSet<T>,
    path: &Path,
) -> Result<usize, TrainError> {
    let ck = Checkpoint::<T>::load(path)?;
    let mut copied = 0;
    for (name, shape, data) in &ck.arrays {
        if name.starts_with("m.") || name.starts_with("v.") || name.starts_with("vel.") {
            continue;
        }
        let matches = set.get(name).map(|e| &e.shape == shape).unwrap_or(false);
        if matches {
            set.set_data(name, data.clone()).map_err(TrainError::BadInit)?;
            copied += 1;
        }
    }
    if copied == 0 {
        return Err(TrainError::BadInit(format!(
            "no parameter in `{}` matches this model",
            path.display()
        )));
    }
    Ok(copied)
}

/// Run a recipe against a corpus. Artifacts land in `out_dir`:
/// `metrics.jsonl` plus one checkpoint per `checkpoint_every` epochs and one
/// for the final epoch. `resume` continues an interrupted run from its last
/// checkpoint; `init_from` only copies weights (transfer, not resumption).
#[allow(clippy::too_many_arguments)]
pub fn run<T: Scalar>(
    cfg: &HiViTConfig,
    recipe: &Recipe,
    train_path: &Path,
    val_path: Option<&Path>,
    out_dir: &Path,
    resume: Option<&Path>,
    init_from: Option<&Path>,
) -> Result<RunOutcome, TrainError> {
    cfg.validate().map_err(|e| TrainError::Geometry(e.to_string()))?;
    if resume.is_some() && init_from.is_some() {
        return Err(TrainError::BadResume("resume already carries weights; drop init-from".into()));
    }
    let corpus = Corpus::open(train_path)?;
    let h = corpus.header();
    if h.width != cfg.img_size || h.height != cfg.img_size {
        return Err(TrainError::Geometry(format!(
            "corpus images are {}x{}, model expects {}x{}",
            h.width, h.height, cfg.img_size, cfg.img_size
        )));
    }
    if corpus.is_empty() {
        return Err(TrainError::Geometry("corpus is empty".into()));
    }
    let supervised = recipe.mode != Mode::Pretrain;
    if supervised {
        if !h.labeled {
            return Err(TrainError::MissingLabels(train_path.to_path_buf()));
        }
        if cfg.num_classes == 0 {
            return Err(TrainError::Geometry("model has no classification head".into()));
        }
    }

    std::fs::create_dir_all(out_dir)?;
    let echo = echo_text(cfg, recipe);

    let mut set: ParamSet<T> = ParamSet::build(cfg, recipe.seed, recipe.mode == Mode::Pretrain);
    if let Some(path) = init_from {
        apply_init_from(&mut set, path)?;
    }

    let trainable: Vec<usize> = match recipe.mode {
        Mode::Pretrain => {
            // The head and the dense baseline token take no part in the
            // reconstruction loss.
            (0..set.len())
                .filter(|&i| {
                    let n = &set.entry(i).name;
                    !n.starts_with("head.") && !n.starts_with("dense.")
                })
                .collect()
        }
        Mode::Finetune => (0..set.len()).collect(),
        Mode::Linprobe => set.indices_with_prefix(&["head."]),
    };
    let mut opt = match recipe.mode {
        Mode::Linprobe => Optimizer::Lars(Lars::new(&set, trainable, recipe.weight_decay)),
        _ => {
            let all_scales = layer_multipliers(&set, cfg, recipe.layer_decay);
            let scales: Vec<f64> = trainable.iter().map(|&i| all_scales[i]).collect();
            Optimizer::AdamW(AdamW::new(&set, trainable, scales, recipe.beta2, recipe.weight_decay))
        }
    };

    let n = corpus.len();
    let steps_per_epoch = n.div_ceil(recipe.batch_size);
    let total_steps = (recipe.epochs * steps_per_epoch) as u64;
    let warmup_steps = (recipe.warmup_epochs * steps_per_epoch) as u64;
    let peak = match recipe.mode {
        Mode::Linprobe => 0.0,
        _ => recipe.drop_path.unwrap_or(cfg.drop_path_rate),
    };
    let rates = if peak > 0.0 {
        drop_path_schedule(peak, cfg.depths.iter().sum())
    } else {
        vec![0.0; cfg.depths.iter().sum()]
    };

    let mut rng = ChaCha8Rng::seed_from_u64(recipe.seed);
    let mut global_step: u64 = 0;
    let mut start_epoch = 0usize;
    if let Some(path) = resume {
        let ck = Checkpoint::<T>::load(path)?;
        if ck.config_text != echo {
            return Err(TrainError::BadResume(
                "checkpoint was written under a different config or recipe".into(),
            ));
        }
        if ck.epoch as usize >= recipe.epochs {
            return Err(TrainError::BadResume(format!(
                "checkpoint already covers all {} epochs",
                recipe.epochs
            )));
        }
        for e in 0..set.len() {
            let name = set.entry(e).name.clone();
            let (_, data) = ck
                .get(&name)
                .ok_or_else(|| TrainError::BadResume(format!("parameter `{name}` missing")))?;
            set.set_data(&name, data.to_vec()).map_err(TrainError::BadResume)?;
        }
        opt.load_state_arrays(&set, &|name| ck.get(name).map(|(_, d)| d.to_vec()))?;
        opt.set_step_count(ck.step);
        global_step = ck.step;
        start_epoch = ck.epoch as usize;
        rng = ChaCha8Rng::from_seed(ck.rng_seed);
        rng.set_word_pos(ck.rng_word_pos);
    }

    let metrics_path = out_dir.join("metrics.jsonl");
    let mut metrics = if resume.is_some() && metrics_path.exists() {
        MetricsWriter::append(&metrics_path)?
    } else {
        MetricsWriter::create(&metrics_path)?
    };

    let mut first_loss = None;
    let mut final_loss = 0.0;
    let mut last_checkpoint = checkpoint_path(out_dir, start_epoch);
    for epoch in start_epoch..recipe.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        for (bi, chunk) in order.chunks(recipe.batch_size).enumerate() {
            let lr = lr_at(global_step, total_steps, warmup_steps, recipe.base_lr, recipe.min_lr);
            let started = Instant::now();
            let result = if supervised {
                supervised_step(
                    cfg, recipe, &mut set, &mut opt, &corpus, chunk, &rates, lr,
                    global_step + 1, &mut rng,
                )?
            } else {
                pretrain_step(
                    cfg, recipe, &mut set, &mut opt, &corpus, chunk, &rates, lr,
                    global_step + 1, &mut rng,
                )?
            };
            global_step += 1;
            let wall = started.elapsed().as_secs_f64();
            first_loss.get_or_insert(result.loss);
            final_loss = result.loss;
            let epoch_end = bi + 1 == steps_per_epoch;
            if global_step % recipe.log_every as u64 == 0 || epoch_end {
                metrics.write(&MetricRow {
                    step: global_step,
                    epoch: epoch as u64,
                    split: "train".into(),
                    loss: result.loss,
                    lr,
                    throughput_img_s: chunk.len() as f64 / wall,
                    wall_ms: wall * 1e3,
                    acc: None,
                })?;
            }
        }
        let done = epoch + 1;
        if done % recipe.checkpoint_every == 0 || done == recipe.epochs {
            last_checkpoint = checkpoint_path(out_dir, done);
            save_checkpoint(&last_checkpoint, &set, &opt, global_step, done as u64, &rng, &echo)?;
        }
    }

    let mut val_loss = None;
    let mut val_acc = None;
    if let Some(vp) = val_path {
        let vc = Corpus::open(vp)?;
        let vh = vc.header();
        if vh.width != cfg.img_size || vh.height != cfg.img_size {
            return Err(TrainError::Geometry(format!(
                "val images are {}x{}, model expects {}x{}",
                vh.width, vh.height, cfg.img_size, cfg.img_size
            )));
        }
        let started = Instant::now();
        let (loss, acc) = if supervised {
            if !vh.labeled {
                return Err(TrainError::MissingLabels(vp.to_path_buf()));
            }
            let (loss, acc) = evaluate(cfg, &set, &vc, recipe.batch_size)?;
            (loss, Some(acc))
        } else {
            let loss = evaluate_mim(
                cfg,
                &set,
                &vc,
                recipe.batch_size,
                recipe.mask_ratio,
                recipe.normalize_target,
                recipe.seed,
            )?;
            (loss, None)
        };
        let wall = started.elapsed().as_secs_f64();
        metrics.write(&MetricRow {
            step: global_step,
            epoch: recipe.epochs as u64,
            split: "val".into(),
            loss,
            lr: 0.0,
            throughput_img_s: vc.len() as f64 / wall,
            wall_ms: wall * 1e3,
            acc,
        })?;
        val_loss = Some(loss);
        val_acc = acc;
    }

    Ok(RunOutcome {
        first_loss: first_loss.unwrap_or(f64::NAN),
        final_loss,
        steps: global_step,
        val_loss,
        val_acc,
        checkpoint: last_checkpoint,
        metrics: metrics_path,
    })
}
