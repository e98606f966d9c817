//! Training: optimizers with exactly reproducible state, learning-rate and
//! stochastic-depth schedules, layer-wise decay, recipe files, and the
//! pretrain/finetune/linear-probe loops.

pub mod optim;
pub mod recipe;
pub mod runner;
pub mod schedule;

pub use optim::{AdamW, Lars, OptimError, Optimizer};
pub use recipe::{Mode, Recipe, RecipeError};
pub use runner::{apply_init_from, evaluate, evaluate_mim, run, RunOutcome, TrainError};
