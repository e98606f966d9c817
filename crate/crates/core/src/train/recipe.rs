//! Training recipes. A recipe is a text file of `key = value` lines, one
//! per hyperparameter, with `#` comments. `reference_*` keys are carried
//! through untouched; they document values the run does not use (for
//! example the batch size a result was originally reported with).

use std::fmt;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum RecipeError {
    #[error("recipe line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("recipe is missing required key `mode`")]
    MissingMode,
    #[error("recipe: {0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Pretrain,
    Finetune,
    Linprobe,
}

impl Mode {
    pub fn parse(s: &str) -> Option<Mode> {
        match s {
            "pretrain" => Some(Mode::Pretrain),
            "finetune" => Some(Mode::Finetune),
            "linprobe" => Some(Mode::Linprobe),
            _ => None,
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Pretrain => "pretrain",
            Mode::Finetune => "finetune",
            Mode::Linprobe => "linprobe",
        })
    }
}

#[derive(Debug, Clone)]
pub struct Recipe {
    pub mode: Mode,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub base_lr: f64,
    pub min_lr: f64,
    pub weight_decay: f64,
    pub mask_ratio: f64,
    pub layer_decay: f64,
    /// Overrides the model config's drop-path peak when set.
    pub drop_path: Option<f64>,
    pub seed: u64,
    pub batch_size: usize,
    /// Checkpoint cadence in epochs. The final state is always written.
    pub checkpoint_every: usize,
    /// Metrics cadence in steps.
    pub log_every: usize,
    pub augment: bool,
    /// Standardize reconstruction targets per unit.
    pub normalize_target: bool,
    /// One mask for the whole batch instead of one per image.
    pub shared_mask: bool,
    pub beta2: f64,
    /// Documentation-only `reference_*` keys, in file order.
    pub reference: Vec<(String, String)>,
}

impl Recipe {
    pub fn new(mode: Mode) -> Self {
        Recipe {
            mode,
            epochs: 1,
            warmup_epochs: 0,
            base_lr: 1.5e-4,
            min_lr: 0.0,
            weight_decay: 0.05,
            mask_ratio: 0.75,
            layer_decay: 1.0,
            drop_path: None,
            seed: 0,
            batch_size: 16,
            checkpoint_every: 1,
            log_every: 10,
            augment: false,
            normalize_target: true,
            shared_mask: false,
            beta2: 0.999,
            reference: Vec::new(),
        }
    }

    pub fn from_recipe_str(text: &str) -> Result<Recipe, RecipeError> {
        let mut mode = None;
        let mut pairs = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let lineno = lineno + 1;
            let (key, value) = line.split_once('=').ok_or_else(|| RecipeError::Parse {
                line: lineno,
                msg: format!("expected `key = value`, got `{line}`"),
            })?;
            let key = key.trim();
            let value = value.trim();
            if key == "mode" {
                mode = Some(Mode::parse(value).ok_or_else(|| RecipeError::Parse {
                    line: lineno,
                    msg: format!("unknown mode `{value}` (pretrain, finetune, linprobe)"),
                })?);
            } else {
                pairs.push((lineno, key.to_string(), value.to_string()));
            }
        }
        let mut r = Recipe::new(mode.ok_or(RecipeError::MissingMode)?);
        for (lineno, key, value) in pairs {
            r.apply(&key, &value)
                .map_err(|msg| RecipeError::Parse { line: lineno, msg })?;
        }
        r.validate()?;
        Ok(r)
    }

    pub fn from_recipe_file(path: &Path) -> Result<Recipe, RecipeError> {
        Recipe::from_recipe_str(&std::fs::read_to_string(path)?)
    }

    /// Canonical dump. Checkpoints embed it so a resumed run can prove it
    /// was launched with the same hyperparameters.
    pub fn to_recipe_string(&self) -> String {
        use std::fmt::Write;
        let mut s = String::new();
        let _ = writeln!(s, "mode = {}", self.mode);
        let _ = writeln!(s, "epochs = {}", self.epochs);
        let _ = writeln!(s, "warmup_epochs = {}", self.warmup_epochs);
        let _ = writeln!(s, "base_lr = {}", self.base_lr);
        let _ = writeln!(s, "min_lr = {}", self.min_lr);
        let _ = writeln!(s, "weight_decay = {}", self.weight_decay);
        let _ = writeln!(s, "mask_ratio = {}", self.mask_ratio);
        let _ = writeln!(s, "layer_decay = {}", self.layer_decay);
        if let Some(dp) = self.drop_path {
            let _ = writeln!(s, "drop_path = {dp}");
        }
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(s, "checkpoint_every = {}", self.checkpoint_every);
        let _ = writeln!(s, "log_every = {}", self.log_every);
        let _ = writeln!(s, "augment = {}", self.augment);
        let _ = writeln!(s, "normalize_target = {}", self.normalize_target);
        let _ = writeln!(s, "shared_mask = {}", self.shared_mask);
        let _ = writeln!(s, "beta2 = {}", self.beta2);
        for (k, v) in &self.reference {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    fn apply(&mut self, key: &str, value: &str) -> Result<(), String> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, String> {
            value.parse().map_err(|_| format!("bad value `{value}` for `{key}`"))
        }
        fn flag(key: &str, value: &str) -> Result<bool, String> {
            match value {
                "true" => Ok(true),
                "false" => Ok(false),
                _ => Err(format!("bad value `{value}` for `{key}` (true or false)")),
            }
        }
        match key {
            "epochs" => self.epochs = num(key, value)?,
            "warmup_epochs" => self.warmup_epochs = num(key, value)?,
            "base_lr" => self.base_lr = num(key, value)?,
            "min_lr" => self.min_lr = num(key, value)?,
            "weight_decay" => self.weight_decay = num(key, value)?,
            "mask_ratio" => self.mask_ratio = num(key, value)?,
            "layer_decay" => self.layer_decay = num(key, value)?,
            "drop_path" => self.drop_path = Some(num(key, value)?),
            "seed" => self.seed = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "checkpoint_every" => self.checkpoint_every = num(key, value)?,
            "log_every" => self.log_every = num(key, value)?,
            "augment" => self.augment = flag(key, value)?,
            "normalize_target" => self.normalize_target = flag(key, value)?,
            "shared_mask" => self.shared_mask = flag(key, value)?,
            "beta2" => self.beta2 = num(key, value)?,
            _ if key.starts_with("reference_") => {
                self.reference.push((key.to_string(), value.to_string()));
            }
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    fn validate(&self) -> Result<(), RecipeError> {
        if self.epochs == 0 {
            return Err(RecipeError::Invalid("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(RecipeError::Invalid("batch_size must be at least 1".into()));
        }
        if self.checkpoint_every == 0 {
            return Err(RecipeError::Invalid("checkpoint_every must be at least 1".into()));
        }
        if self.log_every == 0 {
            return Err(RecipeError::Invalid("log_every must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.mask_ratio) || self.mask_ratio <= 0.0 {
            return Err(RecipeError::Invalid(format!(
                "mask_ratio {} outside (0, 1)",
                self.mask_ratio
            )));
        }
        if !(0.0..=1.0).contains(&self.layer_decay) || self.layer_decay == 0.0 {
            return Err(RecipeError::Invalid(format!(
                "layer_decay {} outside (0, 1]",
                self.layer_decay
            )));
        }
        if self.base_lr <= 0.0 || self.min_lr < 0.0 {
            return Err(RecipeError::Invalid("learning rates must be positive".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_recipe_parses() {
        let text = "\
# toy pretraining
mode = pretrain
epochs = 4
warmup_epochs = 1
base_lr = 2e-4
weight_decay = 0.05
mask_ratio = 0.75
seed = 7
batch_size = 8
augment = false
reference_batch_size = 4096   # original value at scale
reference_epochs = 300
";
        let r = Recipe::from_recipe_str(text).unwrap();
        assert_eq!(r.mode, Mode::Pretrain);
        assert_eq!(r.epochs, 4);
        assert_eq!(r.warmup_epochs, 1);
        assert!((r.base_lr - 2e-4).abs() < 1e-18);
        assert_eq!(r.batch_size, 8);
        assert_eq!(
            r.reference,
            vec![
                ("reference_batch_size".to_string(), "4096".to_string()),
                ("reference_epochs".to_string(), "300".to_string()),
            ]
        );
    }

    #[test]
    fn mode_is_required() {
        assert!(matches!(
            Recipe::from_recipe_str("epochs = 3\n"),
            Err(RecipeError::MissingMode)
        ));
    }

    #[test]
    fn errors_carry_line_numbers() {
        let err = Recipe::from_recipe_str("mode = pretrain\n\nepochs = many\n").unwrap_err();
        match err {
            RecipeError::Parse { line, msg } => {
                assert_eq!(line, 3);
                assert!(msg.contains("epochs"), "{msg}");
            }
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn unknown_key_is_rejected_but_reference_passes() {
        assert!(Recipe::from_recipe_str("mode = pretrain\nbatchsize = 8\n").is_err());
        assert!(Recipe::from_recipe_str("mode = pretrain\nreference_note = hi\n").is_ok());
    }

    #[test]
    fn out_of_range_values_are_rejected() {
        assert!(Recipe::from_recipe_str("mode = pretrain\nmask_ratio = 1.0\n").is_err());
        assert!(Recipe::from_recipe_str("mode = pretrain\nepochs = 0\n").is_err());
        assert!(Recipe::from_recipe_str("mode = finetune\nlayer_decay = 0\n").is_err());
    }

    #[test]
    fn canonical_dump_round_trips() {
        let text = "mode = finetune\nepochs = 20\nlayer_decay = 0.65\ndrop_path = 0.1\n";
        let r = Recipe::from_recipe_str(text).unwrap();
        let again = Recipe::from_recipe_str(&r.to_recipe_string()).unwrap();
        assert_eq!(r.to_recipe_string(), again.to_recipe_string());
        assert_eq!(again.epochs, 20);
        assert_eq!(again.drop_path, Some(0.1));
    }

    #[test]
    fn mode_line_position_does_not_matter() {
        let r = Recipe::from_recipe_str("epochs = 2\nmode = linprobe\n").unwrap();
        assert_eq!(r.mode, Mode::Linprobe);
        assert_eq!(r.epochs, 2);
    }
}
