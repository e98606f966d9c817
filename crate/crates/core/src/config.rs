//! Model geometry, named presets, and the line-oriented `key = value`
//! config format used by the CLI and echoed into checkpoints.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::PatchGeom;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("unknown preset `{0}`")]
    UnknownPreset(String),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Full architectural description of one model. Everything downstream
/// (parameter shapes, profiling, serialization) is a pure function of this.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HiViTConfig {
    /// Input image side in pixels (square images, 3 channels).
    pub img_size: usize,
    /// Masking-unit side in pixels. Everything before the main stage stays
    /// strictly inside one unit.
    pub unit_size: usize,
    /// First-stage patch side in pixels. `unit_size / inner_patch` must be 4
    /// (two 2×2 merges per unit) unless both early stages have depth 0.
    pub inner_patch: usize,
    /// Block counts for the three stages. Stages 1 and 2 use per-token MLP
    /// blocks, stage 3 uses global attention.
    pub depths: [usize; 3],
    /// Channel widths per stage; `dims[1] = 2 * dims[0]`, `dims[2] = 2 * dims[1]`.
    pub dims: [usize; 3],
    /// Attention heads in the main stage.
    pub heads: usize,
    /// MLP hidden ratio inside main-stage blocks.
    pub mlp_ratio_main: usize,
    /// MLP hidden ratio of the first sub-unit of early blocks (the slot where
    /// a plain ViT has attention).
    pub mlp_ratio_replace: usize,
    /// Add a learned relative-position bias to every main-stage attention.
    pub use_rpe: bool,
    /// Add fixed sine-cosine position embeddings at the main-stage input.
    pub use_abs_pos: bool,
    /// Peak stochastic-depth rate, ramped linearly over the blocks.
    pub drop_path_rate: f64,
    /// Classification head width.
    pub num_classes: usize,
    /// Reconstruction decoder: depth, width, heads.
    pub dec_depth: usize,
    pub dec_dim: usize,
    pub dec_heads: usize,
    /// Test hook: deliberately leak a neighbouring unit's activations into
    /// each early block so locality checks have a failing control.
    pub debug_cross_unit_mix: bool,
}

pub const PRESET_NAMES: &[&str] = &["hivit-t", "hivit-s", "hivit-b", "toy", "bench-medium"];

impl HiViTConfig {
    /// Named preset. `hivit-{t,s,b}` are the 224px reference models; `toy`
    /// is the 32px model the tests train end to end; `bench-medium` is sized
    /// so a sparse-vs-dense wall-clock gap is measurable in seconds.
    pub fn preset(name: &str) -> Result<Self, ConfigError> {
        let base = Self {
            img_size: 224,
            unit_size: 16,
            inner_patch: 4,
            depths: [1, 1, 10],
            dims: [96, 192, 384],
            heads: 6,
            mlp_ratio_main: 4,
            mlp_ratio_replace: 3,
            use_rpe: true,
            use_abs_pos: true,
            drop_path_rate: 0.05,
            num_classes: 1000,
            dec_depth: 6,
            dec_dim: 512,
            dec_heads: 16,
            debug_cross_unit_mix: false,
        };
        let cfg = match name {
            "hivit-t" => base,
            "hivit-s" => Self {
                depths: [2, 2, 20],
                drop_path_rate: 0.3,
                ..base
            },
            "hivit-b" => Self {
                depths: [2, 2, 20],
                dims: [128, 256, 512],
                heads: 8,
                drop_path_rate: 0.5,
                ..base
            },
            "toy" => Self {
                img_size: 32,
                unit_size: 8,
                inner_patch: 2,
                depths: [1, 1, 4],
                dims: [16, 32, 64],
                heads: 4,
                drop_path_rate: 0.1,
                num_classes: 4,
                dec_depth: 2,
                dec_dim: 64,
                dec_heads: 16,
                ..base
            },
            "bench-medium" => Self {
                img_size: 128,
                unit_size: 16,
                inner_patch: 4,
                depths: [1, 1, 12],
                dims: [64, 128, 256],
                heads: 8,
                drop_path_rate: 0.0,
                num_classes: 4,
                dec_depth: 2,
                dec_dim: 128,
                dec_heads: 16,
                ..base
            },
            other => return Err(ConfigError::UnknownPreset(other.to_string())),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Both early stages removed: the embed goes straight to `dims[2]` with
    /// `inner_patch == unit_size` and there are no merges.
    pub fn direct_embed(&self) -> bool {
        self.depths[0] == 0 && self.depths[1] == 0
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let fail = |msg: String| Err(ConfigError::Invalid(msg));
        if self.img_size == 0 || self.unit_size == 0 || self.inner_patch == 0 {
            return fail("img_size, unit_size and inner_patch must be positive".into());
        }
        if self.img_size % self.unit_size != 0 {
            return fail(format!(
                "img_size {} is not a multiple of unit_size {}",
                self.img_size, self.unit_size
            ));
        }
        if self.direct_embed() {
            if self.inner_patch != self.unit_size {
                return fail(format!(
                    "with no early stages, inner_patch {} must equal unit_size {}",
                    self.inner_patch, self.unit_size
                ));
            }
        } else {
            if self.unit_size != 4 * self.inner_patch {
                return fail(format!(
                    "unit_size {} must be 4 x inner_patch {} (two 2x2 merges per unit)",
                    self.unit_size, self.inner_patch
                ));
            }
            if self.dims[1] != 2 * self.dims[0] || self.dims[2] != 2 * self.dims[1] {
                return fail(format!(
                    "dims must double per stage (got {}, {}, {})",
                    self.dims[0], self.dims[1], self.dims[2]
                ));
            }
        }
        if self.depths[2] == 0 {
            return fail("the main stage needs at least one block".into());
        }
        if self.dims.contains(&0) {
            return fail("dims must be positive".into());
        }
        if self.heads == 0 || self.dims[2] % self.heads != 0 {
            return fail(format!("heads {} must divide dims[2] {}", self.heads, self.dims[2]));
        }
        if self.mlp_ratio_main == 0 || self.mlp_ratio_replace == 0 {
            return fail("mlp ratios must be positive".into());
        }
        if !(0.0..1.0).contains(&self.drop_path_rate) {
            return fail(format!("drop_path_rate {} must be in [0, 1)", self.drop_path_rate));
        }
        if self.num_classes == 0 {
            return fail("num_classes must be positive".into());
        }
        if self.dec_dim == 0 || self.dec_heads == 0 || self.dec_dim % self.dec_heads != 0 {
            return fail(format!(
                "dec_heads {} must divide dec_dim {}",
                self.dec_heads, self.dec_dim
            ));
        }
        Ok(())
    }

    /// Masking units per image side.
    pub fn units_per_side(&self) -> usize {
        self.img_size / self.unit_size
    }

    /// Total masking units per image (`M`).
    pub fn num_units(&self) -> usize {
        self.units_per_side() * self.units_per_side()
    }

    /// Stage-1 tokens along one side of a unit (4, or 1 with no early stages).
    pub fn stage1_tokens_per_side(&self) -> usize {
        self.unit_size / self.inner_patch
    }

    /// Channel width right after the patch embed.
    pub fn embed_dim(&self) -> usize {
        if self.direct_embed() {
            self.dims[2]
        } else {
            self.dims[0]
        }
    }

    pub fn head_dim(&self) -> usize {
        self.dims[2] / self.heads
    }

    /// Relative-position table rows for the main-stage grid: one per
    /// (dy, dx) offset pair, `(2G-1)^2` with `G = units_per_side`.
    pub fn rpe_table_rows(&self) -> usize {
        let g = self.units_per_side();
        (2 * g - 1) * (2 * g - 1)
    }

    pub fn patch_geom(&self) -> PatchGeom {
        PatchGeom {
            grid: self.units_per_side(),
            unit_px: self.unit_size,
            inner_px: self.inner_patch,
            channels: 3,
        }
    }

    /// Pixels (flattened `(c, y, x)`) per masking unit, the decoder's
    /// per-unit regression target width.
    pub fn unit_pixels(&self) -> usize {
        3 * self.unit_size * self.unit_size
    }

    /// Canonical text form; parsing it back yields an equal config.
    pub fn to_config_string(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "img_size = {}", self.img_size);
        let _ = writeln!(s, "unit_size = {}", self.unit_size);
        let _ = writeln!(s, "inner_patch = {}", self.inner_patch);
        let _ = writeln!(s, "depths = {},{},{}", self.depths[0], self.depths[1], self.depths[2]);
        let _ = writeln!(s, "dims = {},{},{}", self.dims[0], self.dims[1], self.dims[2]);
        let _ = writeln!(s, "heads = {}", self.heads);
        let _ = writeln!(s, "mlp_ratio_main = {}", self.mlp_ratio_main);
        let _ = writeln!(s, "mlp_ratio_replace = {}", self.mlp_ratio_replace);
        let _ = writeln!(s, "use_rpe = {}", self.use_rpe);
        let _ = writeln!(s, "use_abs_pos = {}", self.use_abs_pos);
        let _ = writeln!(s, "drop_path_rate = {}", self.drop_path_rate);
        let _ = writeln!(s, "num_classes = {}", self.num_classes);
        let _ = writeln!(s, "dec_depth = {}", self.dec_depth);
        let _ = writeln!(s, "dec_dim = {}", self.dec_dim);
        let _ = writeln!(s, "dec_heads = {}", self.dec_heads);
        let _ = writeln!(s, "debug_cross_unit_mix = {}", self.debug_cross_unit_mix);
        s
    }

    /// Parse the `key = value` format. Lines are `#` comments, blank, or one
    /// assignment; a `preset = name` line is applied first (wherever it
    /// appears) and later keys override its fields.
    pub fn from_config_str(src: &str) -> Result<Self, ConfigError> {
        let mut assignments: Vec<(usize, &str, &str)> = Vec::new();
        let mut preset: Option<(usize, &str)> = None;
        for (i, raw) in src.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(ConfigError::Parse {
                    line: line_no,
                    msg: format!("expected `key = value`, got `{line}`"),
                });
            };
            let (key, value) = (key.trim(), value.trim());
            if value.is_empty() {
                return Err(ConfigError::Parse {
                    line: line_no,
                    msg: format!("empty value for `{key}`"),
                });
            }
            if key == "preset" {
                preset = Some((line_no, value));
            } else {
                assignments.push((line_no, key, value));
            }
        }
        let mut cfg = match preset {
            Some((line, name)) => Self::preset(name).map_err(|_| ConfigError::Parse {
                line,
                msg: format!(
                    "unknown preset `{name}` (expected one of {})",
                    PRESET_NAMES.join(", ")
                ),
            })?,
            None => Self::preset("toy").expect("toy preset is valid"),
        };
        for (line, key, value) in assignments {
            cfg.set_key(key, value).map_err(|msg| ConfigError::Parse { line, msg })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_config_file(path: &Path) -> Result<Self, ConfigError> {
        let src = std::fs::read_to_string(path)?;
        Self::from_config_str(&src)
    }

    fn set_key(&mut self, key: &str, value: &str) -> Result<(), String> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, String> {
            value.parse().map_err(|_| format!("bad value `{value}` for `{key}`"))
        }
        fn triple(key: &str, value: &str) -> Result<[usize; 3], String> {
            let parts: Vec<&str> = value.split(',').map(str::trim).collect();
            if parts.len() != 3 {
                return Err(format!("`{key}` needs three comma-separated values, got `{value}`"));
            }
            let mut out = [0usize; 3];
            for (slot, part) in out.iter_mut().zip(&parts) {
                *slot = num(key, part)?;
            }
            Ok(out)
        }
        match key {
            "img_size" => self.img_size = num(key, value)?,
            "unit_size" => self.unit_size = num(key, value)?,
            "inner_patch" => self.inner_patch = num(key, value)?,
            "depths" => self.depths = triple(key, value)?,
            "dims" => self.dims = triple(key, value)?,
            "heads" => self.heads = num(key, value)?,
            "mlp_ratio_main" => self.mlp_ratio_main = num(key, value)?,
            "mlp_ratio_replace" => self.mlp_ratio_replace = num(key, value)?,
            "use_rpe" => self.use_rpe = num(key, value)?,
            "use_abs_pos" => self.use_abs_pos = num(key, value)?,
            "drop_path_rate" => self.drop_path_rate = num(key, value)?,
            "num_classes" => self.num_classes = num(key, value)?,
            "dec_depth" => self.dec_depth = num(key, value)?,
            "dec_dim" => self.dec_dim = num(key, value)?,
            "dec_heads" => self.dec_heads = num(key, value)?,
            "debug_cross_unit_mix" => self.debug_cross_unit_mix = num(key, value)?,
            other => return Err(format!("unknown key `{other}`")),
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for name in PRESET_NAMES {
            let cfg = HiViTConfig::preset(name).unwrap();
            cfg.validate().unwrap();
        }
        assert!(matches!(HiViTConfig::preset("nope"), Err(ConfigError::UnknownPreset(_))));
    }

    #[test]
    fn toy_geometry() {
        let cfg = HiViTConfig::preset("toy").unwrap();
        assert_eq!(cfg.units_per_side(), 4);
        assert_eq!(cfg.num_units(), 16);
        assert_eq!(cfg.stage1_tokens_per_side(), 4);
        assert_eq!(cfg.unit_pixels(), 192);
        assert_eq!(cfg.rpe_table_rows(), 49);
        assert_eq!(cfg.head_dim(), 16);
    }

    #[test]
    fn full_scale_geometry() {
        let cfg = HiViTConfig::preset("hivit-b").unwrap();
        assert_eq!(cfg.units_per_side(), 14);
        assert_eq!(cfg.num_units(), 196);
        assert_eq!(cfg.rpe_table_rows(), 729);
    }

    #[test]
    fn config_string_round_trips() {
        for name in PRESET_NAMES {
            let cfg = HiViTConfig::preset(name).unwrap();
            let echoed = HiViTConfig::from_config_str(&cfg.to_config_string()).unwrap();
            assert_eq!(cfg, echoed);
        }
    }

    #[test]
    fn preset_line_applies_before_overrides() {
        let cfg = HiViTConfig::from_config_str(
            "heads = 8 # override wins\npreset = toy\ndims = 32,64,128\n",
        )
        .unwrap();
        assert_eq!(cfg.img_size, 32);
        assert_eq!(cfg.heads, 8);
        assert_eq!(cfg.dims, [32, 64, 128]);
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let err = HiViTConfig::from_config_str("preset = toy\n\nheads eight\n").unwrap_err();
        assert!(matches!(err, ConfigError::Parse { line: 3, .. }), "{err}");
        let err = HiViTConfig::from_config_str("preset = toy\nheads = eight\n").unwrap_err();
        assert!(matches!(err, ConfigError::Parse { line: 2, .. }), "{err}");
        let err = HiViTConfig::from_config_str("banana = 1\n").unwrap_err();
        assert!(err.to_string().contains("unknown key `banana`"), "{err}");
        let err = HiViTConfig::from_config_str("preset = huge\n").unwrap_err();
        assert!(matches!(err, ConfigError::Parse { line: 1, .. }), "{err}");
    }

    #[test]
    fn validation_rejects_bad_geometry() {
        let mut cfg = HiViTConfig::preset("toy").unwrap();
        cfg.inner_patch = 4; // unit 8 / inner 4 = 2 merges missing
        assert!(cfg.validate().is_err());

        let mut cfg = HiViTConfig::preset("toy").unwrap();
        cfg.dims = [16, 32, 60];
        assert!(cfg.validate().is_err());

        let mut cfg = HiViTConfig::preset("toy").unwrap();
        cfg.heads = 5;
        assert!(cfg.validate().is_err());

        // ViT-like ablation: no early stages, embed at the unit size.
        let mut cfg = HiViTConfig::preset("toy").unwrap();
        cfg.depths = [0, 0, 4];
        assert!(cfg.validate().is_err());
        cfg.inner_patch = cfg.unit_size;
        cfg.validate().unwrap();
        assert!(cfg.direct_embed());
        assert_eq!(cfg.embed_dim(), 64);
    }
}
