//! Analytic parameter and FLOP accounting, straight from the config. FLOPs
//! are multiply-accumulate counts of the matmuls (norms, biases and
//! activations are excluded); all counts are per image.

use serde::Serialize;

use crate::config::HiViTConfig;

#[derive(Debug, Clone, Serialize)]
pub struct ProfileRow {
    pub section: String,
    pub params: u64,
    pub flops: u64,
}

/// Masked-pretraining cost split. "Per-token" work scales with the visible
/// unit count; the attention "interaction" term scales with its square.
#[derive(Debug, Clone, Serialize)]
pub struct MimFlops {
    pub mask_ratio: f64,
    pub total_units: u64,
    pub visible_units: u64,
    pub dense_per_token: u64,
    pub dense_interaction: u64,
    pub sparse_per_token: u64,
    pub sparse_interaction: u64,
    pub per_token_ratio: f64,
    pub interaction_ratio: f64,
    pub encoder_speedup: f64,
    pub decoder_params: u64,
    pub decoder_flops: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ProfileReport {
    pub rows: Vec<ProfileRow>,
    pub total_params: u64,
    pub total_flops: u64,
    pub mim: MimFlops,
}

fn early_block_params(d: u64, r1: u64, r2: u64) -> u64 {
    // two norms per sub-unit pair + two MLPs
    4 * d + (2 * r1 * d * d + r1 * d + d) + (2 * r2 * d * d + r2 * d + d)
}

fn attn_block_params(d: u64, rpe_rows: u64, heads: u64, r: u64) -> u64 {
    4 * d + 4 * (d * d + d) + rpe_rows * heads + 2 * r * d * d + r * d + d
}

/// Full analytic profile at a given mask ratio.
pub fn profile_config(cfg: &HiViTConfig, mask_ratio: f64) -> ProfileReport {
    let m = cfg.num_units() as u64;
    let (d1, d2, d3) = (cfg.dims[0] as u64, cfg.dims[1] as u64, cfg.dims[2] as u64);
    let (r1, r2) = (cfg.mlp_ratio_replace as u64, cfg.mlp_ratio_main as u64);
    let heads = cfg.heads as u64;
    let classes = cfg.num_classes as u64;
    let plen = 3 * (cfg.inner_patch as u64) * (cfg.inner_patch as u64);
    let embed_dim = cfg.embed_dim() as u64;
    let n1 = m * 16;
    let n2 = m * 4;
    let n3 = m;
    let embed_tokens = if cfg.direct_embed() { n3 } else { n1 };

    let mut rows = Vec::new();
    rows.push(ProfileRow {
        section: "embed".into(),
        params: plen * embed_dim + embed_dim + 2 * embed_dim,
        flops: embed_tokens * plen * embed_dim,
    });
    if !cfg.direct_embed() {
        let per_block1 = early_block_params(d1, r1, r2);
        rows.push(ProfileRow {
            section: "stage1".into(),
            params: cfg.depths[0] as u64 * per_block1,
            flops: cfg.depths[0] as u64 * n1 * (2 * r1 + 2 * r2) * d1 * d1,
        });
        rows.push(ProfileRow {
            section: "merge1".into(),
            params: 4 * d1 * d2 + d2,
            flops: n2 * 4 * d1 * d2,
        });
        let per_block2 = early_block_params(d2, r1, r2);
        rows.push(ProfileRow {
            section: "stage2".into(),
            params: cfg.depths[1] as u64 * per_block2,
            flops: cfg.depths[1] as u64 * n2 * (2 * r1 + 2 * r2) * d2 * d2,
        });
        rows.push(ProfileRow {
            section: "merge2".into(),
            params: 4 * d2 * d3 + d3,
            flops: n3 * 4 * d2 * d3,
        });
    }
    let rpe_rows = if cfg.use_rpe { cfg.rpe_table_rows() as u64 } else { 0 };
    let blocks3 = cfg.depths[2] as u64;
    rows.push(ProfileRow {
        section: "stage3".into(),
        params: blocks3 * attn_block_params(d3, rpe_rows, heads, r2),
        flops: blocks3 * (n3 * (4 + 2 * r2) * d3 * d3 + 2 * n3 * n3 * d3),
    });
    rows.push(ProfileRow {
        section: "head".into(),
        params: 2 * d3 + d3 * classes + classes,
        flops: d3 * classes,
    });

    let total_params: u64 = rows.iter().map(|r| r.params).sum();
    let total_flops: u64 = rows.iter().map(|r| r.flops).sum();

    // MIM split: the head is not part of pretraining; everything else in the
    // encoder is either per-token or the N^2 interaction.
    let dense_interaction = blocks3 * 2 * n3 * n3 * d3;
    let head_flops = rows.last().map(|r| r.flops).unwrap_or(0);
    let dense_per_token = total_flops - dense_interaction - head_flops;
    let visible = (((1.0 - mask_ratio) * m as f64).round() as u64).clamp(1, m.saturating_sub(1).max(1));
    let scale = visible as f64 / m as f64;
    let sparse_per_token = (dense_per_token as f64 * scale).round() as u64;
    let sparse_interaction = (dense_interaction as f64 * scale * scale).round() as u64;

    let dd = cfg.dec_dim as u64;
    let dec_blocks = cfg.dec_depth as u64;
    let upix = cfg.unit_pixels() as u64;
    let decoder_params = d3 * dd + dd // embed
        + dd // mask token
        + dec_blocks * attn_block_params(dd, 0, cfg.dec_heads as u64, r2)
        + 2 * dd // final norm
        + dd * upix + upix; // pixel head
    let decoder_flops = visible * d3 * dd
        + dec_blocks * (m * (4 + 2 * r2) * dd * dd + 2 * m * m * dd)
        + m * dd * upix;

    let mim = MimFlops {
        mask_ratio,
        total_units: m,
        visible_units: visible,
        dense_per_token,
        dense_interaction,
        sparse_per_token,
        sparse_interaction,
        per_token_ratio: dense_per_token as f64 / sparse_per_token.max(1) as f64,
        interaction_ratio: dense_interaction as f64 / sparse_interaction.max(1) as f64,
        encoder_speedup: (dense_per_token + dense_interaction) as f64
            / (sparse_per_token + sparse_interaction).max(1) as f64,
        decoder_params,
        decoder_flops,
    };

    ProfileReport { rows, total_params, total_flops, mim }
}

/// Plain-text table for the CLI.
pub fn render_table(report: &ProfileReport) -> String {
    let mut s = String::new();
    s.push_str(&format!("{:<10} {:>14} {:>16}\n", "section", "params", "flops (MACs)"));
    for r in &report.rows {
        s.push_str(&format!("{:<10} {:>14} {:>16}\n", r.section, r.params, r.flops));
    }
    s.push_str(&format!(
        "{:<10} {:>14} {:>16}\n",
        "total", report.total_params, report.total_flops
    ));
    let m = &report.mim;
    s.push_str(&format!(
        "\nmasked pretraining at ratio {:.2}: {} of {} units visible\n",
        m.mask_ratio, m.visible_units, m.total_units
    ));
    s.push_str(&format!(
        "  encoder per-token work: {} -> {} ({:.2}x)\n",
        m.dense_per_token, m.sparse_per_token, m.per_token_ratio
    ));
    s.push_str(&format!(
        "  attention interaction:  {} -> {} ({:.2}x)\n",
        m.dense_interaction, m.sparse_interaction, m.interaction_ratio
    ));
    s.push_str(&format!("  encoder FLOP speedup:   {:.2}x\n", m.encoder_speedup));
    s.push_str(&format!(
        "  decoder: {} params, {} flops\n",
        m.decoder_params, m.decoder_flops
    ));
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::params::ParamSet;

    fn count_actual(cfg: &HiViTConfig) -> u64 {
        let set: ParamSet<f32> = ParamSet::build(cfg, 0, false);
        set.total_elems() as u64
    }

    fn count_actual_decoder(cfg: &HiViTConfig) -> u64 {
        let with: ParamSet<f32> = ParamSet::build(cfg, 0, true);
        let without: ParamSet<f32> = ParamSet::build(cfg, 0, false);
        let dense_token = with.get("dense.mask_token").unwrap().data.len() as u64;
        with.total_elems() as u64 - without.total_elems() as u64 - dense_token
    }

    #[test]
    fn analytic_params_match_built_parameters() {
        for name in crate::config::PRESET_NAMES {
            let cfg = HiViTConfig::preset(name).unwrap();
            let report = profile_config(&cfg, 0.75);
            assert_eq!(report.total_params, count_actual(&cfg), "{name}");
            assert_eq!(report.mim.decoder_params, count_actual_decoder(&cfg), "{name}");
        }
        let mut cfg = HiViTConfig::preset("toy").unwrap();
        cfg.depths = [0, 0, 4];
        cfg.inner_patch = cfg.unit_size;
        cfg.validate().unwrap();
        assert_eq!(profile_config(&cfg, 0.5).total_params, count_actual(&cfg));
    }

    #[test]
    fn reference_models_hit_published_budgets() {
        // (preset, params, flops) published for the 224px models; counted
        // values must sit within 1% of params and 5% of flops.
        let expect: &[(&str, f64, f64)] = &[
            ("hivit-t", 19.2e6, 4.6e9),
            ("hivit-s", 37.5e6, 9.1e9),
            ("hivit-b", 66.4e6, 15.9e9),
        ];
        for &(name, want_p, want_f) in expect {
            let cfg = HiViTConfig::preset(name).unwrap();
            let report = profile_config(&cfg, 0.75);
            let p = report.total_params as f64;
            let f = report.total_flops as f64;
            assert!(
                (p - want_p).abs() / want_p < 0.01,
                "{name} params {p} vs {want_p}"
            );
            assert!(
                (f - want_f).abs() / want_f < 0.05,
                "{name} flops {f} vs {want_f}"
            );
        }
    }

    #[test]
    fn exact_quarter_visibility_gives_exact_ratios() {
        let cfg = HiViTConfig::preset("bench-medium").unwrap();
        let report = profile_config(&cfg, 0.75);
        assert_eq!(report.mim.visible_units, 16);
        assert!((report.mim.per_token_ratio - 4.0).abs() < 1e-9);
        assert!((report.mim.interaction_ratio - 16.0).abs() < 1e-9);
        assert!(report.mim.encoder_speedup > 4.0);
    }

    #[test]
    fn table_renders_all_sections() {
        let cfg = HiViTConfig::preset("hivit-t").unwrap();
        let table = render_table(&profile_config(&cfg, 0.75));
        for section in ["embed", "stage1", "merge1", "stage2", "merge2", "stage3", "head", "total"]
        {
            assert!(table.contains(section), "missing {section}:\n{table}");
        }
    }
}
