//! `hivit`: profile, verify, bench, and train the hierarchical vision
//! transformer at desk scale.
//!
//! Exit codes: 0 on success, 1 when a check or the run itself fails, 2 for
//! usage errors (clap's default).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use hivit_core::bench::run_bench;
use hivit_core::config::{HiViTConfig, PRESET_NAMES};
use hivit_core::data::synth::{synth_corpus, SynthKind};
use hivit_core::model::profile::{profile_config, render_table, ProfileReport};
use hivit_core::parallel;
use hivit_core::train::recipe::{Mode, Recipe};
use hivit_core::train::runner;
use hivit_core::verify::{run_suite, VerifyOptions};

/// Published budgets for the reference models: params within 1%, MACs
/// within 5%. `profile` exits nonzero when a reference preset drifts.
const REFERENCE_BUDGETS: &[(&str, f64, f64)] = &[
    ("hivit-t", 19.2e6, 4.6e9),
    ("hivit-s", 37.5e6, 9.1e9),
    ("hivit-b", 66.4e6, 15.9e9),
];

#[derive(Parser)]
#[command(name = "hivit", version)]
#[command(about = "Hierarchical vision transformer with exact sparse masking: \
profiling, invariant checks, benchmarks and desk-scale training")]
struct Cli {
    /// Kernel thread cap: 0 uses the default pool, 1 forces sequential.
    /// Results are bit-identical for any value; only wall time changes.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Analytic parameter/FLOP profile with the masked-pretraining cost split
    Profile(ProfileArgs),
    /// Invariant suite: oracle equivalence, unit locality, gradient check,
    /// optimizer purity, checkpoint round-trip
    Verify(VerifyArgs),
    /// Time one sparse MIM step against the dense masked baseline
    Bench(BenchArgs),
    /// Masked-image pretraining on an image corpus
    Pretrain(TrainArgs),
    /// Supervised finetuning on a labeled corpus
    Finetune(TrainArgs),
    /// Linear probe: encoder frozen, classifier head only
    Linprobe(TrainArgs),
    /// Write a synthetic corpus
    Synth(SynthArgs),
}

#[derive(Args)]
struct ProfileArgs {
    /// Preset name (hivit-t, hivit-s, hivit-b, toy, bench-medium) or a
    /// config file path
    #[arg(long)]
    config: String,
    /// Mask ratio for the sparse-cost columns
    #[arg(long, default_value_t = 0.75)]
    ratio: f64,
    /// Emit JSON instead of the table
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct VerifyArgs {
    /// Preset name or config file path
    #[arg(long, default_value = "toy")]
    config: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Override every default tolerance. Zero is allowed and shows which
    /// checks are exact and which are approximate.
    #[arg(long)]
    tol: Option<f64>,
    /// Unit-locality perturbation trials
    #[arg(long, default_value_t = 5)]
    trials: usize,
    /// Parameters probed by the finite-difference gradient check
    #[arg(long, default_value_t = 20)]
    probes: usize,
    /// Emit JSON instead of the per-check lines
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct BenchArgs {
    /// Preset name or config file path
    #[arg(long, default_value = "bench-medium")]
    config: String,
    #[arg(long, default_value_t = 0.75)]
    ratio: f64,
    #[arg(long, default_value_t = 2)]
    batch: usize,
    /// Untimed steps before measurement
    #[arg(long, default_value_t = 1)]
    warmups: usize,
    /// Timed steps; the report takes the median
    #[arg(long, default_value_t = 5)]
    repeats: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Emit JSON instead of the report text
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// Preset name or config file path
    #[arg(long)]
    config: String,
    /// Recipe file (key=value lines; its mode must match the subcommand)
    #[arg(long)]
    recipe: PathBuf,
    /// Training corpus
    #[arg(long)]
    corpus: PathBuf,
    /// Held-out corpus evaluated after the final epoch
    #[arg(long)]
    val: Option<PathBuf>,
    /// Directory for metrics.jsonl and checkpoints
    #[arg(long, env = "HIVIT_OUT")]
    out: PathBuf,
    /// Continue an interrupted run from this checkpoint
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Copy matching weights from this checkpoint before training starts
    #[arg(long, value_name = "CHECKPOINT")]
    init_from: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    /// gaussian-blobs, textures, or labeled-shapes
    #[arg(long)]
    kind: String,
    #[arg(long)]
    count: usize,
    #[arg(long, default_value_t = 32)]
    img_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Corpus file to write
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    parallel::set_thread_limit(cli.threads);
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

/// Print to stdout, exiting quietly if the consumer closed the pipe.
fn emit(text: impl AsRef<str>) {
    use std::io::Write;
    if std::io::stdout().lock().write_all(text.as_ref().as_bytes()).is_err() {
        std::process::exit(0);
    }
}

fn dispatch(cmd: Command) -> Result<ExitCode, String> {
    match cmd {
        Command::Profile(a) => cmd_profile(&a),
        Command::Verify(a) => cmd_verify(&a),
        Command::Bench(a) => cmd_bench(&a),
        Command::Pretrain(a) => cmd_train(&a, Mode::Pretrain),
        Command::Finetune(a) => cmd_train(&a, Mode::Finetune),
        Command::Linprobe(a) => cmd_train(&a, Mode::Linprobe),
        Command::Synth(a) => cmd_synth(&a),
    }
}

fn load_config(name_or_path: &str) -> Result<HiViTConfig, String> {
    if PRESET_NAMES.contains(&name_or_path) {
        return HiViTConfig::preset(name_or_path).map_err(|e| e.to_string());
    }
    HiViTConfig::from_config_file(Path::new(name_or_path))
        .map_err(|e| format!("{name_or_path}: {e} (presets: {})", PRESET_NAMES.join(", ")))
}

fn check_ratio(ratio: f64) -> Result<(), String> {
    if ratio > 0.0 && ratio < 1.0 {
        Ok(())
    } else {
        Err(format!("mask ratio {ratio} outside (0, 1)"))
    }
}

/// `Some((preset, params_ok, flops_ok))` when the config is one of the
/// published reference models, matched by canonical config text.
fn reference_check(
    cfg: &HiViTConfig,
    report: &ProfileReport,
) -> Option<(&'static str, bool, bool)> {
    let text = cfg.to_config_string();
    for &(name, want_p, want_f) in REFERENCE_BUDGETS {
        let preset = HiViTConfig::preset(name).expect("built-in preset");
        if preset.to_config_string() == text {
            let p = report.total_params as f64;
            let f = report.total_flops as f64;
            return Some((
                name,
                (p - want_p).abs() / want_p < 0.01,
                (f - want_f).abs() / want_f < 0.05,
            ));
        }
    }
    None
}

fn cmd_profile(a: &ProfileArgs) -> Result<ExitCode, String> {
    let cfg = load_config(&a.config)?;
    check_ratio(a.ratio)?;
    let report = profile_config(&cfg, a.ratio);
    let reference = reference_check(&cfg, &report);
    if a.json {
        let doc = serde_json::json!({
            "schema": "hivit.profile.v1",
            "config": cfg.to_config_string(),
            "report": report,
            "reference": reference.map(|(name, p_ok, f_ok)| serde_json::json!({
                "preset": name,
                "params_ok": p_ok,
                "flops_ok": f_ok,
            })),
        });
        emit(serde_json::to_string_pretty(&doc).expect("report serializes") + "\n");
    } else {
        emit(render_table(&report));
        if let Some((name, p_ok, f_ok)) = reference {
            let verdict = if p_ok && f_ok { "within" } else { "OUTSIDE" };
            emit(format!(
                "\nreference {name}: {} params / {} MACs, {verdict} the published \
                 budget (1% params, 5% MACs)\n",
                report.total_params, report.total_flops
            ));
        }
    }
    match reference {
        Some((_, p_ok, f_ok)) if !(p_ok && f_ok) => Ok(ExitCode::from(1)),
        _ => Ok(ExitCode::SUCCESS),
    }
}

fn cmd_verify(a: &VerifyArgs) -> Result<ExitCode, String> {
    let cfg = load_config(&a.config)?;
    let opts = VerifyOptions {
        seed: a.seed,
        tol: a.tol,
        locality_trials: a.trials,
        grad_probes: a.probes,
    };
    let summary = run_suite(&cfg, &opts);
    if a.json {
        let doc = serde_json::json!({
            "schema": "hivit.verify.v1",
            "all_passed": summary.all_passed(),
            "checks": summary.checks,
        });
        emit(serde_json::to_string_pretty(&doc).expect("summary serializes") + "\n");
    } else {
        emit(summary.render_text());
    }
    if summary.all_passed() {
        Ok(ExitCode::SUCCESS)
    } else {
        let failed: Vec<&str> =
            summary.checks.iter().filter(|c| !c.passed).map(|c| c.name).collect();
        eprintln!("failed checks: {}", failed.join(", "));
        Ok(ExitCode::from(1))
    }
}

fn cmd_bench(a: &BenchArgs) -> Result<ExitCode, String> {
    let cfg = load_config(&a.config)?;
    check_ratio(a.ratio)?;
    if a.batch == 0 || a.repeats == 0 {
        return Err("batch and repeats must be positive".into());
    }
    let report = run_bench::<f32>(&cfg, a.ratio, a.batch, a.warmups, a.repeats, a.seed);
    if a.json {
        let doc = serde_json::json!({
            "schema": "hivit.bench.v1",
            "config": cfg.to_config_string(),
            "report": report,
        });
        emit(serde_json::to_string_pretty(&doc).expect("report serializes") + "\n");
    } else {
        emit(report.render_text());
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_train(a: &TrainArgs, mode: Mode) -> Result<ExitCode, String> {
    let cfg = load_config(&a.config)?;
    let recipe = Recipe::from_recipe_file(&a.recipe)
        .map_err(|e| format!("{}: {e}", a.recipe.display()))?;
    if recipe.mode != mode {
        return Err(format!(
            "recipe mode is {} but this subcommand runs {mode}",
            recipe.mode
        ));
    }
    let outcome = runner::run::<f32>(
        &cfg,
        &recipe,
        &a.corpus,
        a.val.as_deref(),
        &a.out,
        a.resume.as_deref(),
        a.init_from.as_deref(),
    )
    .map_err(|e| e.to_string())?;
    let mut lines = format!(
        "{mode}: {} steps, loss {:.6} -> {:.6}\n",
        outcome.steps, outcome.first_loss, outcome.final_loss
    );
    if let Some(loss) = outcome.val_loss {
        match outcome.val_acc {
            Some(acc) => lines += &format!("val: loss {loss:.6}, accuracy {acc:.4}\n"),
            None => lines += &format!("val: loss {loss:.6}\n"),
        }
    }
    lines += &format!("checkpoint: {}\n", outcome.checkpoint.display());
    lines += &format!("metrics:    {}\n", outcome.metrics.display());
    emit(lines);
    Ok(ExitCode::SUCCESS)
}

fn cmd_synth(a: &SynthArgs) -> Result<ExitCode, String> {
    let kind = SynthKind::parse(&a.kind).ok_or_else(|| {
        format!("unknown kind {:?}; expected gaussian-blobs, textures or labeled-shapes", a.kind)
    })?;
    if a.count == 0 || a.img_size == 0 {
        return Err("count and img-size must be positive".into());
    }
    let header = synth_corpus(kind, a.count, a.img_size, a.seed, &a.out)
        .map_err(|e| e.to_string())?;
    let labels = if header.labeled {
        format!("{} classes", kind.classes())
    } else {
        "unlabeled".to_string()
    };
    emit(format!(
        "wrote {}: {} images of {}x{}x{}, {labels}\n",
        a.out.display(),
        header.count,
        header.channels,
        header.height,
        header.width,
    ));
    Ok(ExitCode::SUCCESS)
}
