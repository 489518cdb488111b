//! `ptq` — command-line front end for the quantization toolkit.
//!
//! The subcommands cover the full workflow:
//!
//! * `synth` — generate a benchmark encoder plus dataset with planted
//!   activation outliers.
//! * `migrate` — move LayerNorm scales into consumer weights (an exact,
//!   function-preserving rewrite) and verify equivalence numerically.
//! * `calibrate` — choose quantizer parameters for every slot with one of
//!   five methods; optionally migrate first.
//! * `eval` — accuracy and end-to-end quantization loss of a calibrated
//!   model.
//! * `report` — diagnostic CSVs (node ranking, outlier structure,
//!   clip-impact sweep, size accounting) for a finished run directory.
//!
//! Exit codes are a stable contract: 0 success; 1 usage errors (bad flags,
//! unknown method, operations applied in the wrong order); 2 broken input
//! files or model/data mismatches; 3 numerical failure.
//!
//! Every file the toolkit writes is UTF-8 JSON or CSV. All randomness flows
//! from `--seed` flags; given the same inputs every command writes
//! byte-identical outputs.

use clap::{Args, Parser, Subcommand};
use ptq_core::calibration::{self, CalibrationConfig, CalibrationResult, Method, OmseSearch};
use ptq_core::forward::RunMode;
use ptq_core::io;
use ptq_core::metrics;
use ptq_core::migration;
use ptq_core::model::BitsSpec;
use ptq_core::synthetic::{self, SynthConfig};
use ptq_core::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

/// Forward-pass batch size used by every command.
const BATCH: usize = 32;

#[derive(Parser)]
#[command(
    name = "ptq",
    version,
    about = "Post-training quantization toolkit for small transformer encoders"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic benchmark model and dataset with planted outliers
    Synth(SynthArgs),
    /// Rewrite LayerNorm scales into consumer weights, preserving the function
    Migrate(MigrateArgs),
    /// Choose quantizer parameters for every slot from calibration data
    Calibrate(CalibrateArgs),
    /// Measure accuracy and quantization loss of a calibrated model
    Eval(EvalArgs),
    /// Emit diagnostic CSVs for a finished run directory
    Report(ReportArgs),
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests arrive as "errors" but are not.
            let code = u8::from(e.use_stderr());
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Synth(a) => cmd_synth(a),
        Cmd::Migrate(a) => cmd_migrate(a),
        Cmd::Calibrate(a) => cmd_calibrate(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Report(a) => cmd_report(a),
    }
}

/// The stable exit-code contract: 1 usage, 2 data/model, 3 numerical.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 1,
        Error::Numerical(_) => 3,
        _ => 2,
    }
}

// ---------------------------------------------------------------------------
// synth
// ---------------------------------------------------------------------------

#[derive(Args)]
struct SynthArgs {
    /// Generator configuration (JSON); missing fields take defaults
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed
    #[arg(long)]
    seed: Option<u64>,
    /// Directory for model.json, data.json and synth_summary.json
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Serialize)]
struct SynthSummary {
    config: SynthConfig,
    spiked_dims: Vec<usize>,
    fp_eval_accuracy: f64,
}

fn cmd_synth(args: SynthArgs) -> Result<()> {
    let mut cfg = match &args.config {
        Some(p) => io::read_json::<SynthConfig>(p)?,
        None => SynthConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let out = synthetic::generate(&cfg)?;
    fs::create_dir_all(&args.out)?;
    io::save_model(&args.out.join("model.json"), &out.model)?;
    io::save_data(&args.out.join("data.json"), &out.data)?;
    let summary = SynthSummary {
        spiked_dims: out.spiked_dims.clone(),
        fp_eval_accuracy: out.fp_eval_accuracy,
        config: cfg.clone(),
    };
    io::write_json(&args.out.join("synth_summary.json"), &summary, true)?;
    println!(
        "wrote model.json ({} blocks, hidden {}, vocab {}) and data.json (calibration {}, eval {}) to {}",
        cfg.blocks,
        cfg.hidden,
        cfg.vocab,
        out.data.calibration.len(),
        out.data.eval.sequences.len(),
        args.out.display()
    );
    println!(
        "spiked dims {:?}; full-precision eval accuracy {:.2}",
        out.spiked_dims, out.fp_eval_accuracy
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// migrate
// ---------------------------------------------------------------------------

/// Sequences driving the numerical equivalence check.
const PROBE_SEQUENCES: usize = 64;

#[derive(Args)]
struct MigrateArgs {
    /// Model file to rewrite (LayerNorms must still be in scaling mode)
    #[arg(long)]
    model: PathBuf,
    /// Dataset whose calibration split drives the equivalence check;
    /// without it a seeded random probe batch is used
    #[arg(long)]
    data: Option<PathBuf>,
    /// Seed for the fallback probe batch
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Directory for model_migrated.json and migration_report.json
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Serialize)]
struct MigrationReportFile {
    /// Worst element-wise relative difference, original vs. migrated.
    max_rel_diff: f64,
    probe_sequences: usize,
    /// True when every moved gamma entry was exactly 1: the rewrite changed
    /// bookkeeping (mode flag, shortcut multipliers) but no weight values.
    identity_rewrite: bool,
    layernorms: Vec<MigrationEntry>,
}

#[derive(Serialize)]
struct MigrationEntry {
    ln: String,
    rescaled: Vec<String>,
    shortcut: Option<String>,
}

fn cmd_migrate(args: MigrateArgs) -> Result<()> {
    let original = io::load_model(&args.model)?;
    let mut migrated = original.clone();
    let records = migration::migrate(&mut migrated)?;
    let probe: Vec<Vec<u32>> = match &args.data {
        Some(p) => {
            let data = io::load_data(p)?;
            check_data_matches(&original, data.seq_len, data.vocab)?;
            data.calibration
                .iter()
                .take(PROBE_SEQUENCES)
                .cloned()
                .collect()
        }
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
            let (t, v) = (original.meta.seq_len, original.meta.vocab as u32);
            (0..PROBE_SEQUENCES)
                .map(|_| (0..t).map(|_| rng.gen_range(0..v)).collect())
                .collect()
        }
    };
    let max_rel_diff = migration::equivalence_check(&original, &migrated, &probe)?;
    let identity_rewrite = records
        .iter()
        .all(|r| r.gamma.iter().all(|&g| g == 1.0));
    let report = MigrationReportFile {
        max_rel_diff,
        probe_sequences: probe.len(),
        identity_rewrite,
        layernorms: records
            .into_iter()
            .map(|r| MigrationEntry {
                ln: r.ln,
                rescaled: r.rescaled,
                shortcut: r.shortcut,
            })
            .collect(),
    };
    fs::create_dir_all(&args.out)?;
    io::save_model(&args.out.join("model_migrated.json"), &migrated)?;
    io::write_json(&args.out.join("migration_report.json"), &report, true)?;
    println!(
        "rewrote {} LayerNorms; max relative difference {max_rel_diff:.3e} over {} probe sequences",
        report.layernorms.len(),
        report.probe_sequences
    );
    if identity_rewrite {
        println!("identity rewrite: every gamma was 1, no weight value changed");
    }
    println!(
        "wrote model_migrated.json and migration_report.json to {}",
        args.out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// calibrate
// ---------------------------------------------------------------------------

#[derive(Args)]
struct CalibrateArgs {
    /// JSON file with the same keys as the flags below; flags override it
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// minmax | omse | percentile | easyquant | twc
    #[arg(long)]
    method: Option<String>,
    /// Bit widths as weights-embeddings-activations, e.g. 6-6-6
    #[arg(long)]
    bits: Option<String>,
    /// Rewrite LayerNorm scales into consumers before calibrating
    #[arg(long)]
    migrate: bool,
    /// Directory for calibration.json, loss_trace.csv and timing.csv
    #[arg(long)]
    out: Option<PathBuf>,
    /// Clip-ratio candidates tried by the twc coarse stage
    #[arg(long)]
    alpha_iters: Option<usize>,
    /// Learning rate of the twc fine stage
    #[arg(long)]
    lr: Option<f64>,
    /// Full-batch epochs of the twc fine stage
    #[arg(long)]
    epochs: Option<usize>,
    /// Central mass kept by the percentile method
    #[arg(long)]
    percentile_ratio: Option<f64>,
}

/// File form of the calibrate flags. Everything optional; command-line
/// flags win over file values.
#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
struct CalibrateFileConfig {
    model: Option<PathBuf>,
    data: Option<PathBuf>,
    method: Option<String>,
    bits: Option<String>,
    migrate: Option<bool>,
    out: Option<PathBuf>,
    alpha_iters: Option<usize>,
    lr: Option<f64>,
    epochs: Option<usize>,
    percentile_ratio: Option<f64>,
    omse_search: Option<OmseSearch>,
}

fn require<T>(v: Option<T>, what: &str) -> Result<T> {
    v.ok_or_else(|| {
        Error::config(format!(
            "missing {what}: pass the flag or set it in --config"
        ))
    })
}

fn cmd_calibrate(args: CalibrateArgs) -> Result<()> {
    let file = match &args.config {
        Some(p) => io::read_json::<CalibrateFileConfig>(p)?,
        None => CalibrateFileConfig::default(),
    };
    let model_path = require(args.model.or(file.model), "--model")?;
    let data_path = require(args.data.or(file.data), "--data")?;
    let method: Method = require(args.method.or(file.method), "--method")?.parse()?;
    let bits: BitsSpec = require(args.bits.or(file.bits), "--bits")?.parse()?;
    let migrate_first = args.migrate || file.migrate.unwrap_or(false);
    let out_dir = args.out.or(file.out).unwrap_or_else(|| PathBuf::from("."));

    let mut cfg = CalibrationConfig::new(method, bits);
    if let Some(v) = args.alpha_iters.or(file.alpha_iters) {
        cfg.alpha_iters = v;
    }
    if let Some(v) = args.lr.or(file.lr) {
        cfg.lr = v;
    }
    if let Some(v) = args.epochs.or(file.epochs) {
        cfg.epochs = v;
    }
    if let Some(v) = args.percentile_ratio.or(file.percentile_ratio) {
        cfg.percentile_ratio = v;
    }
    if let Some(v) = file.omse_search {
        cfg.omse_search = v;
    }
    cfg.batch = BATCH;

    let mut model = io::load_model(&model_path)?;
    if migrate_first {
        migration::migrate(&mut model)?;
    }
    let data = io::load_data(&data_path)?;
    let outcome = calibration::calibrate(&mut model, &data, &cfg)?;

    fs::create_dir_all(&out_dir)?;
    io::write_json(&out_dir.join("calibration.json"), &outcome.result, true)?;
    let trace_csv = match &outcome.trace {
        Some(t) => calibration::render_loss_trace_csv(t),
        // Methods without a search trace still get the file, holding only
        // the final end-to-end loss.
        None => match outcome.result.final_loss {
            Some(l) => format!("phase,alpha_or_epoch,loss\nfinal,0,{l:.9e}\n"),
            None => String::from("phase,alpha_or_epoch,loss\n"),
        },
    };
    fs::write(out_dir.join("loss_trace.csv"), trace_csv)?;
    fs::write(
        out_dir.join("timing.csv"),
        calibration::render_timing_csv(&outcome.timings),
    )?;

    println!(
        "calibrated with {method} at {bits} (migrated: {})",
        outcome.result.migrated
    );
    if let Some(l) = outcome.result.final_loss {
        println!("final loss {l:.6e}");
    }
    if let Some(alpha) = outcome.result.slots.values().find_map(|s| s.alpha) {
        println!("chosen clip ratio {alpha:.2}");
    }
    println!(
        "wrote calibration.json, loss_trace.csv and timing.csv to {}",
        out_dir.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    /// calibration.json produced by `calibrate`
    #[arg(long)]
    calibration: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Apply the migration rewrite before installing the calibration; needed
    /// when the calibration was made with --migrate but the model file was not
    #[arg(long)]
    migrate: bool,
    /// Directory for eval_report.json
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Serialize)]
struct EvalReportFile {
    method: String,
    bits: String,
    migrated: bool,
    accuracy_pct: f64,
    fp_accuracy_pct: f64,
    /// Squared error of the quantized final hidden state against full
    /// precision, averaged per token, on the eval sequences.
    quant_loss: f64,
    eval_sequences: usize,
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let mut model = io::load_model(&args.model)?;
    if args.migrate {
        migration::migrate(&mut model)?;
    }
    let result: CalibrationResult = io::read_json(&args.calibration)?;
    calibration::apply_calibration(&mut model, &result)?;
    let data = io::load_data(&args.data)?;
    check_data_matches(&model, data.seq_len, data.vocab)?;
    let fp_acc = metrics::evaluate(&model, &data.eval, RunMode::Fp, BATCH)?;
    let q_acc = metrics::evaluate(&model, &data.eval, RunMode::Quant, BATCH)?;
    let cache = calibration::build_cache(&model, &data.eval.sequences, BATCH)?;
    let loss = calibration::quant_loss(&model, &cache)?;
    let report = EvalReportFile {
        method: result.method.clone(),
        bits: result.bits.clone(),
        migrated: result.migrated,
        accuracy_pct: q_acc,
        fp_accuracy_pct: fp_acc,
        quant_loss: loss,
        eval_sequences: data.eval.sequences.len(),
    };
    fs::create_dir_all(&args.out)?;
    io::write_json(&args.out.join("eval_report.json"), &report, true)?;
    println!(
        "quantized accuracy {q_acc:.2} (fp {fp_acc:.2}), quantization loss {loss:.6e} over {} sequences",
        report.eval_sequences
    );
    println!("wrote eval_report.json to {}", args.out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// report
// ---------------------------------------------------------------------------

/// Clip values listed in the outlier report, as fractions of the observed
/// activation peak.
const OUTLIER_CLIP_FRACTIONS: [f64; 4] = [0.9, 0.7, 0.5, 0.3];
/// Clip fractions swept by the clip-impact table.
const SWEEP_FRACTIONS: [f64; 10] = [1.0, 0.9, 0.75, 0.6, 0.5, 0.4, 0.3, 0.2, 0.1, 0.05];

#[derive(Args)]
struct ReportArgs {
    /// Run directory holding data.json, calibration.json and model.json
    /// (model_migrated.json is used instead when the calibration says so)
    #[arg(long)]
    run: PathBuf,
    /// Directory for the CSVs; defaults to the run directory
    #[arg(long)]
    out: Option<PathBuf>,
}

fn cmd_report(args: ReportArgs) -> Result<()> {
    let result: CalibrationResult = io::read_json(&args.run.join("calibration.json"))?;
    let model_file = if result.migrated {
        "model_migrated.json"
    } else {
        "model.json"
    };
    let mut model = io::load_model(&args.run.join(model_file))?;
    let data = io::load_data(&args.run.join("data.json"))?;
    check_data_matches(&model, data.seq_len, data.vocab)?;
    calibration::apply_calibration(&mut model, &result)?;

    let out_dir = args.out.unwrap_or_else(|| args.run.clone());
    fs::create_dir_all(&out_dir)?;

    let act_bits = result.bits.parse::<BitsSpec>()?.activation;
    let rows = metrics::node_report(&model, &data.calibration, act_bits, BATCH)?;
    fs::write(
        out_dir.join("node_report.csv"),
        metrics::render_node_report_csv(&rows),
    )?;

    // First pass finds the activation peak; the second reports clipped-token
    // fractions at fixed fractions of it.
    let shape = metrics::outlier_structure(&model, &data.calibration, BATCH, &[])?;
    let peak = shape
        .iter()
        .flat_map(|s| s.dim_max_abs.iter())
        .fold(0.0f64, |m, &v| m.max(v));
    let clips: Vec<f64> = OUTLIER_CLIP_FRACTIONS.iter().map(|f| f * peak).collect();
    let shape = metrics::outlier_structure(&model, &data.calibration, BATCH, &clips)?;
    fs::write(
        out_dir.join("outlier_report.csv"),
        metrics::render_outlier_csv(&shape),
    )?;

    let sweep = metrics::clip_impact_sweep(&model, &data.eval, &SWEEP_FRACTIONS, BATCH)?;
    fs::write(
        out_dir.join("clip_sweep.csv"),
        metrics::render_clip_sweep_csv(&sweep),
    )?;

    let size = metrics::model_size(&model)?;
    fs::write(out_dir.join("size_report.csv"), metrics::render_size_csv(&size))?;

    println!(
        "wrote node_report.csv, outlier_report.csv, clip_sweep.csv and size_report.csv to {}",
        out_dir.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// shared helpers
// ---------------------------------------------------------------------------

fn check_data_matches(
    model: &ptq_core::model::ModelGraph,
    seq_len: usize,
    vocab: usize,
) -> Result<()> {
    if seq_len != model.meta.seq_len || vocab != model.meta.vocab {
        return Err(Error::format(format!(
            "data (seq_len {seq_len}, vocab {vocab}) does not match model (seq_len {}, vocab {})",
            model.meta.seq_len, model.meta.vocab
        )));
    }
    Ok(())
}
