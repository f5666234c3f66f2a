//! Pipeline driver: generate data, train, perturb (quantize or prune),
//! calibrate the execution threshold, evaluate, and export figure CSVs.
//!
//! Progress goes to stderr. The only stdout output is a final single-line
//! JSON run manifest listing the command, governing seed, input hashes, and
//! output paths. Exit codes: 0 success, 1 usage or I/O error, 2 numerical
//! failure.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use adalayer::calibrate::{calibrate_threshold, SearchConfig};
use adalayer::checkpoint::{load_model, save_model};
use adalayer::fileio::{read_json, sha256_file, write_json_pretty};
use adalayer::metrics::evaluate_model;
use adalayer::model::{Model, ModelConfig};
use adalayer::quant::{prune_model, quantize_model, BitsSchedule, QuantConfig};
use adalayer::report::{classify_inputs, write_report_csvs};
use adalayer::rng::Stream;
use adalayer::task::{generate_dataset, Dataset, SplitId, TaskConfig};
use adalayer::train::{train, TrainConfig};
use adalayer::{Error, Result};

/// Keeps the weight-init stream distinct from the training streams that are
/// also derived from the training seed.
const MODEL_INIT_SEED_XOR: u64 = 0x6d6f_6465_6c00;
/// Keeps the evaluation flip-sampling stream distinct from the dataset
/// generation streams derived from the dataset seed.
const EVAL_FLIP_SEED_XOR: u64 = 0x666c_6970;
const EVAL_FLIP_DRAWS: usize = 64;

#[derive(Parser)]
#[command(
    name = "adalayer",
    version,
    about = "Token-adaptive layer execution laboratory: train router-gated \
             residual classifiers, perturb their weights, and calibrate the \
             execution threshold."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic depth-routing dataset.
    GenData {
        /// Task config JSON: {"format_version":1,"task":{...}}
        #[arg(long)]
        config: PathBuf,
        /// Output dataset JSON path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a router-gated model on a generated dataset.
    Train {
        /// Dataset JSON produced by gen-data.
        #[arg(long)]
        data: PathBuf,
        /// Run config JSON: {"format_version":1,"model":{...},"train":{...}};
        /// both sections optional, defaults apply.
        #[arg(long)]
        config: PathBuf,
        /// Output checkpoint JSON path.
        #[arg(long)]
        out: PathBuf,
        /// Output JSON-lines training log path.
        #[arg(long)]
        log: PathBuf,
    },
    /// Quantize block weights groupwise and write the dequantized model.
    Quantize {
        /// Input checkpoint.
        #[arg(long)]
        ckpt: PathBuf,
        /// Uniform bit width (may be omitted when --mixed is given).
        #[arg(long, value_parser = parse_bits, required_unless_present = "mixed")]
        bits: Option<u8>,
        /// Weights per quantization group along each row.
        #[arg(long, default_value_t = adalayer::quant::DEFAULT_GROUP_SIZE)]
        group_size: usize,
        /// Mixed-precision schedule JSON:
        /// {"format_version":1,"per_layer_bits":[...]}; overrides --bits,
        /// entries of 16 skip a layer.
        #[arg(long)]
        mixed: Option<PathBuf>,
        /// Output checkpoint path.
        #[arg(long)]
        out: PathBuf,
        /// Output per-tensor error manifest JSON path.
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Zero the smallest-magnitude block weights.
    Prune {
        /// Input checkpoint.
        #[arg(long)]
        ckpt: PathBuf,
        /// Fraction of each block weight tensor to zero, in [0, 1).
        #[arg(long)]
        sparsity: f64,
        /// Output checkpoint path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Grid-search the execution threshold on the calibration split.
    Calibrate {
        /// Input checkpoint.
        #[arg(long)]
        ckpt: PathBuf,
        /// Dataset JSON providing the calibration split.
        #[arg(long)]
        data: PathBuf,
        /// Output calibration report JSON path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on the test split at a fixed threshold.
    Eval {
        /// Input checkpoint.
        #[arg(long)]
        ckpt: PathBuf,
        /// Dataset JSON providing the test split.
        #[arg(long)]
        data: PathBuf,
        /// Execution threshold; 0.5 reproduces the argmax rule.
        #[arg(long, default_value_t = 0.5)]
        theta: f64,
        /// Output metrics report JSON path.
        #[arg(long)]
        report: PathBuf,
    },
    /// Export figure CSVs and the efficiency table from prior artifacts.
    Report {
        /// Training logs (.jsonl), metrics reports, calibration reports.
        #[arg(long, num_args = 1.., required = true)]
        inputs: Vec<PathBuf>,
        /// Directory for the CSV files.
        #[arg(long)]
        out_dir: PathBuf,
    },
}

fn parse_bits(raw: &str) -> std::result::Result<u8, String> {
    let bits: u8 = raw
        .parse()
        .map_err(|_| String::from("bits must be an integer"))?;
    match bits {
        2 | 3 | 4 | 8 => Ok(bits),
        _ => Err(String::from("supported widths are 2, 3, 4, and 8")),
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TaskFileConfig {
    format_version: u32,
    task: TaskConfig,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RunFileConfig {
    format_version: u32,
    #[serde(default)]
    model: ModelConfig,
    #[serde(default)]
    train: TrainConfig,
}

fn check_version(version: u32, path: &Path) -> Result<()> {
    if version == 1 {
        Ok(())
    } else {
        Err(Error::Artifact {
            path: path.display().to_string(),
            reason: format!("unsupported format_version {version}, expected 1"),
        })
    }
}

#[derive(Serialize)]
struct ManifestInput {
    path: String,
    sha256: String,
}

/// Single-line provenance record printed to stdout as the last output of
/// every successful (or numerically aborted) run.
#[derive(Serialize)]
struct RunManifest {
    format_version: u32,
    command: &'static str,
    tool_version: &'static str,
    /// The seed governing the run, when one exists.
    seed: Option<u64>,
    inputs: Vec<ManifestInput>,
    outputs: Vec<String>,
}

fn emit_manifest(
    command: &'static str,
    seed: Option<u64>,
    inputs: &[&Path],
    outputs: &[&Path],
) -> Result<()> {
    let inputs = inputs
        .iter()
        .map(|p| {
            Ok(ManifestInput {
                path: p.display().to_string(),
                sha256: sha256_file(p)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = RunManifest {
        format_version: 1,
        command,
        tool_version: env!("CARGO_PKG_VERSION"),
        seed,
        inputs,
        outputs: outputs.iter().map(|p| p.display().to_string()).collect(),
    };
    let line = serde_json::to_string(&manifest).map_err(|source| Error::Json {
        path: "stdout manifest".into(),
        source,
    })?;
    println!("{line}");
    Ok(())
}

fn cmd_gen_data(config_path: &Path, out: &Path) -> Result<()> {
    let file: TaskFileConfig = read_json(config_path)?;
    check_version(file.format_version, config_path)?;
    let dataset = generate_dataset(&file.task)?;
    dataset.save(out)?;
    eprintln!(
        "generated {} samples x {} tokens into {}",
        file.task.num_samples,
        file.task.tokens_per_sample,
        out.display()
    );
    emit_manifest("gen-data", Some(file.task.seed), &[config_path], &[out])
}

fn cmd_train(data: &Path, config_path: &Path, out: &Path, log_path: &Path) -> Result<()> {
    let file: RunFileConfig = read_json(config_path)?;
    check_version(file.format_version, config_path)?;
    let dataset = Dataset::load(data)?;
    let mut init_rng = Stream::seeded(file.train.seed ^ MODEL_INIT_SEED_XOR);
    let mut model = Model::init(&file.model, &mut init_rng)?;

    let log_file = std::fs::File::create(log_path).map_err(|source| Error::Io {
        path: log_path.display().to_string(),
        source,
    })?;
    let mut log = std::io::BufWriter::new(log_file);
    let report = train(&mut model, &dataset, &file.train, &mut log)?;
    log.flush().map_err(|source| Error::Io {
        path: log_path.display().to_string(),
        source,
    })?;
    save_model(&model, out)?;

    if let Some(acc) = report.final_test_accuracy() {
        eprintln!(
            "trained {} steps; final test accuracy {:.4}",
            report.steps, acc
        );
    }
    emit_manifest(
        "train",
        Some(file.train.seed),
        &[data, config_path],
        &[out, log_path],
    )?;
    if let Some(d) = report.divergence {
        eprintln!("training diverged; checkpoint holds the last finite parameters");
        return Err(Error::Diverged {
            step: d.step as usize,
            reason: d.reason,
        });
    }
    Ok(())
}

fn cmd_quantize(
    ckpt: &Path,
    bits: Option<u8>,
    group_size: usize,
    mixed: Option<&Path>,
    out: &Path,
    manifest_path: &Path,
) -> Result<()> {
    let model = load_model(ckpt)?;
    let per_layer_bits = match mixed {
        Some(path) => {
            let schedule: BitsSchedule = read_json(path)?;
            check_version(schedule.format_version, path)?;
            Some(schedule.per_layer_bits)
        }
        None => None,
    };
    let mut cfg = QuantConfig {
        group_size,
        per_layer_bits,
        ..QuantConfig::default()
    };
    if let Some(bits) = bits {
        cfg.bits = bits;
    }
    let (quantized, manifest) = quantize_model(&model, &cfg)?;
    save_model(&quantized, out)?;
    write_json_pretty(manifest_path, &manifest)?;
    let worst = manifest
        .tensors
        .iter()
        .map(|t| t.max_abs_error)
        .fold(0.0, f64::max);
    eprintln!(
        "quantized {} tensors; worst round-trip error {worst:.6}",
        manifest.tensors.len()
    );
    let mut inputs = vec![ckpt];
    if let Some(path) = mixed {
        inputs.push(path);
    }
    emit_manifest("quantize", None, &inputs, &[out, manifest_path])
}

fn cmd_prune(ckpt: &Path, sparsity: f64, out: &Path) -> Result<()> {
    let model = load_model(ckpt)?;
    let pruned = prune_model(&model, sparsity)?;
    save_model(&pruned, out)?;
    eprintln!("pruned block weights at sparsity {sparsity}");
    emit_manifest("prune", None, &[ckpt], &[out])
}

fn cmd_calibrate(ckpt: &Path, data: &Path, out: &Path) -> Result<()> {
    let model = load_model(ckpt)?;
    let dataset = Dataset::load(data)?;
    let cfg = SearchConfig::default();
    let view = dataset.split_view(SplitId::Calib);
    let take = cfg.calib_size.min(view.inputs.len());
    let report = calibrate_threshold(&model, &view.inputs[..take], &view.labels[..take], &cfg)?;
    write_json_pretty(out, &report)?;
    let selected = report.selected();
    eprintln!(
        "selected theta {} (accuracy {:.4}, execution ratio {:.4}) from {} candidates",
        selected.theta,
        selected.accuracy,
        selected.exec_ratio,
        report.candidates.len()
    );
    emit_manifest("calibrate", None, &[ckpt, data], &[out])
}

fn cmd_eval(ckpt: &Path, data: &Path, theta: f64, report_path: &Path) -> Result<()> {
    let model = load_model(ckpt)?;
    let dataset = Dataset::load(data)?;
    let view = dataset.split_view(SplitId::Test);
    let flip_seed = dataset.config.seed ^ EVAL_FLIP_SEED_XOR;
    let mut flip_rng = Stream::seeded(flip_seed);
    let report = evaluate_model(
        &model,
        &view.inputs,
        &view.labels,
        theta,
        EVAL_FLIP_DRAWS,
        &mut flip_rng,
    )?;
    write_json_pretty(report_path, &report)?;
    eprintln!(
        "theta {theta}: accuracy {:.4}, execution ratio {:.4}",
        report.accuracy, report.avg_exec_ratio
    );
    emit_manifest("eval", Some(flip_seed), &[ckpt, data], &[report_path])
}

fn cmd_report(inputs: &[PathBuf], out_dir: &Path) -> Result<()> {
    let grouped = classify_inputs(inputs)?;
    let written = write_report_csvs(&grouped, out_dir)?;
    eprintln!("wrote {} csv files to {}", written.len(), out_dir.display());
    let input_refs: Vec<&Path> = inputs.iter().map(PathBuf::as_path).collect();
    let output_refs: Vec<&Path> = written.iter().map(PathBuf::as_path).collect();
    emit_manifest("report", None, &input_refs, &output_refs)
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData { config, out } => cmd_gen_data(&config, &out),
        Command::Train {
            data,
            config,
            out,
            log,
        } => cmd_train(&data, &config, &out, &log),
        Command::Quantize {
            ckpt,
            bits,
            group_size,
            mixed,
            out,
            manifest,
        } => cmd_quantize(&ckpt, bits, group_size, mixed.as_deref(), &out, &manifest),
        Command::Prune { ckpt, sparsity, out } => cmd_prune(&ckpt, sparsity, &out),
        Command::Calibrate { ckpt, data, out } => cmd_calibrate(&ckpt, &data, &out),
        Command::Eval {
            ckpt,
            data,
            theta,
            report,
        } => cmd_eval(&ckpt, &data, theta, &report),
        Command::Report { inputs, out_dir } => cmd_report(&inputs, &out_dir),
    }
}

fn exit_code(err: &Error) -> i32 {
    match err {
        Error::NonFinite { .. } | Error::Diverged { .. } => 2,
        _ => 1,
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            std::process::exit(code);
        }
    };
    if let Err(err) = run(cli.command) {
        eprintln!("error: {err}");
        std::process::exit(exit_code(&err));
    }
}
