//! `volseg`: train, infer, evaluate, summarize complexity, and generate
//! phantom datasets for the volumetric segmentation engine.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.

mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use volseg_core::data::augment::normalize_sample;
use volseg_core::data::phantom::{generate_dataset, PhantomSpec};
use volseg_core::data::{list_cases, load_case_auto, load_labels_auto, rawvol, DataError};
use volseg_core::infer::{sliding_window_infer, tta_infer};
use volseg_core::metrics::{evaluate_case, report_csv_row, summarize, RegionMapping, REPORT_CSV_HEADER};
use volseg_core::model::{complexity, ModelConfig};
use volseg_core::train::{load_checkpoint, train_loop, TrainConfig, TrainError};

#[derive(Parser)]
#[command(
    name = "volseg",
    version,
    about = "Volumetric brain-tumor segmentation: 3D CNN encoder, transformer bottleneck, progressive-upsampling decoder"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model on a case directory of volumes.
    Train(TrainArgs),
    /// Segment volumes with a trained checkpoint.
    Infer(InferArgs),
    /// Score predicted label volumes against ground truth.
    Eval(EvalArgs),
    /// Print per-stage shapes, parameter counts, and FLOPs for a config.
    Summarize(SummarizeArgs),
    /// Generate a synthetic phantom dataset.
    Phantom(PhantomArgs),
}

#[derive(Args)]
struct ConfigSource {
    /// Preset name: full, lightweight, os16, os4, or tiny.
    #[arg(long, conflicts_with = "config")]
    preset: Option<String>,
    /// Path to a key=value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override single config keys (repeatable), e.g. --set depth=2.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigSource {
    fn resolve(&self) -> Result<ModelConfig, CliError> {
        let mut cfg = match (&self.preset, &self.config) {
            (Some(p), None) => ModelConfig::preset(p).map_err(usage)?,
            (None, Some(path)) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| CliError::Data(format!("cannot read {}: {e}", path.display())))?;
                ModelConfig::from_key_values(&text).map_err(usage)?
            }
            (None, None) => ModelConfig::preset("full").map_err(usage)?,
            (Some(_), Some(_)) => unreachable!("clap conflicts_with"),
        };
        for kv in &self.overrides {
            let (key, value) = kv
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got `{kv}`")))?;
            cfg.set(key.trim(), value).map_err(usage)?;
        }
        cfg.validate().map_err(usage)?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigSource,
    /// Dataset root containing case directories.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for checkpoints, loss trace, and run manifest.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    epochs: usize,
    #[arg(long, default_value_t = 1)]
    batch_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Resume from an existing checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Disable the augmentation pipeline (center-crop only).
    #[arg(long)]
    no_augment: bool,
    /// Write a checkpoint every N epochs (0 = final only).
    #[arg(long, default_value_t = 0)]
    checkpoint_every: usize,
}

#[derive(Args)]
struct InferArgs {
    /// Trained checkpoint path.
    #[arg(long)]
    checkpoint: PathBuf,
    /// A case directory or a dataset root of case directories.
    #[arg(long)]
    input: PathBuf,
    /// Output directory for predicted label volumes.
    #[arg(long)]
    out: PathBuf,
    /// Average predictions over the eight mirror-flip variants.
    #[arg(long)]
    tta: bool,
    /// Sliding-window stride (defaults to half the window).
    #[arg(long)]
    stride: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    /// Directory of predicted cases.
    #[arg(long)]
    pred: PathBuf,
    /// Directory of ground-truth cases.
    #[arg(long)]
    gt: PathBuf,
    /// Region mapping overrides, e.g. "ET=1" or "ET=4;TC=1,4;WT=1,2,4".
    #[arg(long)]
    mapping: Option<String>,
    /// Output directory for report.csv and summary.json.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SummarizeArgs {
    #[command(flatten)]
    config: ConfigSource,
}

#[derive(Args)]
struct PhantomArgs {
    /// Output dataset root.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 2)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Cubic volume extent.
    #[arg(long, default_value_t = 128)]
    extent: usize,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Data(String),
    Numerical(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }
    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Numerical(m) => m,
        }
    }
}

fn usage<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Usage(e.to_string())
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFiniteLoss { .. } | TrainError::Optim(_) => {
                CliError::Numerical(e.to_string())
            }
            TrainError::Tensor(inner) => CliError::Numerical(inner.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests are successes, not usage errors.
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("volseg: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Infer(args) => cmd_infer(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Summarize(args) => cmd_summarize(args),
        Command::Phantom(args) => cmd_phantom(args),
    }
}

fn cmd_train(args: TrainArgs) -> Result<(), CliError> {
    let model_cfg = args.config.resolve()?;
    if !args.data.is_dir() {
        return Err(CliError::Data(format!(
            "dataset root {} does not exist",
            args.data.display()
        )));
    }
    let train_cfg = TrainConfig {
        epochs: args.epochs,
        batch_size: args.batch_size,
        seed: args.seed,
        augment: !args.no_augment,
        checkpoint_every: args.checkpoint_every,
        ..Default::default()
    };
    manifest::append_run_manifest(&args.out, "train", args.seed, &model_cfg)?;
    let outcome = train_loop(
        &model_cfg,
        &train_cfg,
        &args.data,
        &args.out,
        args.resume.as_deref(),
    )?;
    println!(
        "trained {} steps; final loss {:.6}; checkpoint at {}",
        outcome.trace.len(),
        outcome.trace.last().map(|r| r.loss).unwrap_or(f64::NAN),
        outcome.final_checkpoint.display()
    );
    Ok(())
}

fn case_dirs(input: &Path) -> Result<Vec<(String, PathBuf)>, CliError> {
    if input.join("manifest.json").is_file() || input.join("t1.nii").is_file() {
        let id = input
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "case".into());
        return Ok(vec![(id, input.to_path_buf())]);
    }
    let ids = list_cases(input)?;
    if ids.is_empty() {
        return Err(CliError::Data(format!(
            "{} contains no case directories",
            input.display()
        )));
    }
    Ok(ids
        .into_iter()
        .map(|id| {
            let dir = input.join(&id);
            (id, dir)
        })
        .collect())
}

fn cmd_infer(args: InferArgs) -> Result<(), CliError> {
    let (model, _, _) = load_checkpoint::<f32>(&args.checkpoint)
        .map_err(|e| CliError::Data(e.to_string()))?;
    let window = model.config.input_extent;
    let stride = args.stride.unwrap_or(window.0 / 2).max(1);
    std::fs::create_dir_all(&args.out)
        .map_err(|e| CliError::Data(format!("cannot create {}: {e}", args.out.display())))?;
    manifest::append_run_manifest(&args.out, "infer", 0, &model.config)?;
    for (case_id, dir) in case_dirs(&args.input)? {
        let mut sample = load_case_auto(&dir)?;
        normalize_sample(&mut sample);
        let labels = if args.tta {
            tta_infer(&model, &sample.modalities, sample.extent, stride)
        } else {
            sliding_window_infer(&model, &sample.modalities, sample.extent, stride)
        }
        .map_err(|e| CliError::Numerical(e.to_string()))?;
        rawvol::write_labels(&args.out, &case_id, &labels, sample.extent, sample.spacing)?;
        println!("{case_id}: wrote {} voxels", labels.len());
    }
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<(), CliError> {
    let mapping = match &args.mapping {
        Some(text) => RegionMapping::parse_overrides(text).map_err(usage)?,
        None => RegionMapping::default(),
    };
    let gt_cases = case_dirs(&args.gt)?;
    let mut missing = Vec::new();
    for (id, _) in &gt_cases {
        if !args.pred.join(id).is_dir() {
            missing.push(id.clone());
        }
    }
    if !missing.is_empty() {
        return Err(CliError::Data(format!(
            "prediction directory is missing cases: {}",
            missing.join(", ")
        )));
    }
    std::fs::create_dir_all(&args.out)
        .map_err(|e| CliError::Data(format!("cannot create {}: {e}", args.out.display())))?;
    let mut reports = Vec::new();
    let mut csv = format!("# mapping: {}\n{}\n", mapping.describe(), REPORT_CSV_HEADER);
    for (id, gt_dir) in &gt_cases {
        let (gt, extent, spacing) = load_labels_auto(gt_dir)?;
        let (pred, pred_extent, _) = load_labels_auto(&args.pred.join(id))?;
        if pred_extent != extent {
            return Err(CliError::Data(format!(
                "case {id}: prediction extent {pred_extent:?} != ground truth {extent:?}"
            )));
        }
        let report = evaluate_case(id, &pred, &gt, &mapping, extent, spacing)
            .map_err(|e| CliError::Numerical(e.to_string()))?;
        csv.push_str(&report_csv_row(&report));
        csv.push('\n');
        reports.push(report);
    }
    let summary = summarize(&reports, &mapping);
    std::fs::write(args.out.join("report.csv"), csv)
        .map_err(|e| CliError::Data(e.to_string()))?;
    std::fs::write(
        args.out.join("summary.json"),
        serde_json::to_string_pretty(&summary).expect("summary serializes"),
    )
    .map_err(|e| CliError::Data(e.to_string()))?;
    println!(
        "evaluated {} cases: mean dice ET {:.4} WT {:.4} TC {:.4}",
        summary.cases, summary.mean_dice_et, summary.mean_dice_wt, summary.mean_dice_tc
    );
    Ok(())
}

fn cmd_summarize(args: SummarizeArgs) -> Result<(), CliError> {
    let cfg = args.config.resolve()?;
    let report = complexity(&cfg);
    println!(
        "{:<18} {:>24} {:>14} {:>12}",
        "stage", "output shape", "params", "GFLOPs"
    );
    for s in &report.stages {
        let shape = s
            .out_shape
            .iter()
            .map(|v| v.to_string())
            .collect::<Vec<_>>()
            .join("x");
        println!(
            "{:<18} {:>24} {:>14} {:>12.3}",
            s.name,
            shape,
            s.params,
            s.flops as f64 / 1e9
        );
    }
    println!(
        "{:<18} {:>24} {:>14} {:>12.3}",
        "total",
        format!("N={}", report.seq_len),
        report.total_params(),
        report.total_flops() as f64 / 1e9
    );

    let full = complexity(&ModelConfig::preset("full").map_err(usage)?);
    let light = complexity(&ModelConfig::preset("lightweight").map_err(usage)?);
    let param_red =
        100.0 * (full.total_params() - light.total_params()) as f64 / full.total_params() as f64;
    let flop_red =
        100.0 * (full.total_flops() - light.total_flops()) as f64 / full.total_flops() as f64;
    println!(
        "full -> lightweight reduction: {param_red:.2}% params, {flop_red:.2}% FLOPs"
    );
    Ok(())
}

fn cmd_phantom(args: PhantomArgs) -> Result<(), CliError> {
    if args.count == 0 {
        return Err(CliError::Usage("--count must be at least 1".into()));
    }
    if args.extent < 16 {
        return Err(CliError::Usage("--extent must be at least 16".into()));
    }
    std::fs::create_dir_all(&args.out)
        .map_err(|e| CliError::Data(format!("cannot create {}: {e}", args.out.display())))?;
    let spec = PhantomSpec {
        extent: (args.extent, args.extent, args.extent),
        ..Default::default()
    };
    manifest::append_phantom_manifest(&args.out, args.seed, args.count, args.extent)?;
    let ids = generate_dataset(&args.out, args.count, args.seed, &spec)?;
    println!("generated {} cases under {}", ids.len(), args.out.display());
    Ok(())
}
