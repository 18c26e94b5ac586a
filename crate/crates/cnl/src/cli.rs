//! Command-line front end: cost analysis, gradient verification, toy
//! training, and attention-map export as reproducible runs.
//!
//! A JSON config file can stand in for flags (flags win on conflict), every
//! run writes a manifest with the fully resolved configuration, and all
//! randomness flows from the single `--seed`. Exit codes: 0 success,
//! 1 validation error, 2 verification failure, 3 divergence.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::analysis::{build_report, FlopConvention};
use crate::attention::{AttnMode, NormMode};
use crate::backbone::{apply_preset, forward, resnet_spec, toy_spec, ArchSpec, Model, Preset};
use crate::error::{Error, Result};
use crate::gradcheck::{run_suite, SuiteConfig};
use crate::train::{evaluate, generate_dataset, train, DatasetSpec, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "cnl", version, about = "Cross-layer non-local attention: analysis, verification, training, export")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the static cost report (parameters, FLOPs, attention entries).
    Analyze(AnalyzeArgs),
    /// Run the finite-difference gradient suite over the attention paths.
    Gradcheck(GradcheckArgs),
    /// Train the toy backbone on the synthetic two-scale dataset.
    Train(TrainArgs),
    /// Export per-branch attention maps from a checkpoint for one image.
    AttnExport(AttnExportArgs),
}

#[derive(Debug, Clone, Default, Args)]
pub struct CommonArgs {
    /// Architecture: resnet50, resnet101, toy, or a path to a spec JSON.
    #[arg(long)]
    pub spec: Option<String>,
    /// Insertion preset: baseline, nl5, or cnl5.
    #[arg(long)]
    pub preset: Option<String>,
    /// Square input size in pixels.
    #[arg(long)]
    pub input: Option<usize>,
    /// Number of classes.
    #[arg(long)]
    pub classes: Option<usize>,
    /// Seed for all randomness in the run.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// FLOP convention: mac1 or mac2.
    #[arg(long)]
    pub convention: Option<String>,
    /// Attention normalization: dot-mean or softmax.
    #[arg(long)]
    pub mode: Option<String>,
    /// Embedding width override for the cross-layer preset.
    #[arg(long)]
    pub ce: Option<usize>,
    /// JSON config file supplying any of the flags; flags win on conflict.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Randomized repetitions per path/mode combination.
    #[arg(long)]
    pub rounds: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    /// Base learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    /// Pixel noise level of the generated dataset.
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub train_count: Option<usize>,
    #[arg(long)]
    pub test_count: Option<usize>,
    /// Also write the generated dataset as PGM files plus a label index.
    #[arg(long)]
    pub dump_dataset: bool,
}

#[derive(Debug, Args)]
pub struct AttnExportArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Checkpoint written by `train`.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Input image (8-bit P5 PGM at the model's input size).
    #[arg(long)]
    pub image: PathBuf,
    /// Query positions to render (row-major index); default: center.
    #[arg(long = "query-pos")]
    pub query_pos: Vec<usize>,
}

/// Optional JSON stand-in for the flags; also carries subcommand extras.
#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub spec: Option<String>,
    pub preset: Option<String>,
    pub input: Option<usize>,
    pub classes: Option<usize>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub convention: Option<String>,
    pub mode: Option<String>,
    pub ce: Option<usize>,
    pub epochs: Option<usize>,
    pub batch: Option<usize>,
    pub lr: Option<f64>,
    pub noise: Option<f64>,
    pub train_count: Option<usize>,
    pub test_count: Option<usize>,
    pub rounds: Option<usize>,
}

/// Fully resolved run configuration; serialized verbatim as the manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub command: String,
    pub spec: String,
    /// `baseline`/`nl5`/`cnl5`, or `from-file` when a spec file's own
    /// insertions are kept.
    pub preset: String,
    pub input: usize,
    pub classes: usize,
    pub seed: u64,
    pub out: PathBuf,
    pub convention: String,
    pub mode: String,
    pub ce: Option<usize>,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub noise: f64,
    pub train_count: usize,
    pub test_count: usize,
    pub rounds: usize,
    pub dump_dataset: bool,
}

impl RunConfig {
    pub fn attn_mode(&self) -> Result<AttnMode> {
        match self.mode.as_str() {
            "dot-mean" => Ok(AttnMode::DotMean),
            "softmax" => Ok(AttnMode::Softmax),
            other => Err(Error::Validation(format!(
                "unknown attention mode '{other}' (expected dot-mean or softmax)"
            ))),
        }
    }

    pub fn flop_convention(&self) -> Result<FlopConvention> {
        FlopConvention::parse(&self.convention)
    }
}

fn is_builtin_spec(name: &str) -> bool {
    matches!(name, "resnet50" | "resnet101" | "toy")
}

/// Merge flags over an optional config file over defaults.
pub fn resolve(command: &str, args: &CommonArgs, extra: &FileConfig) -> Result<RunConfig> {
    let file: FileConfig = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| Error::Validation(format!("config {}: {e}", path.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| Error::Validation(format!("config {}: {e}", path.display())))?
        }
        None => FileConfig::default(),
    };
    let spec = args.spec.clone().or(file.spec).unwrap_or_else(|| "toy".into());
    let is_resnet = spec.starts_with("resnet");
    let preset = args.preset.clone().or(file.preset).unwrap_or_else(|| {
        if is_builtin_spec(&spec) { "baseline".into() } else { "from-file".into() }
    });
    if preset != "from-file" {
        Preset::parse(&preset)?;
    }
    let cfg = RunConfig {
        command: command.into(),
        input: args.input.or(file.input).unwrap_or(if is_resnet { 448 } else { 64 }),
        classes: args.classes.or(file.classes).unwrap_or(if is_resnet { 200 } else { 4 }),
        seed: args.seed.or(file.seed).unwrap_or(0),
        out: args.out.clone().or(file.out).unwrap_or_else(|| PathBuf::from("out")),
        convention: args.convention.clone().or(file.convention).unwrap_or_else(|| "mac1".into()),
        mode: args.mode.clone().or(file.mode).unwrap_or_else(|| {
            if command == "gradcheck" { "both".into() } else { "dot-mean".into() }
        }),
        ce: args.ce.or(file.ce),
        epochs: extra.epochs.or(file.epochs).unwrap_or_else(|| TrainConfig::desk().epochs),
        batch: extra.batch.or(file.batch).unwrap_or_else(|| TrainConfig::desk().batch_size),
        lr: extra.lr.or(file.lr).unwrap_or_else(|| TrainConfig::desk().base_lr),
        noise: extra.noise.or(file.noise).unwrap_or(0.05),
        train_count: extra.train_count.or(file.train_count).unwrap_or(2000),
        test_count: extra.test_count.or(file.test_count).unwrap_or(500),
        rounds: extra.rounds.or(file.rounds).unwrap_or(2),
        dump_dataset: false,
        spec,
        preset,
    };
    match cfg.mode.as_str() {
        "dot-mean" | "softmax" => {}
        "both" if command == "gradcheck" => {}
        other => {
            return Err(Error::Validation(format!(
                "unknown attention mode '{other}' (expected dot-mean or softmax)"
            )))
        }
    }
    cfg.flop_convention()?;
    Ok(cfg)
}

/// Build the architecture named by the config and apply its preset.
pub fn load_spec(cfg: &RunConfig) -> Result<ArchSpec> {
    let mut spec = match cfg.spec.as_str() {
        "resnet50" => resnet_spec(50, cfg.input, cfg.classes)?,
        "resnet101" => resnet_spec(101, cfg.input, cfg.classes)?,
        "toy" => toy_spec(&[8, 16, 32], cfg.input, cfg.classes)?,
        path => {
            let file = Path::new(path);
            if !file.exists() {
                return Err(Error::Validation(format!("spec file {path} does not exist")));
            }
            ArchSpec::from_json(&fs::read_to_string(file)?)?
        }
    };
    if cfg.preset != "from-file" {
        apply_preset(&mut spec, Preset::parse(&cfg.preset)?, cfg.ce)?;
    }
    Ok(spec)
}

fn write_manifest(cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(&cfg.out)?;
    fs::write(cfg.out.join("manifest.json"), serde_json::to_string_pretty(cfg)?)?;
    Ok(())
}

/// Cost report: CSV, readable table, and the run manifest.
pub fn cmd_analyze(cfg: &RunConfig) -> Result<()> {
    let spec = load_spec(cfg)?;
    let report = build_report(&spec, (cfg.input, cfg.input), cfg.flop_convention()?)?;
    write_manifest(cfg)?;
    fs::write(cfg.out.join("cost_report.csv"), report.to_csv())?;
    let table = report.to_table();
    fs::write(cfg.out.join("cost_report.txt"), &table)?;
    print!("{table}");
    Ok(())
}

/// Gradient verification; exits nonzero listing the worst offenders when any
/// check misses the threshold.
pub fn cmd_gradcheck(cfg: &RunConfig) -> Result<()> {
    let attn_modes = match cfg.mode.as_str() {
        "both" => vec![AttnMode::DotMean, AttnMode::Softmax],
        _ => vec![cfg.attn_mode()?],
    };
    let suite = SuiteConfig {
        seed: cfg.seed,
        rounds: cfg.rounds.max(1),
        attn_modes,
        norm_modes: vec![NormMode::PerSample, NormMode::Running],
        ..SuiteConfig::default()
    };
    let report = run_suite(&suite)?;
    write_manifest(cfg)?;
    fs::write(cfg.out.join("gradcheck_report.csv"), report.to_csv())?;
    println!(
        "{} checks, threshold {:e}, worst {:.3e} ({})",
        report.checks.len(),
        report.threshold,
        report.worst().map_or(0.0, |w| w.max_rel_err),
        report.worst().map_or("-", |w| w.name.as_str()),
    );
    if report.all_passed() {
        Ok(())
    } else {
        let mut failing = report.failing();
        failing.sort_by(|a, b| b.max_rel_err.total_cmp(&a.max_rel_err));
        for f in failing.iter().take(10) {
            eprintln!("FAIL {} rel_err {:.3e}", f.name, f.max_rel_err);
        }
        Err(Error::Verification(format!("{} of {} checks failed", failing.len(), report.checks.len())))
    }
}

/// Train on the synthetic dataset and write the report, test metrics, and a
/// checkpoint.
pub fn cmd_train(cfg: &RunConfig) -> Result<()> {
    let spec = load_spec(cfg)?;
    let dataset_spec = DatasetSpec {
        image_size: cfg.input,
        num_classes: cfg.classes,
        noise: cfg.noise,
        train_count: cfg.train_count,
        test_count: cfg.test_count,
    };
    let data = generate_dataset(&dataset_spec, cfg.seed)?;
    let mut model = Model::from_spec(&spec, cfg.seed)?;
    let train_cfg = TrainConfig {
        batch_size: cfg.batch,
        base_lr: cfg.lr,
        seed: cfg.seed,
        top_k: 2.min(cfg.classes),
        ..TrainConfig::sized(cfg.epochs)
    };
    write_manifest(cfg)?;
    if cfg.dump_dataset {
        data.dump(&cfg.out.join("dataset"))?;
    }
    let report = train(&mut model, &data, &train_cfg)?;
    let (top1, topk) = evaluate(&model, &data.test, train_cfg.top_k)?;
    fs::write(cfg.out.join("train_report.csv"), report.to_csv())?;
    fs::write(
        cfg.out.join("test_metrics.csv"),
        crate::export::table_csv(
            &["top1", &format!("top{}", train_cfg.top_k)],
            &[vec![format!("{top1}"), format!("{topk}")]],
        ),
    )?;
    fs::write(cfg.out.join("checkpoint.json"), serde_json::to_string(&model)?)?;
    println!(
        "trained {} epochs: train top1 {:.3}, test top1 {:.3}",
        cfg.epochs,
        report.final_train_top1(),
        top1
    );
    Ok(())
}

/// Export one CSV per attention branch plus a PGM heat map per requested
/// query position and branch; file names encode both. The architecture comes
/// from the checkpoint; when `pinned` the resolved spec must match it.
pub fn cmd_attn_export(
    cfg: &RunConfig,
    checkpoint: &Path,
    image: &Path,
    query_pos: &[usize],
    pinned: bool,
) -> Result<()> {
    let model: Model = serde_json::from_str(&fs::read_to_string(checkpoint)?)?;
    if pinned {
        let expected = load_spec(cfg)?;
        if expected != model.spec {
            return Err(Error::Validation(format!(
                "checkpoint {} was built from a different spec than the requested {}/{}",
                checkpoint.display(),
                cfg.spec,
                cfg.preset
            )));
        }
    }
    let (w, h, pixels) = crate::export::read_pgm(image)?;
    let (ih, iw) = model.spec.input_size;
    if (h, w) != (ih, iw) || model.spec.input_channels != 1 {
        return Err(Error::Validation(format!(
            "image {}x{} does not match the model input {}x{}",
            w, h, iw, ih
        )));
    }
    let data: Vec<f64> = pixels.iter().map(|&p| p as f64 / 255.0).collect();
    let tensor = crate::tensor::Tensor::new(vec![h * w, 1], data)?;
    let (_, mut maps) = forward(&model, &[tensor], true)?;
    let maps = maps.pop().expect("one image");
    if maps.is_empty() {
        return Err(Error::Validation("the checkpoint has no attention insertions".into()));
    }
    write_manifest(cfg)?;
    for (b, map) in maps.iter().enumerate() {
        map.write_csv(&cfg.out.join(format!("attn_b{b}.csv")))?;
        let (nq, _) = map.dims();
        let (rh, rw) = model.spec.resolution_after(&map.response_id, model.spec.input_size)?;
        let positions = if query_pos.is_empty() { vec![nq / 2] } else { query_pos.to_vec() };
        for &q in &positions {
            let pgm = map.query_row_pgm(q, rh, rw)?;
            fs::write(cfg.out.join(format!("attn_q{q}_b{b}.pgm")), pgm)?;
        }
    }
    println!("wrote {} branch maps to {}", maps.len(), cfg.out.display());
    Ok(())
}

/// Parse argv and dispatch.
pub fn run() -> Result<()> {
    let cli = Cli::parse();
    dispatch(&cli.command)
}

pub fn dispatch(command: &Command) -> Result<()> {
    match command {
        Command::Analyze(args) => cmd_analyze(&resolve("analyze", &args.common, &FileConfig::default())?),
        Command::Gradcheck(args) => {
            let extra = FileConfig { rounds: args.rounds, ..FileConfig::default() };
            cmd_gradcheck(&resolve("gradcheck", &args.common, &extra)?)
        }
        Command::Train(args) => {
            let extra = FileConfig {
                epochs: args.epochs,
                batch: args.batch,
                lr: args.lr,
                noise: args.noise,
                train_count: args.train_count,
                test_count: args.test_count,
                ..FileConfig::default()
            };
            let mut cfg = resolve("train", &args.common, &extra)?;
            cfg.dump_dataset = args.dump_dataset;
            cmd_train(&cfg)
        }
        Command::AttnExport(args) => {
            let cfg = resolve("attn-export", &args.common, &FileConfig::default())?;
            let pinned = args.common.spec.is_some() || args.common.preset.is_some();
            cmd_attn_export(&cfg, &args.checkpoint, &args.image, &args.query_pos, pinned)
        }
    }
}

/// Process exit code for an error, per the documented contract.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Verification(_) => 2,
        Error::Divergence { .. } => 3,
        _ => 1,
    }
}
