//! Command-line surface: data generation, training, evaluation, batch
//! prediction, and feature export.
//!
//! Logs go to stderr; data products go to files. Exit codes: 0 success,
//! 1 usage error, 2 data error, 3 numeric failure.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use beatkit::bayes::SampleMode;
use beatkit::checkpoint::{self, CheckpointError};
use beatkit::data::{self, DataError, Segment};
use beatkit::inference::{self, ThresholdPolicy};
use beatkit::metrics;
use beatkit::network::Network;
use beatkit::runcfg::RunConfig;
use beatkit::tensor::Tensor;
use beatkit::trainer::{self, TrainError};

#[derive(Parser)]
#[command(name = "beatkit", about = "Bayesian PPG atrial-fibrillation detection toolkit")]
struct Cli {
    /// Root seed for all randomness (overrides config file).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads (0 = all cores; overrides config file).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Flat key-value config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset: train/val/test segment files plus a
    /// split manifest.
    GenData(GenDataArgs),
    /// Train a network and write the best checkpoint by validation F1.
    Train(TrainArgs),
    /// Evaluate a checkpoint across uncertainty thresholds.
    Eval(EvalArgs),
    /// Per-segment Monte Carlo predictions as JSON lines.
    Predict(PredictArgs),
    /// Export penultimate-layer features as CSV.
    ExportFeatures(ExportArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    val: PathBuf,
    /// Checkpoint output path.
    #[arg(long)]
    out: PathBuf,
    /// Run log (one JSON line per epoch).
    #[arg(long)]
    log: Option<PathBuf>,
    /// Sampling mode: weight-sample or local-reparam.
    #[arg(long)]
    mode: Option<String>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Comma-separated descending thresholds, e.g. "none,0.05,0.01".
    #[arg(long, default_value = "none,0.05,0.01")]
    thresholds: String,
    #[arg(long)]
    out_json: PathBuf,
    #[arg(long)]
    out_csv: PathBuf,
    /// Monte Carlo draws per segment (overrides config).
    #[arg(long)]
    mc_draws: Option<usize>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    mc_draws: Option<usize>,
    /// Uncertainty threshold ("none" or a number; overrides config).
    #[arg(long)]
    threshold: Option<String>,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

/// Error carrying the process exit code.
struct CliError {
    code: u8,
    message: String,
}

impl CliError {
    fn usage(message: impl Into<String>) -> Self {
        CliError { code: 1, message: message.into() }
    }

    fn data(message: impl Into<String>) -> Self {
        CliError { code: 2, message: message.into() }
    }

    fn numeric(message: impl Into<String>) -> Self {
        CliError { code: 3, message: message.into() }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::BadSpec(_) | DataError::BadFractions(_) => CliError::usage(e.to_string()),
            _ => CliError::data(e.to_string()),
        }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        CliError::data(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::BadConfig(_) | TrainError::LambdaIndex { .. } => {
                CliError::usage(e.to_string())
            }
            TrainError::NonFiniteLoss { .. } => CliError::numeric(e.to_string()),
            _ => CliError::data(e.to_string()),
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap renders its own help/version output.
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::from_file(path).map_err(|e| CliError::usage(e.to_string()))?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.set_seed(seed);
    }
    if let Some(threads) = cli.threads {
        cfg.threads = threads;
    }
    cfg.validate().map_err(|e| CliError::usage(e.to_string()))?;

    if cfg.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.threads)
            .build_global()
            .map_err(|e| CliError::usage(format!("thread pool: {}", e)))?;
    }

    // Echo the effective configuration to the run log (stderr).
    eprintln!("# effective configuration");
    for line in cfg.to_text().lines() {
        eprintln!("# {}", line);
    }

    match cli.command {
        Command::GenData(args) => cmd_gen_data(&cfg, &args),
        Command::Train(args) => cmd_train(cfg, &args),
        Command::Eval(args) => cmd_eval(&cfg, &args),
        Command::Predict(args) => cmd_predict(&cfg, &args),
        Command::ExportFeatures(args) => cmd_export_features(&args),
    }
}

/// Removes the listed paths on drop unless disarmed; keeps failed
/// commands from leaving partial outputs behind.
struct Cleanup {
    paths: Vec<PathBuf>,
    armed: bool,
}

impl Cleanup {
    fn new() -> Self {
        Cleanup { paths: Vec::new(), armed: true }
    }

    fn track(&mut self, path: &Path) {
        self.paths.push(path.to_path_buf());
    }

    fn disarm(&mut self) {
        self.armed = false;
    }
}

impl Drop for Cleanup {
    fn drop(&mut self) {
        if self.armed {
            for path in &self.paths {
                let _ = fs::remove_file(path);
            }
        }
    }
}

fn cmd_gen_data(cfg: &RunConfig, args: &GenDataArgs) -> Result<(), CliError> {
    let raw = beatkit::synth::synth_generate(&cfg.synth)?;
    eprintln!("generated {} raw segments", raw.len());

    let mut segments = Vec::with_capacity(raw.len());
    for seg in &raw {
        let samples = data::preprocess(&seg.samples, data::TARGET_RATE)?;
        segments.push(Segment { samples, ..seg.clone() });
    }
    let manifest = data::split_subjects(&segments, cfg.split_fractions, cfg.seed)?;
    let (train, val, test) = manifest.partition(&segments);
    eprintln!("split: {} train / {} val / {} test segments", train.len(), val.len(), test.len());

    fs::create_dir_all(&args.out).map_err(|e| CliError::data(e.to_string()))?;
    let mut cleanup = Cleanup::new();
    for (name, set) in [("train", &train), ("val", &val), ("test", &test)] {
        let path = args.out.join(format!("{}.bbseg", name));
        cleanup.track(&path);
        data::save_segments(set, &path)?;
    }
    let manifest_path = args.out.join("split.json");
    cleanup.track(&manifest_path);
    data::save_manifest(&manifest, &manifest_path)?;
    cleanup.disarm();
    eprintln!("wrote segment files and split manifest to {}", args.out.display());
    Ok(())
}

fn cmd_train(mut cfg: RunConfig, args: &TrainArgs) -> Result<(), CliError> {
    if let Some(mode) = &args.mode {
        let mode = SampleMode::parse(mode)
            .ok_or_else(|| CliError::usage(format!("bad --mode {:?}", mode)))?;
        if mode == SampleMode::MeanOnly {
            return Err(CliError::usage("--mode mean-only cannot train"));
        }
        cfg.train.mode = mode;
    }
    let train_set = data::load_segments(&args.train)?;
    let val_set = data::load_segments(&args.val)?;

    let mut net = Network::build(cfg.net.clone(), cfg.seed)
        .map_err(|e| CliError::usage(e.to_string()))?;
    eprintln!("network parameters: {}", net.param_count());

    let mut cleanup = Cleanup::new();
    let log_file = match &args.log {
        Some(path) => {
            cleanup.track(path);
            Some(fs::File::create(path).map_err(|e| CliError::data(e.to_string()))?)
        }
        None => None,
    };
    cleanup.track(&args.out);

    let mut log_file = log_file;
    let outcome =
        trainer::train_with_progress(&mut net, &train_set, &val_set, &cfg.train, |report| {
            let line = serde_json::to_string(report).expect("epoch report serializes");
            eprintln!("{}", line);
            if let Some(f) = log_file.as_mut() {
                let _ = writeln!(f, "{}", line);
            }
        })?;

    checkpoint::save(&outcome.best, &args.out)?;
    cleanup.disarm();
    eprintln!(
        "best epoch {} (validation F1 {:.4}); checkpoint written to {}",
        outcome.best_epoch,
        outcome.best_f1,
        args.out.display()
    );
    Ok(())
}

fn batch_of(segments: &[Segment], input_len: usize) -> Result<Tensor, CliError> {
    let mut data = Vec::with_capacity(segments.len() * input_len);
    for seg in segments {
        if seg.samples.len() != input_len {
            return Err(CliError::data(format!(
                "segment of {} samples does not match network input {}",
                seg.samples.len(),
                input_len
            )));
        }
        data.extend_from_slice(&seg.samples);
    }
    Tensor::from_vec(vec![segments.len(), 1, input_len], data)
        .map_err(|e| CliError::data(e.to_string()))
}

fn predict_all(
    net: &Network,
    segments: &[Segment],
    draws: usize,
    seed: u64,
) -> Result<Vec<inference::Prediction>, CliError> {
    let input_len = net.config().input_len;
    let mut preds = Vec::with_capacity(segments.len());
    for chunk in segments.chunks(128) {
        let batch = batch_of(chunk, input_len)?;
        let chunk_preds = inference::predict_batch(net, &batch, draws, seed, false)
            .map_err(|e| CliError::data(e.to_string()))?;
        preds.extend(chunk_preds);
    }
    Ok(preds)
}

fn parse_thresholds(spec: &str) -> Result<Vec<Option<f64>>, CliError> {
    spec.split(',')
        .map(|s| match s.trim() {
            "none" => Ok(None),
            v => v
                .parse::<f64>()
                .map(Some)
                .map_err(|_| CliError::usage(format!("bad threshold {:?}", v))),
        })
        .collect()
}

fn cmd_eval(cfg: &RunConfig, args: &EvalArgs) -> Result<(), CliError> {
    let thresholds = parse_thresholds(&args.thresholds)?;
    let draws = args.mc_draws.unwrap_or(cfg.infer_draws);
    if draws == 0 {
        return Err(CliError::usage("--mc-draws must be >= 1"));
    }
    let net = checkpoint::load(&args.checkpoint)?;
    let segments = data::load_segments(&args.data)?;
    let labels: Vec<u8> = segments
        .iter()
        .enumerate()
        .map(|(i, s)| s.label.ok_or_else(|| CliError::data(format!("segment {} unlabeled", i))))
        .collect::<Result<_, _>>()?;
    let preds = predict_all(&net, &segments, draws, cfg.seed)?;
    let reports = metrics::threshold_sweep(&preds, &labels, &thresholds)
        .map_err(|e| CliError::usage(e.to_string()))?;

    let mut cleanup = Cleanup::new();
    cleanup.track(&args.out_json);
    cleanup.track(&args.out_csv);
    let json = serde_json::to_string_pretty(&reports).expect("reports serialize");
    fs::write(&args.out_json, json).map_err(|e| CliError::data(e.to_string()))?;
    fs::write(&args.out_csv, metrics::sweep_to_csv(&reports))
        .map_err(|e| CliError::data(e.to_string()))?;
    cleanup.disarm();

    for r in &reports {
        eprintln!(
            "threshold {:>6}: abstain {:.3} F1 {:.4} AUC {:.4} MCC {:.4}",
            r.threshold.map(|t| t.to_string()).unwrap_or_else(|| "none".into()),
            r.abstention_rate,
            r.f1,
            r.auc,
            r.mcc
        );
    }
    Ok(())
}

fn cmd_predict(cfg: &RunConfig, args: &PredictArgs) -> Result<(), CliError> {
    let draws = args.mc_draws.unwrap_or(cfg.infer_draws);
    if draws == 0 {
        return Err(CliError::usage("--mc-draws must be >= 1"));
    }
    let threshold = match &args.threshold {
        Some(t) if t == "none" => None,
        Some(t) => Some(
            t.parse::<f64>().map_err(|_| CliError::usage(format!("bad --threshold {:?}", t)))?,
        ),
        None => cfg.threshold,
    };
    let policy = ThresholdPolicy::new(threshold).map_err(|e| CliError::usage(e.to_string()))?;
    let net = checkpoint::load(&args.checkpoint)?;
    let segments = data::load_segments(&args.data)?;

    let mut preds = predict_all(&net, &segments, draws, cfg.seed)?;
    for p in preds.iter_mut() {
        p.accepted = policy.accepts(p.u_scalar);
    }

    let mut out = String::new();
    for (i, p) in preds.iter().enumerate() {
        let record = inference::PredictionRecord::new(i, p);
        out.push_str(&serde_json::to_string(&record).expect("record serializes"));
        out.push('\n');
    }
    let mut cleanup = Cleanup::new();
    cleanup.track(&args.out);
    fs::write(&args.out, out).map_err(|e| CliError::data(e.to_string()))?;
    cleanup.disarm();

    let abstained = preds.iter().filter(|p| !p.accepted).count();
    eprintln!("{} predictions written ({} abstained)", preds.len(), abstained);
    Ok(())
}

fn cmd_export_features(args: &ExportArgs) -> Result<(), CliError> {
    let net = checkpoint::load(&args.checkpoint)?;
    let segments = data::load_segments(&args.data)?;
    let input_len = net.config().input_len;

    let mut rows = String::new();
    let mut width = 0usize;
    let mut segment_id = 0usize;
    for chunk in segments.chunks(256) {
        let batch = batch_of(chunk, input_len)?;
        let features = net.penultimate_features(&batch).map_err(|e| CliError::data(e.to_string()))?;
        width = features.shape()[1];
        for (seg, row) in chunk.iter().zip(features.data().chunks(width)) {
            let label = seg.label.map(|l| l as i8).unwrap_or(-1);
            rows.push_str(&format!("{},{}", segment_id, label));
            for v in row {
                rows.push_str(&format!(",{}", v));
            }
            rows.push('\n');
            segment_id += 1;
        }
    }
    let mut header = String::from("segment_id,label");
    for i in 0..width {
        header.push_str(&format!(",f{}", i));
    }
    header.push('\n');

    let mut cleanup = Cleanup::new();
    cleanup.track(&args.out);
    fs::write(&args.out, header + &rows).map_err(|e| CliError::data(e.to_string()))?;
    cleanup.disarm();
    eprintln!("{} feature rows written to {}", segment_id, args.out.display());
    Ok(())
}
