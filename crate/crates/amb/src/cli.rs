//! Command-line entry point: training, evaluation, robustness sweeps,
//! parameter accounting, and synthetic-corpus generation.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
//! failure (training aborted on a non-finite loss).

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::{AmbConfig, ConfigError};
use crate::model::{load_weights, save_weights, AmbModel, ModelError};
use crate::pipeline::{
    generate_synthetic, load_jsonl, prepare, save_jsonl, synthetic_vocabulary, DataError,
    MultimodalSample, PreparedSample,
};
use crate::robustness::{
    robustness_sweep, sweep_to_csv, CorruptionKind, RobustnessError, DEFAULT_RATES,
};
use crate::text::{TextError, Vocabulary};
use crate::trainer::{evaluate_with, history_to_csv, train, TrainError};

#[derive(Parser)]
#[command(
    name = "amb",
    about = "Adapter-based multimodal sentiment regression",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write checkpoint, history, and config snapshot.
    Train(TrainArgs),
    /// Evaluate a checkpoint; prints one CSV row of metrics.
    Eval(EvalArgs),
    /// Run the input-corruption robustness sweep over a checkpoint.
    Robustness(RobustnessArgs),
    /// Print trainable/frozen parameter counts per group.
    Params(CommonArgs),
    /// Generate a synthetic corpus as JSONL.
    Synth(SynthArgs),
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// Flat key = value config file; every key optional.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Repeatable key=value override, applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Random seed (also honors the AMB_SEED environment variable).
    #[arg(long)]
    seed: Option<u64>,
    /// Mode override: adapters, finetune, text_only, no_text.
    #[arg(long)]
    mode: Option<String>,
    /// Output directory for artifacts.
    #[arg(long, default_value = "amb_out")]
    out: PathBuf,
}

#[derive(Args, Clone)]
struct DataArgs {
    /// JSONL corpus path.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Vocabulary file (one token per line, [PAD] first); required with --data.
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Generate N synthetic samples instead of reading files.
    #[arg(long, value_name = "N")]
    synthetic: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[command(flatten)]
    data: DataArgs,
    /// Held-out JSONL dev set; defaults to an 80/20 split (files) or a
    /// fresh seed+1 corpus of n/4 samples (synthetic).
    #[arg(long)]
    dev: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[command(flatten)]
    data: DataArgs,
    /// Checkpoint archive to evaluate.
    #[arg(long, default_value = "amb_out/model.tensors")]
    checkpoint: PathBuf,
    /// Drop label==0 samples from Acc-2/F1 (alternative convention).
    #[arg(long)]
    acc2_exclude_zero: bool,
}

#[derive(Args)]
struct RobustnessArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[command(flatten)]
    data: DataArgs,
    /// Checkpoint archive to evaluate.
    #[arg(long, default_value = "amb_out/model.tensors")]
    checkpoint: PathBuf,
    /// Comma-separated corruption kinds (delete, replace, visual_noise).
    #[arg(long, value_delimiter = ',', default_values_t = vec![
        "delete".to_string(), "replace".to_string(), "visual_noise".to_string()
    ])]
    kinds: Vec<String>,
    /// Comma-separated corruption rates in [0, 1].
    #[arg(long, value_delimiter = ',')]
    rates: Option<Vec<f64>>,
    /// Independent corrupted runs per (kind, rate); seeds are seed+run.
    #[arg(long, default_value_t = 3)]
    runs: usize,
    /// Spread of the multiplicative visual noise, N(1, sigma^2).
    #[arg(long, default_value_t = 1.0)]
    sigma: f64,
}

#[derive(Args)]
struct SynthArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Number of samples to generate.
    #[arg(long)]
    n: usize,
    /// Also write the generator vocabulary to this path.
    #[arg(long)]
    vocab_out: Option<PathBuf>,
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Data(#[from] DataError),
    #[error("{0}")]
    Text(#[from] TextError),
    #[error("{0}")]
    Archive(#[from] crate::archive::ArchiveError),
    #[error("{0}")]
    Robustness(#[from] RobustnessError),
    #[error("{0}")]
    Train(#[from] TrainError),
    #[error("{0}")]
    Model(#[from] ModelError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Model(ModelError::Config(_)) => 2,
            CliError::Train(TrainError::NonFiniteLoss { .. }) => 4,
            CliError::Train(TrainError::Model(ModelError::Config(_))) => 2,
            CliError::Train(TrainError::EmptySet(_)) => 3,
            CliError::Data(_) | CliError::Text(_) | CliError::Archive(_) | CliError::Io(_) => 3,
            CliError::Robustness(RobustnessError::Eval(TrainError::NonFiniteLoss { .. })) => 4,
            CliError::Robustness(RobustnessError::UnknownKind { .. }) => 2,
            CliError::Robustness(_) => 2,
            CliError::Train(_) | CliError::Model(_) => 4,
        }
    }
}

/// Parses argv and runs one command; returns the process exit code.
pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap prints its own message; usage problems are config errors
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let result = match cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Robustness(args) => cmd_robustness(args),
        Command::Params(args) => cmd_params(args),
        Command::Synth(args) => cmd_synth(args),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Resolution order: defaults, AMB_SEED, config file, --set overrides, then
/// the dedicated --mode and --seed flags (most specific last).
fn resolve_config(common: &CommonArgs) -> Result<AmbConfig, CliError> {
    let mut cfg = AmbConfig::default();
    if let Ok(seed) = std::env::var("AMB_SEED") {
        cfg.seed = seed.parse().map_err(|_| ConfigError::BadValue {
            key: "AMB_SEED".into(),
            value: seed,
            expected: "u64",
        })?;
    }
    if let Some(path) = &common.config {
        cfg.apply_file(path)?;
    }
    for kv in &common.set {
        let Some((key, value)) = kv.split_once('=') else {
            return Err(ConfigError::BadLine {
                line: 0,
                text: kv.clone(),
            }
            .into());
        };
        cfg.apply_kv(key.trim(), value.trim())?;
    }
    if let Some(mode) = &common.mode {
        cfg.apply_kv("mode", mode)?;
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

struct LoadedData {
    samples: Vec<MultimodalSample>,
    vocab: Vocabulary,
    provenance: String,
}

/// Loads the evaluation/training corpus. With `--synthetic n` the corpus is
/// generated from the resolved seed and the built-in vocabulary, and
/// `vocab_size` is overridden to match.
fn load_data(data: &DataArgs, cfg: &mut AmbConfig) -> Result<LoadedData, CliError> {
    match (&data.data, data.synthetic) {
        (Some(path), None) => {
            let vocab_path = data.vocab.as_ref().ok_or_else(|| {
                ConfigError::Invalid("--data requires --vocab".to_string())
            })?;
            let vocab = Vocabulary::from_file(vocab_path)?;
            cfg.vocab_size = vocab.len();
            let samples = load_jsonl(path, cfg)?;
            Ok(LoadedData {
                samples,
                vocab,
                provenance: format!("file {}", path.display()),
            })
        }
        (None, Some(n)) => {
            if n == 0 {
                return Err(ConfigError::Invalid("--synthetic needs n >= 1".into()).into());
            }
            let vocab = synthetic_vocabulary();
            cfg.vocab_size = vocab.len();
            let samples = generate_synthetic(n, cfg.seed, cfg);
            Ok(LoadedData {
                samples,
                vocab,
                provenance: format!("synthetic n={n} seed={}", cfg.seed),
            })
        }
        (Some(_), Some(_)) => {
            Err(ConfigError::Invalid("--data and --synthetic are exclusive".into()).into())
        }
        (None, None) => {
            Err(ConfigError::Invalid("provide --data PATH or --synthetic N".into()).into())
        }
    }
}

fn prepare_all(
    samples: &[MultimodalSample],
    vocab: &Vocabulary,
    cfg: &AmbConfig,
) -> Result<Vec<PreparedSample>, CliError> {
    Ok(prepare(samples, vocab, cfg)?)
}

fn cmd_train(args: TrainArgs) -> Result<(), CliError> {
    let mut cfg = resolve_config(&args.common)?;
    let loaded = load_data(&args.data, &mut cfg)?;

    let (train_samples, dev_samples): (Vec<MultimodalSample>, Vec<MultimodalSample>) =
        if let Some(dev_path) = &args.dev {
            let dev = load_jsonl(dev_path, &cfg)?;
            (loaded.samples, dev)
        } else if args.data.synthetic.is_some() {
            let n_dev = (loaded.samples.len() / 4).max(1);
            let dev = generate_synthetic(n_dev, cfg.seed + 1, &cfg);
            (loaded.samples, dev)
        } else {
            // deterministic 80/20 split by index
            let cut = (loaded.samples.len() * 4) / 5;
            let cut = cut.max(1).min(loaded.samples.len().saturating_sub(1).max(1));
            let mut train = loaded.samples;
            let dev = train.split_off(cut);
            (train, dev)
        };

    let train_set = prepare_all(&train_samples, &loaded.vocab, &cfg)?;
    let dev_set = prepare_all(&dev_samples, &loaded.vocab, &cfg)?;

    let mut model = AmbModel::<f32>::new(cfg.clone())?;
    let outcome = train(&mut model, &train_set, &dev_set)?;

    std::fs::create_dir_all(&args.common.out)?;
    let ckpt_path = args.common.out.join("model.tensors");
    save_weights(&outcome.best_params, &ckpt_path)?;
    std::fs::write(
        args.common.out.join("history.csv"),
        history_to_csv(&outcome.history),
    )?;
    let snapshot = format!(
        "# resolved configuration\n# data: {}\n# best epoch: {} (dev mae {})\n{}",
        loaded.provenance,
        outcome.best_epoch,
        outcome.best_dev_mae,
        cfg.to_kv_string()
    );
    std::fs::write(args.common.out.join("config.resolved"), snapshot)?;

    println!(
        "trained {} epochs ({} steps): best dev mae {:.6} at epoch {}{}",
        outcome.history.len(),
        outcome.steps,
        outcome.best_dev_mae,
        outcome.best_epoch,
        if outcome.stopped_early {
            " (early stop)"
        } else {
            ""
        }
    );
    println!("artifacts in {}", args.common.out.display());
    Ok(())
}

fn load_checkpoint_model(
    cfg: &AmbConfig,
    checkpoint: &Path,
) -> Result<AmbModel<f32>, CliError> {
    let params = load_weights::<f32>(cfg, checkpoint)?;
    Ok(AmbModel::with_params(cfg.clone(), params)?)
}

fn cmd_eval(args: EvalArgs) -> Result<(), CliError> {
    let mut cfg = resolve_config(&args.common)?;
    let loaded = load_data(&args.data, &mut cfg)?;
    let set = prepare_all(&loaded.samples, &loaded.vocab, &cfg)?;
    let model = load_checkpoint_model(&cfg, &args.checkpoint)?;
    let report = evaluate_with(&model, &set, args.acc2_exclude_zero)?;
    println!("mae,corr,acc7,acc2,f1,n,degenerate_corr");
    println!(
        "{},{},{},{},{},{},{}",
        report.mae, report.corr, report.acc7, report.acc2, report.f1, report.n,
        report.degenerate_corr
    );
    Ok(())
}

fn cmd_robustness(args: RobustnessArgs) -> Result<(), CliError> {
    let mut cfg = resolve_config(&args.common)?;
    let loaded = load_data(&args.data, &mut cfg)?;
    let set = prepare_all(&loaded.samples, &loaded.vocab, &cfg)?;
    let model = load_checkpoint_model(&cfg, &args.checkpoint)?;

    let kinds = args
        .kinds
        .iter()
        .map(|k| k.parse::<CorruptionKind>())
        .collect::<Result<Vec<_>, _>>()?;
    let rates = args.rates.clone().unwrap_or_else(|| DEFAULT_RATES.to_vec());
    for &rate in &rates {
        if !(0.0..=1.0).contains(&rate) {
            return Err(RobustnessError::RateOutOfRange(rate).into());
        }
    }
    if args.runs == 0 {
        return Err(ConfigError::Invalid("--runs must be >= 1".into()).into());
    }

    let points = robustness_sweep(
        &model,
        &set,
        &loaded.vocab,
        &kinds,
        &rates,
        args.runs,
        args.sigma,
        cfg.seed,
    )?;
    let csv = sweep_to_csv(&points);
    std::fs::create_dir_all(&args.common.out)?;
    let path = args.common.out.join("robustness.csv");
    std::fs::write(&path, &csv)?;
    print!("{csv}");
    eprintln!("sweep written to {}", path.display());
    Ok(())
}

fn cmd_params(args: CommonArgs) -> Result<(), CliError> {
    let cfg = resolve_config(&args)?;
    let model = AmbModel::<f32>::new(cfg)?;
    let counts = model.counts();
    println!("group,trainable,frozen,total");
    for (group, gc) in &counts.groups {
        println!("{},{},{},{}", group, gc.trainable, gc.frozen, gc.total());
    }
    println!(
        "total,{},{},{}",
        counts.trainable,
        counts.frozen,
        counts.total()
    );
    Ok(())
}

fn cmd_synth(args: SynthArgs) -> Result<(), CliError> {
    let cfg = resolve_config(&args.common)?;
    if args.n == 0 {
        return Err(ConfigError::Invalid("--n must be >= 1".into()).into());
    }
    let samples = generate_synthetic(args.n, cfg.seed, &cfg);
    std::fs::create_dir_all(&args.common.out)?;
    let path = args.common.out.join("synthetic.jsonl");
    save_jsonl(&samples, &path)?;
    println!("wrote {} samples to {}", samples.len(), path.display());
    if let Some(vocab_path) = &args.vocab_out {
        synthetic_vocabulary().to_file(vocab_path)?;
        println!("wrote vocabulary to {}", vocab_path.display());
    }
    Ok(())
}
