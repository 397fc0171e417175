//! Command-line front end. Exit codes: 0 success, 1 runtime failure,
//! 2 usage error.

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use kwsforge::audio::{fit_to_length, read_wav, write_wav, CLIP_LEN};
use kwsforge::checkpoint::{load_checkpoint, save_checkpoint};
use kwsforge::dataset::{scan_dataset, Corpus, Split, KEYWORDS};
use kwsforge::models::count_multiplies;
use kwsforge::rng::seeded;
use kwsforge::training::{multi_seed_run_with, train_with, write_history, EpochRecord, TrainConfig};
use kwsforge::{evaluate, predict_wav, ModelName, ModelSpec};
use serde_json::json;

use crate::config::{self, Overrides};
use crate::service::{self, AppState, PredictResponse, CHECKPOINT_ENV, DEFAULT_BIND, DEFAULT_PORT};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "kwsforge",
    version,
    about = "Keyword spotting: train, evaluate and serve small CNNs"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model on a Speech Commands style directory.
    Train(TrainArgs),
    /// Score a checkpoint on a split, or classify one WAV.
    Eval(EvalArgs),
    /// Run the REST inference service.
    Serve(ServeArgs),
    /// Pad or crop a 16 kHz mono WAV to exactly one second.
    Prep(PrepArgs),
    /// Print per-layer multiply counts of an architecture.
    CountOps(CountOpsArgs),
    /// Write a small synthetic corpus for smoke tests.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub model: Option<ModelName>,
    /// Corpus root with one directory per word and `_background_noise_`.
    #[arg(long, required_unless_present = "print_config")]
    pub data: Option<PathBuf>,
    /// TOML file with config fields; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, conflicts_with = "seeds")]
    pub seed: Option<u64>,
    /// Comma-separated seeds; trains once per seed and reports mean and 95% CI.
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    pub seeds: Option<Vec<u64>>,
    #[arg(long)]
    pub lr: Option<f32>,
    #[arg(long)]
    pub momentum: Option<f32>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub epochs: Option<u32>,
    /// Disable time shift and noise mixing.
    #[arg(long)]
    pub no_augment: bool,
    /// Comma-separated keyword list.
    #[arg(long, value_delimiter = ',')]
    pub keywords: Option<Vec<String>>,
    #[arg(long, default_value = "checkpoint.bin")]
    pub out: PathBuf,
    /// Per-epoch history TSV; defaults to the checkpoint path with a `.tsv` extension.
    #[arg(long)]
    pub history: Option<PathBuf>,
    /// Print the effective config as TOML and exit.
    #[arg(long)]
    pub print_config: bool,
    #[arg(long)]
    pub json: bool,
    #[arg(long, short)]
    pub quiet: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, env = CHECKPOINT_ENV)]
    pub checkpoint: PathBuf,
    #[arg(long, required_unless_present = "single", conflicts_with = "single")]
    pub data: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    pub split: Split,
    /// Classify one WAV file instead of scoring a split.
    #[arg(long)]
    pub single: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    pub keywords: Option<Vec<String>>,
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, env = CHECKPOINT_ENV)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = DEFAULT_PORT)]
    pub port: u16,
    #[arg(long, default_value = DEFAULT_BIND)]
    pub bind: String,
    /// Send permissive cross-origin headers.
    #[arg(long)]
    pub cors: bool,
}

#[derive(Debug, Args)]
pub struct PrepArgs {
    pub input: PathBuf,
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct CountOpsArgs {
    pub model: ModelName,
    #[arg(long, default_value_t = 12)]
    pub n_labels: usize,
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 20)]
    pub files: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// A failure that maps to the usage exit code.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

/// Parses `args` and runs the command, returning the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) if e.is::<UsageError>() || e.is::<config::ConfigError>() => {
            eprintln!("error: {e:#}");
            EXIT_USAGE
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            EXIT_FAILURE
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Serve(a) => cmd_serve(a),
        Command::Prep(a) => cmd_prep(a),
        Command::CountOps(a) => cmd_count_ops(a),
        Command::Synth(a) => cmd_synth(a),
    }
}

fn load_corpus(data: &Path, keywords: Option<&[String]>) -> Result<Corpus> {
    if !data.is_dir() {
        return Err(UsageError(format!("data directory {} does not exist", data.display())).into());
    }
    let default: Vec<String> = KEYWORDS.iter().map(|k| k.to_string()).collect();
    let manifest = scan_dataset(data, keywords.unwrap_or(&default))?;
    Ok(Corpus::load(manifest)?)
}

fn progress(quiet: bool, seed: u64, r: &EpochRecord) {
    if !quiet {
        eprintln!(
            "seed {seed} epoch {:>3}  loss {:.4}  val accuracy {:.4}",
            r.epoch, r.train_loss, r.val_accuracy
        );
    }
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let flags = Overrides {
        model: a.model,
        learning_rate: a.lr,
        momentum: a.momentum,
        batch_size: a.batch_size,
        max_epochs: a.epochs,
        seed: a.seed,
        no_augment: a.no_augment,
    };
    let config = config::resolve(a.config.as_deref(), &flags)?;
    if a.print_config {
        print!("{}", config::to_toml(&config));
        return Ok(());
    }
    let data = a.data.as_deref().expect("clap requires --data");
    let corpus = load_corpus(data, a.keywords.as_deref())?;

    if let Some(seeds) = a.seeds.as_ref().filter(|s| s.len() > 1) {
        return train_seeds(&config, &corpus, seeds, a.quiet, a.json);
    }
    let config = TrainConfig {
        seed: a.seeds.and_then(|s| s.first().copied()).unwrap_or(config.seed),
        ..config
    };
    let (checkpoint, run) = train_with(&config, &corpus, |r| progress(a.quiet, config.seed, r))?;
    save_checkpoint(&checkpoint, &a.out)?;
    let history_path = a.history.unwrap_or_else(|| a.out.with_extension("tsv"));
    let file = File::create(&history_path).with_context(|| format!("creating {}", history_path.display()))?;
    let mut w = BufWriter::new(file);
    write_history(&run.history, &mut w)?;
    w.flush()?;

    if a.json {
        println!(
            "{}",
            json!({
                "checkpoint": a.out,
                "history": history_path,
                "config": config,
                "result": run,
            })
        );
    } else {
        println!(
            "best epoch: {} (val accuracy {:.4})",
            run.best_epoch, run.best_validation_accuracy
        );
        println!("test accuracy: {:.4}", run.test_accuracy);
        println!("checkpoint: {}", a.out.display());
    }
    Ok(())
}

fn train_seeds(config: &TrainConfig, corpus: &Corpus, seeds: &[u64], quiet: bool, as_json: bool) -> Result<()> {
    let result = multi_seed_run_with(config, corpus, seeds, |seed, r| progress(quiet, seed, r))?;
    if as_json {
        println!("{}", json!({ "config": config, "result": result }));
    } else {
        for r in &result.runs {
            println!(
                "seed {}: test accuracy {:.4} (best epoch {})",
                r.seed, r.test_accuracy, r.best_epoch
            );
        }
        println!(
            "test accuracy: {:.4} ± {:.4} (95% CI, n={})",
            result.mean_test_accuracy,
            result.ci95_half_width,
            result.runs.len()
        );
    }
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let checkpoint = load_checkpoint(&a.checkpoint)?;
    if let Some(wav) = &a.single {
        let bytes = fs::read(wav).with_context(|| format!("reading {}", wav.display()))?;
        let prediction = predict_wav(&checkpoint.model, &bytes)?;
        let response = PredictResponse::from_prediction(&prediction, &checkpoint.model.labels());
        if a.json {
            println!("{}", serde_json::to_string(&response)?);
        } else {
            println!("label: {}", response.label);
            for (label, score) in &response.scores {
                println!("  {label:<8} {:.6}", score.as_f64().unwrap_or(f64::NAN));
            }
        }
        return Ok(());
    }
    let data = a.data.as_deref().expect("clap requires --data");
    let corpus = load_corpus(data, a.keywords.as_deref())?;
    if corpus.manifest.n_labels() != checkpoint.model.n_labels() {
        return Err(UsageError(format!(
            "checkpoint has {} labels, corpus has {}",
            checkpoint.model.n_labels(),
            corpus.manifest.n_labels()
        ))
        .into());
    }
    let accuracy = evaluate(&checkpoint, &corpus, a.split)?;
    if a.json {
        println!("{}", json!({ "split": a.split, "accuracy": accuracy }));
    } else {
        println!("accuracy: {accuracy:.4}");
    }
    Ok(())
}

fn cmd_serve(a: ServeArgs) -> Result<()> {
    let state = Arc::new(AppState::load(&a.checkpoint)?);
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(async move {
        let listener = service::bind(&a.bind, a.port).await?;
        eprintln!(
            "serving {} on http://{}",
            state.model.spec().name,
            listener
                .local_addr()
                .map_or_else(|_| format!("{}:{}", a.bind, a.port), |x| x.to_string())
        );
        service::serve_on(listener, state, a.cors, service::shutdown_signal()).await?;
        Ok(())
    })
}

fn cmd_prep(a: PrepArgs) -> Result<()> {
    let clip = read_wav(&a.input)?;
    let fitted = fit_to_length(&clip, CLIP_LEN);
    write_wav(&fitted, &a.output)?;
    println!(
        "{} -> {} ({} -> {} samples)",
        a.input.display(),
        a.output.display(),
        clip.len(),
        fitted.len()
    );
    Ok(())
}

fn cmd_count_ops(a: CountOpsArgs) -> Result<()> {
    if a.n_labels < 2 {
        return Err(UsageError(format!("n_labels must be at least 2, got {}", a.n_labels)).into());
    }
    let count = count_multiplies(&ModelSpec::for_name(a.model, a.n_labels))?;
    if a.json {
        println!("{}", serde_json::to_string(&count)?);
        return Ok(());
    }
    let mut out = io::stdout().lock();
    writeln!(out, "{}", count.model)?;
    for layer in &count.layers {
        writeln!(
            out,
            "  {:<8} {:>12}  ({:.3e})",
            layer.layer, layer.multiplies, layer.multiplies as f64
        )?;
    }
    writeln!(out, "total: {} ({:.3e})", count.total, count.total as f64)?;
    Ok(())
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    kwsforge::synth::write_corpus(&a.out, a.files, &mut seeded(a.seed))?;
    println!("wrote {} clips to {}", a.files, a.out.display());
    Ok(())
}
