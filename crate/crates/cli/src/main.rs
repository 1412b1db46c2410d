mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use wegen::WegenError;

use config::{parse_set, Override};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(WegenError),
}

impl From<WegenError> for CliError {
    fn from(e: WegenError) -> Self {
        CliError::Core(e)
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Core(e) => match e {
                WegenError::Config(_) | WegenError::InvalidArgument(_) => 1,
                WegenError::NonFinite(_)
                | WegenError::Domain { .. }
                | WegenError::Shape { .. }
                | WegenError::InvalidAxis { .. } => 3,
                _ => 2,
            },
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "wegen", version, about = "Answer-aware question generation with a pretrained relation guider")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by the subcommands that run from a config file.
#[derive(Args, Debug, Default)]
pub struct RunArgs {
    /// JSON run configuration; flags override its keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run directory for config.json, metrics.csv, checkpoints/ and outputs.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Seed for every random component.
    #[arg(long)]
    seed: Option<u64>,
    /// Override any config key, e.g. `--set train.lr=0.0005`.
    #[arg(long = "set", value_name = "KEY=VALUE", value_parser = parse_set)]
    set: Vec<Override>,
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// GloVe-style text vectors; random vectors are used when absent.
    #[arg(long)]
    embeddings: Option<PathBuf>,
}

impl RunArgs {
    fn overrides(&self) -> Vec<Override> {
        let mut o = Vec::new();
        path_override(&mut o, "paths.out_dir", &self.out_dir);
        path_override(&mut o, "paths.vocab", &self.vocab);
        path_override(&mut o, "paths.embeddings", &self.embeddings);
        if let Some(s) = self.seed {
            for key in ["guider.seed", "generator.seed", "train.seed", "data.embedding_seed"] {
                o.push((key.into(), json!(s)));
            }
        }
        o.extend(self.set.iter().cloned());
        o
    }
}

fn path_override(o: &mut Vec<Override>, key: &str, path: &Option<PathBuf>) {
    if let Some(p) = path {
        o.push((key.into(), json!(p)));
    }
}

fn value_override<T: Into<Value> + Clone>(o: &mut Vec<Override>, key: &str, v: &Option<T>) {
    if let Some(v) = v {
        o.push((key.into(), v.clone().into()));
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Count tokens in JSONL datasets and keep the most frequent ones.
    BuildVocab {
        /// QG or triplet JSONL files.
        #[arg(long = "in", required = true, num_args = 1..)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = wegen::data::DEFAULT_VOCAB_CAP)]
        cap: usize,
    },
    /// Train the passage-answer relation guider on triplets.
    PretrainGuider {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        triplets: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Train the question generator.
    Train {
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        gen: GenArgs,
    },
    /// Decode questions for a dataset with a trained generator.
    Generate {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// QG JSONL to generate for; gold questions, if present, are scored.
        #[arg(long = "in")]
        input: Option<PathBuf>,
        #[arg(long)]
        beam: Option<usize>,
        #[arg(long)]
        max_len: Option<usize>,
    },
    /// Score predictions against references.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        /// Also write report.json and per-example metrics.csv here.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Train with and without the guider across data fractions.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        gen: GenArgs,
        #[arg(long)]
        triplets: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "0.1,0.3,0.5,0.7,1.0")]
        fractions: Vec<f64>,
    },
    /// Finite-difference check of every differentiable operation.
    Gradcheck {
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write a deterministic synthetic dataset.
    SynthData {
        #[arg(long, default_value = "qg")]
        mode: String,
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Generator training flags.
#[derive(Args, Debug, Default)]
pub struct GenArgs {
    #[arg(long = "train")]
    train_path: Option<PathBuf>,
    #[arg(long)]
    dev: Option<PathBuf>,
    /// Guider checkpoint from pretrain-guider.
    #[arg(long)]
    guider: Option<PathBuf>,
    #[arg(long)]
    fraction: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    no_pretraining: bool,
    #[arg(long)]
    no_copy: bool,
}

impl GenArgs {
    fn overrides(&self) -> Vec<Override> {
        let mut o = Vec::new();
        path_override(&mut o, "paths.train", &self.train_path);
        path_override(&mut o, "paths.dev", &self.dev);
        path_override(&mut o, "paths.guider", &self.guider);
        value_override(&mut o, "train.fraction", &self.fraction);
        value_override(&mut o, "train.max_epochs", &self.epochs);
        value_override(&mut o, "train.lr", &self.lr);
        value_override(&mut o, "train.batch_size", &self.batch_size);
        if self.no_pretraining {
            o.push(("generator.use_pretraining".into(), json!(false)));
        }
        if self.no_copy {
            o.push(("generator.use_copy".into(), json!(false)));
        }
        o
    }
}

fn configure_threads() -> Result<(), CliError> {
    let Ok(raw) = std::env::var("WEGEN_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Usage(format!("WEGEN_THREADS must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Usage(format!("cannot configure {n} threads: {e}")))
}

fn run(cli: Cli) -> Result<(), CliError> {
    configure_threads()?;
    match cli.command {
        Command::BuildVocab { inputs, out, cap } => commands::build_vocab(&inputs, &out, cap),
        Command::PretrainGuider { run, triplets, epochs } => {
            let mut o = run.overrides();
            path_override(&mut o, "paths.triplets", &triplets);
            value_override(&mut o, "guider.epochs", &epochs);
            commands::pretrain_guider(&load(&run, &o)?)
        }
        Command::Train { run, gen } => {
            let mut o = run.overrides();
            o.extend(gen.overrides());
            commands::train(&load(&run, &o)?)
        }
        Command::Generate {
            run,
            checkpoint,
            input,
            beam,
            max_len,
        } => {
            let mut o = run.overrides();
            path_override(&mut o, "paths.checkpoint", &checkpoint);
            path_override(&mut o, "paths.test", &input);
            commands::generate(&load(&run, &o)?, beam, max_len)
        }
        Command::Evaluate {
            pred,
            reference,
            out_dir,
        } => commands::evaluate(&pred, &reference, out_dir.as_deref()),
        Command::Ablate {
            run,
            gen,
            triplets,
            fractions,
        } => {
            let mut o = run.overrides();
            o.extend(gen.overrides());
            path_override(&mut o, "paths.triplets", &triplets);
            commands::ablate(&load(&run, &o)?, &fractions)
        }
        Command::Gradcheck { trials, seed } => commands::gradcheck(trials, seed),
        Command::SynthData { mode, n, seed, out } => commands::synth_data(&mode, n, seed, &out),
    }
}

fn load(run: &RunArgs, overrides: &[Override]) -> Result<config::RunConfig, CliError> {
    let cfg = config::RunConfig::load(run.config.as_deref())?.apply(overrides)?;
    cfg.validate()?;
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("wegen: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
