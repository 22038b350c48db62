//! `alt`: data preparation, the three training stages, decoding, scoring and
//! ablations from one binary.

mod commands;
mod config;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "alt", version, about = "Lyrics transcription toolkit")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Global {
    /// Output directory for checkpoints, reports and run metadata.
    #[arg(long, global = true, env = "ALT_OUT_DIR", default_value = "alt-out")]
    pub out: PathBuf,
    /// Seed for every stochastic component; overrides seeds in the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Threads for data-parallel sections; results do not depend on it.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// TOML config file; see the README for the key set of each subcommand.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Config override `key.path=value`, applied after the file. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
    /// Token inventory file, one symbol per line. Defaults to the built-in
    /// 31-token character inventory.
    #[arg(long, global = true)]
    pub inventory: Option<PathBuf>,
    /// Log record format on stderr.
    #[arg(long, global = true, value_enum, default_value_t = LogFormat::Json)]
    pub log_format: LogFormat,
    /// More log detail; repeat for trace level.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    /// Only warnings and errors.
    #[arg(short, long, global = true)]
    pub quiet: bool,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum LogFormat {
    Json,
    Text,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Normalize transcript lines from stdin to stdout.
    Normalize(commands::NormalizeArgs),
    /// Build a manifest from per-recording annotation files.
    Segment(commands::SegmentArgs),
    /// Print utterance count and durations of manifests.
    Stats(commands::StatsArgs),
    /// Random subset of a manifest with a target total duration.
    Subset(commands::SubsetArgs),
    /// Drop training records whose recording appears in a test manifest.
    Dedup(commands::DedupArgs),
    /// Generate a synthetic corpus with features, manifest and transcripts.
    Synth(commands::SynthArgs),
    /// Stage I: self-supervised pretraining of the encoder.
    Pretrain(commands::PretrainArgs),
    /// Stage II: CTC finetuning on speech.
    Finetune(commands::TrainArgs),
    /// Stage III: hybrid CTC/attention transfer to singing.
    Transfer(commands::TrainArgs),
    /// Train the character language model.
    LmTrain(commands::LmTrainArgs),
    /// Beam-search decoding of a manifest.
    Decode(commands::DecodeArgs),
    /// Word error rate of hypothesis against reference transcripts.
    Eval(commands::EvalArgs),
    /// Toy-scale ablations on synthetic data.
    Ablate(commands::AblateArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Normalize(_) => "normalize",
            Command::Segment(_) => "segment",
            Command::Stats(_) => "stats",
            Command::Subset(_) => "subset",
            Command::Dedup(_) => "dedup",
            Command::Synth(_) => "synth",
            Command::Pretrain(_) => "pretrain",
            Command::Finetune(_) => "finetune",
            Command::Transfer(_) => "transfer",
            Command::LmTrain(_) => "lm-train",
            Command::Decode(_) => "decode",
            Command::Eval(_) => "eval",
            Command::Ablate(_) => "ablate",
        }
    }
}

fn init_logging(g: &Global) {
    let level = match (g.quiet, g.verbose) {
        (true, _) => tracing::Level::WARN,
        (false, 0) => tracing::Level::INFO,
        (false, 1) => tracing::Level::DEBUG,
        _ => tracing::Level::TRACE,
    };
    let builder = tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_max_level(level)
        .with_target(false);
    match g.log_format {
        LogFormat::Json => builder.json().init(),
        LogFormat::Text => builder.init(),
    }
}

fn error_record(kind: &str, message: &str) -> String {
    serde_json::json!({ "error": { "kind": kind, "message": message } }).to_string()
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprintln!("{}", error_record("usage", e.to_string().trim()));
            return ExitCode::from(2);
        }
    };
    init_logging(&cli.global);
    match commands::dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_record(e.kind(), &e.to_string()));
            ExitCode::FAILURE
        }
    }
}
