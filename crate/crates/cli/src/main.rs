//! Command-line entry point.
//!
//! Exit codes: 0 on success, 1 on usage errors, 2 on runtime errors.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "u2moe", version, about = "Sparse mixture-of-experts U2++ speech recognition toolkit")]
pub struct Cli {
    /// Model configuration file (`key = value` lines).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Built-in model configuration, used when --config is absent.
    #[arg(long, global = true, value_parser = ["dense-225m", "moe-1b", "dense-1b", "toy-dense", "toy-moe"])]
    pub preset: Option<String>,
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads for commands that process utterances independently.
    #[arg(long, global = true, default_value_t = 1)]
    pub workers: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one stage, or both stages with --two-stage.
    Train(TrainArgs),
    /// Offline decoding of a manifest.
    Decode(DecodeArgs),
    /// Chunk-by-chunk streaming decoding of a manifest.
    StreamDecode(StreamArgs),
    /// WER report from reference and hypothesis files.
    Score(ScoreArgs),
    /// Single-worker real-time-factor benchmark.
    BenchRtf(BenchArgs),
    /// Closed-form parameter count of a configuration.
    CountParams,
    /// Estimate global CMVN statistics over a manifest.
    Cmvn(CmvnArgs),
    /// Generate a synthetic token corpus with its codebook.
    SynthCorpus(SynthArgs),
}

#[derive(Debug, Clone, Args)]
pub struct DataArgs {
    /// Manifest: `utt_id<TAB>wav-path-or-SYNTH:seed<TAB>token ids`.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Codebook container for `SYNTH:` entries.
    #[arg(long)]
    pub codebook: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Held-out manifest evaluated after each stage.
    #[arg(long)]
    pub valid: Option<PathBuf>,
    /// CMVN container; estimated from the training set when absent.
    #[arg(long)]
    pub cmvn: Option<PathBuf>,
    /// Output directory for checkpoints.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u8).range(1..=2))]
    pub stage: u8,
    /// Run stage 1 then stage 2 (from the stage-1 checkpoint).
    #[arg(long)]
    pub two_stage: bool,
    #[arg(long, default_value_t = 1000)]
    pub steps: usize,
    /// Stage-2 steps with --two-stage (defaults to --steps).
    #[arg(long)]
    pub stage2_steps: Option<usize>,
    #[arg(long, default_value_t = 8)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 500)]
    pub warmup: usize,
    /// Stage-1 checkpoint initialising stage 2.
    #[arg(long)]
    pub checkpoint_in: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub checkpoint_every: usize,
    #[arg(long, default_value_t = 10)]
    pub log_every: usize,
    /// Print the expert load histogram every this many steps (MoE only).
    #[arg(long, default_value_t = 50)]
    pub expert_log_every: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Greedy,
    Rescore,
}

#[derive(Debug, Clone, Args)]
pub struct SearchArgs {
    #[arg(long, value_enum, default_value_t = Mode::Rescore)]
    pub mode: Mode,
    #[arg(long, default_value_t = 10)]
    pub beam: usize,
    #[arg(long, default_value_t = 0.5)]
    pub ctc_weight: f64,
    #[arg(long, default_value_t = 0.3)]
    pub reverse_weight: f64,
}

#[derive(Debug, Args)]
pub struct DecodeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub search: SearchArgs,
    /// Subsampled chunk size; full context when absent.
    #[arg(long)]
    pub chunk: Option<usize>,
    /// Write `utt_id<TAB>tokens` lines here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct StreamArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub search: SearchArgs,
    #[arg(long, default_value_t = 8)]
    pub chunk: usize,
    /// Feature frames per push.
    #[arg(long, default_value_t = 10)]
    pub push_frames: usize,
    /// Print partial transcripts to stderr as they change.
    #[arg(long)]
    pub partials: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    /// Reference file (decode-output or manifest format); repeat per set.
    #[arg(long = "ref", required = true)]
    pub refs: Vec<PathBuf>,
    /// Hypothesis file in decode-output format; one per --ref.
    #[arg(long = "hyp", required = true)]
    pub hyps: Vec<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Checkpoint to benchmark; a seeded random model of the configuration
    /// is used when absent.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub search: SearchArgs,
    #[arg(long)]
    pub chunk: Option<usize>,
    #[arg(long, default_value_t = 3)]
    pub runs: usize,
    #[arg(long, default_value = "model")]
    pub tag: String,
}

#[derive(Debug, Args)]
pub struct CmvnArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 2000)]
    pub train: usize,
    #[arg(long, default_value_t = 200)]
    pub valid: usize,
    #[arg(long, default_value_t = 16)]
    pub v_toy: usize,
    #[arg(long, default_value_t = 16)]
    pub frames_per_token: usize,
    #[arg(long, default_value_t = 3)]
    pub min_len: usize,
    #[arg(long, default_value_t = 6)]
    pub max_len: usize,
    #[arg(long, default_value_t = 80)]
    pub dim: usize,
    #[arg(long, default_value_t = 1.0)]
    pub noise: f32,
}

/// A failure attributed to how the command was invoked.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is::<UsageError>() => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
