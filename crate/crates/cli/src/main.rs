//! `drda`: every stage of the augmentation pipeline behind one binary.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
}

impl CliError {
    pub fn data(e: impl std::fmt::Display) -> Self {
        CliError::Data(e.to_string())
    }
}

#[derive(Parser, Debug)]
#[command(name = "drda", version, about = "Deterministic reversible data augmentation for machine translation")]
struct Cli {
    /// TOML file of default values, keyed by flag name (dashes become underscores).
    /// Flags override it; it overrides built-in defaults.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Filter a parallel corpus by length and length ratio. Writes PREFIX.src and PREFIX.tgt.
    Clean(CleanArgs),
    /// Add seeded character noise (deletion, insertion, substitution) to a corpus.
    Perturb(PerturbArgs),
    /// Learn BPE merges. Writes the model to MODEL and its full vocabulary to MODEL.vocab.
    TrainBpe(TrainBpeArgs),
    /// Segment a corpus at one vocabulary size; tokens are space-joined per line.
    Segment(SegmentArgs),
    /// Segment a corpus at the prime size and every augmented size. Writes PREFIX.SIZE per size.
    SegmentMulti(SegmentMultiArgs),
    /// Build the multi-granularity training set as JSON lines.
    Augment(AugmentArgs),
    /// Train the encoder-decoder on an augmented dataset.
    Train(TrainArgs),
    /// Translate a file with a trained model.
    Translate(TranslateArgs),
    /// Compare analytic and finite-difference gradients on a seeded toy model.
    CheckGrad(CheckGradArgs),
    /// Segmentation and embedding analyses with CSV output.
    #[command(subcommand)]
    Analyze(AnalyzeCommand),
    /// Write a model's embedding rows in the `V d` / `token v1 .. vd` text format.
    ExportEmb(ExportEmbArgs),
}

#[derive(Args, Debug)]
struct CleanArgs {
    /// Source side, one sentence per line.
    #[arg(long)]
    src: Option<PathBuf>,
    /// Target side, line-aligned with --src.
    #[arg(long)]
    tgt: Option<PathBuf>,
    /// Minimum whitespace-token count on each side [default: 1].
    #[arg(long)]
    min: Option<usize>,
    /// Maximum whitespace-token count on each side [default: 175].
    #[arg(long)]
    max: Option<usize>,
    /// Maximum length ratio between the sides [default: 1.5].
    #[arg(long)]
    ratio: Option<f64>,
    /// Lowercase both sides before filtering.
    #[arg(long)]
    lowercase: bool,
    /// Output prefix.
    #[arg(long)]
    out_prefix: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PerturbArgs {
    /// Input corpus.
    #[arg(long = "in")]
    input: Option<PathBuf>,
    /// Per-character perturbation probability [default: 0.01].
    #[arg(long)]
    p: Option<f64>,
    /// Base seed; line i uses a seed derived from (seed, i) [default: DRDA_SEED or 0].
    #[arg(long)]
    seed: Option<u64>,
    /// Output corpus.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainBpeArgs {
    /// Training corpora, comma-separated or repeated.
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    input: Vec<PathBuf>,
    /// Number of merges to learn [default: 8000].
    #[arg(long)]
    merges: Option<usize>,
    /// Pool all inputs into one model (default).
    #[arg(long, overrides_with = "no_joint")]
    joint: bool,
    /// Train one model per input, written to MODEL.0, MODEL.1, ...
    #[arg(long)]
    no_joint: bool,
    /// Pairs seen fewer times are never merged [default: 1].
    #[arg(long)]
    min_pair_count: Option<u64>,
    /// Output model file.
    #[arg(long)]
    model: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SegmentArgs {
    #[arg(long)]
    model: Option<PathBuf>,
    /// Vocabulary size; clamped to the model's largest.
    #[arg(long)]
    size: Option<usize>,
    #[arg(long = "in")]
    input: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// BPE-dropout probability; 0 gives the deterministic segmentation [default: 0].
    #[arg(long)]
    dropout: Option<f64>,
    /// Seed for --dropout [default: DRDA_SEED or 0].
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct SegmentMultiArgs {
    #[arg(long)]
    model: Option<PathBuf>,
    /// Prime vocabulary size.
    #[arg(long)]
    prime: Option<usize>,
    /// Augmented vocabulary sizes, comma-separated.
    #[arg(long, value_delimiter = ',')]
    augs: Option<Vec<usize>>,
    #[arg(long = "in")]
    input: Option<PathBuf>,
    #[arg(long)]
    out_prefix: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AugmentArgs {
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    prime: Option<usize>,
    /// Augmented vocabulary sizes, comma-separated (may be empty).
    #[arg(long, value_delimiter = ',')]
    augs: Option<Vec<usize>>,
    #[arg(long)]
    src: Option<PathBuf>,
    #[arg(long)]
    tgt: Option<PathBuf>,
    /// Output JSON-lines file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Dataset written by `drda augment`.
    #[arg(long)]
    data: Option<PathBuf>,
    /// BPE model the dataset was segmented with.
    #[arg(long)]
    bpe: Option<PathBuf>,
    /// Output directory: model.json, config.toml, epochs.csv, steps.csv.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Weight of the agreement term [default: 5; 0 when the data has no augmented views].
    #[arg(long)]
    alpha: Option<f64>,
    /// Label smoothing [default: 0.1].
    #[arg(long)]
    smoothing: Option<f64>,
    /// How the two KL directions combine [default: mean].
    #[arg(long, value_parser = ["mean", "sum"])]
    kl_mode: Option<String>,
    /// Ignore augmented views and train on the prime view only.
    #[arg(long)]
    no_augs: bool,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Peak learning rate [default: 0.002].
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    warmup: Option<usize>,
    /// Global gradient-norm clip, 0 disables [default: 1].
    #[arg(long)]
    clip_norm: Option<f64>,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    n_heads: Option<usize>,
    /// Layers per stack [default: 2].
    #[arg(long)]
    n_layers: Option<usize>,
    #[arg(long)]
    ffn_dim: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    /// [default: DRDA_SEED or 1]
    #[arg(long)]
    seed: Option<u64>,
    /// Floating-point type used for training [default: f32].
    #[arg(long, value_enum)]
    precision: Option<Precision>,
}

#[derive(Clone, Copy, Debug, ValueEnum, PartialEq, Eq)]
pub enum Select {
    Dynamic,
    Prime,
    Oracle,
}

#[derive(Args, Debug)]
struct TranslateArgs {
    /// Directory written by `drda train`.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    bpe: Option<PathBuf>,
    /// Granularities, prime first, comma-separated.
    #[arg(long, value_delimiter = ',')]
    sizes: Option<Vec<usize>>,
    /// Granularity selection rule [default: dynamic].
    #[arg(long, value_enum)]
    select: Option<Select>,
    #[arg(long = "in")]
    input: Option<PathBuf>,
    /// Output translations, one per line.
    #[arg(long)]
    out: Option<PathBuf>,
    /// References (required by --select oracle); adds BLEU to the report.
    #[arg(long = "ref")]
    reference: Option<PathBuf>,
    /// Per-sentence CSV report: index,granularity,score,bleu.
    #[arg(long)]
    report: Option<PathBuf>,
    /// [default: 5]
    #[arg(long)]
    beam: Option<usize>,
    /// Maximum output tokens [default: 100].
    #[arg(long)]
    max_len: Option<usize>,
}

#[derive(Args, Debug)]
struct CheckGradArgs {
    /// [default: DRDA_SEED or 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Finite-difference step [default: 1e-5].
    #[arg(long)]
    h: Option<f64>,
    /// Coordinates checked per parameter matrix [default: 8].
    #[arg(long)]
    per_param: Option<usize>,
    /// Failure threshold on the maximum relative error [default: 1e-4].
    #[arg(long)]
    tolerance: Option<f64>,
}

#[derive(Subcommand, Debug)]
enum AnalyzeCommand {
    /// Frequency drop of small-vocabulary tokens at a larger size.
    /// CSV: token,id,freq_small,freq_large,drop_rate
    FreqDrop(FreqDropArgs),
    /// Nearest neighbours of a token by cosine. CSV: rank,token,similarity
    Neighbors(NeighborsArgs),
    /// Subword semantic composition. CSV: compound,a,b,similarity
    Ssc(SscArgs),
}

#[derive(Args, Debug)]
struct FreqDropArgs {
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    small: Option<usize>,
    #[arg(long)]
    large: Option<usize>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Skip tokens seen fewer times at the small size [default: 1].
    #[arg(long)]
    min_freq: Option<usize>,
    /// CSV output; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct NeighborsArgs {
    /// Embedding file from `drda export-emb`.
    #[arg(long)]
    emb: Option<PathBuf>,
    #[arg(long)]
    token: Option<String>,
    /// [default: 10]
    #[arg(long)]
    n: Option<usize>,
    /// CSV output; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SscArgs {
    #[arg(long)]
    emb: Option<PathBuf>,
    /// Vocabulary TSV restricting the tokens considered.
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Score one split only.
    #[arg(long, num_args = 2, value_names = ["A", "B"])]
    pair: Option<Vec<String>>,
    /// CSV output; stdout when omitted. The last row holds the average.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ExportEmbArgs {
    /// Directory written by `drda train`.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    bpe: Option<PathBuf>,
    /// Rows to export [default: the model's prime size].
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = cli.config.as_deref();
    match cli.command {
        Command::Clean(a) => commands::clean(cfg, a),
        Command::Perturb(a) => commands::perturb(cfg, a),
        Command::TrainBpe(a) => commands::train_bpe(cfg, a),
        Command::Segment(a) => commands::segment(cfg, a),
        Command::SegmentMulti(a) => commands::segment_multi_cmd(cfg, a),
        Command::Augment(a) => commands::augment(cfg, a),
        Command::Train(a) => commands::train(cfg, a),
        Command::Translate(a) => commands::translate(cfg, a),
        Command::CheckGrad(a) => commands::check_grad(cfg, a),
        Command::Analyze(AnalyzeCommand::FreqDrop(a)) => commands::freq_drop(cfg, a),
        Command::Analyze(AnalyzeCommand::Neighbors(a)) => commands::neighbors(cfg, a),
        Command::Analyze(AnalyzeCommand::Ssc(a)) => commands::ssc(cfg, a),
        Command::ExportEmb(a) => commands::export_emb(cfg, a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Data(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
