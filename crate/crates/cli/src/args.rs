use std::path::PathBuf;

use clap::{ArgAction, Args, Parser, Subcommand, ValueEnum};
use dolfin::data::{DatasetKind, Split};
use dolfin::interpret::Format;
use dolfin::Architecture;

#[derive(Debug, Parser)]
#[command(
    name = "dolfin",
    version,
    about = "Interpretable text classification with bags of latent features",
    args_override_self = true
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write a checkpoint, metrics and a log.
    Train(TrainArgs),
    /// Report accuracy of a checkpoint on one split.
    Eval(EvalArgs),
    /// Render word and feature support for one text.
    Interpret(InterpretArgs),
    /// Compare analytic and finite-difference gradients of every operation.
    Gradcheck(GradcheckArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum DatasetArg {
    Trec,
    Sst2,
    Agnews,
}

impl From<DatasetArg> for DatasetKind {
    fn from(d: DatasetArg) -> Self {
        match d {
            DatasetArg::Trec => DatasetKind::Trec,
            DatasetArg::Sst2 => DatasetKind::Sst2,
            DatasetArg::Agnews => DatasetKind::Agnews,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModelArg {
    Cnn,
    Bilstm,
    DolfinConv,
    DolfinBilstm,
}

impl From<ModelArg> for Architecture {
    fn from(m: ModelArg) -> Self {
        match m {
            ModelArg::Cnn => Architecture::Cnn,
            ModelArg::Bilstm => Architecture::Bilstm,
            ModelArg::DolfinConv => Architecture::DolfinConv,
            ModelArg::DolfinBilstm => Architecture::DolfinBilstm,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Dev,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Dev => Split::Dev,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum FormatArg {
    Ansi,
    Html,
}

impl From<FormatArg> for Format {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Ansi => Format::Ansi,
            FormatArg::Html => Format::Html,
        }
    }
}

/// Dataset location, shared by the data-reading commands.
#[derive(Clone, Debug, Args)]
pub struct DataArgs {
    #[arg(long, value_enum)]
    pub dataset: DatasetArg,

    /// Root holding trec/, sst2/ and agnews/.
    #[arg(long, env = "DOLFIN_DATA_DIR")]
    pub data_dir: Option<PathBuf>,

    /// Use a deterministic subsample of this many training examples.
    #[arg(long)]
    pub subsample: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Read `key = value` defaults from this file; flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,

    #[command(flatten)]
    pub data: DataArgs,

    #[arg(long, value_enum, default_value = "dolfin-conv")]
    pub model: ModelArg,

    /// Latent feature count; defaults to 20, 10 or 100 by dataset.
    #[arg(long)]
    pub d: Option<usize>,

    /// One seed, or a comma-separated list for repeated runs.
    #[arg(long, value_delimiter = ',', action = ArgAction::Set, default_value = "1")]
    pub seed: Vec<u64>,

    /// Pretrained vectors (`word v1 .. vN` lines). Without it embeddings
    /// start random.
    #[arg(long)]
    pub glove: Option<PathBuf>,

    /// Checkpoint file; repeated runs insert `-seed<N>` before the extension.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,

    #[arg(long, default_value = "runs")]
    pub report_dir: PathBuf,

    #[arg(long, value_enum, default_value = "f32")]
    pub precision: Precision,

    #[arg(long, default_value_t = 0.001)]
    pub lr: f64,

    #[arg(long, default_value_t = 50)]
    pub batch_size: usize,

    #[arg(long, default_value_t = 10)]
    pub patience: usize,

    #[arg(long, default_value_t = 100)]
    pub max_epochs: usize,

    #[arg(long, default_value_t = 0.5)]
    pub dropout: f64,

    #[arg(long, default_value_t = 300)]
    pub embed_dim: usize,

    #[arg(long, value_delimiter = ',', action = ArgAction::Set, default_value = "3,4,5")]
    pub filter_sizes: Vec<usize>,

    #[arg(long, default_value_t = 100)]
    pub filters_per_size: usize,

    #[arg(long, default_value_t = 100)]
    pub lstm_hidden: usize,

    /// Width of the DoLFIn text vector.
    #[arg(long, default_value_t = 100)]
    pub text_dim: usize,

    /// Suppress the per-epoch log on stdout.
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,

    #[command(flatten)]
    pub data: DataArgs,

    #[arg(long)]
    pub checkpoint: PathBuf,

    /// Expected architecture; checked against the checkpoint.
    #[arg(long, value_enum)]
    pub model: Option<ModelArg>,

    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,

    /// Override the precision stored in the checkpoint.
    #[arg(long, value_enum)]
    pub precision: Option<Precision>,

    /// Print a JSON object instead of a sentence.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct InterpretArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,

    #[command(flatten)]
    pub data: DataArgs,

    #[arg(long)]
    pub checkpoint: PathBuf,

    /// Text to explain. Defaults to a dev example.
    #[arg(long, conflicts_with = "example")]
    pub text: Option<String>,

    /// Index of the dev example to explain.
    #[arg(long, default_value_t = 0)]
    pub example: usize,

    /// Firing threshold for the support estimate.
    #[arg(long, default_value_t = 0.5)]
    pub delta: f64,

    #[arg(long, value_enum, default_value = "html")]
    pub format: FormatArg,

    #[arg(long, default_value = "reports")]
    pub report_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,

    #[arg(long, value_delimiter = ',', action = ArgAction::Set, default_value = "1,2,3,4,5")]
    pub seeds: Vec<u64>,

    /// Restrict to these checks.
    #[arg(long, value_delimiter = ',', action = ArgAction::Set)]
    pub only: Vec<String>,

    /// Write the report as JSON here as well.
    #[arg(long)]
    pub report_dir: Option<PathBuf>,

    /// Corrupt the backward pass of one tape operation (negative control).
    #[arg(long, hide = true)]
    pub corrupt_op: Option<String>,
}
