use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};

use mrn::data::Split;
use mrn::evaluation::Protocol;
use mrn::model::Variant;
use mrn::training::DropoutMode;

#[derive(Debug, Parser)]
#[command(
    name = "mrn",
    version,
    about = "Multimodal residual networks on a synthetic VQA task"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset (binary file plus a JSON-lines export).
    Gen(GenArgs),
    /// Train one network and write its checkpoint and metrics log.
    Train(TrainCmd),
    /// Score a checkpoint on one split under one protocol.
    Eval(EvalCmd),
    /// Train the variant and depth sweep and write a comparison table.
    Ablate(AblateCmd),
    /// Render per-block attention heatmaps for one example.
    Viz(VizCmd),
    /// Run every finite-difference gradient check.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    /// Generator seed.
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Number of examples.
    #[arg(long, default_value_t = 10_000)]
    pub examples: usize,
    /// Output directory.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// Learning-block variant.
    #[arg(long, default_value = "b", value_parser = parse_variant)]
    pub variant: Variant,
    /// Number of learning blocks L.
    #[arg(long, default_value_t = 3)]
    pub blocks: usize,
    /// Joint embedding size.
    #[arg(long, default_value_t = mrn::net::DEFAULT_JOINT_DIM)]
    pub dim: usize,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Seed for initialisation, data order, dropout masks and pretraining.
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Training iterations.
    #[arg(long, default_value_t = 5000)]
    pub iters: usize,
    /// Mini-batch size.
    #[arg(long, default_value_t = 32)]
    pub batch: usize,
    /// RMSProp learning rate.
    #[arg(long, default_value_t = 3e-4)]
    pub lr: f64,
    /// Dropout rate in [0, 1).
    #[arg(long, default_value_t = 0.0)]
    pub dropout: f64,
    /// Dropout masks for the question encoder.
    #[arg(long, default_value = "standard", value_parser = parse_dropout_mode)]
    pub dropout_mode: DropoutMode,
    /// Global gradient-norm clip [default: off].
    #[arg(long)]
    pub clip: Option<f64>,
    /// Keep the visual encoder fixed after pretraining.
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    pub freeze_cnn: bool,
    /// Visual-encoder pretraining iterations (only with a frozen CNN).
    #[arg(long, default_value_t = 3000)]
    pub pretrain_iters: usize,
    /// Iterations between validation rows in the metrics log.
    #[arg(long, default_value_t = 500)]
    pub eval_interval: usize,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Evaluation protocol: open-ended or multiple-choice.
    #[arg(long, default_value = "oe", value_parser = parse_protocol)]
    pub protocol: Protocol,
    /// Boost Other-type answers found in the caption.
    #[arg(long, default_value_t = false, num_args = 0..=1, default_missing_value = "true", action = clap::ArgAction::Set)]
    pub postprocess: bool,
    /// Split to score.
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Versioned TOML config; flags given on the command line win [default: none].
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainCmd {
    /// Dataset file written by `gen`.
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub train: TrainArgs,
    #[command(flatten)]
    pub eval: EvalArgs,
}

#[derive(Debug, Args)]
pub struct EvalCmd {
    /// Dataset file written by `gen`.
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint written by `train`.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub eval: EvalArgs,
}

#[derive(Debug, Args)]
pub struct AblateCmd {
    /// Dataset file written by `gen`.
    #[arg(long)]
    pub data: PathBuf,
    /// Comma-separated subset of sweep labels such as b-L3,mn-L3 [default: all].
    #[arg(long, value_delimiter = ',')]
    pub only: Vec<String>,
    /// Joint embedding size of the shortcut models; the shortcut-free model
    /// is sized to the same parameter budget.
    #[arg(long, default_value_t = mrn::net::DEFAULT_JOINT_DIM)]
    pub dim: usize,
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub train: TrainArgs,
}

#[derive(Debug, Args)]
pub struct VizCmd {
    /// Dataset file written by `gen`.
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint written by `train`.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset index of the example [default: first test example].
    #[arg(long)]
    pub example: Option<usize>,
    /// Integer upscaling of the written images.
    #[arg(long, default_value_t = 4)]
    pub scale: usize,
    /// Output directory.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Seed for the random test networks and sampled entries.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Maximum relative error.
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
    /// Entries checked per tensor.
    #[arg(long, default_value_t = 1024)]
    pub max_entries: usize,
    /// Corrupt the backward rule of one operation (negative control).
    #[arg(long, value_parser = parse_op)]
    pub inject_fault: Option<mrn::autodiff::OpKind>,
    /// Also write the report to DIR/gradcheck.txt.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

impl From<Split> for SplitArg {
    fn from(s: Split) -> Self {
        match s {
            Split::Train => SplitArg::Train,
            Split::Val => SplitArg::Val,
            Split::Test => SplitArg::Test,
        }
    }
}

impl fmt::Display for SplitArg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.to_possible_value().expect("no skipped values").get_name())
    }
}

impl FromStr for SplitArg {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        <SplitArg as ValueEnum>::from_str(s, true).map_err(|_| format!("unknown split {s:?}"))
    }
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    s.parse().map_err(|e: mrn::Error| e.to_string())
}

fn parse_dropout_mode(s: &str) -> Result<DropoutMode, String> {
    s.parse().map_err(|e: mrn::Error| e.to_string())
}

fn parse_protocol(s: &str) -> Result<Protocol, String> {
    s.parse().map_err(|e: mrn::Error| e.to_string())
}

fn parse_op(s: &str) -> Result<mrn::autodiff::OpKind, String> {
    mrn::autodiff::OpKind::parse(s).ok_or_else(|| {
        let names: Vec<String> = mrn::autodiff::OpKind::ALL.iter().map(|k| k.name()).collect();
        format!("unknown op {s:?}; one of {}", names.join(", "))
    })
}
