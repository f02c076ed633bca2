use std::path::PathBuf;

use bioner_core::Strategy;
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "bioner", version, about = "Generative biomedical NER pipeline")]
pub struct Cli {
    /// TOML file supplying defaults for any flag.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check a corpus against its schemas.
    Validate(ValidateArgs),
    /// Render prompts and gold outputs into a fine-tune file.
    BuildPrompts(BuildPromptsArgs),
    /// Run a generation backend over every sentence of a corpus.
    Infer(InferArgs),
    /// Turn raw model outputs into predicted entities.
    Decode(DecodeArgs),
    /// Score predictions against gold.
    Evaluate(EvaluateArgs),
    /// Generate contrastive samples for the entity selector.
    GenSelectorData(GenSelectorArgs),
    /// Filter predictions with a selector backend.
    Select(SelectArgs),
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// Directory of schema JSON files.
    #[arg(long)]
    pub schemas: PathBuf,
}

#[derive(Debug, Args)]
pub struct TemplateArgs {
    #[arg(long, default_value_t = Strategy::Symbolic)]
    pub strategy: Strategy,
    /// Prompt template; the built-in one for the strategy when omitted.
    #[arg(long)]
    pub template: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BuildPromptsArgs {
    /// Corpus file; repeat for several datasets.
    #[arg(long, required = true)]
    pub corpus: Vec<PathBuf>,
    #[arg(long)]
    pub schemas: PathBuf,
    #[command(flatten)]
    pub template: TemplateArgs,
    /// Interleave languages in a seeded order.
    #[arg(long)]
    pub mix: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, short)]
    pub output: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum GenBackend {
    EchoGold,
    Perturb,
    Wire,
}

#[derive(Debug, Args)]
pub struct WireArgs {
    /// Base URL of a chat-completions server.
    #[arg(long)]
    pub endpoint: Option<String>,
    #[arg(long, default_value = "default")]
    pub model: String,
    /// Per-request timeout in seconds.
    #[arg(long, default_value_t = 120)]
    pub timeout: u64,
    /// Environment variable holding the bearer token.
    #[arg(long, default_value = "LLM_API_KEY")]
    pub api_key_env: String,
}

#[derive(Debug, Args)]
pub struct PoolArgs {
    #[arg(long, default_value_t = 4, value_parser = clap::value_parser!(u64).range(1..))]
    pub parallelism: u64,
    #[arg(long, default_value_t = 3)]
    pub retries: u32,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub schemas: PathBuf,
    #[command(flatten)]
    pub template: TemplateArgs,
    #[arg(long, value_enum, default_value_t = GenBackend::EchoGold)]
    pub backend: GenBackend,
    /// Character noise rate for the perturb backend.
    #[arg(long, default_value_t = 0.02)]
    pub noise_rate: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.0)]
    pub temperature: f64,
    #[arg(long, default_value_t = 4096)]
    pub max_output_chars: usize,
    #[command(flatten)]
    pub wire: WireArgs,
    #[command(flatten)]
    pub pool: PoolArgs,
    #[arg(long, short)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct DecodeArgs {
    /// Raw outputs written by `infer`.
    #[arg(long)]
    pub raw: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub schemas: PathBuf,
    /// Overrides the strategy recorded with each output.
    #[arg(long)]
    pub strategy: Option<Strategy>,
    #[arg(long, default_value_t = 0.5)]
    pub max_edit_ratio: f64,
    /// Per-sentence decoder diagnostics.
    #[arg(long)]
    pub diagnostics: Option<PathBuf>,
    #[arg(long, short)]
    pub output: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Measure {
    MaxOffset,
    LengthDiff,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub predictions: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    /// Machine-readable report file.
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Measure::MaxOffset)]
    pub measure: Measure,
}

#[derive(Debug, Args)]
pub struct GenSelectorArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub schemas: PathBuf,
    #[arg(long, default_value_t = 10_000)]
    pub total: usize,
    #[arg(long, default_value_t = 0.5)]
    pub neg_ratio: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, short)]
    pub output: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SelectBackend {
    GoldOracle,
    Constant,
    Wire,
}

#[derive(Debug, Args)]
pub struct SelectArgs {
    #[arg(long)]
    pub predictions: PathBuf,
    /// Gold corpus, needed by the gold-oracle backend.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = SelectBackend::GoldOracle)]
    pub backend: SelectBackend,
    /// Score returned by the constant backend.
    #[arg(long, default_value_t = 1.0)]
    pub score: f64,
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
    #[command(flatten)]
    pub wire: WireArgs,
    #[command(flatten)]
    pub pool: PoolArgs,
    #[arg(long, short)]
    pub output: PathBuf,
    /// Per-candidate score audit.
    #[arg(long)]
    pub audit: Option<PathBuf>,
}
