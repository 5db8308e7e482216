use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "alm", version, about = "Arabic subword tokenization, causal LM training and evaluation")]
pub struct Cli {
    /// JSON object supplying values for any flag of the subcommand; flags
    /// given on the command line win.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Normalize text line by line.
    Normalize(NormalizeArgs),
    /// Train a BPE tokenizer on a corpus file or directory.
    TokTrain(TokTrainArgs),
    /// Encode each input line to space-separated token ids.
    Encode(CodecArgs),
    /// Decode lines of space-separated token ids.
    Decode(CodecArgs),
    /// Causal-LM pretraining (or a parameter count with --dry-run).
    Pretrain(PretrainArgs),
    /// Fine-tune on prompt/completion pairs.
    FinetuneLm(FinetuneLmArgs),
    /// Fine-tune a binary classifier head and the network under it.
    FinetuneCls(FinetuneClsArgs),
    /// Continue a prompt.
    Generate(GenerateArgs),
    /// BLEU, ROUGE and their F1 over hypothesis/reference pairs.
    EvalGen(EvalGenArgs),
    /// Accuracy of a classifier checkpoint.
    EvalCls(EvalClsArgs),
    /// k-shot multiple-choice evaluation.
    EvalFewshot(EvalFewshotArgs),
    /// Render a loss curve or a results file as a table.
    Report(ReportArgs),
    /// Print a checkpoint header.
    InspectCkpt(InspectArgs),
}

#[derive(Debug, Args, Default)]
pub struct NormalizerArgs {
    #[arg(long, value_name = "BOOL")]
    pub canonicalize: Option<bool>,
    #[arg(long, value_name = "BOOL")]
    pub preserve_diacritics: Option<bool>,
    #[arg(long, value_name = "BOOL")]
    pub remove_tatweel: Option<bool>,
    #[arg(long, value_name = "BOOL")]
    pub collapse_whitespace: Option<bool>,
    #[arg(long, value_name = "BOOL")]
    pub lowercase_latin: Option<bool>,
    /// Map hamza-carrying alef variants to bare alef.
    #[arg(long, value_name = "BOOL")]
    pub fold_alef: Option<bool>,
}

#[derive(Debug, Args)]
pub struct NormalizeArgs {
    /// Defaults to stdin.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Defaults to stdout.
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[command(flatten)]
    pub normalizer: NormalizerArgs,
}

#[derive(Debug, Args)]
pub struct TokTrainArgs {
    /// Text or `.jsonl` file, or a directory of them.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// A number or one of 32k, 50k, 64k, 86k.
    #[arg(long, default_value = "64k")]
    pub vocab_size: String,
    /// Where to write the tokenizer JSON.
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[command(flatten)]
    pub normalizer: NormalizerArgs,
}

#[derive(Debug, Args)]
pub struct CodecArgs {
    #[arg(long)]
    pub tokenizer: Option<PathBuf>,
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, default_value_t = 8)]
    pub batch_size: usize,
    /// Tokens per pretraining sequence.
    #[arg(long, default_value_t = 64)]
    pub seq_len: usize,
    /// Optimizer steps; 0 trains for --epochs passes.
    #[arg(long, default_value_t = 0)]
    pub max_steps: u64,
    #[arg(long, default_value_t = 1)]
    pub epochs: u64,
    #[arg(long, default_value_t = 4e-5)]
    pub lr: f64,
    /// Defaults to a tenth of --lr.
    #[arg(long)]
    pub lr_final: Option<f64>,
    /// Defaults to 1% of the steps.
    #[arg(long)]
    pub warmup_steps: Option<u64>,
    /// Global gradient-norm clip.
    #[arg(long)]
    pub grad_clip: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 100)]
    pub log_every: u64,
    /// Write the per-step loss curve as JSONL.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    /// 0.1B or 0.3B.
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub d_ff: Option<usize>,
    /// Defaults to --seq-len.
    #[arg(long)]
    pub ctx_len: Option<usize>,
    /// Only used without --tokenizer.
    #[arg(long)]
    pub vocab_size: Option<usize>,
    /// Probability for embedding, attention and residual dropout.
    #[arg(long, default_value_t = 0.0)]
    pub dropout: f64,
    /// Print the parameter count and exit without allocating weights.
    #[arg(long)]
    pub dry_run: bool,
    #[arg(long)]
    pub tokenizer: Option<PathBuf>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Continue from this checkpoint instead of a fresh init.
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[command(flatten)]
    pub train: TrainArgs,
}

#[derive(Debug, Args)]
pub struct FinetuneLmArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub tokenizer: Option<PathBuf>,
    /// JSONL of {"prompt", "completion"}.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[command(flatten)]
    pub train: TrainArgs,
}

#[derive(Debug, Args)]
pub struct FinetuneClsArgs {
    /// An LM checkpoint (a head is added) or a classifier checkpoint.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub tokenizer: Option<PathBuf>,
    /// JSONL of {"text", "label"}.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Train on this share of --data and report held-out accuracy on the rest.
    #[arg(long)]
    pub train_fraction: Option<f64>,
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[command(flatten)]
    pub train: TrainArgs,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SamplingKind {
    Greedy,
    Temperature,
    TopK,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub tokenizer: Option<PathBuf>,
    #[arg(long)]
    pub prompt: Option<String>,
    #[arg(long, default_value_t = 50)]
    pub max_new: usize,
    #[arg(long, value_enum, default_value_t = SamplingKind::Greedy)]
    pub sampling: SamplingKind,
    #[arg(long, default_value_t = 1.0)]
    pub temperature: f64,
    #[arg(long, default_value_t = 40)]
    pub top_k: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Append the end-of-sequence separator after the prompt, as in
    /// prompt/completion fine-tuning.
    #[arg(long)]
    pub separator: bool,
}

#[derive(Debug, Args)]
pub struct EvalGenArgs {
    /// JSONL of {"hypothesis", "reference"}.
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    pub max_n: usize,
    #[arg(long, default_value_t = 1)]
    pub rouge_n: usize,
    /// Append the reports to this JSONL file.
    #[arg(long)]
    pub results: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalClsArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub tokenizer: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Write one prediction per record as JSONL.
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    #[arg(long)]
    pub results: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalFewshotArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub tokenizer: Option<PathBuf>,
    /// JSONL of {"context", "choices", "true"}.
    #[arg(long)]
    pub task: Option<PathBuf>,
    /// Exemplar records for the prompt; needed when --k > 0.
    #[arg(long)]
    pub pool: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub k: usize,
    /// acc, acc_norm or mc2.
    #[arg(long, default_value = "acc")]
    pub metric: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub results: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Loss curve JSONL written by a training command.
    #[arg(long)]
    pub curve: Option<PathBuf>,
    /// Results JSONL written by the eval commands.
    #[arg(long)]
    pub results: Option<PathBuf>,
    /// Show every n-th curve row (the last row is always shown).
    #[arg(long, default_value_t = 1)]
    pub every: u64,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}
