//! Arabic-aware subword tokenization, a decoder-only transformer, causal LM
//! training and fine-tuning, and text-generation and few-shot evaluation.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod eval;
pub mod io;
pub mod model;
pub mod normalize;
pub mod rng;
pub mod tensor;
pub mod tokenizer;
pub mod train;

pub use error::{Error, Result};
pub use normalize::{normalize, pretokenize, NormalizedText, NormalizerConfig};
pub use tensor::{Tape, Tensor, Var};
pub use tokenizer::{train_bpe, Specials, TokenizerModel};
pub use eval::{MetricReport, McMetric, McTask};
pub use io::{Checkpoint, CheckpointKind};
pub use model::{CausalLm, GptModel, Mode, ModelConfig};
pub use train::{ClassifierModel, TrainConfig, TrainingReport};
