//! Generation metrics, classification accuracy and the k-shot
//! multiple-choice harness.

mod fewshot;
mod text;

pub use fewshot::{choice_loglik, fewshot_eval, McMetric, McRecord, McTask};
pub use text::{accuracy, bleu, f1_bleu_rouge, rouge_n};

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: String,
    pub value: f64,
    pub sample_count: usize,
    /// Echo of the settings that produced the value.
    pub config: serde_json::Value,
}
