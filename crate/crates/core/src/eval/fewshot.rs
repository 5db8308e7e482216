use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::MetricReport;
use crate::error::{Error, Result};
use crate::model::CausalLm;
use crate::rng::DetRng;
use crate::tokenizer::{TokenizerModel, BOS_ID};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct McRecord {
    pub context: String,
    pub choices: Vec<String>,
    #[serde(rename = "true")]
    pub true_set: Vec<usize>,
}

impl McRecord {
    pub fn validate(&self) -> Result<()> {
        if self.choices.len() < 2 {
            return Err(Error::Validation("record needs at least two choices".into()));
        }
        if self.true_set.is_empty() {
            return Err(Error::Validation("record has no true choice".into()));
        }
        if let Some(&i) = self.true_set.iter().find(|&&i| i >= self.choices.len()) {
            return Err(Error::Validation(format!(
                "true index {i} out of range for {} choices",
                self.choices.len()
            )));
        }
        Ok(())
    }

    fn first_true(&self) -> &str {
        let i = *self.true_set.iter().min().expect("validated");
        &self.choices[i]
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct McTask {
    pub records: Vec<McRecord>,
    /// Exemplars for the k-shot prompt.
    pub pool: Vec<McRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum McMetric {
    Acc,
    AccNorm,
    Mc2,
}

impl McMetric {
    pub fn name(self) -> &'static str {
        match self {
            McMetric::Acc => "acc",
            McMetric::AccNorm => "acc_norm",
            McMetric::Mc2 => "mc2",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "acc" => Ok(McMetric::Acc),
            "acc_norm" => Ok(McMetric::AccNorm),
            "mc2" => Ok(McMetric::Mc2),
            other => Err(Error::Config(format!("unknown metric {other:?}"))),
        }
    }
}

/// Log-probability of `choice` following `context`, and the choice's UTF-8
/// byte length.
///
/// Context and choice are tokenized separately and scored as
/// `[bos] ++ context ++ choice`. When that exceeds the model's window the
/// context keeps only its last tokens.
pub fn choice_loglik<M: CausalLm + ?Sized>(
    model: &M,
    tokenizer: &TokenizerModel,
    context: &str,
    choice: &str,
) -> Result<(f64, usize)> {
    let choice_ids = tokenizer.encode(choice);
    if choice_ids.is_empty() {
        return Err(Error::Validation("empty choice".into()));
    }
    let mut ctx_ids = tokenizer.encode(context);
    // Inputs are every token but the last, so the window holds ctx_len + 1.
    let budget = model.ctx_len() + 1;
    if choice_ids.len() + 1 > budget {
        return Err(Error::ContextOverflow {
            len: choice_ids.len() + 1,
            ctx_len: model.ctx_len(),
        });
    }
    let room = budget - 1 - choice_ids.len();
    if ctx_ids.len() > room {
        ctx_ids.drain(..ctx_ids.len() - room);
    }
    let mut seq = Vec::with_capacity(1 + ctx_ids.len() + choice_ids.len());
    seq.push(BOS_ID);
    seq.extend_from_slice(&ctx_ids);
    seq.extend_from_slice(&choice_ids);

    let logits = model.logits(&seq[..seq.len() - 1])?;
    let v = model.vocab_size();
    let data = logits.data();
    let start = seq.len() - choice_ids.len();
    let mut total = 0.0;
    for pos in start..seq.len() {
        let row = &data[(pos - 1) * v..pos * v];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
        total += row[seq[pos] as usize] - lse;
    }
    Ok((total.min(0.0), choice.len()))
}

fn render_prompt(task: &McTask, exemplars: &[usize], context: &str) -> String {
    let mut prompt = String::new();
    for &i in exemplars {
        let ex = &task.pool[i];
        prompt.push_str(&ex.context);
        prompt.push('\n');
        prompt.push_str(ex.first_true());
        prompt.push_str("\n\n");
    }
    prompt.push_str(context);
    prompt
}

/// Lowest index among the maxima.
fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

fn record_score<M: CausalLm + ?Sized>(
    model: &M,
    tokenizer: &TokenizerModel,
    task: &McTask,
    index: usize,
    k: usize,
    metric: McMetric,
    seed: u64,
) -> Result<f64> {
    let record = &task.records[index];
    let exemplars = DetRng::derive(seed, index as u64).sample_indices(task.pool.len(), k);
    let prompt = render_prompt(task, &exemplars, &record.context);
    let scored = record
        .choices
        .iter()
        .map(|c| choice_loglik(model, tokenizer, &prompt, c))
        .collect::<Result<Vec<_>>>()?;
    let is_true = |i: usize| record.true_set.contains(&i);
    Ok(match metric {
        McMetric::Acc => {
            let ll: Vec<f64> = scored.iter().map(|s| s.0).collect();
            f64::from(u8::from(is_true(argmax(&ll))))
        }
        McMetric::AccNorm => {
            let ll: Vec<f64> = scored.iter().map(|&(l, b)| l / b as f64).collect();
            f64::from(u8::from(is_true(argmax(&ll))))
        }
        McMetric::Mc2 => {
            let max = scored.iter().map(|s| s.0).fold(f64::NEG_INFINITY, f64::max);
            let mass: Vec<f64> = scored.iter().map(|s| (s.0 - max).exp()).collect();
            let all: f64 = mass.iter().sum();
            let truth: f64 = (0..mass.len()).filter(|&i| is_true(i)).map(|i| mass[i]).sum();
            truth / all
        }
    })
}

/// Score every record with a k-shot prompt and average the per-record
/// metric.
///
/// Exemplars for record `i` are drawn without replacement from the pool with
/// a stream derived from `(seed, i)`, so results do not depend on scoring
/// order or thread count.
pub fn fewshot_eval<M: CausalLm + Sync + ?Sized>(
    model: &M,
    tokenizer: &TokenizerModel,
    task: &McTask,
    k: usize,
    metric: McMetric,
    seed: u64,
) -> Result<MetricReport> {
    if k > task.pool.len() {
        return Err(Error::Config(format!(
            "{k}-shot needs {k} exemplars but the pool has {}",
            task.pool.len()
        )));
    }
    if task.records.is_empty() {
        return Err(Error::Input("task has no records".into()));
    }
    for r in task.records.iter().chain(&task.pool) {
        r.validate()?;
    }
    let scores = (0..task.records.len())
        .into_par_iter()
        .map(|i| record_score(model, tokenizer, task, i, k, metric, seed))
        .collect::<Result<Vec<f64>>>()?;
    let value = scores.iter().sum::<f64>() / scores.len() as f64;
    Ok(MetricReport {
        metric: metric.name().into(),
        value,
        sample_count: scores.len(),
        config: serde_json::json!({ "k": k, "seed": seed }),
    })
}
