use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::loop_::{run, BatchLoss, TrainingReport};
use crate::error::{Error, Result};
use crate::model::GptModel;
use crate::tokenizer::{TokenizerModel, EOS_ID, PAD_ID};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LmExample {
    pub prompt: String,
    pub completion: String,
}

/// Render `prompt ++ eos ++ completion ++ eos` as model inputs and targets.
///
/// Targets that would predict prompt tokens (or the separator) are `None`,
/// so only the completion and its closing eos are learned. When the record
/// does not fit in `ctx_len + 1` tokens the prompt loses tokens from its
/// head.
pub fn render_lm_example(
    tokenizer: &TokenizerModel,
    example: &LmExample,
    ctx_len: usize,
) -> Result<(Vec<u32>, Vec<Option<usize>>)> {
    let mut prompt = tokenizer.encode(&example.prompt);
    let completion = tokenizer.encode(&example.completion);
    if completion.is_empty() {
        return Err(Error::Validation("record has an empty completion".into()));
    }
    let budget = ctx_len + 1;
    let fixed = completion.len() + 2;
    if fixed > budget {
        return Err(Error::Validation(format!(
            "completion of {} tokens does not fit the context window of {ctx_len}",
            completion.len()
        )));
    }
    if prompt.len() + fixed > budget {
        let drop = prompt.len() + fixed - budget;
        log::warn!("truncating {drop} prompt tokens to fit the context window");
        prompt.drain(..drop);
    }
    let mut seq = prompt.clone();
    seq.push(EOS_ID);
    seq.extend_from_slice(&completion);
    seq.push(EOS_ID);

    let inputs = seq[..seq.len() - 1].to_vec();
    let targets = (0..inputs.len())
        .map(|j| (j >= prompt.len()).then(|| seq[j + 1] as usize))
        .collect();
    Ok((inputs, targets))
}

/// Pad rendered examples to a common length with `pad`, masking the padded
/// targets.
pub(crate) fn pad_batch(batch: &[&(Vec<u32>, Vec<Option<usize>>)]) -> (Vec<Vec<u32>>, Vec<Option<usize>>) {
    let len = batch.iter().map(|(i, _)| i.len()).max().unwrap_or(0);
    let mut inputs = Vec::with_capacity(batch.len());
    let mut targets = Vec::with_capacity(batch.len() * len);
    for (ids, tg) in batch {
        let mut row = ids.clone();
        row.resize(len, PAD_ID);
        inputs.push(row);
        targets.extend_from_slice(tg);
        targets.extend(std::iter::repeat_n(None, len - tg.len()));
    }
    (inputs, targets)
}

/// Fine-tune on prompt/completion pairs with completion-only loss.
pub fn finetune_lm(
    model: &mut GptModel,
    tokenizer: &TokenizerModel,
    data: &[LmExample],
    config: &TrainConfig,
) -> Result<TrainingReport> {
    if tokenizer.vocab_size() != model.config.vocab_size {
        return Err(Error::Config("tokenizer and model vocabularies differ".into()));
    }
    let rendered = data
        .iter()
        .map(|ex| render_lm_example(tokenizer, ex, model.config.ctx_len))
        .collect::<Result<Vec<_>>>()?;
    run(model, &rendered, config, |m, tape, batch, mode| {
        let (inputs, targets) = pad_batch(batch);
        let refs: Vec<&[u32]> = inputs.iter().map(Vec::as_slice).collect();
        let pass = m.forward_on(tape, &refs, mode)?;
        let loss = tape.masked_cross_entropy(pass.logits, &targets)?;
        Ok(BatchLoss {
            loss,
            param_vars: pass.param_vars,
            tokens: targets.iter().flatten().count() as u64,
        })
    })
}
