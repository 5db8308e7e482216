use super::config::TrainConfig;
use super::data::{clm_pair, pack_sequences};
use super::loop_::{run, BatchLoss, TrainingReport};
use crate::error::{Error, Result};
use crate::model::GptModel;
use crate::tensor::{self, Tensor};
use crate::tokenizer::{TokenizerModel, EOS_ID};

/// Mean next-token negative log-likelihood of `targets` under `logits[T,V]`.
pub fn clm_loss(logits: &Tensor, targets: &[usize]) -> Result<f64> {
    match logits.shape() {
        [t, _] if *t == targets.len() => tensor::cross_entropy(logits, targets),
        s => Err(Error::Dimension {
            op: "clm_loss",
            left: s.to_vec(),
            right: vec![targets.len()],
        }),
    }
}

/// Tokenize, pack into `seq_len + 1` blocks and train on next-token loss.
pub fn pretrain<I, S>(
    model: &mut GptModel,
    tokenizer: &TokenizerModel,
    corpus: I,
    config: &TrainConfig,
) -> Result<TrainingReport>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    if tokenizer.vocab_size() != model.config.vocab_size {
        return Err(Error::Config(format!(
            "tokenizer vocabulary {} does not match model vocabulary {}",
            tokenizer.vocab_size(),
            model.config.vocab_size
        )));
    }
    let docs: Vec<Vec<u32>> = corpus
        .into_iter()
        .map(|d| tokenizer.encode(d.as_ref()))
        .filter(|ids| !ids.is_empty())
        .collect();
    let blocks = pack_sequences(&docs, config.seq_len + 1, EOS_ID)?;
    pretrain_blocks(model, &blocks, config)
}

/// Train on pre-packed blocks; each block yields `len - 1` predictions.
pub fn pretrain_blocks(model: &mut GptModel, blocks: &[Vec<u32>], config: &TrainConfig) -> Result<TrainingReport> {
    if let Some(b) = blocks.iter().find(|b| b.len() != config.seq_len + 1) {
        return Err(Error::Input(format!(
            "block of length {} does not match seq_len + 1 = {}",
            b.len(),
            config.seq_len + 1
        )));
    }
    run(model, blocks, config, |m, tape, batch, mode| {
        let inputs: Vec<&[u32]> = batch.iter().map(|b| clm_pair(b).0).collect();
        let targets: Vec<usize> = batch.iter().flat_map(|b| clm_pair(b).1).collect();
        let pass = m.forward_on(tape, &inputs, mode)?;
        let loss = tape.cross_entropy(pass.logits, &targets)?;
        Ok(BatchLoss {
            loss,
            param_vars: pass.param_vars,
            tokens: targets.len() as u64,
        })
    })
}
