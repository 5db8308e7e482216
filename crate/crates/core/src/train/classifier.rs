use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::loop_::{run, BatchLoss, Trainable, TrainingReport};
use crate::error::{Error, Result};
use crate::model::{GptModel, Mode, ParamSet};
use crate::rng::DetRng;
use crate::tensor::{Tape, Tensor, Var};
use crate::tokenizer::{TokenizerModel, BOS_ID, PAD_ID};

const HEAD_WEIGHT: &str = "cls.weight";
const HEAD_BIAS: &str = "cls.bias";
const HEAD_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClsExample {
    pub text: String,
    pub label: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Classification {
    pub label: u8,
    /// Probability of the predicted label.
    pub score: f64,
    pub probs: [f64; 2],
}

/// A causal LM with a two-way linear head on the hidden state of the last
/// input position.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierModel {
    pub lm: GptModel,
}

impl Trainable for ClassifierModel {
    fn params(&self) -> &ParamSet {
        &self.lm.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.lm.params
    }
}

impl ClassifierModel {
    /// Attach a freshly initialized head (weights N(0, 0.02), zero bias).
    pub fn new(mut lm: GptModel, seed: u64) -> Result<Self> {
        if lm.params.get(HEAD_WEIGHT).is_some() {
            return Err(Error::Validation("model already has a classifier head".into()));
        }
        let d = lm.config.d_model;
        let mut rng = DetRng::new(seed);
        let w = Tensor::normal_from(&[d, 2], 0.0, HEAD_STD, &mut rng).with_requires_grad(true);
        lm.params.insert(HEAD_WEIGHT, w)?;
        lm.params
            .insert(HEAD_BIAS, Tensor::zeros(&[2]).with_requires_grad(true))?;
        Ok(Self { lm })
    }

    /// Wrap a model whose parameters already include a trained head.
    pub fn from_model(lm: GptModel) -> Result<Self> {
        let d = lm.config.d_model;
        let ok = lm.params.get(HEAD_WEIGHT).is_some_and(|t| t.shape() == [d, 2])
            && lm.params.get(HEAD_BIAS).is_some_and(|t| t.shape() == [2]);
        if !ok {
            return Err(Error::Validation("model has no classifier head".into()));
        }
        Ok(Self { lm })
    }

    /// `[bos] ++ ids`, keeping the tail when longer than the context.
    fn input_ids(&self, tokenizer: &TokenizerModel, text: &str) -> Vec<u32> {
        let mut ids = vec![BOS_ID];
        ids.extend(tokenizer.encode(text));
        let ctx = self.lm.config.ctx_len;
        if ids.len() > ctx {
            ids.drain(..ids.len() - ctx);
        }
        ids
    }

    /// Record head logits `[batch, 2]` for token sequences of any lengths.
    fn logits_on(&self, tape: &mut Tape, seqs: &[&[u32]], mode: Mode) -> Result<(Var, Vec<Var>)> {
        let len = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
        let padded: Vec<Vec<u32>> = seqs
            .iter()
            .map(|s| {
                let mut v = s.to_vec();
                v.resize(len, PAD_ID);
                v
            })
            .collect();
        let refs: Vec<&[u32]> = padded.iter().map(Vec::as_slice).collect();
        let pass = self.lm.forward_on(tape, &refs, mode)?;
        let last: Vec<usize> = seqs
            .iter()
            .enumerate()
            .map(|(b, s)| b * len + s.len() - 1)
            .collect();
        let pooled = tape.gather_rows(pass.hidden, &last)?;
        let pos = |n: &str| pass.param_vars[self.lm.params.position(n).expect("classifier head")];
        let z = tape.matmul(pooled, pos(HEAD_WEIGHT))?;
        let z = tape.add(z, pos(HEAD_BIAS))?;
        Ok((z, pass.param_vars))
    }

    pub fn classify(&self, tokenizer: &TokenizerModel, text: &str) -> Result<Classification> {
        let ids = self.input_ids(tokenizer, text);
        let mut tape = Tape::new();
        let (z, _) = self.logits_on(&mut tape, &[&ids], Mode::Eval)?;
        let z = tape.value(z);
        let m = z[0].max(z[1]);
        let e = [(z[0] - m).exp(), (z[1] - m).exp()];
        let s = e[0] + e[1];
        let probs = [e[0] / s, e[1] / s];
        let label = u8::from(probs[1] > probs[0]);
        Ok(Classification {
            label,
            score: probs[label as usize],
            probs,
        })
    }
}

/// Train the whole network and the head with cross-entropy on the head
/// logits.
pub fn finetune_classifier(
    model: &mut ClassifierModel,
    tokenizer: &TokenizerModel,
    data: &[ClsExample],
    config: &TrainConfig,
) -> Result<TrainingReport> {
    if tokenizer.vocab_size() != model.lm.config.vocab_size {
        return Err(Error::Config("tokenizer and model vocabularies differ".into()));
    }
    let encoded = data
        .iter()
        .map(|ex| {
            if ex.label > 1 {
                return Err(Error::Validation(format!("label {} is not 0 or 1", ex.label)));
            }
            Ok((model.input_ids(tokenizer, &ex.text), ex.label as usize))
        })
        .collect::<Result<Vec<_>>>()?;
    run(model, &encoded, config, |m, tape, batch, mode| {
        let seqs: Vec<&[u32]> = batch.iter().map(|(ids, _)| ids.as_slice()).collect();
        let labels: Vec<usize> = batch.iter().map(|(_, l)| *l).collect();
        let (z, param_vars) = m.logits_on(tape, &seqs, mode)?;
        let loss = tape.cross_entropy(z, &labels)?;
        Ok(BatchLoss {
            loss,
            param_vars,
            tokens: seqs.iter().map(|s| s.len() as u64).sum(),
        })
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::tokenizer::train_bpe;

    fn setup() -> (TokenizerModel, ClassifierModel) {
        let tok = train_bpe(["نعم جميل رائع لا سيء قبيح"], 40, Default::default(), Default::default()).unwrap();
        let lm = GptModel::init(ModelConfig::new(1, 2, 16, tok.vocab_size(), 16), 1).unwrap();
        (tok, ClassifierModel::new(lm, 2).unwrap())
    }

    #[test]
    fn probabilities_sum_to_one() {
        let (tok, m) = setup();
        let c = m.classify(&tok, "جميل").unwrap();
        assert!((c.probs[0] + c.probs[1] - 1.0).abs() < 1e-12);
        assert_eq!(c.score, c.probs[c.label as usize]);
    }

    #[test]
    fn batch_padding_does_not_change_logits() {
        let (tok, m) = setup();
        let a = m.input_ids(&tok, "جميل رائع نعم");
        let b = m.input_ids(&tok, "لا");
        let mut t1 = Tape::new();
        let (z1, _) = m.logits_on(&mut t1, &[&a, &b], Mode::Eval).unwrap();
        let mut t2 = Tape::new();
        let (z2, _) = m.logits_on(&mut t2, &[&b], Mode::Eval).unwrap();
        assert_eq!(&t1.value(z1)[2..], t2.value(z2));
    }

    #[test]
    fn bad_label_rejected() {
        let (tok, mut m) = setup();
        let data = [ClsExample {
            text: "نعم".into(),
            label: 2,
        }];
        let err = finetune_classifier(&mut m, &tok, &data, &TrainConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }

    #[test]
    fn head_required_on_load() {
        let (_, m) = setup();
        assert!(ClassifierModel::from_model(m.lm.clone()).is_ok());
        let bare = GptModel::init(m.lm.config.clone(), 1).unwrap();
        assert!(ClassifierModel::from_model(bare.clone()).is_err());
        assert!(ClassifierModel::new(m.lm, 0).is_err());
    }

    #[test]
    fn learns_a_keyword_rule() {
        let (tok, mut m) = setup();
        let data: Vec<ClsExample> = ["جميل", "رائع", "نعم جميل", "سيء", "قبيح", "لا سيء"]
            .iter()
            .enumerate()
            .map(|(i, t)| ClsExample {
                text: t.to_string(),
                label: u8::from(i < 3),
            })
            .collect();
        let cfg = TrainConfig {
            batch_size: 6,
            max_steps: 60,
            lr_initial: 1e-2,
            warmup_steps: Some(0),
            ..TrainConfig::default()
        };
        finetune_classifier(&mut m, &tok, &data, &cfg).unwrap();
        for ex in &data {
            assert_eq!(m.classify(&tok, &ex.text).unwrap().label, ex.label, "{}", ex.text);
        }
    }
}
