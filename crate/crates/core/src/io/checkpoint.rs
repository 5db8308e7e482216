use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{GptModel, ModelConfig, ParamSet};
use crate::tensor::{Tensor, TensorHeader};
use crate::tokenizer::TokenizerModel;
use crate::train::ClassifierModel;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    Lm,
    Classifier,
}

/// First line of a checkpoint file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub kind: CheckpointKind,
    pub model_config: ModelConfig,
    pub tokenizer_hash: String,
    pub step: u64,
    pub seed: u64,
    pub metrics: BTreeMap<String, f64>,
    pub tensors: Vec<TensorHeader>,
}

/// A header line of JSON followed by every tensor as raw little-endian f64,
/// in header order.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: ParamSet,
}

impl Checkpoint {
    pub fn from_model(
        model: &GptModel,
        kind: CheckpointKind,
        tokenizer: &TokenizerModel,
        step: u64,
        seed: u64,
        metrics: BTreeMap<String, f64>,
    ) -> Self {
        let mut offset = 0u64;
        let tensors = model
            .params
            .iter()
            .map(|(name, t)| {
                let h = TensorHeader {
                    name: name.to_string(),
                    shape: t.shape().to_vec(),
                    offset,
                };
                offset += t.numel() as u64 * 8;
                h
            })
            .collect();
        Self {
            header: CheckpointHeader {
                format_version: FORMAT_VERSION,
                kind,
                model_config: model.config.clone(),
                tokenizer_hash: tokenizer.content_hash(),
                step,
                seed,
                metrics,
                tensors,
            },
            params: model.params.clone(),
        }
    }

    /// Write to a sibling temporary file, then rename into place.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        let write = || -> std::io::Result<()> {
            let mut w = BufWriter::new(File::create(&tmp)?);
            serde_json::to_writer(&mut w, &self.header)?;
            w.write_all(b"\n")?;
            for h in &self.header.tensors {
                self.params
                    .get(&h.name)
                    .expect("header names come from the params")
                    .write_le(&mut w)?;
            }
            w.into_inner().map_err(|e| e.into_error())?.sync_all()?;
            std::fs::rename(&tmp, path)
        };
        write().map_err(|e| Error::io(path, e))
    }

    pub fn read_header(path: impl AsRef<Path>) -> Result<CheckpointHeader> {
        let path = path.as_ref();
        let mut r = BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?);
        Self::header_from(&mut r, path)
    }

    fn header_from<R: BufRead>(r: &mut R, path: &Path) -> Result<CheckpointHeader> {
        let mut line = Vec::new();
        r.read_until(b'\n', &mut line).map_err(|e| Error::io(path, e))?;
        if line.last() != Some(&b'\n') {
            return Err(Error::Format("missing header line".into()));
        }
        let header: CheckpointHeader =
            serde_json::from_slice(&line).map_err(|e| Error::Format(format!("bad header: {e}")))?;
        if header.format_version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported format version {}",
                header.format_version
            )));
        }
        Ok(header)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut r = BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?);
        let header = Self::header_from(&mut r, path)?;
        let mut params = ParamSet::new();
        let mut expected_offset = 0u64;
        for h in &header.tensors {
            if h.offset != expected_offset {
                return Err(Error::Format(format!("tensor {} at unexpected offset {}", h.name, h.offset)));
            }
            let t = Tensor::read_le(&mut r, h.shape.clone()).map_err(|e| match e.kind() {
                std::io::ErrorKind::UnexpectedEof => Error::Format(format!("payload truncated in {}", h.name)),
                _ => Error::io(path, e),
            })?;
            expected_offset += t.numel() as u64 * 8;
            params.insert(h.name.clone(), t.with_requires_grad(true))?;
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest).map_err(|e| Error::io(path, e))? != 0 {
            return Err(Error::Format("trailing bytes after payload".into()));
        }
        GptModel::from_params(header.model_config.clone(), params.clone())?;
        Ok(Self { header, params })
    }

    /// Refuse a tokenizer other than the one the checkpoint was trained with.
    pub fn check_tokenizer(&self, tokenizer: &TokenizerModel) -> Result<()> {
        let found = tokenizer.content_hash();
        if found != self.header.tokenizer_hash {
            return Err(Error::TokenizerMismatch {
                expected: self.header.tokenizer_hash.clone(),
                found,
            });
        }
        Ok(())
    }

    pub fn into_model(self) -> Result<GptModel> {
        GptModel::from_params(self.header.model_config, self.params)
    }

    pub fn into_classifier(self) -> Result<ClassifierModel> {
        if self.header.kind != CheckpointKind::Classifier {
            return Err(Error::Validation("checkpoint is not a classifier".into()));
        }
        ClassifierModel::from_model(self.into_model()?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Mode;
    use crate::tokenizer::train_bpe;

    fn fixture() -> (TokenizerModel, GptModel) {
        let tok = train_bpe(["سلام عليكم"], 24, Default::default(), Default::default()).unwrap();
        let model = GptModel::init(ModelConfig::new(2, 2, 8, tok.vocab_size(), 8), 5).unwrap();
        (tok, model)
    }

    #[test]
    fn roundtrip_is_bit_identical() {
        let (tok, model) = fixture();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let mut metrics = BTreeMap::new();
        metrics.insert("loss".to_string(), 1.25);
        let ck = Checkpoint::from_model(&model, CheckpointKind::Lm, &tok, 7, 3, metrics);
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.header, ck.header);
        for ((n1, a), (n2, b)) in model.params.iter().zip(back.params.iter()) {
            assert_eq!(n1, n2);
            let bits = |t: &Tensor| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
        let loaded = back.into_model().unwrap();
        let ids = tok.encode("سلام");
        assert_eq!(
            model.forward(&ids, Mode::Eval).unwrap().data(),
            loaded.forward(&ids, Mode::Eval).unwrap().data()
        );
        // Saving the loaded copy reproduces the file.
        let again = dir.path().join("again.ckpt");
        Checkpoint::from_model(&loaded, CheckpointKind::Lm, &tok, 7, 3, ck.header.metrics.clone())
            .save(&again)
            .unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());
    }

    #[test]
    fn tokenizer_mismatch_refused() {
        let (tok, model) = fixture();
        let other = train_bpe(["سلام عليكم ورحمة"], 30, Default::default(), Default::default()).unwrap();
        let ck = Checkpoint::from_model(&model, CheckpointKind::Lm, &tok, 0, 0, BTreeMap::new());
        assert!(ck.check_tokenizer(&tok).is_ok());
        assert!(matches!(ck.check_tokenizer(&other), Err(Error::TokenizerMismatch { .. })));
    }

    #[test]
    fn corrupt_files_rejected() {
        let (tok, model) = fixture();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        Checkpoint::from_model(&model, CheckpointKind::Lm, &tok, 0, 0, BTreeMap::new())
            .save(&path)
            .unwrap();
        let bytes = std::fs::read(&path).unwrap();

        let truncated = dir.path().join("t.ckpt");
        std::fs::write(&truncated, &bytes[..bytes.len() - 4]).unwrap();
        assert!(matches!(Checkpoint::load(&truncated), Err(Error::Format(_))));

        let padded = dir.path().join("p.ckpt");
        let mut extra = bytes.clone();
        extra.push(0);
        std::fs::write(&padded, &extra).unwrap();
        assert!(matches!(Checkpoint::load(&padded), Err(Error::Format(_))));

        let garbage = dir.path().join("g.ckpt");
        std::fs::write(&garbage, b"not json\n").unwrap();
        assert!(matches!(Checkpoint::load(&garbage), Err(Error::Format(_))));
    }

    #[test]
    fn missing_parameter_rejected() {
        let (tok, model) = fixture();
        let mut ck = Checkpoint::from_model(&model, CheckpointKind::Lm, &tok, 0, 0, BTreeMap::new());
        ck.header.tensors.retain(|h| h.name != "ln_f.bias");
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        ck.save(&path).unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(Error::Validation(_))));
    }

    #[test]
    fn classifier_kind_enforced() {
        let (tok, model) = fixture();
        let ck = Checkpoint::from_model(&model, CheckpointKind::Lm, &tok, 0, 0, BTreeMap::new());
        assert!(ck.into_classifier().is_err());
        let cls = ClassifierModel::new(model, 1).unwrap();
        let ck = Checkpoint::from_model(&cls.lm, CheckpointKind::Classifier, &tok, 0, 0, BTreeMap::new());
        assert_eq!(ck.into_classifier().unwrap(), cls);
    }
}
