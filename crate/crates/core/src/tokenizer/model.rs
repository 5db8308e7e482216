use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::normalize::{normalize, pretokenize_str, NormalizerConfig, WORD_MARKER};

pub const UNK_ID: u32 = 0;
pub const BOS_ID: u32 = 1;
pub const EOS_ID: u32 = 2;
pub const PAD_ID: u32 = 3;

const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Specials {
    pub unk: String,
    pub bos: String,
    pub eos: String,
    pub pad: String,
}

impl Default for Specials {
    fn default() -> Self {
        Self {
            unk: "<unk>".into(),
            bos: "<s>".into(),
            eos: "</s>".into(),
            pad: "<pad>".into(),
        }
    }
}

impl Specials {
    /// Tokens in id order.
    pub fn in_order(&self) -> [&str; 4] {
        [&self.unk, &self.bos, &self.eos, &self.pad]
    }

    pub fn contains(&self, token: &str) -> bool {
        self.in_order().contains(&token)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MergeRule {
    pub rank: u32,
    pub left: String,
    pub right: String,
    pub merged: String,
}

#[derive(Debug, Clone)]
pub struct TokenizerModel {
    normalizer: NormalizerConfig,
    specials: Specials,
    vocab: Vec<String>,
    index: HashMap<String, u32>,
    merges: Vec<MergeRule>,
    // (left id, right id) -> (rank, merged id)
    merge_table: HashMap<(u32, u32), (u32, u32)>,
}

impl PartialEq for TokenizerModel {
    fn eq(&self, other: &Self) -> bool {
        self.normalizer == other.normalizer
            && self.specials == other.specials
            && self.vocab == other.vocab
            && self.merges == other.merges
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TokenizerFile {
    version: u32,
    normalizer: NormalizerConfig,
    specials: Specials,
    vocab: Vec<String>,
    merges: Vec<(String, String)>,
}

/// Subword tokens per whitespace word over a corpus.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Fertility {
    pub tokens: u64,
    pub words: u64,
}

impl Fertility {
    pub fn ratio(&self) -> f64 {
        self.tokens as f64 / self.words as f64
    }
}

impl TokenizerModel {
    /// Build a model from its parts, checking every structural invariant.
    pub fn from_parts(
        normalizer: NormalizerConfig,
        specials: Specials,
        vocab: Vec<String>,
        merges: Vec<(String, String)>,
    ) -> Result<Self> {
        if vocab.len() < 4 || vocab[..4] != specials.in_order().map(String::from) {
            return Err(Error::Validation(
                "vocabulary must start with unk, bos, eos, pad".into(),
            ));
        }
        let mut index = HashMap::with_capacity(vocab.len());
        for (id, tok) in vocab.iter().enumerate() {
            if tok.is_empty() {
                return Err(Error::Validation(format!("empty token at id {id}")));
            }
            if index.insert(tok.clone(), id as u32).is_some() {
                return Err(Error::Validation(format!("duplicate token {tok:?}")));
            }
        }
        let mut rules = Vec::with_capacity(merges.len());
        let mut merge_table = HashMap::with_capacity(merges.len());
        for (rank, (left, right)) in merges.into_iter().enumerate() {
            let merged = format!("{left}{right}");
            for t in [&left, &right, &merged] {
                if specials.contains(t) {
                    return Err(Error::Validation(format!(
                        "special token {t:?} used in merge {rank}"
                    )));
                }
            }
            let lookup = |t: &str| {
                index.get(t).copied().ok_or_else(|| {
                    Error::Validation(format!("merge {rank} references unknown token {t:?}"))
                })
            };
            let (l, r, m) = (lookup(&left)?, lookup(&right)?, lookup(&merged)?);
            if merge_table.insert((l, r), (rank as u32, m)).is_some() {
                return Err(Error::Validation(format!("duplicate merge at rank {rank}")));
            }
            rules.push(MergeRule {
                rank: rank as u32,
                left,
                right,
                merged,
            });
        }
        Ok(Self {
            normalizer,
            specials,
            vocab,
            index,
            merges: rules,
            merge_table,
        })
    }

    pub fn normalizer(&self) -> &NormalizerConfig {
        &self.normalizer
    }

    pub fn specials(&self) -> &Specials {
        &self.specials
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn merges(&self) -> &[MergeRule] {
        &self.merges
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.vocab.get(id as usize).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        let normalized = normalize(text, &self.normalizer);
        let mut cache: HashMap<String, Vec<u32>> = HashMap::new();
        let mut ids = Vec::new();
        for word in pretokenize_str(&normalized.text) {
            let encoded = cache
                .entry(word)
                .or_insert_with_key(|w| self.encode_word(w));
            ids.extend_from_slice(encoded);
        }
        ids
    }

    /// Encode one marker-prefixed pretoken.
    pub fn encode_word(&self, word: &str) -> Vec<u32> {
        let mut buf = [0u8; 4];
        let mut symbols: Vec<u32> = word
            .chars()
            .map(|c| {
                self.index
                    .get(c.encode_utf8(&mut buf) as &str)
                    .copied()
                    .unwrap_or(UNK_ID)
            })
            .collect();

        loop {
            let best = symbols
                .windows(2)
                .filter_map(|w| self.merge_table.get(&(w[0], w[1])).map(|&(rank, m)| (rank, w[0], w[1], m)))
                .min_by_key(|&(rank, ..)| rank);
            let Some((_, left, right, merged)) = best else {
                break;
            };
            let mut out = Vec::with_capacity(symbols.len());
            let mut i = 0;
            while i < symbols.len() {
                if i + 1 < symbols.len() && symbols[i] == left && symbols[i + 1] == right {
                    out.push(merged);
                    i += 2;
                } else {
                    out.push(symbols[i]);
                    i += 1;
                }
            }
            symbols = out;
        }
        symbols
    }

    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let mut out = String::new();
        for &id in ids {
            let tok = self.token(id).ok_or(Error::Range {
                id: id as usize,
                limit: self.vocab.len(),
            })?;
            if matches!(id, BOS_ID | EOS_ID | PAD_ID) {
                continue;
            }
            out.push_str(tok);
        }
        let spaced = out.replace(WORD_MARKER, " ");
        Ok(match spaced.strip_prefix(' ') {
            Some(rest) => rest.to_owned(),
            None => spaced,
        })
    }

    pub fn fertility<I, S>(&self, corpus: I) -> Result<Fertility>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut f = Fertility { tokens: 0, words: 0 };
        for doc in corpus {
            let normalized = normalize(doc.as_ref(), &self.normalizer);
            for word in pretokenize_str(&normalized.text) {
                f.words += 1;
                f.tokens += self.encode_word(&word).len() as u64;
            }
        }
        if f.words == 0 {
            return Err(Error::Input("fertility needs at least one word".into()));
        }
        Ok(f)
    }

    pub fn to_json(&self) -> String {
        let file = TokenizerFile {
            version: FORMAT_VERSION,
            normalizer: self.normalizer,
            specials: self.specials.clone(),
            vocab: self.vocab.clone(),
            merges: self
                .merges
                .iter()
                .map(|m| (m.left.clone(), m.right.clone()))
                .collect(),
        };
        serde_json::to_string(&file).expect("tokenizer serializes")
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let file: TokenizerFile = serde_json::from_str(json.strip_prefix('\u{FEFF}').unwrap_or(json))?;
        if file.version != FORMAT_VERSION {
            return Err(Error::Validation(format!(
                "unsupported tokenizer version {}",
                file.version
            )));
        }
        Self::from_parts(file.normalizer, file.specials, file.vocab, file.merges)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let json = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&json)
    }

    /// SHA-256 of the canonical JSON form, hex encoded.
    pub fn content_hash(&self) -> String {
        let digest = Sha256::digest(self.to_json().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> TokenizerModel {
        let specials = Specials::default();
        let mut vocab: Vec<String> = specials.in_order().iter().map(|s| s.to_string()).collect();
        vocab.extend(["▁", "ا", "ب", "▁ا"].map(String::from));
        TokenizerModel::from_parts(
            NormalizerConfig::default(),
            specials,
            vocab,
            vec![("▁".into(), "ا".into())],
        )
        .unwrap()
    }

    #[test]
    fn encode_applies_merge() {
        let t = toy();
        let ids = t.encode("اب");
        let toks: Vec<&str> = ids.iter().map(|&i| t.token(i).unwrap()).collect();
        assert_eq!(toks, vec!["▁ا", "ب"]);
    }

    #[test]
    fn encode_empty() {
        assert!(toy().encode("").is_empty());
    }

    #[test]
    fn unknown_codepoint_is_unk() {
        let t = toy();
        assert_eq!(t.encode("ت"), vec![t.id("▁").unwrap(), UNK_ID]);
    }

    #[test]
    fn decode_skips_bos_eos() {
        let t = toy();
        let ids = [BOS_ID, t.id("▁ا").unwrap(), EOS_ID];
        assert_eq!(t.decode(&ids).unwrap(), "ا");
        assert_eq!(t.decode(&[]).unwrap(), "");
    }

    #[test]
    fn decode_roundtrip() {
        let t = toy();
        assert_eq!(t.decode(&t.encode("اب اب")).unwrap(), "اب اب");
    }

    #[test]
    fn decode_out_of_range() {
        let t = toy();
        assert!(matches!(t.decode(&[99]), Err(Error::Range { id: 99, .. })));
    }

    #[test]
    fn rejects_special_in_merge() {
        let specials = Specials::default();
        let mut vocab: Vec<String> = specials.in_order().iter().map(|s| s.to_string()).collect();
        vocab.extend(["<", "s>"].map(String::from));
        let err = TokenizerModel::from_parts(
            NormalizerConfig::default(),
            specials,
            vocab,
            vec![("<".into(), "s>".into())],
        );
        assert!(err.is_err());
    }

    #[test]
    fn fertility_examples() {
        let t = toy();
        // one 3-codepoint word, none of whose pairs merge: marker + 3 symbols
        let f = t.fertility(["ببب"]).unwrap();
        assert_eq!((f.tokens, f.words), (4, 1));
        assert_eq!(f.ratio(), 4.0);
        assert!(t.fertility(Vec::<&str>::new()).is_err());
        assert!(t.fertility(["   "]).is_err());
    }

    #[test]
    fn json_roundtrip() {
        let t = toy();
        let back = TokenizerModel::from_json(&t.to_json()).unwrap();
        assert_eq!(t, back);
        assert_eq!(t.content_hash(), back.content_hash());
        let v: serde_json::Value = serde_json::from_str(&t.to_json()).unwrap();
        assert_eq!(v["version"], 1);
        assert_eq!(v["merges"][0][0], "▁");
    }
}
