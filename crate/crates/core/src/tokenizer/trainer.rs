use std::cmp::Ordering;
use std::collections::{BTreeSet, BinaryHeap, HashMap, HashSet};

use crate::error::{Error, Result};
use crate::normalize::{normalize, pretokenize_str, NormalizerConfig};

use super::model::{Specials, TokenizerModel};

/// Pairs seen fewer times than this are never merged.
const MIN_PAIR_FREQUENCY: u64 = 2;

/// Standard vocabulary sizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum VocabPreset {
    K32,
    K50,
    #[default]
    K64,
    K86,
}

impl VocabPreset {
    pub fn size(self) -> usize {
        match self {
            VocabPreset::K32 => 32_000,
            VocabPreset::K50 => 50_000,
            VocabPreset::K64 => 64_000,
            VocabPreset::K86 => 86_000,
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        match name.to_ascii_lowercase().as_str() {
            "32k" => Some(VocabPreset::K32),
            "50k" => Some(VocabPreset::K50),
            "64k" => Some(VocabPreset::K64),
            "86k" => Some(VocabPreset::K86),
            _ => None,
        }
    }
}

/// One learned merge and the pair frequency it was selected at.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MergeLogEntry {
    pub left: String,
    pub right: String,
    pub frequency: u64,
}

pub fn train_bpe<I, S>(
    corpus: I,
    vocab_size: usize,
    normalizer: NormalizerConfig,
    specials: Specials,
) -> Result<TokenizerModel>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    train_bpe_with_log(corpus, vocab_size, normalizer, specials).map(|(m, _)| m)
}

/// Train a tokenizer and also return the frequency at which each merge was
/// chosen.
///
/// Merges are picked greedily by pair frequency; ties go to the
/// lexicographically smallest `(left, right)` pair (codepoint order).
/// Training stops once the vocabulary reaches `vocab_size` or no pair occurs
/// at least twice.
pub fn train_bpe_with_log<I, S>(
    corpus: I,
    vocab_size: usize,
    normalizer: NormalizerConfig,
    specials: Specials,
) -> Result<(TokenizerModel, Vec<MergeLogEntry>)>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let mut word_counts: HashMap<String, u64> = HashMap::new();
    let mut documents = 0usize;
    for doc in corpus {
        documents += 1;
        let normalized = normalize(doc.as_ref(), &normalizer);
        for word in pretokenize_str(&normalized.text) {
            *word_counts.entry(word).or_default() += 1;
        }
    }
    if documents == 0 || word_counts.is_empty() {
        return Err(Error::Input("cannot train a tokenizer on an empty corpus".into()));
    }

    let alphabet: BTreeSet<char> = word_counts.keys().flat_map(|w| w.chars()).collect();
    for c in &alphabet {
        if specials.contains(c.to_string().as_str()) {
            return Err(Error::Config(format!(
                "special token {c:?} collides with a corpus character"
            )));
        }
    }
    let base = alphabet.len() + 4;
    if vocab_size < base {
        return Err(Error::Config(format!(
            "vocab_size {vocab_size} is smaller than base alphabet ({}) plus 4 special tokens",
            alphabet.len()
        )));
    }

    let mut vocab: Vec<String> = specials.in_order().iter().map(|s| s.to_string()).collect();
    vocab.extend(alphabet.iter().map(|c| c.to_string()));
    let mut index: HashMap<String, u32> = vocab
        .iter()
        .enumerate()
        .map(|(i, t)| (t.clone(), i as u32))
        .collect();

    // Sorting the distinct words keeps word indices deterministic.
    let mut words: Vec<(String, u64)> = word_counts.into_iter().collect();
    words.sort_unstable();
    let freqs: Vec<u64> = words.iter().map(|(_, f)| *f).collect();
    let mut symbols: Vec<Vec<u32>> = words
        .iter()
        .map(|(w, _)| w.chars().map(|c| index[c.to_string().as_str()]).collect())
        .collect();
    drop(words);

    let mut counts: HashMap<(u32, u32), u64> = HashMap::new();
    let mut occurs: HashMap<(u32, u32), HashSet<usize>> = HashMap::new();
    for (wi, syms) in symbols.iter().enumerate() {
        for p in syms.windows(2) {
            let pair = (p[0], p[1]);
            *counts.entry(pair).or_default() += freqs[wi];
            occurs.entry(pair).or_default().insert(wi);
        }
    }

    let mut heap = BinaryHeap::with_capacity(counts.len());
    for (&pair, &count) in &counts {
        heap.push(Candidate::new(pair, count, &vocab));
    }

    let mut merges: Vec<(String, String)> = Vec::new();
    let mut log = Vec::new();
    let mut forbidden: HashSet<(u32, u32)> = HashSet::new();

    while vocab.len() < vocab_size {
        let Some(top) = heap.pop() else { break };
        let current = counts.get(&top.pair).copied().unwrap_or(0);
        if current != top.count || forbidden.contains(&top.pair) {
            continue;
        }
        if current < MIN_PAIR_FREQUENCY {
            break;
        }
        let merged = format!("{}{}", top.left, top.right);
        if specials.contains(&merged) {
            forbidden.insert(top.pair);
            continue;
        }
        let merged_id = match index.get(&merged) {
            Some(&id) => id,
            None => {
                let id = vocab.len() as u32;
                vocab.push(merged.clone());
                index.insert(merged, id);
                id
            }
        };
        log.push(MergeLogEntry {
            left: top.left.clone(),
            right: top.right.clone(),
            frequency: current,
        });
        merges.push((top.left, top.right));

        let mut touched: HashSet<(u32, u32)> = HashSet::new();
        let mut affected: Vec<usize> = occurs
            .remove(&top.pair)
            .map(|s| s.into_iter().collect())
            .unwrap_or_default();
        affected.sort_unstable();
        for wi in affected {
            let syms = &mut symbols[wi];
            let freq = freqs[wi];
            if !syms.windows(2).any(|p| (p[0], p[1]) == top.pair) {
                continue;
            }
            for p in syms.windows(2) {
                let pair = (p[0], p[1]);
                let c = counts.get_mut(&pair).expect("pair counted");
                *c -= freq;
                touched.insert(pair);
            }
            *syms = merge_pair(syms, top.pair, merged_id);
            for p in syms.windows(2) {
                let pair = (p[0], p[1]);
                *counts.entry(pair).or_default() += freq;
                occurs.entry(pair).or_default().insert(wi);
                touched.insert(pair);
            }
        }
        for pair in touched {
            let c = counts[&pair];
            if c == 0 {
                counts.remove(&pair);
            } else if pair != top.pair {
                heap.push(Candidate::new(pair, c, &vocab));
            }
        }
    }

    let model = TokenizerModel::from_parts(normalizer, specials, vocab, merges)?;
    Ok((model, log))
}

pub(crate) fn merge_pair(symbols: &[u32], pair: (u32, u32), merged: u32) -> Vec<u32> {
    let mut out = Vec::with_capacity(symbols.len());
    let mut i = 0;
    while i < symbols.len() {
        if i + 1 < symbols.len() && (symbols[i], symbols[i + 1]) == pair {
            out.push(merged);
            i += 2;
        } else {
            out.push(symbols[i]);
            i += 1;
        }
    }
    out
}

#[derive(Debug, PartialEq, Eq)]
struct Candidate {
    count: u64,
    left: String,
    right: String,
    pair: (u32, u32),
}

impl Candidate {
    fn new(pair: (u32, u32), count: u64, vocab: &[String]) -> Self {
        Self {
            count,
            left: vocab[pair.0 as usize].clone(),
            right: vocab[pair.1 as usize].clone(),
            pair,
        }
    }
}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.count
            .cmp(&other.count)
            .then_with(|| other.left.cmp(&self.left))
            .then_with(|| other.right.cmp(&self.right))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
