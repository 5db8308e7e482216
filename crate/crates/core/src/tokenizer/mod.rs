//! Codepoint-level BPE tokenizer with a word-boundary marker.
//!
//! Text is normalized, split into marker-prefixed words, broken into
//! codepoints, and merged by rank. The vocabulary is laid out as the four
//! special tokens (ids 0..=3), then the base alphabet in codepoint order,
//! then merged tokens in the order they were learned.

mod model;
mod trainer;

pub use model::{Fertility, MergeRule, Specials, TokenizerModel, BOS_ID, EOS_ID, PAD_ID, UNK_ID};
pub use trainer::{train_bpe, train_bpe_with_log, MergeLogEntry, VocabPreset};
