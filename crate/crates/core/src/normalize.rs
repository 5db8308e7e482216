//! Arabic-aware text normalization and word pretokenization.
//!
//! The pipeline runs in a fixed order:
//!
//! 1. NFKC (compatibility decomposition + canonical composition). This
//!    resolves presentation-form ligatures such as U+FEFB into their letters.
//!    Presentation-form codepoints without a decomposition are dropped.
//! 2. Character filters: tatweel removal, optional diacritic stripping,
//!    optional alef folding and Latin lowercasing. U+2581 is reserved as the
//!    word-boundary marker and is rewritten to a plain space.
//! 3. NFKC again when a filter changed anything, since removing a tatweel can
//!    bring a letter and a combining hamza together.
//! 4. Whitespace collapsing and trimming.

use serde::{Deserialize, Serialize};
use unicode_normalization::UnicodeNormalization;

use crate::error::{Error, Result};

/// Word-boundary marker prepended to every pretoken.
pub const WORD_MARKER: char = '\u{2581}';

pub const TATWEEL: char = '\u{0640}';

/// Harakat and tanwin, U+064B..=U+0652.
pub fn is_diacritic(c: char) -> bool {
    ('\u{064B}'..='\u{0652}').contains(&c)
}

pub fn is_presentation_form(c: char) -> bool {
    ('\u{FB50}'..='\u{FDFF}').contains(&c) || ('\u{FE70}'..='\u{FEFF}').contains(&c)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormalizerConfig {
    pub unicode_canonicalize: bool,
    pub preserve_diacritics: bool,
    pub remove_tatweel: bool,
    pub collapse_whitespace: bool,
    pub lowercase_latin: bool,
    /// Fold hamzated alef variants (U+0622, U+0623, U+0625) to bare alef.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub fold_alef: bool,
}

impl Default for NormalizerConfig {
    fn default() -> Self {
        Self {
            unicode_canonicalize: true,
            preserve_diacritics: true,
            remove_tatweel: true,
            collapse_whitespace: true,
            lowercase_latin: false,
            fold_alef: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NormalizedText {
    pub text: String,
    /// Codepoint count of the input.
    pub source_len: usize,
}

impl NormalizedText {
    pub fn as_str(&self) -> &str {
        &self.text
    }
}

pub fn normalize(text: &str, config: &NormalizerConfig) -> NormalizedText {
    let source_len = text.chars().count();

    let canonical: String = if config.unicode_canonicalize {
        text.nfkc().filter(|&c| !is_presentation_form(c)).collect()
    } else {
        text.to_owned()
    };

    let mut changed = false;
    let mut filtered = String::with_capacity(canonical.len());
    for c in canonical.chars() {
        match filter_char(c, config) {
            Filtered::Keep => filtered.push(c),
            Filtered::Drop => changed = true,
            Filtered::Replace(r) => {
                changed = true;
                filtered.push(r);
            }
            Filtered::Lower => {
                changed = true;
                filtered.extend(c.to_lowercase());
            }
        }
    }

    let recomposed = if changed && config.unicode_canonicalize {
        filtered.nfkc().collect()
    } else {
        filtered
    };

    let text = if config.collapse_whitespace {
        collapse_whitespace(&recomposed)
    } else {
        recomposed
    };
    NormalizedText { text, source_len }
}

/// Decode a byte buffer as UTF-8 and normalize it.
pub fn normalize_bytes(bytes: &[u8], config: &NormalizerConfig) -> Result<NormalizedText> {
    let text = std::str::from_utf8(bytes).map_err(|e| Error::Utf8 {
        offset: e.valid_up_to(),
    })?;
    Ok(normalize(text, config))
}

enum Filtered {
    Keep,
    Drop,
    Replace(char),
    Lower,
}

fn filter_char(c: char, config: &NormalizerConfig) -> Filtered {
    if c == WORD_MARKER {
        return Filtered::Replace(' ');
    }
    if config.remove_tatweel && c == TATWEEL {
        return Filtered::Drop;
    }
    if !config.preserve_diacritics && is_diacritic(c) {
        return Filtered::Drop;
    }
    if config.fold_alef && matches!(c, '\u{0622}' | '\u{0623}' | '\u{0625}') {
        return Filtered::Replace('\u{0627}');
    }
    if config.lowercase_latin && c <= '\u{024F}' && c.is_uppercase() {
        return Filtered::Lower;
    }
    Filtered::Keep
}

fn collapse_whitespace(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for word in s.split_whitespace() {
        if !out.is_empty() {
            out.push(' ');
        }
        out.push_str(word);
    }
    out
}

/// Split normalized text into words, each carrying a leading [`WORD_MARKER`].
pub fn pretokenize(text: &NormalizedText) -> Vec<String> {
    pretokenize_str(&text.text)
}

pub(crate) fn pretokenize_str(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| {
            let mut t = String::with_capacity(w.len() + WORD_MARKER.len_utf8());
            t.push(WORD_MARKER);
            t.push_str(w);
            t
        })
        .collect()
}
