//! Shared fixtures for the benchmarks.

use alm_core::rng::DetRng;

const LETTERS: &str = "ابتثجحخدذرزسشصضطظعغفقكلمنهوي";

/// `docs` lines of `words` pseudo-words drawn from a fixed 2,000-word lexicon.
pub fn arabic_corpus(docs: usize, words: usize, seed: u64) -> Vec<String> {
    let letters: Vec<char> = LETTERS.chars().collect();
    let mut rng = DetRng::new(seed);
    let lexicon: Vec<String> = (0..2000)
        .map(|_| {
            let n = 2 + rng.below(6);
            (0..n).map(|_| letters[rng.below(letters.len())]).collect()
        })
        .collect();
    (0..docs)
        .map(|_| {
            (0..words)
                .map(|_| lexicon[rng.below(lexicon.len())].as_str())
                .collect::<Vec<_>>()
                .join(" ")
        })
        .collect()
}
