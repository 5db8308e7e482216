use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::normalize::{normalize, NormalizerConfig};

const SMOOTHING: f64 = 1e-9;

fn words(s: &str) -> Vec<String> {
    normalize(s, &NormalizerConfig::default())
        .text
        .split_whitespace()
        .map(str::to_owned)
        .collect()
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if n > 0 && tokens.len() >= n {
        for g in tokens.windows(n) {
            *counts.entry(g).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped overlap and total hypothesis n-gram count.
fn overlap(hyp: &[String], reference: &[String], n: usize) -> (usize, usize) {
    let h = ngram_counts(hyp, n);
    let r = ngram_counts(reference, n);
    let matched = h
        .iter()
        .map(|(g, &c)| c.min(r.get(g).copied().unwrap_or(0)))
        .sum();
    (matched, hyp.len().saturating_sub(n - 1))
}

/// Sentence-level BLEU over whitespace tokens of the normalized strings.
///
/// Orders for which the hypothesis has no n-grams are left out of the
/// geometric mean; a zero match count is floored at 1e-9.
pub fn bleu(hypothesis: &str, reference: &str, max_n: usize) -> f64 {
    let hyp = words(hypothesis);
    if hyp.is_empty() {
        log::warn!("empty hypothesis scores BLEU 0");
        return 0.0;
    }
    let reference = words(reference);
    let mut log_sum = 0.0;
    let mut orders = 0;
    for n in 1..=max_n.max(1) {
        let (matched, total) = overlap(&hyp, &reference, n);
        if total == 0 {
            continue;
        }
        let m = if matched == 0 { SMOOTHING } else { matched as f64 };
        log_sum += (m / total as f64).ln();
        orders += 1;
    }
    let (h, r) = (hyp.len() as f64, reference.len() as f64);
    let bp = if h < r { (1.0 - r / h).exp() } else { 1.0 };
    (bp * (log_sum / orders as f64).exp()).clamp(0.0, 1.0)
}

/// ROUGE-N F-measure.
pub fn rouge_n(hypothesis: &str, reference: &str, n: usize) -> f64 {
    let hyp = words(hypothesis);
    let reference = words(reference);
    let (matched, hyp_total) = overlap(&hyp, &reference, n);
    let ref_total = reference.len().saturating_sub(n.max(1) - 1);
    if matched == 0 || hyp_total == 0 || ref_total == 0 {
        return 0.0;
    }
    let p = matched as f64 / hyp_total as f64;
    let r = matched as f64 / ref_total as f64;
    2.0 * p * r / (p + r)
}

/// Harmonic mean of a BLEU and a ROUGE score.
pub fn f1_bleu_rouge(b: f64, r: f64) -> f64 {
    if b + r == 0.0 {
        0.0
    } else {
        2.0 * b * r / (b + r)
    }
}

pub fn accuracy<T: PartialEq>(predictions: &[T], golds: &[T]) -> Result<f64> {
    if predictions.len() != golds.len() {
        return Err(Error::Validation(format!(
            "{} predictions for {} labels",
            predictions.len(),
            golds.len()
        )));
    }
    if golds.is_empty() {
        return Err(Error::Validation("accuracy of an empty set".into()));
    }
    let hits = predictions.iter().zip(golds).filter(|(p, g)| p == g).count();
    Ok(hits as f64 / golds.len() as f64)
}
