//! ROUGE F1 against a reference meta-review.

use serde::{Deserialize, Serialize};

use super::tokens::tokenize;
use super::EvalError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RougeScores {
    pub rouge1: f64,
    pub rouge2: f64,
    pub rouge_l: f64,
    /// Arithmetic mean of the three — the single number reported.
    pub mean: f64,
}

fn f1(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

fn ratio(numerator: usize, denominator: usize) -> f64 {
    if denominator == 0 {
        0.0
    } else {
        numerator as f64 / denominator as f64
    }
}

/// Multiset n-gram overlap F1: each shared n-gram counts as many times as it
/// appears on both sides (the minimum of the two counts).
fn rouge_n(pred: &[String], reference: &[String], n: usize) -> f64 {
    if pred.len() < n || reference.len() < n {
        return 0.0;
    }
    let mut counts: std::collections::HashMap<&[String], i64> = std::collections::HashMap::new();
    for gram in reference.windows(n) {
        *counts.entry(gram).or_insert(0) += 1;
    }
    let mut overlap = 0usize;
    for gram in pred.windows(n) {
        if let Some(count) = counts.get_mut(gram) {
            if *count > 0 {
                *count -= 1;
                overlap += 1;
            }
        }
    }
    let precision = ratio(overlap, pred.len() - n + 1);
    let recall = ratio(overlap, reference.len() - n + 1);
    f1(precision, recall)
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    // One-row dynamic program; prev tracks the diagonal.
    let mut row = vec![0usize; b.len() + 1];
    for token in a {
        let mut prev = 0;
        for (j, other) in b.iter().enumerate() {
            let diag = prev;
            prev = row[j + 1];
            row[j + 1] = if token == other {
                diag + 1
            } else {
                row[j + 1].max(row[j])
            };
        }
    }
    row[b.len()]
}

fn rouge_lcs(pred: &[String], reference: &[String]) -> f64 {
    let lcs = lcs_len(pred, reference);
    f1(ratio(lcs, pred.len()), ratio(lcs, reference.len()))
}

/// ROUGE-1, ROUGE-2 and ROUGE-L F1 of `generated` against `reference`, plus
/// their mean. An empty (or token-free) reference is an error: scoring
/// against nothing is a data problem, not a zero.
pub fn rouge(generated: &str, reference: &str, stem: bool) -> Result<RougeScores, EvalError> {
    let reference_tokens = tokenize(reference, stem);
    if reference_tokens.is_empty() {
        return Err(EvalError::EmptyReference);
    }
    let generated_tokens = tokenize(generated, stem);
    let rouge1 = rouge_n(&generated_tokens, &reference_tokens, 1);
    let rouge2 = rouge_n(&generated_tokens, &reference_tokens, 2);
    let rouge_l = rouge_lcs(&generated_tokens, &reference_tokens);
    Ok(RougeScores {
        rouge1,
        rouge2,
        rouge_l,
        mean: (rouge1 + rouge2 + rouge_l) / 3.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_computed_anchor() {
        // pred tokens [the, cat], ref tokens [the, cat, sat]:
        //   R1: overlap 2, P = 2/2, R = 2/3, F1 = 0.8
        //   R2: overlap 1 of pred-bigrams 1 / ref-bigrams 2, F1 = 2/3
        //   RL: LCS 2, same as R1 = 0.8
        //   mean = (0.8 + 2/3 + 0.8) / 3 = 0.755555...
        let scores = rouge("the cat", "the cat sat", false).unwrap();
        assert!((scores.rouge1 - 0.8).abs() < 1e-9);
        assert!((scores.rouge2 - 2.0 / 3.0).abs() < 1e-9);
        assert!((scores.rouge_l - 0.8).abs() < 1e-9);
        assert!((scores.mean - 0.7555555555555555).abs() < 1e-9);
    }

    #[test]
    fn identical_texts_score_one() {
        let scores = rouge("a b c d", "a b c d", false).unwrap();
        assert_eq!(scores.rouge1, 1.0);
        assert_eq!(scores.rouge2, 1.0);
        assert_eq!(scores.rouge_l, 1.0);
        assert_eq!(scores.mean, 1.0);
    }

    #[test]
    fn repeated_ngrams_are_clipped() {
        // pred [a a a], ref [a]: overlap clipped to 1, P = 1/3, R = 1, F1 = 0.5.
        let scores = rouge("a a a", "a", false).unwrap();
        assert!((scores.rouge1 - 0.5).abs() < 1e-9);
        // ROUGE-2 has no reference bigrams: zero by the 0-denominator rule.
        assert_eq!(scores.rouge2, 0.0);
    }

    #[test]
    fn disjoint_texts_score_zero_and_empty_reference_errors() {
        let scores = rouge("x y", "a b", false).unwrap();
        assert_eq!(scores.mean, 0.0);
        assert!(matches!(rouge("x", "", false), Err(EvalError::EmptyReference)));
        assert!(matches!(rouge("x", "!!!", false), Err(EvalError::EmptyReference)));
        // Empty generated text scores zero, not an error.
        assert_eq!(rouge("", "a b", false).unwrap().mean, 0.0);
    }

    #[test]
    fn lcs_respects_order() {
        // pred [c b a] vs ref [a b c]: LCS is length 1.
        let scores = rouge("c b a", "a b c", false).unwrap();
        assert!((scores.rouge_l - (2.0 * (1.0 / 3.0) * (1.0 / 3.0)) / (2.0 / 3.0)).abs() < 1e-9);
        // But ROUGE-1 sees full unigram overlap.
        assert_eq!(scores.rouge1, 1.0);
    }

    #[test]
    fn stemming_is_off_by_default_and_changes_scores_when_on() {
        let plain = rouge("good dogs", "good dog", false).unwrap();
        let stemmed = rouge("good dogs", "good dog", true).unwrap();
        assert!((plain.rouge1 - 0.5).abs() < 1e-9);
        assert_eq!(stemmed.rouge1, 1.0);
    }
}
