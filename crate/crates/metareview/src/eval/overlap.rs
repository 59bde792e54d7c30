//! Word overlap between extracted fragments and gold fragment annotations —
//! a direct measure of the identification stage, independent of the later
//! summarization stages.

use serde::{Deserialize, Serialize};

use super::tokens::tokenize;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OverlapScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OverlapSemantics {
    /// Each word counts as often as it appears (bag of words). Default.
    Multiset,
    /// Each distinct word counts once.
    Set,
}

fn count_tokens(fragments: &[String], semantics: OverlapSemantics, stem: bool) -> std::collections::HashMap<String, i64> {
    let mut counts = std::collections::HashMap::new();
    for fragment in fragments {
        for token in tokenize(fragment, stem) {
            let entry = counts.entry(token).or_insert(0);
            match semantics {
                OverlapSemantics::Multiset => *entry += 1,
                OverlapSemantics::Set => *entry = 1,
            }
        }
    }
    counts
}

/// Precision/recall/F1 of predicted fragment words against gold fragment
/// words, pooled over all fragments of the aspect. Both sides empty means
/// perfect agreement (1,1,1); zero-denominator ratios are 0.
pub fn fragment_overlap(
    predicted: &[String],
    gold: &[String],
    semantics: OverlapSemantics,
    stem: bool,
) -> OverlapScores {
    let predicted_counts = count_tokens(predicted, semantics, stem);
    let gold_counts = count_tokens(gold, semantics, stem);
    let predicted_total: i64 = predicted_counts.values().sum();
    let gold_total: i64 = gold_counts.values().sum();
    if predicted_total == 0 && gold_total == 0 {
        return OverlapScores {
            precision: 1.0,
            recall: 1.0,
            f1: 1.0,
        };
    }
    let shared: i64 = predicted_counts
        .iter()
        .filter_map(|(token, count)| gold_counts.get(token).map(|g| (*count).min(*g)))
        .sum();
    let ratio = |num: i64, den: i64| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    let precision = ratio(shared, predicted_total);
    let recall = ratio(shared, gold_total);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    OverlapScores { precision, recall, f1 }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn strings(items: &[&str]) -> Vec<String> {
        items.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn hand_computed_anchor() {
        // 4 words each side, 3 shared ("the", "proof", "is"):
        // P = R = F1 = 3/4 exactly.
        let scores = fragment_overlap(
            &strings(&["the proof is wrong"]),
            &strings(&["the proof is incomplete"]),
            OverlapSemantics::Multiset,
            false,
        );
        assert_eq!(scores.precision, 0.75);
        assert_eq!(scores.recall, 0.75);
        assert_eq!(scores.f1, 0.75);
    }

    #[test]
    fn empty_side_edge_cases() {
        let none: Vec<String> = vec![];
        let some = strings(&["a word"]);
        let both_empty = fragment_overlap(&none, &none, OverlapSemantics::Multiset, false);
        assert_eq!((both_empty.precision, both_empty.recall, both_empty.f1), (1.0, 1.0, 1.0));
        let one_empty = fragment_overlap(&none, &some, OverlapSemantics::Multiset, false);
        assert_eq!((one_empty.precision, one_empty.recall, one_empty.f1), (0.0, 0.0, 0.0));
    }

    #[test]
    fn multiset_clips_but_set_ignores_repetition() {
        let predicted = strings(&["a a b"]);
        let gold = strings(&["a b"]);
        // Multiset: shared = min(2,1) + min(1,1) = 2; P = 2/3, R = 1.
        let multi = fragment_overlap(&predicted, &gold, OverlapSemantics::Multiset, false);
        assert!((multi.precision - 2.0 / 3.0).abs() < 1e-9);
        assert_eq!(multi.recall, 1.0);
        assert!((multi.f1 - 0.8).abs() < 1e-9);
        // Set: both sides are {a, b}.
        let set = fragment_overlap(&predicted, &gold, OverlapSemantics::Set, false);
        assert_eq!((set.precision, set.recall, set.f1), (1.0, 1.0, 1.0));
    }

    #[test]
    fn pooling_spans_fragment_boundaries() {
        // The same words split across fragments count the same as together.
        let split = fragment_overlap(
            &strings(&["the proof", "is wrong"]),
            &strings(&["the proof is wrong"]),
            OverlapSemantics::Multiset,
            false,
        );
        assert_eq!(split.f1, 1.0);
    }

    proptest! {
        /// Swapping prediction and gold swaps precision and recall and
        /// leaves F1 unchanged.
        #[test]
        fn swap_symmetry(
            a in proptest::collection::vec("[a-c ]{0,12}", 0..4),
            b in proptest::collection::vec("[a-c ]{0,12}", 0..4),
        ) {
            let fwd = fragment_overlap(&a, &b, OverlapSemantics::Multiset, false);
            let rev = fragment_overlap(&b, &a, OverlapSemantics::Multiset, false);
            prop_assert!((fwd.precision - rev.recall).abs() < 1e-12);
            prop_assert!((fwd.recall - rev.precision).abs() < 1e-12);
            prop_assert!((fwd.f1 - rev.f1).abs() < 1e-12);
        }
    }
}
