//! Corpus-level tokenized BLEU (single reference, no smoothing,
//! case-sensitive), matching the usual multi-bleu convention.

use crate::error::{Error, Result};
use std::collections::HashMap;

const MAX_ORDER: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct BleuReport {
    /// 0..=100
    pub bleu: f64,
    /// clipped n-gram precisions p1..p4, each in [0, 1]
    pub precisions: [f64; MAX_ORDER],
    pub brevity_penalty: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
}

impl BleuReport {
    /// The one-line report emitted by the scoring command.
    pub fn format_line(&self) -> String {
        format!(
            "BLEU = {:.2}, {:.1}/{:.1}/{:.1}/{:.1} (BP={:.3}, hyp_len={}, ref_len={})",
            self.bleu,
            self.precisions[0] * 100.0,
            self.precisions[1] * 100.0,
            self.precisions[2] * 100.0,
            self.precisions[3] * 100.0,
            self.brevity_penalty,
            self.hyp_len,
            self.ref_len
        )
    }
}

/// All contiguous n-grams of `tokens` with multiplicity. Shorter-than-n
/// inputs yield an empty map.
pub fn ngram_counts<S: AsRef<str>>(tokens: &[S], n: usize) -> HashMap<Vec<String>, u64> {
    assert!(n >= 1, "n-gram order must be >= 1");
    let mut counts = HashMap::new();
    if tokens.len() < n {
        return counts;
    }
    for window in tokens.windows(n) {
        let gram: Vec<String> = window.iter().map(|t| t.as_ref().to_string()).collect();
        *counts.entry(gram).or_insert(0) += 1;
    }
    counts
}

/// Corpus-level BLEU over whitespace-tokenized lines, one reference per
/// hypothesis. Any zero n-gram precision zeroes the score.
pub fn corpus_bleu<S: AsRef<str>>(hypotheses: &[S], references: &[S]) -> Result<BleuReport> {
    if hypotheses.len() != references.len() {
        return Err(Error::Data(format!(
            "line count mismatch {} vs {}",
            hypotheses.len(),
            references.len()
        )));
    }
    if hypotheses.is_empty() {
        return Err(Error::Data("empty corpus".into()));
    }

    let mut correct = [0u64; MAX_ORDER];
    let mut total = [0u64; MAX_ORDER];
    let mut hyp_len = 0usize;
    let mut ref_len = 0usize;

    for (hyp, reference) in hypotheses.iter().zip(references) {
        let hyp_tokens: Vec<&str> = hyp.as_ref().split_whitespace().collect();
        let ref_tokens: Vec<&str> = reference.as_ref().split_whitespace().collect();
        hyp_len += hyp_tokens.len();
        ref_len += ref_tokens.len();
        for n in 1..=MAX_ORDER {
            let hyp_grams = ngram_counts(&hyp_tokens, n);
            let ref_grams = ngram_counts(&ref_tokens, n);
            for (gram, count) in &hyp_grams {
                let clip = ref_grams.get(gram).copied().unwrap_or(0);
                correct[n - 1] += count.min(&clip);
                total[n - 1] += count;
            }
        }
    }

    // An order with no hypothesis n-grams at all is neutral (precision 1)
    // rather than zero, so identical corpora of short lines still score 100.
    let mut precisions = [1.0; MAX_ORDER];
    for n in 0..MAX_ORDER {
        if total[n] > 0 {
            precisions[n] = correct[n] as f64 / total[n] as f64;
        }
    }

    let brevity_penalty = if hyp_len == 0 {
        0.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp().min(1.0)
    };

    let bleu = if precisions.iter().any(|&p| p == 0.0) {
        0.0
    } else {
        let log_mean = precisions.iter().map(|p| p.ln()).sum::<f64>() / MAX_ORDER as f64;
        100.0 * brevity_penalty * log_mean.exp()
    };

    Ok(BleuReport {
        bleu,
        precisions,
        brevity_penalty,
        hyp_len,
        ref_len,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unigram_counts_with_multiplicity() {
        let counts = ngram_counts(&["a", "b", "a"], 1);
        assert_eq!(counts[&vec!["a".to_string()]], 2);
        assert_eq!(counts[&vec!["b".to_string()]], 1);
    }

    #[test]
    fn short_input_has_no_ngrams() {
        assert!(ngram_counts(&["a", "b"], 3).is_empty());
    }

    #[test]
    fn repeated_bigrams_counted() {
        let counts = ngram_counts(&["a", "a", "a"], 2);
        assert_eq!(counts[&vec!["a".to_string(), "a".to_string()]], 2);
    }

    #[test]
    fn identical_corpus_scores_100() {
        let lines = ["the cat sat on the mat", "ein kleiner test satz hier"];
        let report = corpus_bleu(&lines, &lines).unwrap();
        assert!((report.bleu - 100.0).abs() < 1e-9);
        assert_eq!(report.brevity_penalty, 1.0);
    }

    #[test]
    fn empty_hypotheses_score_zero() {
        let report = corpus_bleu(&["", ""], &["a b c", "d e f"]).unwrap();
        assert_eq!(report.bleu, 0.0);
    }

    #[test]
    fn hand_derived_five_token_example() {
        // p = (5/5, 3/4, 2/3, 1/2), BP = e^{-0.2}
        let report =
            corpus_bleu(&["the cat sat on mat"], &["the cat sat on the mat"]).unwrap();
        assert_eq!(report.precisions[0], 1.0);
        assert_eq!(report.precisions[1], 0.75);
        assert!((report.precisions[2] - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(report.precisions[3], 0.5);
        assert!((report.brevity_penalty - (-0.2f64).exp()).abs() < 1e-12);
        let expected = 100.0 * (-0.2f64).exp() * (0.75f64 * 2.0 / 3.0 * 0.5).powf(0.25);
        assert!((report.bleu - expected).abs() < 1e-9);
        assert!((report.bleu - 57.89).abs() < 0.01, "bleu = {}", report.bleu);
    }

    #[test]
    fn clipping_limits_repeated_tokens() {
        // "the the the" vs "the cat": clipped unigram count is 1
        let report = corpus_bleu(&["the the the"], &["the cat"]).unwrap();
        assert!((report.precisions[0] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn line_count_mismatch_errors() {
        assert!(corpus_bleu(&["a", "b"], &["a"]).is_err());
    }

    #[test]
    fn empty_corpus_errors() {
        let none: [&str; 0] = [];
        assert!(corpus_bleu(&none, &none).is_err());
    }

    #[test]
    fn corpus_level_is_not_mean_of_sentence_level() {
        let hyps = ["a b c d", "x y"];
        let refs = ["a b c d", "x z"];
        // sentence-level: 100 and 0, mean 50
        let s1 = corpus_bleu(&hyps[..1], &refs[..1]).unwrap().bleu;
        let s2 = corpus_bleu(&hyps[1..], &refs[1..]).unwrap().bleu;
        assert_eq!(s1, 100.0);
        assert_eq!(s2, 0.0);
        let pooled = corpus_bleu(&hyps, &refs).unwrap().bleu;
        assert!((pooled - 50.0).abs() > 10.0, "pooled = {pooled}");
    }

    #[test]
    fn report_line_format() {
        let line = corpus_bleu(&["a b"], &["a b"]).unwrap().format_line();
        assert_eq!(
            line,
            "BLEU = 100.00, 100.0/100.0/100.0/100.0 (BP=1.000, hyp_len=2, ref_len=2)"
        );
    }
}
