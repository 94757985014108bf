//! Sentence-level smoothed BLEU-4 against a single reference.

use std::collections::HashMap;
use std::hash::Hash;

use serde::{Deserialize, Serialize};

pub const MAX_ORDER: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BleuComponents {
    pub candidate_len: usize,
    pub reference_len: usize,
    /// Modified precisions for orders 1..=4; orders ≥ 2 are add-one smoothed.
    pub precisions: [f64; MAX_ORDER],
    pub weights: [f64; MAX_ORDER],
    pub brevity_penalty: f64,
}

impl BleuComponents {
    pub fn score(&self) -> f64 {
        if self.candidate_len == 0 || self.precisions.iter().any(|&p| p == 0.0) {
            return 0.0;
        }
        let log_sum: f64 = self
            .precisions
            .iter()
            .zip(&self.weights)
            .map(|(p, w)| w * p.ln())
            .sum();
        self.brevity_penalty * log_sum.exp()
    }
}

fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Clipped n-gram matches and the candidate n-gram total.
pub fn clipped_matches<T: Eq + Hash>(candidate: &[T], reference: &[T], n: usize) -> (usize, usize) {
    let cand = ngram_counts(candidate, n);
    let refs = ngram_counts(reference, n);
    let matched = cand
        .iter()
        .map(|(g, &c)| c.min(refs.get(g).copied().unwrap_or(0)))
        .sum();
    (matched, candidate.len().saturating_sub(n - 1))
}

pub fn brevity_penalty(c: usize, r: usize) -> f64 {
    if c == 0 {
        0.0
    } else if c > r {
        1.0
    } else {
        (1.0 - r as f64 / c as f64).exp()
    }
}

pub fn bleu_components<T: Eq + Hash>(candidate: &[T], reference: &[T]) -> BleuComponents {
    let mut precisions = [0.0; MAX_ORDER];
    for (k, p) in precisions.iter_mut().enumerate() {
        let n = k + 1;
        let (m, total) = clipped_matches(candidate, reference, n);
        *p = if n == 1 {
            if total == 0 {
                0.0
            } else {
                m as f64 / total as f64
            }
        } else {
            (m as f64 + 1.0) / (total as f64 + 1.0)
        };
    }
    BleuComponents {
        candidate_len: candidate.len(),
        reference_len: reference.len(),
        precisions,
        weights: [1.0 / MAX_ORDER as f64; MAX_ORDER],
        brevity_penalty: brevity_penalty(candidate.len(), reference.len()),
    }
}

pub fn smoothed_bleu4<T: Eq + Hash>(candidate: &[T], reference: &[T]) -> f64 {
    bleu_components(candidate, reference).score()
}

/// Mean sentence BLEU over aligned candidate/reference lists.
pub fn corpus_mean_bleu<T: Eq + Hash>(pairs: &[(Vec<T>, Vec<T>)]) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    pairs.iter().map(|(c, r)| smoothed_bleu4(c, r)).sum::<f64>() / pairs.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_is_one() {
        let s = ["a", "b", "c", "d", "e"];
        assert_eq!(smoothed_bleu4(&s, &s), 1.0);
    }

    #[test]
    fn brevity_example() {
        assert!((brevity_penalty(3, 6) - (-1.0f64).exp()).abs() < 1e-12);
        assert_eq!(brevity_penalty(7, 6), 1.0);
    }

    #[test]
    fn hand_computed_example() {
        let c = bleu_components(&["a", "b", "c"], &["a", "b", "d"]);
        assert_eq!(c.precisions, [2.0 / 3.0, 2.0 / 3.0, 0.5, 1.0]);
        assert_eq!(c.brevity_penalty, 1.0);
        let want = (0.25 * ((2.0f64 / 3.0).ln() * 2.0 + 0.5f64.ln())).exp();
        assert!((c.score() - want).abs() < 1e-12);
    }

    #[test]
    fn empty_candidate_is_zero() {
        assert_eq!(smoothed_bleu4::<&str>(&[], &["a"]), 0.0);
        assert_eq!(smoothed_bleu4(&["x"], &["a"]), 0.0);
    }
}
