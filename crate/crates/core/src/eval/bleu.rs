//! Corpus-level BLEU-4 over pre-tokenized segments.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAX_ORDER: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Smoothing {
    #[default]
    None,
    /// Add one to matches and totals for n ≥ 2.
    AddOne,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BleuScore {
    pub score: f64,
    /// Modified (clipped) n-gram precisions for n = 1..4, unsmoothed.
    pub precisions: [f64; MAX_ORDER],
    pub brevity_penalty: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
}

/// Sufficient statistics; corpus BLEU is computed from their sums.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BleuStats {
    pub matches: [usize; MAX_ORDER],
    pub totals: [usize; MAX_ORDER],
    pub hyp_len: usize,
    pub ref_len: usize,
}

impl BleuStats {
    pub fn segment<S: AsRef<str> + Eq + std::hash::Hash>(hyp: &[S], reference: &[S]) -> Self {
        let mut s = BleuStats {
            hyp_len: hyp.len(),
            ref_len: reference.len(),
            ..BleuStats::default()
        };
        for n in 1..=MAX_ORDER {
            let ref_counts = ngram_counts(reference, n);
            for (gram, c) in ngram_counts(hyp, n) {
                s.matches[n - 1] += c.min(ref_counts.get(&gram).copied().unwrap_or(0));
            }
            s.totals[n - 1] = hyp.len().saturating_sub(n - 1);
        }
        s
    }

    pub fn add(&mut self, other: &BleuStats) {
        for n in 0..MAX_ORDER {
            self.matches[n] += other.matches[n];
            self.totals[n] += other.totals[n];
        }
        self.hyp_len += other.hyp_len;
        self.ref_len += other.ref_len;
    }

    /// Orders with no hypothesis n-grams at all are left out of the
    /// geometric mean, so very short corpora can still score.
    pub fn score(&self, smoothing: Smoothing) -> BleuScore {
        let mut precisions = [0.0; MAX_ORDER];
        for n in 0..MAX_ORDER {
            if self.totals[n] > 0 {
                precisions[n] = self.matches[n] as f64 / self.totals[n] as f64;
            }
        }
        let brevity_penalty = if self.hyp_len == 0 {
            0.0
        } else if self.hyp_len >= self.ref_len {
            1.0
        } else {
            (1.0 - self.ref_len as f64 / self.hyp_len as f64).exp()
        };
        let mut log_sum = 0.0;
        let mut orders = 0;
        let mut zero = self.hyp_len == 0;
        for n in 0..MAX_ORDER {
            if self.totals[n] == 0 {
                continue;
            }
            let (m, t) = match smoothing {
                Smoothing::AddOne if n > 0 => (self.matches[n] + 1, self.totals[n] + 1),
                _ => (self.matches[n], self.totals[n]),
            };
            if m == 0 {
                zero = true;
                break;
            }
            log_sum += (m as f64 / t as f64).ln();
            orders += 1;
        }
        let score = if zero || orders == 0 {
            0.0
        } else {
            100.0 * brevity_penalty * (log_sum / orders as f64).exp()
        };
        BleuScore {
            score,
            precisions,
            brevity_penalty,
            hyp_len: self.hyp_len,
            ref_len: self.ref_len,
        }
    }
}

fn ngram_counts<S: AsRef<str> + Eq + std::hash::Hash>(tokens: &[S], n: usize) -> HashMap<&[S], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Unsmoothed corpus BLEU.
pub fn bleu<S: AsRef<str> + Eq + std::hash::Hash>(hypotheses: &[Vec<S>], references: &[Vec<S>]) -> Result<BleuScore> {
    bleu_with(hypotheses, references, Smoothing::None)
}

pub fn bleu_with<S: AsRef<str> + Eq + std::hash::Hash>(
    hypotheses: &[Vec<S>],
    references: &[Vec<S>],
    smoothing: Smoothing,
) -> Result<BleuScore> {
    if hypotheses.len() != references.len() {
        return Err(Error::Bleu(format!(
            "{} hypotheses but {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    if hypotheses.is_empty() {
        return Err(Error::Bleu("empty corpus".into()));
    }
    let mut total = BleuStats::default();
    for (h, r) in hypotheses.iter().zip(references) {
        total.add(&BleuStats::segment(h, r));
    }
    Ok(total.score(smoothing))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    #[test]
    fn identity_is_exactly_100() {
        let segs = vec![toks("the cat sat on the mat"), toks("a dog ran in the park today")];
        let b = bleu(&segs, &segs).unwrap();
        assert_eq!(b.score, 100.0);
        assert_eq!(b.brevity_penalty, 1.0);
    }

    #[test]
    fn clipped_unigram_precision() {
        let b = bleu(&[toks("the the the the the the the")], &[toks("the cat is on the mat")]).unwrap();
        assert!((b.precisions[0] - 2.0 / 7.0).abs() < 1e-12);
        assert_eq!(b.score, 0.0);
    }

    #[test]
    fn empty_hypothesis_scores_zero() {
        let b = bleu(&[toks("")], &[toks("a b c d")]).unwrap();
        assert_eq!(b.score, 0.0);
        assert_eq!(b.hyp_len, 0);
    }

    #[test]
    fn length_mismatch_and_empty_corpus_error() {
        assert!(bleu(&[toks("a")], &[]).is_err());
        assert!(bleu::<String>(&[], &[]).is_err());
    }

    #[test]
    fn short_hypothesis_gets_brevity_penalty() {
        let b = bleu(&[toks("a b c d")], &[toks("a b c d e f g h")]).unwrap();
        assert!((b.brevity_penalty - (-1.0f64).exp()).abs() < 1e-12);
        assert!((b.score - 100.0 * (-1.0f64).exp()).abs() < 1e-9);
    }

    #[test]
    fn add_one_smoothing_rescues_missing_higher_orders() {
        let h = [toks("a b x c d y")];
        let r = [toks("a b z c d w")];
        assert_eq!(bleu(&h, &r).unwrap().score, 0.0);
        assert!(bleu_with(&h, &r, Smoothing::AddOne).unwrap().score > 0.0);
    }
}
