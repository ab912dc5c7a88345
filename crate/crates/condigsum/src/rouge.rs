//! N-gram overlap and longest-common-subsequence scores for summary quality.
//!
//! Scores are returned as precision / recall / F1 triples. `rouge_n` counts
//! clipped n-gram overlap (each reference n-gram can be matched at most as
//! often as it occurs in the reference); `rouge_l` uses the length of the
//! longest common subsequence. Empty inputs yield all-zero scores, never NaN.

use std::collections::HashMap;
use std::hash::Hash;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RougeError {
    #[error("n-gram order must be at least 1")]
    ZeroOrder,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RougeScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl RougeScore {
    fn from_counts(overlap: usize, candidate_total: usize, reference_total: usize) -> Self {
        let precision = ratio(overlap, candidate_total);
        let recall = ratio(overlap, reference_total);
        RougeScore {
            precision,
            recall,
            f1: harmonic_mean(precision, recall),
        }
    }

    pub const ZERO: RougeScore = RougeScore {
        precision: 0.0,
        recall: 0.0,
        f1: 0.0,
    };
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn harmonic_mean(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Multiset of n-gram occurrences, keyed by the n-token window.
///
/// Sequences shorter than `n` produce an empty map; `n = 0` is rejected.
pub fn ngram_counts<T: Eq + Hash>(
    tokens: &[T],
    n: usize,
) -> Result<HashMap<&[T], usize>, RougeError> {
    if n == 0 {
        return Err(RougeError::ZeroOrder);
    }
    let mut counts: HashMap<&[T], usize> = HashMap::new();
    if tokens.len() >= n {
        for gram in tokens.windows(n) {
            *counts.entry(gram).or_insert(0) += 1;
        }
    }
    Ok(counts)
}

/// ROUGE-N: clipped n-gram overlap between a candidate and a reference.
///
/// Recall is overlap over reference n-gram count, precision over candidate
/// n-gram count, so `rouge_n(x, y, n).recall == rouge_n(y, x, n).precision`.
pub fn rouge_n<T: Eq + Hash>(
    candidate: &[T],
    reference: &[T],
    n: usize,
) -> Result<RougeScore, RougeError> {
    let cand = ngram_counts(candidate, n)?;
    let refr = ngram_counts(reference, n)?;
    let cand_total: usize = cand.values().sum();
    let ref_total: usize = refr.values().sum();
    let overlap: usize = refr
        .iter()
        .map(|(gram, &rc)| rc.min(cand.get(gram).copied().unwrap_or(0)))
        .sum();
    Ok(RougeScore::from_counts(overlap, cand_total, ref_total))
}

/// ROUGE-L: precision and recall of the longest common subsequence length
/// against the candidate and reference lengths.
pub fn rouge_l<T: Eq>(candidate: &[T], reference: &[T]) -> RougeScore {
    let lcs = lcs_len(candidate, reference);
    RougeScore::from_counts(lcs, candidate.len(), reference.len())
}

fn lcs_len<T: Eq>(a: &[T], b: &[T]) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    // One-row DP; prev_diag carries table[i-1][j-1] across the inner loop.
    let mut row = vec![0usize; b.len() + 1];
    for ai in a {
        let mut prev_diag = 0;
        for (j, bj) in b.iter().enumerate() {
            let cur = row[j + 1];
            row[j + 1] = if ai == bj {
                prev_diag + 1
            } else {
                row[j + 1].max(row[j])
            };
            prev_diag = cur;
        }
    }
    row[b.len()]
}
