//! Contrastive pair construction.
//!
//! Both auxiliary objectives train on snippet pairs cut from a dialogue:
//!
//! * coherence pairs: a window of consecutive utterances in original order
//!   against the same window with its utterances shuffled;
//! * sub-summary pairs: for one summary sentence, the candidate window that
//!   covers it best (by bigram recall) against a random other candidate.
//!
//! Candidate windows slide over the dialogue with a stride of half the
//! window size, for every window size in a configured range.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{DialogueRecord, SubSummary};
use crate::rouge;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PairError {
    #[error("dialogue '{dialogue_id}': no candidate snippets for sub-summary {sub_index}")]
    Unselectable {
        dialogue_id: String,
        sub_index: usize,
    },
}

/// A window of `length` consecutive utterances starting at `start`, read in
/// `utterance_order` (a permutation of `0..length`; identity for positives).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Snippet {
    pub dialogue_id: String,
    pub start: usize,
    pub length: usize,
    pub utterance_order: Vec<usize>,
}

impl Snippet {
    fn contiguous(dialogue_id: &str, start: usize, length: usize) -> Self {
        Snippet {
            dialogue_id: dialogue_id.to_string(),
            start,
            length,
            utterance_order: (0..length).collect(),
        }
    }

    pub fn is_ordered(&self) -> bool {
        self.utterance_order.iter().copied().eq(0..self.length)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoherencePair {
    pub positive: Snippet,
    pub negative: Snippet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubSummaryPair {
    pub sub_summary: SubSummary,
    pub positive: Snippet,
    pub negative: Snippet,
    pub positive_recall: f64,
}

/// Result of picking the best-covering candidate window for a sub-summary.
#[derive(Debug, Clone, PartialEq)]
pub struct SnippetSelection {
    pub positive: Snippet,
    pub candidates: Vec<Snippet>,
    pub recall: f64,
}

/// All candidate windows: sizes `a..=min(b, |dialogue|)`, each sliding from
/// utterance 0 with stride `max(1, w/2)` while it fits. Ordered by window
/// size, then start. Degenerate ranges (`a == 0` or `a > b`) yield nothing.
pub fn enumerate_snippets(dialogue: &DialogueRecord, a: usize, b: usize) -> Vec<Snippet> {
    let n = dialogue.utterances.len();
    let mut out = Vec::new();
    if a == 0 || a > b {
        return out;
    }
    for w in a..=b.min(n) {
        let stride = (w / 2).max(1);
        let mut start = 0;
        while start + w <= n {
            out.push(Snippet::contiguous(&dialogue.id, start, w));
            start += stride;
        }
    }
    out
}

/// Word stream of a snippet: the words of its utterances, visited in
/// `utterance_order`.
pub fn snippet_words(dialogue: &DialogueRecord, snippet: &Snippet) -> Vec<String> {
    let mut words = Vec::new();
    for &offset in &snippet.utterance_order {
        let utt = &dialogue.utterances[snippet.start + offset];
        words.extend(crate::corpus::utterance_words(utt));
    }
    words
}

/// Pick the candidate window with the highest bigram recall against the
/// sub-summary. Ties fall to the smaller window, then the smaller start
/// (the enumeration order). Errors when the dialogue yields no candidates.
pub fn select_positive_snippet(
    sub_summary: &SubSummary,
    dialogue: &DialogueRecord,
    a: usize,
    b: usize,
) -> Result<SnippetSelection, PairError> {
    let candidates = enumerate_snippets(dialogue, a, b);
    if candidates.is_empty() {
        return Err(PairError::Unselectable {
            dialogue_id: dialogue.id.clone(),
            sub_index: sub_summary.index,
        });
    }
    let sub_words = crate::corpus::tokenize(&sub_summary.text);
    let mut best = 0usize;
    let mut best_recall = f64::NEG_INFINITY;
    for (i, cand) in candidates.iter().enumerate() {
        let words = snippet_words(dialogue, cand);
        let recall = rouge::rouge_n(&words, &sub_words, 2)
            .expect("bigram order is nonzero")
            .recall;
        if recall > best_recall {
            best_recall = recall;
            best = i;
        }
    }
    Ok(SnippetSelection {
        positive: candidates[best].clone(),
        candidates,
        recall: best_recall,
    })
}

/// Sample coherence pairs: windows of (at most) `k` consecutive utterances
/// at distinct random starts, each paired with a non-identity shuffle of
/// itself. `k` is clamped to the dialogue length; windows shorter than two
/// utterances cannot be shuffled and yield nothing. A shuffle that comes out
/// as the identity is redrawn up to 16 times, then that pair is skipped.
pub fn make_coherence_pairs<R: Rng>(
    dialogue: &DialogueRecord,
    k: usize,
    n_pairs: usize,
    rng: &mut R,
) -> Vec<CoherencePair> {
    let n = dialogue.utterances.len();
    let k_eff = k.min(n);
    if k_eff < 2 || n_pairs == 0 {
        return Vec::new();
    }
    let mut starts: Vec<usize> = (0..=n - k_eff).collect();
    starts.shuffle(rng);
    starts.truncate(n_pairs);
    let mut out = Vec::new();
    for start in starts {
        if let Some(order) = non_identity_permutation(k_eff, rng) {
            let positive = Snippet::contiguous(&dialogue.id, start, k_eff);
            let negative = Snippet {
                utterance_order: order,
                ..positive.clone()
            };
            out.push(CoherencePair { positive, negative });
        }
    }
    out
}

fn non_identity_permutation<R: Rng>(len: usize, rng: &mut R) -> Option<Vec<usize>> {
    let identity: Vec<usize> = (0..len).collect();
    for _ in 0..16 {
        let mut order = identity.clone();
        order.shuffle(rng);
        if order != identity {
            return Some(order);
        }
    }
    None
}

/// Sample sub-summary pairs: up to `n_pairs` distinct sub-summaries, each
/// with its best-covering window as positive and a uniformly random other
/// candidate as negative. Dialogues with fewer than two candidate windows
/// yield nothing.
pub fn make_subsummary_pairs<R: Rng>(
    dialogue: &DialogueRecord,
    subs: &[SubSummary],
    a: usize,
    b: usize,
    n_pairs: usize,
    rng: &mut R,
) -> Vec<SubSummaryPair> {
    let candidates = enumerate_snippets(dialogue, a, b);
    if candidates.len() < 2 || subs.is_empty() || n_pairs == 0 {
        return Vec::new();
    }
    let mut picks: Vec<usize> = (0..subs.len()).collect();
    picks.shuffle(rng);
    picks.truncate(n_pairs);
    let mut out = Vec::with_capacity(picks.len());
    for sub_idx in picks {
        let sub = &subs[sub_idx];
        let selection = select_positive_snippet(sub, dialogue, a, b)
            .expect("candidates were checked non-empty");
        let pos_at = selection
            .candidates
            .iter()
            .position(|c| *c == selection.positive)
            .expect("positive comes from the candidate list");
        let mut neg_at = rng.gen_range(0..selection.candidates.len() - 1);
        if neg_at >= pos_at {
            neg_at += 1;
        }
        out.push(SubSummaryPair {
            sub_summary: sub.clone(),
            positive: selection.positive,
            negative: selection.candidates[neg_at].clone(),
            positive_recall: selection.recall,
        });
    }
    out
}
