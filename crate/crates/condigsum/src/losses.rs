//! Training objectives: summarization NLL plus the two contrastive
//! auxiliaries.
//!
//! The summarization loss is per-instance negative log-likelihood under
//! teacher forcing, summed over target positions, then averaged over the
//! batch. Both auxiliary losses compare a favored and an unfavored scalar
//! through a two-way softmax and apply a margin hinge
//! `max(0, δ − (p_favored − p_other))`:
//!
//! * coherence: the ordered snippet's regressor score should beat the
//!   shuffled snippet's (encoder-side parameters only — the decoder never
//!   appears in this graph);
//! * sub-summary: the NLL of generating a summary sentence from a random
//!   snippet should exceed the NLL from its best-matching snippet, so the
//!   favored softmax input is the negative snippet's NLL.
//!
//! Since `softmax([a, b]) = ((1+tanh((a−b)/2))/2, …)`, the softmax gap is
//! `tanh((a−b)/2) ∈ (−1, 1)`; at δ = 1 the hinge is always active and both
//! losses lie strictly inside (0, 2). Batch losses average per-dialogue
//! means (each dialogue's pairs first, then across dialogues that have
//! pairs).

use thiserror::Error;

use crate::corpus::{self, DialogueRecord, TokenSeq, Vocabulary, BOS, EOS};
use crate::model::{Mode, Model, ModelError};
use crate::pairs::{CoherencePair, Snippet, SubSummaryPair};
use crate::tensor::{Element, Tape, TensorError, Var};

/// Margin used by both contrastive hinges unless a config overrides it.
pub const DEFAULT_DELTA: f64 = 1.0;

#[derive(Debug, Error)]
pub enum LossError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("bad target sequence: {0}")]
    BadTarget(String),
    #[error("non-finite input to {0}")]
    NonFinite(&'static str),
    #[error("empty {0}")]
    Empty(&'static str),
}

/// Two-way softmax of plain scalars (the non-differentiable mirror of the
/// on-tape path, used by diagnostics and tests).
pub fn pairwise_softmax(a: f64, b: f64) -> Result<(f64, f64), LossError> {
    if !a.is_finite() || !b.is_finite() {
        return Err(LossError::NonFinite("pairwise_softmax"));
    }
    let m = a.max(b);
    let ea = (a - m).exp();
    let eb = (b - m).exp();
    let z = ea + eb;
    Ok((ea / z, eb / z))
}

/// Scalar mirror of the contrastive hinge:
/// `max(0, delta − (p_favored − p_other))` after a two-way softmax.
pub fn score_hinge(favored: f64, other: f64, delta: f64) -> Result<f64, LossError> {
    let (p_f, p_o) = pairwise_softmax(favored, other)?;
    Ok((delta - (p_f - p_o)).max(0.0))
}

/// On-tape contrastive hinge over two scalar nodes.
pub fn pair_hinge<F: Element>(
    tape: &mut Tape<F>,
    favored: Var,
    other: Var,
    delta: f64,
) -> Result<Var, TensorError> {
    let both = tape.concat_cols(&[favored, other])?;
    let sm = tape.softmax(both)?;
    let p_f = tape.slice_cols(sm, 0, 1)?;
    let p_o = tape.slice_cols(sm, 1, 1)?;
    let neg_po = tape.scale(p_o, -F::one());
    let gap = tape.add(p_f, neg_po)?;
    let neg_gap = tape.scale(gap, -F::one());
    let delta_node = tape.scalar(F::from_f64(delta));
    let margin = tape.add(delta_node, neg_gap)?;
    Ok(tape.relu(margin))
}

/// Teacher-forced negative log-likelihood of `target` given encoder
/// `memory`, summed over positions. `target` must be a full
/// `<bos> … <eos>` sequence.
pub fn sequence_nll<F: Element>(
    model: &Model<F>,
    tape: &mut Tape<F>,
    memory: Var,
    target: &TokenSeq,
    mode: &mut Mode,
) -> Result<Var, LossError> {
    let ids = &target.ids;
    if ids.len() < 2 {
        return Err(LossError::BadTarget(format!(
            "need at least <bos> and <eos>, got {} tokens",
            ids.len()
        )));
    }
    if ids[0] != BOS {
        return Err(LossError::BadTarget("target does not start with <bos>".into()));
    }
    if *ids.last().expect("non-empty") != EOS {
        return Err(LossError::BadTarget("target does not end with <eos>".into()));
    }
    let prefix = &ids[..ids.len() - 1];
    let gold = &ids[1..];
    let logits = model.decode_logits(tape, memory, prefix, mode)?;
    let logp = tape.log_softmax(logits)?;
    Ok(tape.nll_gather(logp, gold)?)
}

/// Mean per-instance NLL over a batch of (source, target) pairs.
pub fn main_batch_loss<F: Element>(
    model: &Model<F>,
    tape: &mut Tape<F>,
    batch: &[(&TokenSeq, &TokenSeq)],
    mode: &mut Mode,
) -> Result<Var, LossError> {
    if batch.is_empty() {
        return Err(LossError::Empty("summarization batch"));
    }
    let mut per_instance = Vec::with_capacity(batch.len());
    for (src, tgt) in batch {
        let memory = model.encode(tape, src, mode)?;
        per_instance.push(sequence_nll(model, tape, memory, tgt, mode)?);
    }
    let stacked = tape.concat_cols(&per_instance)?;
    Ok(tape.mean(stacked)?)
}

/// Token sequence of a snippet's utterances, read in its stored order.
pub fn snippet_tokens(
    dialogue: &DialogueRecord,
    snippet: &Snippet,
    vocab: &Vocabulary,
    max_positions: usize,
) -> TokenSeq {
    corpus::encode_utterances(
        snippet
            .utterance_order
            .iter()
            .map(|&o| &dialogue.utterances[snippet.start + o]),
        vocab,
        max_positions,
    )
}

/// Coherence hinge for one ordered/shuffled snippet pair. Only encoder-side
/// parameters appear in this graph.
pub fn coherence_pair_loss<F: Element>(
    model: &Model<F>,
    tape: &mut Tape<F>,
    dialogue: &DialogueRecord,
    pair: &CoherencePair,
    vocab: &Vocabulary,
    delta: f64,
    mode: &mut Mode,
) -> Result<Var, LossError> {
    let max_pos = model.config().max_positions;
    let pos_tokens = snippet_tokens(dialogue, &pair.positive, vocab, max_pos);
    let neg_tokens = snippet_tokens(dialogue, &pair.negative, vocab, max_pos);
    let mem_pos = model.encode(tape, &pos_tokens, mode)?;
    let score_pos = model.coherence_score(tape, mem_pos)?;
    let mem_neg = model.encode(tape, &neg_tokens, mode)?;
    let score_neg = model.coherence_score(tape, mem_neg)?;
    Ok(pair_hinge(tape, score_pos, score_neg, delta)?)
}

/// Sub-summary hinge for one best/random snippet pair: the random snippet's
/// generation NLL should exceed the best-matching snippet's.
pub fn subsummary_pair_loss<F: Element>(
    model: &Model<F>,
    tape: &mut Tape<F>,
    dialogue: &DialogueRecord,
    pair: &SubSummaryPair,
    vocab: &Vocabulary,
    delta: f64,
    mode: &mut Mode,
) -> Result<Var, LossError> {
    let max_pos = model.config().max_positions;
    let target = corpus::encode_target(&pair.sub_summary.text, vocab, max_pos);
    let pos_tokens = snippet_tokens(dialogue, &pair.positive, vocab, max_pos);
    let neg_tokens = snippet_tokens(dialogue, &pair.negative, vocab, max_pos);
    let mem_pos = model.encode(tape, &pos_tokens, mode)?;
    let nll_pos = sequence_nll(model, tape, mem_pos, &target, mode)?;
    let mem_neg = model.encode(tape, &neg_tokens, mode)?;
    let nll_neg = sequence_nll(model, tape, mem_neg, &target, mode)?;
    Ok(pair_hinge(tape, nll_neg, nll_pos, delta)?)
}

/// Mean over dialogues of each dialogue's mean pair loss. Dialogues without
/// pairs contribute nothing; `None` if no dialogue has pairs.
pub fn coherence_batch_loss<F: Element>(
    model: &Model<F>,
    tape: &mut Tape<F>,
    items: &[(&DialogueRecord, &[CoherencePair])],
    vocab: &Vocabulary,
    delta: f64,
    mode: &mut Mode,
) -> Result<Option<Var>, LossError> {
    let mut dialogue_means = Vec::new();
    for (dialogue, pairs) in items {
        if pairs.is_empty() {
            continue;
        }
        let mut losses = Vec::with_capacity(pairs.len());
        for pair in *pairs {
            losses.push(coherence_pair_loss(
                model, tape, dialogue, pair, vocab, delta, mode,
            )?);
        }
        let stacked = tape.concat_cols(&losses)?;
        dialogue_means.push(tape.mean(stacked)?);
    }
    batch_mean(tape, dialogue_means)
}

/// Sub-summary analogue of [`coherence_batch_loss`].
pub fn subsummary_batch_loss<F: Element>(
    model: &Model<F>,
    tape: &mut Tape<F>,
    items: &[(&DialogueRecord, &[SubSummaryPair])],
    vocab: &Vocabulary,
    delta: f64,
    mode: &mut Mode,
) -> Result<Option<Var>, LossError> {
    let mut dialogue_means = Vec::new();
    for (dialogue, pairs) in items {
        if pairs.is_empty() {
            continue;
        }
        let mut losses = Vec::with_capacity(pairs.len());
        for pair in *pairs {
            losses.push(subsummary_pair_loss(
                model, tape, dialogue, pair, vocab, delta, mode,
            )?);
        }
        let stacked = tape.concat_cols(&losses)?;
        dialogue_means.push(tape.mean(stacked)?);
    }
    batch_mean(tape, dialogue_means)
}

fn batch_mean<F: Element>(
    tape: &mut Tape<F>,
    dialogue_means: Vec<Var>,
) -> Result<Option<Var>, LossError> {
    if dialogue_means.is_empty() {
        return Ok(None);
    }
    let stacked = tape.concat_cols(&dialogue_means)?;
    Ok(Some(tape.mean(stacked)?))
}
