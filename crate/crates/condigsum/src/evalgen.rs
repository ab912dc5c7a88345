//! Decoding, ROUGE evaluation, and behavioral diagnostics.
//!
//! Beam search decodes summaries from a trained model; the evaluation
//! report scores them with ROUGE-1/2/L F-measures, overall and split by
//! how many sentences the reference summary has. Three probes examine
//! what the auxiliary objectives taught the model: ordered-vs-shuffled
//! coherence scores, a snippet-by-sub-summary correlation matrix from
//! teacher-forced likelihoods, and a substitution probe that swaps one
//! utterance of a topic block for an utterance from a different topic.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{
    self, CorpusError, DialogueRecord, SubSummary, TokenSeq, Utterance, Vocabulary, BOS,
    EOS, PAD, SEP,
};
use crate::losses::{self, LossError};
use crate::model::{Mode, Model, ModelError};
use crate::pairs::Snippet;
use crate::par;
use crate::rouge::{self, RougeScore};
use crate::tensor::{Element, Tape, TensorError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("invalid evaluation input: {0}")]
    Invalid(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Rouge(#[from] rouge::RougeError),
}

/// Beam-search settings. Defaults: beam 4, up to 64 output tokens,
/// length penalty 1.0 (pure per-token normalization).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BeamConfig {
    pub beam_size: usize,
    pub max_decode_len: usize,
    pub length_penalty: f64,
}

impl Default for BeamConfig {
    fn default() -> Self {
        BeamConfig {
            beam_size: 4,
            max_decode_len: 64,
            length_penalty: 1.0,
        }
    }
}

impl BeamConfig {
    pub fn validate(&self) -> Result<(), EvalError> {
        if self.beam_size == 0 {
            return Err(EvalError::Invalid("beam_size must be at least 1".into()));
        }
        if self.max_decode_len == 0 {
            return Err(EvalError::Invalid("max_decode_len must be at least 1".into()));
        }
        if !self.length_penalty.is_finite() {
            return Err(EvalError::Invalid("length_penalty must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Beam {
    ids: Vec<u32>,
    logp: f64,
}

fn penalized(logp: f64, generated: usize, penalty: f64) -> f64 {
    logp / (generated.max(1) as f64).powf(penalty)
}

/// Log-softmax of one logits row, computed stably in f64.
fn log_probs_f64<F: Element>(row: &[F]) -> Vec<f64> {
    let vals: Vec<f64> = row.iter().map(|&v| Element::to_f64(v)).collect();
    let max = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_z = vals.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    vals.iter().map(|v| v - log_z).collect()
}

/// Length-penalized beam search from BOS. The source is encoded once; the
/// encoder memory is replayed as a constant on each step's tape. Ties are
/// broken deterministically (higher score, then lower source beam, then
/// lower token id), so identical inputs always decode identically. The
/// output holds at most `max_decode_len` ids and ends with EOS whenever
/// EOS was emitted.
pub fn beam_decode<F: Element>(
    model: &Model<F>,
    source: &TokenSeq,
    cfg: &BeamConfig,
) -> Result<TokenSeq, EvalError> {
    cfg.validate()?;
    let (mem_shape, mem_values) = {
        let mut tape = Tape::new();
        let memory = model.encode(&mut tape, source, &mut Mode::Eval)?;
        (tape.shape(memory).to_vec(), tape.value(memory).to_vec())
    };
    // The prefix feeds the decoder, so it can never outgrow the position
    // table; the output cap also counts the BOS slot.
    let hard_cap = cfg.max_decode_len.min(model.config().max_positions);

    let mut active = vec![Beam {
        ids: vec![BOS],
        logp: 0.0,
    }];
    let mut finished: Vec<Beam> = Vec::new();

    while !active.is_empty() && active[0].ids.len() < hard_cap {
        // (score, source beam, token) candidates across all active beams.
        let mut candidates: Vec<(f64, usize, u32)> = Vec::new();
        for (b_idx, beam) in active.iter().enumerate() {
            let mut tape = Tape::new();
            let memory = tape.constant(mem_shape.clone(), mem_values.clone())?;
            let logits =
                model.decode_logits(&mut tape, memory, &beam.ids, &mut Mode::Eval)?;
            let shape = tape.shape(logits);
            let (rows, cols) = (shape[0], shape[1]);
            let last = &tape.value(logits)[(rows - 1) * cols..rows * cols];
            for (tok, lp) in log_probs_f64(last).into_iter().enumerate() {
                candidates.push((beam.logp + lp, b_idx, tok as u32));
            }
        }
        candidates.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.1.cmp(&b.1))
                .then(a.2.cmp(&b.2))
        });
        let mut next = Vec::with_capacity(cfg.beam_size);
        for (considered, (score, b_idx, tok)) in candidates.into_iter().enumerate() {
            if next.len() >= cfg.beam_size || considered >= 2 * cfg.beam_size {
                break;
            }
            let mut ids = active[b_idx].ids.clone();
            ids.push(tok);
            if tok == EOS {
                finished.push(Beam { ids, logp: score });
            } else {
                next.push(Beam { ids, logp: score });
            }
        }
        active = next;
    }
    finished.extend(active);

    let best = finished
        .into_iter()
        .map(|b| {
            let generated = b.ids.len() - 1;
            (penalized(b.logp, generated, cfg.length_penalty), b)
        })
        .max_by(|(sa, a), (sb, b)| {
            sa.partial_cmp(sb)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then_with(|| b.ids.cmp(&a.ids))
        })
        .map(|(_, b)| b)
        .ok_or_else(|| EvalError::Invalid("beam search produced no hypotheses".into()))?;
    Ok(TokenSeq { ids: best.ids })
}

/// Surface words of a decoded sequence: control ids dropped, everything
/// else mapped through the vocabulary.
pub fn decode_to_words(seq: &TokenSeq, vocab: &Vocabulary) -> Vec<String> {
    seq.ids
        .iter()
        .filter(|id| ![PAD, BOS, EOS, SEP].contains(id))
        .filter_map(|id| vocab.token(*id).map(str::to_owned))
        .collect()
}

/// Mean ROUGE scores over a set of instances.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupReport {
    pub count: usize,
    pub rouge1: RougeScore,
    pub rouge2: RougeScore,
    pub rouge_l: RougeScore,
}

/// Per-dialogue ROUGE scores plus the reference's sentence count.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InstanceScore {
    pub id: String,
    pub sub_summaries: usize,
    pub rouge1: RougeScore,
    pub rouge2: RougeScore,
    pub rouge_l: RougeScore,
}

/// Corpus-level ROUGE report: overall means plus the split between
/// single-sentence references (`one`) and multi-sentence ones (`more`).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub rouge: GroupReport,
    pub groups: Groups,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub per_instance: Vec<InstanceScore>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Groups {
    pub one: GroupReport,
    pub more: GroupReport,
}

fn mean_scores(instances: &[&InstanceScore]) -> GroupReport {
    let n = instances.len();
    let avg = |f: &dyn Fn(&InstanceScore) -> RougeScore| -> RougeScore {
        if n == 0 {
            return RougeScore::ZERO;
        }
        let mut p = 0.0;
        let mut r = 0.0;
        let mut f1 = 0.0;
        for i in instances {
            let s = f(i);
            p += s.precision;
            r += s.recall;
            f1 += s.f1;
        }
        RougeScore {
            precision: p / n as f64,
            recall: r / n as f64,
            f1: f1 / n as f64,
        }
    };
    GroupReport {
        count: n,
        rouge1: avg(&|i| i.rouge1),
        rouge2: avg(&|i| i.rouge2),
        rouge_l: avg(&|i| i.rouge_l),
    }
}

/// Score already-decoded word sequences against their dialogues'
/// reference summaries and aggregate overall and per group.
pub fn score_decodes(
    decodes: &[Vec<String>],
    split: &[DialogueRecord],
) -> Result<EvalReport, EvalError> {
    if split.is_empty() {
        return Err(EvalError::Invalid("empty evaluation split".into()));
    }
    if decodes.len() != split.len() {
        return Err(EvalError::Invalid(format!(
            "{} decodes for {} dialogues",
            decodes.len(),
            split.len()
        )));
    }
    let per_instance: Vec<InstanceScore> = decodes
        .iter()
        .zip(split)
        .map(|(words, d)| {
            let reference = corpus::tokenize(&d.summary);
            Ok(InstanceScore {
                id: d.id.clone(),
                sub_summaries: corpus::split_sub_summaries(&d.summary).len(),
                rouge1: rouge::rouge_n(words, &reference, 1)?,
                rouge2: rouge::rouge_n(words, &reference, 2)?,
                rouge_l: rouge::rouge_l(words, &reference),
            })
        })
        .collect::<Result<_, EvalError>>()?;
    let all: Vec<&InstanceScore> = per_instance.iter().collect();
    let one: Vec<&InstanceScore> = per_instance
        .iter()
        .filter(|i| i.sub_summaries <= 1)
        .collect();
    let more: Vec<&InstanceScore> = per_instance
        .iter()
        .filter(|i| i.sub_summaries >= 2)
        .collect();
    Ok(EvalReport {
        rouge: mean_scores(&all),
        groups: Groups {
            one: mean_scores(&one),
            more: mean_scores(&more),
        },
        per_instance,
    })
}

/// Decode every dialogue in the split (possibly in parallel) and score the
/// results with ROUGE-1/2/L.
pub fn evaluate_rouge<F: Element>(
    model: &Model<F>,
    split: &[DialogueRecord],
    vocab: &Vocabulary,
    cfg: &BeamConfig,
) -> Result<EvalReport, EvalError> {
    if split.is_empty() {
        return Err(EvalError::Invalid("empty evaluation split".into()));
    }
    cfg.validate()?;
    let max_pos = model.config().max_positions;
    let decoded = par::map_items(split, |d| -> Result<Vec<String>, EvalError> {
        let source = corpus::encode_dialogue(d, None, vocab, max_pos)?;
        let seq = beam_decode(model, &source, cfg)?;
        Ok(decode_to_words(&seq, vocab))
    });
    let decodes = decoded.into_iter().collect::<Result<Vec<_>, _>>()?;
    score_decodes(&decodes, split)
}

/// Ordered-vs-shuffled coherence scores for one utterance range.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CoherenceProbe {
    pub span: (usize, usize),
    pub ordered: f64,
    /// Absent for single-utterance spans, which admit no reordering.
    pub shuffled: Option<f64>,
}

fn snippet_score<F: Element>(
    model: &Model<F>,
    utterances: &[&Utterance],
    vocab: &Vocabulary,
) -> Result<f64, EvalError> {
    let seq = corpus::encode_utterances(utterances.iter().copied(), vocab, model.config().max_positions);
    let mut tape = Tape::new();
    let memory = model.encode(&mut tape, &seq, &mut Mode::Eval)?;
    let score = model.coherence_score(&mut tape, memory)?;
    Ok(tape.item(score)?.to_f64())
}

fn shuffled_order(len: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    let identity = order.clone();
    loop {
        order.shuffle(rng);
        if order != identity {
            return order;
        }
    }
}

/// For each half-open utterance range, the coherence score of the ordered
/// snippet and of one seeded non-identity shuffle of it.
pub fn coherence_diagnostic<F: Element>(
    model: &Model<F>,
    dialogue: &DialogueRecord,
    spans: &[(usize, usize)],
    vocab: &Vocabulary,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<CoherenceProbe>, EvalError> {
    let n = dialogue.utterances.len();
    let mut out = Vec::with_capacity(spans.len());
    for &(start, end) in spans {
        if start >= end || end > n {
            return Err(EvalError::Invalid(format!(
                "span {start}..{end} out of bounds for {n} utterances"
            )));
        }
        let ordered_utts: Vec<&Utterance> = dialogue.utterances[start..end].iter().collect();
        let ordered = snippet_score(model, &ordered_utts, vocab)?;
        let shuffled = if end - start < 2 {
            None
        } else {
            let order = shuffled_order(end - start, rng);
            let perm: Vec<&Utterance> =
                order.iter().map(|&i| &dialogue.utterances[start + i]).collect();
            Some(snippet_score(model, &perm, vocab)?)
        };
        out.push(CoherenceProbe {
            span: (start, end),
            ordered,
            shuffled,
        });
    }
    Ok(out)
}

/// Column-normalized snippet-by-sub-summary correlation scores. Each
/// column sums to 1.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiagnosticMatrix {
    pub rows: Vec<String>,
    pub cols: Vec<String>,
    /// `values[i][j]`: correlation of snippet `i` with sub-summary `j`.
    pub values: Vec<Vec<f64>>,
}

impl DiagnosticMatrix {
    /// CSV with a header row of column labels; one row per snippet.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("snippet");
        for c in &self.cols {
            out.push(',');
            out.push_str(c);
        }
        out.push('\n');
        for (label, row) in self.rows.iter().zip(&self.values) {
            out.push_str(label);
            for v in row {
                out.push(',');
                out.push_str(&format!("{v:.6}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Teacher-forced NLL of every (snippet, sub-summary) combination, each
/// column transformed by a softmax over negated losses so that lower loss
/// means higher correlation and every column sums to 1.
pub fn correlation_matrix<F: Element>(
    model: &Model<F>,
    dialogue: &DialogueRecord,
    snippets: &[Snippet],
    subs: &[SubSummary],
    vocab: &Vocabulary,
) -> Result<DiagnosticMatrix, EvalError> {
    if snippets.is_empty() || subs.is_empty() {
        return Err(EvalError::Invalid(
            "correlation matrix needs at least one snippet and one sub-summary".into(),
        ));
    }
    let max_pos = model.config().max_positions;
    let mut nll = vec![vec![0.0f64; subs.len()]; snippets.len()];
    for (i, snippet) in snippets.iter().enumerate() {
        let source = losses::snippet_tokens(dialogue, snippet, vocab, max_pos);
        let mut tape = Tape::new();
        let memory = model.encode(&mut tape, &source, &mut Mode::Eval)?;
        for (j, sub) in subs.iter().enumerate() {
            let target = corpus::encode_target(&sub.text, vocab, max_pos);
            let loss = losses::sequence_nll(model, &mut tape, memory, &target, &mut Mode::Eval)?;
            nll[i][j] = tape.item(loss)?.to_f64();
        }
    }
    let mut values = vec![vec![0.0f64; subs.len()]; snippets.len()];
    for j in 0..subs.len() {
        let scores: Vec<f64> = (0..snippets.len()).map(|i| -nll[i][j]).collect();
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = scores.iter().map(|s| (s - max).exp()).sum();
        for i in 0..snippets.len() {
            values[i][j] = (scores[i] - max).exp() / z;
        }
    }
    Ok(DiagnosticMatrix {
        rows: snippets
            .iter()
            .map(|s| format!("utt[{}..{})", s.start, s.start + s.length))
            .collect(),
        cols: subs.iter().map(|s| format!("sub{}", s.index)).collect(),
        values,
    })
}

/// Mean coherence scores of intact topic snippets versus the same
/// snippets with one utterance swapped in from another topic.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ProbeOutcome {
    pub mean_original: f64,
    pub mean_substituted: f64,
    pub n: usize,
}

fn eligible_spans(dialogue: &DialogueRecord) -> Result<Vec<(usize, usize)>, EvalError> {
    let spans = dialogue
        .topic_spans
        .as_ref()
        .map(|s| {
            s.iter()
                .filter(|t| t.start < t.end && t.end <= dialogue.utterances.len())
                .map(|t| (t.start, t.end))
                .collect::<Vec<_>>()
        })
        .unwrap_or_default();
    if spans.len() < 2 {
        return Err(EvalError::Invalid(format!(
            "dialogue '{}' needs at least 2 topic spans, has {}",
            dialogue.id,
            spans.len()
        )));
    }
    Ok(spans)
}

/// One (original, substituted) coherence-score pair: a random topic span,
/// an utterance position inside it, and a slot-matched replacement drawn
/// from a different topic span.
fn substitution_example<F: Element>(
    model: &Model<F>,
    dialogue: &DialogueRecord,
    spans: &[(usize, usize)],
    vocab: &Vocabulary,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, f64), EvalError> {
    let a = rng.gen_range(0..spans.len());
    let (a_start, a_end) = spans[a];
    let a_len = a_end - a_start;
    let offset = rng.gen_range(0..a_len);
    let mut b = rng.gen_range(0..spans.len() - 1);
    if b >= a {
        b += 1;
    }
    let (b_start, b_end) = spans[b];
    // Same slot within the block (wrapped), so the replacement plays the
    // same structural role the original did.
    let replacement = &dialogue.utterances[b_start + offset % (b_end - b_start)];

    let original: Vec<&Utterance> = dialogue.utterances[a_start..a_end].iter().collect();
    let mut substituted = original.clone();
    substituted[offset] = replacement;
    Ok((
        snippet_score(model, &original, vocab)?,
        snippet_score(model, &substituted, vocab)?,
    ))
}

/// Coherence drop from substituting one utterance of a topic block with
/// one from a different topic, averaged over `n_examples` sampled pairs.
pub fn substitution_probe<F: Element>(
    model: &Model<F>,
    dialogue: &DialogueRecord,
    n_examples: usize,
    vocab: &Vocabulary,
    rng: &mut ChaCha8Rng,
) -> Result<ProbeOutcome, EvalError> {
    let spans = eligible_spans(dialogue)?;
    let mut orig = 0.0;
    let mut subst = 0.0;
    for _ in 0..n_examples {
        let (o, s) = substitution_example(model, dialogue, &spans, vocab, rng)?;
        orig += o;
        subst += s;
    }
    let n = n_examples.max(1) as f64;
    Ok(ProbeOutcome {
        mean_original: orig / n,
        mean_substituted: subst / n,
        n: n_examples,
    })
}

/// Substitution probe over a corpus: examples are drawn from randomly
/// chosen dialogues that have at least two topic spans.
pub fn substitution_probe_corpus<F: Element>(
    model: &Model<F>,
    dialogues: &[DialogueRecord],
    n_examples: usize,
    vocab: &Vocabulary,
    rng: &mut ChaCha8Rng,
) -> Result<ProbeOutcome, EvalError> {
    let eligible: Vec<(&DialogueRecord, Vec<(usize, usize)>)> = dialogues
        .iter()
        .filter_map(|d| eligible_spans(d).ok().map(|s| (d, s)))
        .collect();
    if eligible.is_empty() {
        return Err(EvalError::Invalid(
            "no dialogue has at least 2 topic spans".into(),
        ));
    }
    let mut orig = 0.0;
    let mut subst = 0.0;
    for _ in 0..n_examples {
        let (d, spans) = &eligible[rng.gen_range(0..eligible.len())];
        let (o, s) = substitution_example(model, d, spans, vocab, rng)?;
        orig += o;
        subst += s;
    }
    let n = n_examples.max(1) as f64;
    Ok(ProbeOutcome {
        mean_original: orig / n,
        mean_substituted: subst / n,
        n: n_examples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::SynthConfig;
    use crate::model::{randomize_weights, DropoutRate, ModelConfig};
    use rand::SeedableRng;

    fn tiny_model(vocab_size: usize, seed: u64) -> Model<f64> {
        let config = ModelConfig {
            vocab_size,
            d_model: 16,
            n_heads: 2,
            ffn_dim: 32,
            enc_layers: 1,
            dec_layers: 1,
            max_positions: 96,
            dropout: DropoutRate(0.0),
        };
        let mut model = Model::new(config, seed).unwrap();
        randomize_weights(&mut model, seed.wrapping_add(1));
        model
    }

    fn fixture(n: usize) -> (Vec<DialogueRecord>, Vocabulary, Model<f64>) {
        let corpus = corpus::synth_corpus(&SynthConfig {
            n_dialogues: n,
            seed: 19,
            ..SynthConfig::default()
        })
        .unwrap();
        let vocab = corpus::build_vocab(&corpus, 300).unwrap();
        let model = tiny_model(vocab.size(), 5);
        (corpus, vocab, model)
    }

    fn greedy_decode(model: &Model<f64>, source: &TokenSeq, max_len: usize) -> Vec<u32> {
        let mut ids = vec![BOS];
        let cap = max_len.min(model.config().max_positions);
        while ids.len() < cap {
            let mut tape = Tape::new();
            let memory = model.encode(&mut tape, source, &mut Mode::Eval).unwrap();
            let logits = model
                .decode_logits(&mut tape, memory, &ids, &mut Mode::Eval)
                .unwrap();
            let shape = tape.shape(logits).to_vec();
            let row = &tape.value(logits)[(shape[0] - 1) * shape[1]..];
            let mut best = 0usize;
            for (i, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = i;
                }
            }
            ids.push(best as u32);
            if best as u32 == EOS {
                break;
            }
        }
        ids
    }

    #[test]
    fn beam_config_defaults_and_validation() {
        let d = BeamConfig::default();
        assert_eq!((d.beam_size, d.max_decode_len), (4, 64));
        assert_eq!(d.length_penalty, 1.0);
        assert!(d.validate().is_ok());
        assert!(BeamConfig { beam_size: 0, ..d }.validate().is_err());
        assert!(BeamConfig { max_decode_len: 0, ..d }.validate().is_err());
    }

    #[test]
    fn beam_one_matches_a_plain_greedy_loop() {
        let (corpus, vocab, model) = fixture(4);
        for d in &corpus {
            let source = corpus::encode_dialogue(d, None, &vocab, 96).unwrap();
            let cfg = BeamConfig {
                beam_size: 1,
                max_decode_len: 24,
                length_penalty: 1.0,
            };
            let beam = beam_decode(&model, &source, &cfg).unwrap();
            let greedy = greedy_decode(&model, &source, 24);
            assert_eq!(beam.ids, greedy, "dialogue {}", d.id);
        }
    }

    #[test]
    fn decoding_is_deterministic_and_respects_caps() {
        let (corpus, vocab, model) = fixture(3);
        let cfg = BeamConfig {
            beam_size: 3,
            max_decode_len: 10,
            length_penalty: 1.0,
        };
        for d in &corpus {
            let source = corpus::encode_dialogue(d, None, &vocab, 96).unwrap();
            let once = beam_decode(&model, &source, &cfg).unwrap();
            let twice = beam_decode(&model, &source, &cfg).unwrap();
            assert_eq!(once.ids, twice.ids);
            assert!(once.ids.len() <= 10);
            assert_eq!(once.ids[0], BOS);
            if once.ids.contains(&EOS) {
                assert_eq!(*once.ids.last().unwrap(), EOS);
            }
        }
    }

    #[test]
    fn eos_biased_model_stops_immediately() {
        let (_, _vocab, mut model) = fixture(2);
        let bias = model.store().id("out.bias").unwrap();
        model.store_mut().entry_mut(bias).value[EOS as usize] = 50.0;
        let source = TokenSeq { ids: vec![5, 6, 7] };
        let out = beam_decode(&model, &source, &BeamConfig::default()).unwrap();
        assert_eq!(out.ids, vec![BOS, EOS]);
    }

    #[test]
    fn echoed_references_score_perfect_rouge() {
        let (corpus, _, _) = fixture(6);
        let decodes: Vec<Vec<String>> = corpus
            .iter()
            .map(|d| corpus::tokenize(&d.summary))
            .collect();
        let report = score_decodes(&decodes, &corpus).unwrap();
        assert!((report.rouge.rouge1.f1 - 1.0).abs() < 1e-12);
        assert!((report.rouge.rouge2.f1 - 1.0).abs() < 1e-12);
        assert!((report.rouge.rouge_l.f1 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn empty_decodes_score_zero() {
        let (corpus, _, _) = fixture(3);
        let decodes: Vec<Vec<String>> = vec![Vec::new(); corpus.len()];
        let report = score_decodes(&decodes, &corpus).unwrap();
        assert_eq!(report.rouge.rouge1.f1, 0.0);
        assert_eq!(report.rouge.rouge2.f1, 0.0);
        assert_eq!(report.rouge.rouge_l.f1, 0.0);
    }

    #[test]
    fn overall_rouge_is_the_weighted_group_mean() {
        let (mut corpus, _, _) = fixture(12);
        // Give some dialogues single-sentence references so both groups
        // occur; degrade some decodes so the groups genuinely differ.
        for d in corpus.iter_mut().step_by(3) {
            d.summary = corpus::split_sub_summaries(&d.summary)
                .into_iter()
                .next()
                .unwrap()
                .text;
        }
        let decodes: Vec<Vec<String>> = corpus
            .iter()
            .enumerate()
            .map(|(i, d)| {
                let mut words = corpus::tokenize(&d.summary);
                if i % 2 == 0 {
                    words.truncate(words.len() / 2);
                }
                words
            })
            .collect();
        let report = score_decodes(&decodes, &corpus).unwrap();
        let g1 = &report.groups.one;
        let g2 = &report.groups.more;
        assert_eq!(g1.count + g2.count, report.rouge.count);
        assert!(g1.count > 0 && g2.count > 0, "both groups should occur");
        let weighted = (g1.rouge2.f1 * g1.count as f64 + g2.rouge2.f1 * g2.count as f64)
            / report.rouge.count as f64;
        assert!((report.rouge.rouge2.f1 - weighted).abs() < 1e-12);
        // Cross-check against per-instance means.
        let direct: f64 = report.per_instance.iter().map(|i| i.rouge2.f1).sum::<f64>()
            / report.per_instance.len() as f64;
        assert!((report.rouge.rouge2.f1 - direct).abs() < 1e-12);
    }

    #[test]
    fn evaluate_rouge_runs_end_to_end_reproducibly() {
        let (corpus, vocab, model) = fixture(3);
        let cfg = BeamConfig {
            beam_size: 2,
            max_decode_len: 12,
            length_penalty: 1.0,
        };
        let a = evaluate_rouge(&model, &corpus, &vocab, &cfg).unwrap();
        let b = evaluate_rouge(&model, &corpus, &vocab, &cfg).unwrap();
        assert_eq!(a.rouge.rouge1.f1.to_bits(), b.rouge.rouge1.f1.to_bits());
        assert_eq!(a.per_instance.len(), corpus.len());
        assert!(evaluate_rouge(&model, &[], &vocab, &cfg).is_err());
    }

    #[test]
    fn coherence_diagnostic_handles_singletons_and_shuffles() {
        let (corpus, vocab, model) = fixture(2);
        let d = &corpus[0];
        let n = d.utterances.len();
        assert!(n >= 3);
        let spans = vec![(0usize, 1usize), (0, n.min(4))];
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let probes = coherence_diagnostic(&model, d, &spans, &vocab, &mut rng).unwrap();
        assert_eq!(probes.len(), 2);
        assert!(probes[0].shuffled.is_none(), "length-1 span has no shuffle");
        assert!(probes[0].ordered.is_finite());
        let second = &probes[1];
        assert!(second.shuffled.is_some());
        assert!(second.ordered.is_finite() && second.shuffled.unwrap().is_finite());
        // Same seed reproduces; invalid span errors.
        let mut rng2 = ChaCha8Rng::seed_from_u64(11);
        let again = coherence_diagnostic(&model, d, &spans, &vocab, &mut rng2).unwrap();
        assert_eq!(again[1].shuffled.unwrap().to_bits(), second.shuffled.unwrap().to_bits());
        let mut rng3 = ChaCha8Rng::seed_from_u64(11);
        assert!(coherence_diagnostic(&model, d, &[(0, n + 1)], &vocab, &mut rng3).is_err());
    }

    fn span_snippet(d: &DialogueRecord, start: usize, length: usize) -> Snippet {
        Snippet {
            dialogue_id: d.id.clone(),
            start,
            length,
            utterance_order: (0..length).collect(),
        }
    }

    #[test]
    fn correlation_matrix_columns_are_distributions() {
        let (corpus, vocab, model) = fixture(2);
        let d = &corpus[0];
        let subs = corpus::split_sub_summaries(&d.summary);
        assert!(!subs.is_empty());
        let n = d.utterances.len();
        let snippets = vec![
            span_snippet(d, 0, (n / 2).max(1)),
            span_snippet(d, n / 2, n - n / 2),
            span_snippet(d, 0, n),
        ];
        let m = correlation_matrix(&model, d, &snippets, &subs, &vocab).unwrap();
        assert_eq!(m.values.len(), snippets.len());
        assert_eq!(m.rows.len(), snippets.len());
        assert_eq!(m.cols.len(), subs.len());
        for j in 0..subs.len() {
            let col_sum: f64 = (0..snippets.len()).map(|i| m.values[i][j]).sum();
            assert!((col_sum - 1.0).abs() < 1e-6, "column {j} sums to {col_sum}");
            for i in 0..snippets.len() {
                assert!((0.0..=1.0).contains(&m.values[i][j]));
            }
        }
    }

    #[test]
    fn correlation_matrix_degenerate_cases() {
        let (corpus, vocab, model) = fixture(2);
        let d = &corpus[0];
        let subs = corpus::split_sub_summaries(&d.summary);
        let single = vec![span_snippet(d, 0, d.utterances.len())];
        let m = correlation_matrix(&model, d, &single, &subs, &vocab).unwrap();
        for j in 0..subs.len() {
            assert!((m.values[0][j] - 1.0).abs() < 1e-12);
        }
        // Two identical snippets: equal losses, so each column is 0.5/0.5.
        let twin = vec![
            span_snippet(d, 0, d.utterances.len()),
            span_snippet(d, 0, d.utterances.len()),
        ];
        let m2 = correlation_matrix(&model, d, &twin, &subs, &vocab).unwrap();
        for j in 0..subs.len() {
            assert!((m2.values[0][j] - 0.5).abs() < 1e-12);
            assert!((m2.values[1][j] - 0.5).abs() < 1e-12);
        }
        assert!(correlation_matrix(&model, d, &[], &subs, &vocab).is_err());
    }

    #[test]
    fn matrix_csv_has_header_and_rows() {
        let m = DiagnosticMatrix {
            rows: vec!["utt[0..2)".into(), "utt[2..4)".into()],
            cols: vec!["sub0".into(), "sub1".into()],
            values: vec![vec![0.75, 0.25], vec![0.25, 0.75]],
        };
        let csv = m.to_csv();
        let lines: Vec<&str> = csv.trim_end().lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0], "snippet,sub0,sub1");
        assert!(lines[1].starts_with("utt[0..2),0.750000"));
    }

    #[test]
    fn substitution_probe_needs_two_topics_and_counts_examples() {
        let (corpus, vocab, model) = fixture(8);
        let with_topics = corpus
            .iter()
            .find(|d| d.topic_spans.as_ref().map_or(0, |s| s.len()) >= 2)
            .expect("synthetic corpus has multi-topic dialogues");
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let probe = substitution_probe(&model, with_topics, 9, &vocab, &mut rng).unwrap();
        assert_eq!(probe.n, 9);
        assert!(probe.mean_original.is_finite() && probe.mean_substituted.is_finite());

        let mut single = with_topics.clone();
        single.topic_spans = Some(vec![crate::corpus::TopicSpan {
            start: 0,
            end: single.utterances.len(),
            label: "all".into(),
        }]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!(substitution_probe(&model, &single, 5, &vocab, &mut rng).is_err());
        single.topic_spans = None;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!(substitution_probe(&model, &single, 5, &vocab, &mut rng).is_err());
    }

    #[test]
    fn identical_replacement_leaves_score_unchanged() {
        let (corpus, vocab, model) = fixture(2);
        // Two topic spans whose utterances are literal copies: every
        // substitution swaps in identical text, so scores must match.
        let base = &corpus[0];
        let m = base.utterances.len().clamp(2, 3);
        let mut utts = Vec::new();
        for _ in 0..2 {
            utts.extend(base.utterances[..m].to_vec());
        }
        let twin = DialogueRecord {
            id: "twin".into(),
            utterances: utts,
            summary: base.summary.clone(),
            topic_spans: Some(vec![
                crate::corpus::TopicSpan { start: 0, end: m, label: "a".into() },
                crate::corpus::TopicSpan { start: m, end: 2 * m, label: "b".into() },
            ]),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let probe = substitution_probe(&model, &twin, 12, &vocab, &mut rng).unwrap();
        assert!(
            (probe.mean_original - probe.mean_substituted).abs() < 1e-12,
            "identical swaps must not move the score"
        );
    }

    #[test]
    fn corpus_probe_pools_eligible_dialogues() {
        let (corpus, vocab, model) = fixture(10);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let probe = substitution_probe_corpus(&model, &corpus, 20, &vocab, &mut rng).unwrap();
        assert_eq!(probe.n, 20);
        let mut rng2 = ChaCha8Rng::seed_from_u64(17);
        let again = substitution_probe_corpus(&model, &corpus, 20, &vocab, &mut rng2).unwrap();
        assert_eq!(probe.mean_original.to_bits(), again.mean_original.to_bits());
        // Strip topics everywhere → error.
        let stripped: Vec<DialogueRecord> = corpus
            .iter()
            .map(|d| {
                let mut d = d.clone();
                d.topic_spans = None;
                d
            })
            .collect();
        let mut rng3 = ChaCha8Rng::seed_from_u64(17);
        assert!(substitution_probe_corpus(&model, &stripped, 5, &vocab, &mut rng3).is_err());
    }
}
