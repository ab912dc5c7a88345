//! Training loop: token-based batching, Adam with warmup, and the two
//! update strategies over the three objectives.
//!
//! Each batch runs either the alternating strategy — three sequential
//! sub-steps (coherence, then sub-summary, then summarization), each with
//! its own task coefficient applied as a learning-rate multiplier on a
//! shared Adam state — or the summed strategy, a single update of the
//! coefficient-weighted sum of the three losses. The coherence sub-step
//! updates only the encoder-side parameter partition.
//!
//! A zero-coefficient auxiliary sub-step is skipped entirely (no loss
//! graph, no optimizer-state mutation), which makes training with both
//! auxiliary coefficients at zero bitwise identical to a plain
//! sequence-to-sequence loop under the same seed. The summarization loss
//! is always computed (it is the reported training loss); its update is
//! skipped when its coefficient is zero.
//!
//! Every random stream — batch shuffling, per-dialogue pair sampling,
//! per-sub-step dropout — is derived functionally from the config seed, so
//! runs reproduce bitwise and the pair generator can run data-parallel
//! without changing results.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{
    self, CorpusError, DialogueRecord, SubSummary, TokenSeq, Vocabulary,
};
use crate::losses::{self, LossError};
use crate::model::{Mode, Model, ModelConfig, ModelError};
use crate::pairs::{self, CoherencePair, PairError, SubSummaryPair};
use crate::par;
use crate::seeds::{self, stream};
use crate::tensor::{Element, ParamId, ParamStore, TensorError, Tape};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid train config: {0}")]
    Config(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Pairs(#[from] PairError),
    #[error("non-finite gradient in parameter '{param}'")]
    NonFiniteGrad { param: String },
    #[error("non-finite {substep} loss")]
    NonFiniteLoss { substep: SubStep },
    #[error("epoch {epoch} batch {batch}: {source}")]
    Abort {
        epoch: usize,
        batch: usize,
        #[source]
        source: Box<TrainError>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Alternating,
    Summed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SubStep {
    Coherence,
    Subsummary,
    Main,
}

impl std::fmt::Display for SubStep {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SubStep::Coherence => "coherence",
            SubStep::Subsummary => "subsummary",
            SubStep::Main => "main",
        })
    }
}

/// Tags separating the per-sub-step dropout streams derived from a batch's
/// dropout seed. Public so an external plain training loop can reproduce
/// the exact stream of a given sub-step.
pub mod substep_tag {
    pub const COHERENCE: u64 = 1;
    pub const SUBSUMMARY: u64 = 2;
    pub const MAIN: u64 = 3;
}

/// Full training recipe. `a..=b` bounds the sub-summary snippet windows,
/// `k` the coherence window; `n_co`/`n_su` are pairs per dialogue per
/// epoch; coefficients scale each task's update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub k: usize,
    pub a: usize,
    pub b: usize,
    pub n_co: usize,
    pub n_su: usize,
    pub delta_co: f64,
    pub delta_su: f64,
    pub alpha: f64,
    pub warmup_steps: u64,
    pub w_co: f64,
    pub w_su: f64,
    pub w_main: f64,
    pub max_tokens_per_batch: usize,
    pub epochs: usize,
    pub seed: u64,
    pub strategy: Strategy,
    pub min_match_recall: f64,
    pub model_config: ModelConfig,
}

impl TrainConfig {
    /// Desk-scale preset: small windows, strong auxiliary coefficients, a
    /// from-scratch-friendly learning rate.
    pub fn toy() -> Self {
        TrainConfig {
            k: 4,
            a: 1,
            b: 3,
            n_co: 2,
            n_su: 2,
            delta_co: 1.0,
            delta_su: 1.0,
            alpha: 3e-4,
            warmup_steps: 200,
            w_co: 0.05,
            w_su: 0.05,
            w_main: 1.0,
            max_tokens_per_batch: 800,
            epochs: 3,
            seed: 7,
            strategy: Strategy::Alternating,
            min_match_recall: 0.1,
            model_config: ModelConfig::default(),
        }
    }

    /// Reference-scale hyperparameters (window sizes, coefficients, rate)
    /// paired with this artifact's small architecture.
    pub fn paper() -> Self {
        TrainConfig {
            k: 14,
            a: 5,
            b: 25,
            n_co: 2,
            n_su: 2,
            delta_co: 1.0,
            delta_su: 1.0,
            alpha: 4e-5,
            warmup_steps: 500,
            w_co: 0.005,
            w_su: 0.0001,
            w_main: 1.0,
            max_tokens_per_batch: 800,
            epochs: 3,
            seed: 7,
            strategy: Strategy::Alternating,
            min_match_recall: 0.1,
            model_config: ModelConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.a == 0 || self.a > self.b {
            return Err(TrainError::Config(format!(
                "window bounds need 1 <= a <= b, got a={} b={}",
                self.a, self.b
            )));
        }
        if self.k == 0 {
            return Err(TrainError::Config("k must be at least 1".into()));
        }
        for (name, w) in [
            ("w_co", self.w_co),
            ("w_su", self.w_su),
            ("w_main", self.w_main),
        ] {
            if w < 0.0 || !w.is_finite() {
                return Err(TrainError::Config(format!(
                    "{name} must be finite and >= 0, got {w}"
                )));
            }
        }
        if self.alpha <= 0.0 || !self.alpha.is_finite() {
            return Err(TrainError::Config(format!(
                "alpha must be finite and > 0, got {}",
                self.alpha
            )));
        }
        if self.max_tokens_per_batch == 0 {
            return Err(TrainError::Config("max_tokens_per_batch must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.min_match_recall) {
            return Err(TrainError::Config(format!(
                "min_match_recall {} outside [0, 1]",
                self.min_match_recall
            )));
        }
        self.model_config.validate()?;
        Ok(())
    }
}

/// Learning rate at 1-based `step`: linear ramp to `alpha` over
/// `warmup_steps`, then inverse-square-root decay. Zero warmup means a
/// constant rate.
pub fn lr_schedule(step: u64, alpha: f64, warmup_steps: u64) -> f64 {
    if warmup_steps == 0 {
        return alpha;
    }
    if step <= warmup_steps {
        alpha * step as f64 / warmup_steps as f64
    } else {
        alpha * (warmup_steps as f64 / step as f64).sqrt()
    }
}

/// Shuffle dialogue indices (seeded), then pack greedily so each batch's
/// summed encoded source length stays within `max_tokens`. A dialogue
/// longer than the budget forms a singleton batch. Every dialogue appears
/// exactly once.
pub fn batch_by_tokens(
    corpus: &[DialogueRecord],
    vocab: &Vocabulary,
    max_positions: usize,
    max_tokens: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<usize>>, TrainError> {
    use rand::seq::SliceRandom;
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order.shuffle(rng);
    let mut batches: Vec<Vec<usize>> = Vec::new();
    let mut current: Vec<usize> = Vec::new();
    let mut current_tokens = 0usize;
    for idx in order {
        let len = corpus::encode_dialogue(&corpus[idx], None, vocab, max_positions)?
            .ids
            .len();
        if !current.is_empty() && current_tokens + len > max_tokens {
            batches.push(std::mem::take(&mut current));
            current_tokens = 0;
        }
        current.push(idx);
        current_tokens += len;
        if current_tokens >= max_tokens {
            batches.push(std::mem::take(&mut current));
            current_tokens = 0;
        }
    }
    if !current.is_empty() {
        batches.push(current);
    }
    Ok(batches)
}

/// Adam moment buffers shared by every sub-step; one entry per parameter
/// in store order.
#[derive(Debug, Clone)]
pub struct OptimizerState<F> {
    m: Vec<Vec<F>>,
    v: Vec<Vec<F>>,
    step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<F: Element> OptimizerState<F> {
    pub fn new(store: &ParamStore<F>) -> Self {
        let m = store
            .iter()
            .map(|(_, e)| vec![F::zero(); e.value.len()])
            .collect::<Vec<_>>();
        let v = m.clone();
        OptimizerState {
            m,
            v,
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self, id: ParamId) -> (&[F], &[F]) {
        let i = id.index();
        (&self.m[i], &self.v[i])
    }
}

/// One bias-corrected Adam update restricted to `subset`. Moments of
/// parameters outside the subset are untouched; gradients of the subset
/// are zeroed afterwards.
pub fn adam_step<F: Element>(
    store: &mut ParamStore<F>,
    state: &mut OptimizerState<F>,
    subset: &[ParamId],
    rate: f64,
) -> Result<(), TrainError> {
    state.step += 1;
    let t = state.step as i32;
    let b1 = F::from_f64(state.beta1);
    let b2 = F::from_f64(state.beta2);
    let one = F::one();
    let corr1 = F::from_f64(1.0 - state.beta1.powi(t));
    let corr2 = F::from_f64(1.0 - state.beta2.powi(t));
    let eps = F::from_f64(state.eps);
    let lr = F::from_f64(rate);
    for &id in subset {
        let entry = store.entry_mut(id);
        if let Some(bad) = entry.grad.iter().find(|g| !g.is_finite()) {
            let _ = bad;
            return Err(TrainError::NonFiniteGrad {
                param: entry.name.clone(),
            });
        }
        let idx = id.index();
        let m = &mut state.m[idx];
        let v = &mut state.v[idx];
        for ((theta, g), (mi, vi)) in entry
            .value
            .iter_mut()
            .zip(&entry.grad)
            .zip(m.iter_mut().zip(v.iter_mut()))
        {
            *mi = b1 * *mi + (one - b1) * *g;
            *vi = b2 * *vi + (one - b2) * *g * *g;
            let m_hat = *mi / corr1;
            let v_hat = *vi / corr2;
            *theta -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        for g in &mut entry.grad {
            *g = F::zero();
        }
    }
    Ok(())
}

/// Per-dialogue contrastive pairs for one epoch, parallel to the corpus.
#[derive(Debug, Clone, Default)]
pub struct EpochPairs {
    pub coherence: Vec<Vec<CoherencePair>>,
    pub subsummary: Vec<Vec<SubSummaryPair>>,
}

/// Generate one epoch's pairs. Each dialogue gets its own derived seed, so
/// the (optionally parallel) map is order-independent and reproducible.
pub fn epoch_pairs(
    corpus: &[DialogueRecord],
    subs: &[Vec<SubSummary>],
    config: &TrainConfig,
    epoch: usize,
) -> EpochPairs {
    let want_co = config.w_co > 0.0;
    let want_su = config.w_su > 0.0;
    if !want_co && !want_su {
        return EpochPairs {
            coherence: vec![Vec::new(); corpus.len()],
            subsummary: vec![Vec::new(); corpus.len()],
        };
    }
    let indexed: Vec<usize> = (0..corpus.len()).collect();
    let results = par::map_items(&indexed, |&i| {
        let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(
            config.seed,
            &[stream::PAIRS, epoch as u64, i as u64],
        ));
        let co = if want_co {
            pairs::make_coherence_pairs(&corpus[i], config.k, config.n_co, &mut rng)
        } else {
            Vec::new()
        };
        let su = if want_su {
            pairs::make_subsummary_pairs(
                &corpus[i],
                &subs[i],
                config.a,
                config.b,
                config.n_su,
                &mut rng,
            )
        } else {
            Vec::new()
        };
        (co, su)
    });
    let mut out = EpochPairs {
        coherence: Vec::with_capacity(corpus.len()),
        subsummary: Vec::with_capacity(corpus.len()),
    };
    for (co, su) in results {
        out.coherence.push(co);
        out.subsummary.push(su);
    }
    out
}

/// Loss values reported for one batch. `None` marks a sub-step that did
/// not run.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SubLosses {
    pub main: f64,
    pub coherence: Option<f64>,
    pub subsummary: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub sub_losses: SubLosses,
    pub skipped_substeps: Vec<SubStep>,
    /// Combined weighted loss (summed strategy only).
    pub total: Option<f64>,
}

/// One JSONL record per batch in the training log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepLog {
    pub epoch: usize,
    pub step: u64,
    pub sub_losses: SubLosses,
    pub lr: f64,
    pub skipped_substeps: Vec<SubStep>,
}

fn substep_rng(dropout_seed: u64, tag: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seeds::derive(dropout_seed, &[tag]))
}

fn finite(value: f64, substep: SubStep) -> Result<f64, TrainError> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(TrainError::NonFiniteLoss { substep })
    }
}

fn encode_batch(
    dialogues: &[&DialogueRecord],
    vocab: &Vocabulary,
    max_positions: usize,
) -> Result<Vec<(TokenSeq, TokenSeq)>, TrainError> {
    dialogues
        .iter()
        .map(|d| {
            let src = corpus::encode_dialogue(d, None, vocab, max_positions)?;
            let tgt = corpus::encode_target(&d.summary, vocab, max_positions);
            Ok((src, tgt))
        })
        .collect()
}

/// Three sequential updates on one batch: coherence (encoder-side subset,
/// rate scaled by `w_co`), sub-summary (all parameters, `w_su`), then
/// summarization (all parameters, `w_main`). Zero-coefficient or pairless
/// auxiliary sub-steps are skipped and recorded; a zero `w_main` skips
/// only the update, never the loss.
#[allow(clippy::too_many_arguments)]
pub fn alternating_step<F: Element>(
    model: &mut Model<F>,
    opt: &mut OptimizerState<F>,
    dialogues: &[&DialogueRecord],
    co_pairs: &[&[CoherencePair]],
    su_pairs: &[&[SubSummaryPair]],
    vocab: &Vocabulary,
    config: &TrainConfig,
    lr: f64,
    dropout_seed: u64,
) -> Result<StepOutcome, TrainError> {
    if dialogues.is_empty() {
        return Err(TrainError::Config("empty batch".into()));
    }
    let mut skipped = Vec::new();

    // (1) Coherence — encoder-side parameters only.
    let mut coherence_value = None;
    if config.w_co > 0.0 {
        let items: Vec<(&DialogueRecord, &[CoherencePair])> = dialogues
            .iter()
            .zip(co_pairs)
            .map(|(d, p)| (*d, *p))
            .collect();
        let mut rng = substep_rng(dropout_seed, substep_tag::COHERENCE);
        let mut tape = Tape::new();
        let loss = losses::coherence_batch_loss(
            model,
            &mut tape,
            &items,
            vocab,
            config.delta_co,
            &mut Mode::Train(&mut rng),
        )?;
        match loss {
            Some(node) => {
                let value = finite(tape.item(node)?.to_f64(), SubStep::Coherence)?;
                coherence_value = Some(value);
                tape.backward(node)?;
                model.store_mut().zero_all_grads();
                tape.accum_param_grads(model.store_mut());
                let subset = model.encoder_param_ids();
                adam_step(model.store_mut(), opt, &subset, lr * config.w_co)?;
            }
            None => skipped.push(SubStep::Coherence),
        }
    } else {
        skipped.push(SubStep::Coherence);
    }

    // (2) Sub-summary — all parameters.
    let mut subsummary_value = None;
    if config.w_su > 0.0 {
        let items: Vec<(&DialogueRecord, &[SubSummaryPair])> = dialogues
            .iter()
            .zip(su_pairs)
            .map(|(d, p)| (*d, *p))
            .collect();
        let mut rng = substep_rng(dropout_seed, substep_tag::SUBSUMMARY);
        let mut tape = Tape::new();
        let loss = losses::subsummary_batch_loss(
            model,
            &mut tape,
            &items,
            vocab,
            config.delta_su,
            &mut Mode::Train(&mut rng),
        )?;
        match loss {
            Some(node) => {
                let value = finite(tape.item(node)?.to_f64(), SubStep::Subsummary)?;
                subsummary_value = Some(value);
                tape.backward(node)?;
                model.store_mut().zero_all_grads();
                tape.accum_param_grads(model.store_mut());
                let subset = model.all_param_ids();
                adam_step(model.store_mut(), opt, &subset, lr * config.w_su)?;
            }
            None => skipped.push(SubStep::Subsummary),
        }
    } else {
        skipped.push(SubStep::Subsummary);
    }

    // (3) Summarization — all parameters; loss always reported.
    let encoded = encode_batch(dialogues, vocab, model.config().max_positions)?;
    let batch: Vec<(&TokenSeq, &TokenSeq)> = encoded.iter().map(|(s, t)| (s, t)).collect();
    let mut rng = substep_rng(dropout_seed, substep_tag::MAIN);
    let mut tape = Tape::new();
    let loss = losses::main_batch_loss(model, &mut tape, &batch, &mut Mode::Train(&mut rng))?;
    let main_value = finite(tape.item(loss)?.to_f64(), SubStep::Main)?;
    if config.w_main > 0.0 {
        tape.backward(loss)?;
        model.store_mut().zero_all_grads();
        tape.accum_param_grads(model.store_mut());
        let subset = model.all_param_ids();
        adam_step(model.store_mut(), opt, &subset, lr * config.w_main)?;
    } else {
        skipped.push(SubStep::Main);
    }

    Ok(StepOutcome {
        sub_losses: SubLosses {
            main: main_value,
            coherence: coherence_value,
            subsummary: subsummary_value,
        },
        skipped_substeps: skipped,
        total: None,
    })
}

/// Single update of `w_co·L_co + w_su·L_su + w_main·L_main` over all
/// parameters. The coherence term cannot move decoder-side parameters:
/// its graph never contains them.
#[allow(clippy::too_many_arguments)]
pub fn summed_step<F: Element>(
    model: &mut Model<F>,
    opt: &mut OptimizerState<F>,
    dialogues: &[&DialogueRecord],
    co_pairs: &[&[CoherencePair]],
    su_pairs: &[&[SubSummaryPair]],
    vocab: &Vocabulary,
    config: &TrainConfig,
    lr: f64,
    dropout_seed: u64,
) -> Result<StepOutcome, TrainError> {
    if dialogues.is_empty() {
        return Err(TrainError::Config("empty batch".into()));
    }
    let mut skipped = Vec::new();
    let mut tape = Tape::new();
    let mut terms = Vec::new();

    let mut coherence_value = None;
    if config.w_co > 0.0 {
        let items: Vec<(&DialogueRecord, &[CoherencePair])> = dialogues
            .iter()
            .zip(co_pairs)
            .map(|(d, p)| (*d, *p))
            .collect();
        let mut rng = substep_rng(dropout_seed, substep_tag::COHERENCE);
        match losses::coherence_batch_loss(
            model,
            &mut tape,
            &items,
            vocab,
            config.delta_co,
            &mut Mode::Train(&mut rng),
        )? {
            Some(node) => {
                coherence_value =
                    Some(finite(tape.item(node)?.to_f64(), SubStep::Coherence)?);
                terms.push(tape.scale(node, F::from_f64(config.w_co)));
            }
            None => skipped.push(SubStep::Coherence),
        }
    } else {
        skipped.push(SubStep::Coherence);
    }

    let mut subsummary_value = None;
    if config.w_su > 0.0 {
        let items: Vec<(&DialogueRecord, &[SubSummaryPair])> = dialogues
            .iter()
            .zip(su_pairs)
            .map(|(d, p)| (*d, *p))
            .collect();
        let mut rng = substep_rng(dropout_seed, substep_tag::SUBSUMMARY);
        match losses::subsummary_batch_loss(
            model,
            &mut tape,
            &items,
            vocab,
            config.delta_su,
            &mut Mode::Train(&mut rng),
        )? {
            Some(node) => {
                subsummary_value =
                    Some(finite(tape.item(node)?.to_f64(), SubStep::Subsummary)?);
                terms.push(tape.scale(node, F::from_f64(config.w_su)));
            }
            None => skipped.push(SubStep::Subsummary),
        }
    } else {
        skipped.push(SubStep::Subsummary);
    }

    let encoded = encode_batch(dialogues, vocab, model.config().max_positions)?;
    let batch: Vec<(&TokenSeq, &TokenSeq)> = encoded.iter().map(|(s, t)| (s, t)).collect();
    let mut rng = substep_rng(dropout_seed, substep_tag::MAIN);
    let main_node =
        losses::main_batch_loss(model, &mut tape, &batch, &mut Mode::Train(&mut rng))?;
    let main_value = finite(tape.item(main_node)?.to_f64(), SubStep::Main)?;
    terms.push(tape.scale(main_node, F::from_f64(config.w_main)));

    let total_node = tape.add_n(&terms)?;
    let total = finite(tape.item(total_node)?.to_f64(), SubStep::Main)?;
    tape.backward(total_node)?;
    model.store_mut().zero_all_grads();
    tape.accum_param_grads(model.store_mut());
    let subset = model.all_param_ids();
    adam_step(model.store_mut(), opt, &subset, lr)?;

    Ok(StepOutcome {
        sub_losses: SubLosses {
            main: main_value,
            coherence: coherence_value,
            subsummary: subsummary_value,
        },
        skipped_substeps: skipped,
        total: Some(total),
    })
}

/// Result of a training run: the final model, the best-validation snapshot
/// (the final model when no validation set is given), and the step log.
#[derive(Debug)]
pub struct TrainOutcome<F> {
    pub model: Model<F>,
    pub best_model: Model<F>,
    pub best_epoch: usize,
    pub best_val_loss: Option<f64>,
    pub val_losses: Vec<f64>,
    pub log: Vec<StepLog>,
}

/// Mean per-instance summarization NLL in evaluation mode (no dropout).
pub fn validation_loss<F: Element>(
    model: &Model<F>,
    valid: &[DialogueRecord],
    vocab: &Vocabulary,
) -> Result<f64, TrainError> {
    if valid.is_empty() {
        return Err(TrainError::Config("empty validation set".into()));
    }
    let max_pos = model.config().max_positions;
    let results = par::map_items(valid, |d| -> Result<f64, TrainError> {
        let src = corpus::encode_dialogue(d, None, vocab, max_pos)?;
        let tgt = corpus::encode_target(&d.summary, vocab, max_pos);
        let mut tape = Tape::new();
        let memory = model.encode(&mut tape, &src, &mut Mode::Eval)?;
        let nll = losses::sequence_nll(model, &mut tape, memory, &tgt, &mut Mode::Eval)?;
        Ok(tape.item(nll)?.to_f64())
    });
    let mut total = 0.0;
    for r in results {
        total += r?;
    }
    Ok(total / valid.len() as f64)
}

/// Train a fresh model on `train_set`. Per epoch: re-shuffle batches and
/// resample pairs from seeds derived of (config seed, epoch), run one step
/// per batch, then score `valid` in evaluation mode. Checkpoints land in
/// `checkpoint_dir` (one per epoch plus `best.ckpt`) when given.
pub fn train<F: Element>(
    train_set: &[DialogueRecord],
    valid: Option<&[DialogueRecord]>,
    vocab: &Vocabulary,
    config: &TrainConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainOutcome<F>, TrainError> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(TrainError::Config("empty training corpus".into()));
    }
    let valid = valid.filter(|v| !v.is_empty());
    let mut model: Model<F> = Model::new(config.model_config.clone(), config.seed)?;
    let mut opt = OptimizerState::new(model.store());
    let subs: Vec<Vec<SubSummary>> = train_set
        .iter()
        .map(|d| {
            corpus::filter_sub_summaries(
                d,
                corpus::split_sub_summaries(&d.summary),
                config.a,
                config.b,
                config.min_match_recall,
            )
        })
        .collect();

    let mut log = Vec::new();
    let mut val_losses = Vec::new();
    let mut best: Option<(usize, f64, Model<F>)> = None;
    let mut global_step = 0u64;

    for epoch in 1..=config.epochs {
        let mut batch_rng = ChaCha8Rng::seed_from_u64(seeds::derive(
            config.seed,
            &[stream::BATCH, epoch as u64],
        ));
        let batches = batch_by_tokens(
            train_set,
            vocab,
            config.model_config.max_positions,
            config.max_tokens_per_batch,
            &mut batch_rng,
        )?;
        let pairs = epoch_pairs(train_set, &subs, config, epoch);

        for (batch_idx, batch) in batches.iter().enumerate() {
            global_step += 1;
            let lr = lr_schedule(global_step, config.alpha, config.warmup_steps);
            let dialogues: Vec<&DialogueRecord> =
                batch.iter().map(|&i| &train_set[i]).collect();
            let co: Vec<&[CoherencePair]> =
                batch.iter().map(|&i| pairs.coherence[i].as_slice()).collect();
            let su: Vec<&[SubSummaryPair]> =
                batch.iter().map(|&i| pairs.subsummary[i].as_slice()).collect();
            let dropout_seed = seeds::derive(
                config.seed,
                &[stream::DROPOUT, epoch as u64, batch_idx as u64],
            );
            let outcome = match config.strategy {
                Strategy::Alternating => alternating_step(
                    &mut model, &mut opt, &dialogues, &co, &su, vocab, config, lr,
                    dropout_seed,
                ),
                Strategy::Summed => summed_step(
                    &mut model, &mut opt, &dialogues, &co, &su, vocab, config, lr,
                    dropout_seed,
                ),
            }
            .map_err(|e| TrainError::Abort {
                epoch,
                batch: batch_idx,
                source: Box::new(e),
            })?;
            log.push(StepLog {
                epoch,
                step: global_step,
                sub_losses: outcome.sub_losses,
                lr,
                skipped_substeps: outcome.skipped_substeps,
            });
        }

        let epoch_main: f64 = {
            let steps: Vec<f64> = log
                .iter()
                .filter(|s| s.epoch == epoch)
                .map(|s| s.sub_losses.main)
                .collect();
            steps.iter().sum::<f64>() / steps.len().max(1) as f64
        };
        if let Some(vd) = valid {
            let vl = validation_loss(&model, vd, vocab)?;
            val_losses.push(vl);
            let improved = best.as_ref().is_none_or(|(_, b, _)| vl < *b);
            if improved {
                best = Some((epoch, vl, model.clone_weights()));
            }
            log::info!(
                "epoch {epoch}/{}: train loss {epoch_main:.4}, val loss {vl:.4}{}",
                config.epochs,
                if improved { " (best)" } else { "" }
            );
        } else {
            log::info!("epoch {epoch}/{}: train loss {epoch_main:.4}", config.epochs);
        }
        if let Some(dir) = checkpoint_dir {
            std::fs::create_dir_all(dir)?;
            model.save(&dir.join(format!("epoch-{epoch:03}.ckpt")))?;
        }
    }

    let (best_epoch, best_val_loss, best_model) = match best {
        Some((e, v, m)) => (e, Some(v), m),
        None => (config.epochs, None, model.clone_weights()),
    };
    if let Some(dir) = checkpoint_dir {
        std::fs::create_dir_all(dir)?;
        best_model.save(&dir.join("best.ckpt"))?;
    }
    Ok(TrainOutcome {
        model,
        best_model,
        best_epoch,
        best_val_loss,
        val_losses,
        log,
    })
}
