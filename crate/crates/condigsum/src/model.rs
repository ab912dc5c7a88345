//! Encoder–decoder transformer over the autodiff tape.
//!
//! The model is a pre-norm transformer: an encoder stack over the flattened
//! dialogue tokens and a decoder stack with causal self-attention and
//! cross-attention into the encoder memory. Token embeddings are tied with
//! the output projection. A small linear regressor over the mean-pooled
//! encoder memory scores snippet coherence.
//!
//! Parameters live in a [`ParamStore`] under stable dotted names and are
//! split into two partitions: names starting with `dec.` or `out.` belong to
//! the decoder-side partition, everything else (embeddings, encoder stack,
//! the coherence regressor) to the encoder-side partition. The coherence
//! objective updates only the encoder-side partition; the generation
//! objectives update both.
//!
//! Sequences are processed one instance at a time — there is no padding and
//! no batch dimension; batching happens at the loss level by averaging
//! scalars.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::TokenSeq;
use crate::seeds::{self, stream};
use crate::tensor::{Element, ParamId, ParamStore, Tape, TensorError, Var};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("bad sequence: {0}")]
    Sequence(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub max_positions: usize,
    /// Dropout rate in hundredths of a percent would invite rounding; this
    /// is the plain probability, applied after the embedding and after each
    /// sublayer in training mode.
    #[serde(with = "dropout_serde")]
    pub dropout: DropoutRate,
}

/// Dropout probability wrapper so `ModelConfig` can stay `Eq` for checkpoint
/// validation; the inner value is a plain probability in `[0, 1)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DropoutRate(pub f64);

impl Eq for DropoutRate {}

mod dropout_serde {
    use super::DropoutRate;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &DropoutRate, s: S) -> Result<S::Ok, S::Error> {
        v.0.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DropoutRate, D::Error> {
        f64::deserialize(d).map(DropoutRate)
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 320,
            d_model: 64,
            n_heads: 4,
            ffn_dim: 128,
            enc_layers: 2,
            dec_layers: 2,
            max_positions: 256,
            dropout: DropoutRate(0.1),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.vocab_size < 5 {
            return Err(ModelError::Config(format!(
                "vocab_size {} below the 5 reserved tokens",
                self.vocab_size
            )));
        }
        for (name, v) in [
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("ffn_dim", self.ffn_dim),
            ("enc_layers", self.enc_layers),
            ("dec_layers", self.dec_layers),
            ("max_positions", self.max_positions),
        ] {
            if v == 0 {
                return Err(ModelError::Config(format!("{name} must be positive")));
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(ModelError::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout.0) {
            return Err(ModelError::Config(format!(
                "dropout {} outside [0, 1)",
                self.dropout.0
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Forward-pass mode: evaluation (no dropout) or training with a
/// caller-owned dropout stream.
pub enum Mode<'r> {
    Eval,
    Train(&'r mut ChaCha8Rng),
}

enum Init {
    Normal,
    Zero,
    One,
}

/// Canonical parameter list: names, shapes, and init kinds in registration
/// order. Single source of truth for construction, checkpoint layout, and
/// the partition rule.
fn param_specs(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let d = cfg.d_model;
    let f = cfg.ffn_dim;
    let v = cfg.vocab_size;
    let mut specs: Vec<(String, Vec<usize>, Init)> = vec![
        ("embed.tok".into(), vec![v, d], Init::Normal),
        ("embed.pos".into(), vec![cfg.max_positions, d], Init::Normal),
    ];
    let attn = |specs: &mut Vec<(String, Vec<usize>, Init)>, prefix: &str| {
        for w in ["wq", "wk", "wv", "wo"] {
            specs.push((format!("{prefix}.{w}"), vec![d, d], Init::Normal));
        }
        for b in ["bq", "bk", "bv", "bo"] {
            specs.push((format!("{prefix}.{b}"), vec![d], Init::Zero));
        }
    };
    let ln = |specs: &mut Vec<(String, Vec<usize>, Init)>, prefix: &str| {
        specs.push((format!("{prefix}.g"), vec![d], Init::One));
        specs.push((format!("{prefix}.b"), vec![d], Init::Zero));
    };
    let ffn = |specs: &mut Vec<(String, Vec<usize>, Init)>, prefix: &str| {
        specs.push((format!("{prefix}.w1"), vec![d, f], Init::Normal));
        specs.push((format!("{prefix}.b1"), vec![f], Init::Zero));
        specs.push((format!("{prefix}.w2"), vec![f, d], Init::Normal));
        specs.push((format!("{prefix}.b2"), vec![d], Init::Zero));
    };
    for l in 0..cfg.enc_layers {
        ln(&mut specs, &format!("enc.{l}.ln1"));
        attn(&mut specs, &format!("enc.{l}.attn"));
        ln(&mut specs, &format!("enc.{l}.ln2"));
        ffn(&mut specs, &format!("enc.{l}.ffn"));
    }
    ln(&mut specs, "enc.final_ln");
    for l in 0..cfg.dec_layers {
        ln(&mut specs, &format!("dec.{l}.ln1"));
        attn(&mut specs, &format!("dec.{l}.self_attn"));
        ln(&mut specs, &format!("dec.{l}.ln2"));
        attn(&mut specs, &format!("dec.{l}.cross_attn"));
        ln(&mut specs, &format!("dec.{l}.ln3"));
        ffn(&mut specs, &format!("dec.{l}.ffn"));
    }
    ln(&mut specs, "dec.final_ln");
    specs.push(("out.bias".into(), vec![v], Init::Zero));
    specs.push(("regressor.w".into(), vec![d], Init::Normal));
    specs.push(("regressor.b".into(), vec![1], Init::Zero));
    specs
}

/// Names starting with `dec.` or `out.` form the decoder-side partition.
pub fn is_decoder_side(name: &str) -> bool {
    name.starts_with("dec.") || name.starts_with("out.")
}

#[derive(Debug)]
pub struct Model<F> {
    config: ModelConfig,
    store: ParamStore<F>,
}

const INIT_STD: f64 = 0.02;
const MASK_FILL: f64 = -1e9;
const LN_EPS: f64 = 1e-5;
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    format_version: u32,
    config: ModelConfig,
    params: Vec<CheckpointParam>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointParam {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

impl<F: Element> Model<F> {
    /// Fresh model with weights drawn from N(0, 0.02²) on a stream derived
    /// from `seed`; biases start at zero, layer-norm gains at one.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(seed, &[stream::INIT]));
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let mut store = ParamStore::new();
        for (name, shape, init) in param_specs(&config) {
            let numel: usize = shape.iter().product();
            let value: Vec<F> = match init {
                Init::Normal => (0..numel)
                    .map(|_| F::from_f64(normal.sample(&mut rng)))
                    .collect(),
                Init::Zero => vec![F::zero(); numel],
                Init::One => vec![F::one(); numel],
            };
            store.add(&name, shape, value)?;
        }
        Ok(Model { config, store })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore<F> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<F> {
        &mut self.store
    }

    /// Independent copy of the model (weights and config); gradients are
    /// copied as-is.
    pub fn clone_weights(&self) -> Self {
        Model {
            config: self.config.clone(),
            store: self.store.clone(),
        }
    }

    pub fn all_param_ids(&self) -> Vec<ParamId> {
        self.store.ids().collect()
    }

    /// Embeddings, encoder stack, and coherence regressor.
    pub fn encoder_param_ids(&self) -> Vec<ParamId> {
        self.store
            .iter()
            .filter(|(_, e)| !is_decoder_side(&e.name))
            .map(|(id, _)| id)
            .collect()
    }

    /// Decoder stack and output bias.
    pub fn decoder_param_ids(&self) -> Vec<ParamId> {
        self.store
            .iter()
            .filter(|(_, e)| is_decoder_side(&e.name))
            .map(|(id, _)| id)
            .collect()
    }

    fn id(&self, name: &str) -> ParamId {
        self.store
            .id(name)
            .unwrap_or_else(|| panic!("parameter '{name}' missing"))
    }

    fn p(&self, tape: &mut Tape<F>, name: &str) -> Var {
        let id = self.id(name);
        tape.param(&self.store, id)
    }

    fn maybe_dropout(
        &self,
        tape: &mut Tape<F>,
        x: Var,
        mode: &mut Mode,
    ) -> Result<Var, ModelError> {
        match mode {
            Mode::Eval => Ok(x),
            Mode::Train(rng) => Ok(tape.dropout(x, self.config.dropout.0, rng)?),
        }
    }

    fn embed(&self, tape: &mut Tape<F>, ids: &[u32]) -> Result<Var, ModelError> {
        let tok_table = self.p(tape, "embed.tok");
        let pos_table = self.p(tape, "embed.pos");
        let tok = tape.gather(tok_table, ids)?;
        let scaled = tape.scale(tok, F::from_f64((self.config.d_model as f64).sqrt()));
        let positions: Vec<u32> = (0..ids.len() as u32).collect();
        let pos = tape.gather(pos_table, &positions)?;
        Ok(tape.add(scaled, pos)?)
    }

    /// Multi-head attention. `mask` (if present) blanks scores at `[Lq, Lkv]`
    /// positions before the softmax.
    fn attention(
        &self,
        tape: &mut Tape<F>,
        prefix: &str,
        q_in: Var,
        kv_in: Var,
        mask: Option<&[bool]>,
    ) -> Result<Var, ModelError> {
        let d = self.config.d_model;
        let dh = self.config.head_dim();
        let wq = self.p(tape, &format!("{prefix}.wq"));
        let wk = self.p(tape, &format!("{prefix}.wk"));
        let wv = self.p(tape, &format!("{prefix}.wv"));
        let wo = self.p(tape, &format!("{prefix}.wo"));
        let bq = self.p(tape, &format!("{prefix}.bq"));
        let bk = self.p(tape, &format!("{prefix}.bk"));
        let bv = self.p(tape, &format!("{prefix}.bv"));
        let bo = self.p(tape, &format!("{prefix}.bo"));
        let q_all = tape.matmul(q_in, wq)?;
        let q_all = tape.add_row(q_all, bq)?;
        let k_all = tape.matmul(kv_in, wk)?;
        let k_all = tape.add_row(k_all, bk)?;
        let v_all = tape.matmul(kv_in, wv)?;
        let v_all = tape.add_row(v_all, bv)?;
        let inv_sqrt = F::from_f64(1.0 / (dh as f64).sqrt());
        let mut heads = Vec::with_capacity(self.config.n_heads);
        for h in 0..self.config.n_heads {
            let qh = tape.slice_cols(q_all, h * dh, dh)?;
            let kh = tape.slice_cols(k_all, h * dh, dh)?;
            let vh = tape.slice_cols(v_all, h * dh, dh)?;
            let scores = tape.matmul_nt(qh, kh)?;
            let scores = tape.scale(scores, inv_sqrt);
            let scores = match mask {
                Some(m) => tape.add_mask(scores, m, F::from_f64(MASK_FILL))?,
                None => scores,
            };
            let probs = tape.softmax(scores)?;
            heads.push(tape.matmul(probs, vh)?);
        }
        let ctx = tape.concat_cols(&heads)?;
        debug_assert_eq!(tape.shape(ctx)[1], d);
        let out = tape.matmul(ctx, wo)?;
        Ok(tape.add_row(out, bo)?)
    }

    fn ffn(&self, tape: &mut Tape<F>, prefix: &str, x: Var) -> Result<Var, ModelError> {
        let w1 = self.p(tape, &format!("{prefix}.w1"));
        let b1 = self.p(tape, &format!("{prefix}.b1"));
        let w2 = self.p(tape, &format!("{prefix}.w2"));
        let b2 = self.p(tape, &format!("{prefix}.b2"));
        let h = tape.matmul(x, w1)?;
        let h = tape.add_row(h, b1)?;
        let h = tape.gelu(h);
        let h = tape.matmul(h, w2)?;
        Ok(tape.add_row(h, b2)?)
    }

    fn layer_norm(&self, tape: &mut Tape<F>, prefix: &str, x: Var) -> Result<Var, ModelError> {
        let g = self.p(tape, &format!("{prefix}.g"));
        let b = self.p(tape, &format!("{prefix}.b"));
        Ok(tape.layer_norm(x, g, b, F::from_f64(LN_EPS))?)
    }

    fn check_len(&self, len: usize, what: &str) -> Result<(), ModelError> {
        if len == 0 {
            return Err(ModelError::Sequence(format!("empty {what}")));
        }
        if len > self.config.max_positions {
            return Err(ModelError::Sequence(format!(
                "{what} length {len} exceeds max_positions {}",
                self.config.max_positions
            )));
        }
        Ok(())
    }

    /// Encode a source token sequence into memory states `[L, d_model]`.
    pub fn encode(
        &self,
        tape: &mut Tape<F>,
        src: &TokenSeq,
        mode: &mut Mode,
    ) -> Result<Var, ModelError> {
        self.check_len(src.ids.len(), "source")?;
        let x = self.embed(tape, &src.ids)?;
        let mut h = self.maybe_dropout(tape, x, mode)?;
        for l in 0..self.config.enc_layers {
            let normed = self.layer_norm(tape, &format!("enc.{l}.ln1"), h)?;
            let attn = self.attention(tape, &format!("enc.{l}.attn"), normed, normed, None)?;
            let attn = self.maybe_dropout(tape, attn, mode)?;
            h = tape.add(h, attn)?;
            let normed = self.layer_norm(tape, &format!("enc.{l}.ln2"), h)?;
            let ff = self.ffn(tape, &format!("enc.{l}.ffn"), normed)?;
            let ff = self.maybe_dropout(tape, ff, mode)?;
            h = tape.add(h, ff)?;
        }
        self.layer_norm(tape, "enc.final_ln", h)
    }

    /// Next-token logits `[L, vocab]` for a target prefix attending into
    /// `memory`. Causal self-attention: position `i` sees prefix positions
    /// `0..=i` only.
    pub fn decode_logits(
        &self,
        tape: &mut Tape<F>,
        memory: Var,
        prefix: &[u32],
        mode: &mut Mode,
    ) -> Result<Var, ModelError> {
        self.check_len(prefix.len(), "target prefix")?;
        let l = prefix.len();
        let mut causal = vec![false; l * l];
        for i in 0..l {
            for j in (i + 1)..l {
                causal[i * l + j] = true;
            }
        }
        let x = self.embed(tape, prefix)?;
        let mut h = self.maybe_dropout(tape, x, mode)?;
        for layer in 0..self.config.dec_layers {
            let normed = self.layer_norm(tape, &format!("dec.{layer}.ln1"), h)?;
            let attn = self.attention(
                tape,
                &format!("dec.{layer}.self_attn"),
                normed,
                normed,
                Some(&causal),
            )?;
            let attn = self.maybe_dropout(tape, attn, mode)?;
            h = tape.add(h, attn)?;
            let normed = self.layer_norm(tape, &format!("dec.{layer}.ln2"), h)?;
            let cross = self.attention(
                tape,
                &format!("dec.{layer}.cross_attn"),
                normed,
                memory,
                None,
            )?;
            let cross = self.maybe_dropout(tape, cross, mode)?;
            h = tape.add(h, cross)?;
            let normed = self.layer_norm(tape, &format!("dec.{layer}.ln3"), h)?;
            let ff = self.ffn(tape, &format!("dec.{layer}.ffn"), normed)?;
            let ff = self.maybe_dropout(tape, ff, mode)?;
            h = tape.add(h, ff)?;
        }
        let h = self.layer_norm(tape, "dec.final_ln", h)?;
        let tok_table = self.p(tape, "embed.tok");
        let logits = tape.matmul_nt(h, tok_table)?;
        let out_bias = self.p(tape, "out.bias");
        Ok(tape.add_row(logits, out_bias)?)
    }

    /// Mean-pool encoder memory over positions: `[L, d] → [d]`.
    pub fn pool(&self, tape: &mut Tape<F>, memory: Var) -> Result<Var, ModelError> {
        Ok(tape.mean_rows(memory)?)
    }

    /// Scalar coherence score of pooled memory: `w · pool + b`.
    pub fn coherence_score(&self, tape: &mut Tape<F>, memory: Var) -> Result<Var, ModelError> {
        let pooled = self.pool(tape, memory)?;
        let w = self.p(tape, "regressor.w");
        let prod = tape.mul(pooled, w)?;
        let dot = tape.sum(prod);
        let b = self.p(tape, "regressor.b");
        Ok(tape.add(dot, b)?)
    }

    /// Write config and weights to a checkpoint file: one JSON header line,
    /// then all values as little-endian f32 in header order.
    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let mut params = Vec::with_capacity(self.store.len());
        let mut offset = 0usize;
        for (_, entry) in self.store.iter() {
            params.push(CheckpointParam {
                name: entry.name.clone(),
                shape: entry.shape.clone(),
                offset,
            });
            offset += entry.value.len();
        }
        let header = CheckpointHeader {
            format_version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            params,
        };
        let mut out = Vec::new();
        serde_json::to_writer(&mut out, &header)
            .map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        out.push(b'\n');
        for (_, entry) in self.store.iter() {
            for &v in &entry.value {
                out.extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
            }
        }
        let tmp = path.with_extension("tmp");
        fs::File::create(&tmp)?.write_all(&out)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    /// Load a checkpoint written by [`Model::save`], validating the manifest
    /// against the canonical parameter layout for its config.
    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        let newline = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| ModelError::Checkpoint("missing header line".into()))?;
        let header: CheckpointHeader = serde_json::from_slice(&bytes[..newline])
            .map_err(|e| ModelError::Checkpoint(format!("bad header: {e}")))?;
        if header.format_version != CHECKPOINT_VERSION {
            return Err(ModelError::Checkpoint(format!(
                "format version {} unsupported (expected {CHECKPOINT_VERSION})",
                header.format_version
            )));
        }
        header.config.validate()?;
        let specs = param_specs(&header.config);
        if specs.len() != header.params.len() {
            return Err(ModelError::Checkpoint(format!(
                "manifest lists {} parameters, layout has {}",
                header.params.len(),
                specs.len()
            )));
        }
        let payload = &bytes[newline + 1..];
        let mut store = ParamStore::new();
        let mut expected_offset = 0usize;
        for ((name, shape, _), manifest) in specs.into_iter().zip(&header.params) {
            if manifest.name != name || manifest.shape != shape {
                return Err(ModelError::Checkpoint(format!(
                    "manifest entry '{}' {:?} does not match layout '{}' {:?}",
                    manifest.name, manifest.shape, name, shape
                )));
            }
            if manifest.offset != expected_offset {
                return Err(ModelError::Checkpoint(format!(
                    "'{}' at offset {} (expected {})",
                    manifest.name, manifest.offset, expected_offset
                )));
            }
            let numel: usize = shape.iter().product();
            let start = expected_offset * 4;
            let end = start + numel * 4;
            if end > payload.len() {
                return Err(ModelError::Checkpoint(format!(
                    "payload truncated reading '{name}'"
                )));
            }
            let value: Vec<F> = payload[start..end]
                .chunks_exact(4)
                .map(|c| {
                    F::from_f64(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                })
                .collect();
            store.add(&name, shape, value)?;
            expected_offset += numel;
        }
        if payload.len() != expected_offset * 4 {
            return Err(ModelError::Checkpoint(format!(
                "payload holds {} bytes, manifest expects {}",
                payload.len(),
                expected_offset * 4
            )));
        }
        Ok(Model {
            config: header.config,
            store,
        })
    }
}

/// Resample every weight to O(1) magnitude (normalization gains near 1).
///
/// Useful for gradient checks and decoding exercises where the tiny
/// initialization scale would leave true gradients near the resolution of
/// finite differences, or logits too flat to distinguish tokens. Not used
/// by training.
pub fn randomize_weights<F: Element>(model: &mut Model<F>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let ids: Vec<_> = model.all_param_ids();
    for id in ids {
        let entry = model.store_mut().entry_mut(id);
        let gain = entry.name.ends_with(".g");
        for v in &mut entry.value {
            let z: f64 = normal.sample(&mut rng);
            *v = F::from_f64(if gain { 1.0 + 0.1 * z } else { 0.3 * z });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::TokenSeq;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            vocab_size: 13,
            d_model: 8,
            n_heads: 2,
            ffn_dim: 16,
            enc_layers: 1,
            dec_layers: 1,
            max_positions: 16,
            dropout: DropoutRate(0.0),
        }
    }

    fn seq(ids: &[u32]) -> TokenSeq {
        TokenSeq { ids: ids.to_vec() }
    }

    #[test]
    #[allow(clippy::field_reassign_with_default)]
    fn config_validation_catches_bad_values() {
        let mut c = ModelConfig::default();
        c.n_heads = 3;
        assert!(c.validate().is_err(), "d_model 64 not divisible by 3");
        let mut c = ModelConfig::default();
        c.vocab_size = 4;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::default();
        c.dropout = DropoutRate(1.0);
        assert!(c.validate().is_err());
        let mut c = ModelConfig::default();
        c.enc_layers = 0;
        assert!(c.validate().is_err());
        assert!(ModelConfig::default().validate().is_ok());
    }

    #[test]
    fn partitions_are_disjoint_and_exhaustive() {
        let model: Model<f32> = Model::new(ModelConfig::default(), 3).unwrap();
        let enc = model.encoder_param_ids();
        let dec = model.decoder_param_ids();
        assert_eq!(enc.len() + dec.len(), model.store().len());
        for id in &enc {
            assert!(!dec.contains(id));
        }
        let name_of = |id: &crate::tensor::ParamId| model.store().entry(*id).name.clone();
        assert!(enc.iter().map(name_of).any(|n| n == "embed.tok"));
        assert!(enc.iter().map(name_of).any(|n| n == "regressor.w"));
        assert!(enc.iter().map(name_of).any(|n| n.starts_with("enc.0.")));
        assert!(dec.iter().map(name_of).any(|n| n == "out.bias"));
        assert!(dec.iter().map(name_of).any(|n| n.starts_with("dec.0.")));
        assert!(!enc.iter().map(name_of).any(|n| is_decoder_side(&n)));
    }

    #[test]
    fn parameter_count_matches_arithmetic() {
        // Independent count from the architecture arithmetic.
        let c = ModelConfig::default();
        let (v, d, f, p) = (c.vocab_size, c.d_model, c.ffn_dim, c.max_positions);
        let attn = 4 * d * d + 4 * d;
        let ln = 2 * d;
        let ffn = d * f + f + f * d + d;
        let enc = c.enc_layers * (attn + 2 * ln + ffn) + ln;
        let dec = c.dec_layers * (2 * attn + 3 * ln + ffn) + ln;
        let expected = v * d + p * d + enc + dec + v + d + 1;
        let model: Model<f32> = Model::new(c, 0).unwrap();
        assert_eq!(model.store().scalar_count(), expected);
    }

    #[test]
    fn forward_shapes_and_eval_determinism() {
        let model: Model<f32> = Model::new(tiny_config(), 11).unwrap();
        let src = seq(&[1, 6, 7, 8, 2]);
        let run = || {
            let mut tape = Tape::new();
            let mem = model.encode(&mut tape, &src, &mut Mode::Eval).unwrap();
            assert_eq!(tape.shape(mem), &[5, 8]);
            let logits = model
                .decode_logits(&mut tape, mem, &[1, 5, 6], &mut Mode::Eval)
                .unwrap();
            assert_eq!(tape.shape(logits), &[3, 13]);
            let score = model.coherence_score(&mut tape, mem).unwrap();
            assert_eq!(tape.shape(score), &[1]);
            let mut bits: Vec<u32> = tape.value(logits).iter().map(|v| v.to_bits()).collect();
            bits.push(tape.value(score)[0].to_bits());
            bits
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn same_seed_same_weights_different_seed_differs() {
        let a: Model<f32> = Model::new(tiny_config(), 5).unwrap();
        let b: Model<f32> = Model::new(tiny_config(), 5).unwrap();
        let c: Model<f32> = Model::new(tiny_config(), 6).unwrap();
        let flat = |m: &Model<f32>| {
            m.store()
                .iter()
                .flat_map(|(_, e)| e.value.iter().map(|v| v.to_bits()))
                .collect::<Vec<_>>()
        };
        assert_eq!(flat(&a), flat(&b));
        assert_ne!(flat(&a), flat(&c));
    }

    #[test]
    fn causal_mask_hides_the_future() {
        let model: Model<f32> = Model::new(tiny_config(), 2).unwrap();
        let src = seq(&[1, 9, 10, 2]);
        let logits_for = |prefix: &[u32]| {
            let mut tape = Tape::new();
            let mem = model.encode(&mut tape, &src, &mut Mode::Eval).unwrap();
            let logits = model
                .decode_logits(&mut tape, mem, prefix, &mut Mode::Eval)
                .unwrap();
            tape.value(logits).to_vec()
        };
        let a = logits_for(&[1, 5, 6]);
        let b = logits_for(&[1, 5, 12]);
        let v = 13;
        // Rows 0 and 1 only see prefix positions <= themselves.
        assert_eq!(
            a[..2 * v].iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            b[..2 * v].iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        );
        assert_ne!(
            a[2 * v..].iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            b[2 * v..].iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn sequence_length_limits_are_enforced() {
        let model: Model<f32> = Model::new(tiny_config(), 0).unwrap();
        let mut tape = Tape::new();
        assert!(matches!(
            model.encode(&mut tape, &seq(&[]), &mut Mode::Eval),
            Err(ModelError::Sequence(_))
        ));
        let long: Vec<u32> = vec![6; 17];
        assert!(matches!(
            model.encode(&mut tape, &seq(&long), &mut Mode::Eval),
            Err(ModelError::Sequence(_))
        ));
    }

    #[test]
    fn train_mode_dropout_is_seeded_and_reproducible() {
        let mut cfg = tiny_config();
        cfg.dropout = DropoutRate(0.2);
        let model: Model<f32> = Model::new(cfg, 4).unwrap();
        let src = seq(&[1, 6, 7, 2]);
        let run = |seed: u64| {
            use rand::SeedableRng;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut tape = Tape::new();
            let mem = model
                .encode(&mut tape, &src, &mut Mode::Train(&mut rng))
                .unwrap();
            tape.value(mem).iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(run(8), run(8));
        assert_ne!(run(8), run(9));
    }

    #[test]
    fn gradients_reach_every_parameter_family() {
        let model: Model<f64> = Model::new(tiny_config(), 7).unwrap();
        let src = seq(&[1, 6, 7, 8, 2]);
        let target = [1u32, 9, 10, 2];
        let mut tape = Tape::new();
        let mem = model.encode(&mut tape, &src, &mut Mode::Eval).unwrap();
        let logits = model
            .decode_logits(&mut tape, mem, &target[..3], &mut Mode::Eval)
            .unwrap();
        let logp = tape.log_softmax(logits).unwrap();
        let nll = tape.nll_gather(logp, &target[1..]).unwrap();
        let score = model.coherence_score(&mut tape, mem).unwrap();
        let sq = tape.mul(score, score).unwrap();
        let loss = tape.add(nll, sq).unwrap();
        tape.backward(loss).unwrap();
        let mut store = model.store().clone();
        tape.accum_param_grads(&mut store);
        for (_, entry) in store.iter() {
            assert!(
                entry.grad.iter().all(|g| g.is_finite()),
                "non-finite grad in {}",
                entry.name
            );
            // Positions past the sequence length legitimately get no
            // gradient; every other family must receive one.
            if entry.name != "embed.pos" {
                assert!(
                    entry.grad.iter().any(|g| *g != 0.0),
                    "no gradient reached {}",
                    entry.name
                );
            }
        }
    }

    #[test]
    fn model_gradients_match_finite_differences() {
        // Weights rescaled to O(1) so no true gradient sits below the
        // relative-error floor, where finite differences see only roundoff.
        let mut model: Model<f64> = Model::new(tiny_config(), 13).unwrap();
        randomize_weights(&mut model, 77);
        let src = seq(&[1, 6, 7, 8, 2]);
        let target = [1u32, 9, 10, 2];
        let loss_of = |m: &Model<f64>| -> f64 {
            let mut tape = Tape::new();
            let mem = m.encode(&mut tape, &src, &mut Mode::Eval).unwrap();
            let logits = m
                .decode_logits(&mut tape, mem, &target[..3], &mut Mode::Eval)
                .unwrap();
            let logp = tape.log_softmax(logits).unwrap();
            let nll = tape.nll_gather(logp, &target[1..]).unwrap();
            let score = m.coherence_score(&mut tape, mem).unwrap();
            let sq = tape.mul(score, score).unwrap();
            let loss = tape.add(nll, sq).unwrap();
            tape.item(loss).unwrap()
        };
        // Analytic gradients for all parameters.
        let mut tape = Tape::new();
        let mem = model.encode(&mut tape, &src, &mut Mode::Eval).unwrap();
        let logits = model
            .decode_logits(&mut tape, mem, &target[..3], &mut Mode::Eval)
            .unwrap();
        let logp = tape.log_softmax(logits).unwrap();
        let nll = tape.nll_gather(logp, &target[1..]).unwrap();
        let score = model.coherence_score(&mut tape, mem).unwrap();
        let sq = tape.mul(score, score).unwrap();
        let loss = tape.add(nll, sq).unwrap();
        tape.backward(loss).unwrap();
        let mut grads = model.store().clone();
        grads.zero_all_grads();
        tape.accum_param_grads(&mut grads);
        drop(tape);

        let eps = 1e-5;
        for name in [
            "embed.tok",
            "enc.0.attn.wq",
            "enc.0.ffn.w1",
            "dec.0.cross_attn.wv",
            "dec.0.self_attn.bo",
            "out.bias",
            "regressor.w",
            "enc.final_ln.g",
        ] {
            let id = model.store().id(name).unwrap();
            let n = model.store().entry(id).value.len();
            for i in 0..n {
                let orig = model.store().entry(id).value[i];
                model.store_mut().entry_mut(id).value[i] = orig + eps;
                let up = loss_of(&model);
                model.store_mut().entry_mut(id).value[i] = orig - eps;
                let down = loss_of(&model);
                model.store_mut().entry_mut(id).value[i] = orig;
                let numeric = (up - down) / (2.0 * eps);
                let analytic = grads.entry(id).grad[i];
                let rel =
                    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
                assert!(
                    rel <= 1e-5,
                    "{name}[{i}]: analytic {analytic} vs numeric {numeric} (rel {rel})"
                );
            }
        }
    }

    #[test]
    fn checkpoint_roundtrip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let model: Model<f32> = Model::new(tiny_config(), 21).unwrap();
        model.save(&path).unwrap();
        let loaded: Model<f32> = Model::load(&path).unwrap();
        assert_eq!(loaded.config(), model.config());
        for ((_, a), (_, b)) in model.store().iter().zip(loaded.store().iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.shape, b.shape);
            let ab: Vec<u32> = a.value.iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u32> = b.value.iter().map(|v| v.to_bits()).collect();
            assert_eq!(ab, bb, "{}", a.name);
        }
    }

    #[test]
    fn checkpoint_rejects_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let model: Model<f32> = Model::new(tiny_config(), 21).unwrap();
        model.save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();

        // Truncated payload.
        let cut = path.with_file_name("cut.ckpt");
        std::fs::write(&cut, &bytes[..bytes.len() - 8]).unwrap();
        assert!(matches!(
            Model::<f32>::load(&cut),
            Err(ModelError::Checkpoint(_))
        ));

        // Garbled header.
        let bad = path.with_file_name("bad.ckpt");
        let mut garbled = bytes.clone();
        garbled[0] = b'!';
        std::fs::write(&bad, garbled).unwrap();
        assert!(matches!(
            Model::<f32>::load(&bad),
            Err(ModelError::Checkpoint(_))
        ));

        // No newline at all.
        let flat = path.with_file_name("flat.ckpt");
        std::fs::write(&flat, b"{}").unwrap();
        assert!(matches!(
            Model::<f32>::load(&flat),
            Err(ModelError::Checkpoint(_))
        ));
    }
}
