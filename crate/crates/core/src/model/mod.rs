//! The aggregation Transformer: embeddings, encoder/decoder stacks, history
//! aggregation between them, and the pointer-augmented output layer.

pub mod aggregate;
pub mod attention;
pub mod layers;
pub mod params;
pub mod pointer;
pub mod reference;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::Mask;
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::tokenizer::{EncodedPair, PAD, UNK};

pub use aggregate::{aggregate_add, aggregate_attention, aggregate_projection};
pub use attention::{multi_head_attention, scaled_dot_attention, MhWeights};
pub use layers::{decoder_layer, encoder_layer, feed_forward, positional_encoding, LN_EPS};
pub use params::{parameter_specs, Init, ParamSpec, ParameterSet};
pub use pointer::{final_distribution, pointer_gate};

/// How the encoder's final states are re-distributed with layer history.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AggMethod {
    None,
    Add,
    Projection,
    Attention,
}

impl FromStr for AggMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(AggMethod::None),
            "add" => Ok(AggMethod::Add),
            "projection" => Ok(AggMethod::Projection),
            "attention" => Ok(AggMethod::Attention),
            other => Err(Error::Config(format!("unknown aggregation method: {other}"))),
        }
    }
}

impl fmt::Display for AggMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            AggMethod::None => "none",
            AggMethod::Add => "add",
            AggMethod::Projection => "projection",
            AggMethod::Attention => "attention",
        };
        write!(f, "{s}")
    }
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_enc: usize,
    pub n_dec: usize,
    pub d_ff: usize,
    pub dropout: f64,
    /// Number of pre-final encoder layers feeding the aggregation window (L).
    pub agg_layers: usize,
    pub agg_method: AggMethod,
    pub use_pointer: bool,
    pub vocab_size: usize,
    pub max_positions: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.d_model % 2 != 0 {
            return Err(Error::Config(format!(
                "d_model must be positive and even, got {}",
                self.d_model
            )));
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "n_heads {} must divide d_model {}",
                self.n_heads, self.d_model
            )));
        }
        if self.n_enc == 0 || self.n_dec == 0 {
            return Err(Error::Config("layer counts must be at least 1".into()));
        }
        if self.d_ff == 0 {
            return Err(Error::Config("d_ff must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.vocab_size < 5 {
            return Err(Error::Config(format!(
                "vocab_size {} leaves no room beyond the specials",
                self.vocab_size
            )));
        }
        if self.max_positions < 2 {
            return Err(Error::Config("max_positions must be at least 2".into()));
        }
        if self.agg_method != AggMethod::None
            && (self.agg_layers == 0 || self.agg_layers > self.n_enc - 1)
        {
            return Err(Error::Config(format!(
                "agg_layers {} must satisfy 1 <= L <= N_enc - 1 = {}",
                self.agg_layers,
                self.n_enc - 1
            )));
        }
        Ok(())
    }

    /// Analytic count of learnable elements implied by this configuration.
    pub fn parameter_count(&self) -> usize {
        let d = self.d_model;
        let mh = 4 * d * d;
        let pff = d * self.d_ff + self.d_ff + self.d_ff * d + d;
        let ln = 2 * d;
        let enc_layer = mh + pff + 2 * ln;
        let dec_layer = 2 * mh + pff + 3 * ln;
        let mut total = self.vocab_size * d
            + self.n_enc * enc_layer
            + self.n_dec * dec_layer
            + d * self.vocab_size
            + self.vocab_size;
        if self.use_pointer {
            total += d + 1 + self.max_positions;
        }
        total += match self.agg_method {
            AggMethod::None | AggMethod::Add => 0,
            AggMethod::Projection => self.agg_layers * d * d + d + mh,
            AggMethod::Attention => (self.agg_layers + 1) * mh,
        };
        total
    }
}

/// Encoder output bundle: the embedded input and every layer's states.
pub struct EncoderStates<T: Scalar> {
    /// Word embeddings plus positional encodings (layer 0).
    pub embedded: Tensor<T>,
    /// Per-layer outputs, index `l` holding layer `l+1`'s states.
    pub layer_outputs: Vec<Tensor<T>>,
}

/// Everything generation needs from the source side.
pub struct Memory<T: Scalar> {
    /// Cross-attention keys/values: the aggregated (or final-layer) states.
    pub states: Tensor<T>,
    /// Per-position key mask (false at PAD).
    pub src_allowed: Vec<bool>,
    pub src_ext_ids: Vec<usize>,
    pub oov_count: usize,
}

/// Teacher-forced forward results.
pub struct ForwardOutput<T: Scalar> {
    /// Log of the final per-step distribution, `[tgt_len, vocab + oov]`.
    pub log_final: Tensor<T>,
    pub p_final: Tensor<T>,
    pub p_vocab: Tensor<T>,
    /// Copy attention over source positions (pointer mode only).
    pub alpha: Option<Tensor<T>>,
    /// Generation gate per step (pointer mode only).
    pub p_gen: Option<Tensor<T>>,
}

pub struct Model<T: Scalar> {
    pub config: ModelConfig,
    pub params: ParameterSet<T>,
    position_table: Tensor<T>,
}

impl<T: Scalar> Model<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Model<T>> {
        config.validate()?;
        let params = ParameterSet::init(&config, seed);
        let position_table = positional_encoding(config.max_positions, config.d_model);
        Ok(Model { config, params, position_table })
    }

    /// Wrap restored parameters (checkpoint load) into a model.
    pub fn with_params(config: ModelConfig, params: ParameterSet<T>) -> Result<Model<T>> {
        config.validate()?;
        let position_table = positional_encoding(config.max_positions, config.d_model);
        Ok(Model { config, params, position_table })
    }

    pub fn position_table(&self) -> &Tensor<T> {
        &self.position_table
    }

    /// Token embedding plus positional encoding, with embedding dropout.
    /// Ids at or above the vocabulary (extended ids) embed as UNK.
    fn embed(&self, tape: &Tape<T>, ids: &[usize]) -> Result<Tensor<T>> {
        if ids.is_empty() {
            return Err(Error::Input("cannot embed an empty sequence".into()));
        }
        if ids.len() > self.config.max_positions {
            return Err(Error::Input(format!(
                "sequence length {} exceeds max_positions {}",
                ids.len(),
                self.config.max_positions
            )));
        }
        let mapped: Vec<usize> = ids
            .iter()
            .map(|&id| if id >= self.config.vocab_size { UNK } else { id })
            .collect();
        let emb = tape.embedding(self.params.get("embed.tok"), &mapped)?;
        let pe = tape.slice_axis0(&self.position_table, 0, ids.len())?;
        let u = tape.add(&emb, &pe)?;
        tape.dropout(&u, self.config.dropout)
    }

    /// Run the encoder stack, returning every layer's output (the
    /// aggregation window needs the history, not just the last layer).
    pub fn encode(&self, tape: &Tape<T>, src_ids: &[usize]) -> Result<EncoderStates<T>> {
        let key_mask = source_mask(src_ids);
        let embedded = self.embed(tape, src_ids)?;
        let mut layer_outputs = Vec::with_capacity(self.config.n_enc);
        let mut x = embedded.clone();
        for l in 0..self.config.n_enc {
            x = encoder_layer(
                tape,
                &x,
                &self.params.mh(&format!("enc.{l}.self")),
                &self.params.ff(&format!("enc.{l}.ff")),
                &self.params.norm(&format!("enc.{l}.ln1")),
                &self.params.norm(&format!("enc.{l}.ln2")),
                key_mask.as_ref(),
                self.config.n_heads,
                self.config.dropout,
            )?;
            layer_outputs.push(x.clone());
        }
        Ok(EncoderStates { embedded, layer_outputs })
    }

    /// Encode the source and apply the configured aggregation, yielding the
    /// states the decoder (and the pointer) will read.
    pub fn encode_memory(
        &self,
        tape: &Tape<T>,
        src_ids: &[usize],
        src_ext_ids: &[usize],
        oov_count: usize,
    ) -> Result<Memory<T>> {
        if src_ids.is_empty() {
            return Err(Error::Input("empty source sequence".into()));
        }
        if src_ids.len() != src_ext_ids.len() {
            return Err(Error::Input(format!(
                "source id and extended id lengths differ: {} vs {}",
                src_ids.len(),
                src_ext_ids.len()
            )));
        }
        let key_mask = source_mask(src_ids);
        let enc = self.encode(tape, src_ids)?;
        let states = match self.config.agg_method {
            AggMethod::None => enc.layer_outputs.last().expect("n_enc >= 1").clone(),
            AggMethod::Add => aggregate_add(tape, &enc.layer_outputs, self.config.agg_layers)?,
            AggMethod::Projection => aggregate_projection(
                tape,
                &self.params,
                &enc.layer_outputs,
                self.config.agg_layers,
                key_mask.as_ref(),
                self.config.n_heads,
            )?,
            AggMethod::Attention => aggregate_attention(
                tape,
                &self.params,
                &enc.embedded,
                &enc.layer_outputs,
                self.config.agg_layers,
                key_mask.as_ref(),
                self.config.n_heads,
            )?,
        };
        Ok(Memory {
            states,
            src_allowed: src_ids.iter().map(|&id| id != PAD).collect(),
            src_ext_ids: src_ext_ids.to_vec(),
            oov_count,
        })
    }

    /// Run the decoder stack over a (teacher-forced or partial) target
    /// prefix, returning the final decoder states `[tgt_len, d_model]`.
    pub fn decode_states(
        &self,
        tape: &Tape<T>,
        memory: &Memory<T>,
        target_in_ids: &[usize],
    ) -> Result<Tensor<T>> {
        let causal = Mask::causal(target_in_ids.len());
        let memory_mask = Mask::keys(memory.src_allowed.clone());
        let mut y = self.embed(tape, target_in_ids)?;
        for l in 0..self.config.n_dec {
            y = decoder_layer(
                tape,
                &y,
                &memory.states,
                &self.params.mh(&format!("dec.{l}.self")),
                &self.params.mh(&format!("dec.{l}.cross")),
                &self.params.ff(&format!("dec.{l}.ff")),
                &self.params.norm(&format!("dec.{l}.ln1")),
                &self.params.norm(&format!("dec.{l}.ln2")),
                &self.params.norm(&format!("dec.{l}.ln3")),
                &causal,
                Some(&memory_mask),
                self.config.n_heads,
                self.config.dropout,
            )?;
        }
        Ok(y)
    }

    /// Project decoder states into the output distributions.
    fn distributions(
        &self,
        tape: &Tape<T>,
        memory: &Memory<T>,
        decoder_states: &Tensor<T>,
    ) -> Result<ForwardOutput<T>> {
        let logits = tape.add(
            &tape.matmul(decoder_states, self.params.get("out.w"))?,
            self.params.get("out.b"),
        )?;
        let p_vocab = tape.softmax(&logits, 1, None)?;

        if !self.config.use_pointer {
            let log_final = tape.safe_log(&p_vocab)?;
            return Ok(ForwardOutput {
                log_final,
                p_final: p_vocab.clone(),
                p_vocab,
                alpha: None,
                p_gen: None,
            });
        }

        let p_gen = pointer_gate(
            tape,
            decoder_states,
            self.params.get("ptr.w_gen"),
            self.params.get("ptr.b_gen"),
            true,
        )?;
        let src_len = memory.src_allowed.len();
        let scores = tape.add(
            &tape.matmul(decoder_states, &tape.transpose(&memory.states)?)?,
            &tape.slice_axis0(self.params.get("ptr.b_copy"), 0, src_len)?,
        )?;
        let alpha = tape.softmax(&scores, 1, Some(&Mask::keys(memory.src_allowed.clone())))?;
        let p_final = final_distribution(
            tape,
            &p_vocab,
            &alpha,
            &memory.src_ext_ids,
            memory.oov_count,
            &p_gen,
        )?;
        let log_final = tape.safe_log(&p_final)?;
        Ok(ForwardOutput { log_final, p_final, p_vocab, alpha: Some(alpha), p_gen: Some(p_gen) })
    }

    /// Teacher-forced forward pass over an encoded pair: the decoder input is
    /// the BOS-shifted target, and row `t` of the result is the log
    /// distribution over token `t+1`.
    pub fn forward(&self, tape: &Tape<T>, pair: &EncodedPair) -> Result<ForwardOutput<T>> {
        if pair.target_ids.len() < 2 {
            return Err(Error::Input("target must contain BOS and EOS".into()));
        }
        let memory =
            self.encode_memory(tape, &pair.source_ids, &pair.source_ext_ids, pair.oov_count())?;
        let decoder_in = &pair.target_ids[..pair.target_ids.len() - 1];
        let states = self.decode_states(tape, &memory, decoder_in)?;
        self.distributions(tape, &memory, &states)
    }

    /// Log distribution rows for a partial hypothesis during generation.
    pub fn decode_logprobs(
        &self,
        tape: &Tape<T>,
        memory: &Memory<T>,
        prefix: &[usize],
    ) -> Result<Tensor<T>> {
        let states = self.decode_states(tape, memory, prefix)?;
        Ok(self.distributions(tape, memory, &states)?.log_final)
    }
}

/// Key mask excluding PAD positions, or `None` when nothing is padded.
fn source_mask(src_ids: &[usize]) -> Option<Mask> {
    if src_ids.iter().any(|&id| id == PAD) {
        Some(Mask::keys(src_ids.iter().map(|&id| id != PAD).collect()))
    } else {
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::{BOS, EOS};

    pub(crate) fn toy_config(agg: AggMethod, pointer: bool) -> ModelConfig {
        ModelConfig {
            d_model: 8,
            n_heads: 2,
            n_enc: 2,
            n_dec: 2,
            d_ff: 16,
            dropout: 0.0,
            agg_layers: 1,
            agg_method: agg,
            use_pointer: pointer,
            vocab_size: 20,
            max_positions: 16,
        }
    }

    fn toy_pair(oov: bool) -> EncodedPair {
        let (source_ids, source_ext_ids, oov_map) = if oov {
            (vec![5, 1, 7, 1, 9, 6], vec![5, 20, 7, 20, 9, 6], vec!["zzz".to_string()])
        } else {
            (vec![5, 6, 7, 8, 9, 10], vec![5, 6, 7, 8, 9, 10], vec![])
        };
        EncodedPair {
            source_ids,
            source_ext_ids,
            target_ids: vec![BOS, 5, 7, 1, 9, EOS],
            target_ext_ids: vec![BOS, 5, 7, if oov { 20 } else { 1 }, 9, EOS],
            oov_map,
        }
    }

    #[test]
    fn config_validation_catches_bad_head_count() {
        let mut cfg = toy_config(AggMethod::None, false);
        cfg.n_heads = 3;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn config_validation_catches_out_of_range_window() {
        let mut cfg = toy_config(AggMethod::Attention, false);
        cfg.agg_layers = 2; // n_enc - 1 == 1
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn encoder_returns_one_output_per_layer() {
        let mut cfg = toy_config(AggMethod::None, false);
        cfg.n_enc = 1;
        let model = Model::<f64>::new(cfg, 3).unwrap();
        let tape = Tape::inference();
        let enc = model.encode(&tape, &[4, 5, 6]).unwrap();
        assert_eq!(enc.layer_outputs.len(), 1);
        for h in &enc.layer_outputs {
            assert_eq!(h.shape(), &[3, 8]);
        }
    }

    #[test]
    fn too_long_source_is_a_length_error() {
        let model = Model::<f64>::new(toy_config(AggMethod::None, false), 3).unwrap();
        let tape = Tape::inference();
        let ids = vec![5usize; 17];
        assert!(matches!(model.encode(&tape, &ids), Err(Error::Input(_))));
    }

    #[test]
    fn forward_rows_sum_to_one_after_exponentiation() {
        for agg in [AggMethod::None, AggMethod::Add, AggMethod::Projection, AggMethod::Attention] {
            for pointer in [false, true] {
                let model = Model::<f64>::new(toy_config(agg, pointer), 11).unwrap();
                let tape = Tape::inference();
                let out = model.forward(&tape, &toy_pair(pointer)).unwrap();
                let w = out.log_final.shape()[1];
                let data = out.log_final.to_vec();
                for row in data.chunks(w) {
                    let sum: f64 = row.iter().map(|lp| lp.exp()).sum();
                    assert!((sum - 1.0).abs() < 1e-5, "{agg:?}/{pointer}: row sum {sum}");
                }
            }
        }
    }

    #[test]
    fn attention_aggregation_with_one_layer_runs_two_blocks() {
        let mut cfg = toy_config(AggMethod::Attention, false);
        cfg.n_enc = 4;
        let model = Model::<f64>::new(cfg, 5).unwrap();
        let setup = Tape::inference();
        let enc = model.encode(&setup, &[4, 5, 6]).unwrap();
        let tape = Tape::inference();
        aggregate_attention(&tape, &model.params, &enc.embedded, &enc.layer_outputs, 1, None, 2)
            .unwrap();
        assert_eq!(
            tape.count("multi_head_attention"),
            2,
            "L=1 must attend over exactly the last two layers"
        );
    }

    #[test]
    fn extended_prefix_ids_embed_as_unk() {
        let model = Model::<f64>::new(toy_config(AggMethod::None, true), 11).unwrap();
        let pair = toy_pair(true);
        let tape = Tape::inference();
        let memory = model
            .encode_memory(&tape, &pair.source_ids, &pair.source_ext_ids, pair.oov_count())
            .unwrap();
        let with_ext = model.decode_logprobs(&tape, &memory, &[BOS, 20]).unwrap();
        let with_unk = model.decode_logprobs(&tape, &memory, &[BOS, UNK]).unwrap();
        assert_eq!(with_ext.to_vec(), with_unk.to_vec());
    }

    #[test]
    fn agg_parameter_deltas_match_extra_block_sizes() {
        let d = 8usize;
        let base = toy_config(AggMethod::None, false).parameter_count();
        let add = toy_config(AggMethod::Add, false).parameter_count();
        let proj = toy_config(AggMethod::Projection, false).parameter_count();
        let attn = toy_config(AggMethod::Attention, false).parameter_count();
        assert_eq!(add, base);
        assert_eq!(proj - base, d * d + d + 4 * d * d);
        assert_eq!(attn - base, 2 * 4 * d * d);
    }
}
