//! Beam-search generation with duplicate n-gram blocking, length penalty, and
//! length bounds.

use crate::error::{Error, Result};
use crate::model::{Memory, Model};
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tokenizer::{BOS, EOS};

#[derive(Debug, Clone, PartialEq)]
pub struct BeamConfig {
    pub beam_size: usize,
    /// Size of the n-grams that may not repeat; 0 disables blocking.
    pub no_repeat_ngram: usize,
    pub length_penalty_alpha: f64,
    /// Minimum/maximum generated length, counting neither BOS nor EOS.
    pub min_len: usize,
    pub max_len: usize,
}

impl Default for BeamConfig {
    fn default() -> BeamConfig {
        BeamConfig {
            beam_size: 10,
            no_repeat_ngram: 3,
            length_penalty_alpha: 2.0,
            min_len: 50,
            max_len: 120,
        }
    }
}

impl BeamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam_size == 0 {
            return Err(Error::Config("beam_size must be at least 1".into()));
        }
        if self.min_len > self.max_len {
            return Err(Error::Config(format!(
                "min_len {} exceeds max_len {}",
                self.min_len, self.max_len
            )));
        }
        Ok(())
    }
}

/// A partial decoded sequence. `tokens` starts with BOS; `log_prob` is the
/// sum of the chosen per-step log-probabilities; finished hypotheses carry a
/// trailing EOS and are never extended.
#[derive(Debug, Clone)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    pub finished: bool,
}

impl Hypothesis {
    fn start(bos: usize) -> Hypothesis {
        Hypothesis { tokens: vec![bos], log_prob: 0.0, finished: false }
    }

    /// Generated length: tokens excluding BOS and any trailing EOS.
    pub fn generated_len(&self) -> usize {
        self.tokens.len() - 1 - usize::from(self.finished)
    }

    /// Length-penalized ranking score.
    pub fn score(&self, alpha: f64) -> f64 {
        self.log_prob / length_penalty(self.generated_len().max(1), alpha)
    }
}

/// Anything that can score the next token of a prefix. The prefix always
/// starts with BOS; returned log-probabilities cover the full (possibly
/// extended) output vocabulary.
pub trait StepScorer {
    fn vocab_size(&self) -> usize;
    fn bos_id(&self) -> usize {
        BOS
    }
    fn eos_id(&self) -> usize {
        EOS
    }
    fn step_logprobs(&self, prefix: &[usize]) -> Result<Vec<f64>>;
}

/// GNMT-style length penalty divisor `((5 + len) / 6)^alpha`.
pub fn length_penalty(length: usize, alpha: f64) -> f64 {
    ((5.0 + length as f64) / 6.0).powf(alpha)
}

/// Set to -inf the log-probability of every token that would complete an
/// n-gram already present in the hypothesis. `n == 0` disables blocking.
pub fn block_repeat_ngrams(hyp_tokens: &[usize], logits: &mut [f64], n: usize) {
    if n == 0 || hyp_tokens.len() < n {
        return;
    }
    let prefix = &hyp_tokens[hyp_tokens.len() - (n - 1)..];
    for window in hyp_tokens.windows(n) {
        if &window[..n - 1] == prefix {
            let banned = window[n - 1];
            if banned < logits.len() {
                logits[banned] = f64::NEG_INFINITY;
            }
        }
    }
}

/// Length-normalized beam search.
///
/// Each step expands every live hypothesis with its top `beam_size` tokens
/// and keeps the `beam_size` best extensions by cumulative log-probability;
/// EOS is masked out before `min_len` generated tokens and forced once
/// `max_len` is reached. Finished hypotheses compete by penalized score. The
/// returned token sequence includes BOS and EOS.
pub fn beam_search<S: StepScorer>(scorer: &S, config: &BeamConfig) -> Result<Vec<usize>> {
    config.validate()?;
    let eos = scorer.eos_id();
    let mut live = vec![Hypothesis::start(scorer.bos_id())];
    let mut finished: Vec<Hypothesis> = Vec::new();

    while !live.is_empty() {
        let mut candidates: Vec<(usize, usize, f64)> = Vec::new(); // (hyp, token, cum)
        for (h, hyp) in live.iter().enumerate() {
            let mut logits = scorer.step_logprobs(&hyp.tokens)?;
            if eos >= logits.len() {
                return Err(Error::Contract(format!(
                    "scorer produced {} log-probabilities, EOS id {eos} not covered",
                    logits.len()
                )));
            }
            block_repeat_ngrams(&hyp.tokens, &mut logits, config.no_repeat_ngram);
            let generated = hyp.tokens.len() - 1;
            if generated < config.min_len {
                logits[eos] = f64::NEG_INFINITY;
            }
            if generated >= config.max_len {
                // only EOS may extend a maximum-length hypothesis
                candidates.push((h, eos, hyp.log_prob + logits[eos]));
                continue;
            }
            let mut order: Vec<usize> = (0..logits.len()).collect();
            order.sort_by(|&a, &b| {
                logits[b].partial_cmp(&logits[a]).unwrap_or(std::cmp::Ordering::Equal)
            });
            for &tok in order.iter().take(config.beam_size) {
                if logits[tok] == f64::NEG_INFINITY {
                    continue;
                }
                candidates.push((h, tok, hyp.log_prob + logits[tok]));
            }
        }
        candidates.sort_by(|a, b| b.2.partial_cmp(&a.2).unwrap_or(std::cmp::Ordering::Equal));

        let mut next_live = Vec::with_capacity(config.beam_size);
        for (h, tok, cum) in candidates {
            let mut tokens = live[h].tokens.clone();
            tokens.push(tok);
            if tok == eos {
                finished.push(Hypothesis { tokens, log_prob: cum, finished: true });
            } else if next_live.len() < config.beam_size {
                next_live.push(Hypothesis { tokens, log_prob: cum, finished: false });
            }
        }
        live = next_live;
    }

    let alpha = config.length_penalty_alpha;
    finished
        .into_iter()
        .max_by(|a, b| {
            a.score(alpha).partial_cmp(&b.score(alpha)).unwrap_or(std::cmp::Ordering::Equal)
        })
        .map(|h| h.tokens)
        .ok_or_else(|| Error::Contract("beam search finished no hypothesis".into()))
}

/// Beam-search adapter over an encoded source and a trained model.
pub struct ModelScorer<'a, T: Scalar> {
    model: &'a Model<T>,
    memory: Memory<T>,
}

impl<'a, T: Scalar> ModelScorer<'a, T> {
    pub fn new(model: &'a Model<T>, memory: Memory<T>) -> ModelScorer<'a, T> {
        ModelScorer { model, memory }
    }

    pub fn memory(&self) -> &Memory<T> {
        &self.memory
    }
}

impl<T: Scalar> StepScorer for ModelScorer<'_, T> {
    fn vocab_size(&self) -> usize {
        self.model.config.vocab_size + self.memory.oov_count
    }

    fn step_logprobs(&self, prefix: &[usize]) -> Result<Vec<f64>> {
        let tape = Tape::inference();
        let logs = self.model.decode_logprobs(&tape, &self.memory, prefix)?;
        let width = logs.shape()[1];
        let data = logs.data();
        let last = &data[(prefix.len() - 1) * width..prefix.len() * width];
        Ok(last.iter().map(|v| v.to_f()).collect())
    }
}

/// Decode one encoded source into generated token ids (extended ids included
/// when the pointer is enabled); BOS/EOS are stripped.
pub fn summarize_ids<T: Scalar>(
    model: &Model<T>,
    src_ids: &[usize],
    src_ext_ids: &[usize],
    oov_count: usize,
    config: &BeamConfig,
) -> Result<Vec<usize>> {
    let tape = Tape::inference();
    let memory = model.encode_memory(&tape, src_ids, src_ext_ids, oov_count)?;
    let scorer = ModelScorer::new(model, memory);
    let tokens = beam_search(&scorer, config)?;
    Ok(tokens.into_iter().filter(|&t| t != BOS && t != EOS).collect())
}
