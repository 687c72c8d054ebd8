//! Tokenization, vocabulary construction, and per-example extended-vocabulary
//! bookkeeping for the pointer mechanism.

pub mod bpe;
pub mod vocab;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use bpe::{BpeModel, WORD_END};
pub use vocab::{Vocabulary, BOS, EOS, PAD, SPECIAL_TOKENS, UNK};

/// Lowercased whitespace tokenization. Punctuation is assumed to be already
/// separated (CNN/DailyMail-style preprocessed text).
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(|w| w.to_lowercase()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenizerMode {
    Word,
    Bpe,
}

impl FromStr for TokenizerMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "word" => Ok(TokenizerMode::Word),
            "bpe" => Ok(TokenizerMode::Bpe),
            other => Err(Error::Config(format!("unknown tokenizer mode: {other}"))),
        }
    }
}

impl fmt::Display for TokenizerMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TokenizerMode::Word => write!(f, "word"),
            TokenizerMode::Bpe => write!(f, "bpe"),
        }
    }
}

/// One article/summary pair mapped to ids, with the per-example extended
/// vocabulary used by the pointer mechanism.
///
/// `source_ext_ids` mirrors `source_ids` except that out-of-vocabulary
/// positions carry `vocab_size + slot` instead of `UNK`; `oov_map[slot]` is
/// the surface form. Target sequences are bracketed by BOS/EOS.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedPair {
    pub source_ids: Vec<usize>,
    pub source_ext_ids: Vec<usize>,
    pub target_ids: Vec<usize>,
    /// Loss targets when the pointer is enabled: in-vocabulary ids, or the
    /// extended id when the summary word can be copied from the source.
    pub target_ext_ids: Vec<usize>,
    pub oov_map: Vec<String>,
}

impl EncodedPair {
    pub fn oov_count(&self) -> usize {
        self.oov_map.len()
    }
}

/// Source side of an encoded example (what generation needs).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SourceEncoding {
    pub ids: Vec<usize>,
    pub ext_ids: Vec<usize>,
    pub oov_map: Vec<String>,
}

/// A vocabulary plus the segmentation it was built over.
#[derive(Debug, Clone)]
pub struct Tokenizer {
    mode: TokenizerMode,
    vocab: Vocabulary,
    bpe: Option<BpeModel>,
}

impl Tokenizer {
    pub fn word(vocab: Vocabulary) -> Tokenizer {
        Tokenizer { mode: TokenizerMode::Word, vocab, bpe: None }
    }

    pub fn bpe(vocab: Vocabulary, model: BpeModel) -> Tokenizer {
        Tokenizer { mode: TokenizerMode::Bpe, vocab, bpe: Some(model) }
    }

    pub fn mode(&self) -> TokenizerMode {
        self.mode
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn bpe_model(&self) -> Option<&BpeModel> {
        self.bpe.as_ref()
    }

    /// The unit stream the model sees: words, or BPE subwords.
    pub fn surface_units(&self, text: &str) -> Vec<String> {
        match self.mode {
            TokenizerMode::Word => tokenize(text),
            TokenizerMode::Bpe => self.bpe.as_ref().expect("bpe tokenizer").encode_text(text),
        }
    }

    /// Encode a source text: tokenize, truncate to `truncate_len` units, map
    /// to ids with UNK for out-of-vocabulary units, and assign extended ids
    /// to OOV units in first-occurrence order.
    pub fn encode_source(&self, text: &str, truncate_len: usize) -> Result<SourceEncoding> {
        let mut units = self.surface_units(text);
        if units.is_empty() {
            return Err(Error::Input("source text is empty after tokenization".to_string()));
        }
        units.truncate(truncate_len);
        let mut ids = Vec::with_capacity(units.len());
        let mut ext_ids = Vec::with_capacity(units.len());
        let mut oov_map: Vec<String> = Vec::new();
        for unit in &units {
            match self.vocab.id(unit) {
                Some(id) => {
                    ids.push(id);
                    ext_ids.push(id);
                }
                None => {
                    ids.push(UNK);
                    let slot = match oov_map.iter().position(|w| w == unit) {
                        Some(slot) => slot,
                        None => {
                            oov_map.push(unit.clone());
                            oov_map.len() - 1
                        }
                    };
                    ext_ids.push(self.vocab.size() + slot);
                }
            }
        }
        Ok(SourceEncoding { ids, ext_ids, oov_map })
    }

    /// Encode a target text bracketed by BOS/EOS. The extended variant keeps
    /// UNK unless the unit appears in the source's OOV map, in which case the
    /// extended id is used so the loss can reward copying.
    pub fn encode_target(
        &self,
        text: &str,
        oov_map: &[String],
        max_len: usize,
    ) -> Result<(Vec<usize>, Vec<usize>)> {
        let mut units = self.surface_units(text);
        if units.is_empty() {
            return Err(Error::Input("target text is empty after tokenization".to_string()));
        }
        units.truncate(max_len);
        let mut ids = vec![BOS];
        let mut ext_ids = vec![BOS];
        for unit in &units {
            match self.vocab.id(unit) {
                Some(id) => {
                    ids.push(id);
                    ext_ids.push(id);
                }
                None => {
                    ids.push(UNK);
                    match oov_map.iter().position(|w| w == unit) {
                        Some(slot) => ext_ids.push(self.vocab.size() + slot),
                        None => ext_ids.push(UNK),
                    }
                }
            }
        }
        ids.push(EOS);
        ext_ids.push(EOS);
        Ok((ids, ext_ids))
    }

    pub fn encode_pair(
        &self,
        article: &str,
        summary: &str,
        truncate_len: usize,
        max_target_len: usize,
    ) -> Result<EncodedPair> {
        let src = self.encode_source(article, truncate_len)?;
        let (target_ids, target_ext_ids) =
            self.encode_target(summary, &src.oov_map, max_target_len)?;
        Ok(EncodedPair {
            source_ids: src.ids,
            source_ext_ids: src.ext_ids,
            target_ids,
            target_ext_ids,
            oov_map: src.oov_map,
        })
    }

    /// Map generated ids back to text. Special ids are dropped; extended ids
    /// resolve through the per-example OOV map.
    pub fn decode_ids(&self, ids: &[usize], oov_map: &[String]) -> Result<String> {
        let mut units: Vec<String> = Vec::with_capacity(ids.len());
        for &id in ids {
            if id == PAD || id == UNK || id == BOS || id == EOS {
                continue;
            }
            if id < self.vocab.size() {
                units.push(self.vocab.token(id).expect("dense vocabulary id").to_string());
            } else {
                let slot = id - self.vocab.size();
                let unit = oov_map.get(slot).ok_or_else(|| {
                    Error::Index(format!(
                        "extended id {id} has no entry in the OOV map (len {})",
                        oov_map.len()
                    ))
                })?;
                units.push(unit.clone());
            }
        }
        Ok(match self.mode {
            TokenizerMode::Word => units.join(" "),
            TokenizerMode::Bpe => BpeModel::decode_tokens(&units),
        })
    }
}
