//! Byte pair encoding over characters, with an attached end-of-word marker.
//!
//! A word is split into single characters with the marker glued onto the last
//! one (`"word"` becomes `w o r d</w>`), then learned merges are applied in
//! rank order. Decoding concatenates tokens and turns markers back into word
//! boundaries, so `decode(encode(w)) == w` for any word.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const WORD_END: &str = "</w>";

#[derive(Debug, Clone, Default)]
pub struct BpeModel {
    merges: Vec<(String, String)>,
}

fn word_symbols(word: &str) -> Vec<String> {
    let chars: Vec<char> = word.chars().collect();
    let mut syms: Vec<String> = chars.iter().map(|c| c.to_string()).collect();
    if let Some(last) = syms.last_mut() {
        last.push_str(WORD_END);
    }
    syms
}

/// Merge every adjacent occurrence of `pair`, scanning left to right.
fn apply_merge(symbols: &mut Vec<String>, pair: &(String, String)) {
    let mut i = 0;
    while i + 1 < symbols.len() {
        if symbols[i] == pair.0 && symbols[i + 1] == pair.1 {
            let merged = format!("{}{}", symbols[i], symbols[i + 1]);
            symbols[i] = merged;
            symbols.remove(i + 1);
        } else {
            i += 1;
        }
    }
}

impl BpeModel {
    pub fn new(merges: Vec<(String, String)>) -> Self {
        BpeModel { merges }
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    /// Learn up to `num_merges` merges from whitespace-tokenized `corpus`.
    ///
    /// Each round counts adjacent symbol pairs over the word-frequency table
    /// (overlapping occurrences included), merges the most frequent pair with
    /// lexicographic tie-breaking, and stops early once no pair occurs at
    /// least twice.
    pub fn learn<I, S>(corpus: I, num_merges: usize) -> BpeModel
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut word_freq: HashMap<String, usize> = HashMap::new();
        for text in corpus {
            for word in text.as_ref().split_whitespace() {
                *word_freq.entry(word.to_lowercase()).or_insert(0) += 1;
            }
        }
        let mut table: Vec<(Vec<String>, usize)> =
            word_freq.into_iter().map(|(w, c)| (word_symbols(&w), c)).collect();

        let mut merges = Vec::new();
        for _ in 0..num_merges {
            let mut pair_counts: HashMap<(String, String), usize> = HashMap::new();
            for (syms, freq) in &table {
                for w in syms.windows(2) {
                    *pair_counts.entry((w[0].clone(), w[1].clone())).or_insert(0) += freq;
                }
            }
            let mut best: Option<(&(String, String), usize)> = None;
            for (pair, count) in &pair_counts {
                best = match best {
                    None => Some((pair, *count)),
                    Some((bp, bc)) => {
                        if *count > bc || (*count == bc && pair < bp) {
                            Some((pair, *count))
                        } else {
                            Some((bp, bc))
                        }
                    }
                };
            }
            let Some((pair, count)) = best else { break };
            if count < 2 {
                break;
            }
            let pair = pair.clone();
            for (syms, _) in table.iter_mut() {
                apply_merge(syms, &pair);
            }
            merges.push(pair);
        }
        BpeModel { merges }
    }

    /// Segment one word by applying the learned merges in rank order.
    /// Characters never seen at training time pass through as singletons.
    pub fn encode_word(&self, word: &str) -> Vec<String> {
        let mut syms = word_symbols(word);
        if syms.is_empty() {
            return syms;
        }
        for pair in &self.merges {
            if syms.len() < 2 {
                break;
            }
            apply_merge(&mut syms, pair);
        }
        syms
    }

    /// Segment whitespace-separated text into a flat subword stream.
    pub fn encode_text(&self, text: &str) -> Vec<String> {
        text.split_whitespace().flat_map(|w| self.encode_word(&w.to_lowercase())).collect()
    }

    /// Inverse of encoding: concatenate subwords and turn end-of-word markers
    /// into spaces.
    pub fn decode_tokens<S: AsRef<str>>(tokens: &[S]) -> String {
        let mut out = String::new();
        for tok in tokens {
            out.push_str(tok.as_ref());
        }
        out.replace(WORD_END, " ").trim_end().to_string()
    }

    /// One `left right` pair per line, rank order.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        for (a, b) in &self.merges {
            writeln!(f, "{a} {b}")?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<BpeModel> {
        let f = std::fs::File::open(path)?;
        let mut merges = Vec::new();
        for (lineno, line) in BufReader::new(f).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.splitn(2, ' ');
            match (parts.next(), parts.next()) {
                (Some(a), Some(b)) if !a.is_empty() && !b.is_empty() => {
                    merges.push((a.to_string(), b.to_string()));
                }
                _ => {
                    return Err(Error::Input(format!(
                        "merges file {}: line {} is not a 'left right' pair",
                        path.display(),
                        lineno + 1
                    )));
                }
            }
        }
        Ok(BpeModel { merges })
    }
}
