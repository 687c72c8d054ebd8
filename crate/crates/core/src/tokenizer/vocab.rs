//! Fixed vocabulary with reserved special symbols.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const BOS: usize = 2;
pub const EOS: usize = 3;

pub const SPECIAL_TOKENS: [&str; 4] = ["<pad>", "<unk>", "<bos>", "<eos>"];

/// Bijective token/id map. Ids are dense in `[0, size)` with the four
/// specials pinned to ids 0..4.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    id_to_token: Vec<String>,
    token_to_id: HashMap<String, usize>,
    max_size: usize,
}

impl Vocabulary {
    /// Keep the `max_size - 4` most frequent tokens (ties broken by
    /// lexicographic order) on top of the specials.
    pub fn build<I, S>(tokens: I, max_size: usize) -> Result<Vocabulary>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        if max_size < SPECIAL_TOKENS.len() + 1 {
            return Err(Error::Config(format!(
                "vocabulary max_size {max_size} leaves no room beyond the {} specials",
                SPECIAL_TOKENS.len()
            )));
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        for tok in tokens {
            let tok = tok.as_ref();
            if tok.is_empty() || SPECIAL_TOKENS.contains(&tok) {
                continue;
            }
            *counts.entry(tok.to_string()).or_insert(0) += 1;
        }
        let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        ranked.truncate(max_size - SPECIAL_TOKENS.len());

        let mut id_to_token: Vec<String> =
            SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        id_to_token.extend(ranked.into_iter().map(|(t, _)| t));
        Ok(Vocabulary::from_tokens(id_to_token, max_size))
    }

    fn from_tokens(id_to_token: Vec<String>, max_size: usize) -> Vocabulary {
        let token_to_id =
            id_to_token.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocabulary { id_to_token, token_to_id, max_size }
    }

    pub fn size(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn max_size(&self) -> usize {
        self.max_size
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.token_to_id.get(token).copied()
    }

    /// Vocabulary id for a token, falling back to `UNK`.
    pub fn id_or_unk(&self, token: &str) -> usize {
        self.id(token).unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.id_to_token.get(id).map(|s| s.as_str())
    }

    pub fn contains(&self, token: &str) -> bool {
        self.token_to_id.contains_key(token)
    }

    /// One token per line; the line number is the id.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        for tok in &self.id_to_token {
            writeln!(f, "{tok}")?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Vocabulary> {
        let f = std::fs::File::open(path)?;
        let mut id_to_token = Vec::new();
        for line in BufReader::new(f).lines() {
            id_to_token.push(line?);
        }
        if id_to_token.len() < SPECIAL_TOKENS.len() {
            return Err(Error::Input(format!(
                "vocabulary file {} has fewer lines than the {} specials",
                path.display(),
                SPECIAL_TOKENS.len()
            )));
        }
        for (i, s) in SPECIAL_TOKENS.iter().enumerate() {
            if id_to_token[i] != *s {
                return Err(Error::Input(format!(
                    "vocabulary file {}: line {i} must be {s}, found {}",
                    path.display(),
                    id_to_token[i]
                )));
            }
        }
        let size = id_to_token.len();
        Ok(Vocabulary::from_tokens(id_to_token, size))
    }

    /// Content fingerprint used to reject checkpoint/vocabulary mismatches.
    pub fn content_hash(&self) -> String {
        let mut hasher = Sha256::new();
        for tok in &self.id_to_token {
            hasher.update(tok.as_bytes());
            hasher.update(b"\n");
        }
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frequency_then_lexicographic_order() {
        let v = Vocabulary::build("a a b".split_whitespace(), 6).unwrap();
        assert_eq!(v.size(), 6);
        assert!(v.id("a").unwrap() < v.id("b").unwrap());
        assert_eq!(v.id("a"), Some(4));
    }

    #[test]
    fn capacity_evicts_rare_tokens() {
        let v = Vocabulary::build("x y y".split_whitespace(), 5).unwrap();
        assert!(v.contains("y"));
        assert!(!v.contains("x"));
        assert_eq!(v.id_or_unk("x"), UNK);
    }

    #[test]
    fn too_small_capacity_is_a_config_error() {
        assert!(Vocabulary::build(["a"], 4).is_err());
    }

    #[test]
    fn matches_count_sort_oracle_on_random_corpus() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let words: Vec<String> = (0..100).map(|_| format!("w{}", rng.gen_range(0..30))).collect();
        let v = Vocabulary::build(words.iter(), 14).unwrap();

        // independent count-and-sort oracle
        let mut counts: Vec<(String, usize)> = Vec::new();
        for w in &words {
            match counts.iter_mut().find(|(t, _)| t == w) {
                Some((_, c)) => *c += 1,
                None => counts.push((w.clone(), 1)),
            }
        }
        counts.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        for (rank, (tok, _)) in counts.iter().take(10).enumerate() {
            assert_eq!(v.id(tok), Some(4 + rank), "token {tok}");
        }
        for (tok, _) in counts.iter().skip(10) {
            assert!(!v.contains(tok));
        }
    }

    #[test]
    fn save_load_keeps_ids_stable() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        let v = Vocabulary::build("the cat sat on the mat".split_whitespace(), 20).unwrap();
        v.save(&path).unwrap();
        let loaded = Vocabulary::load(&path).unwrap();
        assert_eq!(v.size(), loaded.size());
        for id in 0..v.size() {
            assert_eq!(v.token(id), loaded.token(id));
        }
        assert_eq!(v.content_hash(), loaded.content_hash());
    }
}
