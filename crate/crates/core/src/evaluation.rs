//! ROUGE-1/2/L scoring and novelty statistics over generated summaries.

use std::collections::{HashMap, HashSet};

use serde::Serialize;

use crate::error::{Error, Result};

/// Precision/recall/F1 triple, all in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RougeScore {
    pub p: f64,
    pub r: f64,
    pub f1: f64,
}

impl RougeScore {
    fn from_counts(overlap: f64, candidate: f64, reference: f64) -> RougeScore {
        let p = if candidate > 0.0 { overlap / candidate } else { 0.0 };
        let r = if reference > 0.0 { overlap / reference } else { 0.0 };
        let f1 = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
        RougeScore { p, r, f1 }
    }

    pub const ZERO: RougeScore = RougeScore { p: 0.0, r: 0.0, f1: 0.0 };
}

/// Mean per-pair ROUGE-1/2/L over a corpus.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RougeReport {
    pub rouge1: RougeScore,
    pub rouge2: RougeScore,
    #[serde(rename = "rougeL")]
    pub rouge_l: RougeScore,
}

/// Ratios of summary n-grams (and sentences) absent from the paired source.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NoveltyReport {
    #[serde(rename = "novel_1gram")]
    pub novel_1gram: f64,
    #[serde(rename = "novel_2gram")]
    pub novel_2gram: f64,
    #[serde(rename = "novel_3gram")]
    pub novel_3gram: f64,
    #[serde(rename = "novel_4gram")]
    pub novel_4gram: f64,
    pub novel_sentences: f64,
}

fn ngram_counts<'a>(tokens: &'a [String], n: usize) -> HashMap<&'a [String], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n && n >= 1 {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped n-gram overlap: precision against the candidate's n-gram count,
/// recall against the reference's. Sequences shorter than `n` score zero.
pub fn rouge_n(candidate: &[String], reference: &[String], n: usize) -> RougeScore {
    assert!(n >= 1, "rouge_n requires n >= 1");
    let cand = ngram_counts(candidate, n);
    let refc = ngram_counts(reference, n);
    let overlap: usize = cand
        .iter()
        .map(|(gram, &c)| c.min(refc.get(gram).copied().unwrap_or(0)))
        .sum();
    let cand_total: usize = cand.values().sum();
    let ref_total: usize = refc.values().sum();
    RougeScore::from_counts(overlap as f64, cand_total as f64, ref_total as f64)
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for ai in a {
        for (j, bj) in b.iter().enumerate() {
            cur[j + 1] = if ai == bj { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Longest-common-subsequence F-measure over whole token sequences.
pub fn rouge_l(candidate: &[String], reference: &[String]) -> RougeScore {
    let lcs = lcs_len(candidate, reference) as f64;
    RougeScore::from_counts(lcs, candidate.len() as f64, reference.len() as f64)
}

/// Arithmetic mean of per-pair ROUGE-1, ROUGE-2, and ROUGE-L.
pub fn evaluate_corpus(
    candidates: &[Vec<String>],
    references: &[Vec<String>],
) -> Result<RougeReport> {
    if candidates.is_empty() {
        return Err(Error::Input("cannot evaluate an empty corpus".into()));
    }
    if candidates.len() != references.len() {
        return Err(Error::Input(format!(
            "candidate/reference counts differ: {} vs {}",
            candidates.len(),
            references.len()
        )));
    }
    let n = candidates.len() as f64;
    let mut sums = [[0.0f64; 3]; 3];
    for (cand, rf) in candidates.iter().zip(references) {
        for (row, score) in
            [rouge_n(cand, rf, 1), rouge_n(cand, rf, 2), rouge_l(cand, rf)].iter().enumerate()
        {
            sums[row][0] += score.p;
            sums[row][1] += score.r;
            sums[row][2] += score.f1;
        }
    }
    let mk = |row: [f64; 3]| RougeScore { p: row[0] / n, r: row[1] / n, f1: row[2] / n };
    Ok(RougeReport { rouge1: mk(sums[0]), rouge2: mk(sums[1]), rouge_l: mk(sums[2]) })
}

fn occurs_contiguously(needle: &[String], haystack: &[String]) -> bool {
    !needle.is_empty()
        && haystack.len() >= needle.len()
        && haystack.windows(needle.len()).any(|w| w == needle)
}

/// Corpus novelty ratios: an n-gram is novel iff it does not occur in the
/// paired source; a sentence is novel iff its token sequence does not occur
/// contiguously in the source. Aggregated over the corpus by total counts.
pub fn novelty_stats(
    summaries: &[Vec<String>],
    sources: &[Vec<String>],
    sentence_delimiters: &[&str],
) -> Result<NoveltyReport> {
    if summaries.len() != sources.len() {
        return Err(Error::Input(format!(
            "summary/source counts differ: {} vs {}",
            summaries.len(),
            sources.len()
        )));
    }
    if summaries.is_empty() {
        return Err(Error::Input("cannot compute novelty of an empty corpus".into()));
    }
    let mut novel = [0usize; 4];
    let mut total = [0usize; 4];
    let (mut novel_sent, mut total_sent) = (0usize, 0usize);

    for (summary, source) in summaries.iter().zip(sources) {
        for n in 1..=4usize {
            if summary.len() < n {
                continue;
            }
            let source_grams: HashSet<&[String]> = if source.len() >= n {
                source.windows(n).collect()
            } else {
                HashSet::new()
            };
            for gram in summary.windows(n) {
                total[n - 1] += 1;
                if !source_grams.contains(gram) {
                    novel[n - 1] += 1;
                }
            }
        }
        for sentence in split_sentences(summary, sentence_delimiters) {
            total_sent += 1;
            if !occurs_contiguously(&sentence, source) {
                novel_sent += 1;
            }
        }
    }
    let ratio = |i: usize| if total[i] > 0 { novel[i] as f64 / total[i] as f64 } else { 0.0 };
    Ok(NoveltyReport {
        novel_1gram: ratio(0),
        novel_2gram: ratio(1),
        novel_3gram: ratio(2),
        novel_4gram: ratio(3),
        novel_sentences: if total_sent > 0 { novel_sent as f64 / total_sent as f64 } else { 0.0 },
    })
}

/// Split a token stream into sentences at delimiter tokens; delimiters are
/// not part of the sentences, empty sentences are skipped.
fn split_sentences(tokens: &[String], delimiters: &[&str]) -> Vec<Vec<String>> {
    let mut sentences = Vec::new();
    let mut current = Vec::new();
    for tok in tokens {
        if delimiters.contains(&tok.as_str()) {
            if !current.is_empty() {
                sentences.push(std::mem::take(&mut current));
            }
        } else {
            current.push(tok.clone());
        }
    }
    if !current.is_empty() {
        sentences.push(current);
    }
    sentences
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(|w| w.to_string()).collect()
    }

    #[test]
    fn identical_sequences_score_one() {
        let a = toks("the cat sat on the mat");
        assert_eq!(rouge_n(&a, &a, 1).f1, 1.0);
        assert_eq!(rouge_n(&a, &a, 2).f1, 1.0);
        assert_eq!(rouge_l(&a, &a).f1, 1.0);
    }

    #[test]
    fn hand_counted_unigram_case() {
        let c = toks("the cat sat");
        let r = toks("the cat");
        let s = rouge_n(&c, &r, 1);
        assert!((s.p - 2.0 / 3.0).abs() < 1e-12);
        assert!((s.r - 1.0).abs() < 1e-12);
        assert!((s.f1 - 0.8).abs() < 1e-12);
    }

    #[test]
    fn disjoint_token_sets_score_zero() {
        let c = toks("a b c");
        let r = toks("x y z");
        assert_eq!(rouge_n(&c, &r, 1), RougeScore::ZERO);
        assert_eq!(rouge_l(&c, &r), RougeScore::ZERO);
    }

    #[test]
    fn too_short_sequences_score_zero_without_error() {
        let c = toks("a");
        let r = toks("a b");
        assert_eq!(rouge_n(&c, &r, 2), RougeScore::ZERO);
        assert_eq!(rouge_n(&[], &r, 1), RougeScore::ZERO);
        assert_eq!(rouge_l(&[], &r), RougeScore::ZERO);
    }

    #[test]
    fn clipping_caps_repeated_candidate_tokens() {
        let c = toks("the the the the");
        let r = toks("the cat");
        let s = rouge_n(&c, &r, 1);
        // overlap clipped to the single reference occurrence
        assert!((s.p - 0.25).abs() < 1e-12);
        assert!((s.r - 0.5).abs() < 1e-12);
    }

    #[test]
    fn lcs_of_swapped_middle_is_three() {
        let s = rouge_l(&toks("a b c d"), &toks("a c b d"));
        assert!((s.p - 0.75).abs() < 1e-12);
        assert!((s.r - 0.75).abs() < 1e-12);
    }

    #[test]
    fn lcs_matches_exhaustive_subsequence_oracle() {
        use rand::Rng;
        use rand_chacha::rand_core::SeedableRng;

        // enumerate all subsequences of `a` by bitmask, keep the longest that
        // is also a subsequence of `b`
        fn oracle(a: &[String], b: &[String]) -> usize {
            let mut best = 0;
            for mask in 0u32..(1 << a.len()) {
                let sub: Vec<&String> =
                    a.iter().enumerate().filter(|(i, _)| mask >> i & 1 == 1).map(|(_, t)| t).collect();
                let mut it = b.iter();
                if sub.iter().all(|s| it.any(|t| t == *s)) {
                    best = best.max(sub.len());
                }
            }
            best
        }

        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(77);
        for _ in 0..60 {
            let len_a = rng.gen_range(0..=8);
            let len_b = rng.gen_range(0..=8);
            let a: Vec<String> = (0..len_a).map(|_| format!("t{}", rng.gen_range(0..4))).collect();
            let b: Vec<String> = (0..len_b).map(|_| format!("t{}", rng.gen_range(0..4))).collect();
            assert_eq!(lcs_len(&a, &b), oracle(&a, &b), "a={a:?} b={b:?}");
        }
    }

    #[test]
    fn copied_summary_has_zero_novelty() {
        let src = toks("the cat sat on the mat .");
        let report = novelty_stats(&[src.clone()], &[src], &["."]).unwrap();
        assert_eq!(report.novel_1gram, 0.0);
        assert_eq!(report.novel_4gram, 0.0);
        assert_eq!(report.novel_sentences, 0.0);
    }

    #[test]
    fn fully_foreign_summary_has_unit_novelty() {
        let report =
            novelty_stats(&[toks("x y z w")], &[toks("a b c d e")], &["."]).unwrap();
        assert_eq!(report.novel_1gram, 1.0);
        assert_eq!(report.novel_2gram, 1.0);
        assert_eq!(report.novel_sentences, 1.0);
    }

    #[test]
    fn constructed_half_novel_bigrams() {
        // summary bigrams: (a b), (b a), (a x), (x y) -> two of four occur in
        // the source
        let summary = toks("a b a x y");
        let source = toks("a b a q");
        let report = novelty_stats(&[summary], &[source], &["."]).unwrap();
        assert!((report.novel_2gram - 0.5).abs() < 1e-12);
    }

    #[test]
    fn corpus_mean_is_the_mean_of_pairs() {
        let c1 = toks("a b");
        let r1 = toks("a b");
        let c2 = toks("x y");
        let r2 = toks("p q");
        let single = evaluate_corpus(&[c1.clone()], &[r1.clone()]).unwrap();
        assert_eq!(single.rouge1.f1, 1.0);
        let both = evaluate_corpus(&[c1, c2], &[r1, r2]).unwrap();
        assert!((both.rouge1.f1 - 0.5).abs() < 1e-12);
        assert!((both.rouge_l.f1 - 0.5).abs() < 1e-12);
    }

    #[test]
    fn mismatched_lengths_are_input_errors() {
        assert!(matches!(
            evaluate_corpus(&[toks("a")], &[]),
            Err(Error::Input(_))
        ));
        assert!(matches!(
            novelty_stats(&[toks("a")], &[], &["."]),
            Err(Error::Input(_))
        ));
    }

    proptest::proptest! {
        #[test]
        fn swapping_arguments_exchanges_precision_and_recall(
            a in proptest::collection::vec("[a-c]", 0..10),
            b in proptest::collection::vec("[a-c]", 0..10),
        ) {
            for n in 1..=2usize {
                let x = rouge_n(&a, &b, n);
                let y = rouge_n(&b, &a, n);
                proptest::prop_assert!((x.p - y.r).abs() < 1e-12);
                proptest::prop_assert!((x.r - y.p).abs() < 1e-12);
            }
            let x = rouge_l(&a, &b);
            let y = rouge_l(&b, &a);
            proptest::prop_assert!((x.p - y.r).abs() < 1e-12);
        }

        #[test]
        fn scores_stay_in_unit_interval(
            a in proptest::collection::vec("[a-c]", 0..12),
            b in proptest::collection::vec("[a-c]", 0..12),
        ) {
            for s in [rouge_n(&a, &b, 1), rouge_n(&a, &b, 2), rouge_l(&a, &b)] {
                proptest::prop_assert!((0.0..=1.0).contains(&s.p));
                proptest::prop_assert!((0.0..=1.0).contains(&s.r));
                proptest::prop_assert!((0.0..=1.0).contains(&s.f1));
                proptest::prop_assert!(s.f1 <= s.p.max(s.r) + 1e-12);
            }
        }
    }
}
