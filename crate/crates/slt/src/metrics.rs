//! Corpus-level BLEU and word error rate.
//!
//! Both metrics tokenize by normalizing the text and splitting on
//! whitespace, so scoring is case- and punctuation-insensitive.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::text::normalize;

/// One hypothesis with its single reference.
#[derive(Clone, Debug)]
pub struct EvalPair {
    pub hypothesis: String,
    pub reference: String,
}

/// Per-order precisions and lengths behind a BLEU score.
#[derive(Clone, Debug)]
pub struct BleuBreakdown {
    pub score: f64,
    /// (matched, total) modified n-gram counts for n = 1..=4.
    pub precisions: [(u64, u64); 4],
    pub brevity_penalty: f64,
    pub hypothesis_len: u64,
    pub reference_len: u64,
}

impl BleuBreakdown {
    /// Tab-separated machine-readable form.
    pub fn to_tsv(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("bleu\t{:.4}\n", self.score));
        for (i, (m, t)) in self.precisions.iter().enumerate() {
            s.push_str(&format!("p{}\t{}\t{}\n", i + 1, m, t));
        }
        s.push_str(&format!("brevity_penalty\t{:.6}\n", self.brevity_penalty));
        s.push_str(&format!("hyp_len\t{}\n", self.hypothesis_len));
        s.push_str(&format!("ref_len\t{}\n", self.reference_len));
        s
    }
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], u64> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus-level BLEU in [0, 100]: geometric mean of modified n-gram
/// precisions (n = 1..=4) times the brevity penalty, no smoothing.
pub fn bleu(pairs: &[EvalPair]) -> Result<BleuBreakdown> {
    if pairs.is_empty() {
        return Err(Error::Corpus("BLEU over an empty corpus".into()));
    }
    let mut matched = [0u64; 4];
    let mut total = [0u64; 4];
    let mut hyp_len = 0u64;
    let mut ref_len = 0u64;
    for pair in pairs {
        let hyp: Vec<String> =
            normalize(&pair.hypothesis).split_whitespace().map(String::from).collect();
        let refr: Vec<String> =
            normalize(&pair.reference).split_whitespace().map(String::from).collect();
        hyp_len += hyp.len() as u64;
        ref_len += refr.len() as u64;
        for n in 1..=4 {
            let hc = ngram_counts(&hyp, n);
            let rc = ngram_counts(&refr, n);
            for (gram, &count) in &hc {
                let clip = rc.get(gram).copied().unwrap_or(0);
                matched[n - 1] += count.min(clip);
                total[n - 1] += count;
            }
        }
    }

    let brevity_penalty = if hyp_len == 0 {
        0.0
    } else if hyp_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };

    let score = if (0..4).any(|i| matched[i] == 0 || total[i] == 0) {
        0.0
    } else {
        let log_mean: f64 = (0..4)
            .map(|i| (matched[i] as f64 / total[i] as f64).ln())
            .sum::<f64>()
            / 4.0;
        brevity_penalty * log_mean.exp() * 100.0
    };

    Ok(BleuBreakdown {
        score,
        precisions: [
            (matched[0], total[0]),
            (matched[1], total[1]),
            (matched[2], total[2]),
            (matched[3], total[3]),
        ],
        brevity_penalty,
        hypothesis_len: hyp_len,
        reference_len: ref_len,
    })
}

/// Smoothed sentence-level BLEU (+1 on matched and total for n >= 2); a dev
/// diagnostic only, never the reported corpus score.
pub fn sentence_bleu_smoothed(hypothesis: &str, reference: &str) -> f64 {
    let hyp: Vec<String> = normalize(hypothesis).split_whitespace().map(String::from).collect();
    let refr: Vec<String> = normalize(reference).split_whitespace().map(String::from).collect();
    if hyp.is_empty() || refr.is_empty() {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 1..=4 {
        let hc = ngram_counts(&hyp, n);
        let rc = ngram_counts(&refr, n);
        let mut matched = 0u64;
        let mut total = 0u64;
        for (gram, &count) in &hc {
            matched += count.min(rc.get(gram).copied().unwrap_or(0));
            total += count;
        }
        let (num, den) = if n == 1 {
            (matched as f64, total as f64)
        } else {
            (matched as f64 + 1.0, total as f64 + 1.0)
        };
        if num == 0.0 || den == 0.0 {
            return 0.0;
        }
        log_sum += (num / den).ln();
    }
    let bp = if hyp.len() >= refr.len() {
        1.0
    } else {
        (1.0 - refr.len() as f64 / hyp.len() as f64).exp()
    };
    bp * (log_sum / 4.0).exp() * 100.0
}

/// Edit counts decomposing a Levenshtein distance.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct EditCounts {
    pub substitutions: u64,
    pub insertions: u64,
    pub deletions: u64,
}

impl EditCounts {
    pub fn total(&self) -> u64 {
        self.substitutions + self.insertions + self.deletions
    }
}

/// Unit-cost Levenshtein distance from `reference` to `hypothesis`, with an
/// edit decomposition recovered by backtrace (preferring match/substitution,
/// then deletion, then insertion).
pub fn levenshtein<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> EditCounts {
    let n = reference.len();
    let m = hypothesis.len();
    let mut dist = vec![0u64; (n + 1) * (m + 1)];
    let idx = |i: usize, j: usize| i * (m + 1) + j;
    for i in 0..=n {
        dist[idx(i, 0)] = i as u64;
    }
    for j in 0..=m {
        dist[idx(0, j)] = j as u64;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub_cost = if reference[i - 1] == hypothesis[j - 1] { 0 } else { 1 };
            let best = (dist[idx(i - 1, j - 1)] + sub_cost)
                .min(dist[idx(i - 1, j)] + 1)
                .min(dist[idx(i, j - 1)] + 1);
            dist[idx(i, j)] = best;
        }
    }
    let mut counts = EditCounts::default();
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        if i > 0 && j > 0 {
            let sub_cost = if reference[i - 1] == hypothesis[j - 1] { 0 } else { 1 };
            if dist[idx(i, j)] == dist[idx(i - 1, j - 1)] + sub_cost {
                counts.substitutions += sub_cost;
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && dist[idx(i, j)] == dist[idx(i - 1, j)] + 1 {
            counts.deletions += 1;
            i -= 1;
        } else {
            counts.insertions += 1;
            j -= 1;
        }
    }
    counts
}

/// Word-level WER breakdown.
#[derive(Clone, Debug)]
pub struct WerBreakdown {
    pub score: f64,
    pub edits: EditCounts,
    pub reference_words: u64,
}

impl WerBreakdown {
    pub fn to_tsv(&self) -> String {
        format!(
            "wer\t{:.4}\nsubstitutions\t{}\ninsertions\t{}\ndeletions\t{}\nref_words\t{}\n",
            self.score,
            self.edits.substitutions,
            self.edits.insertions,
            self.edits.deletions,
            self.reference_words
        )
    }
}

/// Corpus word error rate: total edits / total reference words x 100.
pub fn wer(pairs: &[EvalPair]) -> Result<WerBreakdown> {
    if pairs.is_empty() {
        return Err(Error::Corpus("WER over an empty corpus".into()));
    }
    let mut edits = EditCounts::default();
    let mut ref_words = 0u64;
    for pair in pairs {
        let hyp: Vec<String> =
            normalize(&pair.hypothesis).split_whitespace().map(String::from).collect();
        let refr: Vec<String> =
            normalize(&pair.reference).split_whitespace().map(String::from).collect();
        ref_words += refr.len() as u64;
        let e = levenshtein(&refr, &hyp);
        edits.substitutions += e.substitutions;
        edits.insertions += e.insertions;
        edits.deletions += e.deletions;
    }
    if ref_words == 0 {
        return Err(Error::Corpus("WER with an empty reference corpus".into()));
    }
    Ok(WerBreakdown {
        score: edits.total() as f64 / ref_words as f64 * 100.0,
        edits,
        reference_words: ref_words,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pair(h: &str, r: &str) -> EvalPair {
        EvalPair { hypothesis: h.into(), reference: r.into() }
    }

    #[test]
    fn bleu_of_identical_corpus_is_100() {
        let pairs = vec![pair("the cat sat", "the cat sat"), pair("a b c d", "a b c d")];
        let b = bleu(&pairs).unwrap();
        assert!((b.score - 100.0).abs() < 1e-9);
        assert_eq!(b.brevity_penalty, 1.0);
    }

    #[test]
    fn bleu_hand_computed_example() {
        // precisions 5/5, 3/4, 2/3, 1/2 and BP = exp(1 - 6/5)
        let pairs = vec![pair("the cat sat on mat", "the cat sat on the mat")];
        let b = bleu(&pairs).unwrap();
        assert_eq!(b.precisions, [(5, 5), (3, 4), (2, 3), (1, 2)]);
        let want = (1.0f64 - 6.0 / 5.0).exp()
            * ((5.0f64 / 5.0).ln() / 4.0
                + (3.0f64 / 4.0).ln() / 4.0
                + (2.0f64 / 3.0).ln() / 4.0
                + (1.0f64 / 2.0).ln() / 4.0)
                .exp()
            * 100.0;
        assert!((b.score - want).abs() < 1e-9);
        assert!((b.score - 57.9).abs() < 0.1, "{}", b.score);
    }

    #[test]
    fn bleu_disjoint_vocabulary_is_zero() {
        let pairs = vec![pair("x y z", "q r s")];
        assert_eq!(bleu(&pairs).unwrap().score, 0.0);
    }

    #[test]
    fn bleu_empty_corpus_is_an_error() {
        assert!(bleu(&[]).is_err());
    }

    #[test]
    fn wer_identical_is_zero() {
        let pairs = vec![pair("a b c", "a b c")];
        assert_eq!(wer(&pairs).unwrap().score, 0.0);
    }

    #[test]
    fn wer_hand_computed_example() {
        // one deletion plus one insertion over four reference words
        let pairs = vec![pair("a c d e", "a b c d")];
        let w = wer(&pairs).unwrap();
        assert_eq!(w.edits.total(), 2);
        assert_eq!(w.score, 50.0);
    }

    #[test]
    fn empty_hypothesis_is_all_deletions() {
        let pairs = vec![pair("", "a b c d")];
        let w = wer(&pairs).unwrap();
        assert_eq!(w.score, 100.0);
        assert_eq!(w.edits.deletions, 4);
    }

    #[test]
    fn levenshtein_kitten_sitting() {
        let a: Vec<char> = "kitten".chars().collect();
        let b: Vec<char> = "sitting".chars().collect();
        let e = levenshtein(&a, &b);
        assert_eq!(e.total(), 3);
        assert_eq!(levenshtein(&b, &a).total(), 3);
        assert_eq!(levenshtein(&a, &a).total(), 0);
    }

    #[test]
    fn brevity_penalty_is_one_when_hyp_not_shorter() {
        let pairs = vec![pair("a b c d e", "a b c")];
        assert_eq!(bleu(&pairs).unwrap().brevity_penalty, 1.0);
    }

    proptest! {
        #[test]
        fn levenshtein_triangle_inequality(
            a in proptest::collection::vec(0u8..4, 0..8),
            b in proptest::collection::vec(0u8..4, 0..8),
            c in proptest::collection::vec(0u8..4, 0..8),
        ) {
            let ab = levenshtein(&a, &b).total();
            let bc = levenshtein(&b, &c).total();
            let ac = levenshtein(&a, &c).total();
            prop_assert!(ac <= ab + bc);
            prop_assert_eq!(ab, levenshtein(&b, &a).total());
        }

        #[test]
        fn counts_decompose_distance(
            a in proptest::collection::vec(0u8..3, 0..10),
            b in proptest::collection::vec(0u8..3, 0..10),
        ) {
            let e = levenshtein(&a, &b);
            // independent two-row DP for the raw distance
            let mut prev: Vec<u64> = (0..=b.len() as u64).collect();
            for i in 1..=a.len() {
                let mut cur = vec![i as u64; b.len() + 1];
                for j in 1..=b.len() {
                    let sub = prev[j - 1] + u64::from(a[i - 1] != b[j - 1]);
                    cur[j] = sub.min(prev[j] + 1).min(cur[j - 1] + 1);
                }
                prev = cur;
            }
            prop_assert_eq!(e.total(), prev[b.len()]);
        }
    }
}
