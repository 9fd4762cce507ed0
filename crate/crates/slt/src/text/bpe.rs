//! Byte-pair encoding: greedy most-frequent-pair merges over a word corpus.
//!
//! Words are segmented as characters plus a separate `</w>` end-of-word
//! sentinel; after all merges a bare trailing sentinel is fused into the
//! last subword, so concatenating subwords and dropping the marker always
//! reconstructs the word.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};

pub const END_OF_WORD: &str = "</w>";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BpeModel {
    merges: Vec<(String, String)>,
}

impl BpeModel {
    pub fn empty() -> Self {
        BpeModel { merges: Vec::new() }
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    /// One merge per line, "left right".
    pub fn to_file_string(&self) -> String {
        let mut s = String::new();
        for (a, b) in &self.merges {
            s.push_str(a);
            s.push(' ');
            s.push_str(b);
            s.push('\n');
        }
        s
    }

    pub fn parse(contents: &str) -> Result<Self> {
        let mut merges = Vec::new();
        for (i, line) in contents.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let mut it = line.split(' ');
            match (it.next(), it.next(), it.next()) {
                (Some(a), Some(b), None) if !a.is_empty() && !b.is_empty() => {
                    merges.push((a.to_string(), b.to_string()));
                }
                _ => {
                    return Err(Error::Format(format!(
                        "bpe file: line {} is not \"left right\": {line:?}",
                        i + 1
                    )))
                }
            }
        }
        Ok(BpeModel { merges })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_file_string()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&s)
    }
}

fn word_symbols(word: &str) -> Vec<String> {
    let mut syms: Vec<String> = word.chars().map(|c| c.to_string()).collect();
    syms.push(END_OF_WORD.to_string());
    syms
}

/// Replace every non-overlapping (a, b) occurrence, left to right.
fn merge_in_place(syms: &mut Vec<String>, a: &str, b: &str) {
    let mut i = 0;
    while i + 1 < syms.len() {
        if syms[i] == a && syms[i + 1] == b {
            let joined = format!("{}{}", syms[i], syms[i + 1]);
            syms[i] = joined;
            syms.remove(i + 1);
        }
        i += 1;
    }
}

/// Learn up to `n_merges` merges from whitespace-separated words. Ties on
/// pair frequency break lexicographically; learning stops early once no
/// pair occurs at least twice.
pub fn learn_bpe<S: AsRef<str>>(corpus: &[S], n_merges: usize) -> BpeModel {
    let mut word_freq: HashMap<String, u64> = HashMap::new();
    for line in corpus {
        for w in line.as_ref().split_whitespace() {
            *word_freq.entry(w.to_string()).or_insert(0) += 1;
        }
    }
    let mut words: Vec<(Vec<String>, u64)> = {
        let mut items: Vec<(String, u64)> = word_freq.into_iter().collect();
        items.sort(); // deterministic work order
        items.into_iter().map(|(w, f)| (word_symbols(&w), f)).collect()
    };

    let mut merges = Vec::new();
    for _ in 0..n_merges {
        let mut pair_counts: HashMap<(String, String), u64> = HashMap::new();
        for (syms, freq) in &words {
            for pair in syms.windows(2) {
                *pair_counts.entry((pair[0].clone(), pair[1].clone())).or_insert(0) += freq;
            }
        }
        let best = pair_counts
            .into_iter()
            .max_by(|(pa, ca), (pb, cb)| ca.cmp(cb).then_with(|| pb.cmp(pa)));
        let Some((pair, count)) = best else { break };
        if count < 2 {
            break;
        }
        for (syms, _) in &mut words {
            merge_in_place(syms, &pair.0, &pair.1);
        }
        merges.push(pair);
    }
    BpeModel { merges }
}

/// Segment one word: merges in learned order, then fuse a bare trailing
/// end-of-word sentinel into the final subword.
pub fn apply_bpe(word: &str, model: &BpeModel) -> Vec<String> {
    if word.is_empty() {
        return Vec::new();
    }
    let mut syms = word_symbols(word);
    for (a, b) in &model.merges {
        merge_in_place(&mut syms, a, b);
        if syms.len() == 1 {
            break;
        }
    }
    if syms.last().map(|s| s == END_OF_WORD).unwrap_or(false) {
        let marker = syms.pop().unwrap();
        match syms.last_mut() {
            Some(last) => last.push_str(&marker),
            None => return Vec::new(),
        }
    }
    syms
}

/// Segment every whitespace token of a line, joining subwords with spaces.
pub fn segment_line(line: &str, model: &BpeModel) -> String {
    line.split_whitespace()
        .flat_map(|w| apply_bpe(w, model))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Inverse of [`segment_line`]: fuse subwords back into words at the
/// end-of-word markers.
pub fn join_subwords(segmented: &str) -> String {
    let mut words = Vec::new();
    let mut current = String::new();
    for tok in segmented.split_whitespace() {
        if let Some(stripped) = tok.strip_suffix(END_OF_WORD) {
            current.push_str(stripped);
            words.push(std::mem::take(&mut current));
        } else {
            current.push_str(tok);
        }
    }
    if !current.is_empty() {
        words.push(current);
    }
    words.join(" ")
}
