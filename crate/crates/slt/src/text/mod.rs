//! Text normalization, vocabularies and subword segmentation.

pub mod bpe;

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;

pub const RESERVED: [&str; 4] = ["<pad>", "<s>", "</s>", "<unk>"];

/// ASCII characters split off as standalone tokens by [`normalize`].
const PUNCT: &str = "!\"#$%&'()*+,-./:;<=>?@[\\]^_`{|}~";

/// Lowercase, separate ASCII punctuation from words, collapse whitespace.
/// Idempotent: normalizing twice changes nothing.
pub fn normalize(text: &str) -> String {
    let mut spaced = String::with_capacity(text.len() * 2);
    for c in text.chars() {
        if PUNCT.contains(c) {
            spaced.push(' ');
            spaced.push(c);
            spaced.push(' ');
        } else {
            spaced.push(c);
        }
    }
    let lowered = spaced.to_lowercase();
    let mut out = String::with_capacity(lowered.len());
    for token in lowered.split_whitespace() {
        if !out.is_empty() {
            out.push(' ');
        }
        out.push_str(token);
    }
    out
}

/// Symbol table with fixed reserved ids 0..=3 (PAD, BOS, EOS, UNK).
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    symbols: Vec<String>,
    ids: HashMap<String, u32>,
}

impl Vocabulary {
    fn from_symbols(symbols: Vec<String>) -> Result<Self> {
        let mut ids = HashMap::with_capacity(symbols.len());
        for (i, s) in symbols.iter().enumerate() {
            if ids.insert(s.clone(), i as u32).is_some() {
                return Err(Error::Format(format!("vocabulary: duplicate symbol {s:?}")));
            }
        }
        Ok(Vocabulary { symbols, ids })
    }

    /// Character vocabulary over corpus lines (whitespace is a symbol too),
    /// ordered by descending frequency then codepoint.
    pub fn build_chars<S: AsRef<str>>(lines: &[S]) -> Result<Self> {
        let mut counts: HashMap<char, u64> = HashMap::new();
        for line in lines {
            for c in line.as_ref().chars() {
                *counts.entry(c).or_insert(0) += 1;
            }
        }
        if counts.is_empty() {
            return Err(Error::Corpus("character vocabulary from an empty corpus".into()));
        }
        let mut entries: Vec<(char, u64)> = counts.into_iter().collect();
        entries.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        let mut symbols: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        symbols.extend(entries.into_iter().map(|(c, _)| c.to_string()));
        Self::from_symbols(symbols)
    }

    /// Token vocabulary over whitespace-separated units (words or subwords),
    /// ordered by descending frequency then symbol.
    pub fn build_tokens<S: AsRef<str>>(lines: &[S]) -> Result<Self> {
        let mut counts: HashMap<String, u64> = HashMap::new();
        for line in lines {
            for tok in line.as_ref().split_whitespace() {
                *counts.entry(tok.to_string()).or_insert(0) += 1;
            }
        }
        if counts.is_empty() {
            return Err(Error::Corpus("token vocabulary from an empty corpus".into()));
        }
        let mut entries: Vec<(String, u64)> = counts.into_iter().collect();
        entries.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        let mut symbols: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        symbols.extend(entries.into_iter().map(|(s, _)| s));
        Self::from_symbols(symbols)
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        false // reserved symbols are always present
    }

    pub fn id(&self, symbol: &str) -> u32 {
        self.ids.get(symbol).copied().unwrap_or(UNK)
    }

    pub fn symbol(&self, id: u32) -> Option<&str> {
        self.symbols.get(id as usize).map(|s| s.as_str())
    }

    fn encode_symbols<'a>(&self, symbols: impl Iterator<Item = &'a str>) -> Vec<u32> {
        let mut ids: Vec<u32> = symbols.map(|s| self.id(s)).collect();
        ids.push(EOS);
        ids
    }

    /// Character-level encoding; unknown symbols map to UNK, EOS appended.
    pub fn encode_chars(&self, text: &str) -> Vec<u32> {
        let chars: Vec<String> = text.chars().map(|c| c.to_string()).collect();
        self.encode_symbols(chars.iter().map(|s| s.as_str()))
    }

    /// Whitespace-token encoding; unknown symbols map to UNK, EOS appended.
    pub fn encode_tokens(&self, text: &str) -> Vec<u32> {
        self.encode_symbols(text.split_whitespace())
    }

    /// Drop reserved ids and join the remaining symbols directly
    /// (character-level output).
    pub fn decode_chars(&self, ids: &[u32]) -> String {
        ids.iter()
            .filter(|&&id| id > UNK)
            .filter_map(|&id| self.symbol(id))
            .collect()
    }

    /// Drop reserved ids and join with single spaces (token-level output).
    pub fn decode_tokens(&self, ids: &[u32]) -> String {
        ids.iter()
            .filter(|&&id| id > UNK)
            .filter_map(|&id| self.symbol(id))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// One symbol per line, line number = id, reserved symbols first.
    pub fn to_file_string(&self) -> String {
        let mut s = String::new();
        for sym in &self.symbols {
            s.push_str(sym);
            s.push('\n');
        }
        s
    }

    pub fn parse(contents: &str) -> Result<Self> {
        let mut symbols: Vec<String> = contents.lines().map(|l| l.to_string()).collect();
        // a trailing single-space symbol survives as a line containing " "
        while symbols.last().map(|s| s.is_empty()).unwrap_or(false) {
            symbols.pop();
        }
        if symbols.len() < RESERVED.len() {
            return Err(Error::Format("vocabulary file: fewer lines than reserved symbols".into()));
        }
        for (i, want) in RESERVED.iter().enumerate() {
            if symbols[i] != *want {
                return Err(Error::Format(format!(
                    "vocabulary file: line {i} is {:?}, expected reserved {want:?}",
                    symbols[i]
                )));
            }
        }
        Self::from_symbols(symbols)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_file_string()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&s)
    }
}
