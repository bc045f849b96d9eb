//! Word-level tokenizer with space-attached pieces and per-digit numbers.
//!
//! Text splits into letter runs, single digits and single other characters.
//! A piece preceded by one space is stored with a leading `▁`, so decoding is
//! concatenation with `▁` turned back into a space. Extra spaces become
//! standalone `▁` pieces.

use std::collections::{BTreeSet, HashMap};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const VIS: usize = 3;
pub const UNK: usize = 4;

const SPECIALS: [&str; 5] = ["<pad>", "<bos>", "<eos>", "<vis>", "<unk>"];
const SPACE: char = '▁';

fn pieces(text: &str) -> Vec<String> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let mut spaces = 0;
        while i < chars.len() && chars[i] == ' ' {
            spaces += 1;
            i += 1;
        }
        if i == chars.len() {
            out.extend(std::iter::repeat_n(SPACE.to_string(), spaces));
            break;
        }
        if spaces > 1 {
            out.extend(std::iter::repeat_n(SPACE.to_string(), spaces - 1));
        }
        let mut piece = String::new();
        if spaces > 0 {
            piece.push(SPACE);
        }
        if chars[i].is_ascii_alphabetic() {
            while i < chars.len() && chars[i].is_ascii_alphabetic() {
                piece.push(chars[i]);
                i += 1;
            }
        } else {
            piece.push(chars[i]);
            i += 1;
        }
        out.push(piece);
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Tokenizer {
    vocab: Vec<String>,
    index: HashMap<String, usize>,
}

impl Tokenizer {
    /// Builds a vocabulary covering every piece of `texts` plus all digits.
    pub fn fit<S: AsRef<str>>(texts: &[S]) -> Self {
        let mut set = BTreeSet::new();
        for d in '0'..='9' {
            set.insert(d.to_string());
            set.insert(format!("{SPACE}{d}"));
        }
        set.insert(SPACE.to_string());
        for t in texts {
            set.extend(pieces(t.as_ref()));
        }
        let vocab = SPECIALS.iter().map(|s| s.to_string()).chain(set).collect();
        Self::from_vocab(vocab).expect("fitted vocabulary is valid")
    }

    pub fn from_vocab(vocab: Vec<String>) -> Result<Self> {
        if vocab.len() < SPECIALS.len() || vocab[..SPECIALS.len()] != SPECIALS {
            return Err(Error::Config("vocabulary must start with the special tokens".into()));
        }
        let index: HashMap<String, usize> = vocab.iter().cloned().enumerate().map(|(i, s)| (s, i)).collect();
        if index.len() != vocab.len() {
            return Err(Error::Config("vocabulary has duplicate entries".into()));
        }
        Ok(Self { vocab, index })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn token_id(&self, piece: &str) -> Option<usize> {
        self.index.get(piece).copied()
    }

    /// Unknown pieces map to [`UNK`].
    pub fn encode(&self, text: &str) -> Vec<usize> {
        pieces(text)
            .iter()
            .map(|p| self.index.get(p).copied().unwrap_or(UNK))
            .collect()
    }

    /// True if every piece of `text` is in the vocabulary.
    pub fn covers(&self, text: &str) -> bool {
        pieces(text).iter().all(|p| self.index.contains_key(p))
    }

    /// Drops special tokens.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&i| i >= SPECIALS.len() && i < self.vocab.len())
            .flat_map(|&i| self.vocab[i].chars())
            .map(|c| if c == SPACE { ' ' } else { c })
            .collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.vocab).expect("strings serialize")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let vocab: Vec<String> = serde_json::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        Self::from_vocab(vocab)
    }
}
