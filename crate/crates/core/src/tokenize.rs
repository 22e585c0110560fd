//! Word to subword tokenization.
//!
//! Two schemes share one vocabulary type. [`SubwordScheme::CharFallback`] is the
//! desk-scale scheme: words seen often enough in the training text become
//! single tokens and everything else is spelled out character by character
//! (`c`, `##h`, `##a`, ...). [`SubwordScheme::WordPiece`] is greedy
//! longest-match-first over an externally supplied `vocab.txt`, matching the
//! tokenizers that ship with pretrained BERT-style encoders.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
const CONTINUATION: &str = "##";
const MAX_WORDPIECE_CHARS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubwordScheme {
    CharFallback,
    WordPiece,
}

/// Output of tokenizing one sentence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tokenized {
    pub ids: Vec<usize>,
    pub tokens: Vec<String>,
    /// Source word of each token; `-1` for special tokens.
    pub word_index: Vec<i64>,
    /// Leading words that fit within the sequence budget.
    pub words_covered: usize,
}

impl Tokenized {
    /// Number of tokens that belong to a word.
    pub fn word_tokens(&self) -> usize {
        self.word_index.iter().filter(|&&w| w >= 0).count()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(from = "VocabularyRepr", into = "VocabularyRepr")]
pub struct Vocabulary {
    scheme: SubwordScheme,
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    pad: usize,
    unk: usize,
    cls: usize,
    sep: usize,
}

#[derive(Serialize, Deserialize)]
struct VocabularyRepr {
    scheme: SubwordScheme,
    tokens: Vec<String>,
}

impl From<VocabularyRepr> for Vocabulary {
    fn from(r: VocabularyRepr) -> Self {
        Vocabulary::from_tokens(r.tokens, r.scheme)
    }
}

impl From<Vocabulary> for VocabularyRepr {
    fn from(v: Vocabulary) -> Self {
        VocabularyRepr {
            scheme: v.scheme,
            tokens: v.tokens,
        }
    }
}

impl PartialEq for Vocabulary {
    fn eq(&self, other: &Self) -> bool {
        self.scheme == other.scheme && self.tokens == other.tokens
    }
}

impl Vocabulary {
    /// Builds a vocabulary from a token list. Missing special tokens are
    /// prepended in the order `[PAD] [UNK] [CLS] [SEP]`.
    pub fn from_tokens(tokens: impl IntoIterator<Item = String>, scheme: SubwordScheme) -> Self {
        let given: Vec<String> = tokens.into_iter().collect();
        let mut all: Vec<String> = [PAD, UNK, CLS, SEP]
            .iter()
            .filter(|s| !given.iter().any(|g| g == *s))
            .map(|s| s.to_string())
            .collect();
        all.extend(given);
        let mut index = HashMap::with_capacity(all.len());
        for (i, t) in all.iter().enumerate() {
            index.entry(t.clone()).or_insert(i);
        }
        Vocabulary {
            scheme,
            pad: index[PAD],
            unk: index[UNK],
            cls: index[CLS],
            sep: index[SEP],
            tokens: all,
            index,
        }
    }

    /// Character-fallback vocabulary over lowercased words. Words occurring at
    /// least `min_count` times get their own token; every observed character
    /// gets both an initial and a `##` continuation token.
    pub fn build<S: AsRef<str>>(sentences: &[Vec<S>], min_count: usize) -> Self {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        let mut chars: BTreeMap<char, ()> = BTreeMap::new();
        for sentence in sentences {
            for w in sentence {
                let w = w.as_ref().to_lowercase();
                if w.is_empty() {
                    continue;
                }
                chars.extend(w.chars().map(|c| (c, ())));
                *counts.entry(w).or_default() += 1;
            }
        }
        let mut tokens: Vec<String> = counts
            .into_iter()
            .filter(|(_, c)| *c >= min_count.max(1))
            .map(|(w, _)| w)
            .collect();
        for c in chars.keys() {
            let initial = c.to_string();
            if !tokens.contains(&initial) {
                tokens.push(initial);
            }
            tokens.push(format!("{CONTINUATION}{c}"));
        }
        Vocabulary::from_tokens(tokens, SubwordScheme::CharFallback)
    }

    /// Loads a WordPiece `vocab.txt`, one token per line, id = line number.
    pub fn load_wordpiece(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let tokens: Vec<String> = text.lines().map(|l| l.trim_end().to_string()).collect();
        for special in [PAD, UNK, CLS, SEP] {
            if !tokens.iter().any(|t| t == special) {
                return Err(Error::Vocabulary(format!("vocab.txt lacks {special}")));
            }
        }
        Ok(Vocabulary::from_tokens(tokens, SubwordScheme::WordPiece))
    }

    pub fn scheme(&self) -> SubwordScheme {
        self.scheme
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn pad_id(&self) -> usize {
        self.pad
    }

    pub fn unk_id(&self) -> usize {
        self.unk
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn is_special(&self, id: usize) -> bool {
        id == self.pad || id == self.unk || id == self.cls || id == self.sep
    }

    /// Subword pieces of one word. Never empty for a non-empty word.
    pub fn word_pieces(&self, word: &str) -> Vec<(usize, String)> {
        let word = word.to_lowercase();
        if word.is_empty() {
            return Vec::new();
        }
        match self.scheme {
            SubwordScheme::CharFallback => {
                if let Some(id) = self.id(&word) {
                    return vec![(id, word)];
                }
                word.chars()
                    .enumerate()
                    .map(|(i, c)| {
                        let piece = if i == 0 {
                            c.to_string()
                        } else {
                            format!("{CONTINUATION}{c}")
                        };
                        match self.id(&piece) {
                            Some(id) => (id, piece),
                            None => (self.unk, UNK.to_string()),
                        }
                    })
                    .collect()
            }
            SubwordScheme::WordPiece => self.wordpiece(&word),
        }
    }

    fn wordpiece(&self, word: &str) -> Vec<(usize, String)> {
        let chars: Vec<char> = word.chars().collect();
        if chars.len() > MAX_WORDPIECE_CHARS {
            return vec![(self.unk, UNK.to_string())];
        }
        let mut pieces = Vec::new();
        let mut start = 0;
        while start < chars.len() {
            let mut end = chars.len();
            let mut found = None;
            while start < end {
                let sub: String = chars[start..end].iter().collect();
                let candidate = if start > 0 {
                    format!("{CONTINUATION}{sub}")
                } else {
                    sub
                };
                if let Some(id) = self.id(&candidate) {
                    found = Some((id, candidate));
                    break;
                }
                end -= 1;
            }
            match found {
                Some(piece) => pieces.push(piece),
                None => return vec![(self.unk, UNK.to_string())],
            }
            start = end;
        }
        pieces
    }

    /// Tokenizes pre-split words as `[CLS] pieces... [SEP]`, keeping whole
    /// words only, within `max_seq_len` positions.
    pub fn tokenize_words<S: AsRef<str>>(&self, words: &[S], max_seq_len: usize) -> Tokenized {
        let mut out = Tokenized {
            ids: Vec::new(),
            tokens: Vec::new(),
            word_index: Vec::new(),
            words_covered: 0,
        };
        if max_seq_len == 0 {
            return out;
        }
        out.ids.push(self.cls);
        out.tokens.push(CLS.to_string());
        out.word_index.push(-1);
        let budget = max_seq_len.saturating_sub(2);
        let mut used = 0;
        for (j, w) in words.iter().enumerate() {
            let pieces = self.word_pieces(w.as_ref());
            if used + pieces.len() > budget {
                break;
            }
            used += pieces.len();
            for (id, piece) in pieces {
                out.ids.push(id);
                out.tokens.push(piece);
                out.word_index.push(j as i64);
            }
            out.words_covered = j + 1;
        }
        if max_seq_len >= 2 {
            out.ids.push(self.sep);
            out.tokens.push(SEP.to_string());
            out.word_index.push(-1);
        }
        out
    }

    /// Splits on whitespace and tokenizes.
    pub fn tokenize(&self, text: &str, max_seq_len: usize) -> Tokenized {
        let words: Vec<&str> = text.split_whitespace().collect();
        self.tokenize_words(&words, max_seq_len)
    }

    /// Fraction of word tokens that fall back to `[UNK]`.
    pub fn unk_rate<V: AsRef<[S]>, S: AsRef<str>>(&self, sentences: &[V]) -> f64 {
        let (mut unk, mut total) = (0usize, 0usize);
        for s in sentences {
            for w in s.as_ref() {
                for (id, _) in self.word_pieces(w.as_ref()) {
                    total += 1;
                    unk += usize::from(id == self.unk);
                }
            }
        }
        if total == 0 {
            0.0
        } else {
            unk as f64 / total as f64
        }
    }
}
