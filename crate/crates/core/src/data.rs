//! Corpus records, style tasks, lexicons and the word-to-subword target alignment.
//!
//! Corpora are JSON-lines files, one sentence per line:
//!
//! ```text
//! {"id": "s1", "words": ["top", "notch"], "word_scores": [1.0, 1.0], "label": 0}
//! {"id": "s2", "words": ["ok"], "label": 1}
//! {"id": "s3", "words": ["so", "good"], "word_scores": [[0.1, 0.0], [0.9, 0.02]], "label": 0, "provenance": "pseudo"}
//! ```
//!
//! Human perception scores are signed reals in `[-1, 1]`, one per word. Pseudo
//! labels produced by a trained scorer are per-class vectors in `[0, 1]`.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenize::Tokenized;

/// A binary style with its word-level class arity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StyleTask {
    pub name: String,
    /// Number of word-level style classes (1 or 2).
    pub d_l_word: usize,
    /// Sentence labels, positive style first.
    pub sentence_labels: [String; 2],
    /// Word classes that count as "positive stylistic" when ranking words.
    pub positive_word_classes: Vec<usize>,
}

/// The eight styles shipped out of the box.
pub const BUILTIN_STYLES: [&str; 8] = [
    "politeness",
    "sentiment",
    "offensiveness",
    "anger",
    "disgust",
    "fear",
    "joy",
    "sadness",
];

impl StyleTask {
    pub fn new(
        name: impl Into<String>,
        d_l_word: usize,
        sentence_labels: [String; 2],
        positive_word_classes: Vec<usize>,
    ) -> Result<Self> {
        let task = StyleTask {
            name: name.into(),
            d_l_word,
            sentence_labels,
            positive_word_classes,
        };
        task.validate()?;
        Ok(task)
    }

    /// Looks up one of the built-in styles. Politeness and sentiment have two
    /// word classes; the remaining styles are presence styles with one.
    pub fn builtin(name: &str) -> Option<Self> {
        let key = name.to_lowercase();
        let (d, labels): (usize, [&str; 2]) = match key.as_str() {
            "politeness" => (2, ["polite", "impolite"]),
            "sentiment" => (2, ["positive", "negative"]),
            "offensiveness" => (1, ["offensive", "not offensive"]),
            "anger" => (1, ["anger", "not anger"]),
            "disgust" => (1, ["disgust", "not disgust"]),
            "fear" => (1, ["fear", "not fear"]),
            "joy" => (1, ["joy", "not joy"]),
            "sadness" => (1, ["sadness", "not sadness"]),
            _ => return None,
        };
        Some(StyleTask {
            name: key,
            d_l_word: d,
            sentence_labels: labels.map(String::from),
            positive_word_classes: vec![0],
        })
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=2).contains(&self.d_l_word) {
            return Err(Error::Config(format!(
                "task `{}`: d_l_word must be 1 or 2, got {}",
                self.name, self.d_l_word
            )));
        }
        if self.positive_word_classes.is_empty()
            || self.positive_word_classes.iter().any(|&c| c >= self.d_l_word)
        {
            return Err(Error::Config(format!(
                "task `{}`: positive word classes {:?} invalid for d_l_word {}",
                self.name, self.positive_word_classes, self.d_l_word
            )));
        }
        Ok(())
    }

    /// Index of the positive sentence label.
    pub fn positive_label(&self) -> usize {
        0
    }
}

/// Where a sentence's word scores came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Human,
    Pseudo,
    None,
}

/// Per-word stylistic scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum WordScores {
    /// One signed perception score per word, in `[-1, 1]`.
    Signed(Vec<f64>),
    /// One `[0, 1]` vector of length `d_l_word` per word.
    PerClass(Vec<Vec<f64>>),
}

impl WordScores {
    pub fn len(&self) -> usize {
        match self {
            WordScores::Signed(v) => v.len(),
            WordScores::PerClass(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Per-word target vectors of length `d`.
    pub fn targets(&self, d: usize) -> Result<Vec<Vec<f64>>> {
        match self {
            WordScores::Signed(v) => v.iter().map(|&s| score_to_target(s, d)).collect(),
            WordScores::PerClass(v) => {
                for row in v {
                    if row.len() != d {
                        return Err(Error::Compatibility(format!(
                            "per-class score has {} classes, task expects {d}",
                            row.len()
                        )));
                    }
                }
                Ok(v.clone())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedSentence {
    pub id: String,
    pub text: String,
    pub words: Vec<String>,
    pub word_scores: Option<WordScores>,
    pub sentence_label: usize,
    pub provenance: Provenance,
}

impl AnnotatedSentence {
    /// A sentence without word scores, split on whitespace.
    pub fn unscored(id: impl Into<String>, text: &str, label: usize) -> Self {
        AnnotatedSentence {
            id: id.into(),
            text: text.to_string(),
            words: text.split_whitespace().map(String::from).collect(),
            word_scores: None,
            sentence_label: label,
            provenance: Provenance::None,
        }
    }

    pub fn with_human_scores(
        id: impl Into<String>,
        words: Vec<String>,
        scores: Vec<f64>,
        label: usize,
    ) -> Result<Self> {
        let sentence = AnnotatedSentence {
            id: id.into(),
            text: words.join(" "),
            words,
            word_scores: Some(WordScores::Signed(scores)),
            sentence_label: label,
            provenance: Provenance::Human,
        };
        sentence.validate(None)?;
        Ok(sentence)
    }

    /// Per-word targets for `d` classes, if the sentence is scored.
    pub fn word_targets(&self, d: usize) -> Result<Option<Vec<Vec<f64>>>> {
        self.word_scores.as_ref().map(|s| s.targets(d)).transpose()
    }

    pub fn validate(&self, task: Option<&StyleTask>) -> Result<()> {
        let err = |m: String| Error::validation(self.id.clone(), m);
        if self.sentence_label > 1 {
            return Err(err(format!("label {} is not 0 or 1", self.sentence_label)));
        }
        match (&self.word_scores, self.provenance) {
            (None, Provenance::None) => {}
            (None, p) => return Err(err(format!("provenance {p:?} but no word scores"))),
            (Some(_), Provenance::None) => {
                return Err(err("word scores present with provenance none".into()))
            }
            (Some(scores), provenance) => {
                if scores.len() != self.words.len() {
                    return Err(err(format!(
                        "{} word scores for {} words",
                        scores.len(),
                        self.words.len()
                    )));
                }
                match (scores, provenance) {
                    (WordScores::Signed(v), Provenance::Human) => {
                        if let Some(bad) = v.iter().find(|s| !(-1.0..=1.0).contains(*s)) {
                            return Err(err(format!("human score {bad} outside [-1, 1]")));
                        }
                    }
                    (WordScores::PerClass(v), Provenance::Pseudo) => {
                        for row in v {
                            if row.iter().any(|s| !(0.0..=1.0).contains(s)) {
                                return Err(err(format!("pseudo score {row:?} outside [0, 1]")));
                            }
                            if let Some(task) = task {
                                if row.len() != task.d_l_word {
                                    return Err(err(format!(
                                        "pseudo score has {} classes, task `{}` has {}",
                                        row.len(),
                                        task.name,
                                        task.d_l_word
                                    )));
                                }
                            }
                        }
                    }
                    (WordScores::Signed(_), p) => {
                        return Err(err(format!("signed scores require human provenance, got {p:?}")))
                    }
                    (WordScores::PerClass(_), p) => {
                        return Err(err(format!(
                            "per-class scores require pseudo provenance, got {p:?}"
                        )))
                    }
                }
            }
        }
        Ok(())
    }
}

/// The JSONL wire form of a sentence.
#[derive(Debug, Serialize, Deserialize)]
struct CorpusRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    text: Option<String>,
    words: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    word_scores: Option<WordScores>,
    label: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    provenance: Option<Provenance>,
}

impl CorpusRecord {
    fn into_sentence(self, line: usize) -> AnnotatedSentence {
        let provenance = self.provenance.unwrap_or(match &self.word_scores {
            None => Provenance::None,
            Some(WordScores::Signed(_)) => Provenance::Human,
            Some(WordScores::PerClass(_)) => Provenance::Pseudo,
        });
        // `[]` deserializes as the signed form; an empty pseudo record is per-class.
        let word_scores = match (self.word_scores, provenance) {
            (Some(WordScores::Signed(v)), Provenance::Pseudo) if v.is_empty() => {
                Some(WordScores::PerClass(Vec::new()))
            }
            (scores, _) => scores,
        };
        AnnotatedSentence {
            id: self.id.unwrap_or_else(|| format!("line-{line}")),
            text: self.text.unwrap_or_else(|| self.words.join(" ")),
            words: self.words,
            word_scores,
            sentence_label: self.label,
            provenance,
        }
    }
}

impl From<&AnnotatedSentence> for CorpusRecord {
    fn from(s: &AnnotatedSentence) -> Self {
        CorpusRecord {
            id: Some(s.id.clone()),
            text: Some(s.text.clone()),
            words: s.words.clone(),
            word_scores: s.word_scores.clone(),
            label: s.sentence_label,
            provenance: Some(s.provenance),
        }
    }
}

/// Parses one JSONL corpus line.
pub fn parse_corpus_line(line: &str, line_no: usize) -> std::result::Result<AnnotatedSentence, String> {
    serde_json::from_str::<CorpusRecord>(line)
        .map(|r| r.into_sentence(line_no))
        .map_err(|e| e.to_string())
}

/// Reads and validates a JSONL corpus. Blank lines are skipped.
pub fn load_corpus(path: impl AsRef<Path>, task: &StyleTask) -> Result<Vec<AnnotatedSentence>> {
    let path = path.as_ref();
    let reader = BufReader::new(File::open(path)?);
    let mut sentences = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let sentence = parse_corpus_line(&line, i + 1).map_err(|message| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        })?;
        sentence.validate(Some(task))?;
        sentences.push(sentence);
    }
    Ok(sentences)
}

pub fn write_corpus(path: impl AsRef<Path>, sentences: &[AnnotatedSentence]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for s in sentences {
        serde_json::to_writer(&mut out, &CorpusRecord::from(s))?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Converts a signed perception score into per-class soft targets.
///
/// With two classes the sign selects the channel: `(max(s, 0), max(-s, 0))`.
/// With one class the magnitude is kept: `(|s|)`.
pub fn score_to_target(score: f64, d_l_word: usize) -> Result<Vec<f64>> {
    if !(-1.0..=1.0).contains(&score) {
        return Err(Error::ScoreRange(score));
    }
    match d_l_word {
        1 => Ok(vec![score.abs()]),
        2 => Ok(vec![score.max(0.0), (-score).max(0.0)]),
        d => Err(Error::Config(format!("d_l_word must be 1 or 2, got {d}"))),
    }
}

/// Collapses per-class scores back onto the signed scale used by human
/// annotations: `c0 - c1` for two classes, `c0` for one.
pub fn signed_score(class_scores: &[f64]) -> f64 {
    match class_scores {
        [pos, neg] => pos - neg,
        [single] => *single,
        other => other.first().copied().unwrap_or(0.0),
    }
}

/// One tokenized sentence with per-token word targets.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenRow {
    pub ids: Vec<usize>,
    /// Source word per token, `-1` for special tokens.
    pub word_index: Vec<i64>,
    /// `seq x d_l_word` soft targets.
    pub targets: Array2<f64>,
    /// True where the token contributes to the word loss.
    pub loss_mask: Vec<bool>,
    pub sentence_target: usize,
}

impl TokenRow {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn active_tokens(&self) -> usize {
        self.loss_mask.iter().filter(|&&m| m).count()
    }
}

/// Broadcasts each word's target vector to all of its subword tokens.
///
/// Every word covered by the tokenization must own at least one token.
/// Sentences without word scores produce rows with an all-false loss mask.
pub fn align_annotations(
    sentence: &AnnotatedSentence,
    tokenized: &Tokenized,
    d_l_word: usize,
) -> Result<TokenRow> {
    let seq = tokenized.ids.len();
    let mut counts = vec![0usize; tokenized.words_covered];
    for &w in &tokenized.word_index {
        if w >= 0 {
            let w = w as usize;
            if w >= tokenized.words_covered {
                return Err(Error::Alignment(format!(
                    "token maps to word {w} but only {} words are covered",
                    tokenized.words_covered
                )));
            }
            counts[w] += 1;
        }
    }
    if let Some(j) = counts.iter().position(|&c| c == 0) {
        return Err(Error::Alignment(format!(
            "word {j} (`{}`) of `{}` produced no subword tokens",
            sentence.words.get(j).map(String::as_str).unwrap_or(""),
            sentence.id
        )));
    }
    let word_targets = sentence.word_targets(d_l_word)?;
    let mut targets = Array2::zeros((seq, d_l_word));
    let mut loss_mask = vec![false; seq];
    if let Some(word_targets) = &word_targets {
        for (t, &w) in tokenized.word_index.iter().enumerate() {
            if w < 0 {
                continue;
            }
            let target = &word_targets[w as usize];
            for (c, &v) in target.iter().enumerate() {
                targets[[t, c]] = v;
            }
            loss_mask[t] = true;
        }
    }
    Ok(TokenRow {
        ids: tokenized.ids.clone(),
        word_index: tokenized.word_index.clone(),
        targets,
        loss_mask,
        sentence_target: sentence.sentence_label,
    })
}

/// Padded batch of token rows.
#[derive(Debug, Clone)]
pub struct TokenBatch {
    pub token_ids: Array2<usize>,
    pub attention_mask: Array2<bool>,
    pub word_index: Array2<i64>,
    pub word_targets: Array3<f64>,
    pub loss_mask: Array2<bool>,
    pub sentence_targets: Vec<usize>,
}

impl TokenBatch {
    pub fn from_rows(rows: &[TokenRow], d_l_word: usize, pad_id: usize) -> Self {
        let seq = rows.iter().map(TokenRow::len).max().unwrap_or(0);
        let b = rows.len();
        let mut token_ids = Array2::from_elem((b, seq), pad_id);
        let mut attention_mask = Array2::from_elem((b, seq), false);
        let mut word_index = Array2::from_elem((b, seq), -1i64);
        let mut word_targets = Array3::zeros((b, seq, d_l_word));
        let mut loss_mask = Array2::from_elem((b, seq), false);
        for (r, row) in rows.iter().enumerate() {
            for t in 0..row.len() {
                token_ids[[r, t]] = row.ids[t];
                attention_mask[[r, t]] = true;
                word_index[[r, t]] = row.word_index[t];
                loss_mask[[r, t]] = row.loss_mask[t];
                for c in 0..d_l_word {
                    word_targets[[r, t, c]] = row.targets[[t, c]];
                }
            }
        }
        TokenBatch {
            token_ids,
            attention_mask,
            word_index,
            word_targets,
            loss_mask,
            sentence_targets: rows.iter().map(|r| r.sentence_target).collect(),
        }
    }

    pub fn batch_size(&self) -> usize {
        self.token_ids.nrows()
    }

    pub fn seq_len(&self) -> usize {
        self.token_ids.ncols()
    }

    /// Unpadded length of row `r`.
    pub fn row_len(&self, r: usize) -> usize {
        self.attention_mask.row(r).iter().filter(|&&m| m).count()
    }
}

/// A set of lowercase stylistic words.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LexiconDictionary {
    pub style_name: String,
    pub entries: BTreeSet<String>,
}

impl LexiconDictionary {
    pub fn new(
        style_name: impl Into<String>,
        words: impl IntoIterator<Item = impl AsRef<str>>,
    ) -> Result<Self> {
        let style_name = style_name.into();
        let mut entries = BTreeSet::new();
        for w in words {
            let w = w.as_ref().trim().to_lowercase();
            if w.is_empty() {
                continue;
            }
            if w.chars().any(char::is_whitespace) {
                return Err(Error::validation(
                    style_name.clone(),
                    format!("lexicon entry `{w}` contains whitespace"),
                ));
            }
            entries.insert(w);
        }
        if entries.is_empty() {
            return Err(Error::validation(style_name, "lexicon has no entries"));
        }
        Ok(LexiconDictionary {
            style_name,
            entries,
        })
    }

    pub fn contains(&self, word: &str) -> bool {
        self.entries.contains(&word.to_lowercase())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Reads a one-word-per-line lexicon; `#` lines and blank lines are skipped.
pub fn load_lexicon(path: impl AsRef<Path>) -> Result<LexiconDictionary> {
    let path = path.as_ref();
    let style = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "lexicon".to_string());
    let reader = BufReader::new(File::open(path)?);
    let mut words = Vec::new();
    for line in reader.lines() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        words.push(trimmed.to_string());
    }
    LexiconDictionary::new(style, words)
}
