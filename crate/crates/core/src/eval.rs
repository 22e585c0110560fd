//! Classification F1, explanation sufficiency and plausibility, the
//! planted-cue corpus generator, and human-study pair export.

use std::collections::BTreeMap;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{score_to_target, signed_score, AnnotatedSentence, LexiconDictionary, StyleTask, WordScores};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::ig::{attribute_sentence, normalize_scores};
use crate::model::StyleModel;
use crate::tokenize::Vocabulary;
use crate::train::{train, TrainConfig};

pub const DEFAULT_K_FRACTION: f64 = 0.3;

/// F1 of the `positive` label. Returns 1.0 when neither predictions nor gold
/// contain the positive label.
pub fn f1(predictions: &[usize], gold: &[usize], positive: usize) -> Result<f64> {
    if predictions.len() != gold.len() {
        return Err(Error::validation(
            "f1",
            format!("{} predictions for {} gold labels", predictions.len(), gold.len()),
        ));
    }
    if predictions.is_empty() {
        return Err(Error::validation("f1", "no labels to score"));
    }
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (&p, &g) in predictions.iter().zip(gold) {
        match (p == positive, g == positive) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    if tp + fp + fn_ == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * tp as f64 / (2 * tp + fp + fn_) as f64)
}

/// Word-level F1 after binarizing both sides at `threshold`. `None` when the
/// gold side has no positive entry.
pub fn word_f1(predicted: &[f64], gold: &[f64], threshold: f64) -> Result<Option<f64>> {
    if predicted.len() != gold.len() {
        return Err(Error::validation(
            "word_f1",
            format!("{} predicted scores for {} gold scores", predicted.len(), gold.len()),
        ));
    }
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (&p, &g) in predicted.iter().zip(gold) {
        match (p >= threshold, g >= threshold) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    if tp + fn_ == 0 {
        return Ok(None);
    }
    Ok(Some(2.0 * tp as f64 / (2 * tp + fp + fn_) as f64))
}

/// `ceil(fraction * average_length)`, at least 1.
pub fn top_k_budget(k_fraction: f64, average_length: f64) -> usize {
    ((k_fraction * average_length).ceil() as usize).max(1)
}

pub fn average_length(corpus: &[AnnotatedSentence]) -> f64 {
    if corpus.is_empty() {
        return 0.0;
    }
    corpus.iter().map(|s| s.words.len()).sum::<usize>() as f64 / corpus.len() as f64
}

/// Positions of the `k` highest scores, earlier positions winning ties,
/// returned in sentence order. Shorter sentences return every position.
pub fn top_k_words(scores: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(Error::Config("top-k budget must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(k);
    order.sort_unstable();
    Ok(order)
}

/// Per-word scores produced by an explainer.
#[derive(Debug, Clone, PartialEq)]
pub struct ExplainerScores {
    /// Used for top-k ranking (positive stylistic direction).
    pub ranking: Vec<f64>,
    /// Signed scale comparable with human perception scores.
    pub signed: Vec<f64>,
}

type ScoreFn<'a> = dyn Fn(&AnnotatedSentence) -> Result<ExplainerScores> + Send + Sync + 'a;

/// A named word-scoring function.
pub struct ExplainerHandle<'a> {
    pub name: String,
    score_fn: Box<ScoreFn<'a>>,
}

impl std::fmt::Debug for ExplainerHandle<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ExplainerHandle").field("name", &self.name).finish()
    }
}

fn planted(sentence: &AnnotatedSentence) -> Result<Vec<f64>> {
    match &sentence.word_scores {
        Some(WordScores::Signed(s)) => Ok(s.clone()),
        Some(WordScores::PerClass(rows)) => Ok(rows.iter().map(|r| signed_score(r)).collect()),
        None => Err(Error::validation(&sentence.id, "oracle explainer needs word scores")),
    }
}

fn id_seed(seed: u64, id: &str) -> u64 {
    let digest = Sha256::digest(id.as_bytes());
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    seed ^ u64::from_le_bytes(bytes)
}

impl<'a> ExplainerHandle<'a> {
    pub fn new<F>(name: impl Into<String>, score_fn: F) -> Self
    where
        F: Fn(&AnnotatedSentence) -> Result<ExplainerScores> + Send + Sync + 'a,
    {
        ExplainerHandle {
            name: name.into(),
            score_fn: Box::new(score_fn),
        }
    }

    pub fn explain(&self, sentence: &AnnotatedSentence) -> Result<ExplainerScores> {
        let out = (self.score_fn)(sentence)?;
        if out.ranking.len() != sentence.words.len() || out.signed.len() != sentence.words.len() {
            return Err(Error::validation(
                &sentence.id,
                format!("explainer `{}` scored the wrong number of words", self.name),
            ));
        }
        Ok(out)
    }

    /// Ranking scores only.
    pub fn scores(&self, sentence: &AnnotatedSentence) -> Result<Vec<f64>> {
        self.explain(sentence).map(|s| s.ranking)
    }

    /// Word head of a trained model, squashed to `[0, 1]`.
    pub fn stylex(model: &'a StyleModel) -> Self {
        Self::new("stylex", move |s: &AnnotatedSentence| {
            let e = model.explain(s)?;
            Ok(ExplainerScores {
                ranking: e.positive_scores(&model.task),
                signed: e.word_scores.iter().map(|c| signed_score(c)).collect(),
            })
        })
    }

    /// Integrated gradients toward the positive sentence label.
    pub fn integrated_gradients(model: &'a StyleModel, steps: usize, normalize: bool) -> Self {
        Self::new("integrated_gradients", move |s: &AnnotatedSentence| {
            let (mut words, _) = attribute_sentence(model, s, model.task.positive_label(), steps)?;
            if normalize {
                normalize_scores(&mut words.scores);
            }
            Ok(ExplainerScores {
                ranking: words.scores.clone(),
                signed: words.scores,
            })
        })
    }

    /// Planted scores: every cue ranks with its magnitude.
    pub fn oracle() -> Self {
        Self::new("oracle", |s: &AnnotatedSentence| {
            let signed = planted(s)?;
            Ok(ExplainerScores {
                ranking: signed.iter().map(|v| v.abs()).collect(),
                signed,
            })
        })
    }

    /// The oracle with every ranking score negated.
    pub fn inverted_oracle() -> Self {
        Self::new("inverted_oracle", |s: &AnnotatedSentence| {
            let signed = planted(s)?;
            Ok(ExplainerScores {
                ranking: signed.iter().map(|v| -v.abs()).collect(),
                signed: signed.iter().map(|v| -v).collect(),
            })
        })
    }

    /// Uniform scores keyed on `seed` and the sentence id.
    pub fn random(seed: u64) -> Self {
        Self::new("random", move |s: &AnnotatedSentence| {
            let mut rng = ChaCha8Rng::seed_from_u64(id_seed(seed, &s.id));
            let scores: Vec<f64> = s.words.iter().map(|_| rng.random::<f64>()).collect();
            Ok(ExplainerScores {
                ranking: scores.clone(),
                signed: scores,
            })
        })
    }
}

/// Settings of the plain classifier trained on extracted words.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierConfig {
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            encoder: EncoderConfig {
                max_seq_len: 128,
                ..EncoderConfig::default()
            },
            train: TrainConfig {
                epochs: 5,
                learning_rate: 1e-3,
                batch_size: 16,
                ..TrainConfig::default()
            },
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SufficiencyReport {
    pub style: String,
    pub explainer: String,
    pub k_fraction: f64,
    pub avg_sentence_length: f64,
    pub k: usize,
    pub f1_on_extracts: f64,
}

/// Keeps the top-`k` words of every sentence; `None` keeps whole sentences.
pub fn extract(
    explainer: &ExplainerHandle<'_>,
    corpus: &[AnnotatedSentence],
    k: Option<usize>,
) -> Result<Vec<AnnotatedSentence>> {
    corpus
        .par_iter()
        .map(|s| {
            let words: Vec<String> = match k {
                None => s.words.clone(),
                Some(k) => {
                    let scores = explainer.scores(s)?;
                    top_k_words(&scores, k)?.into_iter().map(|i| s.words[i].clone()).collect()
                }
            };
            Ok(AnnotatedSentence {
                id: s.id.clone(),
                text: words.join(" "),
                words,
                word_scores: None,
                sentence_label: s.sentence_label,
                provenance: crate::data::Provenance::None,
            })
        })
        .collect()
}

/// Trains a plain classifier on each sentence's top-k words and reports
/// F1 on the test extracts. `k` comes from the training split.
pub fn sufficiency_test(
    task: &StyleTask,
    explainer: &ExplainerHandle<'_>,
    train_corpus: &[AnnotatedSentence],
    test_corpus: &[AnnotatedSentence],
    k_fraction: f64,
    classifier: &ClassifierConfig,
) -> Result<SufficiencyReport> {
    if !(k_fraction > 0.0 && k_fraction <= 1.0) {
        return Err(Error::Config(format!("k_fraction must lie in (0, 1], got {k_fraction}")));
    }
    let avg = average_length(train_corpus);
    let k = top_k_budget(k_fraction, avg);
    let budget = (k_fraction < 1.0).then_some(k);
    let train_x = extract(explainer, train_corpus, budget)?;
    let test_x = extract(explainer, test_corpus, budget)?;
    let train_x: Vec<AnnotatedSentence> = train_x.into_iter().filter(|s| !s.words.is_empty()).collect();
    if train_x.is_empty() || test_x.is_empty() {
        return Err(Error::Pipeline("sufficiency extraction produced an empty corpus".into()));
    }
    let words: Vec<Vec<String>> = train_x.iter().map(|s| s.words.clone()).collect();
    let vocab = Vocabulary::build(&words, 1);
    let mut encoder = classifier.encoder.clone();
    encoder.vocab_size = 0;
    let mut model = StyleModel::classifier(task.clone(), vocab, encoder, classifier.seed)?;
    train(&mut model, &train_x, &classifier.train)?;
    let predictions: Vec<usize> = test_x
        .par_iter()
        .map(|s| {
            if s.words.is_empty() {
                Ok(1 - task.positive_label())
            } else {
                model.predict(&s.words).map(|(_, label)| label)
            }
        })
        .collect::<Result<_>>()?;
    let gold: Vec<usize> = test_x.iter().map(|s| s.sentence_label).collect();
    Ok(SufficiencyReport {
        style: task.name.clone(),
        explainer: explainer.name.clone(),
        k_fraction,
        avg_sentence_length: avg,
        k,
        f1_on_extracts: f1(&predictions, &gold, task.positive_label())?,
    })
}

/// Pearson product-moment correlation, computed in two passes.
pub fn pearson_r(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::validation("pearson_r", format!("lengths {} and {}", x.len(), y.len())));
    }
    if x.len() < 2 {
        return Err(Error::validation("pearson_r", "need at least two points"));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation("a series has zero variance".into()));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Percentage of positive-label sentences whose top-k words include a
/// lexicon entry. `k` comes from the positive subset's average length.
pub fn lexicon_overlap(
    explainer: &ExplainerHandle<'_>,
    corpus: &[AnnotatedSentence],
    lexicon: &LexiconDictionary,
    k_fraction: f64,
    positive_label: usize,
) -> Result<f64> {
    let positive: Vec<&AnnotatedSentence> = corpus.iter().filter(|s| s.sentence_label == positive_label).collect();
    if positive.is_empty() {
        return Err(Error::validation("lexicon_overlap", "no positive-label sentences"));
    }
    let avg = positive.iter().map(|s| s.words.len()).sum::<usize>() as f64 / positive.len() as f64;
    let k = top_k_budget(k_fraction, avg);
    let hits: Vec<bool> = positive
        .par_iter()
        .map(|s| {
            let scores = explainer.scores(s)?;
            Ok(top_k_words(&scores, k)?.into_iter().any(|i| lexicon.contains(&s.words[i])))
        })
        .collect::<Result<_>>()?;
    Ok(100.0 * hits.iter().filter(|&&h| h).count() as f64 / positive.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlausibilityReport {
    pub style: String,
    pub explainer: String,
    pub pearson_r: f64,
    pub overlap_percent: Option<f64>,
    pub k_fraction: f64,
    pub words_compared: usize,
}

/// Predicted and human scores on the same signed scale, concatenated over
/// the corpus.
pub fn paired_scores(
    task: &StyleTask,
    explainer: &ExplainerHandle<'_>,
    corpus: &[AnnotatedSentence],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let per_sentence: Vec<(Vec<f64>, Vec<f64>)> = corpus
        .par_iter()
        .map(|s| {
            let human = match &s.word_scores {
                Some(WordScores::Signed(v)) => v
                    .iter()
                    .map(|&x| score_to_target(x, task.d_l_word).map(|t| signed_score(&t)))
                    .collect::<Result<Vec<f64>>>()?,
                _ => return Err(Error::validation(&s.id, "plausibility needs human word scores")),
            };
            Ok((explainer.explain(s)?.signed, human))
        })
        .collect::<Result<_>>()?;
    let (mut pred, mut human) = (Vec::new(), Vec::new());
    for (p, h) in per_sentence {
        pred.extend(p);
        human.extend(h);
    }
    Ok((pred, human))
}

pub fn plausibility(
    task: &StyleTask,
    explainer: &ExplainerHandle<'_>,
    corpus: &[AnnotatedSentence],
    lexicon: Option<&LexiconDictionary>,
    k_fraction: f64,
) -> Result<PlausibilityReport> {
    let (pred, human) = paired_scores(task, explainer, corpus)?;
    let overlap_percent = match lexicon {
        Some(lex) => Some(lexicon_overlap(explainer, corpus, lex, k_fraction, task.positive_label())?),
        None => None,
    };
    Ok(PlausibilityReport {
        style: task.name.clone(),
        explainer: explainer.name.clone(),
        pearson_r: pearson_r(&pred, &human)?,
        overlap_percent,
        k_fraction,
        words_compared: pred.len(),
    })
}

const POSITIVE_CUES: [&str; 24] = [
    "great", "excellent", "wonderful", "superb", "delightful", "brilliant", "lovely", "charming",
    "fantastic", "splendid", "marvelous", "terrific", "thanks", "please", "kindly", "appreciate",
    "gracious", "amazing", "enjoyable", "pleasant", "beautiful", "glad", "perfect", "fabulous",
];
const NEGATIVE_CUES: [&str; 24] = [
    "awful", "terrible", "horrible", "dreadful", "boring", "dull", "lousy", "pathetic",
    "miserable", "nasty", "stupid", "useless", "worthless", "annoying", "disgusting", "hideous",
    "tedious", "clumsy", "rude", "shoddy", "bland", "mediocre", "ugly", "painful",
];
const ONSETS: [&str; 12] = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t"];
const NUCLEI: [&str; 5] = ["a", "e", "i", "o", "u"];

/// Deterministic pronounceable nonce word for filler index `i`.
pub fn filler_word(i: usize) -> String {
    let syllables = ONSETS.len() * NUCLEI.len();
    let mut out = String::new();
    let mut rest = i;
    for _ in 0..2 {
        let s = rest % syllables;
        out.push_str(ONSETS[s / NUCLEI.len()]);
        out.push_str(NUCLEI[s % NUCLEI.len()]);
        rest /= syllables;
    }
    if rest > 0 {
        out.push_str(&filler_word(rest - 1));
    }
    out
}

/// The first `n` nonce words that do not collide with a cue word.
pub fn filler_words(n: usize) -> Vec<String> {
    (0..)
        .map(filler_word)
        .filter(|w| !POSITIVE_CUES.contains(&w.as_str()) && !NEGATIVE_CUES.contains(&w.as_str()))
        .take(n)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub filler_vocab: usize,
    /// Cue words per polarity.
    pub cue_vocab: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub min_cues: usize,
    pub max_cues: usize,
    /// Probability that a sentence's label follows its cues; otherwise a
    /// fair coin decides.
    pub cue_strength: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            filler_vocab: 200,
            cue_vocab: 12,
            min_len: 8,
            max_len: 14,
            min_cues: 1,
            max_cues: 3,
            cue_strength: 1.0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.filler_vocab == 0 || self.cue_vocab == 0 || self.cue_vocab > POSITIVE_CUES.len() {
            return bad("filler_vocab must be positive and cue_vocab in 1..=24");
        }
        if self.min_cues == 0 || self.min_cues > self.max_cues {
            return bad("need 1 <= min_cues <= max_cues");
        }
        if self.min_len < self.max_cues || self.min_len > self.max_len {
            return bad("need max_cues <= min_len <= max_len");
        }
        if !(0.0..=1.0).contains(&self.cue_strength) {
            return bad("cue_strength must lie in [0, 1]");
        }
        Ok(())
    }

    pub fn positive_cues(&self) -> &'static [&'static str] {
        &POSITIVE_CUES[..self.cue_vocab]
    }

    pub fn negative_cues(&self) -> &'static [&'static str] {
        &NEGATIVE_CUES[..self.cue_vocab]
    }
}

/// Sentences of nonce filler words with planted cue words.
///
/// Each sentence draws a polarity and plants 1..=`max_cues` cues of it. The
/// label follows the cues (label 0 for positive cues) with probability
/// `cue_strength`. Planted scores are +1 for positive cues and 0 for filler;
/// negative cues score -1 for two-class styles and 0 for presence styles.
pub fn make_synthetic_corpus(
    task: &StyleTask,
    config: &SyntheticConfig,
    n: usize,
    seed: u64,
) -> Result<Vec<AnnotatedSentence>> {
    config.validate()?;
    task.validate()?;
    if n == 0 {
        return Err(Error::Config("synthetic corpus needs n >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fillers = filler_words(config.filler_vocab);
    let negative_score = if task.d_l_word == 2 { -1.0 } else { 0.0 };
    (0..n)
        .map(|i| {
            let len = rng.random_range(config.min_len..=config.max_len);
            let cues = rng.random_range(config.min_cues..=config.max_cues);
            let positive = rng.random_bool(0.5);
            let mut slots: Vec<usize> = (0..len).collect();
            slots.shuffle(&mut rng);
            let cue_slots = &slots[..cues];
            let mut words = Vec::with_capacity(len);
            let mut scores = Vec::with_capacity(len);
            for pos in 0..len {
                if cue_slots.contains(&pos) {
                    let (list, score) = if positive {
                        (config.positive_cues(), 1.0)
                    } else {
                        (config.negative_cues(), negative_score)
                    };
                    words.push(list[rng.random_range(0..list.len())].to_string());
                    scores.push(score);
                } else {
                    words.push(fillers[rng.random_range(0..fillers.len())].clone());
                    scores.push(0.0);
                }
            }
            let cue_label = if positive { 0 } else { 1 };
            let label = if rng.random_bool(config.cue_strength) {
                cue_label
            } else {
                rng.random_range(0..2)
            };
            AnnotatedSentence::with_human_scores(format!("syn-{seed}-{i}"), words, scores, label)
        })
        .collect()
}

/// One anonymized comparison record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub id: String,
    pub style: String,
    pub text: String,
    pub words: Vec<String>,
    #[serde(rename = "highlights_A")]
    pub highlights_a: Vec<f64>,
    #[serde(rename = "highlights_B")]
    pub highlights_b: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairKeyEntry {
    pub id: String,
    #[serde(rename = "A")]
    pub a: String,
    #[serde(rename = "B")]
    pub b: String,
}

/// Maps every record to the explainer behind each side.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairKey {
    pub pairs_sha256: String,
    pub entries: Vec<PairKeyEntry>,
}

impl PairKey {
    pub fn lookup(&self) -> BTreeMap<&str, &PairKeyEntry> {
        self.entries.iter().map(|e| (e.id.as_str(), e)).collect()
    }
}

/// Scales by the sentence maximum and clips negatives to zero.
pub fn max_normalize(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max > 0.0 {
        scores.iter().map(|s| (s / max).max(0.0)).collect()
    } else {
        vec![0.0; scores.len()]
    }
}

/// Builds A/B records for two explainers with a per-record random order.
pub fn export_comparison_pairs(
    style: &str,
    explainer_a: &ExplainerHandle<'_>,
    explainer_b: &ExplainerHandle<'_>,
    sentences: &[AnnotatedSentence],
    seed: u64,
) -> Result<(Vec<PairRecord>, Vec<PairKeyEntry>)> {
    let scored: Vec<(Vec<f64>, Vec<f64>)> = sentences
        .par_iter()
        .map(|s| Ok((explainer_a.scores(s)?, explainer_b.scores(s)?)))
        .collect::<Result<_>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::with_capacity(sentences.len());
    let mut key = Vec::with_capacity(sentences.len());
    for (s, (a, b)) in sentences.iter().zip(scored) {
        let (first, second, names) = if rng.random_bool(0.5) {
            (b, a, (&explainer_b.name, &explainer_a.name))
        } else {
            (a, b, (&explainer_a.name, &explainer_b.name))
        };
        let id = format!("{style}-{}", s.id);
        records.push(PairRecord {
            id: id.clone(),
            style: style.to_string(),
            text: s.text.clone(),
            words: s.words.clone(),
            highlights_a: max_normalize(&first),
            highlights_b: max_normalize(&second),
        });
        key.push(PairKeyEntry {
            id,
            a: names.0.clone(),
            b: names.1.clone(),
        });
    }
    Ok((records, key))
}

/// Writes the pair file and a separate key file bound to it by hash.
pub fn write_pairs(
    pairs_path: impl AsRef<Path>,
    key_path: impl AsRef<Path>,
    records: &[PairRecord],
    entries: Vec<PairKeyEntry>,
) -> Result<PairKey> {
    let mut body = Vec::new();
    for r in records {
        serde_json::to_writer(&mut body, r)?;
        body.push(b'\n');
    }
    std::fs::write(pairs_path, &body)?;
    let key = PairKey {
        pairs_sha256: hex(&Sha256::digest(&body)),
        entries,
    };
    let mut out = BufWriter::new(std::fs::File::create(key_path)?);
    serde_json::to_writer_pretty(&mut out, &key)?;
    out.write_all(b"\n")?;
    out.flush()?;
    Ok(key)
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let mut out = BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer_pretty(&mut out, value)?;
    out.write_all(b"\n")?;
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn sentence(id: &str, text: &str, scores: &[f64], label: usize) -> AnnotatedSentence {
        AnnotatedSentence::with_human_scores(
            id,
            text.split_whitespace().map(String::from).collect(),
            scores.to_vec(),
            label,
        )
        .unwrap()
    }

    #[test]
    fn f1_examples() {
        assert_eq!(f1(&[1, 0, 1], &[1, 0, 1], 1).unwrap(), 1.0);
        assert_eq!(f1(&[0, 0, 0], &[1, 0, 1], 1).unwrap(), 0.0);
        assert_eq!(f1(&[1, 1, 0, 0], &[1, 0, 1, 0], 1).unwrap(), 0.5);
        assert!(matches!(f1(&[1], &[1, 0], 1), Err(Error::Validation { .. })));
        assert!(f1(&[], &[], 1).is_err());
    }

    #[test]
    fn word_f1_undefined_without_gold_positives() {
        assert_eq!(word_f1(&[0.9, 0.1], &[0.0, 0.0], 0.5).unwrap(), None);
        assert_eq!(word_f1(&[0.9, 0.1], &[1.0, 0.0], 0.5).unwrap(), Some(1.0));
        assert_eq!(word_f1(&[0.9, 0.9], &[1.0, 0.0], 0.5).unwrap(), Some(2.0 / 3.0));
    }

    #[test]
    fn top_k_examples() {
        assert_eq!(top_k_budget(0.3, 10.0), 3);
        assert_eq!(top_k_words(&[0.2; 5], 2).unwrap(), vec![0, 1]);
        assert_eq!(top_k_words(&[0.1, 0.9, 0.5], 2).unwrap(), vec![1, 2]);
        assert_eq!(top_k_words(&[0.1, 0.9], 5).unwrap(), vec![0, 1]);
        assert!(top_k_words(&[0.1], 0).is_err());
    }

    #[test]
    fn pearson_examples() {
        let x = [1.0, 2.0, 3.0];
        assert_eq!(pearson_r(&x, &x).unwrap(), 1.0);
        assert_eq!(pearson_r(&x, &[-1.0, -2.0, -3.0]).unwrap(), -1.0);
        // Deviations (-1, 0, 1) against (-7/3, -1/3, 8/3): r = 5 / sqrt(2 * 114 / 9).
        let expect = 5.0 / (2.0 * 114.0 / 9.0f64).sqrt();
        assert_abs_diff_eq!(pearson_r(&x, &[2.0, 4.0, 7.0]).unwrap(), expect, epsilon = 1e-12);
        assert_abs_diff_eq!(expect, 0.993399, epsilon = 1e-6);
        // Deviations against (-5/3, 1/3, 4/3): r = 3 / sqrt(2 * 42 / 9).
        let r = pearson_r(&x, &[2.0, 4.0, 5.0]).unwrap();
        assert_abs_diff_eq!(r, 3.0 / (2.0 * 42.0 / 9.0f64).sqrt(), epsilon = 1e-12);
        assert_abs_diff_eq!(r, 0.98198, epsilon = 1e-5);
        assert!(matches!(pearson_r(&x, &[1.0, 1.0, 1.0]), Err(Error::UndefinedCorrelation(_))));
        assert!(pearson_r(&[1.0], &[2.0]).is_err());
    }

    #[test]
    fn lexicon_overlap_examples() {
        let corpus = vec![
            sentence("a", "good", &[1.0], 0),
            sentence("b", "meh", &[1.0], 0),
            sentence("c", "love", &[1.0], 0),
            sentence("d", "bad", &[1.0], 1),
        ];
        let lex = LexiconDictionary::new("s", ["good", "love"]).unwrap();
        let pct = lexicon_overlap(&ExplainerHandle::oracle(), &corpus, &lex, 0.3, 0).unwrap();
        assert_abs_diff_eq!(pct, 200.0 / 3.0, epsilon = 1e-9);

        let all = LexiconDictionary::new("s", ["good", "love", "meh"]).unwrap();
        assert_eq!(lexicon_overlap(&ExplainerHandle::oracle(), &corpus, &all, 0.3, 0).unwrap(), 100.0);
        let none = LexiconDictionary::new("s", ["zzz"]).unwrap();
        assert_eq!(lexicon_overlap(&ExplainerHandle::oracle(), &corpus, &none, 0.3, 0).unwrap(), 0.0);
        assert!(lexicon_overlap(&ExplainerHandle::oracle(), &corpus[3..], &lex, 0.3, 0).is_err());
    }

    #[test]
    fn synthetic_corpus_contract() {
        let task = StyleTask::builtin("sentiment").unwrap();
        let cfg = SyntheticConfig::default();
        let a = make_synthetic_corpus(&task, &cfg, 50, 7).unwrap();
        assert_eq!(a, make_synthetic_corpus(&task, &cfg, 50, 7).unwrap());
        for s in &a {
            let Some(WordScores::Signed(scores)) = &s.word_scores else { panic!() };
            assert!(scores.iter().any(|&v| v != 0.0));
            let cue = scores.iter().find(|&&v| v != 0.0).unwrap();
            assert_eq!(s.sentence_label, if *cue > 0.0 { 0 } else { 1 });
            s.validate(Some(&task)).unwrap();
        }
        assert!(make_synthetic_corpus(&task, &cfg, 0, 1).is_err());

        let anger = StyleTask::builtin("anger").unwrap();
        for s in make_synthetic_corpus(&anger, &cfg, 20, 7).unwrap() {
            let Some(WordScores::Signed(scores)) = &s.word_scores else { panic!() };
            assert!(scores.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn zero_cue_strength_decouples_labels() {
        let task = StyleTask::builtin("sentiment").unwrap();
        let cfg = SyntheticConfig {
            cue_strength: 0.0,
            ..SyntheticConfig::default()
        };
        let corpus = make_synthetic_corpus(&task, &cfg, 2000, 3).unwrap();
        let cue_pred: Vec<usize> = corpus
            .iter()
            .map(|s| match &s.word_scores {
                Some(WordScores::Signed(v)) if v.iter().any(|&x| x > 0.0) => 0,
                _ => 1,
            })
            .collect();
        let gold: Vec<usize> = corpus.iter().map(|s| s.sentence_label).collect();
        let score = f1(&cue_pred, &gold, 0).unwrap();
        assert!((score - 0.5).abs() <= 0.1, "f1 {score}");
    }

    #[test]
    fn explainers() {
        let s = sentence("x", "a great b", &[0.0, 1.0, 0.0], 0);
        assert_eq!(ExplainerHandle::oracle().scores(&s).unwrap(), vec![0.0, 1.0, 0.0]);
        assert_eq!(ExplainerHandle::inverted_oracle().scores(&s).unwrap(), vec![0.0, -1.0, 0.0]);
        let r = ExplainerHandle::random(3);
        assert_eq!(r.scores(&s).unwrap(), r.scores(&s).unwrap());
        assert_ne!(r.scores(&s).unwrap(), ExplainerHandle::random(4).scores(&s).unwrap());
        let bad = ExplainerHandle::new("bad", |_: &AnnotatedSentence| {
            Ok(ExplainerScores {
                ranking: vec![1.0],
                signed: vec![1.0],
            })
        });
        assert!(bad.scores(&s).is_err());
    }

    #[test]
    fn extraction_keeps_order_and_whole_sentences() {
        let s = sentence("x", "w1 cue w2 cue2", &[0.0, 1.0, 0.0, -1.0], 0);
        let got = extract(&ExplainerHandle::oracle(), std::slice::from_ref(&s), Some(2)).unwrap();
        assert_eq!(got[0].words, vec!["cue", "cue2"]);
        let full = extract(&ExplainerHandle::oracle(), std::slice::from_ref(&s), None).unwrap();
        assert_eq!(full[0].words, s.words);
    }

    #[test]
    fn pair_export_round_trip() {
        let task = StyleTask::builtin("sentiment").unwrap();
        let corpus = make_synthetic_corpus(&task, &SyntheticConfig::default(), 20, 1).unwrap();
        let (records, entries) = export_comparison_pairs(
            "sentiment",
            &ExplainerHandle::oracle(),
            &ExplainerHandle::random(2),
            &corpus,
            11,
        )
        .unwrap();
        assert_eq!(records.len(), 20);
        let dir = tempfile::tempdir().unwrap();
        let (pairs, keyp) = (dir.path().join("pairs.jsonl"), dir.path().join("key.json"));
        let key = write_pairs(&pairs, &keyp, &records, entries).unwrap();
        let body = std::fs::read(&pairs).unwrap();
        assert_eq!(hex(&Sha256::digest(&body)), key.pairs_sha256);
        let back: PairKey = serde_json::from_slice(&std::fs::read(&keyp).unwrap()).unwrap();
        let lookup = back.lookup();
        let mut swapped = 0;
        for line in String::from_utf8(body).unwrap().lines() {
            let v: serde_json::Value = serde_json::from_str(line).unwrap();
            let rec: PairRecord = serde_json::from_value(v.clone()).unwrap();
            assert!(v.get("highlights_A").is_some());
            let entry = lookup[rec.id.as_str()];
            let source = corpus.iter().find(|s| rec.id.ends_with(&s.id)).unwrap();
            let oracle = max_normalize(&ExplainerHandle::oracle().scores(source).unwrap());
            let oracle_side = if entry.a == "oracle" { &rec.highlights_a } else { &rec.highlights_b };
            assert_eq!(oracle_side, &oracle);
            swapped += usize::from(entry.a != "oracle");
            for h in [&rec.highlights_a, &rec.highlights_b] {
                let max = h.iter().copied().fold(0.0, f64::max);
                assert_eq!(max, 1.0);
            }
        }
        assert!(swapped > 0 && swapped < 20);
    }

    #[test]
    fn max_normalize_contract() {
        assert_eq!(max_normalize(&[0.5, 1.0, -0.5]), vec![0.5, 1.0, 0.0]);
        assert_eq!(max_normalize(&[0.0, -1.0]), vec![0.0, 0.0]);
    }

    #[test]
    fn filler_words_are_distinct() {
        let raw: std::collections::BTreeSet<String> = (0..2000).map(filler_word).collect();
        assert_eq!(raw.len(), 2000);
        let words = filler_words(2000);
        assert_eq!(words.len(), 2000);
        assert!(words.iter().all(|w| !POSITIVE_CUES.contains(&w.as_str()) && !NEGATIVE_CUES.contains(&w.as_str())));
    }

    proptest! {
        #[test]
        fn pearson_matches_one_pass_formula(xs in prop::collection::vec((-100.0f64..100.0, -100.0f64..100.0), 2..60)) {
            let (x, y): (Vec<f64>, Vec<f64>) = xs.into_iter().unzip();
            let n = x.len() as f64;
            let (sx, sy) = (x.iter().sum::<f64>(), y.iter().sum::<f64>());
            let sxy: f64 = x.iter().zip(&y).map(|(a, b)| a * b).sum();
            let sxx: f64 = x.iter().map(|a| a * a).sum();
            let syy: f64 = y.iter().map(|b| b * b).sum();
            let den = ((n * sxx - sx * sx) * (n * syy - sy * sy)).sqrt();
            prop_assume!(den > 1e-3);
            let oracle = (n * sxy - sx * sy) / den;
            prop_assert!((pearson_r(&x, &y).unwrap() - oracle).abs() <= 1e-9);
        }

        #[test]
        fn top_k_stable_under_low_additions(scores in prop::collection::vec(0.0f64..1.0, 1..20), k in 1usize..6, pos in 0usize..20) {
            let before = top_k_words(&scores, k).unwrap();
            prop_assume!(before.len() == k);
            let kth = before.iter().map(|&i| scores[i]).fold(f64::INFINITY, f64::min);
            let pos = pos.min(scores.len());
            let mut extended = scores.clone();
            extended.insert(pos, kth - 0.5);
            let after: Vec<usize> = top_k_words(&extended, k).unwrap()
                .into_iter()
                .map(|i| if i > pos { i - 1 } else { i })
                .collect();
            prop_assert_eq!(before, after);
        }

        #[test]
        fn f1_permutation_invariant(pairs in prop::collection::vec((0usize..2, 0usize..2), 1..40), seed in any::<u64>()) {
            let (p, g): (Vec<usize>, Vec<usize>) = pairs.iter().copied().unzip();
            let mut shuffled = pairs.clone();
            shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let (ps, gs): (Vec<usize>, Vec<usize>) = shuffled.into_iter().unzip();
            prop_assert_eq!(f1(&p, &g, 1).unwrap(), f1(&ps, &gs, 1).unwrap());
        }

        #[test]
        fn overlap_monotone_in_lexicon(seed in 0u64..50, extra in prop::sample::subsequence(POSITIVE_CUES.to_vec(), 0..6)) {
            let task = StyleTask::builtin("sentiment").unwrap();
            let corpus = make_synthetic_corpus(&task, &SyntheticConfig::default(), 30, seed).unwrap();
            let base = LexiconDictionary::new("s", ["great", "excellent"]).unwrap();
            let sup = LexiconDictionary::new("s", ["great", "excellent"].into_iter().chain(extra)).unwrap();
            let e = ExplainerHandle::random(seed);
            let a = lexicon_overlap(&e, &corpus, &base, 0.3, 0).unwrap();
            let b = lexicon_overlap(&e, &corpus, &sup, 0.3, 0).unwrap();
            prop_assert!(b >= a);
        }
    }
}
