//! Seed word scorer, pseudo-labeling, and joint retraining.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::ParamStore;
use crate::data::{score_to_target, AnnotatedSentence, Provenance, StyleTask, WordScores};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::eval::word_f1;
use crate::model::{StyleModel, DEFAULT_ALPHA};
use crate::tokenize::Vocabulary;
use crate::train::{train, train_with, EpochMetrics, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub seed_epochs: usize,
    pub joint_epochs: usize,
    /// Cut for binarizing predicted and gold word scores in word F1.
    pub score_threshold: f64,
    /// Share of the seed corpus held out for checkpoint selection.
    pub heldout_fraction: f64,
    /// Word-loss weight while training the seed scorer.
    pub seed_alpha: f64,
    /// Word-loss weight of the final joint model.
    pub alpha: f64,
    /// Largest tolerated `[UNK]` rate when pseudo-labeling.
    pub max_unk_rate: f64,
    pub vocab_min_count: usize,
    pub seed: u64,
    pub encoder: EncoderConfig,
    /// Optimizer settings; `epochs` and `seed` are set per stage.
    pub optimizer: TrainConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed_epochs: 50,
            joint_epochs: 5,
            score_threshold: 0.5,
            heldout_fraction: 0.1,
            seed_alpha: 1.0,
            alpha: DEFAULT_ALPHA,
            max_unk_rate: 0.5,
            vocab_min_count: 1,
            seed: 42,
            encoder: EncoderConfig::default(),
            optimizer: TrainConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.score_threshold > 0.0 && self.score_threshold < 1.0) {
            return Err(Error::Config(format!(
                "score_threshold must lie in (0, 1), got {}",
                self.score_threshold
            )));
        }
        if !(self.heldout_fraction > 0.0 && self.heldout_fraction < 1.0) {
            return Err(Error::Config(format!(
                "heldout_fraction must lie in (0, 1), got {}",
                self.heldout_fraction
            )));
        }
        if !(self.max_unk_rate >= 0.0 && self.max_unk_rate <= 1.0) {
            return Err(Error::Config("max_unk_rate must lie in [0, 1]".into()));
        }
        self.encoder_template(1).validate()?;
        self.optimizer.validate()
    }

    /// Encoder settings sized for a vocabulary of `vocab_size` tokens.
    pub fn encoder_template(&self, vocab_size: usize) -> EncoderConfig {
        EncoderConfig {
            vocab_size,
            ..self.encoder.clone()
        }
    }

    fn stage(&self, epochs: usize, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs,
            seed,
            ..self.optimizer.clone()
        }
    }
}

/// Result of the seed stage.
#[derive(Debug, Clone)]
pub struct ScorerOutcome {
    pub model: StyleModel,
    /// 1-based epoch whose weights were kept; `None` if every held-out F1
    /// was undefined and the last epoch was kept.
    pub selected_epoch: Option<usize>,
    pub heldout_f1: Vec<Option<f64>>,
    pub history: Vec<EpochMetrics>,
    pub heldout_ids: Vec<String>,
}

/// Seed-deterministic split into (train, held-out).
pub fn heldout_split(
    corpus: &[AnnotatedSentence],
    fraction: f64,
    seed: u64,
) -> Result<(Vec<AnnotatedSentence>, Vec<AnnotatedSentence>)> {
    if corpus.len() < 2 {
        return Err(Error::Config("seed corpus needs at least two sentences".into()));
    }
    let held = ((fraction * corpus.len() as f64).round() as usize).clamp(1, corpus.len() - 1);
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5EED));
    let mut held_idx = order[..held].to_vec();
    let mut train_idx = order[held..].to_vec();
    held_idx.sort_unstable();
    train_idx.sort_unstable();
    Ok((
        train_idx.into_iter().map(|i| corpus[i].clone()).collect(),
        held_idx.into_iter().map(|i| corpus[i].clone()).collect(),
    ))
}

/// Word F1 of a model's explanations against human scores, over the task's
/// positive word classes. `None` when no gold entry reaches the threshold.
pub fn heldout_word_f1(model: &StyleModel, heldout: &[AnnotatedSentence], threshold: f64) -> Result<Option<f64>> {
    let d = model.d_l_word();
    let pairs: Vec<(Vec<f64>, Vec<f64>)> = heldout
        .par_iter()
        .map(|s| {
            let e = model.explain(s)?;
            let gold = s
                .word_targets(d)?
                .ok_or_else(|| Error::validation(&s.id, "held-out sentence has no word scores"))?;
            let (mut p, mut g) = (Vec::new(), Vec::new());
            for (pred, target) in e.word_scores.iter().zip(&gold) {
                for &c in &model.task.positive_word_classes {
                    p.push(pred[c]);
                    g.push(target[c]);
                }
            }
            Ok((p, g))
        })
        .collect::<Result<_>>()?;
    let (mut pred, mut gold) = (Vec::new(), Vec::new());
    for (p, g) in pairs {
        pred.extend(p);
        gold.extend(g);
    }
    word_f1(&pred, &gold, threshold)
}

fn require_human_scores(corpus: &[AnnotatedSentence], task: &StyleTask) -> Result<()> {
    for s in corpus {
        s.validate(Some(task))?;
        if !matches!(s.word_scores, Some(WordScores::Signed(_))) {
            return Err(Error::Config(format!("seed sentence `{}` lacks human word scores", s.id)));
        }
    }
    Ok(())
}

/// Trains the seed scorer and keeps the epoch with the best held-out word F1.
pub fn train_word_scorer(
    task: &StyleTask,
    seed_corpus: &[AnnotatedSentence],
    config: &PipelineConfig,
) -> Result<ScorerOutcome> {
    config.validate()?;
    require_human_scores(seed_corpus, task)?;
    let (train_part, heldout) = heldout_split(seed_corpus, config.heldout_fraction, config.seed)?;
    let words: Vec<Vec<String>> = seed_corpus.iter().map(|s| s.words.clone()).collect();
    let vocab = Vocabulary::build(&words, config.vocab_min_count);
    let mut model = StyleModel::new(task.clone(), vocab, config.encoder_template(0), config.seed_alpha, config.seed)?;

    let mut best: Option<(f64, usize, ParamStore)> = None;
    let mut heldout_f1 = Vec::new();
    let history = train_with(
        &mut model,
        &train_part,
        &config.stage(config.seed_epochs, config.seed),
        |m, metrics| {
            let f = heldout_word_f1(m, &heldout, config.score_threshold)?;
            log::info!("seed epoch {}: held-out word F1 {f:?}", metrics.epoch);
            heldout_f1.push(f);
            if let Some(f) = f {
                if best.as_ref().is_none_or(|(b, _, _)| f > *b) {
                    best = Some((f, metrics.epoch, m.params.clone()));
                }
            }
            Ok(())
        },
    )?;
    let selected_epoch = match best {
        Some((_, epoch, params)) => {
            model.params = params;
            Some(epoch)
        }
        None => {
            if config.seed_epochs > 0 {
                log::warn!("held-out word F1 undefined for every epoch; keeping the last checkpoint");
            }
            None
        }
    };
    Ok(ScorerOutcome {
        model,
        selected_epoch,
        heldout_f1,
        history,
        heldout_ids: heldout.iter().map(|s| s.id.clone()).collect(),
    })
}

/// New records carrying the scorer's per-class word scores.
pub fn pseudo_label(
    scorer: &StyleModel,
    corpus: &[AnnotatedSentence],
    max_unk_rate: f64,
) -> Result<Vec<AnnotatedSentence>> {
    if corpus.is_empty() {
        return Ok(Vec::new());
    }
    if !scorer.is_trained() {
        return Err(Error::State("pseudo-labeling needs a trained scorer".into()));
    }
    for s in corpus {
        s.validate(Some(&scorer.task))?;
        if s.provenance == Provenance::Human {
            return Err(Error::validation(&s.id, "already carries human word scores"));
        }
    }
    let words: Vec<&[String]> = corpus.iter().map(|s| s.words.as_slice()).collect();
    let rate = scorer.vocab.unk_rate(&words);
    if rate > max_unk_rate {
        return Err(Error::Compatibility(format!(
            "{:.1}% of words are unknown to the scorer vocabulary",
            100.0 * rate
        )));
    }
    corpus
        .par_iter()
        .map(|s| {
            let e = scorer.explain(s)?;
            Ok(AnnotatedSentence {
                word_scores: Some(WordScores::PerClass(e.word_scores)),
                provenance: Provenance::Pseudo,
                ..s.clone()
            })
        })
        .collect()
}

fn check_joint_corpus(task: &StyleTask, corpus: &[AnnotatedSentence]) -> Result<()> {
    for s in corpus {
        match &s.word_scores {
            Some(WordScores::PerClass(rows)) => {
                if let Some(r) = rows.iter().find(|r| r.len() != task.d_l_word) {
                    return Err(Error::Config(format!(
                        "sentence `{}` has {} word classes, task `{}` has {}",
                        s.id,
                        r.len(),
                        task.name,
                        task.d_l_word
                    )));
                }
            }
            Some(WordScores::Signed(v)) => {
                for &x in v {
                    score_to_target(x, task.d_l_word)?;
                }
            }
            None => {
                return Err(Error::Config(format!("sentence `{}` has no word scores", s.id)));
            }
        }
        s.validate(Some(task))?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct JointOutcome {
    pub model: StyleModel,
    pub history: Vec<EpochMetrics>,
    pub corpus_size: usize,
}

/// Trains a freshly initialized model on human plus pseudo-labeled data.
pub fn train_joint(
    task: &StyleTask,
    vocab: &Vocabulary,
    seed_corpus: &[AnnotatedSentence],
    pseudo_corpus: &[AnnotatedSentence],
    config: &PipelineConfig,
) -> Result<JointOutcome> {
    config.validate()?;
    let union: Vec<AnnotatedSentence> = seed_corpus.iter().chain(pseudo_corpus).cloned().collect();
    check_joint_corpus(task, &union)?;
    let joint_seed = config.seed.wrapping_add(1);
    let mut model = StyleModel::new(task.clone(), vocab.clone(), config.encoder_template(0), config.alpha, joint_seed)?;
    let history = if config.joint_epochs == 0 {
        Vec::new()
    } else {
        train(&mut model, &union, &config.stage(config.joint_epochs, joint_seed))?
    };
    Ok(JointOutcome {
        model,
        history,
        corpus_size: union.len(),
    })
}

#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub scorer: ScorerOutcome,
    pub pseudo: Vec<AnnotatedSentence>,
    pub joint: JointOutcome,
}

/// All three stages in sequence.
pub fn run_pipeline(
    task: &StyleTask,
    seed_corpus: &[AnnotatedSentence],
    unlabeled: &[AnnotatedSentence],
    config: &PipelineConfig,
) -> Result<PipelineOutcome> {
    let scorer = train_word_scorer(task, seed_corpus, config)?;
    let pseudo = pseudo_label(&scorer.model, unlabeled, config.max_unk_rate)?;
    let joint = train_joint(task, &scorer.model.vocab, seed_corpus, &pseudo, config)?;
    Ok(PipelineOutcome { scorer, pseudo, joint })
}

/// Reproducibility record written next to every artifact.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub seed: u64,
    pub config: serde_json::Value,
    /// Input path -> SHA-256.
    pub inputs: BTreeMap<String, String>,
    /// Output path -> SHA-256.
    pub outputs: BTreeMap<String, String>,
    pub metrics: serde_json::Value,
    pub notes: BTreeMap<String, String>,
}

impl Manifest {
    pub fn new(command: impl Into<String>, seed: u64, config: serde_json::Value) -> Self {
        Manifest {
            command: command.into(),
            seed,
            config,
            ..Manifest::default()
        }
    }

    pub fn record_input(&mut self, path: &Path) -> Result<()> {
        let hash = crate::checkpoint::file_sha256(path)?;
        self.inputs.insert(path.display().to_string(), hash);
        Ok(())
    }

    pub fn record_output(&mut self, path: &Path) -> Result<()> {
        let hash = crate::checkpoint::file_sha256(path)?;
        self.outputs.insert(path.display().to_string(), hash);
        Ok(())
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::eval::write_json(path, self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::{make_synthetic_corpus, SyntheticConfig};

    fn desk(seed_epochs: usize, joint_epochs: usize) -> PipelineConfig {
        PipelineConfig {
            seed_epochs,
            joint_epochs,
            seed: 3,
            encoder: EncoderConfig {
                hidden_size: 16,
                num_layers: 1,
                num_heads: 2,
                intermediate_size: 32,
                max_seq_len: 32,
                ..EncoderConfig::default()
            },
            optimizer: TrainConfig {
                learning_rate: 3e-3,
                batch_size: 8,
                ..TrainConfig::default()
            },
            ..PipelineConfig::default()
        }
    }

    fn corpus(n: usize, seed: u64) -> (StyleTask, Vec<AnnotatedSentence>) {
        let task = StyleTask::builtin("sentiment").unwrap();
        let c = make_synthetic_corpus(&task, &SyntheticConfig::default(), n, seed).unwrap();
        (task, c)
    }

    fn unlabeled(c: &[AnnotatedSentence]) -> Vec<AnnotatedSentence> {
        c.iter()
            .map(|s| AnnotatedSentence::unscored(s.id.clone(), &s.text, s.sentence_label))
            .collect()
    }

    #[test]
    fn config_defaults() {
        let c = PipelineConfig::default();
        assert_eq!((c.seed_epochs, c.joint_epochs), (50, 5));
        assert_eq!(c.score_threshold, 0.5);
        assert_eq!(c.alpha, 0.05);
        assert!(PipelineConfig { score_threshold: 1.0, ..c.clone() }.validate().is_err());
    }

    #[test]
    fn split_is_deterministic_and_sized() {
        let (_, c) = corpus(40, 1);
        let (a, b) = heldout_split(&c, 0.1, 9).unwrap();
        assert_eq!((a.len(), b.len()), (36, 4));
        let (a2, b2) = heldout_split(&c, 0.1, 9).unwrap();
        assert_eq!((a, b), (a2, b2));
    }

    #[test]
    fn scorer_requires_human_scores() {
        let (task, c) = corpus(10, 1);
        let err = train_word_scorer(&task, &unlabeled(&c), &desk(1, 0)).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn scorer_selects_best_epoch() {
        let (task, c) = corpus(60, 2);
        let out = train_word_scorer(&task, &c, &desk(6, 0)).unwrap();
        let best = out.selected_epoch.expect("defined F1");
        let chosen = out.heldout_f1[best - 1].unwrap();
        assert!(out.heldout_f1.iter().flatten().all(|&f| f <= chosen));
        let (_, heldout) = heldout_split(&c, 0.1, 3).unwrap();
        let again = heldout_word_f1(&out.model, &heldout, 0.5).unwrap().unwrap();
        assert_eq!(again, chosen);
        let rerun = train_word_scorer(&task, &c, &desk(6, 0)).unwrap();
        assert_eq!(rerun.selected_epoch, out.selected_epoch);
    }

    #[test]
    fn all_zero_targets_keep_last_epoch() {
        let (task, c) = corpus(12, 4);
        let zeroed: Vec<AnnotatedSentence> = c
            .iter()
            .map(|s| AnnotatedSentence::with_human_scores(s.id.clone(), s.words.clone(), vec![0.0; s.words.len()], s.sentence_label).unwrap())
            .collect();
        let out = train_word_scorer(&task, &zeroed, &desk(2, 0)).unwrap();
        assert_eq!(out.selected_epoch, None);
        assert!(out.heldout_f1.iter().all(Option::is_none));
    }

    #[test]
    fn pseudo_labels_are_new_records_in_range() {
        let (task, c) = corpus(30, 5);
        let scorer = train_word_scorer(&task, &c, &desk(2, 0)).unwrap().model;
        let input = unlabeled(&c);
        let snapshot = input.clone();
        let out = pseudo_label(&scorer, &input, 0.5).unwrap();
        assert_eq!(input, snapshot);
        assert_eq!(out.len(), input.len());
        for (s, p) in input.iter().zip(&out) {
            assert_eq!(p.provenance, Provenance::Pseudo);
            assert_eq!(p.words, s.words);
            let Some(WordScores::PerClass(rows)) = &p.word_scores else { panic!() };
            assert_eq!(rows.len(), s.words.len());
            assert!(rows.iter().flatten().all(|v| (0.0..=1.0).contains(v)));
            p.validate(Some(&task)).unwrap();
        }
        assert!(pseudo_label(&scorer, &[], 0.5).unwrap().is_empty());
        assert!(matches!(pseudo_label(&scorer, &c[..2], 0.5), Err(Error::Validation { .. })));
    }

    #[test]
    fn pseudo_label_detects_foreign_vocabulary() {
        let (task, c) = corpus(20, 6);
        let scorer = train_word_scorer(&task, &c, &desk(1, 0)).unwrap().model;
        let foreign = vec![AnnotatedSentence::unscored("f", "ЖЖЖ ЩЩЩ ЮЮЮ", 0)];
        assert!(matches!(pseudo_label(&scorer, &foreign, 0.5), Err(Error::Compatibility(_))));
    }

    #[test]
    fn joint_stage_counts_and_checks_task() {
        let (task, c) = corpus(30, 7);
        let cfg = desk(1, 0);
        let scorer = train_word_scorer(&task, &c[..10], &cfg).unwrap().model;
        let pseudo = pseudo_label(&scorer, &unlabeled(&c[10..]), 0.5).unwrap();
        let joint = train_joint(&task, &scorer.vocab, &c[..10], &pseudo, &cfg).unwrap();
        assert_eq!(joint.corpus_size, 30);
        assert!(joint.history.is_empty());
        assert!(!joint.model.is_trained());

        let anger = StyleTask::builtin("anger").unwrap();
        assert!(matches!(
            train_joint(&anger, &scorer.vocab, &[], &pseudo, &cfg),
            Err(Error::Config(_))
        ));
    }
}
