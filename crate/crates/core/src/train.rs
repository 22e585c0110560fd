//! Mini-batch training of a [`StyleModel`] on the joint objective.
//!
//! Every sentence of a batch is differentiated on its own tape in parallel;
//! gradients are then summed in batch order so results do not depend on
//! thread scheduling.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::{ParamGrads, Tape};
use crate::data::{AnnotatedSentence, TokenRow};
use crate::encoder::Dropout;
use crate::error::{Error, Result};
use crate::eval::f1;
use crate::model::{softmax2, StyleModel};
use crate::optim::{linear_schedule, AdamW};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub max_grad_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 5,
            learning_rate: 2e-5,
            batch_size: 8,
            seed: 42,
            weight_decay: 0.0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            max_grad_norm: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("adam betas must lie in [0, 1)".into());
        }
        if !(self.adam_epsilon > 0.0) || !(self.weight_decay >= 0.0) || !(self.max_grad_norm >= 0.0) {
            return bad("adam_epsilon must be positive; weight_decay and max_grad_norm nonnegative".into());
        }
        Ok(())
    }
}

/// Metrics of one pass over the corpus, measured on the training-mode
/// forward passes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: f64,
    pub style_loss: f64,
    pub word_loss: f64,
    pub f1: f64,
    pub no_active_tokens: bool,
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn check_corpus(model: &StyleModel, corpus: &[AnnotatedSentence]) -> Result<()> {
    if corpus.is_empty() {
        return Err(Error::Config("training corpus is empty".into()));
    }
    let word_loss = model.has_word_channel() && model.alpha > 0.0;
    for s in corpus {
        s.validate(Some(&model.task))?;
        if word_loss && s.word_scores.is_none() {
            return Err(Error::Config(format!(
                "sentence `{}` has no word scores but the word loss is enabled",
                s.id
            )));
        }
    }
    Ok(())
}

pub fn train(model: &mut StyleModel, corpus: &[AnnotatedSentence], config: &TrainConfig) -> Result<Vec<EpochMetrics>> {
    train_with(model, corpus, config, |_, _| Ok(()))
}

/// Trains in place, calling `on_epoch` after every epoch.
pub fn train_with<F>(
    model: &mut StyleModel,
    corpus: &[AnnotatedSentence],
    config: &TrainConfig,
    mut on_epoch: F,
) -> Result<Vec<EpochMetrics>>
where
    F: FnMut(&StyleModel, &EpochMetrics) -> Result<()>,
{
    config.validate()?;
    check_corpus(model, corpus)?;
    if config.epochs == 0 {
        return Ok(Vec::new());
    }
    let rows = model.token_rows(corpus)?;
    let d = if model.has_word_channel() { model.d_l_word() } else { 0 };
    let dropout = model.config().dropout;
    let batches_per_epoch = rows.len().div_ceil(config.batch_size);
    let total_steps = config.epochs * batches_per_epoch;
    let mut optimizer = AdamW::new(
        config.adam_beta1,
        config.adam_beta2,
        config.adam_epsilon,
        config.weight_decay,
    );
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..rows.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    let mut step = 0usize;

    for epoch in 1..=config.epochs {
        order.shuffle(&mut shuffle_rng);
        let (mut style_sum, mut word_sum, mut active_sum) = (0.0, 0.0, 0usize);
        let mut preds = Vec::with_capacity(rows.len());
        let mut gold = Vec::with_capacity(rows.len());
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&TokenRow> = chunk.iter().map(|&i| &rows[i]).collect();
            let active: usize = batch.iter().map(|r| r.active_tokens()).sum::<usize>() * d;
            let model_ref: &StyleModel = model;
            let results: Vec<(ParamGrads, f64, f64, usize)> = batch
                .par_iter()
                .enumerate()
                .map(|(k, row)| {
                    let mut rng = ChaCha8Rng::seed_from_u64(mix(config.seed, step as u64, k as u64));
                    let mut drop = Dropout::train(dropout, &mut rng);
                    let mut tape = Tape::new(&model_ref.params);
                    let (objective, style, word, logits) =
                        model_ref.row_objective(&mut tape, row, batch.len(), active, &mut drop)?;
                    let grads = tape.backward(objective).into_param_grads();
                    Ok((grads, style, word, softmax2(logits).1))
                })
                .collect::<Result<_>>()?;

            let mut grads = ParamGrads::zeros_like(&model.params);
            for ((g, style, word, pred), row) in results.into_iter().zip(&batch) {
                grads.accumulate(g);
                style_sum += style;
                word_sum += word;
                preds.push(pred);
                gold.push(row.sentence_target);
            }
            active_sum += active;
            if !grads.is_finite() {
                return Err(Error::State(format!("non-finite gradient at training step {step}")));
            }
            let norm = grads.global_norm();
            if config.max_grad_norm > 0.0 && norm > config.max_grad_norm {
                grads.scale(config.max_grad_norm / (norm + 1e-6));
            }
            let lr = linear_schedule(config.learning_rate, step, total_steps);
            optimizer.step(&mut model.params, &grads, lr);
            step += 1;
        }
        model.set_trained(true);
        let style_loss = style_sum / rows.len() as f64;
        let no_active_tokens = active_sum == 0;
        let word_loss = if no_active_tokens { 0.0 } else { word_sum / active_sum as f64 };
        let metrics = EpochMetrics {
            epoch,
            loss: style_loss + model.alpha * word_loss,
            style_loss,
            word_loss,
            f1: f1(&preds, &gold, model.task.positive_label())?,
            no_active_tokens,
        };
        log::info!(
            "epoch {epoch}: loss {:.5} (style {:.5}, word {:.5}) f1 {:.4}",
            metrics.loss,
            metrics.style_loss,
            metrics.word_loss,
            metrics.f1
        );
        on_epoch(model, &metrics)?;
        history.push(metrics);
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::StyleTask;
    use crate::encoder::EncoderConfig;
    use crate::eval::make_synthetic_corpus;
    use crate::tokenize::Vocabulary;

    fn setup(n: usize, seed: u64) -> (StyleModel, Vec<AnnotatedSentence>) {
        let task = StyleTask::builtin("sentiment").unwrap();
        let corpus = make_synthetic_corpus(&task, &Default::default(), n, seed).unwrap();
        let words: Vec<Vec<String>> = corpus.iter().map(|s| s.words.clone()).collect();
        let vocab = Vocabulary::build(&words, 1);
        let config = EncoderConfig {
            hidden_size: 16,
            num_layers: 1,
            num_heads: 2,
            intermediate_size: 32,
            max_seq_len: 64,
            ..EncoderConfig::default()
        };
        (StyleModel::new(task, vocab, config, 0.05, seed).unwrap(), corpus)
    }

    fn desk(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            learning_rate: 3e-3,
            batch_size: 8,
            seed: 9,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn defaults_follow_reference_hyperparameters() {
        let c = TrainConfig::default();
        assert_eq!(c.learning_rate, 2e-5);
        assert_eq!(c.weight_decay, 0.0);
        assert_eq!((c.adam_beta1, c.adam_beta2, c.adam_epsilon), (0.9, 0.999, 1e-8));
        assert_eq!(c.max_grad_norm, 1.0);
    }

    #[test]
    fn empty_corpus_is_config_error() {
        let (mut model, _) = setup(4, 1);
        assert!(matches!(train(&mut model, &[], &desk(1)), Err(Error::Config(_))));
    }

    #[test]
    fn unscored_sentence_rejected_when_word_loss_enabled() {
        let (mut model, mut corpus) = setup(4, 1);
        corpus[2].word_scores = None;
        corpus[2].provenance = crate::data::Provenance::None;
        assert!(matches!(train(&mut model, &corpus, &desk(1)), Err(Error::Config(_))));
    }

    #[test]
    fn zero_epochs_is_identity() {
        let (mut model, corpus) = setup(8, 2);
        let before = model.params.clone();
        let history = train(&mut model, &corpus, &desk(0)).unwrap();
        assert!(history.is_empty());
        assert_eq!(model.params, before);
        assert!(!model.is_trained());
    }

    #[test]
    fn loss_decreases() {
        let (mut model, corpus) = setup(48, 3);
        let history = train(&mut model, &corpus, &desk(12)).unwrap();
        let first = history.first().unwrap().loss;
        let last = history.last().unwrap().loss;
        assert!(last < 0.7 * first, "loss {first} -> {last}");
        assert!(model.is_trained());
        assert!(history.iter().all(|m| !m.no_active_tokens));
    }

    #[test]
    fn seeded_runs_are_identical() {
        let (mut a, corpus) = setup(24, 4);
        let mut b = a.clone();
        let ha = train(&mut a, &corpus, &desk(2)).unwrap();
        let hb = train(&mut b, &corpus, &desk(2)).unwrap();
        assert_eq!(ha, hb);
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn classifier_trains_without_word_scores() {
        let (model, corpus) = setup(16, 5);
        let mut clf = StyleModel::classifier(model.task.clone(), model.vocab.clone(), model.config().clone(), 5).unwrap();
        let stripped: Vec<AnnotatedSentence> = corpus
            .iter()
            .map(|s| AnnotatedSentence::unscored(s.id.clone(), &s.text, s.sentence_label))
            .collect();
        let history = train(&mut clf, &stripped, &desk(1)).unwrap();
        assert!(history[0].no_active_tokens);
        assert_eq!(history[0].word_loss, 0.0);
    }
}
