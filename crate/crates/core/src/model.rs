//! Joint word-level and sentence-level style model.
//!
//! A transformer encoder produces hidden states `h`. A linear word head maps
//! every position to `d_l_word` stylistic word logits; the concatenation
//! `h ⊕ l_word` is max-pooled over the sequence into `v`, and a linear
//! sentence head with a softmax yields the 2-way style prediction.

use ndarray::{s, Array1, Array2, Array3, ArrayView1};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::{bce_with_logit, log_sum_exp, sigmoid, ParamId, ParamStore, Tape, Var};
use crate::data::{align_annotations, AnnotatedSentence, StyleTask, TokenRow};
use crate::encoder::{Dropout, Encoder, EncoderConfig, TransformerEncoder};
use crate::error::{Error, Result};
use crate::tokenize::{Tokenized, Vocabulary};

pub const DEFAULT_ALPHA: f64 = 0.05;

/// Parameter ids of the two output heads.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Heads {
    pub word_w: Option<ParamId>,
    pub word_b: Option<ParamId>,
    pub sentence_w: ParamId,
    pub sentence_b: ParamId,
}

/// Encoder plus word and sentence heads.
///
/// Without the word channel the model is a plain sentence classifier:
/// `v` is the max-pool of `h` alone.
#[derive(Debug, Clone)]
pub struct StyleModel {
    pub task: StyleTask,
    pub vocab: Vocabulary,
    pub encoder: TransformerEncoder,
    pub params: ParamStore,
    pub heads: Heads,
    pub alpha: f64,
    trained: bool,
}

/// Graph handles of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct Forward {
    pub hidden: Var,
    pub word_logits: Option<Var>,
    pub pooled: Var,
    pub sentence_logits: Var,
}

/// Loss terms of a batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JointLoss {
    pub total: f64,
    pub style: f64,
    pub word: f64,
    /// Set when no token in the batch was loss-active; `word` is then 0.
    pub no_active_tokens: bool,
}

/// Per-sentence lexical explanation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Explanation {
    pub id: String,
    pub words: Vec<String>,
    /// Non-special tokens only.
    pub tokens: Vec<String>,
    /// `tokens.len()` rows of `d_l_word` scores in `[0, 1]`.
    pub token_scores: Vec<Vec<f64>>,
    /// Mean over each word's subwords; zeros for words cut by truncation.
    pub word_scores: Vec<Vec<f64>>,
    pub probabilities: [f64; 2],
    pub predicted_label: usize,
    pub label_probability: f64,
}

impl Explanation {
    /// Per-word ranking score: the maximum over the positive word classes.
    pub fn positive_scores(&self, task: &StyleTask) -> Vec<f64> {
        positive_scores(&self.word_scores, task)
    }
}

pub(crate) fn positive_scores(word_scores: &[Vec<f64>], task: &StyleTask) -> Vec<f64> {
    word_scores
        .iter()
        .map(|scores| {
            task.positive_word_classes
                .iter()
                .filter_map(|&c| scores.get(c).copied())
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect()
}

fn normal(rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let dist = Normal::new(0.0, std).expect("positive std");
    Array2::from_shape_simple_fn((rows, cols), || dist.sample(rng))
}

/// Word logits `h W_word + b_word` at every position.
pub fn word_logits(h: &Array3<f64>, w_word: &Array2<f64>, b_word: &Array1<f64>) -> Result<Array3<f64>> {
    let (b, seq, hidden) = h.dim();
    if w_word.nrows() != hidden || w_word.ncols() != b_word.len() {
        return Err(Error::Shape(format!(
            "word head {:?} + bias {} for hidden size {hidden}",
            w_word.dim(),
            b_word.len()
        )));
    }
    let flat = h.to_shape((b * seq, hidden)).map_err(|e| Error::Shape(e.to_string()))?;
    let logits = flat.dot(w_word) + b_word;
    Ok(logits
        .into_shape_with_order((b, seq, w_word.ncols()))
        .expect("shape preserved"))
}

/// Coordinatewise max of `h ⊕ l_word` over unmasked positions, one row per
/// batch entry.
pub fn aggregate(h: &Array3<f64>, l_word: &Array3<f64>, mask: &Array2<bool>) -> Result<Array2<f64>> {
    let (b, seq, hidden) = h.dim();
    let (lb, lseq, d) = l_word.dim();
    if (lb, lseq) != (b, seq) || mask.dim() != (b, seq) {
        return Err(Error::Shape(format!(
            "aggregate over h {:?}, l_word {:?}, mask {:?}",
            h.dim(),
            l_word.dim(),
            mask.dim()
        )));
    }
    let mut v = Array2::from_elem((b, hidden + d), f64::NEG_INFINITY);
    for r in 0..b {
        if !mask.row(r).iter().any(|&m| m) {
            return Err(Error::Degenerate(format!("batch row {r} is fully masked")));
        }
        let mut out = v.row_mut(r);
        for t in (0..seq).filter(|&t| mask[[r, t]]) {
            let feats = h.slice(s![r, t, ..]).into_iter().chain(l_word.slice(s![r, t, ..]));
            for (o, &x) in out.iter_mut().zip(feats) {
                if x > *o {
                    *o = x;
                }
            }
        }
    }
    Ok(v)
}

/// Softmax probabilities and argmax (lower index on ties).
pub fn sentence_predict(
    v: ArrayView1<'_, f64>,
    w_sentence: &Array2<f64>,
    b_sentence: &Array1<f64>,
) -> Result<([f64; 2], usize)> {
    if w_sentence.nrows() != v.len() || w_sentence.ncols() != 2 || b_sentence.len() != 2 {
        return Err(Error::Shape(format!(
            "sentence head {:?} for v of length {}",
            w_sentence.dim(),
            v.len()
        )));
    }
    let logits = v.dot(w_sentence) + b_sentence;
    Ok(softmax2([logits[0], logits[1]]))
}

pub(crate) fn softmax2(logits: [f64; 2]) -> ([f64; 2], usize) {
    let lse = log_sum_exp(&logits);
    let p = [(logits[0] - lse).exp(), (logits[1] - lse).exp()];
    let label = if p[1] > p[0] { 1 } else { 0 };
    (p, label)
}

/// `L_style + alpha * L_word` with both components.
///
/// `L_word` averages elementwise BCE over loss-active `(position, class)`
/// entries of the whole batch; `L_style` is the batch-mean 2-way
/// cross-entropy.
pub fn joint_loss(
    word_logits: &Array3<f64>,
    word_targets: &Array3<f64>,
    loss_mask: &Array2<bool>,
    sentence_logits: &Array2<f64>,
    sentence_targets: &[usize],
    alpha: f64,
) -> Result<JointLoss> {
    let (b, seq, d) = word_logits.dim();
    if word_targets.dim() != (b, seq, d)
        || loss_mask.dim() != (b, seq)
        || sentence_logits.dim() != (b, 2)
        || sentence_targets.len() != b
    {
        return Err(Error::Shape(format!(
            "joint_loss over logits {:?}, targets {:?}, mask {:?}, sentence {:?}",
            word_logits.dim(),
            word_targets.dim(),
            loss_mask.dim(),
            sentence_logits.dim()
        )));
    }
    if b == 0 {
        return Err(Error::Degenerate("empty batch".into()));
    }
    let mut style = 0.0;
    for (r, &y) in sentence_targets.iter().enumerate() {
        if y > 1 {
            return Err(Error::Shape(format!("sentence target {y} for 2 labels")));
        }
        let row = [sentence_logits[[r, 0]], sentence_logits[[r, 1]]];
        style += log_sum_exp(&row) - row[y];
    }
    style /= b as f64;
    let (mut word_sum, mut active) = (0.0, 0usize);
    for r in 0..b {
        for t in (0..seq).filter(|&t| loss_mask[[r, t]]) {
            for c in 0..d {
                word_sum += bce_with_logit(word_logits[[r, t, c]], word_targets[[r, t, c]]);
                active += 1;
            }
        }
    }
    let no_active_tokens = active == 0;
    let word = if no_active_tokens {
        log::warn!("no loss-active tokens in batch; word loss set to 0");
        0.0
    } else {
        word_sum / active as f64
    };
    Ok(JointLoss {
        total: style + alpha * word,
        style,
        word,
        no_active_tokens,
    })
}

/// Array-level outputs of an evaluation forward pass over a batch.
#[derive(Debug, Clone)]
pub struct BatchOutput {
    pub hidden: Array3<f64>,
    pub word_logits: Array3<f64>,
    pub pooled: Array2<f64>,
    pub sentence_logits: Array2<f64>,
}

impl StyleModel {
    /// Freshly initialized joint model. A zero `vocab_size` in the config is
    /// filled from the vocabulary.
    pub fn new(task: StyleTask, vocab: Vocabulary, config: EncoderConfig, alpha: f64, seed: u64) -> Result<Self> {
        Self::build(task, vocab, config, alpha, true, seed)
    }

    /// Encoder plus sentence head only.
    pub fn classifier(task: StyleTask, vocab: Vocabulary, config: EncoderConfig, seed: u64) -> Result<Self> {
        Self::build(task, vocab, config, 0.0, false, seed)
    }

    pub(crate) fn build(
        task: StyleTask,
        vocab: Vocabulary,
        mut config: EncoderConfig,
        alpha: f64,
        word_channel: bool,
        seed: u64,
    ) -> Result<Self> {
        task.validate()?;
        if !(alpha >= 0.0 && alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be a nonnegative number, got {alpha}")));
        }
        if config.vocab_size == 0 {
            config.vocab_size = vocab.len();
        } else if config.vocab_size != vocab.len() {
            return Err(Error::Config(format!(
                "encoder vocab_size {} differs from vocabulary of {} tokens",
                config.vocab_size,
                vocab.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let encoder = TransformerEncoder::init(config, &mut params, &mut rng)?;
        let heads = Self::init_heads(&task, encoder.config(), word_channel, &mut params, &mut rng);
        Ok(StyleModel {
            task,
            vocab,
            encoder,
            params,
            heads,
            alpha,
            trained: false,
        })
    }

    fn init_heads(
        task: &StyleTask,
        config: &EncoderConfig,
        word_channel: bool,
        params: &mut ParamStore,
        rng: &mut ChaCha8Rng,
    ) -> Heads {
        let (h, d, std) = (config.hidden_size, task.d_l_word, config.init_std);
        let (word_w, word_b, pooled) = if word_channel {
            (
                Some(params.add("head.word.weight", normal(h, d, std, rng))),
                Some(params.add("head.word.bias", Array2::zeros((1, d)))),
                h + d,
            )
        } else {
            (None, None, h)
        };
        Heads {
            word_w,
            word_b,
            sentence_w: params.add("head.sentence.weight", normal(pooled, 2, std, rng)),
            sentence_b: params.add("head.sentence.bias", Array2::zeros((1, 2))),
        }
    }

    pub fn config(&self) -> &EncoderConfig {
        self.encoder.config()
    }

    pub fn has_word_channel(&self) -> bool {
        self.heads.word_w.is_some()
    }

    pub fn d_l_word(&self) -> usize {
        self.task.d_l_word
    }

    /// Length of the pooled vector `v`.
    pub fn pooled_dim(&self) -> usize {
        self.config().hidden_size + if self.has_word_channel() { self.d_l_word() } else { 0 }
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    /// Declares externally supplied weights fit for explanation.
    pub fn mark_trained(&mut self) {
        self.trained = true;
    }

    pub fn word_head(&self) -> Option<(Array2<f64>, Array1<f64>)> {
        let (w, b) = (self.heads.word_w?, self.heads.word_b?);
        Some((self.params.get(w).clone(), self.params.get(b).row(0).to_owned()))
    }

    pub fn sentence_head(&self) -> (Array2<f64>, Array1<f64>) {
        (
            self.params.get(self.heads.sentence_w).clone(),
            self.params.get(self.heads.sentence_b).row(0).to_owned(),
        )
    }

    pub fn tokenize(&self, words: &[String]) -> Tokenized {
        self.vocab.tokenize_words(words, self.config().max_seq_len)
    }

    pub fn token_row(&self, sentence: &AnnotatedSentence) -> Result<TokenRow> {
        align_annotations(sentence, &self.tokenize(&sentence.words), self.d_l_word())
    }

    pub fn token_rows(&self, sentences: &[AnnotatedSentence]) -> Result<Vec<TokenRow>> {
        sentences.par_iter().map(|s| self.token_row(s)).collect()
    }

    /// Heads applied to contextualized states of one unpadded sequence.
    pub fn forward_embeddings(
        &self,
        tape: &mut Tape<'_>,
        embeddings: Var,
        dropout: &mut Dropout<'_>,
    ) -> Result<Forward> {
        let seq = tape.value(embeddings).nrows();
        let mask = vec![true; seq];
        let hidden = self.encoder.contextualize(tape, embeddings, &mask, dropout)?;
        let (word_logits, features) = match (self.heads.word_w, self.heads.word_b) {
            (Some(w), Some(b)) => {
                let (w, b) = (tape.param(w), tape.param(b));
                let logits = tape.linear(hidden, w, b)?;
                (Some(logits), tape.concat_cols(&[hidden, logits])?)
            }
            _ => (None, hidden),
        };
        let pooled = tape.max_pool_rows(features, &mask)?;
        let (w, b) = (tape.param(self.heads.sentence_w), tape.param(self.heads.sentence_b));
        let sentence_logits = tape.linear(pooled, w, b)?;
        Ok(Forward {
            hidden,
            word_logits,
            pooled,
            sentence_logits,
        })
    }

    pub fn forward_ids(&self, tape: &mut Tape<'_>, ids: &[usize], dropout: &mut Dropout<'_>) -> Result<Forward> {
        if ids.is_empty() {
            return Err(Error::Degenerate("empty token sequence".into()));
        }
        let embeddings = self.encoder.embed(tape, ids)?;
        self.forward_embeddings(tape, embeddings, dropout)
    }

    /// Scalar contribution of one row to a batch loss:
    /// `style / batch + alpha * word_sum / active_entries`.
    pub(crate) fn row_objective(
        &self,
        tape: &mut Tape<'_>,
        row: &TokenRow,
        batch: usize,
        active_entries: usize,
        dropout: &mut Dropout<'_>,
    ) -> Result<(Var, f64, f64, [f64; 2])> {
        let fwd = self.forward_ids(tape, &row.ids, dropout)?;
        let l = tape.value(fwd.sentence_logits);
        let logits = [l[[0, 0]], l[[0, 1]]];
        let style = tape.cross_entropy(fwd.sentence_logits, row.sentence_target)?;
        let style_value = tape.scalar(style);
        let mut objective = tape.scale(style, 1.0 / batch as f64);
        let mut word_value = 0.0;
        if let Some(logits) = fwd.word_logits {
            if active_entries > 0 && row.active_tokens() > 0 {
                let d = self.d_l_word();
                let mask = Array2::from_shape_fn((row.len(), d), |(t, _)| f64::from(u8::from(row.loss_mask[t])));
                let word = tape.bce_with_logits_sum(logits, row.targets.clone(), mask)?;
                word_value = tape.scalar(word);
                if self.alpha > 0.0 {
                    let word = tape.scale(word, self.alpha / active_entries as f64);
                    objective = tape.add(objective, word)?;
                }
            }
        }
        Ok((objective, style_value, word_value, logits))
    }

    /// Evaluation forward pass over padded rows.
    pub fn forward_batch(&self, rows: &[TokenRow]) -> Result<BatchOutput> {
        let seq = rows.iter().map(TokenRow::len).max().unwrap_or(0);
        let (h, d) = (self.config().hidden_size, self.d_l_word());
        let d_out = if self.has_word_channel() { d } else { 0 };
        let per_row: Vec<(Array2<f64>, Option<Array2<f64>>, Array2<f64>, Array2<f64>)> = rows
            .par_iter()
            .map(|row| {
                let mut tape = Tape::new(&self.params);
                let fwd = self.forward_ids(&mut tape, &row.ids, &mut Dropout::eval())?;
                Ok((
                    tape.value(fwd.hidden).clone(),
                    fwd.word_logits.map(|w| tape.value(w).clone()),
                    tape.value(fwd.pooled).clone(),
                    tape.value(fwd.sentence_logits).clone(),
                ))
            })
            .collect::<Result<_>>()?;
        let b = rows.len();
        let mut out = BatchOutput {
            hidden: Array3::zeros((b, seq, h)),
            word_logits: Array3::zeros((b, seq, d_out)),
            pooled: Array2::zeros((b, self.pooled_dim())),
            sentence_logits: Array2::zeros((b, 2)),
        };
        for (r, (hid, wl, pooled, logits)) in per_row.into_iter().enumerate() {
            let n = hid.nrows();
            out.hidden.slice_mut(s![r, ..n, ..]).assign(&hid);
            if let Some(wl) = wl {
                out.word_logits.slice_mut(s![r, ..n, ..]).assign(&wl);
            }
            out.pooled.row_mut(r).assign(&pooled.row(0));
            out.sentence_logits.row_mut(r).assign(&logits.row(0));
        }
        Ok(out)
    }

    /// Batch loss via the array-level path.
    pub fn batch_loss(&self, rows: &[TokenRow]) -> Result<JointLoss> {
        let out = self.forward_batch(rows)?;
        let batch = crate::data::TokenBatch::from_rows(rows, self.d_l_word(), self.vocab.pad_id());
        let (targets, mask) = if self.has_word_channel() {
            (batch.word_targets, batch.loss_mask)
        } else {
            let (b, seq) = batch.loss_mask.dim();
            (Array3::zeros((b, seq, 0)), Array2::from_elem((b, seq), false))
        };
        joint_loss(
            &out.word_logits,
            &targets,
            &mask,
            &out.sentence_logits,
            &batch.sentence_targets,
            self.alpha,
        )
    }

    /// Sentence probabilities and predicted label.
    pub fn predict(&self, words: &[String]) -> Result<([f64; 2], usize)> {
        let tokenized = self.tokenize(words);
        let mut tape = Tape::new(&self.params);
        let fwd = self.forward_ids(&mut tape, &tokenized.ids, &mut Dropout::eval())?;
        let l = tape.value(fwd.sentence_logits);
        Ok(softmax2([l[[0, 0]], l[[0, 1]]]))
    }

    /// Predicted labels for a corpus, in order.
    pub fn predict_labels(&self, sentences: &[AnnotatedSentence]) -> Result<Vec<usize>> {
        sentences
            .par_iter()
            .map(|s| self.predict(&s.words).map(|(_, label)| label))
            .collect()
    }

    /// Word-level explanation scores and the sentence prediction.
    pub fn explain(&self, sentence: &AnnotatedSentence) -> Result<Explanation> {
        if !self.trained {
            return Err(Error::State("explain called on an untrained model".into()));
        }
        if !self.has_word_channel() {
            return Err(Error::State("model has no word head".into()));
        }
        let tokenized = self.tokenize(&sentence.words);
        let mut tape = Tape::new(&self.params);
        let fwd = self.forward_ids(&mut tape, &tokenized.ids, &mut Dropout::eval())?;
        let logits = tape.value(fwd.word_logits.expect("word channel"));
        let d = self.d_l_word();

        let mut tokens = Vec::new();
        let mut token_scores = Vec::new();
        let mut word_scores = vec![vec![0.0; d]; sentence.words.len()];
        let mut counts = vec![0usize; sentence.words.len()];
        for (t, &w) in tokenized.word_index.iter().enumerate() {
            if w < 0 {
                continue;
            }
            let scores: Vec<f64> = logits.row(t).iter().map(|&z| sigmoid(z)).collect();
            let w = w as usize;
            for (acc, &s) in word_scores[w].iter_mut().zip(&scores) {
                *acc += s;
            }
            counts[w] += 1;
            tokens.push(tokenized.tokens[t].clone());
            token_scores.push(scores);
        }
        for (scores, &n) in word_scores.iter_mut().zip(&counts) {
            if n > 0 {
                scores.iter_mut().for_each(|s| *s /= n as f64);
            }
        }
        let l = tape.value(fwd.sentence_logits);
        let (probabilities, predicted_label) = softmax2([l[[0, 0]], l[[0, 1]]]);
        Ok(Explanation {
            id: sentence.id.clone(),
            words: sentence.words.clone(),
            tokens,
            token_scores,
            word_scores,
            probabilities,
            predicted_label,
            label_probability: probabilities[predicted_label],
        })
    }

    pub fn explain_all(&self, sentences: &[AnnotatedSentence]) -> Result<Vec<Explanation>> {
        sentences.par_iter().map(|s| self.explain(s)).collect()
    }

    /// Target-class sentence logit and its gradient with respect to the
    /// token embeddings `x` (`seq x H`).
    pub fn logit_and_grad(&self, x: &Array2<f64>, target: usize) -> Result<(f64, Array2<f64>)> {
        if target > 1 {
            return Err(Error::Shape(format!("target class {target} for 2 labels")));
        }
        let mut tape = Tape::new(&self.params);
        let input = tape.input(x.clone());
        let fwd = self.forward_embeddings(&mut tape, input, &mut Dropout::eval())?;
        let logit = tape.element(fwd.sentence_logits, 0, target)?;
        let value = tape.scalar(logit);
        let grads = tape.backward(logit);
        let grad = grads
            .wrt(input)
            .cloned()
            .unwrap_or_else(|| Array2::zeros(x.dim()));
        Ok((value, grad))
    }

    /// Token embeddings of an id sequence, `seq x H`.
    pub fn token_embeddings(&self, ids: &[usize]) -> Result<Array2<f64>> {
        let mut tape = Tape::new(&self.params);
        let e = self.encoder.embed(&mut tape, ids)?;
        Ok(tape.value(e).clone())
    }

    /// Sentence logits of one sequence, for tests and diagnostics.
    pub fn sentence_logits(&self, ids: &[usize]) -> Result<[f64; 2]> {
        let mut tape = Tape::new(&self.params);
        let fwd = self.forward_ids(&mut tape, ids, &mut Dropout::eval())?;
        let l = tape.value(fwd.sentence_logits);
        Ok([l[[0, 0]], l[[0, 1]]])
    }

    pub(crate) fn set_trained(&mut self, trained: bool) {
        self.trained = trained;
    }
}
