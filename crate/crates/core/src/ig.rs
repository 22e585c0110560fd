//! Integrated gradients over token embeddings with an all-zero baseline.

use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::AnnotatedSentence;
use crate::error::{Error, Result};
use crate::model::StyleModel;

pub const DEFAULT_STEPS: usize = 50;

/// A differentiable scalar function of a `seq x dim` input.
pub trait ScalarField: Sync {
    fn value_and_grad(&self, x: &Array2<f64>) -> Result<(f64, Array2<f64>)>;
}

impl<F> ScalarField for F
where
    F: Fn(&Array2<f64>) -> Result<(f64, Array2<f64>)> + Sync,
{
    fn value_and_grad(&self, x: &Array2<f64>) -> Result<(f64, Array2<f64>)> {
        self(x)
    }
}

/// Sentence-level logit of `target`, as a function of token embeddings.
pub struct SentenceLogit<'m> {
    pub model: &'m StyleModel,
    pub target: usize,
}

impl ScalarField for SentenceLogit<'_> {
    fn value_and_grad(&self, x: &Array2<f64>) -> Result<(f64, Array2<f64>)> {
        self.model.logit_and_grad(x, self.target)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionResult {
    /// Empty when produced by [`integrated_gradients`] directly.
    pub tokens: Vec<String>,
    #[serde(skip)]
    pub raw_attributions: Array2<f64>,
    /// Signed sum over the embedding dimension.
    pub token_attribution: Vec<f64>,
    pub target_class: usize,
    pub f_input: f64,
    pub f_baseline: f64,
    /// `|sum(attributions) - (F(x) - F(0))|`
    pub completeness_gap: f64,
}

/// Right Riemann sum of the path integral from the zero baseline to `x`.
pub fn integrated_gradients(
    f: &dyn ScalarField,
    x: &Array2<f64>,
    steps: usize,
    target_class: usize,
) -> Result<AttributionResult> {
    if steps == 0 {
        return Err(Error::Config("integrated gradients needs at least one step".into()));
    }
    let evals: Vec<(f64, Array2<f64>)> = (1..=steps)
        .into_par_iter()
        .map(|k| {
            let point = x * (k as f64 / steps as f64);
            let (value, grad) = f.value_and_grad(&point)?;
            if !value.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Numeric { step: k });
            }
            if grad.dim() != x.dim() {
                return Err(Error::Shape(format!("gradient {:?} for input {:?}", grad.dim(), x.dim())));
            }
            Ok((value, grad))
        })
        .collect::<Result<_>>()?;
    let f_input = evals[steps - 1].0;
    let mut sum = Array2::zeros(x.dim());
    for (_, g) in &evals {
        sum += g;
    }
    let raw = x * &sum / steps as f64;
    let (f_baseline, _) = f.value_and_grad(&Array2::zeros(x.dim()))?;
    let token_attribution: Vec<f64> = raw.rows().into_iter().map(|r| r.sum()).collect();
    let total: f64 = token_attribution.iter().sum();
    Ok(AttributionResult {
        tokens: Vec::new(),
        raw_attributions: raw,
        token_attribution,
        target_class,
        f_input,
        f_baseline,
        completeness_gap: (total - (f_input - f_baseline)).abs(),
    })
}

/// Word-level IG scores of one sentence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WordAttribution {
    pub id: String,
    pub words: Vec<String>,
    pub scores: Vec<f64>,
    pub target: usize,
    pub completeness_gap: f64,
}

/// Runs IG against the sentence logit of `target` and sums token
/// attributions per word. Special tokens are dropped; words cut by
/// truncation score 0.
pub fn attribute_sentence(
    model: &StyleModel,
    sentence: &AnnotatedSentence,
    target: usize,
    steps: usize,
) -> Result<(WordAttribution, AttributionResult)> {
    if !model.is_trained() {
        return Err(Error::State("attribution requested from an untrained model".into()));
    }
    if target > 1 {
        return Err(Error::Shape(format!("target class {target} for 2 labels")));
    }
    let tokenized = model.tokenize(&sentence.words);
    let x = model.token_embeddings(&tokenized.ids)?;
    let field = SentenceLogit { model, target };
    let mut result = integrated_gradients(&field, &x, steps, target)?;
    result.tokens = tokenized.tokens.clone();
    let mut scores = vec![0.0; sentence.words.len()];
    for (&w, &a) in tokenized.word_index.iter().zip(&result.token_attribution) {
        if w >= 0 {
            scores[w as usize] += a;
        }
    }
    Ok((
        WordAttribution {
            id: sentence.id.clone(),
            words: sentence.words.clone(),
            scores,
            target,
            completeness_gap: result.completeness_gap,
        },
        result,
    ))
}

/// Divides scores by their largest magnitude.
pub fn normalize_scores(scores: &mut [f64]) {
    let max = scores.iter().fold(0.0f64, |m, s| m.max(s.abs()));
    if max > 0.0 {
        scores.iter_mut().for_each(|s| *s /= max);
    }
}

pub fn write_attributions(path: impl AsRef<Path>, records: &[WordAttribution]) -> Result<()> {
    let mut out = BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::StyleTask;
    use crate::encoder::EncoderConfig;
    use crate::tokenize::Vocabulary;
    use approx::assert_abs_diff_eq;
    use ndarray::{array, s, Axis};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn model() -> StyleModel {
        let corpus: Vec<Vec<String>> = vec!["a truly great movie".split(' ').map(String::from).collect()];
        let config = EncoderConfig {
            hidden_size: 16,
            num_layers: 2,
            num_heads: 2,
            intermediate_size: 32,
            max_seq_len: 32,
            init_std: 0.3,
            ..EncoderConfig::default()
        };
        let mut m = StyleModel::new(
            StyleTask::builtin("sentiment").unwrap(),
            Vocabulary::build(&corpus, 1),
            config,
            0.05,
            17,
        )
        .unwrap();
        m.mark_trained();
        m
    }

    fn sentence(text: &str) -> AnnotatedSentence {
        AnnotatedSentence::unscored("s", text, 0)
    }

    #[test]
    fn linear_function_is_exact() {
        let w = array![[0.5, -1.0, 2.0], [3.0, 0.25, -0.75]];
        let wc = w.clone();
        let f = move |x: &Array2<f64>| Ok(((x * &wc).sum(), wc.clone()));
        let x = array![[1.0, 2.0, -1.0], [0.5, 0.0, 4.0]];
        for steps in [1, 7, 64] {
            let r = integrated_gradients(&f, &x, steps, 0).unwrap();
            let exact = &x * &w;
            for (a, b) in r.raw_attributions.iter().zip(&exact) {
                assert_abs_diff_eq!(a, b, epsilon = 1e-12);
            }
            assert!(r.completeness_gap < 1e-12);
            // Sensitivity: coordinates equal to the baseline get nothing.
            assert_eq!(r.raw_attributions[[1, 1]], 0.0);
        }
    }

    #[test]
    fn constant_function_gets_no_attribution() {
        let f = |x: &Array2<f64>| Ok((3.0, Array2::zeros(x.dim())));
        let r = integrated_gradients(&f, &array![[1.0, -2.0]], 10, 0).unwrap();
        assert!(r.token_attribution.iter().all(|&a| a == 0.0));
        assert_eq!(r.completeness_gap, 0.0);
    }

    #[test]
    fn non_finite_gradient_reports_step() {
        let f = |x: &Array2<f64>| {
            let g = x.mapv(|v| if v > 0.5 { f64::NAN } else { 1.0 });
            Ok((x.sum(), g))
        };
        let err = integrated_gradients(&f, &array![[1.0]], 4, 0).unwrap_err();
        assert!(matches!(err, Error::Numeric { step: 3 } | Error::Numeric { step: 4 }));
        assert!(matches!(integrated_gradients(&f, &array![[1.0]], 0, 0), Err(Error::Config(_))));
    }

    #[test]
    fn completeness_on_encoder() {
        let m = model();
        let ids = m.tokenize(&sentence("a great movie").words).ids;
        let x = m.token_embeddings(&ids).unwrap();
        let field = SentenceLogit { model: &m, target: 0 };
        let coarse = integrated_gradients(&field, &x, 16, 0).unwrap();
        let fine = integrated_gradients(&field, &x, 256, 0).unwrap();
        let delta = (fine.f_input - fine.f_baseline).abs();
        assert!(fine.completeness_gap <= coarse.completeness_gap);
        assert!(fine.completeness_gap <= 1e-2 * delta.max(1e-12), "gap {} of {delta}", fine.completeness_gap);
        let direct = m.sentence_logits(&ids).unwrap()[0];
        assert_abs_diff_eq!(fine.f_input, direct, epsilon = 1e-10);
    }

    #[test]
    fn word_scores_sum_subwords() {
        let m = model();
        let s = sentence("great zzq movie");
        let (words, raw) = attribute_sentence(&m, &s, 1, 8).unwrap();
        assert_eq!(words.scores.len(), 3);
        let tok = m.tokenize(&s.words);
        let expect: f64 = tok
            .word_index
            .iter()
            .zip(&raw.token_attribution)
            .filter(|(&w, _)| w == 1)
            .map(|(_, a)| a)
            .sum();
        assert_abs_diff_eq!(words.scores[1], expect, epsilon = 1e-12);
        assert_eq!(raw.tokens.len(), raw.token_attribution.len());
    }

    #[test]
    fn deterministic_for_identical_sentences() {
        let m = model();
        let (a, _) = attribute_sentence(&m, &sentence("a truly great movie"), 0, 20).unwrap();
        let (b, _) = attribute_sentence(&m, &sentence("a truly great movie"), 0, 20).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn untrained_model_rejected() {
        let mut m = model();
        m.set_trained(false);
        assert!(matches!(
            attribute_sentence(&m, &sentence("great"), 0, 4),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn permuted_hidden_units_give_identical_attributions() {
        let m = model();
        let mut p = m.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for layer in &m.encoder.layers {
            let ff = m.params.get(layer.ffn_in_b).ncols();
            let mut perm: Vec<usize> = (0..ff).collect();
            for i in (1..ff).rev() {
                perm.swap(i, rng.random_range(0..=i));
            }
            let w_in = m.params.get(layer.ffn_in_w).select(Axis(1), &perm);
            let b_in = m.params.get(layer.ffn_in_b).select(Axis(1), &perm);
            let w_out = m.params.get(layer.ffn_out_w).select(Axis(0), &perm);
            *p.params.get_mut(layer.ffn_in_w) = w_in;
            *p.params.get_mut(layer.ffn_in_b) = b_in;
            *p.params.get_mut(layer.ffn_out_w) = w_out;
        }
        assert_ne!(
            m.params.get(m.encoder.layers[0].ffn_in_w).slice(s![0, ..]),
            p.params.get(p.encoder.layers[0].ffn_in_w).slice(s![0, ..])
        );
        let s = sentence("a truly great movie");
        let (a, _) = attribute_sentence(&m, &s, 0, 32).unwrap();
        let (b, _) = attribute_sentence(&p, &s, 0, 32).unwrap();
        for (x, y) in a.scores.iter().zip(&b.scores) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-5);
        }
    }

    #[test]
    fn normalization_and_dump() {
        let mut v = vec![0.5, -2.0, 1.0];
        normalize_scores(&mut v);
        assert_eq!(v, vec![0.25, -1.0, 0.5]);

        let m = model();
        let (a, _) = attribute_sentence(&m, &sentence("great movie"), 0, 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ig.jsonl");
        write_attributions(&path, &[a.clone()]).unwrap();
        let line = std::fs::read_to_string(&path).unwrap();
        let back: WordAttribution = serde_json::from_str(line.trim()).unwrap();
        assert_eq!(back, a);
        let keys: serde_json::Value = serde_json::from_str(line.trim()).unwrap();
        for k in ["id", "words", "scores", "target", "completeness_gap"] {
            assert!(keys.get(k).is_some());
        }
    }
}
