//! Contextual encoders producing per-token hidden states.
//!
//! [`TransformerEncoder`] is a BERT-style post-LayerNorm transformer. It is
//! used both as the small from-scratch desk model and, through
//! [`crate::pretrained`], as the host for imported pretrained weights.

use ndarray::{Array2, Array3, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{ParamId, ParamStore, Tape, Var};
use crate::data::TokenBatch;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub hidden_size: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub intermediate_size: usize,
    /// Filled in from the tokenizer when a model is built.
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub dropout: f64,
    pub layer_norm_eps: f64,
    pub init_std: f64,
}

impl Default for EncoderConfig {
    /// Desk-scale defaults: H = 64, two layers, four heads.
    fn default() -> Self {
        EncoderConfig {
            hidden_size: 64,
            num_layers: 2,
            num_heads: 4,
            intermediate_size: 256,
            vocab_size: 0,
            max_seq_len: 512,
            dropout: 0.1,
            layer_norm_eps: 1e-12,
            init_std: 0.05,
        }
    }
}

impl EncoderConfig {
    /// Dimensions of `bert-base-uncased`.
    pub fn bert_base() -> Self {
        EncoderConfig {
            hidden_size: 768,
            num_layers: 12,
            num_heads: 12,
            intermediate_size: 3072,
            vocab_size: 30522,
            max_seq_len: 512,
            dropout: 0.1,
            layer_norm_eps: 1e-12,
            init_std: 0.02,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(format!("encoder: {m}")));
        if self.hidden_size == 0 || self.num_layers == 0 || self.num_heads == 0 {
            return fail("hidden_size, num_layers and num_heads must be positive".into());
        }
        if !self.hidden_size.is_multiple_of(self.num_heads) {
            return fail(format!(
                "hidden_size {} not divisible by num_heads {}",
                self.hidden_size, self.num_heads
            ));
        }
        if self.intermediate_size == 0 || self.vocab_size == 0 {
            return fail("intermediate_size and vocab_size must be positive".into());
        }
        if self.max_seq_len < 1 {
            return fail("max_seq_len must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_size / self.num_heads
    }
}

/// Inverted dropout. Without an RNG it is the identity (evaluation mode).
pub struct Dropout<'r> {
    rate: f64,
    rng: Option<&'r mut ChaCha8Rng>,
}

impl<'r> Dropout<'r> {
    pub fn eval() -> Self {
        Dropout { rate: 0.0, rng: None }
    }

    pub fn train(rate: f64, rng: &'r mut ChaCha8Rng) -> Self {
        Dropout {
            rate,
            rng: Some(rng),
        }
    }

    pub fn is_training(&self) -> bool {
        self.rng.is_some() && self.rate > 0.0
    }

    pub fn apply(&mut self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let rate = self.rate;
        match self.rng.as_deref_mut() {
            Some(rng) if rate > 0.0 => {
                let keep = 1.0 / (1.0 - rate);
                let mask = Array2::from_shape_simple_fn(tape.value(x).dim(), || {
                    if rng.random::<f64>() < rate {
                        0.0
                    } else {
                        keep
                    }
                });
                tape.mul_const(x, mask)
            }
            _ => Ok(x),
        }
    }
}

/// A contextual encoder usable inside a differentiable graph.
///
/// `embed` is the lookup whose output is the attribution surface;
/// `contextualize` maps those embeddings to final hidden states.
pub trait Encoder: Send + Sync {
    fn config(&self) -> &EncoderConfig;

    fn embed(&self, tape: &mut Tape<'_>, ids: &[usize]) -> Result<Var>;

    fn contextualize(
        &self,
        tape: &mut Tape<'_>,
        embeddings: Var,
        key_mask: &[bool],
        dropout: &mut Dropout<'_>,
    ) -> Result<Var>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub query_w: ParamId,
    pub query_b: ParamId,
    pub key_w: ParamId,
    pub key_b: ParamId,
    pub value_w: ParamId,
    pub value_b: ParamId,
    pub attn_out_w: ParamId,
    pub attn_out_b: ParamId,
    pub attn_norm_g: ParamId,
    pub attn_norm_b: ParamId,
    pub ffn_in_w: ParamId,
    pub ffn_in_b: ParamId,
    pub ffn_out_w: ParamId,
    pub ffn_out_b: ParamId,
    pub ffn_norm_g: ParamId,
    pub ffn_norm_b: ParamId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformerEncoder {
    config: EncoderConfig,
    pub word_embeddings: ParamId,
    pub position_embeddings: ParamId,
    pub embed_norm_g: ParamId,
    pub embed_norm_b: ParamId,
    pub layers: Vec<LayerParams>,
}

fn normal(rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let dist = Normal::new(0.0, std).expect("positive std");
    Array2::from_shape_simple_fn((rows, cols), || dist.sample(rng))
}

impl TransformerEncoder {
    /// Registers freshly initialized parameters under `encoder.*` names.
    pub fn init(config: EncoderConfig, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let h = config.hidden_size;
        let ff = config.intermediate_size;
        let std = config.init_std;
        let ones = || Array2::ones((1, h));
        let zeros = |n: usize| Array2::zeros((1, n));

        let word_embeddings = store.add(
            "encoder.embeddings.word",
            normal(config.vocab_size, h, std, rng),
        );
        let position_embeddings = store.add(
            "encoder.embeddings.position",
            normal(config.max_seq_len, h, std, rng),
        );
        let embed_norm_g = store.add("encoder.embeddings.norm.gamma", ones());
        let embed_norm_b = store.add("encoder.embeddings.norm.beta", zeros(h));
        let mut layers = Vec::with_capacity(config.num_layers);
        for l in 0..config.num_layers {
            let p = |name: &str| format!("encoder.layer.{l}.{name}");
            layers.push(LayerParams {
                query_w: store.add(p("attention.query.weight"), normal(h, h, std, rng)),
                query_b: store.add(p("attention.query.bias"), zeros(h)),
                key_w: store.add(p("attention.key.weight"), normal(h, h, std, rng)),
                key_b: store.add(p("attention.key.bias"), zeros(h)),
                value_w: store.add(p("attention.value.weight"), normal(h, h, std, rng)),
                value_b: store.add(p("attention.value.bias"), zeros(h)),
                attn_out_w: store.add(p("attention.output.weight"), normal(h, h, std, rng)),
                attn_out_b: store.add(p("attention.output.bias"), zeros(h)),
                attn_norm_g: store.add(p("attention.norm.gamma"), ones()),
                attn_norm_b: store.add(p("attention.norm.beta"), zeros(h)),
                ffn_in_w: store.add(p("ffn.in.weight"), normal(h, ff, std, rng)),
                ffn_in_b: store.add(p("ffn.in.bias"), zeros(ff)),
                ffn_out_w: store.add(p("ffn.out.weight"), normal(ff, h, std, rng)),
                ffn_out_b: store.add(p("ffn.out.bias"), zeros(h)),
                ffn_norm_g: store.add(p("ffn.norm.gamma"), ones()),
                ffn_norm_b: store.add(p("ffn.norm.beta"), zeros(h)),
            });
        }
        Ok(TransformerEncoder {
            config,
            word_embeddings,
            position_embeddings,
            embed_norm_g,
            embed_norm_b,
            layers,
        })
    }

    fn attention(
        &self,
        tape: &mut Tape<'_>,
        x: Var,
        layer: &LayerParams,
        mask_bias: &Array2<f64>,
        dropout: &mut Dropout<'_>,
    ) -> Result<Var> {
        let dh = self.config.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let (qw, qb) = (tape.param(layer.query_w), tape.param(layer.query_b));
        let (kw, kb) = (tape.param(layer.key_w), tape.param(layer.key_b));
        let (vw, vb) = (tape.param(layer.value_w), tape.param(layer.value_b));
        let q = tape.linear(x, qw, qb)?;
        let k = tape.linear(x, kw, kb)?;
        let v = tape.linear(x, vw, vb)?;
        let mut heads = Vec::with_capacity(self.config.num_heads);
        for head in 0..self.config.num_heads {
            let start = head * dh;
            let qh = tape.slice_cols(q, start, dh)?;
            let kh = tape.slice_cols(k, start, dh)?;
            let vh = tape.slice_cols(v, start, dh)?;
            let scores = tape.matmul_nt(qh, kh)?;
            let scores = tape.scale(scores, scale);
            let scores = tape.add_const(scores, mask_bias)?;
            let probs = tape.softmax_rows(scores);
            let probs = dropout.apply(tape, probs)?;
            heads.push(tape.matmul(probs, vh)?);
        }
        let ctx = tape.concat_cols(&heads)?;
        let (ow, ob) = (tape.param(layer.attn_out_w), tape.param(layer.attn_out_b));
        tape.linear(ctx, ow, ob)
    }
}

impl Encoder for TransformerEncoder {
    fn config(&self) -> &EncoderConfig {
        &self.config
    }

    fn embed(&self, tape: &mut Tape<'_>, ids: &[usize]) -> Result<Var> {
        tape.gather(self.word_embeddings, ids)
    }

    fn contextualize(
        &self,
        tape: &mut Tape<'_>,
        embeddings: Var,
        key_mask: &[bool],
        dropout: &mut Dropout<'_>,
    ) -> Result<Var> {
        let (seq, width) = tape.value(embeddings).dim();
        let cfg = &self.config;
        if width != cfg.hidden_size {
            return Err(Error::Shape(format!(
                "embeddings have width {width}, encoder expects {}",
                cfg.hidden_size
            )));
        }
        if seq > cfg.max_seq_len {
            return Err(Error::Shape(format!(
                "sequence of {seq} exceeds max_seq_len {}",
                cfg.max_seq_len
            )));
        }
        if key_mask.len() != seq {
            return Err(Error::Shape(format!(
                "mask of {} for sequence of {seq}",
                key_mask.len()
            )));
        }
        if !key_mask.iter().any(|&m| m) {
            return Err(Error::Degenerate("attention over a fully masked row".into()));
        }
        let mask_bias = Array2::from_shape_fn((seq, seq), |(_, j)| {
            if key_mask[j] {
                0.0
            } else {
                f64::NEG_INFINITY
            }
        });
        let positions: Vec<usize> = (0..seq).collect();
        let pos = tape.gather(self.position_embeddings, &positions)?;
        let x = tape.add(embeddings, pos)?;
        let (g, b) = (tape.param(self.embed_norm_g), tape.param(self.embed_norm_b));
        let x = tape.layer_norm(x, g, b, cfg.layer_norm_eps)?;
        let mut x = dropout.apply(tape, x)?;
        for layer in &self.layers {
            let attn = self.attention(tape, x, layer, &mask_bias, dropout)?;
            let attn = dropout.apply(tape, attn)?;
            let res = tape.add(x, attn)?;
            let (g, b) = (tape.param(layer.attn_norm_g), tape.param(layer.attn_norm_b));
            let x1 = tape.layer_norm(res, g, b, cfg.layer_norm_eps)?;

            let (w1, b1) = (tape.param(layer.ffn_in_w), tape.param(layer.ffn_in_b));
            let inner = tape.linear(x1, w1, b1)?;
            let inner = tape.gelu(inner);
            let (w2, b2) = (tape.param(layer.ffn_out_w), tape.param(layer.ffn_out_b));
            let ffn = tape.linear(inner, w2, b2)?;
            let ffn = dropout.apply(tape, ffn)?;
            let res = tape.add(x1, ffn)?;
            let (g, b) = (tape.param(layer.ffn_norm_g), tape.param(layer.ffn_norm_b));
            x = tape.layer_norm(res, g, b, cfg.layer_norm_eps)?;
        }
        Ok(x)
    }
}

/// Final hidden states, `batch x seq x H`.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput {
    pub hidden_states: Array3<f64>,
}

fn check_ids(encoder: &dyn Encoder, ids: &Array2<usize>) -> Result<()> {
    let vocab = encoder.config().vocab_size;
    match ids.iter().find(|&&i| i >= vocab) {
        Some(bad) => Err(Error::Vocabulary(format!(
            "token id {bad} not below vocab size {vocab}"
        ))),
        None => Ok(()),
    }
}

/// Embedding-layer output for a batch of ids, `batch x seq x H`.
pub fn embed(encoder: &dyn Encoder, params: &ParamStore, token_ids: &Array2<usize>) -> Result<Array3<f64>> {
    check_ids(encoder, token_ids)?;
    let (b, seq) = token_ids.dim();
    let h = encoder.config().hidden_size;
    let mut out = Array3::zeros((b, seq, h));
    for r in 0..b {
        let ids: Vec<usize> = token_ids.row(r).to_vec();
        let mut tape = Tape::new(params);
        let e = encoder.embed(&mut tape, &ids)?;
        out.index_axis_mut(Axis(0), r).assign(tape.value(e));
    }
    Ok(out)
}

/// Contextualizes precomputed embeddings in evaluation mode.
pub fn encode_embeddings(
    encoder: &dyn Encoder,
    params: &ParamStore,
    embeddings: &Array3<f64>,
    attention_mask: &Array2<bool>,
) -> Result<EncoderOutput> {
    let (b, seq, _) = embeddings.dim();
    if attention_mask.dim() != (b, seq) {
        return Err(Error::Shape(format!(
            "mask {:?} for embeddings {:?}",
            attention_mask.dim(),
            embeddings.dim()
        )));
    }
    let h = encoder.config().hidden_size;
    let mut out = Array3::zeros((b, seq, h));
    for r in 0..b {
        let mut tape = Tape::new(params);
        let e = tape.input(embeddings.index_axis(Axis(0), r).to_owned());
        let mask: Vec<bool> = attention_mask.row(r).to_vec();
        let hidden = encoder.contextualize(&mut tape, e, &mask, &mut Dropout::eval())?;
        out.index_axis_mut(Axis(0), r).assign(tape.value(hidden));
    }
    Ok(EncoderOutput { hidden_states: out })
}

/// Evaluation-mode forward pass over a padded batch. Padded positions are
/// excluded as attention keys but still receive hidden vectors.
pub fn encode(encoder: &dyn Encoder, params: &ParamStore, batch: &TokenBatch) -> Result<EncoderOutput> {
    let embeddings = embed(encoder, params, &batch.token_ids)?;
    encode_embeddings(encoder, params, &embeddings, &batch.attention_mask)
}
