//! Import of BERT-style pretrained weights from a safetensors archive.
//!
//! Tensor names follow the usual BERT layout, with or without a `bert.`
//! prefix. Linear weights are stored `(out, in)` there and transposed on
//! import. Token-type embeddings are not modeled; row 0 of that table is
//! folded into the position embeddings, which is exact for single-segment
//! input. Only F32 and F64 tensors are accepted.

use std::path::Path;

use ndarray::Array2;
use safetensors::{Dtype, SafeTensors};

use crate::data::StyleTask;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::model::StyleModel;
use crate::tokenize::Vocabulary;

struct Archive<'a> {
    tensors: SafeTensors<'a>,
    prefix: &'static str,
}

impl Archive<'_> {
    fn has(&self, name: &str) -> bool {
        self.tensors.tensor(&format!("{}{name}", self.prefix)).is_ok()
    }

    /// Tensor as a matrix; vectors become a single row.
    fn matrix(&self, name: &str) -> Result<Array2<f64>> {
        let full = format!("{}{name}", self.prefix);
        let view = self
            .tensors
            .tensor(&full)
            .map_err(|_| Error::Checkpoint(format!("missing tensor `{full}`")))?;
        let bytes = view.data();
        let values: Vec<f64> = match view.dtype() {
            Dtype::F32 => bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect(),
            Dtype::F64 => bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
            other => {
                return Err(Error::Checkpoint(format!("tensor `{full}` has unsupported dtype {other:?}")));
            }
        };
        let shape = match *view.shape() {
            [n] => (1, n),
            [r, c] => (r, c),
            ref s => return Err(Error::Checkpoint(format!("tensor `{full}` has rank {}", s.len()))),
        };
        Array2::from_shape_vec(shape, values).map_err(|e| Error::Checkpoint(format!("tensor `{full}`: {e}")))
    }

    /// LayerNorm scale, under either the current or the older name.
    fn norm(&self, base: &str) -> Result<(Array2<f64>, Array2<f64>)> {
        if self.has(&format!("{base}.weight")) {
            Ok((self.matrix(&format!("{base}.weight"))?, self.matrix(&format!("{base}.bias"))?))
        } else {
            Ok((self.matrix(&format!("{base}.gamma"))?, self.matrix(&format!("{base}.beta"))?))
        }
    }
}

fn count_layers(archive: &Archive<'_>) -> usize {
    (0..)
        .take_while(|l| archive.has(&format!("encoder.layer.{l}.attention.self.query.weight")))
        .count()
}

/// Builds a model whose encoder carries the archive's weights. Heads are
/// freshly initialized from `seed`. `template` supplies the head count,
/// dropout and LayerNorm epsilon; all sizes come from the archive.
pub fn from_safetensors(
    bytes: &[u8],
    task: StyleTask,
    vocab: Vocabulary,
    template: &EncoderConfig,
    alpha: f64,
    seed: u64,
) -> Result<StyleModel> {
    let tensors = SafeTensors::deserialize(bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut archive = Archive { tensors, prefix: "" };
    if !archive.has("embeddings.word_embeddings.weight") {
        archive.prefix = "bert.";
    }
    let words = archive.matrix("embeddings.word_embeddings.weight")?;
    let mut positions = archive.matrix("embeddings.position_embeddings.weight")?;
    if archive.has("embeddings.token_type_embeddings.weight") {
        let types = archive.matrix("embeddings.token_type_embeddings.weight")?;
        if types.ncols() != positions.ncols() {
            return Err(Error::Checkpoint("token type embeddings have the wrong width".into()));
        }
        positions += &types.row(0);
    }
    if words.nrows() != vocab.len() {
        return Err(Error::Compatibility(format!(
            "archive has {} word embeddings, vocabulary has {} tokens",
            words.nrows(),
            vocab.len()
        )));
    }
    let num_layers = count_layers(&archive);
    if num_layers == 0 {
        return Err(Error::Checkpoint("archive has no encoder layers".into()));
    }
    let intermediate = archive.matrix("encoder.layer.0.intermediate.dense.weight")?;
    let config = EncoderConfig {
        hidden_size: words.ncols(),
        num_layers,
        intermediate_size: intermediate.nrows(),
        vocab_size: words.nrows(),
        max_seq_len: positions.nrows(),
        ..template.clone()
    };
    let mut model = StyleModel::new(task, vocab, config, alpha, seed)?;

    let mut assign = |name: &str, value: Array2<f64>| -> Result<()> {
        let id = model
            .params
            .id_of(name)
            .ok_or_else(|| Error::Checkpoint(format!("model has no parameter `{name}`")))?;
        let slot = model.params.get_mut(id);
        if slot.dim() != value.dim() {
            return Err(Error::Checkpoint(format!(
                "`{name}` expects {:?}, archive gives {:?}",
                slot.dim(),
                value.dim()
            )));
        }
        *slot = value;
        Ok(())
    };
    assign("encoder.embeddings.word", words)?;
    assign("encoder.embeddings.position", positions)?;
    let (g, b) = archive.norm("embeddings.LayerNorm")?;
    assign("encoder.embeddings.norm.gamma", g)?;
    assign("encoder.embeddings.norm.beta", b)?;
    for l in 0..num_layers {
        let src = |n: &str| format!("encoder.layer.{l}.{n}");
        let dst = |n: &str| format!("encoder.layer.{l}.{n}");
        let linears = [
            ("attention.self.query", "attention.query"),
            ("attention.self.key", "attention.key"),
            ("attention.self.value", "attention.value"),
            ("attention.output.dense", "attention.output"),
            ("intermediate.dense", "ffn.in"),
            ("output.dense", "ffn.out"),
        ];
        for (from, to) in linears {
            assign(&dst(&format!("{to}.weight")), archive.matrix(&src(&format!("{from}.weight")))?.reversed_axes())?;
            assign(&dst(&format!("{to}.bias")), archive.matrix(&src(&format!("{from}.bias")))?)?;
        }
        for (from, to) in [("attention.output.LayerNorm", "attention.norm"), ("output.LayerNorm", "ffn.norm")] {
            let (g, b) = archive.norm(&src(from))?;
            assign(&dst(&format!("{to}.gamma")), g)?;
            assign(&dst(&format!("{to}.beta")), b)?;
        }
    }
    Ok(model)
}

/// Reads `model.safetensors` and a WordPiece `vocab.txt`.
pub fn load_bert(
    weights: impl AsRef<Path>,
    vocab_txt: impl AsRef<Path>,
    task: StyleTask,
    template: &EncoderConfig,
    alpha: f64,
    seed: u64,
) -> Result<StyleModel> {
    let vocab = Vocabulary::load_wordpiece(vocab_txt)?;
    from_safetensors(&std::fs::read(weights)?, task, vocab, template, alpha, seed)
}

#[cfg(test)]
mod tests {
    use std::collections::HashMap;

    use safetensors::tensor::TensorView;

    use super::*;
    use crate::data::AnnotatedSentence;

    fn source_model() -> StyleModel {
        let words = vec![vec!["please".to_string(), "thank".into(), "you".into()]];
        let cfg = EncoderConfig {
            hidden_size: 8,
            num_layers: 2,
            num_heads: 2,
            intermediate_size: 12,
            max_seq_len: 16,
            init_std: 0.3,
            ..EncoderConfig::default()
        };
        StyleModel::new(StyleTask::builtin("politeness").unwrap(), Vocabulary::build(&words, 1), cfg, 0.05, 3).unwrap()
    }

    /// Re-exports our encoder under BERT names, as F64 or F32 bytes.
    fn export(model: &StyleModel, f32_data: bool, prefix: &str, token_type: &Array2<f64>) -> Vec<u8> {
        let mut named: Vec<(String, Array2<f64>)> = Vec::new();
        let get = |n: &str| model.params.get(model.params.id_of(n).unwrap()).clone();
        named.push(("embeddings.word_embeddings.weight".into(), get("encoder.embeddings.word")));
        named.push((
            "embeddings.position_embeddings.weight".into(),
            get("encoder.embeddings.position") - token_type.row(0),
        ));
        named.push(("embeddings.token_type_embeddings.weight".into(), token_type.clone()));
        named.push(("embeddings.LayerNorm.gamma".into(), get("encoder.embeddings.norm.gamma")));
        named.push(("embeddings.LayerNorm.beta".into(), get("encoder.embeddings.norm.beta")));
        for l in 0..model.config().num_layers {
            for (from, to) in [
                ("attention.query", "attention.self.query"),
                ("attention.key", "attention.self.key"),
                ("attention.value", "attention.self.value"),
                ("attention.output", "attention.output.dense"),
                ("ffn.in", "intermediate.dense"),
                ("ffn.out", "output.dense"),
            ] {
                let w = get(&format!("encoder.layer.{l}.{from}.weight")).reversed_axes();
                named.push((format!("encoder.layer.{l}.{to}.weight"), w.as_standard_layout().to_owned()));
                named.push((format!("encoder.layer.{l}.{to}.bias"), get(&format!("encoder.layer.{l}.{from}.bias"))));
            }
            for (from, to) in [("attention.norm", "attention.output.LayerNorm"), ("ffn.norm", "output.LayerNorm")] {
                named.push((format!("encoder.layer.{l}.{to}.weight"), get(&format!("encoder.layer.{l}.{from}.gamma"))));
                named.push((format!("encoder.layer.{l}.{to}.bias"), get(&format!("encoder.layer.{l}.{from}.beta"))));
            }
        }
        let encoded: Vec<(String, Vec<u8>, Vec<usize>)> = named
            .into_iter()
            .map(|(n, a)| {
                let shape = if a.nrows() == 1 { vec![a.ncols()] } else { vec![a.nrows(), a.ncols()] };
                let data = if f32_data {
                    a.iter().flat_map(|&v| (v as f32).to_le_bytes()).collect()
                } else {
                    a.iter().flat_map(|&v| v.to_le_bytes()).collect()
                };
                (format!("{prefix}{n}"), data, shape)
            })
            .collect();
        let dtype = if f32_data { Dtype::F32 } else { Dtype::F64 };
        let views: HashMap<String, TensorView<'_>> = encoded
            .iter()
            .map(|(n, d, s)| (n.clone(), TensorView::new(dtype, s.clone(), d).unwrap()))
            .collect();
        safetensors::serialize(views, &None).unwrap()
    }

    fn sentence() -> AnnotatedSentence {
        AnnotatedSentence::unscored("s", "thank you please", 0)
    }

    fn hidden(model: &StyleModel) -> Array2<f64> {
        let row = model.token_row(&sentence()).unwrap();
        let out = model.forward_batch(&[row]).unwrap();
        out.hidden.index_axis(ndarray::Axis(0), 0).to_owned()
    }

    #[test]
    fn f64_round_trip_reproduces_hidden_states() {
        let src = source_model();
        let tt = Array2::from_shape_fn((2, 8), |(r, c)| 0.01 * (r * 8 + c) as f64);
        for prefix in ["", "bert."] {
            let bytes = export(&src, false, prefix, &tt);
            let m = from_safetensors(&bytes, src.task.clone(), src.vocab.clone(), src.config(), 0.05, 9).unwrap();
            assert_eq!(m.config().num_layers, 2);
            assert_eq!(m.config().intermediate_size, 12);
            let (a, b) = (hidden(&src), hidden(&m));
            for (x, y) in a.iter().zip(b.iter()) {
                assert!((x - y).abs() < 1e-12, "{x} vs {y}");
            }
        }
    }

    #[test]
    fn f32_archives_load_within_single_precision() {
        let src = source_model();
        let bytes = export(&src, true, "", &Array2::zeros((2, 8)));
        let m = from_safetensors(&bytes, src.task.clone(), src.vocab.clone(), src.config(), 0.05, 9).unwrap();
        let (a, b) = (hidden(&src), hidden(&m));
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() < 1e-4, "{x} vs {y}");
        }
    }

    #[test]
    fn vocabulary_size_must_match() {
        let src = source_model();
        let bytes = export(&src, false, "", &Array2::zeros((2, 8)));
        let other = Vocabulary::build(&[vec!["a".to_string()]], 1);
        assert!(matches!(
            from_safetensors(&bytes, src.task.clone(), other, src.config(), 0.05, 9),
            Err(Error::Compatibility(_))
        ));
    }
}
