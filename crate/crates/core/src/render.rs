//! Static HTML highlighting of word scores.
//!
//! Each word gets a background whose opacity is its score. Human scores are
//! green, model scores pink and baseline (IG) scores blue. Output depends on
//! the input only, so rendering twice gives identical bytes.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Highlight source, which fixes the color.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Human,
    Model,
    Baseline,
}

impl Source {
    fn rgb(self) -> &'static str {
        match self {
            Source::Human => "46, 160, 67",
            Source::Model => "219, 68, 140",
            Source::Baseline => "52, 120, 220",
        }
    }

    fn label(self) -> &'static str {
        match self {
            Source::Human => "human",
            Source::Model => "model",
            Source::Baseline => "baseline",
        }
    }
}

/// One sentence with up to three highlight rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderItem {
    pub id: String,
    pub words: Vec<String>,
    /// Free-form caption such as the predicted label.
    #[serde(default)]
    pub caption: Option<String>,
    pub rows: Vec<(Source, Vec<f64>)>,
}

pub fn escape(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for c in text.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&#39;"),
            _ => out.push(c),
        }
    }
    out
}

fn check(item: &RenderItem) -> Result<()> {
    for (source, scores) in &item.rows {
        if scores.len() != item.words.len() {
            return Err(Error::validation(
                &item.id,
                format!("{} row has {} scores for {} words", source.label(), scores.len(), item.words.len()),
            ));
        }
        if let Some(s) = scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
            return Err(Error::validation(
                &item.id,
                format!("{} score {s} outside [0, 1]", source.label()),
            ));
        }
    }
    Ok(())
}

const STYLE: &str = "body { font-family: sans-serif; margin: 2em; }
.item { margin-bottom: 1.5em; }
.row { margin: 0.2em 0; line-height: 1.8; }
.tag { display: inline-block; width: 6em; color: #555; font-size: 0.85em; }
.w { padding: 0.1em 0.2em; border-radius: 3px; }
.legend span { margin-right: 1em; padding: 0.1em 0.4em; border-radius: 3px; }
";

pub fn render_html(items: &[RenderItem]) -> Result<String> {
    for item in items {
        check(item)?;
    }
    let mut html = String::new();
    html.push_str("<!DOCTYPE html>\n<html lang=\"en\">\n<head>\n<meta charset=\"utf-8\">\n");
    html.push_str("<title>Stylistic word highlights</title>\n<style>\n");
    html.push_str(STYLE);
    html.push_str("</style>\n</head>\n<body>\n<div class=\"legend\">");
    for source in [Source::Human, Source::Model, Source::Baseline] {
        let _ = write!(
            html,
            "<span style=\"background: rgba({}, 0.6)\">{}</span>",
            source.rgb(),
            source.label()
        );
    }
    html.push_str("</div>\n<section>\n");
    for item in items {
        let _ = writeln!(html, "<div class=\"item\" id=\"{}\">", escape(&item.id));
        if let Some(caption) = &item.caption {
            let _ = writeln!(html, "<div class=\"caption\">{}</div>", escape(caption));
        }
        for (source, scores) in &item.rows {
            let _ = write!(html, "<div class=\"row {0}\"><span class=\"tag\">{0}</span>", source.label());
            for (word, score) in item.words.iter().zip(scores) {
                let _ = write!(
                    html,
                    "<span class=\"w\" style=\"background: rgba({}, {:.3})\">{}</span> ",
                    source.rgb(),
                    score,
                    escape(word)
                );
            }
            html.push_str("</div>\n");
        }
        html.push_str("</div>\n");
    }
    html.push_str("</section>\n</body>\n</html>\n");
    Ok(html)
}

pub fn write_html(path: impl AsRef<Path>, items: &[RenderItem]) -> Result<()> {
    std::fs::write(path, render_html(items)?)?;
    Ok(())
}
