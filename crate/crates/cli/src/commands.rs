use std::path::{Path, PathBuf};

use serde_json::json;
use stylex::data::{load_corpus, load_lexicon, score_to_target, signed_score, write_corpus, AnnotatedSentence, StyleTask, WordScores};
use stylex::eval::{
    self, export_comparison_pairs, lexicon_overlap, make_synthetic_corpus, max_normalize, plausibility,
    sufficiency_test, write_json, write_pairs, ExplainerHandle,
};
use stylex::ig::{attribute_sentence, write_attributions};
use stylex::model::StyleModel;
use stylex::pipeline::{pseudo_label, train_joint, train_word_scorer, Manifest};
use stylex::render::{write_html, RenderItem, Source};
use stylex::checkpoint;

use crate::config::{RunConfig, TaskSpec, OUTPUT_DIR_ENV};
use crate::{CliError, Command, Common, ExplainerArgs};

type Result<T> = std::result::Result<T, CliError>;

/// Resolved configuration plus the manifest being built for one command.
struct Ctx {
    cfg: RunConfig,
    task: StyleTask,
    manifest: Manifest,
    inputs: Vec<PathBuf>,
}

impl Ctx {
    fn new(name: &str, common: &Common, adjust: impl FnOnce(&mut RunConfig)) -> Result<Self> {
        let mut cfg = match &common.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(dir) = std::env::var_os(OUTPUT_DIR_ENV).filter(|d| !d.is_empty()) {
            cfg.output_dir = PathBuf::from(dir);
        }
        if let Some(seed) = common.seed {
            cfg.seed = seed;
        }
        if let Some(dir) = &common.output_dir {
            cfg.output_dir = dir.clone();
        }
        if let Some(task) = &common.task {
            cfg.task = TaskSpec::Builtin(task.clone());
        }
        let p = &mut cfg.paths;
        for (flag, slot) in [
            (&common.seed_corpus, &mut p.seed_corpus),
            (&common.corpus, &mut p.corpus),
            (&common.pseudo_corpus, &mut p.pseudo_corpus),
            (&common.test_corpus, &mut p.test_corpus),
            (&common.lexicon, &mut p.lexicon),
            (&common.checkpoint, &mut p.checkpoint),
        ] {
            if flag.is_some() {
                slot.clone_from(flag);
            }
        }
        adjust(&mut cfg);
        cfg.propagate_seed();
        let task = cfg.task.resolve()?;
        cfg.pipeline.validate()?;
        cfg.synthetic.validate()?;
        if !(cfg.eval.k_fraction > 0.0 && cfg.eval.k_fraction <= 1.0) {
            return Err(CliError::Usage(format!("k_fraction must lie in (0, 1], got {}", cfg.eval.k_fraction)));
        }
        if cfg.eval.ig_steps == 0 {
            return Err(CliError::Usage("ig_steps must be at least 1".into()));
        }

        println!("stylex {name}: seed = {}", cfg.seed);
        println!("resolved config:\n{}", cfg.to_toml());
        std::fs::create_dir_all(&cfg.output_dir).map_err(|e| {
            CliError::Usage(format!("output dir {} is not writable: {e}", cfg.output_dir.display()))
        })?;
        let mut ctx = Ctx {
            manifest: Manifest::new(name, cfg.seed, cfg.to_json()),
            task,
            cfg,
            inputs: Vec::new(),
        };
        if let Some(path) = &common.config {
            ctx.input(path)?;
        }
        Ok(ctx)
    }

    fn input(&mut self, path: &Path) -> Result<()> {
        self.manifest.record_input(path)?;
        self.inputs.push(path.canonicalize()?);
        Ok(())
    }

    /// A configured input path that must exist.
    fn require(&mut self, path: &Option<PathBuf>, flag: &str) -> Result<PathBuf> {
        let path = path
            .clone()
            .ok_or_else(|| CliError::Usage(format!("--{flag} is required (or set it under [paths])")))?;
        if !path.is_file() {
            return Err(CliError::Usage(format!("--{flag}: {} does not exist", path.display())));
        }
        self.input(&path)?;
        Ok(path)
    }

    fn optional(&mut self, path: &Option<PathBuf>, flag: &str) -> Result<Option<PathBuf>> {
        match path {
            Some(_) => self.require(path, flag).map(Some),
            None => Ok(None),
        }
    }

    /// Output file inside the output dir; never one of the inputs.
    fn output(&self, file: &str) -> Result<PathBuf> {
        let path = self.cfg.output_dir.join(file);
        if let Ok(canonical) = path.canonicalize() {
            if self.inputs.contains(&canonical) {
                return Err(CliError::Usage(format!("refusing to overwrite input {}", path.display())));
            }
        }
        Ok(path)
    }

    fn corpus(&mut self, path: &Option<PathBuf>, flag: &str) -> Result<Vec<AnnotatedSentence>> {
        let path = self.require(path, flag)?;
        Ok(load_corpus(path, &self.task)?)
    }

    fn model(&mut self) -> Result<StyleModel> {
        let path = self.require(&self.cfg.paths.checkpoint.clone(), "checkpoint")?;
        let model = checkpoint::load(path)?;
        if model.task.name != self.task.name || model.task.d_l_word != self.task.d_l_word {
            return Err(CliError::Usage(format!(
                "checkpoint is for task `{}` (d_l_word {}), run is for `{}` (d_l_word {})",
                model.task.name, model.task.d_l_word, self.task.name, self.task.d_l_word
            )));
        }
        Ok(model)
    }

    fn finish(mut self, metrics: serde_json::Value, outputs: &[PathBuf]) -> Result<()> {
        for path in outputs {
            self.manifest.record_output(path)?;
        }
        self.manifest.metrics = metrics;
        let path = self.output(&format!("manifest-{}.json", self.manifest.command))?;
        self.manifest.write(&path)?;
        println!("{}", serde_json::to_string_pretty(&self.manifest.metrics).unwrap_or_default());
        println!("manifest: {}", path.display());
        Ok(())
    }
}

fn explainer<'a>(name: &str, model: Option<&'a StyleModel>, cfg: &RunConfig) -> Result<ExplainerHandle<'a>> {
    let need = |m: Option<&'a StyleModel>| m.ok_or_else(|| CliError::Usage(format!("explainer `{name}` needs --checkpoint")));
    Ok(match name {
        "stylex" => ExplainerHandle::stylex(need(model)?),
        "integrated_gradients" | "ig" => ExplainerHandle::integrated_gradients(need(model)?, cfg.eval.ig_steps, cfg.eval.normalize_ig),
        "random" => ExplainerHandle::random(cfg.seed),
        "oracle" => ExplainerHandle::oracle(),
        other => {
            return Err(CliError::Usage(format!(
                "unknown explainer `{other}` (stylex, integrated_gradients, random, oracle)"
            )))
        }
    })
}

fn needs_model(name: &str) -> bool {
    matches!(name, "stylex" | "integrated_gradients" | "ig")
}

fn apply_explainer_args(cfg: &mut RunConfig, args: &ExplainerArgs) {
    if let Some(e) = &args.explainer {
        cfg.eval.explainer.clone_from(e);
    }
    if let Some(k) = args.k_fraction {
        cfg.eval.k_fraction = k;
    }
    if let Some(s) = args.ig_steps {
        cfg.eval.ig_steps = s;
    }
}

/// Model for model-backed explainers, loaded only when one is requested.
fn model_for(ctx: &mut Ctx, names: &[&str]) -> Result<Option<StyleModel>> {
    if names.iter().any(|n| needs_model(n)) {
        ctx.model().map(Some)
    } else {
        Ok(None)
    }
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::TrainSeed(common) => train_seed(&common),
        Command::PseudoLabel(common) => pseudo(&common),
        Command::TrainJoint(common) => joint(&common),
        Command::Explain(common) => explain(&common),
        Command::Attribute { common, steps, target } => attribute(&common, steps, target),
        Command::EvalF1(common) => eval_f1(&common),
        Command::EvalSufficiency { common, explainer } => eval_sufficiency(&common, &explainer),
        Command::EvalPlausibility { common, explainer } => eval_plausibility(&common, &explainer),
        Command::EvalOverlap { common, explainer } => eval_overlap(&common, &explainer),
        Command::ExportPairs { common, n } => export_pairs(&common, n),
        Command::RenderHtml { common, with_baseline } => render(&common, with_baseline),
        Command::MakeSynthetic {
            common,
            n,
            test_n,
            seed_size,
        } => make_synthetic(&common, n, test_n, seed_size),
    }
}

fn train_seed(common: &Common) -> Result<()> {
    let mut ctx = Ctx::new("train-seed", common, |_| {})?;
    let seed_corpus = ctx.corpus(&ctx.cfg.paths.seed_corpus.clone(), "seed-corpus")?;
    let out = ctx.output("scorer.json")?;
    let outcome = train_word_scorer(&ctx.task, &seed_corpus, &ctx.cfg.pipeline)?;
    checkpoint::save(&outcome.model, &out)?;
    ctx.manifest
        .notes
        .insert("checkpoint_selection".into(), "best held-out word F1, earliest epoch on ties".into());
    let metrics = json!({
        "selected_epoch": outcome.selected_epoch,
        "heldout_word_f1": outcome.heldout_f1,
        "heldout_size": outcome.heldout_ids.len(),
        "epochs": outcome.history,
    });
    ctx.finish(metrics, &[out])
}

fn pseudo(common: &Common) -> Result<()> {
    let mut ctx = Ctx::new("pseudo-label", common, |_| {})?;
    let scorer = ctx.model()?;
    let corpus = ctx.corpus(&ctx.cfg.paths.corpus.clone(), "corpus")?;
    let out = ctx.output("pseudo.jsonl")?;
    let words: Vec<&[String]> = corpus.iter().map(|s| s.words.as_slice()).collect();
    let unk_rate = scorer.vocab.unk_rate(&words);
    let labeled = pseudo_label(&scorer, &corpus, ctx.cfg.pipeline.max_unk_rate)?;
    write_corpus(&out, &labeled)?;
    let metrics = json!({ "sentences": labeled.len(), "unk_rate": unk_rate });
    ctx.finish(metrics, &[out])
}

fn joint(common: &Common) -> Result<()> {
    let mut ctx = Ctx::new("train-joint", common, |_| {})?;
    let scorer = ctx.model()?;
    let seed_corpus = ctx.corpus(&ctx.cfg.paths.seed_corpus.clone(), "seed-corpus")?;
    let pseudo_corpus = ctx.corpus(&ctx.cfg.paths.pseudo_corpus.clone(), "pseudo-corpus")?;
    let out = ctx.output("joint.json")?;
    let outcome = train_joint(&ctx.task, &scorer.vocab, &seed_corpus, &pseudo_corpus, &ctx.cfg.pipeline)?;
    checkpoint::save(&outcome.model, &out)?;
    ctx.manifest.notes.insert("joint_init".into(), "reinitialized".into());
    let metrics = json!({ "corpus_size": outcome.corpus_size, "epochs": outcome.history });
    ctx.finish(metrics, &[out])
}

fn label_f1(model: &StyleModel, corpus: &[AnnotatedSentence]) -> Result<f64> {
    let predictions = model.predict_labels(corpus)?;
    let gold: Vec<usize> = corpus.iter().map(|s| s.sentence_label).collect();
    Ok(eval::f1(&predictions, &gold, model.task.positive_label())?)
}

fn explain(common: &Common) -> Result<()> {
    let mut ctx = Ctx::new("explain", common, |_| {})?;
    let model = ctx.model()?;
    let corpus = ctx.corpus(&ctx.cfg.paths.corpus.clone(), "corpus")?;
    let out = ctx.output("explanations.jsonl")?;
    let explanations = model.explain_all(&corpus)?;
    let mut body = String::new();
    for e in &explanations {
        body.push_str(&serde_json::to_string(e).map_err(stylex::Error::from)?);
        body.push('\n');
    }
    std::fs::write(&out, body)?;
    let positive = explanations.iter().filter(|e| e.predicted_label == model.task.positive_label()).count();
    let metrics = json!({
        "sentences": explanations.len(),
        "predicted_positive": positive,
        "sentence_f1": label_f1(&model, &corpus)?,
    });
    ctx.finish(metrics, &[out])
}

fn attribute(common: &Common, steps: Option<usize>, target: Option<usize>) -> Result<()> {
    let mut ctx = Ctx::new("attribute", common, |cfg| {
        if let Some(s) = steps {
            cfg.eval.ig_steps = s;
        }
    })?;
    let target = target.unwrap_or(ctx.task.positive_label());
    if target > 1 {
        return Err(CliError::Usage(format!("--target must be 0 or 1, got {target}")));
    }
    let model = ctx.model()?;
    let corpus = ctx.corpus(&ctx.cfg.paths.corpus.clone(), "corpus")?;
    let out = ctx.output("attributions.jsonl")?;
    let mut records = Vec::with_capacity(corpus.len());
    let mut relative_gaps = Vec::with_capacity(corpus.len());
    for s in &corpus {
        let (words, result) = attribute_sentence(&model, s, target, ctx.cfg.eval.ig_steps)?;
        let delta = (result.f_input - result.f_baseline).abs();
        if delta > 0.0 {
            relative_gaps.push(result.completeness_gap / delta);
        }
        records.push(words);
    }
    write_attributions(&out, &records)?;
    let max_gap = records.iter().map(|r| r.completeness_gap).fold(0.0, f64::max);
    let max_relative = relative_gaps.iter().copied().fold(0.0, f64::max);
    let metrics = json!({
        "sentences": records.len(),
        "steps": ctx.cfg.eval.ig_steps,
        "target": target,
        "max_completeness_gap": max_gap,
        "max_relative_gap": max_relative,
    });
    ctx.finish(metrics, &[out])
}

fn eval_f1(common: &Common) -> Result<()> {
    let mut ctx = Ctx::new("eval-f1", common, |_| {})?;
    let model = ctx.model()?;
    let test = ctx.corpus(&ctx.cfg.paths.test_corpus.clone(), "test-corpus")?;
    let out = ctx.output("f1.json")?;
    let report = json!({
        "style": ctx.task.name,
        "positive_label": ctx.task.positive_label(),
        "sentences": test.len(),
        "f1": label_f1(&model, &test)?,
    });
    write_json(&out, &report)?;
    ctx.finish(report, &[out])
}

fn eval_sufficiency(common: &Common, args: &ExplainerArgs) -> Result<()> {
    let mut ctx = Ctx::new("eval-sufficiency", common, |cfg| apply_explainer_args(cfg, args))?;
    let name = ctx.cfg.eval.explainer.clone();
    let model = model_for(&mut ctx, &[&name])?;
    let train = ctx.corpus(&ctx.cfg.paths.corpus.clone(), "corpus")?;
    let test = ctx.corpus(&ctx.cfg.paths.test_corpus.clone(), "test-corpus")?;
    let out = ctx.output("sufficiency.json")?;
    let e = explainer(&name, model.as_ref(), &ctx.cfg)?;
    let report = sufficiency_test(&ctx.task, &e, &train, &test, ctx.cfg.eval.k_fraction, &ctx.cfg.classifier)?;
    write_json(&out, &report)?;
    ctx.finish(serde_json::to_value(&report).map_err(stylex::Error::from)?, &[out])
}

fn eval_plausibility(common: &Common, args: &ExplainerArgs) -> Result<()> {
    let mut ctx = Ctx::new("eval-plausibility", common, |cfg| apply_explainer_args(cfg, args))?;
    let name = ctx.cfg.eval.explainer.clone();
    let model = model_for(&mut ctx, &[&name])?;
    let test = ctx.corpus(&ctx.cfg.paths.test_corpus.clone(), "test-corpus")?;
    let lexicon = match ctx.optional(&ctx.cfg.paths.lexicon.clone(), "lexicon")? {
        Some(path) => Some(load_lexicon(path)?),
        None => None,
    };
    let out = ctx.output("plausibility.json")?;
    let e = explainer(&name, model.as_ref(), &ctx.cfg)?;
    let report = plausibility(&ctx.task, &e, &test, lexicon.as_ref(), ctx.cfg.eval.k_fraction)?;
    write_json(&out, &report)?;
    ctx.finish(serde_json::to_value(&report).map_err(stylex::Error::from)?, &[out])
}

fn eval_overlap(common: &Common, args: &ExplainerArgs) -> Result<()> {
    let mut ctx = Ctx::new("eval-overlap", common, |cfg| apply_explainer_args(cfg, args))?;
    let name = ctx.cfg.eval.explainer.clone();
    let model = model_for(&mut ctx, &[&name])?;
    let corpus = ctx.corpus(&ctx.cfg.paths.corpus.clone(), "corpus")?;
    let lexicon = load_lexicon(ctx.require(&ctx.cfg.paths.lexicon.clone(), "lexicon")?)?;
    let out = ctx.output("overlap.json")?;
    let e = explainer(&name, model.as_ref(), &ctx.cfg)?;
    let k_fraction = ctx.cfg.eval.k_fraction;
    let overlap = lexicon_overlap(&e, &corpus, &lexicon, k_fraction, ctx.task.positive_label())?;
    let report = json!({
        "style": ctx.task.name,
        "explainer": name,
        "lexicon": lexicon.style_name,
        "k_fraction": k_fraction,
        "overlap_percent": overlap,
    });
    write_json(&out, &report)?;
    ctx.finish(report, &[out])
}

fn export_pairs(common: &Common, n: Option<usize>) -> Result<()> {
    let mut ctx = Ctx::new("export-pairs", common, |cfg| {
        if let Some(n) = n {
            cfg.eval.pairs_per_style = n;
        }
    })?;
    let [a, b] = ctx.cfg.eval.pair_explainers.clone();
    let model = model_for(&mut ctx, &[&a, &b])?;
    let corpus = ctx.corpus(&ctx.cfg.paths.test_corpus.clone(), "test-corpus")?;
    let take = ctx.cfg.eval.pairs_per_style.min(corpus.len());
    let (pairs_path, key_path) = (ctx.output("pairs.jsonl")?, ctx.output("pairs_key.json")?);
    let (ea, eb) = (explainer(&a, model.as_ref(), &ctx.cfg)?, explainer(&b, model.as_ref(), &ctx.cfg)?);
    let (records, entries) = export_comparison_pairs(&ctx.task.name, &ea, &eb, &corpus[..take], ctx.cfg.seed)?;
    let key = write_pairs(&pairs_path, &key_path, &records, entries)?;
    let metrics = json!({ "records": records.len(), "pairs_sha256": key.pairs_sha256 });
    ctx.finish(metrics, &[pairs_path, key_path])
}

/// Human scores on the positive channel, scaled like exported highlights.
fn human_row(task: &StyleTask, sentence: &AnnotatedSentence) -> Result<Option<Vec<f64>>> {
    let Some(WordScores::Signed(scores)) = &sentence.word_scores else {
        return Ok(None);
    };
    let positive: Vec<f64> = scores
        .iter()
        .map(|&s| score_to_target(s, task.d_l_word).map(|t| signed_score(&t)))
        .collect::<stylex::Result<_>>()?;
    Ok(Some(max_normalize(&positive)))
}

fn render(common: &Common, with_baseline: bool) -> Result<()> {
    let mut ctx = Ctx::new("render-html", common, |_| {})?;
    let model = ctx.model()?;
    let corpus = ctx.corpus(&ctx.cfg.paths.corpus.clone(), "corpus")?;
    let out = ctx.output("explanations.html")?;
    let mut items = Vec::with_capacity(corpus.len());
    for s in &corpus {
        let e = model.explain(s)?;
        let mut rows = Vec::new();
        if let Some(human) = human_row(&ctx.task, s)? {
            rows.push((Source::Human, human));
        }
        rows.push((Source::Model, e.positive_scores(&model.task)));
        if with_baseline {
            let (ig, _) = attribute_sentence(&model, s, ctx.task.positive_label(), ctx.cfg.eval.ig_steps)?;
            rows.push((Source::Baseline, max_normalize(&ig.scores)));
        }
        items.push(RenderItem {
            id: s.id.clone(),
            words: s.words.clone(),
            caption: Some(format!(
                "{}: {} ({:.2})",
                s.id, model.task.sentence_labels[e.predicted_label], e.label_probability
            )),
            rows,
        });
    }
    write_html(&out, &items)?;
    ctx.finish(json!({ "sentences": items.len(), "baseline": with_baseline }), &[out])
}

fn make_synthetic(common: &Common, n: usize, test_n: usize, seed_size: usize) -> Result<()> {
    let ctx = Ctx::new("make-synthetic", common, |_| {})?;
    if seed_size > n || seed_size < 2 {
        return Err(CliError::Usage(format!("--seed-size must lie in 2..={n}, got {seed_size}")));
    }
    let train = make_synthetic_corpus(&ctx.task, &ctx.cfg.synthetic, n, ctx.cfg.seed)?;
    let test = make_synthetic_corpus(&ctx.task, &ctx.cfg.synthetic, test_n, ctx.cfg.seed.wrapping_add(1))?;
    let unlabeled: Vec<AnnotatedSentence> = train[seed_size..]
        .iter()
        .map(|s| AnnotatedSentence::unscored(s.id.clone(), &s.text, s.sentence_label))
        .collect();
    let files = [
        ("train.jsonl", &train[..]),
        ("seed.jsonl", &train[..seed_size]),
        ("unlabeled.jsonl", &unlabeled[..]),
        ("test.jsonl", &test[..]),
    ];
    let mut outputs = Vec::new();
    for (name, sentences) in files {
        let path = ctx.output(name)?;
        write_corpus(&path, sentences)?;
        outputs.push(path);
    }
    let share = |c: &[AnnotatedSentence]| c.iter().filter(|s| s.sentence_label == 0).count() as f64 / c.len() as f64;
    let metrics = json!({
        "train": train.len(),
        "seed": seed_size,
        "unlabeled": unlabeled.len(),
        "test": test.len(),
        "train_positive_share": share(&train),
        "test_positive_share": share(&test),
    });
    ctx.finish(metrics, &outputs)
}
