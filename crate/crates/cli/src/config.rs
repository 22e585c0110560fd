//! Declarative run configuration: a TOML file, then the output-dir
//! environment variable, then command-line flags.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use stylex::data::StyleTask;
use stylex::eval::{ClassifierConfig, SyntheticConfig, DEFAULT_K_FRACTION};
use stylex::ig::DEFAULT_STEPS;
use stylex::pipeline::PipelineConfig;

use crate::CliError;

pub const OUTPUT_DIR_ENV: &str = "STYLEX_OUTPUT_DIR";

/// A built-in style name or a full task definition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TaskSpec {
    Builtin(String),
    Custom(StyleTask),
}

impl Default for TaskSpec {
    fn default() -> Self {
        TaskSpec::Builtin("politeness".into())
    }
}

impl TaskSpec {
    pub fn resolve(&self) -> Result<StyleTask, CliError> {
        match self {
            TaskSpec::Builtin(name) => {
                StyleTask::builtin(name).ok_or_else(|| CliError::Usage(format!("unknown style `{name}`")))
            }
            TaskSpec::Custom(task) => {
                task.validate()?;
                Ok(task.clone())
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Human-annotated seed corpus.
    pub seed_corpus: Option<PathBuf>,
    /// Large or training corpus, depending on the command.
    pub corpus: Option<PathBuf>,
    pub pseudo_corpus: Option<PathBuf>,
    pub test_corpus: Option<PathBuf>,
    pub lexicon: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub k_fraction: f64,
    pub ig_steps: usize,
    pub normalize_ig: bool,
    /// Explainer for single-explainer evaluations.
    pub explainer: String,
    /// The two sides of exported comparison pairs.
    pub pair_explainers: [String; 2],
    pub pairs_per_style: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            k_fraction: DEFAULT_K_FRACTION,
            ig_steps: DEFAULT_STEPS,
            normalize_ig: false,
            explainer: "stylex".into(),
            pair_explainers: ["stylex".into(), "integrated_gradients".into()],
            pairs_per_style: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub task: TaskSpec,
    /// Every random choice in a command derives from this seed.
    pub seed: u64,
    pub output_dir: PathBuf,
    pub paths: Paths,
    pub pipeline: PipelineConfig,
    pub classifier: ClassifierConfig,
    pub synthetic: SyntheticConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            task: TaskSpec::default(),
            seed: 42,
            output_dir: PathBuf::from("stylex-out"),
            paths: Paths::default(),
            pipeline: PipelineConfig::default(),
            classifier: ClassifierConfig::default(),
            synthetic: SyntheticConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))
    }

    /// Pushes the top-level seed into every component.
    pub fn propagate_seed(&mut self) {
        self.pipeline.seed = self.seed;
        self.classifier.seed = self.seed;
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).unwrap_or_else(|e| format!("# unprintable config: {e}\n"))
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_toml() {
        let cfg = RunConfig::default();
        let back: RunConfig = toml::from_str(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn partial_files_fill_defaults() {
        let cfg: RunConfig = toml::from_str("task = \"anger\"\nseed = 7\n[pipeline]\nseed_epochs = 3\n").unwrap();
        assert_eq!(cfg.task.resolve().unwrap().d_l_word, 1);
        assert_eq!(cfg.pipeline.seed_epochs, 3);
        assert_eq!(cfg.pipeline.joint_epochs, 5);
        assert!(toml::from_str::<RunConfig>("bogus = 1").is_err());
    }

    #[test]
    fn custom_tasks_are_accepted() {
        let text = "[task]\nname = \"formality\"\nd_l_word = 2\nsentence_labels = [\"formal\", \"informal\"]\npositive_word_classes = [0]\n";
        let cfg: RunConfig = toml::from_str(text).unwrap();
        assert_eq!(cfg.task.resolve().unwrap().name, "formality");
    }
}
