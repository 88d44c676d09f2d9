//! Experiment configuration: a JSON file plus command-line overrides.
//!
//! Every field of the file is optional; flags are applied on top and the
//! merged result is validated into an [`ExperimentConfig`]. Flags win.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use tablegen_core::dataset::{CorpusSchema, Split};
use tablegen_core::metrics::Averaging;
use tablegen_core::prompt::StrategyKind;
use tablegen_core::refine::{FeedbackGranularity, RefinementConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),
    #[error("cannot read config file {path}: {source}")]
    Unreadable { path: PathBuf, source: std::io::Error },
}

fn invalid(msg: impl Into<String>) -> ConfigError {
    ConfigError::ConfigInvalid(msg.into())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Http,
    Replay,
}

impl std::str::FromStr for BackendKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "http" => Ok(BackendKind::Http),
            "replay" => Ok(BackendKind::Replay),
            other => Err(format!("unknown backend {other:?} (expected http or replay)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendConfig {
    pub kind: BackendKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
    pub model: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transcript: Option<PathBuf>,
    pub temperature: f64,
    pub max_output_tokens: u32,
    pub timeout_secs: u64,
}

/// Validated, fully resolved configuration. Echoed into the run manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub corpus: PathBuf,
    pub schema: CorpusSchema,
    pub strategy: StrategyKind,
    /// Example supplying the demonstration for 1-shot strategies. It is
    /// excluded from the evaluated examples.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shot_example_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub refinement: Option<RefinementConfig>,
    pub backend: BackendConfig,
    pub workers: usize,
    pub out_dir: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub example_ids: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub limit: Option<usize>,
    pub averaging: Averaging,
    /// Directory overriding the built-in prompt templates.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub templates_dir: Option<PathBuf>,
}

/// The config file as written by users: everything optional.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub corpus: Option<PathBuf>,
    pub schema: Option<CorpusSchema>,
    pub strategy: Option<String>,
    pub shot_example_id: Option<String>,
    /// `none`, `table`, `row` or `cell`.
    pub feedback_level: Option<String>,
    pub max_iterations: Option<u32>,
    pub early_stop: Option<bool>,
    pub cell_sees_passage: Option<bool>,
    pub domain_feedback: Option<String>,
    pub refine_parallelism: Option<usize>,
    pub backend: Option<String>,
    pub endpoint: Option<String>,
    pub model: Option<String>,
    pub transcript: Option<PathBuf>,
    pub temperature: Option<f64>,
    pub max_output_tokens: Option<u32>,
    pub timeout_secs: Option<u64>,
    pub workers: Option<usize>,
    pub out: Option<PathBuf>,
    pub example_ids: Option<Vec<String>>,
    pub split: Option<Split>,
    pub limit: Option<usize>,
    pub averaging: Option<Averaging>,
    pub templates_dir: Option<PathBuf>,
}

/// Values given on the command line.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub corpus: Option<PathBuf>,
    pub schema: Option<CorpusSchema>,
    pub strategy: Option<String>,
    pub feedback_level: Option<String>,
    pub max_iterations: Option<u32>,
    pub backend: Option<String>,
    pub endpoint: Option<String>,
    pub model: Option<String>,
    pub transcript: Option<PathBuf>,
    pub workers: Option<usize>,
    pub limit: Option<usize>,
    pub out: Option<PathBuf>,
}

impl ConfigFile {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Unreadable { path: path.to_path_buf(), source })?;
        serde_json::from_str(&text).map_err(|e| invalid(format!("{}: {e}", path.display())))
    }

    pub fn apply(mut self, o: Overrides) -> Self {
        macro_rules! take {
            ($($field:ident => $target:ident),* $(,)?) => {
                $(if o.$field.is_some() { self.$target = o.$field; })*
            };
        }
        take!(
            corpus => corpus,
            schema => schema,
            strategy => strategy,
            feedback_level => feedback_level,
            max_iterations => max_iterations,
            backend => backend,
            endpoint => endpoint,
            model => model,
            transcript => transcript,
            workers => workers,
            limit => limit,
            out => out,
        );
        self
    }

    pub fn resolve(self) -> Result<ExperimentConfig, ConfigError> {
        let corpus = self.corpus.ok_or_else(|| invalid("a corpus path is required"))?;
        let strategy = match &self.strategy {
            Some(s) => s.parse::<StrategyKind>().map_err(invalid)?,
            None => StrategyKind::SubtaskGuided,
        };

        let refinement = match self.feedback_level.as_deref().map(str::to_ascii_lowercase).as_deref() {
            None | Some("none") => {
                if self.max_iterations.is_some() {
                    return Err(invalid("max_iterations given without a feedback level"));
                }
                None
            }
            Some(level) => {
                let granularity = level.parse::<FeedbackGranularity>().map_err(invalid)?;
                let mut r = RefinementConfig::new(granularity, self.max_iterations.unwrap_or(2));
                if let Some(v) = self.early_stop {
                    r.early_stop_on_no_change = v;
                }
                if let Some(v) = self.cell_sees_passage {
                    r.cell_sees_passage = v;
                }
                if let Some(v) = self.domain_feedback {
                    r.domain_feedback = v;
                }
                if let Some(v) = self.refine_parallelism {
                    r.parallelism = v;
                }
                r.validate().map_err(|e| invalid(e.to_string()))?;
                if r.parallelism == 0 {
                    return Err(invalid("refine_parallelism must be at least 1"));
                }
                Some(r)
            }
        };

        let kind = match &self.backend {
            Some(b) => b.parse::<BackendKind>().map_err(invalid)?,
            None if self.transcript.is_some() && self.endpoint.is_none() => BackendKind::Replay,
            None => BackendKind::Http,
        };
        let model = match (kind, self.model) {
            (_, Some(m)) if !m.trim().is_empty() => m,
            (BackendKind::Http, _) => return Err(invalid("the http backend requires a model")),
            (BackendKind::Replay, _) => "default".to_string(),
        };
        match kind {
            BackendKind::Http if self.endpoint.as_deref().is_none_or(|e| e.trim().is_empty()) => {
                return Err(invalid("the http backend requires an endpoint"));
            }
            BackendKind::Replay if self.transcript.is_none() => {
                return Err(invalid("the replay backend requires a transcript path"));
            }
            _ => {}
        }
        let temperature = self.temperature.unwrap_or(0.0);
        if !(0.0..=2.0).contains(&temperature) {
            return Err(invalid(format!("temperature {temperature} outside [0, 2]")));
        }
        let backend = BackendConfig {
            kind,
            endpoint: self.endpoint,
            model,
            transcript: self.transcript,
            temperature,
            max_output_tokens: self.max_output_tokens.unwrap_or(2048),
            timeout_secs: self.timeout_secs.unwrap_or(120),
        };

        let workers = self.workers.unwrap_or(1);
        if workers == 0 {
            return Err(invalid("workers must be at least 1"));
        }
        if self.limit == Some(0) {
            return Err(invalid("limit must be at least 1"));
        }

        Ok(ExperimentConfig {
            corpus,
            schema: self.schema.unwrap_or(CorpusSchema::Generic),
            strategy,
            shot_example_id: self.shot_example_id,
            refinement,
            backend,
            workers,
            out_dir: self.out.unwrap_or_else(|| PathBuf::from("runs")),
            example_ids: self.example_ids,
            split: self.split,
            limit: self.limit,
            averaging: self.averaging.unwrap_or_default(),
            templates_dir: self.templates_dir,
        })
    }
}

impl ExperimentConfig {
    /// Loads the optional config file, applies flag overrides, validates.
    pub fn from_sources(file: Option<&Path>, overrides: Overrides) -> Result<Self, ConfigError> {
        let base = match file {
            Some(p) => ConfigFile::load(p)?,
            None => ConfigFile::default(),
        };
        base.apply(overrides).resolve()
    }

    /// Replay configuration reading `transcript`, otherwise identical.
    pub fn replaying(&self, transcript: PathBuf) -> Self {
        let mut c = self.clone();
        c.backend.kind = BackendKind::Replay;
        c.backend.transcript = Some(transcript);
        c
    }
}
