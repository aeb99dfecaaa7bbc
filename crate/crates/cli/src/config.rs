//! Run configuration: a TOML file merged with command-line overrides.

use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use demoselect::analysis::ComplexityMetric;
use demoselect::prompt::Order;
use demoselect::trainer::{RewardMetric, TrainConfig};
use demoselect::TokenizeMode;
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const DEFAULT_HASH_DIM: usize = 256;
pub const DEFAULT_JOBS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    #[default]
    Sim,
    Http,
}

/// Corpus file locations. Unset split paths default to
/// `<dir>/<split>.jsonl` when `dir` is set.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusPaths {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub candidates: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dev: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub annotations: Option<PathBuf>,
}

impl CorpusPaths {
    pub fn resolve(&self, split: &str) -> Option<PathBuf> {
        let explicit = match split {
            "candidates" => &self.candidates,
            "train" => &self.train,
            "dev" => &self.dev,
            "test" => &self.test,
            _ => &None,
        };
        explicit
            .clone()
            .or_else(|| self.dir.as_ref().map(|d| d.join(format!("{split}.jsonl"))))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub corpus: CorpusPaths,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub vectors: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hash_dim: Option<usize>,
    pub hash_seed: u64,
    pub backend: Backend,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub generator_url: Option<String>,
    pub max_in_flight: usize,
    pub max_new_tokens: usize,
    pub temperature: f64,
    pub timeout_secs: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub template: Option<PathBuf>,
    pub order: Order,
    pub tokenize: TokenizeMode,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stem_map: Option<PathBuf>,
    pub training: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            corpus: CorpusPaths::default(),
            vectors: None,
            hash_dim: None,
            hash_seed: 0,
            backend: Backend::Sim,
            generator_url: None,
            max_in_flight: 4,
            max_new_tokens: 64,
            temperature: 0.0,
            timeout_secs: 60.0,
            template: None,
            order: Order::Sampling,
            tokenize: TokenizeMode::Word,
            stem_map: None,
            training: TrainConfig {
                jobs: DEFAULT_JOBS,
                ..TrainConfig::default()
            },
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::usage("io", format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| {
            let msg = e.to_string().replace('\n', " ");
            CliError::usage("config", format!("{}: {}", path.display(), msg.trim()))
        })
    }

    /// Checks cross-field invariants and fills derived values.
    pub fn finish(mut self) -> Result<Self, CliError> {
        if self.vectors.is_some() && self.hash_dim.is_some() {
            return Err(CliError::usage(
                "config",
                "vectors and hash_dim are mutually exclusive embedding sources",
            ));
        }
        if self.vectors.is_none() && self.hash_dim.is_none() {
            self.hash_dim = Some(DEFAULT_HASH_DIM);
        }
        match (self.backend, &self.generator_url) {
            (Backend::Http, None) => {
                return Err(CliError::usage("config", "backend http requires generator_url"));
            }
            (Backend::Sim, Some(_)) => {
                return Err(CliError::usage("config", "generator_url is only valid with backend http"));
            }
            _ => {}
        }
        if self.max_in_flight == 0 {
            return Err(CliError::usage("config", "max_in_flight must be >= 1"));
        }
        if !(self.timeout_secs > 0.0 && self.timeout_secs.is_finite()) {
            return Err(CliError::usage("config", "timeout_secs must be > 0"));
        }
        self.training.seed = self.seed;
        self.training.validate().map_err(CliError::from)?;
        Ok(self)
    }
}

/// Flags shared by every subcommand that loads a corpus.
#[derive(Debug, Clone, Default, Args)]
pub struct CommonArgs {
    /// TOML run configuration; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Directory holding candidates.jsonl, train.jsonl, dev.jsonl and test.jsonl.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long, value_name = "PATH")]
    pub candidates: Option<PathBuf>,
    #[arg(long, value_name = "PATH")]
    pub train: Option<PathBuf>,
    #[arg(long, value_name = "PATH")]
    pub dev: Option<PathBuf>,
    #[arg(long, value_name = "PATH")]
    pub test: Option<PathBuf>,
    /// Annotation sidecar with per-case counts.
    #[arg(long, value_name = "PATH")]
    pub annotations: Option<PathBuf>,
    #[arg(long, value_name = "PATH", conflicts_with = "hash_dim")]
    pub vectors: Option<PathBuf>,
    #[arg(long)]
    pub hash_dim: Option<usize>,
    #[arg(long)]
    pub hash_seed: Option<u64>,
    #[arg(long, value_enum)]
    pub backend: Option<Backend>,
    #[arg(long)]
    pub generator_url: Option<String>,
    #[arg(long)]
    pub max_in_flight: Option<usize>,
    #[arg(long)]
    pub max_new_tokens: Option<usize>,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub timeout_secs: Option<f64>,
    /// JSON prompt template overriding the instruction and labels.
    #[arg(long, value_name = "PATH")]
    pub template: Option<PathBuf>,
    #[arg(long, value_parser = parse_order)]
    pub order: Option<Order>,
    #[arg(long, value_parser = parse_tokenize)]
    pub tokenize: Option<TokenizeMode>,
    /// JSONL {token, stem} map applied before BM25 indexing.
    #[arg(long, value_name = "PATH")]
    pub stem_map: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub shots: Option<usize>,
    #[arg(long)]
    pub jobs: Option<usize>,
}

/// Training hyperparameters.
#[derive(Debug, Clone, Default, Args)]
pub struct TrainArgs {
    #[arg(long, value_parser = parse_metric)]
    pub reward_metric: Option<RewardMetric>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub baseline_samples: Option<usize>,
    #[arg(long)]
    pub early_stop_patience: Option<usize>,
}

fn parse_order(s: &str) -> Result<Order, String> {
    s.parse().map_err(|e: demoselect::Error| e.to_string())
}

fn parse_tokenize(s: &str) -> Result<TokenizeMode, String> {
    match s {
        "word" => Ok(TokenizeMode::Word),
        "char" => Ok(TokenizeMode::Char),
        _ => Err(format!("unknown tokenize mode {s:?} (word|char)")),
    }
}

fn parse_metric(s: &str) -> Result<RewardMetric, String> {
    s.parse().map_err(|e: demoselect::Error| e.to_string())
}

pub fn parse_complexity(s: &str) -> Result<ComplexityMetric, String> {
    s.parse().map_err(|e: demoselect::Error| e.to_string())
}

macro_rules! set {
    ($dst:expr, $src:expr) => {
        if let Some(v) = $src.clone() {
            $dst = v;
        }
    };
    (opt $dst:expr, $src:expr) => {
        if $src.is_some() {
            $dst = $src.clone();
        }
    };
}

impl CommonArgs {
    /// Loads the config file (if any) and applies flag overrides.
    pub fn resolve(&self, train: Option<&TrainArgs>) -> Result<RunConfig, CliError> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::from_file(path)?,
            None => RunConfig::default(),
        };
        set!(opt cfg.corpus.dir, self.corpus);
        set!(opt cfg.corpus.candidates, self.candidates);
        set!(opt cfg.corpus.train, self.train);
        set!(opt cfg.corpus.dev, self.dev);
        set!(opt cfg.corpus.test, self.test);
        set!(opt cfg.corpus.annotations, self.annotations);
        // An embedding flag replaces whichever source the file chose.
        if self.vectors.is_some() {
            cfg.vectors = self.vectors.clone();
            cfg.hash_dim = None;
        }
        if self.hash_dim.is_some() {
            cfg.hash_dim = self.hash_dim;
            cfg.vectors = None;
        }
        set!(cfg.hash_seed, self.hash_seed);
        set!(cfg.backend, self.backend);
        set!(opt cfg.generator_url, self.generator_url);
        set!(cfg.max_in_flight, self.max_in_flight);
        set!(cfg.max_new_tokens, self.max_new_tokens);
        set!(cfg.temperature, self.temperature);
        set!(cfg.timeout_secs, self.timeout_secs);
        set!(opt cfg.template, self.template);
        set!(cfg.order, self.order);
        set!(cfg.tokenize, self.tokenize);
        set!(opt cfg.stem_map, self.stem_map);
        set!(cfg.seed, self.seed);
        set!(cfg.training.shots, self.shots);
        set!(cfg.training.jobs, self.jobs);
        if let Some(t) = train {
            set!(cfg.training.reward_metric, t.reward_metric);
            set!(cfg.training.epochs, t.epochs);
            set!(cfg.training.batch_size, t.batch_size);
            set!(cfg.training.learning_rate, t.learning_rate);
            set!(cfg.training.baseline_samples, t.baseline_samples);
            set!(cfg.training.early_stop_patience, t.early_stop_patience);
        }
        cfg.finish()
    }
}
