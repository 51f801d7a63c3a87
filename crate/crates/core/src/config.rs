use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::decimal::UnitDecimal;

pub const DEFAULT_CONFIDENCE_THRESHOLD: UnitDecimal = match UnitDecimal::from_hundredths(75) {
    Some(v) => v,
    None => unreachable!(),
};
pub const DEFAULT_SIMILARITY_THRESHOLD: UnitDecimal = match UnitDecimal::from_hundredths(90) {
    Some(v) => v,
    None => unreachable!(),
};
pub const DEFAULT_AVG_WORDS: u32 = 716;
pub const DEFAULT_TOPIC_DEPTH_CAP: u32 = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    GeneralDomain,
    TopicFocused,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Persona {
    #[default]
    ScientificNeutral,
    LeftLeaning,
    Conservative,
}

impl Persona {
    pub const ALL: [Persona; 3] = [Persona::ScientificNeutral, Persona::LeftLeaning, Persona::Conservative];

    pub fn as_str(self) -> &'static str {
        match self {
            Persona::ScientificNeutral => "scientific_neutral",
            Persona::LeftLeaning => "left_leaning",
            Persona::Conservative => "conservative",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    #[default]
    Baseline,
    Calibrated,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ExecutionMode {
    #[default]
    Online,
    Batch,
}

fn default_max_retries() -> u32 {
    3
}
fn default_concurrency_cap() -> u32 {
    16
}
fn default_workers() -> u32 {
    4
}
fn default_ner_batch_size() -> u32 {
    50
}
fn default_backoff_base_ms() -> u64 {
    500
}
fn default_backoff_cap_ms() -> u64 {
    60_000
}
fn default_excerpt_chars() -> u32 {
    500
}
fn default_max_tokens() -> u32 {
    4096
}

/// Everything a materialization run needs. Parsed from a single JSON
/// document; optional thresholds are filled by [`validate_config`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub mode: Mode,
    pub seed_subject: String,
    #[serde(default)]
    pub root_subject: Option<String>,
    #[serde(default)]
    pub persona: Persona,
    #[serde(default)]
    pub strategy: Strategy,
    #[serde(default)]
    pub self_grounding: bool,
    #[serde(default)]
    pub confidence_threshold: Option<UnitDecimal>,
    #[serde(default)]
    pub similarity_threshold: Option<UnitDecimal>,
    #[serde(default)]
    pub avg_words_per_article: Option<u32>,
    #[serde(default)]
    pub depth_cap: Option<u32>,
    #[serde(default)]
    pub article_budget: Option<u64>,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    #[serde(default = "default_concurrency_cap")]
    pub global_concurrency_cap: u32,
    #[serde(default)]
    pub execution_mode: ExecutionMode,
    #[serde(default)]
    pub random_seed: u64,
    #[serde(default = "default_workers")]
    pub elicitation_workers: u32,
    #[serde(default = "default_workers")]
    pub ner_workers: u32,
    #[serde(default = "default_ner_batch_size")]
    pub ner_batch_size: u32,
    #[serde(default = "default_backoff_base_ms")]
    pub backoff_base_ms: u64,
    #[serde(default = "default_backoff_cap_ms")]
    pub backoff_cap_ms: u64,
    #[serde(default = "default_excerpt_chars")]
    pub arbitration_excerpt_chars: u32,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
}

impl RunConfig {
    /// A general-domain configuration with every default applied.
    pub fn general(seed_subject: impl Into<String>) -> Self {
        RunConfig {
            mode: Mode::GeneralDomain,
            seed_subject: seed_subject.into(),
            root_subject: None,
            persona: Persona::default(),
            strategy: Strategy::default(),
            self_grounding: false,
            confidence_threshold: None,
            similarity_threshold: None,
            avg_words_per_article: None,
            depth_cap: None,
            article_budget: None,
            max_retries: default_max_retries(),
            global_concurrency_cap: default_concurrency_cap(),
            execution_mode: ExecutionMode::default(),
            random_seed: 0,
            elicitation_workers: default_workers(),
            ner_workers: default_workers(),
            ner_batch_size: default_ner_batch_size(),
            backoff_base_ms: default_backoff_base_ms(),
            backoff_cap_ms: default_backoff_cap_ms(),
            arbitration_excerpt_chars: default_excerpt_chars(),
            max_tokens: default_max_tokens(),
        }
    }

    /// A topic-focused configuration rooted at `root_subject`.
    pub fn topic(seed_subject: impl Into<String>, root_subject: impl Into<String>) -> Self {
        RunConfig {
            mode: Mode::TopicFocused,
            root_subject: Some(root_subject.into()),
            ..RunConfig::general(seed_subject)
        }
    }

    pub fn confidence_threshold(&self) -> UnitDecimal {
        self.confidence_threshold.unwrap_or(DEFAULT_CONFIDENCE_THRESHOLD)
    }

    pub fn similarity_threshold(&self) -> UnitDecimal {
        self.similarity_threshold.unwrap_or(DEFAULT_SIMILARITY_THRESHOLD)
    }

    pub fn avg_words_per_article(&self) -> u32 {
        self.avg_words_per_article.unwrap_or(DEFAULT_AVG_WORDS)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io(path.display().to_string(), e))?;
        serde_json::from_str(&text).map_err(ConfigError::Parse)
    }

    /// SHA-256 over the canonical JSON rendering of the config.
    pub fn checksum(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("topic_focused mode requires root_subject")]
    MissingRoot,
    #[error("general_domain mode must not set root_subject")]
    UnexpectedRoot,
    #[error("seed_subject is empty")]
    EmptySeed,
    #[error("{0} must be in (0, 1], got {1}")]
    ThresholdRange(&'static str, UnitDecimal),
    #[error("{0} must be positive")]
    ZeroValue(&'static str),
    #[error("cannot read config {0}: {1}")]
    Io(String, #[source] std::io::Error),
    #[error("cannot parse config: {0}")]
    Parse(#[source] serde_json::Error),
}

/// Checks a config for consistency and fills defaults.
pub fn validate_config(mut config: RunConfig) -> Result<RunConfig, ConfigError> {
    match (config.mode, &config.root_subject) {
        (Mode::TopicFocused, None) => return Err(ConfigError::MissingRoot),
        (Mode::TopicFocused, Some(root)) if root.trim().is_empty() => return Err(ConfigError::MissingRoot),
        (Mode::GeneralDomain, Some(_)) => return Err(ConfigError::UnexpectedRoot),
        _ => {}
    }
    if crate::canonical::canonicalize(&config.seed_subject).is_empty() {
        return Err(ConfigError::EmptySeed);
    }

    let confidence = config.confidence_threshold();
    if confidence == UnitDecimal::ZERO {
        return Err(ConfigError::ThresholdRange("confidence_threshold", confidence));
    }
    let similarity = config.similarity_threshold();
    if similarity == UnitDecimal::ZERO {
        return Err(ConfigError::ThresholdRange("similarity_threshold", similarity));
    }
    config.confidence_threshold = Some(confidence);
    config.similarity_threshold = Some(similarity);
    config.avg_words_per_article = Some(config.avg_words_per_article());

    if config.avg_words_per_article == Some(0) {
        return Err(ConfigError::ZeroValue("avg_words_per_article"));
    }
    if config.article_budget == Some(0) {
        return Err(ConfigError::ZeroValue("article_budget"));
    }
    let positives = [
        ("max_retries", config.max_retries as u64),
        ("global_concurrency_cap", config.global_concurrency_cap as u64),
        ("elicitation_workers", config.elicitation_workers as u64),
        ("ner_workers", config.ner_workers as u64),
        ("ner_batch_size", config.ner_batch_size as u64),
        ("max_tokens", config.max_tokens as u64),
    ];
    for (name, value) in positives {
        if value == 0 {
            return Err(ConfigError::ZeroValue(name));
        }
    }
    if config.mode == Mode::TopicFocused && config.depth_cap.is_none() {
        config.depth_cap = Some(DEFAULT_TOPIC_DEPTH_CAP);
    }
    Ok(config)
}
