use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Gateway, GenerationRequest};
use crate::config::RunConfig;
use crate::decimal::UnitDecimal;
use crate::prompts::{PromptError, PromptStage, TemplateSet};
use crate::types::Subject;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fact {
    pub predicate: String,
    pub object: String,
    pub confidence: UnitDecimal,
    /// Set when the confidence is strictly below the run's threshold.
    pub flagged: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FactSheet {
    pub summary: String,
    pub aliases: Vec<String>,
    pub facts: Vec<Fact>,
}

impl FactSheet {
    /// Text appended to the elicitation prompt.
    pub fn render_block(&self) -> String {
        let mut out = String::from("Fact sheet (facts marked [uncertain] need care):\n");
        out.push_str(&format!("Summary: {}\n", self.summary));
        if !self.aliases.is_empty() {
            out.push_str(&format!("Aliases: {}\n", self.aliases.join(", ")));
        }
        for fact in &self.facts {
            let mark = if fact.flagged { " [uncertain]" } else { "" };
            out.push_str(&format!("- {}: {} ({}){mark}\n", fact.predicate, fact.object, fact.confidence));
        }
        out
    }
}

#[derive(Debug, Error)]
pub enum GroundingError {
    #[error("self-grounding is disabled")]
    Disabled,
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("fact sheet request failed: {0}")]
    Backend(String),
    #[error("fact sheet reply is not valid: {0}")]
    Parse(String),
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawFact {
    predicate: String,
    object: String,
    confidence: f64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSheet {
    summary: String,
    #[serde(default)]
    aliases: Vec<String>,
    #[serde(default)]
    facts: Vec<RawFact>,
}

/// Asks the backend for a fact sheet about `subject`. Callers treat any
/// error as "no grounding" and carry on.
pub fn self_ground(
    gateway: &Gateway,
    templates: &TemplateSet,
    subject: &Subject,
    config: &RunConfig,
) -> Result<FactSheet, GroundingError> {
    if !config.self_grounding {
        return Err(GroundingError::Disabled);
    }
    let bundle = templates.render(PromptStage::SelfGrounding, config, subject, &BTreeMap::new())?;
    let request = GenerationRequest::new(bundle, config.max_tokens, format!("ground:{}", subject.canonical_key));
    let result = gateway.complete(&request);
    let text = result
        .ok_text()
        .ok_or_else(|| GroundingError::Backend(result.last_error.clone().unwrap_or_default()))?;
    parse_fact_sheet(text, config.confidence_threshold())
}

pub fn parse_fact_sheet(text: &str, threshold: UnitDecimal) -> Result<FactSheet, GroundingError> {
    let raw: RawSheet = serde_json::from_str(text.trim()).map_err(|e| GroundingError::Parse(e.to_string()))?;
    let facts = raw
        .facts
        .into_iter()
        .map(|f| {
            let confidence = UnitDecimal::from_f64(f.confidence)
                .map_err(|e| GroundingError::Parse(format!("fact {:?}: {e}", f.predicate)))?;
            Ok(Fact { predicate: f.predicate, object: f.object, flagged: confidence < threshold, confidence })
        })
        .collect::<Result<_, GroundingError>>()?;
    Ok(FactSheet { summary: raw.summary, aliases: raw.aliases, facts })
}
