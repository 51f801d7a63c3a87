//! Prompt rendering.
//!
//! Templates live as text assets under `templates/`, one file per
//! `(stage, mode, strategy)` triple plus one file per persona. A file name
//! is `<stage>.<mode|any>.<strategy|any>.txt`; the lookup falls back to
//! `any` for stages that do not vary along an axis. Each file holds a
//! `[system]` section followed by a `[user]` section.
//!
//! Placeholders are written `{name}` with a lowercase identifier. Anything
//! else in braces (JSON examples, `{{Infobox}}`) is literal text. Rendering
//! is a single left-to-right pass, so substituted values are never
//! re-scanned.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::config::{Mode, Persona, RunConfig, Strategy};
use crate::types::Subject;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptStage {
    Outline,
    Elicitation,
    Ner,
    Arbitration,
    SelfGrounding,
    ClaimExtraction,
    Verdict,
}

impl PromptStage {
    pub const ALL: [PromptStage; 7] = [
        PromptStage::Outline,
        PromptStage::Elicitation,
        PromptStage::Ner,
        PromptStage::Arbitration,
        PromptStage::SelfGrounding,
        PromptStage::ClaimExtraction,
        PromptStage::Verdict,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PromptStage::Outline => "outline",
            PromptStage::Elicitation => "elicitation",
            PromptStage::Ner => "ner",
            PromptStage::Arbitration => "arbitration",
            PromptStage::SelfGrounding => "self_grounding",
            PromptStage::ClaimExtraction => "claim_extraction",
            PromptStage::Verdict => "verdict",
        }
    }

    /// Stages that carry the persona instruction in their system text.
    pub fn takes_persona(self) -> bool {
        !matches!(self, PromptStage::ClaimExtraction | PromptStage::Verdict)
    }
}

/// A fully rendered prompt.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub system_text: String,
    pub user_text: String,
    pub stage: PromptStage,
    /// File stem of the template used, e.g. `ner.topic.calibrated`.
    pub template_id: String,
    pub placeholders_filled: BTreeMap<String, String>,
}

impl PromptBundle {
    pub fn placeholder(&self, name: &str) -> Option<&str> {
        self.placeholders_filled.get(name).map(String::as_str)
    }

    pub fn is_calibrated(&self) -> bool {
        self.template_id.ends_with(".calibrated")
    }
}

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("template {template} needs placeholder {{{name}}} but no value was supplied")]
    MissingPlaceholder { template: String, name: String },
    #[error("no template for {0}")]
    MissingTemplate(String),
    #[error("template {0} lacks a [system] or [user] section")]
    Malformed(String),
    #[error("cannot read template {0}: {1}")]
    Io(String, #[source] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct Template {
    system: String,
    user: String,
}

impl Template {
    fn parse(id: &str, text: &str) -> Result<Self, PromptError> {
        let body = text.strip_prefix("[system]\n").ok_or_else(|| PromptError::Malformed(id.to_string()))?;
        let (system, user) = body.split_once("\n[user]\n").ok_or_else(|| PromptError::Malformed(id.to_string()))?;
        Ok(Template { system: system.trim_end().to_string(), user: user.trim_end().to_string() })
    }
}

macro_rules! builtin_files {
    ($($name:literal),* $(,)?) => {
        &[$(($name, include_str!(concat!("../templates/", $name)))),*]
    };
}

const BUILTIN: &[(&str, &str)] = builtin_files!(
    "arbitration.any.any.txt",
    "claim_extraction.any.any.txt",
    "elicitation.general.baseline.txt",
    "elicitation.general.calibrated.txt",
    "elicitation.topic.baseline.txt",
    "elicitation.topic.calibrated.txt",
    "ner.general.baseline.txt",
    "ner.general.calibrated.txt",
    "ner.topic.baseline.txt",
    "ner.topic.calibrated.txt",
    "outline.general.any.txt",
    "outline.topic.any.txt",
    "persona.conservative.txt",
    "persona.left_leaning.txt",
    "persona.scientific_neutral.txt",
    "self_grounding.any.any.txt",
    "verdict.any.any.txt",
);

/// The names of every file a template directory must contain.
pub fn template_file_names() -> impl Iterator<Item = &'static str> {
    BUILTIN.iter().map(|(name, _)| *name)
}

/// Loaded templates and personas, read-only after construction.
#[derive(Clone, Debug)]
pub struct TemplateSet {
    templates: BTreeMap<String, Template>,
    personas: BTreeMap<Persona, String>,
    file_checksums: BTreeMap<String, String>,
}

impl TemplateSet {
    /// The templates compiled into the binary.
    pub fn builtin() -> Self {
        Self::from_files(BUILTIN.iter().map(|(n, t)| (n.to_string(), t.to_string())))
            .expect("built-in templates are well formed")
    }

    /// Loads every required file from `dir`.
    pub fn load_dir(dir: &Path) -> Result<Self, PromptError> {
        let mut files = Vec::new();
        for name in template_file_names() {
            let path = dir.join(name);
            let text = std::fs::read_to_string(&path).map_err(|e| PromptError::Io(path.display().to_string(), e))?;
            files.push((name.to_string(), text));
        }
        Self::from_files(files)
    }

    fn from_files(files: impl IntoIterator<Item = (String, String)>) -> Result<Self, PromptError> {
        let mut templates = BTreeMap::new();
        let mut personas = BTreeMap::new();
        let mut file_checksums = BTreeMap::new();
        for (name, text) in files {
            file_checksums.insert(name.clone(), hex::encode(Sha256::digest(text.as_bytes())));
            let stem = name.strip_suffix(".txt").unwrap_or(&name).to_string();
            if let Some(persona) = stem.strip_prefix("persona.") {
                let persona = Persona::ALL
                    .into_iter()
                    .find(|p| p.as_str() == persona)
                    .ok_or_else(|| PromptError::MissingTemplate(name.clone()))?;
                personas.insert(persona, text.trim().to_string());
            } else {
                let template = Template::parse(&stem, &text)?;
                templates.insert(stem, template);
            }
        }
        for persona in Persona::ALL {
            if !personas.contains_key(&persona) {
                return Err(PromptError::MissingTemplate(format!("persona.{}", persona.as_str())));
            }
        }
        Ok(TemplateSet { templates, personas, file_checksums })
    }

    /// SHA-256 of each template file, keyed by file name.
    pub fn file_checksums(&self) -> &BTreeMap<String, String> {
        &self.file_checksums
    }

    /// One checksum over all files.
    pub fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        for (name, sum) in &self.file_checksums {
            hasher.update(name.as_bytes());
            hasher.update(b"\0");
            hasher.update(sum.as_bytes());
            hasher.update(b"\n");
        }
        hex::encode(hasher.finalize())
    }

    /// The fixed persona instruction, identical across stages.
    pub fn persona_block(&self, persona: Persona) -> &str {
        &self.personas[&persona]
    }

    fn resolve(&self, stage: PromptStage, mode: Mode, strategy: Strategy) -> Result<(&str, &Template), PromptError> {
        let mode = match mode {
            Mode::GeneralDomain => "general",
            Mode::TopicFocused => "topic",
        };
        let strategy = match strategy {
            Strategy::Baseline => "baseline",
            Strategy::Calibrated => "calibrated",
        };
        let stage = stage.as_str();
        let candidates = [
            format!("{stage}.{mode}.{strategy}"),
            format!("{stage}.{mode}.any"),
            format!("{stage}.any.{strategy}"),
            format!("{stage}.any.any"),
        ];
        candidates
            .iter()
            .find_map(|id| self.templates.get_key_value(id.as_str()))
            .map(|(id, t)| (id.as_str(), t))
            .ok_or_else(|| PromptError::MissingTemplate(candidates[0].clone()))
    }

    /// Renders the template for `stage` under `config` for `subject`.
    ///
    /// `subject_name`, `root_subject` (topic-focused runs),
    /// `avg_words_per_article`, `confidence_threshold` and `persona_block`
    /// come from the config and subject; `context` supplies the rest
    /// (`outline_block`, `phrases_block`, ...) and may override them.
    pub fn render(
        &self,
        stage: PromptStage,
        config: &RunConfig,
        subject: &Subject,
        context: &BTreeMap<String, String>,
    ) -> Result<PromptBundle, PromptError> {
        let (template_id, template) = self.resolve(stage, config.mode, config.strategy)?;
        let mut values: BTreeMap<&str, &str> = BTreeMap::new();
        let avg_words = config.avg_words_per_article().to_string();
        let threshold = config.confidence_threshold().to_string();
        values.insert("subject_name", &subject.name);
        values.insert("avg_words_per_article", &avg_words);
        values.insert("confidence_threshold", &threshold);
        values.insert("persona_block", self.persona_block(config.persona));
        if config.mode == Mode::TopicFocused {
            if let Some(root) = &config.root_subject {
                values.insert("root_subject", root);
            }
        }
        for (k, v) in context {
            values.insert(k, v);
        }

        let mut filled = BTreeMap::new();
        let system_text = substitute(template_id, &template.system, &values, &mut filled)?;
        let user_text = substitute(template_id, &template.user, &values, &mut filled)?;
        Ok(PromptBundle { system_text, user_text, stage, template_id: template_id.to_string(), placeholders_filled: filled })
    }
}

/// The built-in persona instruction.
pub fn persona_block(persona: Persona) -> String {
    TemplateSet::builtin().persona_block(persona).to_string()
}

fn placeholder_at(text: &str) -> Option<&str> {
    let rest = text.strip_prefix('{')?;
    let end = rest.find('}')?;
    let name = &rest[..end];
    let mut chars = name.chars();
    let first = chars.next()?;
    let valid = (first.is_ascii_lowercase() || first == '_')
        && chars.all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_');
    valid.then_some(name)
}

fn substitute(
    template_id: &str,
    text: &str,
    values: &BTreeMap<&str, &str>,
    filled: &mut BTreeMap<String, String>,
) -> Result<String, PromptError> {
    let mut out = String::with_capacity(text.len() + 256);
    let mut rest = text;
    while let Some(pos) = rest.find('{') {
        out.push_str(&rest[..pos]);
        let tail = &rest[pos..];
        match placeholder_at(tail) {
            Some(name) => {
                let value = values.get(name).ok_or_else(|| PromptError::MissingPlaceholder {
                    template: template_id.to_string(),
                    name: name.to_string(),
                })?;
                out.push_str(value);
                filled.insert(name.to_string(), value.to_string());
                rest = &tail[name.len() + 2..];
            }
            None => {
                out.push('{');
                rest = &tail[1..];
            }
        }
    }
    out.push_str(rest);
    Ok(out)
}

/// Every `{name}` placeholder a piece of template text references.
pub fn placeholders_in(text: &str) -> Vec<String> {
    let mut names = Vec::new();
    let mut rest = text;
    while let Some(pos) = rest.find('{') {
        let tail = &rest[pos..];
        if let Some(name) = placeholder_at(tail) {
            names.push(name.to_string());
            rest = &tail[name.len() + 2..];
        } else {
            rest = &tail[1..];
        }
    }
    names
}

/// The outline as `{"sections": [...]}`.
pub fn outline_block(sections: &[String]) -> String {
    serde_json::to_string_pretty(&serde_json::json!({ "sections": sections })).expect("json")
}

/// One phrase per line.
pub fn phrases_block<S: AsRef<str>>(phrases: &[S]) -> String {
    phrases.iter().map(AsRef::as_ref).collect::<Vec<_>>().join("\n")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ctx(pairs: &[(&str, &str)]) -> BTreeMap<String, String> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    fn outline() -> String {
        outline_block(&["Early Life and Education".to_string(), "Legacy and Influence".to_string()])
    }

    #[test]
    fn general_baseline_elicitation() {
        let set = TemplateSet::builtin();
        let config = RunConfig::general("Vannevar Bush");
        let subject = Subject::seed("Vannevar Bush").unwrap();
        let ob = outline();
        let bundle = set.render(PromptStage::Elicitation, &config, &subject, &ctx(&[("outline_block", &ob)])).unwrap();
        assert!(bundle.user_text.contains("Subject: Vannevar Bush"));
        assert!(bundle.user_text.contains("Section titles (use exactly):"));
        assert!(bundle.user_text.contains(&ob));
        assert!(bundle.system_text.contains("(~716 words)"));
        assert!(bundle.system_text.contains("[[History of Vannevar Bush]]"));
        assert_eq!(bundle.template_id, "elicitation.general.baseline");
        assert!(placeholders_in(&bundle.system_text).is_empty());
        assert!(placeholders_in(&bundle.user_text).is_empty());
    }

    #[test]
    fn topic_calibrated_ner_has_mandatory_rejections() {
        let set = TemplateSet::builtin();
        let mut config = RunConfig::topic("Hammurabi", "Ancient Babylon");
        config.strategy = Strategy::Calibrated;
        let subject = Subject::seed("Hammurabi").unwrap();
        let bundle = set
            .render(PromptStage::Ner, &config, &subject, &ctx(&[("phrases_block", "Code of Hammurabi\nBabylon")]))
            .unwrap();
        assert!(bundle.system_text.contains("\"X of Ancient Babylon\""));
        assert!(bundle.system_text.contains("\"Ancient Babylon in popular culture\""));
        assert!(bundle.system_text.contains("confidence < 0.75"));
        assert!(bundle.is_calibrated());
    }

    #[test]
    fn missing_placeholder_is_an_error() {
        let set = TemplateSet::builtin();
        let config = RunConfig::general("Vannevar Bush");
        let subject = Subject::seed("Vannevar Bush").unwrap();
        let err = set.render(PromptStage::Elicitation, &config, &subject, &BTreeMap::new()).unwrap_err();
        assert!(matches!(err, PromptError::MissingPlaceholder { ref name, .. } if name == "outline_block"));
    }

    #[test]
    fn personas() {
        assert!(persona_block(Persona::ScientificNeutral).contains("neutral, evidence-based register"));
        assert!(persona_block(Persona::LeftLeaning).contains("structural inequality"));
        assert!(persona_block(Persona::Conservative).contains("institutional continuity"));
    }

    #[test]
    fn literal_braces_survive() {
        let set = TemplateSet::builtin();
        let config = RunConfig::general("X");
        let subject = Subject::seed("X").unwrap();
        let bundle = set.render(PromptStage::Elicitation, &config, &subject, &ctx(&[("outline_block", "{}")])).unwrap();
        assert!(bundle.system_text.contains("{{Infobox ...}}"));
        let ner = set.render(PromptStage::Ner, &config, &subject, &ctx(&[("phrases_block", "a")])).unwrap();
        assert!(ner.system_text.contains(r#"{"phrases": [{"phrase": "<exact input>", "is_ne": true/false}, ...]}"#));
    }

    #[test]
    fn values_are_not_rescanned() {
        let set = TemplateSet::builtin();
        let config = RunConfig::general("{outline_block}");
        let subject = Subject::seed("Weird {outline_block}").unwrap();
        let bundle = set.render(PromptStage::Elicitation, &config, &subject, &ctx(&[("outline_block", "{}")])).unwrap();
        assert!(bundle.user_text.contains("Subject: Weird {outline_block}"));
    }

    #[test]
    fn load_dir_matches_builtin() {
        let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("templates");
        let loaded = TemplateSet::load_dir(&dir).unwrap();
        assert_eq!(loaded.checksum(), TemplateSet::builtin().checksum());
        assert_eq!(loaded.file_checksums().len(), 17);
    }

    #[test]
    fn load_dir_reports_missing_file() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(TemplateSet::load_dir(dir.path()), Err(PromptError::Io(..))));
    }
}
