//! Stage 2 of the funnel: confidence gate, loop filter and the NER call.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::canonical::canonicalize;
use crate::config::{RunConfig, Strategy};
use crate::decimal::UnitDecimal;
use crate::gateway::{Gateway, GenerationRequest};
use crate::prompts::{phrases_block, PromptError, PromptStage, TemplateSet};
use crate::types::{CandidateEntity, CandidateStage, RejectionReason, Subject};

/// One NER judgement.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NerVerdict {
    pub phrase: String,
    pub is_ne: bool,
    /// Present only under the calibrated strategy.
    pub confidence: Option<UnitDecimal>,
}

impl NerVerdict {
    pub fn accepts(&self, threshold: UnitDecimal) -> bool {
        self.is_ne && self.confidence.is_none_or(|c| c >= threshold)
    }
}

#[derive(Debug, Error)]
pub enum NerError {
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("NER request failed: {0}")]
    Backend(String),
    #[error("NER reply is not valid: {0}")]
    Parse(String),
}

/// Splits candidates by the calibrated confidence gate. A candidate whose
/// score could not be read counts as below threshold.
pub fn gate_confidence(
    candidates: Vec<CandidateEntity>,
    threshold: UnitDecimal,
) -> (Vec<CandidateEntity>, Vec<CandidateEntity>) {
    let (passed, mut rejected): (Vec<_>, Vec<_>) =
        candidates.into_iter().partition(|c| c.confidence.is_some_and(|v| v >= threshold));
    for c in &mut rejected {
        c.reject(RejectionReason::BelowThreshold).expect("gate runs before terminal stages");
    }
    (passed, rejected)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LoopVerdict {
    Accept,
    Reject,
}

/// Whether canonical key `candidate` is `anchor` itself or one of the
/// structural forms built around it.
pub fn is_loop_form(candidate: &str, anchor: &str) -> bool {
    if anchor.is_empty() {
        return false;
    }
    if candidate == anchor {
        return true;
    }
    // "X of S", which also covers "Part of S" and "History of S".
    if let Some(head) = candidate.strip_suffix(anchor) {
        if head.ends_with(" of ") && head.len() > " of ".len() {
            return true;
        }
    }
    // "S's X" canonicalizes to "s s x".
    if let Some(tail) = candidate.strip_prefix(anchor) {
        if tail.strip_prefix(" s ").is_some_and(|x| !x.is_empty()) {
            return true;
        }
        if tail == " in popular culture" {
            return true;
        }
    }
    false
}

/// Deterministic self-reference filter run before the NER call.
pub fn loop_filter(candidate: &CandidateEntity, subject: &Subject, root: Option<&str>) -> LoopVerdict {
    let root_key = root.map(canonicalize);
    let anchors = std::iter::once(subject.canonical_key.as_str()).chain(root_key.as_deref());
    for anchor in anchors {
        if is_loop_form(&candidate.canonical_key, anchor) {
            return LoopVerdict::Reject;
        }
    }
    LoopVerdict::Accept
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawVerdict {
    phrase: String,
    is_ne: bool,
    #[serde(default)]
    confidence: Option<f64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawReply {
    phrases: Vec<RawVerdict>,
}

/// Parses a reply of the shape `{"phrases": [...]}`. The verdict phrases
/// must be exactly the input phrases, in any order.
pub fn parse_ner_reply(text: &str, phrases: &[String], strategy: Strategy) -> Result<Vec<NerVerdict>, NerError> {
    let body = strip_code_fence(text);
    let reply: RawReply = serde_json::from_str(body).map_err(|e| NerError::Parse(e.to_string()))?;
    let mut by_phrase: HashMap<&str, RawVerdict> = HashMap::new();
    let mut extra = Vec::new();
    for v in reply.phrases {
        if !phrases.contains(&v.phrase) {
            extra.push(v.phrase);
            continue;
        }
        let key = phrases.iter().find(|p| **p == v.phrase).expect("checked").as_str();
        if by_phrase.insert(key, v).is_some() {
            return Err(NerError::Parse(format!("phrase {key:?} judged twice")));
        }
    }
    if !extra.is_empty() {
        return Err(NerError::Parse(format!("unexpected phrases {extra:?}")));
    }
    phrases
        .iter()
        .map(|p| {
            let raw = by_phrase.remove(p.as_str()).ok_or_else(|| NerError::Parse(format!("no verdict for {p:?}")))?;
            let confidence = match strategy {
                Strategy::Baseline => None,
                Strategy::Calibrated => {
                    let c = raw.confidence.ok_or_else(|| NerError::Parse(format!("no confidence for {p:?}")))?;
                    Some(UnitDecimal::from_f64(c).map_err(|e| NerError::Parse(format!("{p:?}: {e}")))?)
                }
            };
            Ok(NerVerdict { phrase: raw.phrase, is_ne: raw.is_ne, confidence })
        })
        .collect()
}

fn strip_code_fence(text: &str) -> &str {
    let t = text.trim();
    t.strip_prefix("```json")
        .or_else(|| t.strip_prefix("```"))
        .and_then(|rest| rest.strip_suffix("```"))
        .map(str::trim)
        .unwrap_or(t)
}

/// Asks the backend to classify one batch.
pub fn ner_filter(
    gateway: &Gateway,
    templates: &TemplateSet,
    batch: &[CandidateEntity],
    subject: &Subject,
    config: &RunConfig,
) -> Result<Vec<NerVerdict>, NerError> {
    if batch.is_empty() {
        return Ok(Vec::new());
    }
    let request = ner_request(templates, batch, subject, config)?;
    let result = gateway.complete(&request);
    let text = result.ok_text().ok_or_else(|| NerError::Backend(result.last_error.clone().unwrap_or_default()))?;
    let phrases: Vec<String> = batch.iter().map(|c| c.phrase.clone()).collect();
    parse_ner_reply(text, &phrases, config.strategy)
}

pub fn ner_request(
    templates: &TemplateSet,
    batch: &[CandidateEntity],
    subject: &Subject,
    config: &RunConfig,
) -> Result<GenerationRequest, PromptError> {
    let phrases: Vec<&str> = batch.iter().map(|c| c.phrase.as_str()).collect();
    let context = BTreeMap::from([("phrases_block".to_string(), phrases_block(&phrases))]);
    let bundle = templates.render(PromptStage::Ner, config, subject, &context)?;
    Ok(GenerationRequest::new(bundle, config.max_tokens, format!("ner:{}", subject.canonical_key)))
}

/// Applies a batch outcome: verdicts advance or reject each candidate, and
/// a failed batch rejects every member with `ner_parse_failure`.
pub fn apply_ner(
    batch: Vec<CandidateEntity>,
    outcome: &Result<Vec<NerVerdict>, NerError>,
    threshold: UnitDecimal,
) -> Vec<CandidateEntity> {
    match outcome {
        Err(_) => batch
            .into_iter()
            .map(|mut c| {
                c.reject(RejectionReason::NerParseFailure).expect("candidate is live");
                c
            })
            .collect(),
        Ok(verdicts) => batch
            .into_iter()
            .zip(verdicts)
            .map(|(mut c, v)| {
                debug_assert_eq!(c.phrase, v.phrase);
                if v.accepts(threshold) {
                    c.advance(CandidateStage::NerSurvivor).expect("canon survivor");
                } else {
                    c.reject(RejectionReason::NerReject).expect("candidate is live");
                }
                c
            })
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::mock::{Fault, FaultStage, GraphWorld, MockBackend};
    use crate::gateway::RetryPolicy;
    use proptest::prelude::{prop_assert, proptest};
    use std::sync::Arc;

    fn bush() -> Subject {
        Subject::seed("Vannevar Bush").unwrap()
    }

    fn cand(phrase: &str, conf: Option<&str>) -> CandidateEntity {
        let mut c = CandidateEntity::raw(phrase, &bush(), conf.map(|s| UnitDecimal::parse(s).unwrap()));
        c.advance(CandidateStage::CanonSurvivor).unwrap();
        c
    }

    #[test]
    fn gate_keeps_threshold_and_above() {
        let t = UnitDecimal::parse("0.75").unwrap();
        let input = vec![
            cand("X", Some("0.60")),
            cand("W", Some("0.74")),
            cand("Y", Some("0.75")),
            cand("Albert Einstein", Some("0.97")),
            cand("Z", None),
        ];
        let (passed, rejected) = gate_confidence(input, t);
        let names: Vec<_> = passed.iter().map(|c| c.phrase.as_str()).collect();
        assert_eq!(names, ["Y", "Albert Einstein"]);
        assert_eq!(rejected.len(), 3);
        assert!(rejected.iter().all(|c| c.rejection_reason == Some(RejectionReason::BelowThreshold)));
    }

    #[test]
    fn loop_examples() {
        let s = bush();
        assert_eq!(loop_filter(&cand("History of Vannevar Bush", None), &s, None), LoopVerdict::Reject);
        assert_eq!(loop_filter(&cand("Tufts University", None), &s, None), LoopVerdict::Accept);
        assert_eq!(loop_filter(&cand("vannevar bush", None), &s, None), LoopVerdict::Reject);
        assert_eq!(loop_filter(&cand("Vannevar Bush's legacy", None), &s, None), LoopVerdict::Reject);
        assert_eq!(loop_filter(&cand("Vannevar Bush in popular culture", None), &s, None), LoopVerdict::Reject);
        assert_eq!(loop_filter(&cand("Vannevar Bush Award", None), &s, None), LoopVerdict::Accept);
        let h = Subject::seed("Hammurabi").unwrap();
        assert_eq!(loop_filter(&cand("Kings of Ancient Babylon", None), &h, Some("Ancient Babylon")), LoopVerdict::Reject);
        assert_eq!(loop_filter(&cand("ancient babylon", None), &h, Some("Ancient Babylon")), LoopVerdict::Reject);
        assert_eq!(loop_filter(&cand("Code of Hammurabi", None), &h, Some("Ancient Babylon")), LoopVerdict::Reject);
        assert_eq!(loop_filter(&cand("Marduk", None), &h, Some("Ancient Babylon")), LoopVerdict::Accept);
    }

    proptest! {
        #[test]
        fn no_false_accept_on_structural_forms(
            s in "[A-Z][a-z]{1,8}( [A-Z][a-z]{1,8}){0,2}",
            x in "[A-Za-z][a-z]{0,8}( [a-z]{1,6}){0,2}",
            pattern in 0usize..5,
        ) {
            let phrase = match pattern {
                0 => format!("{x} of {s}"),
                1 => format!("{s}'s {x}"),
                2 => format!("Part of {s}"),
                3 => format!("History of {s}"),
                _ => format!("{s} in popular culture"),
            };
            let subject = Subject::seed(&s).unwrap();
            let c = CandidateEntity::raw(&phrase, &subject, None);
            prop_assert!(loop_filter(&c, &subject, None) == LoopVerdict::Reject);
            let other = Subject::seed("Unrelated Zzyzx").unwrap();
            prop_assert!(loop_filter(&c, &other, Some(&s)) == LoopVerdict::Reject);
        }
    }

    #[test]
    fn parse_requires_exact_phrase_set() {
        let phrases = vec!["engineer".to_string(), "Office of Scientific Research and Development".to_string()];
        let ok = r#"{"phrases": [{"phrase": "Office of Scientific Research and Development", "is_ne": true}, {"phrase": "engineer", "is_ne": false}]}"#;
        let v = parse_ner_reply(ok, &phrases, Strategy::Baseline).unwrap();
        assert_eq!(v[0].phrase, "engineer");
        assert!(!v[0].is_ne && v[1].is_ne);

        let missing = r#"{"phrases": [{"phrase": "engineer", "is_ne": false}]}"#;
        assert!(parse_ner_reply(missing, &phrases, Strategy::Baseline).is_err());
        let extra = r#"{"phrases": [{"phrase": "engineer", "is_ne": false}, {"phrase": "Office of Scientific Research and Development", "is_ne": true}, {"phrase": "MIT", "is_ne": true}]}"#;
        assert!(parse_ner_reply(extra, &phrases, Strategy::Baseline).is_err());
        assert!(parse_ner_reply("not json", &phrases, Strategy::Baseline).is_err());
        assert!(parse_ner_reply(ok, &phrases, Strategy::Calibrated).is_err());
    }

    fn gateway(backend: MockBackend) -> Gateway {
        Gateway::new(Arc::new(backend), RetryPolicy::immediate(2), 4)
    }

    #[test]
    fn figure_batch_through_mock() {
        let world = GraphWorld::new().generic("engineer");
        let g = gateway(MockBackend::new(world, 0));
        let config = RunConfig::general("Vannevar Bush");
        let batch = vec![cand("engineer", None), cand("Office of Scientific Research and Development", None)];
        let outcome = ner_filter(&g, &TemplateSet::builtin(), &batch, &bush(), &config);
        let out = apply_ner(batch, &outcome, config.confidence_threshold());
        assert_eq!(out[0].rejection_reason, Some(RejectionReason::NerReject));
        assert_eq!(out[1].stage, CandidateStage::NerSurvivor);
    }

    #[test]
    fn malformed_reply_rejects_whole_batch() {
        let backend = MockBackend::new(GraphWorld::new(), 0).with_fault(
            FaultStage::Prompt(PromptStage::Ner),
            "Vannevar Bush",
            Fault::Malformed,
        );
        let g = gateway(backend);
        let config = RunConfig::general("Vannevar Bush");
        let batch = vec![cand("MIT", None), cand("Tufts University", None)];
        let outcome = ner_filter(&g, &TemplateSet::builtin(), &batch, &bush(), &config);
        assert!(outcome.is_err());
        let out = apply_ner(batch, &outcome, config.confidence_threshold());
        assert!(out.iter().all(|c| c.rejection_reason == Some(RejectionReason::NerParseFailure)));
    }

    #[test]
    fn empty_batch_makes_no_call() {
        let backend = Arc::new(MockBackend::new(GraphWorld::new(), 0));
        let g = Gateway::new(backend.clone(), RetryPolicy::immediate(2), 4);
        let v = ner_filter(&g, &TemplateSet::builtin(), &[], &bush(), &RunConfig::general("Vannevar Bush")).unwrap();
        assert!(v.is_empty());
        assert!(backend.calls().is_empty());
    }

    #[test]
    fn calibrated_accept_needs_threshold() {
        let t = UnitDecimal::parse("0.75").unwrap();
        let v = |c: &str| NerVerdict { phrase: "p".into(), is_ne: true, confidence: Some(UnitDecimal::parse(c).unwrap()) };
        assert!(!v("0.74").accepts(t));
        assert!(v("0.75").accepts(t));
    }
}
