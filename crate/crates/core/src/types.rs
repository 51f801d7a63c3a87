//! Shared data model: subjects, articles, candidates in flight through the
//! sanitization funnel, and funnel counters.

use std::collections::BTreeMap;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::canonical::{canonical_key, CanonicalError};
use crate::config::Strategy;
use crate::decimal::UnitDecimal;
use crate::wikitext;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubjectStatus {
    Queued,
    Generated,
    Failed,
}

/// A node in the expansion graph.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Subject {
    pub name: String,
    pub canonical_key: String,
    pub hop: u32,
    pub status: SubjectStatus,
    pub parent: Option<String>,
}

impl Subject {
    /// The hop-0 subject of a run.
    pub fn seed(name: &str) -> Result<Self, CanonicalError> {
        Ok(Subject {
            name: name.to_string(),
            canonical_key: canonical_key(name)?,
            hop: 0,
            status: SubjectStatus::Queued,
            parent: None,
        })
    }

    /// A subject proposed by `parent`, one hop further out.
    pub fn child(name: &str, parent: &str, parent_hop: u32) -> Result<Self, CanonicalError> {
        Ok(Subject {
            name: name.to_string(),
            canonical_key: canonical_key(name)?,
            hop: parent_hop + 1,
            status: SubjectStatus::Queued,
            parent: Some(parent.to_string()),
        })
    }
}

/// A wikilink as it appears in an article.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Wikilink {
    pub target: String,
    pub confidence: Option<UnitDecimal>,
}

/// Generated Wikitext plus the structure extracted from it.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Article {
    pub subject: Subject,
    pub wikitext: String,
    pub outline: Vec<String>,
    pub wikilinks: Vec<Wikilink>,
    pub categories: Vec<String>,
    pub has_infobox: bool,
    pub word_count: u64,
}

impl Article {
    /// Builds an article from raw Wikitext; links, categories and counts
    /// are always derived from the text itself.
    pub fn from_wikitext(subject: Subject, outline: Vec<String>, text: String, strategy: Strategy) -> Self {
        let parsed = wikitext::extract_structure(&text, strategy);
        let wikilinks = wikitext::extract_links(&text, strategy)
            .links
            .into_iter()
            .map(|l| Wikilink { target: l.target, confidence: l.confidence })
            .collect();
        Article {
            subject,
            outline,
            wikilinks,
            categories: parsed.categories,
            has_infobox: parsed.has_infobox,
            word_count: wikitext::word_count(&text),
            wikitext: text,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CandidateStage {
    Raw,
    CanonSurvivor,
    NerSurvivor,
    SimSurvivor,
    Committed,
    Rejected,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectionReason {
    DuplicateCanonical,
    BelowThreshold,
    NerReject,
    NerParseFailure,
    SemanticDuplicate,
    ArbitrationFailure,
    LoopPattern,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum StageError {
    #[error("cannot move candidate from {from:?} to {to:?}")]
    NonMonotone { from: CandidateStage, to: CandidateStage },
}

/// A proposed wikilink moving through the sanitization funnel.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateEntity {
    pub phrase: String,
    pub canonical_key: String,
    pub parent_subject: String,
    pub parent_hop: u32,
    pub confidence: Option<UnitDecimal>,
    pub stage: CandidateStage,
    pub rejection_reason: Option<RejectionReason>,
}

impl CandidateEntity {
    pub fn raw(phrase: &str, parent: &Subject, confidence: Option<UnitDecimal>) -> Self {
        CandidateEntity {
            phrase: phrase.to_string(),
            canonical_key: crate::canonical::canonicalize(phrase),
            parent_subject: parent.name.clone(),
            parent_hop: parent.hop,
            confidence,
            stage: CandidateStage::Raw,
            rejection_reason: None,
        }
    }

    /// Moves one step forward along raw → canon → ner → sim → committed.
    pub fn advance(&mut self, to: CandidateStage) -> Result<(), StageError> {
        let ok = matches!(
            (self.stage, to),
            (CandidateStage::Raw, CandidateStage::CanonSurvivor)
                | (CandidateStage::CanonSurvivor, CandidateStage::NerSurvivor)
                | (CandidateStage::NerSurvivor, CandidateStage::SimSurvivor)
                | (CandidateStage::SimSurvivor, CandidateStage::Committed)
        );
        if !ok {
            return Err(StageError::NonMonotone { from: self.stage, to });
        }
        self.stage = to;
        Ok(())
    }

    pub fn reject(&mut self, reason: RejectionReason) -> Result<(), StageError> {
        if matches!(self.stage, CandidateStage::Committed | CandidateStage::Rejected) {
            return Err(StageError::NonMonotone { from: self.stage, to: CandidateStage::Rejected });
        }
        self.stage = CandidateStage::Rejected;
        self.rejection_reason = Some(reason);
        Ok(())
    }

    pub fn is_rejected(&self) -> bool {
        self.stage == CandidateStage::Rejected
    }
}

/// One set of funnel counters.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FunnelCounts {
    pub generated_articles: u64,
    pub raw_candidates: u64,
    pub after_canonical: u64,
    pub after_ner: u64,
    pub after_similarity: u64,
    pub queued_subjects: u64,
    /// Rejected by the deterministic loop filter; counted inside the
    /// canonical → NER drop.
    pub loop_rejections: u64,
    /// Rejected by the calibrated confidence gate before NER.
    pub below_threshold_rejections: u64,
}

impl FunnelCounts {
    pub fn is_monotone(&self) -> bool {
        self.raw_candidates >= self.after_canonical
            && self.after_canonical >= self.after_ner
            && self.after_ner >= self.after_similarity
            && self.after_similarity >= self.queued_subjects
    }

    fn add(&mut self, delta: &FunnelCounts) {
        self.generated_articles += delta.generated_articles;
        self.raw_candidates += delta.raw_candidates;
        self.after_canonical += delta.after_canonical;
        self.after_ner += delta.after_ner;
        self.after_similarity += delta.after_similarity;
        self.queued_subjects += delta.queued_subjects;
        self.loop_rejections += delta.loop_rejections;
        self.below_threshold_rejections += delta.below_threshold_rejections;
    }
}

/// Totals plus a per-hop breakdown. Candidate counters are bucketed by the
/// hop of the proposing article; `generated_articles` by the subject's hop.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FunnelStats {
    pub totals: FunnelCounts,
    pub per_hop: BTreeMap<u32, FunnelCounts>,
}

impl FunnelStats {
    pub fn is_monotone(&self) -> bool {
        self.totals.is_monotone() && self.per_hop.values().all(FunnelCounts::is_monotone)
    }
}

/// Concurrently updated funnel counters. Every update and snapshot takes
/// the same lock, so snapshots are linearizable.
#[derive(Debug, Default)]
pub struct FunnelRecorder {
    inner: Mutex<FunnelStats>,
}

impl FunnelRecorder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_stats(stats: FunnelStats) -> Self {
        FunnelRecorder { inner: Mutex::new(stats) }
    }

    pub fn record(&self, hop: u32, delta: FunnelCounts) {
        let mut stats = self.inner.lock();
        stats.totals.add(&delta);
        stats.per_hop.entry(hop).or_default().add(&delta);
    }

    pub fn snapshot(&self) -> FunnelStats {
        self.inner.lock().clone()
    }
}
