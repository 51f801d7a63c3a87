//! Claim-level factuality.
//!
//! A judge model extracts up to ten claims per article and labels each
//! one against reference evidence. Per-article rates are exact rationals;
//! corpus figures are unweighted means over articles that have evidence.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use num_rational::Ratio;
use num_traits::{ToPrimitive, Zero};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::RunConfig;
use crate::evidence::{self, GatherOptions, PageFetcher, ReferenceClient, SearchChain};
use crate::gateway::Gateway;
use crate::prompts::{PromptError, PromptStage, TemplateSet};
use crate::types::{Article, Subject};
use crate::wikitext;

pub const MAX_CLAIMS: usize = 10;
/// Evidence shown to the judge per claim, in characters.
pub const EVIDENCE_CHARS: usize = 12_000;
/// Hops at or above this share one bucket.
pub const LAST_HOP_BUCKET: u32 = 5;

pub type Rate = Ratio<u64>;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("tally has no claims")]
    EmptyTally,
    #[error("tally has {0} claims, more than {MAX_CLAIMS}")]
    TooManyClaims(u64),
    #[error("article about {0:?} is empty")]
    EmptyArticle(String),
    #[error("claim extraction failed: {0}")]
    Extraction(String),
    #[error("no evidence supplied for the claim")]
    NoEvidence,
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("{0}: {1}")]
    Io(String, #[source] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tier {
    Wiki,
    Web,
}

impl fmt::Display for Tier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Tier::Wiki => "Wiki",
            Tier::Web => "Web",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Supported,
    Refuted,
    Insufficient,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClaimTally {
    pub n: u64,
    pub supported: u64,
    pub refuted: u64,
    pub insufficient: u64,
}

impl ClaimTally {
    pub fn new(supported: u64, refuted: u64, insufficient: u64) -> Result<Self, EvalError> {
        let n = supported + refuted + insufficient;
        if n > MAX_CLAIMS as u64 {
            return Err(EvalError::TooManyClaims(n));
        }
        Ok(ClaimTally { n, supported, refuted, insufficient })
    }

    pub fn from_verdicts<'a>(verdicts: impl IntoIterator<Item = &'a Verdict>) -> Result<Self, EvalError> {
        let (mut s, mut r, mut u) = (0, 0, 0);
        for v in verdicts {
            match v {
                Verdict::Supported => s += 1,
                Verdict::Refuted => r += 1,
                Verdict::Insufficient => u += 1,
            }
        }
        Self::new(s, r, u)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Metrics {
    pub true_rate: Rate,
    pub false_rate: Rate,
    pub unverifiable_rate: Rate,
    /// Absent when no claim was supported or refuted.
    pub precision: Option<Rate>,
}

pub fn metrics(tally: &ClaimTally) -> Result<Metrics, EvalError> {
    if tally.n == 0 {
        return Err(EvalError::EmptyTally);
    }
    let decided = tally.supported + tally.refuted;
    Ok(Metrics {
        true_rate: Ratio::new(tally.supported, tally.n),
        false_rate: Ratio::new(tally.refuted, tally.n),
        unverifiable_rate: Ratio::new(tally.insufficient, tally.n),
        precision: (decided > 0).then(|| Ratio::new(tally.supported, decided)),
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgedClaim {
    pub text: String,
    pub verdict: Verdict,
    /// Set when the judge reply could not be read and the verdict fell
    /// back to `insufficient`.
    pub flagged: bool,
}

/// One article's result in one tier. `tally` is `None` when the subject
/// had no evidence in that tier.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArticleVerdicts {
    pub subject: Subject,
    pub tier: Tier,
    pub claims: Vec<JudgedClaim>,
    pub tally: Option<ClaimTally>,
}

impl ArticleVerdicts {
    pub fn uncovered(subject: Subject, tier: Tier) -> Self {
        ArticleVerdicts { subject, tier, claims: Vec::new(), tally: None }
    }

    pub fn judged(subject: Subject, tier: Tier, claims: Vec<JudgedClaim>) -> Result<Self, EvalError> {
        let tally = ClaimTally::from_verdicts(claims.iter().map(|c| &c.verdict))?;
        if tally.n == 0 {
            return Err(EvalError::EmptyTally);
        }
        Ok(ArticleVerdicts { subject, tier, claims, tally: Some(tally) })
    }

    pub fn metrics(&self) -> Option<Metrics> {
        self.tally.as_ref().and_then(|t| metrics(t).ok())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusMetrics {
    pub sampled: u64,
    pub covered: u64,
    pub coverage: Rate,
    pub true_rate: Option<Rate>,
    pub false_rate: Option<Rate>,
    pub unverifiable_rate: Option<Rate>,
    /// Mean over covered articles whose precision is defined.
    pub precision: Option<Rate>,
    pub precision_articles: u64,
}

fn mean(values: &[Rate]) -> Option<Rate> {
    if values.is_empty() {
        return None;
    }
    let sum = values.iter().fold(Rate::zero(), |acc, v| acc + v);
    Some(sum / Rate::from_integer(values.len() as u64))
}

/// Unweighted means of per-article metrics over covered articles.
pub fn macro_average(verdicts: &[ArticleVerdicts]) -> CorpusMetrics {
    let per: Vec<Metrics> = verdicts.iter().filter_map(ArticleVerdicts::metrics).collect();
    let pick = |f: fn(&Metrics) -> Rate| mean(&per.iter().map(f).collect::<Vec<_>>());
    let precisions: Vec<Rate> = per.iter().filter_map(|m| m.precision).collect();
    let sampled = verdicts.len() as u64;
    CorpusMetrics {
        sampled,
        covered: per.len() as u64,
        coverage: if sampled == 0 { Rate::zero() } else { Ratio::new(per.len() as u64, sampled) },
        true_rate: pick(|m| m.true_rate),
        false_rate: pick(|m| m.false_rate),
        unverifiable_rate: pick(|m| m.unverifiable_rate),
        precision: mean(&precisions),
        precision_articles: precisions.len() as u64,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HopBucket {
    Hop(u32),
    Deep,
}

impl HopBucket {
    pub fn of(hop: u32) -> Self {
        if hop >= LAST_HOP_BUCKET {
            HopBucket::Deep
        } else {
            HopBucket::Hop(hop)
        }
    }
}

impl fmt::Display for HopBucket {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            HopBucket::Hop(h) => write!(f, "hop {h}"),
            HopBucket::Deep => write!(f, "hop {LAST_HOP_BUCKET}+"),
        }
    }
}

/// Macro metrics per hop bucket, for populated buckets only.
pub fn hop_stratify(verdicts: &[ArticleVerdicts]) -> Vec<(HopBucket, CorpusMetrics)> {
    let mut buckets: BTreeMap<HopBucket, Vec<ArticleVerdicts>> = BTreeMap::new();
    for v in verdicts {
        buckets.entry(HopBucket::of(v.subject.hop)).or_default().push(v.clone());
    }
    buckets.into_iter().map(|(b, vs)| (b, macro_average(&vs))).collect()
}

/// `r` as a percentage with one decimal, rounded half up.
pub fn percent(r: Rate) -> String {
    let tenths = (r * Rate::from_integer(1000) + Ratio::new(1, 2)).floor().to_integer();
    format!("{}.{}", tenths / 10, tenths % 10)
}

pub fn to_f64(r: Rate) -> f64 {
    r.to_f64().expect("finite")
}

fn strip_code_fence(text: &str) -> &str {
    let t = text.trim();
    t.strip_prefix("```json")
        .or_else(|| t.strip_prefix("```"))
        .and_then(|rest| rest.strip_suffix("```"))
        .map(str::trim)
        .unwrap_or(t)
}

#[derive(Deserialize)]
struct ClaimsReply {
    claims: Vec<String>,
}

/// Reads a claims reply and keeps the first ten, in document order.
pub fn parse_claims(text: &str) -> Result<Vec<String>, EvalError> {
    let reply: ClaimsReply =
        serde_json::from_str(strip_code_fence(text)).map_err(|e| EvalError::Extraction(e.to_string()))?;
    let mut claims: Vec<String> =
        reply.claims.into_iter().map(|c| c.trim().to_string()).filter(|c| !c.is_empty()).collect();
    claims.truncate(MAX_CLAIMS);
    Ok(claims)
}

#[derive(Deserialize)]
struct VerdictReply {
    verdict: String,
}

/// `None` when the reply is not a recognizable verdict.
pub fn parse_verdict(text: &str) -> Option<Verdict> {
    let reply: VerdictReply = serde_json::from_str(strip_code_fence(text)).ok()?;
    match reply.verdict.trim().to_ascii_lowercase().as_str() {
        "supported" => Some(Verdict::Supported),
        "refuted" => Some(Verdict::Refuted),
        "insufficient" | "insufficient evidence" => Some(Verdict::Insufficient),
        _ => None,
    }
}

/// Asks the judge for up to ten claims.
pub fn extract_claims(
    gateway: &Gateway,
    templates: &TemplateSet,
    config: &RunConfig,
    article: &Article,
) -> Result<Vec<String>, EvalError> {
    let text = wikitext::strip_markup(&article.wikitext);
    if text.trim().is_empty() {
        return Err(EvalError::EmptyArticle(article.subject.name.clone()));
    }
    let context = BTreeMap::from([
        ("article_text".to_string(), text),
        ("max_claims".to_string(), MAX_CLAIMS.to_string()),
    ]);
    let bundle = templates.render(PromptStage::ClaimExtraction, config, &article.subject, &context)?;
    let request = crate::gateway::GenerationRequest::new(bundle, config.max_tokens, format!("claims:{}", article.subject.canonical_key));
    let result = gateway.complete(&request);
    let reply = result
        .ok_text()
        .ok_or_else(|| EvalError::Extraction(result.last_error.clone().unwrap_or_else(|| "no reply".into())))?;
    parse_claims(reply)
}

fn evidence_block(evidence: &[&str]) -> String {
    let joined = evidence.join("\n\n---\n\n");
    joined.chars().take(EVIDENCE_CHARS).collect()
}

/// Labels one claim. An unreadable or missing reply becomes a flagged
/// `insufficient`.
pub fn judge_claim(
    gateway: &Gateway,
    templates: &TemplateSet,
    config: &RunConfig,
    subject: &Subject,
    claim: &str,
    evidence: &[&str],
) -> Result<JudgedClaim, EvalError> {
    if evidence.iter().all(|e| e.trim().is_empty()) {
        return Err(EvalError::NoEvidence);
    }
    let context = BTreeMap::from([
        ("claim".to_string(), claim.to_string()),
        ("evidence_block".to_string(), evidence_block(evidence)),
    ]);
    let bundle = templates.render(PromptStage::Verdict, config, subject, &context)?;
    let request = crate::gateway::GenerationRequest::new(bundle, config.max_tokens, format!("verdict:{}", subject.canonical_key));
    let result = gateway.complete(&request);
    let verdict = result.ok_text().and_then(parse_verdict);
    if verdict.is_none() {
        log::warn!("unreadable verdict for a claim about {}", subject.name);
    }
    Ok(JudgedClaim {
        text: claim.to_string(),
        verdict: verdict.unwrap_or(Verdict::Insufficient),
        flagged: verdict.is_none(),
    })
}

/// Where reference text comes from.
pub enum EvidenceProvider<'a> {
    Wiki(&'a dyn ReferenceClient),
    Web { search: &'a SearchChain, fetcher: &'a dyn PageFetcher, options: GatherOptions },
}

impl EvidenceProvider<'_> {
    pub fn tier(&self) -> Tier {
        match self {
            EvidenceProvider::Wiki(_) => Tier::Wiki,
            EvidenceProvider::Web { .. } => Tier::Web,
        }
    }

    /// Evidence texts for `subject`; empty when there is none.
    pub fn evidence(&self, subject: &Subject) -> Result<Vec<String>, String> {
        match self {
            EvidenceProvider::Wiki(client) => match client.fetch_reference_article(&subject.name) {
                Ok(page) => Ok(page.map(|p| p.text).into_iter().collect()),
                Err(e) => Err(e.to_string()),
            },
            EvidenceProvider::Web { search, fetcher, options } => {
                let sources = evidence::gather(subject, search, *fetcher, options).map_err(|e| e.to_string())?;
                Ok(evidence::usable(&sources).iter().filter_map(|s| s.evidence_text()).map(str::to_string).collect())
            }
        }
    }
}

/// An article left out of every figure, with the reason.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exclusion {
    pub subject: Subject,
    pub tier: Tier,
    pub reason: String,
}

/// One line of `evaluation.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EvaluationRecord {
    Article {
        #[serde(flatten)]
        verdicts: ArticleVerdicts,
        metrics: Option<Metrics>,
        /// The same rates as decimals.
        decimal: Option<BTreeMap<String, f64>>,
    },
    Excluded(Exclusion),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Evaluation {
    pub tier: Tier,
    pub sample_seed: u64,
    pub verdicts: Vec<ArticleVerdicts>,
    pub exclusions: Vec<Exclusion>,
}

/// Uniform sample of `n` articles without replacement, returned in corpus
/// order.
pub fn sample_articles(articles: &[Article], n: usize, seed: u64) -> Result<Vec<Article>, EvalError> {
    if articles.is_empty() {
        return Err(EvalError::EmptyCorpus);
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut picked = rand::seq::index::sample(&mut rng, articles.len(), n.min(articles.len())).into_vec();
    picked.sort_unstable();
    Ok(picked.into_iter().map(|i| articles[i].clone()).collect())
}

/// Evaluates one article against `provider`.
pub fn evaluate_article(
    gateway: &Gateway,
    templates: &TemplateSet,
    config: &RunConfig,
    provider: &EvidenceProvider<'_>,
    article: &Article,
) -> Result<ArticleVerdicts, Exclusion> {
    let tier = provider.tier();
    let subject = article.subject.clone();
    let exclude = |reason: String| Exclusion { subject: subject.clone(), tier, reason };
    let evidence = provider.evidence(&subject).map_err(|e| exclude(format!("evidence lookup failed: {e}")))?;
    if evidence.is_empty() {
        return Ok(ArticleVerdicts::uncovered(subject.clone(), tier));
    }
    let claims = extract_claims(gateway, templates, config, article).map_err(|e| exclude(e.to_string()))?;
    if claims.is_empty() {
        return Err(exclude("no claims extracted".into()));
    }
    let refs: Vec<&str> = evidence.iter().map(String::as_str).collect();
    let judged = claims
        .iter()
        .map(|c| judge_claim(gateway, templates, config, &subject, c, &refs))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| exclude(e.to_string()))?;
    ArticleVerdicts::judged(subject.clone(), tier, judged).map_err(|e| exclude(e.to_string()))
}

/// Evaluates `articles` on `workers` threads. Results keep input order.
pub fn evaluate_articles(
    gateway: &Gateway,
    templates: &TemplateSet,
    config: &RunConfig,
    provider: &EvidenceProvider<'_>,
    articles: &[Article],
    workers: usize,
) -> (Vec<ArticleVerdicts>, Vec<Exclusion>) {
    let (tx, rx) = crossbeam_channel::unbounded();
    for i in 0..articles.len() {
        tx.send(i).expect("receiver alive");
    }
    drop(tx);
    let mut results: Vec<Option<Result<ArticleVerdicts, Exclusion>>> = vec![None; articles.len()];
    let found = parking_lot::Mutex::new(Vec::new());
    std::thread::scope(|scope| {
        for _ in 0..workers.max(1) {
            let rx = rx.clone();
            let found = &found;
            scope.spawn(move || {
                for i in rx {
                    let r = evaluate_article(gateway, templates, config, provider, &articles[i]);
                    found.lock().push((i, r));
                }
            });
        }
    });
    for (i, r) in found.into_inner() {
        results[i] = Some(r);
    }
    let mut verdicts = Vec::new();
    let mut exclusions = Vec::new();
    for r in results.into_iter().flatten() {
        match r {
            Ok(v) => verdicts.push(v),
            Err(e) => exclusions.push(e),
        }
    }
    (verdicts, exclusions)
}

fn decimals(m: &Metrics) -> BTreeMap<String, f64> {
    let mut out = BTreeMap::from([
        ("true_rate".to_string(), to_f64(m.true_rate)),
        ("false_rate".to_string(), to_f64(m.false_rate)),
        ("unverifiable_rate".to_string(), to_f64(m.unverifiable_rate)),
    ]);
    if let Some(p) = m.precision {
        out.insert("precision".to_string(), to_f64(p));
    }
    out
}

impl Evaluation {
    pub fn records(&self) -> Vec<EvaluationRecord> {
        let articles = self.verdicts.iter().map(|v| {
            let metrics = v.metrics();
            EvaluationRecord::Article { verdicts: v.clone(), decimal: metrics.as_ref().map(decimals), metrics }
        });
        articles.chain(self.exclusions.iter().cloned().map(EvaluationRecord::Excluded)).collect()
    }

    /// The hop table plus an overall row.
    pub fn report_markdown(&self) -> String {
        let mut out = String::new();
        out.push_str("# Factuality report\n\n");
        out.push_str(&format!(
            "Tier: {}. Sample seed: {}. Articles evaluated: {}. Excluded: {}.\n\n",
            self.tier,
            self.sample_seed,
            self.verdicts.len(),
            self.exclusions.len()
        ));
        out.push_str(
            "Rates are macro-averaged over articles with evidence. Precision is averaged over articles \
             where it is defined (at least one supported or refuted claim); other articles still count \
             toward the rate averages. `n` counts articles with evidence; Cov.% is that count over the \
             bucket size.\n\n",
        );
        out.push_str("| Bucket | Ref. | n | Cov.% | Prec | True | False | Unv |\n");
        out.push_str("|---|---|---:|---:|---:|---:|---:|---:|\n");
        let row = |label: String, m: &CorpusMetrics| {
            let cell = |r: Option<Rate>| r.map(percent).unwrap_or_else(|| "n/a".into());
            format!(
                "| {label} | {} | {} | {} | {} | {} | {} | {} |\n",
                self.tier,
                m.covered,
                percent(m.coverage),
                cell(m.precision),
                cell(m.true_rate),
                cell(m.false_rate),
                cell(m.unverifiable_rate)
            )
        };
        for (bucket, m) in hop_stratify(&self.verdicts) {
            out.push_str(&row(bucket.to_string(), &m));
        }
        out.push_str(&row("all".into(), &macro_average(&self.verdicts)));
        if !self.exclusions.is_empty() {
            out.push_str("\n## Excluded\n\n");
            for e in &self.exclusions {
                out.push_str(&format!("- {}: {}\n", e.subject.name, e.reason));
            }
        }
        out
    }

    /// Writes `evaluation.jsonl` and `report.md` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<(), EvalError> {
        let mut lines = String::new();
        for record in self.records() {
            lines.push_str(&serde_json::to_string(&record).expect("serializable"));
            lines.push('\n');
        }
        let io = |p: &Path| {
            let p = p.display().to_string();
            move |e| EvalError::Io(p, e)
        };
        let jsonl = dir.join("evaluation.jsonl");
        std::fs::write(&jsonl, lines).map_err(io(&jsonl))?;
        let md = dir.join("report.md");
        std::fs::write(&md, self.report_markdown()).map_err(io(&md))
    }
}
