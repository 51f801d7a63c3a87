//! Reference retrieval for factuality checks.
//!
//! Two tiers. Tier 1 reads an encyclopedia article through a
//! [`ReferenceClient`], following redirects. Tier 2 asks a chain of
//! [`SearchBackend`]s, drops blocked domains, ranks the rest by domain
//! score and fetches at most three pages, falling back to search snippets
//! when no page passes validation.

pub mod fixture;
pub mod live;

use std::collections::{BTreeMap, BTreeSet};
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use url::Url;

use crate::types::Subject;

pub use fixture::{FixtureFetcher, FixtureReference, FixtureSearch};
pub use live::{BraveSearch, HttpFetcher, MediaWikiClient, SerperSearch};

/// Pages shorter than this are unusable.
pub const MIN_CONTENT_CHARS: usize = 200;
/// Sources below this score are never fetched.
pub const MIN_FETCH_SCORE: u8 = 60;
pub const MAX_FETCH_ATTEMPTS: usize = 3;
pub const SEARCH_RESULTS: usize = 10;

const DOMAIN_SCORES: &str = include_str!("../../data/domain_scores.json");
const BLOCKED_DOMAINS: &str = include_str!("../../data/blocked_domains.json");
const VALIDATION_PATTERNS: &str = include_str!("../../data/validation_patterns.json");
const PUBLIC_SUFFIXES: &str = include_str!("../../data/public_suffixes.json");

const DEFAULT_INSTITUTIONAL: u8 = 70;
const DEFAULT_OTHER: u8 = 35;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreSource {
    ExplicitTable,
    EduGovOrgDefault,
    HttpsDefault,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainScore {
    pub domain: String,
    pub score: u8,
    pub source: ScoreSource,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Validity {
    Valid,
    Blocked,
    CaptchaOrDenied,
    TooShort,
    FetchFailed,
    SnippetFallback,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvidenceSource {
    pub url: String,
    pub root_domain: String,
    pub score: u8,
    /// Fetched page text. Kept only for `valid` and `too_short` pages.
    pub content: Option<String>,
    pub snippet: String,
    pub validity: Validity,
}

impl EvidenceSource {
    /// Text a judge can read: the page for valid fetches, the snippet for
    /// fallbacks.
    pub fn evidence_text(&self) -> Option<&str> {
        match self.validity {
            Validity::Valid => self.content.as_deref(),
            Validity::SnippetFallback => Some(&self.snippet),
            _ => None,
        }
    }
}

#[derive(Debug, Error)]
pub enum EvidenceError {
    #[error("cannot parse URL {0:?}")]
    BadUrl(String),
    #[error("no search backend is configured")]
    NoBackend,
    #[error("every search backend failed: {0}")]
    SearchFailed(String),
    #[error("reference lookup failed for {title:?}: {message}")]
    Transport { title: String, message: String },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchHit {
    pub url: String,
    pub snippet: String,
}

/// A web search service.
pub trait SearchBackend: Send + Sync {
    fn name(&self) -> &str;
    /// Whether the backend has what it needs (credentials, fixtures).
    fn is_available(&self) -> bool {
        true
    }
    fn query(&self, query: &str, k: usize) -> Result<Vec<SearchHit>, String>;
}

/// Full-page retrieval.
pub trait PageFetcher: Send + Sync {
    fn fetch(&self, url: &str) -> Result<String, String>;
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReferenceArticle {
    /// Title after redirects.
    pub title: String,
    pub text: String,
}

/// Encyclopedia lookup with redirect resolution.
pub trait ReferenceClient: Send + Sync {
    /// `Ok(None)` when no page exists.
    fn fetch_reference_article(&self, title: &str) -> Result<Option<ReferenceArticle>, EvidenceError>;
}

/// Backends in preference order.
#[derive(Default)]
pub struct SearchChain {
    backends: Vec<Box<dyn SearchBackend>>,
}

impl SearchChain {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, backend: impl SearchBackend + 'static) -> Self {
        self.backends.push(Box::new(backend));
        self
    }

    /// Serper then Brave, whichever have keys in the environment.
    pub fn from_env() -> Self {
        let mut chain = SearchChain::new();
        if let Some(s) = SerperSearch::from_env() {
            chain = chain.with(s);
        }
        if let Some(b) = BraveSearch::from_env() {
            chain = chain.with(b);
        }
        chain
    }

    pub fn available(&self) -> Vec<&str> {
        self.backends.iter().filter(|b| b.is_available()).map(|b| b.name()).collect()
    }

    /// Asks the first available backend, moving down the chain when one
    /// errors.
    pub fn query(&self, query: &str, k: usize) -> Result<Vec<SearchHit>, EvidenceError> {
        let mut errors = Vec::new();
        for backend in self.backends.iter().filter(|b| b.is_available()) {
            match backend.query(query, k) {
                Ok(hits) => return Ok(hits),
                Err(e) => {
                    log::warn!("search backend {} failed: {e}", backend.name());
                    errors.push(format!("{}: {e}", backend.name()));
                }
            }
        }
        if errors.is_empty() {
            Err(EvidenceError::NoBackend)
        } else {
            Err(EvidenceError::SearchFailed(errors.join("; ")))
        }
    }
}

/// Shipped tables, parsed once.
pub struct DomainData {
    pub scores: BTreeMap<String, u8>,
    pub blocked: BTreeSet<String>,
    pub patterns: BTreeMap<String, Vec<String>>,
    pub suffixes: BTreeSet<String>,
}

pub fn domain_data() -> &'static DomainData {
    static DATA: OnceLock<DomainData> = OnceLock::new();
    DATA.get_or_init(|| DomainData {
        scores: serde_json::from_str(DOMAIN_SCORES).expect("domain_scores.json"),
        blocked: serde_json::from_str(BLOCKED_DOMAINS).expect("blocked_domains.json"),
        patterns: serde_json::from_str(VALIDATION_PATTERNS).expect("validation_patterns.json"),
        suffixes: serde_json::from_str(PUBLIC_SUFFIXES).expect("public_suffixes.json"),
    })
}

fn host_of(url: &str) -> Result<(Url, String), EvidenceError> {
    let parsed = Url::parse(url).map_err(|_| EvidenceError::BadUrl(url.to_string()))?;
    let host = parsed
        .host_str()
        .ok_or_else(|| EvidenceError::BadUrl(url.to_string()))?
        .trim_end_matches('.')
        .to_ascii_lowercase();
    Ok((parsed, host))
}

/// The registrable domain: one label above the longest known public
/// suffix, or the last two labels.
pub fn root_domain(host: &str) -> String {
    let labels: Vec<&str> = host.split('.').collect();
    let suffixes = &domain_data().suffixes;
    let suffix_len = (2..labels.len())
        .rev()
        .find(|&n| suffixes.contains(&labels[labels.len() - n..].join(".")))
        .unwrap_or(1);
    let take = (suffix_len + 1).min(labels.len());
    labels[labels.len() - take..].join(".")
}

fn matches_domain(host: &str, domain: &str) -> bool {
    host == domain || host.strip_suffix(domain).is_some_and(|rest| rest.ends_with('.'))
}

pub fn score_domain(url: &str) -> Result<DomainScore, EvidenceError> {
    let (_, host) = host_of(url)?;
    let scores = &domain_data().scores;
    let labels: Vec<&str> = host.split('.').collect();
    for start in 0..labels.len().saturating_sub(1) {
        let candidate = labels[start..].join(".");
        if let Some(&score) = scores.get(&candidate) {
            return Ok(DomainScore { domain: candidate, score, source: ScoreSource::ExplicitTable });
        }
    }
    let domain = root_domain(&host);
    let tld = labels.last().copied().unwrap_or_default();
    Ok(if matches!(tld, "edu" | "gov" | "org") {
        DomainScore { domain, score: DEFAULT_INSTITUTIONAL, source: ScoreSource::EduGovOrgDefault }
    } else {
        DomainScore { domain, score: DEFAULT_OTHER, source: ScoreSource::HttpsDefault }
    })
}

/// True when the host is a blocked domain or lies under one.
pub fn is_blocked(url: &str) -> bool {
    is_excluded(url, &[])
}

/// [`is_blocked`] extended with user exclusions. Unparseable URLs count as
/// excluded.
pub fn is_excluded(url: &str, exclusions: &[String]) -> bool {
    let Ok((_, host)) = host_of(url) else { return true };
    domain_data()
        .blocked
        .iter()
        .chain(exclusions)
        .map(|d| d.trim().trim_start_matches("www.").to_ascii_lowercase())
        .any(|d| matches_domain(&host, &d))
}

/// Classifies a fetched page.
pub fn validate_content(text: &str) -> Validity {
    if text.chars().count() < MIN_CONTENT_CHARS {
        return Validity::TooShort;
    }
    let lower = text.to_lowercase();
    let hit = domain_data().patterns.values().flatten().any(|p| lower.contains(&p.to_lowercase()));
    if hit {
        Validity::CaptchaOrDenied
    } else {
        Validity::Valid
    }
}

/// Options for [`gather`].
#[derive(Clone, Debug, Default)]
pub struct GatherOptions {
    /// Extra domains excluded the same way as the blocked list.
    pub exclusions: Vec<String>,
}

/// Web evidence for one subject.
///
/// The returned list holds every fetch attempt, marked with its validity,
/// followed by snippet fallbacks when no attempt was valid. Use
/// [`usable`] to keep only sources a judge can read.
pub fn gather(
    subject: &Subject,
    search: &SearchChain,
    fetcher: &dyn PageFetcher,
    options: &GatherOptions,
) -> Result<Vec<EvidenceSource>, EvidenceError> {
    let hits = search.query(&subject.name, SEARCH_RESULTS)?;
    let mut ranked: Vec<(usize, DomainScore, SearchHit)> = hits
        .into_iter()
        .enumerate()
        .filter(|(_, h)| !is_excluded(&h.url, &options.exclusions))
        .filter_map(|(i, h)| score_domain(&h.url).ok().map(|s| (i, s, h)))
        .collect();
    ranked.sort_by(|a, b| b.1.score.cmp(&a.1.score).then(a.0.cmp(&b.0)));

    let eligible: Vec<(DomainScore, SearchHit)> = ranked
        .into_iter()
        .filter(|(_, s, _)| s.score >= MIN_FETCH_SCORE)
        .take(MAX_FETCH_ATTEMPTS)
        .map(|(_, s, h)| (s, h))
        .collect();

    let mut sources = Vec::new();
    for (score, hit) in &eligible {
        let source = |content: Option<String>, validity| EvidenceSource {
            url: hit.url.clone(),
            root_domain: score.domain.clone(),
            score: score.score,
            content,
            snippet: hit.snippet.clone(),
            validity,
        };
        let attempt = match fetcher.fetch(&hit.url) {
            Ok(text) => match validate_content(&text) {
                Validity::Valid => source(Some(text), Validity::Valid),
                Validity::TooShort => source(Some(text), Validity::TooShort),
                other => source(None, other),
            },
            Err(e) => {
                log::debug!("fetch of {} failed: {e}", hit.url);
                source(None, Validity::FetchFailed)
            }
        };
        let valid = attempt.validity == Validity::Valid;
        sources.push(attempt);
        if valid {
            return Ok(sources);
        }
    }
    for (score, hit) in &eligible {
        if !hit.snippet.trim().is_empty() {
            sources.push(EvidenceSource {
                url: hit.url.clone(),
                root_domain: score.domain.clone(),
                score: score.score,
                content: None,
                snippet: hit.snippet.clone(),
                validity: Validity::SnippetFallback,
            });
        }
    }
    Ok(sources)
}

/// Sources with readable text.
pub fn usable(sources: &[EvidenceSource]) -> Vec<&EvidenceSource> {
    sources.iter().filter(|s| s.evidence_text().is_some()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn explicit_table_has_133_rows() {
        assert_eq!(domain_data().scores.len(), 133);
        let spot = [
            ("britannica.com", 100),
            ("nature.com", 95),
            ("nejm.org", 94),
            ("plato.stanford.edu", 95),
            ("loc.gov", 97),
            ("bbc.co.uk", 93),
            ("researchgate.net", 75),
            ("scholar.google.com", 80),
            ("webmd.com", 72),
            ("france24.com", 83),
        ];
        for (domain, score) in spot {
            assert_eq!(domain_data().scores[domain], score, "{domain}");
        }
    }

    #[test]
    fn scores_follow_the_table_then_defaults() {
        let s = score_domain("https://www.britannica.com/x").unwrap();
        assert_eq!((s.score, s.source), (100, ScoreSource::ExplicitTable));
        assert_eq!(score_domain("https://randomcollege.edu/page").unwrap().score, 70);
        assert_eq!(score_domain("https://agency.gov/").unwrap().source, ScoreSource::EduGovOrgDefault);
        assert_eq!(score_domain("https://someblog.net/post").unwrap().score, 35);
        assert_eq!(score_domain("http://someblog.net/post").unwrap().score, 35);
        assert_eq!(score_domain("https://pubmed.ncbi.nlm.nih.gov/1").unwrap().score, 92);
        assert_eq!(score_domain("https://www.nih.gov/").unwrap().score, 94);
        assert!(score_domain("not a url").is_err());
    }

    #[test]
    fn blocking_uses_root_matching() {
        assert!(is_blocked("https://en.m.wikipedia.org/x"));
        assert!(is_blocked("https://scholar.google.com/x"));
        assert!(is_blocked("https://de.wikipedia.org/wiki/X"));
        assert!(!is_blocked("https://nature.com/x"));
        assert!(!is_blocked("https://notgoogle.com/x"));
        assert!(is_excluded("https://blog.example.co.uk/a", &["example.co.uk".to_string()]));
    }

    #[test]
    fn root_domain_knows_multi_label_suffixes() {
        assert_eq!(root_domain("news.bbc.co.uk"), "bbc.co.uk");
        assert_eq!(root_domain("en.m.wikipedia.org"), "wikipedia.org");
        assert_eq!(root_domain("localhost"), "localhost");
    }

    #[test]
    fn validation_flags_short_and_blocked_pages() {
        assert_eq!(validate_content(&"a".repeat(150)), Validity::TooShort);
        assert_eq!(validate_content(&format!("Please complete the CAPTCHA {}", "x".repeat(300))), Validity::CaptchaOrDenied);
        assert_eq!(validate_content(&"word ".repeat(60)), Validity::Valid);
    }

    fn subject() -> Subject {
        Subject::seed("Ada Lovelace").unwrap()
    }

    fn long(word: &str) -> String {
        format!("{word} ").repeat(80)
    }

    #[test]
    fn only_eligible_sources_are_fetched() {
        let search = SearchChain::new().with(
            FixtureSearch::new("fixture")
                .hit("Ada Lovelace", "https://someblog.net/ada", "blog")
                .hit("Ada Lovelace", "https://www.britannica.com/ada", "b")
                .hit("Ada Lovelace", "https://www.nature.com/ada", "n"),
        );
        let fetcher = FixtureFetcher::new()
            .page("https://www.britannica.com/ada", "short")
            .page("https://www.nature.com/ada", &format!("<p>captcha</p>{}", long("wait")));
        let sources = gather(&subject(), &search, &fetcher, &GatherOptions::default()).unwrap();
        assert_eq!(fetcher.requested(), vec!["https://www.britannica.com/ada", "https://www.nature.com/ada"]);
        assert_eq!(sources[0].validity, Validity::TooShort);
        assert_eq!(sources[0].content.as_deref(), Some("short"));
        assert_eq!(sources[1].validity, Validity::CaptchaOrDenied);
        assert_eq!(usable(&sources).len(), 2);
        assert!(usable(&sources).iter().all(|s| s.validity == Validity::SnippetFallback));
    }

    #[test]
    fn first_valid_page_stops_the_search() {
        let search = SearchChain::new().with(
            FixtureSearch::new("fixture")
                .hit("Ada Lovelace", "https://www.nejm.org/a", "")
                .hit("Ada Lovelace", "https://www.reuters.com/b", "")
                .hit("Ada Lovelace", "https://www.loc.gov/c", "")
                .hit("Ada Lovelace", "https://www.apnews.com/d", ""),
        );
        let fetcher = FixtureFetcher::new()
            .error("https://www.loc.gov/c", "HTTP 500")
            .page("https://www.nejm.org/a", &long("engine"))
            .page("https://www.reuters.com/b", &long("notes"));
        let sources = gather(&subject(), &search, &fetcher, &GatherOptions::default()).unwrap();
        // 97, then 94 and 94 in search order.
        assert_eq!(fetcher.requested(), vec!["https://www.loc.gov/c", "https://www.nejm.org/a"]);
        assert_eq!(sources.last().unwrap().validity, Validity::Valid);
    }

    #[test]
    fn at_most_three_fetches_then_snippets() {
        let mut fixture = FixtureSearch::new("fixture");
        let mut fetcher = FixtureFetcher::new();
        for d in ["nature.com", "science.org", "cell.com", "bmj.com"] {
            let url = format!("https://{d}/ada");
            fixture = fixture.hit("Ada Lovelace", &url, &format!("snippet from {d}"));
            fetcher = fetcher.page(&url, &long("Please verify you are human"));
        }
        let search = SearchChain::new().with(fixture);
        let sources = gather(&subject(), &search, &fetcher, &GatherOptions::default()).unwrap();
        assert_eq!(fetcher.requested().len(), 3);
        let fallbacks: Vec<_> = sources.iter().filter(|s| s.validity == Validity::SnippetFallback).collect();
        assert_eq!(fallbacks.len(), 3);
        assert_eq!(fallbacks[0].evidence_text(), Some("snippet from nature.com"));
    }

    #[test]
    fn blocked_and_excluded_urls_never_reach_fetch() {
        let search = SearchChain::new().with(
            FixtureSearch::new("fixture")
                .hit("Ada Lovelace", "https://en.m.wikipedia.org/wiki/Ada", "w")
                .hit("Ada Lovelace", "https://scholar.google.com/ada", "g")
                .hit("Ada Lovelace", "https://www.bbc.co.uk/ada", "b")
                .hit("Ada Lovelace", "https://someblog.net/ada", "x"),
        );
        let fetcher = FixtureFetcher::new();
        let options = GatherOptions { exclusions: vec!["bbc.co.uk".into()] };
        let sources = gather(&subject(), &search, &fetcher, &options).unwrap();
        assert!(fetcher.requested().is_empty());
        assert!(sources.is_empty());
    }

    #[test]
    fn chain_skips_unavailable_and_failing_backends() {
        let empty = SearchChain::new().with(FixtureSearch::unavailable("serper"));
        assert!(matches!(empty.query("x", 3), Err(EvidenceError::NoBackend)));
        let chain = SearchChain::new()
            .with(FixtureSearch::unavailable("serper"))
            .with(FixtureSearch::failing("brave"))
            .with(FixtureSearch::new("fixture").hit("x", "https://a.org", ""));
        assert_eq!(chain.available(), vec!["brave", "fixture"]);
        assert_eq!(chain.query("x", 3).unwrap().len(), 1);
        let down = SearchChain::new().with(FixtureSearch::failing("brave"));
        assert!(matches!(down.query("x", 3), Err(EvidenceError::SearchFailed(_))));
    }
}
