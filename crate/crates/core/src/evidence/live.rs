//! HTTP clients for search, page fetching and MediaWiki.

use std::collections::HashMap;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use parking_lot::Mutex;
use serde_json::{json, Value};

use super::{host_of, EvidenceError, PageFetcher, ReferenceArticle, ReferenceClient, SearchBackend, SearchHit};
use crate::gateway::RetryPolicy;

const TIMEOUT: Duration = Duration::from_secs(30);

fn agent() -> ureq::Agent {
    let config = ureq::Agent::config_builder().timeout_global(Some(TIMEOUT)).http_status_as_error(true).build();
    ureq::Agent::new_with_config(config)
}

/// Spaces out requests to the same host. Shared by every fetcher in the
/// process.
pub struct DomainRateLimiter {
    interval: Duration,
    next: Mutex<HashMap<String, Instant>>,
}

impl DomainRateLimiter {
    pub fn new(interval: Duration) -> Self {
        DomainRateLimiter { interval, next: Mutex::new(HashMap::new()) }
    }

    /// One request per second per host.
    pub fn global() -> &'static DomainRateLimiter {
        static LIMITER: OnceLock<DomainRateLimiter> = OnceLock::new();
        LIMITER.get_or_init(|| DomainRateLimiter::new(Duration::from_secs(1)))
    }

    /// Blocks until a request to `host` may go out.
    pub fn wait(&self, host: &str) {
        let slot = {
            let mut next = self.next.lock();
            let now = Instant::now();
            let slot = next.get(host).copied().filter(|t| *t > now).unwrap_or(now);
            next.insert(host.to_string(), slot + self.interval);
            slot
        };
        let now = Instant::now();
        if slot > now {
            std::thread::sleep(slot - now);
        }
    }
}

pub struct SerperSearch {
    api_key: String,
    agent: ureq::Agent,
}

impl SerperSearch {
    pub fn new(api_key: impl Into<String>) -> Self {
        SerperSearch { api_key: api_key.into(), agent: agent() }
    }

    /// Reads `SERPER_API_KEY`.
    pub fn from_env() -> Option<Self> {
        std::env::var("SERPER_API_KEY").ok().filter(|k| !k.is_empty()).map(Self::new)
    }
}

impl SearchBackend for SerperSearch {
    fn name(&self) -> &str {
        "serper"
    }

    fn query(&self, query: &str, k: usize) -> Result<Vec<SearchHit>, String> {
        let mut response = self
            .agent
            .post("https://google.serper.dev/search")
            .header("X-API-KEY", &self.api_key)
            .send_json(json!({ "q": query, "num": k }))
            .map_err(|e| e.to_string())?;
        let body: Value = response.body_mut().read_json().map_err(|e| e.to_string())?;
        Ok(hits(&body["organic"], "link", "snippet", k))
    }
}

pub struct BraveSearch {
    api_key: String,
    agent: ureq::Agent,
}

impl BraveSearch {
    pub fn new(api_key: impl Into<String>) -> Self {
        BraveSearch { api_key: api_key.into(), agent: agent() }
    }

    /// Reads `BRAVE_API_KEY`.
    pub fn from_env() -> Option<Self> {
        std::env::var("BRAVE_API_KEY").ok().filter(|k| !k.is_empty()).map(Self::new)
    }
}

impl SearchBackend for BraveSearch {
    fn name(&self) -> &str {
        "brave"
    }

    fn query(&self, query: &str, k: usize) -> Result<Vec<SearchHit>, String> {
        let mut response = self
            .agent
            .get("https://api.search.brave.com/res/v1/web/search")
            .query("q", query)
            .query("count", k.to_string())
            .header("X-Subscription-Token", &self.api_key)
            .header("Accept", "application/json")
            .call()
            .map_err(|e| e.to_string())?;
        let body: Value = response.body_mut().read_json().map_err(|e| e.to_string())?;
        Ok(hits(&body["web"]["results"], "url", "description", k))
    }
}

fn hits(list: &Value, url_field: &str, snippet_field: &str, k: usize) -> Vec<SearchHit> {
    list.as_array()
        .into_iter()
        .flatten()
        .filter_map(|item| {
            let url = item[url_field].as_str()?;
            let snippet = item[snippet_field].as_str().unwrap_or_default();
            Some(SearchHit { url: url.to_string(), snippet: snippet.to_string() })
        })
        .take(k)
        .collect()
}

/// Plain HTTP GET with markup stripped from HTML responses.
pub struct HttpFetcher {
    agent: ureq::Agent,
}

impl Default for HttpFetcher {
    fn default() -> Self {
        HttpFetcher { agent: agent() }
    }
}

impl PageFetcher for HttpFetcher {
    fn fetch(&self, url: &str) -> Result<String, String> {
        let (_, host) = host_of(url).map_err(|e| e.to_string())?;
        DomainRateLimiter::global().wait(&host);
        let mut response = self.agent.get(url).call().map_err(|e| e.to_string())?;
        let html = response.body_mut().read_to_string().map_err(|e| e.to_string())?;
        Ok(html_to_text(&html))
    }
}

/// Drops scripts, styles and tags, and collapses whitespace.
pub fn html_to_text(html: &str) -> String {
    let mut out = String::with_capacity(html.len());
    let lower = html.to_ascii_lowercase();
    let mut i = 0;
    while i < html.len() {
        let rest = &lower[i..];
        let skip_to = ["script", "style", "noscript"].iter().find_map(|tag| {
            let open = format!("<{tag}");
            rest.starts_with(&open).then(|| {
                let close = format!("</{tag}>");
                rest.find(&close).map(|p| i + p + close.len()).unwrap_or(html.len())
            })
        });
        if let Some(end) = skip_to {
            out.push(' ');
            i = end;
        } else if rest.starts_with('<') {
            out.push(' ');
            i = rest.find('>').map(|p| i + p + 1).unwrap_or(html.len());
        } else {
            let ch = html[i..].chars().next().expect("in bounds");
            out.push(ch);
            i += ch.len_utf8();
        }
    }
    let decoded = out.replace("&amp;", "&").replace("&nbsp;", " ").replace("&quot;", "\"").replace("&#39;", "'");
    decoded.replace("&lt;", "<").replace("&gt;", ">").split_whitespace().collect::<Vec<_>>().join(" ")
}

/// The MediaWiki query API with `redirects=1` and plain-text extracts.
pub struct MediaWikiClient {
    api_url: String,
    agent: ureq::Agent,
    policy: RetryPolicy,
    jitter: Mutex<rand_chacha::ChaCha20Rng>,
}

impl MediaWikiClient {
    pub fn new(api_url: impl Into<String>, policy: RetryPolicy) -> Self {
        let jitter = policy.jitter_rng();
        MediaWikiClient { api_url: api_url.into(), agent: agent(), policy, jitter }
    }

    /// English Wikipedia, or `CORPUSFORGE_MEDIAWIKI_API` when set.
    pub fn english(policy: RetryPolicy) -> Self {
        let url = std::env::var("CORPUSFORGE_MEDIAWIKI_API")
            .unwrap_or_else(|_| "https://en.wikipedia.org/w/api.php".to_string());
        Self::new(url, policy)
    }

    fn query(&self, title: &str) -> Result<Value, ureq::Error> {
        let mut response = self
            .agent
            .get(&self.api_url)
            .query("action", "query")
            .query("prop", "extracts")
            .query("explaintext", "1")
            .query("redirects", "1")
            .query("format", "json")
            .query("formatversion", "2")
            .query("titles", title)
            .header("User-Agent", "corpusforge/0.1")
            .call()?;
        response.body_mut().read_json()
    }
}

/// Reads the first page out of a `formatversion=2` query reply.
pub fn parse_extract(body: &Value) -> Option<ReferenceArticle> {
    let page = body["query"]["pages"].as_array()?.first()?;
    if page.get("missing").is_some() || page.get("invalid").is_some() {
        return None;
    }
    let text = page["extract"].as_str()?.trim();
    if text.is_empty() {
        return None;
    }
    Some(ReferenceArticle { title: page["title"].as_str()?.to_string(), text: text.to_string() })
}

impl ReferenceClient for MediaWikiClient {
    fn fetch_reference_article(&self, title: &str) -> Result<Option<ReferenceArticle>, EvidenceError> {
        let mut attempt = 0;
        loop {
            match self.query(title) {
                Ok(body) => return Ok(parse_extract(&body)),
                Err(ureq::Error::StatusCode(404)) => return Ok(None),
                Err(e) if attempt < self.policy.max_retries => {
                    log::debug!("MediaWiki lookup of {title:?} failed, retrying: {e}");
                    self.policy.sleep(attempt, &self.jitter);
                    attempt += 1;
                }
                Err(e) => return Err(EvidenceError::Transport { title: title.to_string(), message: e.to_string() }),
            }
        }
    }
}
