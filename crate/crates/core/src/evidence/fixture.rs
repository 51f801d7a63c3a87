//! In-memory stand-ins for search, fetching and encyclopedia lookups.

use std::collections::{BTreeMap, BTreeSet};

use parking_lot::Mutex;

use super::{EvidenceError, PageFetcher, ReferenceArticle, ReferenceClient, SearchBackend, SearchHit};
use crate::canonical::canonicalize;

/// Search results keyed by query.
#[derive(Default)]
pub struct FixtureSearch {
    name: String,
    results: BTreeMap<String, Vec<SearchHit>>,
    available: bool,
    failing: bool,
}

impl FixtureSearch {
    pub fn new(name: &str) -> Self {
        FixtureSearch { name: name.to_string(), available: true, ..Default::default() }
    }

    /// A backend that is configured but has no credentials.
    pub fn unavailable(name: &str) -> Self {
        FixtureSearch { name: name.to_string(), ..Default::default() }
    }

    /// A backend whose every query errors.
    pub fn failing(name: &str) -> Self {
        FixtureSearch { name: name.to_string(), available: true, failing: true, ..Default::default() }
    }

    pub fn hit(mut self, query: &str, url: &str, snippet: &str) -> Self {
        self.results
            .entry(canonicalize(query))
            .or_default()
            .push(SearchHit { url: url.to_string(), snippet: snippet.to_string() });
        self
    }
}

impl SearchBackend for FixtureSearch {
    fn name(&self) -> &str {
        &self.name
    }

    fn is_available(&self) -> bool {
        self.available
    }

    fn query(&self, query: &str, k: usize) -> Result<Vec<SearchHit>, String> {
        if self.failing {
            return Err("fixture outage".into());
        }
        let mut hits = self.results.get(&canonicalize(query)).cloned().unwrap_or_default();
        hits.truncate(k);
        Ok(hits)
    }
}

/// Pages keyed by URL. Records every URL it is asked for.
#[derive(Default)]
pub struct FixtureFetcher {
    pages: BTreeMap<String, Result<String, String>>,
    requested: Mutex<Vec<String>>,
}

impl FixtureFetcher {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn page(mut self, url: &str, body: &str) -> Self {
        self.pages.insert(url.to_string(), Ok(body.to_string()));
        self
    }

    pub fn error(mut self, url: &str, message: &str) -> Self {
        self.pages.insert(url.to_string(), Err(message.to_string()));
        self
    }

    pub fn requested(&self) -> Vec<String> {
        self.requested.lock().clone()
    }
}

impl PageFetcher for FixtureFetcher {
    fn fetch(&self, url: &str) -> Result<String, String> {
        self.requested.lock().push(url.to_string());
        self.pages.get(url).cloned().unwrap_or_else(|| Err("HTTP 404".into()))
    }
}

/// Encyclopedia pages, redirects and simulated outages, keyed by
/// canonical title.
#[derive(Clone, Debug, Default)]
pub struct FixtureReference {
    pages: BTreeMap<String, ReferenceArticle>,
    redirects: BTreeMap<String, String>,
    faults: BTreeSet<String>,
}

const MAX_REDIRECTS: usize = 5;

impl FixtureReference {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn page(mut self, title: &str, text: &str) -> Self {
        self.pages
            .insert(canonicalize(title), ReferenceArticle { title: title.to_string(), text: text.to_string() });
        self
    }

    pub fn redirect(mut self, from: &str, to: &str) -> Self {
        self.redirects.insert(canonicalize(from), to.to_string());
        self
    }

    pub fn fault(mut self, title: &str) -> Self {
        self.faults.insert(canonicalize(title));
        self
    }

    pub fn titles(&self) -> impl Iterator<Item = &str> {
        self.pages.values().map(|p| p.title.as_str())
    }
}

impl ReferenceClient for FixtureReference {
    fn fetch_reference_article(&self, title: &str) -> Result<Option<ReferenceArticle>, EvidenceError> {
        let mut key = canonicalize(title);
        for _ in 0..=MAX_REDIRECTS {
            if self.faults.contains(&key) {
                return Err(EvidenceError::Transport { title: title.to_string(), message: "fixture outage".into() });
            }
            match self.redirects.get(&key) {
                Some(target) => key = canonicalize(target),
                None => return Ok(self.pages.get(&key).cloned()),
            }
        }
        Ok(None)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn redirects_resolve_to_the_target_page() {
        let wiki = FixtureReference::new()
            .page("John F. Kennedy", "John Fitzgerald Kennedy was an American politician.")
            .redirect("JFK", "John F. Kennedy")
            .fault("Broken Page");
        let page = wiki.fetch_reference_article("JFK").unwrap().unwrap();
        assert_eq!(page.title, "John F. Kennedy");
        assert!(wiki.fetch_reference_article("Nobody Here").unwrap().is_none());
        assert!(wiki.fetch_reference_article("Broken Page").is_err());
    }

    #[test]
    fn redirect_cycles_end_as_absent() {
        let wiki = FixtureReference::new().redirect("A", "B").redirect("B", "A");
        assert!(wiki.fetch_reference_article("A").unwrap().is_none());
    }
}
