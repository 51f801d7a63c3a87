//! Every generation and embedding call goes through [`Gateway`].
//!
//! The gateway owns retry with exponential backoff, the global in-flight
//! cap shared by all pipeline stages, and batch execution. Backends only
//! have to answer single requests and say whether a failure is worth
//! retrying.

mod grounding;
mod live;
pub mod mock;
mod retry;

use std::sync::Arc;
use std::time::Duration;

use num_rational::Ratio;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::RunConfig;
use crate::prompts::PromptBundle;

pub use grounding::{parse_fact_sheet, self_ground, Fact, FactSheet, GroundingError};
pub use live::{LiveBackend, LiveSettings};
pub use retry::{CallStats, RetryPolicy, Semaphore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureKind {
    Transient,
    Permanent,
}

#[derive(Clone, Debug, Error, PartialEq, Eq)]
#[error("{kind:?} backend failure: {message}")]
pub struct BackendError {
    pub kind: FailureKind,
    pub message: String,
}

impl BackendError {
    pub fn transient(message: impl Into<String>) -> Self {
        BackendError { kind: FailureKind::Transient, message: message.into() }
    }

    pub fn permanent(message: impl Into<String>) -> Self {
        BackendError { kind: FailureKind::Permanent, message: message.into() }
    }
}

/// A text-generation and embedding provider.
pub trait Backend: Send + Sync {
    fn complete(&self, request: &GenerationRequest) -> Result<String, BackendError>;

    /// One raw vector per input. The gateway normalizes them.
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, BackendError>;

    fn classify_failure(&self, error: &BackendError) -> FailureKind {
        error.kind
    }

    /// Longest input, in characters, the embedding endpoint accepts.
    fn max_embed_chars(&self) -> usize {
        8000
    }

    fn name(&self) -> &str;
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub bundle: PromptBundle,
    pub max_tokens: u32,
    pub temperature: Ratio<u64>,
    pub tag: String,
}

impl GenerationRequest {
    pub fn new(bundle: PromptBundle, max_tokens: u32, tag: impl Into<String>) -> Self {
        GenerationRequest { bundle, max_tokens, temperature: Ratio::from_integer(0), tag: tag.into() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Ok,
    /// Every attempt failed transiently.
    Exhausted,
    /// The backend reported a failure that retrying cannot fix.
    PermanentFailure,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendResult {
    /// Empty unless `outcome` is `Ok`.
    pub text: String,
    pub attempts: u32,
    pub outcome: Outcome,
    pub last_error: Option<String>,
}

impl BackendResult {
    pub fn ok_text(&self) -> Option<&str> {
        (self.outcome == Outcome::Ok).then_some(self.text.as_str())
    }
}

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("embed called with no texts")]
    EmptyEmbedInput,
    #[error("embedding failed after {attempts} attempts: {message}")]
    EmbedFailed { attempts: u32, message: String },
    #[error("backend returned {got} vectors for {expected} texts")]
    EmbedShape { expected: usize, got: usize },
    #[error("backend returned a zero vector")]
    ZeroVector,
}

/// Shared front door to a backend.
pub struct Gateway {
    backend: Arc<dyn Backend>,
    policy: RetryPolicy,
    semaphore: Semaphore,
    stats: CallStats,
    jitter: parking_lot::Mutex<rand_chacha::ChaCha20Rng>,
}

impl Gateway {
    pub fn new(backend: Arc<dyn Backend>, policy: RetryPolicy, concurrency_cap: usize) -> Self {
        let jitter = policy.jitter_rng();
        Gateway { backend, policy, semaphore: Semaphore::new(concurrency_cap), stats: CallStats::default(), jitter }
    }

    pub fn from_config(backend: Arc<dyn Backend>, config: &RunConfig) -> Self {
        let policy = RetryPolicy {
            max_retries: config.max_retries,
            base: Duration::from_millis(config.backoff_base_ms),
            cap: Duration::from_millis(config.backoff_cap_ms),
            seed: config.random_seed,
        };
        Self::new(backend, policy, config.global_concurrency_cap as usize)
    }

    pub fn backend(&self) -> &dyn Backend {
        self.backend.as_ref()
    }

    /// Highest number of backend calls ever in flight at once.
    pub fn peak_in_flight(&self) -> usize {
        self.semaphore.peak()
    }

    pub fn stats(&self) -> &CallStats {
        &self.stats
    }

    pub fn complete(&self, request: &GenerationRequest) -> BackendResult {
        let mut attempts = 0;
        loop {
            attempts += 1;
            let result = {
                let _permit = self.semaphore.acquire();
                self.stats.record_call();
                self.backend.complete(request)
            };
            match result {
                Ok(text) => return BackendResult { text, attempts, outcome: Outcome::Ok, last_error: None },
                Err(err) => {
                    let kind = self.backend.classify_failure(&err);
                    log::debug!("{} attempt {attempts} failed: {err}", request.tag);
                    if kind == FailureKind::Permanent {
                        return BackendResult {
                            text: String::new(),
                            attempts,
                            outcome: Outcome::PermanentFailure,
                            last_error: Some(err.message),
                        };
                    }
                    if attempts > self.policy.max_retries {
                        return BackendResult {
                            text: String::new(),
                            attempts,
                            outcome: Outcome::Exhausted,
                            last_error: Some(err.message),
                        };
                    }
                    self.stats.record_retry();
                    self.policy.sleep(attempts - 1, &self.jitter);
                }
            }
        }
    }

    /// Runs a group of requests with up to `cap` of them in flight and
    /// returns results in input order.
    pub fn complete_all(&self, requests: &[GenerationRequest]) -> Vec<BackendResult> {
        let workers = self.semaphore.capacity().min(requests.len()).max(1);
        let next = std::sync::atomic::AtomicUsize::new(0);
        let results: Vec<parking_lot::Mutex<Option<BackendResult>>> =
            requests.iter().map(|_| parking_lot::Mutex::new(None)).collect();
        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                    let Some(request) = requests.get(i) else { break };
                    *results[i].lock() = Some(self.complete(request));
                });
            }
        });
        results.into_iter().map(|r| r.into_inner().expect("every request ran")).collect()
    }

    /// Embeds `texts`, truncating each to the backend's limit (keeping the
    /// head) and returning L2-normalized vectors.
    pub fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, GatewayError> {
        if texts.is_empty() {
            return Err(GatewayError::EmptyEmbedInput);
        }
        let limit = self.backend.max_embed_chars();
        let inputs: Vec<String> = texts.iter().map(|t| truncate_chars(t, limit).to_string()).collect();
        let mut attempts = 0;
        let raw = loop {
            attempts += 1;
            let result = {
                let _permit = self.semaphore.acquire();
                self.stats.record_call();
                self.backend.embed(&inputs)
            };
            match result {
                Ok(vectors) => break vectors,
                Err(err) => {
                    let kind = self.backend.classify_failure(&err);
                    if kind == FailureKind::Permanent || attempts > self.policy.max_retries {
                        return Err(GatewayError::EmbedFailed { attempts, message: err.message });
                    }
                    self.stats.record_retry();
                    self.policy.sleep(attempts - 1, &self.jitter);
                }
            }
        };
        if raw.len() != texts.len() {
            return Err(GatewayError::EmbedShape { expected: texts.len(), got: raw.len() });
        }
        raw.into_iter().map(normalize).collect()
    }
}

fn truncate_chars(text: &str, max_chars: usize) -> &str {
    match text.char_indices().nth(max_chars) {
        Some((idx, _)) => &text[..idx],
        None => text,
    }
}

fn normalize(mut v: Vec<f64>) -> Result<Vec<f64>, GatewayError> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(GatewayError::ZeroVector);
    }
    for x in &mut v {
        *x /= norm;
    }
    Ok(v)
}

/// Dot product of two unit vectors.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;
    use crate::prompts::{PromptStage, TemplateSet};
    use crate::types::Subject;
    use parking_lot::Mutex;
    use std::collections::BTreeMap;

    struct Flaky {
        failures_left: Mutex<u32>,
        kind: FailureKind,
    }

    impl Backend for Flaky {
        fn complete(&self, _: &GenerationRequest) -> Result<String, BackendError> {
            let mut left = self.failures_left.lock();
            if *left > 0 {
                *left -= 1;
                return Err(BackendError { kind: self.kind, message: "boom".into() });
            }
            Ok("fine".into())
        }
        fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, BackendError> {
            Ok(texts.iter().map(|t| vec![t.len() as f64, 1.0]).collect())
        }
        fn name(&self) -> &str {
            "flaky"
        }
    }

    fn gateway(failures: u32, kind: FailureKind, max_retries: u32) -> Gateway {
        let backend = Arc::new(Flaky { failures_left: Mutex::new(failures), kind });
        Gateway::new(backend, RetryPolicy::immediate(max_retries), 4)
    }

    fn request() -> GenerationRequest {
        let config = RunConfig::general("Vannevar Bush");
        let subject = Subject::seed("Vannevar Bush").unwrap();
        let bundle = TemplateSet::builtin().render(PromptStage::Outline, &config, &subject, &BTreeMap::new()).unwrap();
        GenerationRequest::new(bundle, 64, "t")
    }

    #[test]
    fn healthy_call_takes_one_attempt() {
        let r = gateway(0, FailureKind::Transient, 3).complete(&request());
        assert_eq!((r.outcome, r.attempts, r.text.as_str()), (Outcome::Ok, 1, "fine"));
        assert_eq!(request().temperature, Ratio::from_integer(0));
    }

    #[test]
    fn two_failures_then_success() {
        let r = gateway(2, FailureKind::Transient, 3).complete(&request());
        assert_eq!((r.outcome, r.attempts), (Outcome::Ok, 3));
    }

    #[test]
    fn always_failing_is_exhausted() {
        let r = gateway(u32::MAX, FailureKind::Transient, 2).complete(&request());
        assert_eq!((r.outcome, r.attempts), (Outcome::Exhausted, 3));
        assert!(r.ok_text().is_none());
    }

    #[test]
    fn permanent_failure_is_not_retried() {
        let r = gateway(5, FailureKind::Permanent, 3).complete(&request());
        assert_eq!((r.outcome, r.attempts), (Outcome::PermanentFailure, 1));
    }

    #[test]
    fn embed_normalizes_and_rejects_empty() {
        let g = gateway(0, FailureKind::Transient, 0);
        let v = g.embed(&["abc".into(), "abc".into()]).unwrap();
        assert_eq!(v[0], v[1]);
        let norm: f64 = v[0].iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-9);
        assert!(matches!(g.embed(&[]), Err(GatewayError::EmptyEmbedInput)));
    }

    #[test]
    fn complete_all_keeps_order_and_cap() {
        let g = gateway(0, FailureKind::Transient, 0);
        let requests: Vec<_> = (0..20).map(|_| request()).collect();
        let results = g.complete_all(&requests);
        assert_eq!(results.len(), 20);
        assert!(results.iter().all(|r| r.outcome == Outcome::Ok));
        assert!(g.peak_in_flight() <= 4);
    }

    #[test]
    fn truncation_keeps_head() {
        assert_eq!(truncate_chars("héllo", 2), "hé");
        assert_eq!(truncate_chars("hi", 5), "hi");
    }
}
