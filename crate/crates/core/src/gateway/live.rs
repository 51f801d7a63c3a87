use std::time::Duration;

use serde_json::{json, Value};

use super::{Backend, BackendError, GenerationRequest};

/// Connection settings for an OpenAI-compatible HTTP endpoint.
#[derive(Clone, Debug)]
pub struct LiveSettings {
    pub base_url: String,
    pub api_key: String,
    pub model: String,
    pub embedding_model: String,
    pub timeout: Duration,
    pub max_embed_chars: usize,
}

impl LiveSettings {
    /// Reads `CORPUSFORGE_API_KEY`, `CORPUSFORGE_BASE_URL`,
    /// `CORPUSFORGE_MODEL` and `CORPUSFORGE_EMBEDDING_MODEL`.
    pub fn from_env() -> Result<Self, String> {
        let api_key = std::env::var("CORPUSFORGE_API_KEY").map_err(|_| "CORPUSFORGE_API_KEY is not set".to_string())?;
        let var = |name: &str, default: &str| std::env::var(name).unwrap_or_else(|_| default.to_string());
        Ok(LiveSettings {
            base_url: var("CORPUSFORGE_BASE_URL", "https://api.openai.com/v1"),
            api_key,
            model: var("CORPUSFORGE_MODEL", "gpt-4o-mini"),
            embedding_model: var("CORPUSFORGE_EMBEDDING_MODEL", "text-embedding-3-small"),
            timeout: Duration::from_secs(300),
            max_embed_chars: 8000,
        })
    }
}

/// Chat-completions and embeddings over HTTP.
pub struct LiveBackend {
    settings: LiveSettings,
    agent: ureq::Agent,
}

impl LiveBackend {
    pub fn new(settings: LiveSettings) -> Self {
        let config = ureq::Agent::config_builder()
            .timeout_global(Some(settings.timeout))
            .http_status_as_error(true)
            .build();
        LiveBackend { settings, agent: ureq::Agent::new_with_config(config) }
    }

    fn post(&self, path: &str, body: &Value) -> Result<Value, BackendError> {
        let url = format!("{}/{}", self.settings.base_url.trim_end_matches('/'), path);
        let mut response = self
            .agent
            .post(&url)
            .header("Authorization", &format!("Bearer {}", self.settings.api_key))
            .send_json(body)
            .map_err(classify)?;
        response.body_mut().read_json::<Value>().map_err(classify)
    }
}

fn classify(err: ureq::Error) -> BackendError {
    match err {
        ureq::Error::StatusCode(code) if code == 408 || code == 429 || code >= 500 => {
            BackendError::transient(format!("HTTP {code}"))
        }
        ureq::Error::StatusCode(code) => BackendError::permanent(format!("HTTP {code}")),
        ureq::Error::Timeout(_)
        | ureq::Error::Io(_)
        | ureq::Error::ConnectionFailed
        | ureq::Error::HostNotFound
        | ureq::Error::BodyStalled => BackendError::transient(err.to_string()),
        other => BackendError::permanent(other.to_string()),
    }
}

impl Backend for LiveBackend {
    fn complete(&self, request: &GenerationRequest) -> Result<String, BackendError> {
        let temperature = *request.temperature.numer() as f64 / *request.temperature.denom() as f64;
        let body = json!({
            "model": self.settings.model,
            "temperature": temperature,
            "max_tokens": request.max_tokens,
            "messages": [
                {"role": "system", "content": request.bundle.system_text},
                {"role": "user", "content": request.bundle.user_text},
            ],
        });
        let reply = self.post("chat/completions", &body)?;
        reply["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| BackendError::permanent("reply has no message content"))
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, BackendError> {
        let body = json!({ "model": self.settings.embedding_model, "input": texts });
        let reply = self.post("embeddings", &body)?;
        let data = reply["data"].as_array().ok_or_else(|| BackendError::permanent("reply has no data"))?;
        data.iter()
            .map(|item| {
                item["embedding"]
                    .as_array()
                    .and_then(|xs| xs.iter().map(Value::as_f64).collect::<Option<Vec<f64>>>())
                    .ok_or_else(|| BackendError::permanent("malformed embedding"))
            })
            .collect()
    }

    fn max_embed_chars(&self) -> usize {
        self.settings.max_embed_chars
    }

    fn name(&self) -> &str {
        "live"
    }
}
