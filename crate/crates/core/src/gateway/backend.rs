use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde_json::json;
use tracing::{debug, warn};

use super::{BackendError, ChatBackend, CompletionRequest, FixtureKey};

#[derive(Debug, Clone, PartialEq)]
pub struct RetryPolicy {
    /// Retries after the first attempt.
    pub max_retries: u32,
    pub base_delay: Duration,
    pub max_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_retries: 4,
            base_delay: Duration::from_millis(500),
            max_delay: Duration::from_secs(30),
        }
    }
}

impl RetryPolicy {
    pub fn delay_for(&self, retry: u32) -> Duration {
        let factor = 2u32.saturating_pow(retry.min(16));
        self.base_delay.saturating_mul(factor).min(self.max_delay)
    }
}

/// OpenAI-compatible `POST {base_url}/chat/completions`.
pub struct HttpBackend {
    client: reqwest::blocking::Client,
    endpoint: String,
    api_key: Option<String>,
    retry: RetryPolicy,
}

impl HttpBackend {
    /// `api_key_env` names the environment variable holding the bearer token;
    /// an unset variable means no Authorization header.
    pub fn new(base_url: &str, api_key_env: Option<&str>, retry: RetryPolicy) -> Result<Self, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(300))
            .build()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        Ok(HttpBackend {
            client,
            endpoint: format!("{}/chat/completions", base_url.trim_end_matches('/')),
            api_key: api_key_env.and_then(|name| std::env::var(name).ok()),
            retry,
        })
    }

    fn attempt(&self, body: &serde_json::Value) -> Result<String, Attempt> {
        let mut request = self.client.post(&self.endpoint).json(body);
        if let Some(key) = &self.api_key {
            request = request.bearer_auth(key);
        }
        let response = request.send().map_err(|e| Attempt::Transient(e.to_string()))?;
        let status = response.status();
        let text = response.text().map_err(|e| Attempt::Transient(e.to_string()))?;
        if status.as_u16() == 429 || status.is_server_error() {
            return Err(Attempt::Transient(format!("HTTP {status}: {}", snippet(&text))));
        }
        if !status.is_success() {
            return Err(Attempt::Fatal(BackendError::Refusal {
                status: status.as_u16(),
                body: snippet(&text),
            }));
        }
        let parsed: serde_json::Value = serde_json::from_str(&text).map_err(|e| {
            Attempt::Fatal(BackendError::Refusal {
                status: status.as_u16(),
                body: format!("unreadable response body ({e}): {}", snippet(&text)),
            })
        })?;
        parsed["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| {
                Attempt::Fatal(BackendError::Refusal {
                    status: status.as_u16(),
                    body: format!("no message content: {}", snippet(&text)),
                })
            })
    }
}

enum Attempt {
    Transient(String),
    Fatal(BackendError),
}

fn snippet(text: &str) -> String {
    text.chars().take(300).collect()
}

impl ChatBackend for HttpBackend {
    fn complete(&self, request: &CompletionRequest) -> Result<String, BackendError> {
        let mut body = json!({
            "model": request.model_tag,
            "messages": [{"role": "user", "content": request.prompt}],
            "temperature": request.temperature,
        });
        if let Some(seed) = request.seed {
            body["seed"] = json!(seed);
        }
        let mut last = String::new();
        for retry in 0..=self.retry.max_retries {
            if retry > 0 {
                let delay = self.retry.delay_for(retry - 1);
                warn!(retry, ?delay, error = %last, "retrying chat completion");
                std::thread::sleep(delay);
            }
            match self.attempt(&body) {
                Ok(text) => return Ok(text),
                Err(Attempt::Fatal(err)) => return Err(err),
                Err(Attempt::Transient(message)) => last = message,
            }
        }
        Err(BackendError::Transport(format!(
            "gave up after {} attempts: {last}",
            self.retry.max_retries + 1
        )))
    }
}

#[derive(Debug, Clone)]
enum FixtureSource {
    Dir(PathBuf),
    Memory(HashMap<String, String>),
}

/// Replays recorded completions.
///
/// Fixtures live at `<root>/<template id>/<file>` where `<file>` is
/// [`FixtureKey::file_name`]. Lookup falls back from the exact key to the key
/// without its retry attempt, then to the bare digest, so one fixture can
/// serve every repeat of the same prompt.
#[derive(Debug, Clone)]
pub struct ScriptedMock {
    source: FixtureSource,
}

impl ScriptedMock {
    pub fn from_dir(root: impl Into<PathBuf>) -> Self {
        ScriptedMock {
            source: FixtureSource::Dir(root.into()),
        }
    }

    /// Keys are relative paths such as `qa_pairs/<digest>.txt`.
    pub fn in_memory(fixtures: HashMap<String, String>) -> Self {
        ScriptedMock {
            source: FixtureSource::Memory(fixtures),
        }
    }

    fn fetch(&self, relative: &str) -> Result<Option<String>, BackendError> {
        match &self.source {
            FixtureSource::Memory(map) => Ok(map.get(relative).cloned()),
            FixtureSource::Dir(root) => {
                let path = root.join(relative);
                match std::fs::read_to_string(&path) {
                    Ok(text) => Ok(Some(text)),
                    Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
                    Err(e) => Err(BackendError::Io(format!("{}: {e}", path.display()))),
                }
            }
        }
    }
}

impl ChatBackend for ScriptedMock {
    fn complete(&self, request: &CompletionRequest) -> Result<String, BackendError> {
        let origin = request
            .origin
            .as_ref()
            .ok_or_else(|| BackendError::MissingFixture("request carries no fixture key".into()))?;
        let key = &origin.key;
        let mut candidates = vec![key.clone()];
        for fallback in [
            FixtureKey { attempt: 0, ..key.clone() },
            FixtureKey { attempt: 0, ordinal: 0, ..key.clone() },
        ] {
            if !candidates.contains(&fallback) {
                candidates.push(fallback);
            }
        }
        for candidate in &candidates {
            if let Some(text) = self.fetch(&candidate.relative_path())? {
                debug!(fixture = %candidate.relative_path(), "replaying fixture");
                return Ok(text);
            }
        }
        Err(BackendError::MissingFixture(key.relative_path()))
    }
}

/// Forwards to an inner backend and writes every completion as a fixture
/// that [`ScriptedMock::from_dir`] will replay.
pub struct Recorder<B> {
    inner: B,
    root: PathBuf,
}

impl<B: ChatBackend> Recorder<B> {
    pub fn new(inner: B, root: impl Into<PathBuf>) -> Self {
        Recorder {
            inner,
            root: root.into(),
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }
}

impl<B: ChatBackend> ChatBackend for Recorder<B> {
    fn complete(&self, request: &CompletionRequest) -> Result<String, BackendError> {
        let text = self.inner.complete(request)?;
        if let Some(origin) = &request.origin {
            let path = self.root.join(origin.key.relative_path());
            let io = |e: std::io::Error| BackendError::Io(format!("{}: {e}", path.display()));
            if let Some(parent) = path.parent() {
                std::fs::create_dir_all(parent).map_err(io)?;
            }
            std::fs::write(&path, &text).map_err(io)?;
        }
        Ok(text)
    }
}
