//! Chat-completion gateway: template rendering, backend dispatch, throttling,
//! and one parse-feedback retry per request.

mod backend;
mod template;
mod throttle;

use std::collections::BTreeMap;
use std::sync::Arc;

use thiserror::Error;
use tracing::debug;

use crate::parse::ParseError;

pub use backend::{HttpBackend, Recorder, RetryPolicy, ScriptedMock};
pub use template::{binding_digest, bindings, Bindings, PromptTemplate, TemplateError, TemplateId, TemplateSet};
pub use throttle::{Permit, Throttle};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum BackendError {
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("backend refused the request (HTTP {status}): {body}")]
    Refusal { status: u16, body: String },
    #[error("no fixture for {0}")]
    MissingFixture(String),
    #[error("fixture io: {0}")]
    Io(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GatewayError {
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("{template} completion unparseable after {attempts} attempts: {error}")]
    Parse {
        template: TemplateId,
        attempts: u32,
        error: ParseError,
    },
}

/// Identifies a completion for fixture replay. `ordinal` distinguishes
/// deliberate repeats of one prompt (the i-th dialogue of a scenario, the
/// i-th scenario batch); `attempt` counts parse-feedback retries.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct FixtureKey {
    pub template: TemplateId,
    pub digest: String,
    pub ordinal: u32,
    pub attempt: u32,
}

impl FixtureKey {
    pub fn file_name(&self) -> String {
        let mut name = self.digest.clone();
        if self.ordinal > 0 {
            name.push_str(&format!(".o{}", self.ordinal));
        }
        if self.attempt > 0 {
            name.push_str(&format!(".r{}", self.attempt));
        }
        name.push_str(".txt");
        name
    }

    pub fn relative_path(&self) -> String {
        format!("{}/{}", self.template.as_str(), self.file_name())
    }
}

/// The template and bindings a prompt was rendered from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptOrigin {
    pub key: FixtureKey,
    pub bindings: Bindings,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompletionRequest {
    pub prompt: String,
    pub model_tag: String,
    pub temperature: f64,
    pub seed: Option<u64>,
    pub origin: Option<PromptOrigin>,
}

pub trait ChatBackend: Send + Sync {
    fn complete(&self, request: &CompletionRequest) -> Result<String, BackendError>;
}

impl<B: ChatBackend + ?Sized> ChatBackend for Arc<B> {
    fn complete(&self, request: &CompletionRequest) -> Result<String, BackendError> {
        (**self).complete(request)
    }
}

impl<B: ChatBackend + ?Sized> ChatBackend for Box<B> {
    fn complete(&self, request: &CompletionRequest) -> Result<String, BackendError> {
        (**self).complete(request)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GatewaySettings {
    pub default_model: String,
    pub stage_models: BTreeMap<TemplateId, String>,
    pub temperatures: BTreeMap<TemplateId, f64>,
    pub seed: Option<u64>,
    /// Total tries per request when the completion does not parse.
    pub parse_attempts: u32,
}

impl Default for GatewaySettings {
    fn default() -> Self {
        GatewaySettings {
            default_model: "gpt-3.5-turbo".into(),
            stage_models: BTreeMap::new(),
            temperatures: BTreeMap::new(),
            seed: None,
            parse_attempts: 2,
        }
    }
}

impl GatewaySettings {
    pub fn model_for(&self, id: TemplateId) -> &str {
        self.stage_models.get(&id).unwrap_or(&self.default_model)
    }

    pub fn temperature_for(&self, id: TemplateId) -> f64 {
        self.temperatures
            .get(&id)
            .copied()
            .unwrap_or_else(|| id.default_temperature())
    }
}

pub struct Gateway {
    backend: Box<dyn ChatBackend>,
    templates: TemplateSet,
    settings: GatewaySettings,
    throttle: Throttle,
}

impl Gateway {
    pub fn new(backend: impl ChatBackend + 'static, settings: GatewaySettings) -> Self {
        Gateway {
            backend: Box::new(backend),
            templates: TemplateSet::default(),
            settings,
            throttle: Throttle::unlimited(),
        }
    }

    pub fn with_templates(mut self, templates: TemplateSet) -> Self {
        self.templates = templates;
        self
    }

    pub fn with_throttle(mut self, throttle: Throttle) -> Self {
        self.throttle = throttle;
        self
    }

    pub fn settings(&self) -> &GatewaySettings {
        &self.settings
    }

    pub fn render(&self, id: TemplateId, bindings: &Bindings) -> Result<String, TemplateError> {
        self.templates.get(id).render(bindings)
    }

    /// Single completion, no parsing.
    pub fn complete(&self, request: &CompletionRequest) -> Result<String, BackendError> {
        let tokens = request.prompt.split_whitespace().count() as u64;
        let _permit = self.throttle.acquire(tokens);
        self.backend.complete(request)
    }

    /// Renders `id`, completes it and parses the result. A parse failure
    /// triggers one more request with the template's format reminder appended.
    pub fn ask<T>(
        &self,
        id: TemplateId,
        bindings: &Bindings,
        ordinal: u32,
        parse: impl Fn(&str) -> Result<T, ParseError>,
    ) -> Result<T, GatewayError> {
        let rendered = self.render(id, bindings)?;
        let digest = binding_digest(id, bindings);
        let attempts = self.settings.parse_attempts.max(1);
        let mut last_error = ParseError::EmptyParse;
        for attempt in 0..attempts {
            let prompt = if attempt == 0 {
                rendered.clone()
            } else {
                format!("{rendered}\n\n{}", id.format_reminder())
            };
            let request = CompletionRequest {
                prompt,
                model_tag: self.settings.model_for(id).to_string(),
                temperature: self.settings.temperature_for(id),
                seed: self.settings.seed,
                origin: Some(PromptOrigin {
                    key: FixtureKey {
                        template: id,
                        digest: digest.clone(),
                        ordinal,
                        attempt,
                    },
                    bindings: bindings.clone(),
                }),
            };
            let text = self.complete(&request)?;
            match parse(&text) {
                Ok(value) => return Ok(value),
                Err(error) => {
                    debug!(template = %id, attempt, %error, "completion did not parse");
                    last_error = error;
                }
            }
        }
        Err(GatewayError::Parse {
            template: id,
            attempts,
            error: last_error,
        })
    }
}
