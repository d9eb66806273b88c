use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};
use thiserror::Error;

/// Named placeholder values for one rendering.
pub type Bindings = BTreeMap<String, String>;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TemplateError {
    #[error("template {template}: no binding for placeholder {{{name}}}")]
    MissingBinding { template: TemplateId, name: String },
    #[error("template {template}: binding {name:?} matches no placeholder")]
    UnexpectedBinding { template: TemplateId, name: String },
    #[error("unknown template id {0:?}")]
    UnknownId(String),
    #[error("reading template {path}: {message}")]
    Io { path: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TemplateId {
    Scenarios,
    InfoTypes,
    Dialogue,
    QaPairs,
    QaAnswers,
    SlotNames,
    SlotValues,
    SlotSpecs,
}

impl TemplateId {
    pub const ALL: [TemplateId; 8] = [
        TemplateId::Scenarios,
        TemplateId::InfoTypes,
        TemplateId::Dialogue,
        TemplateId::QaPairs,
        TemplateId::QaAnswers,
        TemplateId::SlotNames,
        TemplateId::SlotValues,
        TemplateId::SlotSpecs,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TemplateId::Scenarios => "scenarios",
            TemplateId::InfoTypes => "info_types",
            TemplateId::Dialogue => "dialogue",
            TemplateId::QaPairs => "qa_pairs",
            TemplateId::QaAnswers => "qa_answers",
            TemplateId::SlotNames => "slot_names",
            TemplateId::SlotValues => "slot_values",
            TemplateId::SlotSpecs => "slot_specs",
        }
    }

    /// Generation prompts sample at 1.0 for diversity; annotation and
    /// translation prompts run greedy.
    pub fn default_temperature(self) -> f64 {
        match self {
            TemplateId::Scenarios | TemplateId::InfoTypes | TemplateId::Dialogue => 1.0,
            _ => 0.0,
        }
    }

    /// Appended to the prompt when the first completion failed to parse.
    pub fn format_reminder(self) -> &'static str {
        match self {
            TemplateId::Scenarios => {
                "Reminder: answer only with a numbered list, one scenario per line, like \"1. <Role of person 1> talks to <role of person 2> in order to <task goal>\"."
            }
            TemplateId::InfoTypes => {
                "Reminder: answer only with a numbered list containing at least three information types, one per line."
            }
            TemplateId::Dialogue => {
                "Reminder: write at least six turns between exactly two speakers, each line formatted as \"<Speaker>: <utterance>\"."
            }
            TemplateId::QaPairs | TemplateId::QaAnswers => {
                "Reminder: write each question-answer pair as two lines, each starting with the speaker tag followed by a colon."
            }
            TemplateId::SlotNames => {
                "Reminder: write exactly one line per question, in the format \"<question> -> <variable name>\"."
            }
            TemplateId::SlotValues => {
                "Reminder: for every question write the four lines \"Question:\", \"Variable:\", \"Answer:\" and \"Value:\"."
            }
            TemplateId::SlotSpecs => {
                "Reminder: for every Info Type write the three lines \"Info Type:\", \"Possible Values:\" and \"Description:\"."
            }
        }
    }

    fn builtin_body(self) -> &'static str {
        match self {
            TemplateId::Scenarios => include_str!("../../templates/scenarios.txt"),
            TemplateId::InfoTypes => include_str!("../../templates/info_types.txt"),
            TemplateId::Dialogue => include_str!("../../templates/dialogue.txt"),
            TemplateId::QaPairs => include_str!("../../templates/qa_pairs.txt"),
            TemplateId::QaAnswers => include_str!("../../templates/qa_answers.txt"),
            TemplateId::SlotNames => include_str!("../../templates/slot_names.txt"),
            TemplateId::SlotValues => include_str!("../../templates/slot_values.txt"),
            TemplateId::SlotSpecs => include_str!("../../templates/slot_specs.txt"),
        }
    }
}

impl fmt::Display for TemplateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TemplateId {
    type Err = TemplateError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TemplateId::ALL
            .into_iter()
            .find(|id| id.as_str() == s)
            .ok_or_else(|| TemplateError::UnknownId(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Piece {
    Text(String),
    Slot(String),
}

/// Template text with `{name}` placeholders; `{{` and `}}` are literal braces.
/// Braces around anything that is not a lowercase identifier stay literal.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub id: TemplateId,
    pub body: String,
    pieces: Vec<Piece>,
    placeholders: BTreeSet<String>,
}

fn is_placeholder_name(name: &str) -> bool {
    let mut chars = name.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_lowercase() || c == '_')
        && chars.all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_')
}

impl PromptTemplate {
    pub fn new(id: TemplateId, body: impl Into<String>) -> Self {
        let body = body.into();
        let mut pieces = Vec::new();
        let mut text = String::new();
        let mut rest = body.as_str();
        while !rest.is_empty() {
            if let Some(after) = rest.strip_prefix("{{") {
                text.push('{');
                rest = after;
            } else if let Some(after) = rest.strip_prefix("}}") {
                text.push('}');
                rest = after;
            } else if rest.starts_with('{') {
                match rest[1..].find('}') {
                    Some(end) if is_placeholder_name(&rest[1..1 + end]) => {
                        if !text.is_empty() {
                            pieces.push(Piece::Text(std::mem::take(&mut text)));
                        }
                        pieces.push(Piece::Slot(rest[1..1 + end].to_string()));
                        rest = &rest[end + 2..];
                    }
                    _ => {
                        text.push('{');
                        rest = &rest[1..];
                    }
                }
            } else {
                let ch = rest.chars().next().unwrap();
                text.push(ch);
                rest = &rest[ch.len_utf8()..];
            }
        }
        if !text.is_empty() {
            pieces.push(Piece::Text(text));
        }
        let placeholders = pieces
            .iter()
            .filter_map(|p| match p {
                Piece::Slot(name) => Some(name.clone()),
                Piece::Text(_) => None,
            })
            .collect();
        PromptTemplate {
            id,
            body,
            pieces,
            placeholders,
        }
    }

    pub fn builtin(id: TemplateId) -> Self {
        PromptTemplate::new(id, id.builtin_body())
    }

    pub fn placeholders(&self) -> &BTreeSet<String> {
        &self.placeholders
    }

    /// Renders with exactly the declared placeholders bound. Trailing
    /// whitespace of the result is trimmed.
    pub fn render(&self, bindings: &Bindings) -> Result<String, TemplateError> {
        if let Some(extra) = bindings.keys().find(|k| !self.placeholders.contains(*k)) {
            return Err(TemplateError::UnexpectedBinding {
                template: self.id,
                name: extra.clone(),
            });
        }
        let mut out = String::with_capacity(self.body.len());
        for piece in &self.pieces {
            match piece {
                Piece::Text(text) => out.push_str(text),
                Piece::Slot(name) => {
                    let value = bindings.get(name).ok_or_else(|| TemplateError::MissingBinding {
                        template: self.id,
                        name: name.clone(),
                    })?;
                    out.push_str(value);
                }
            }
        }
        out.truncate(out.trim_end().len());
        Ok(out)
    }
}

/// The eight templates, optionally overridden from `<dir>/<id>.txt`.
#[derive(Debug, Clone)]
pub struct TemplateSet {
    templates: BTreeMap<TemplateId, PromptTemplate>,
}

impl Default for TemplateSet {
    fn default() -> Self {
        TemplateSet {
            templates: TemplateId::ALL
                .into_iter()
                .map(|id| (id, PromptTemplate::builtin(id)))
                .collect(),
        }
    }
}

impl TemplateSet {
    pub fn from_dir(dir: &Path) -> Result<Self, TemplateError> {
        let mut set = TemplateSet::default();
        for id in TemplateId::ALL {
            let path = dir.join(format!("{}.txt", id.as_str()));
            if path.exists() {
                let body = std::fs::read_to_string(&path).map_err(|e| TemplateError::Io {
                    path: path.display().to_string(),
                    message: e.to_string(),
                })?;
                set.templates.insert(id, PromptTemplate::new(id, body));
            }
        }
        Ok(set)
    }

    pub fn get(&self, id: TemplateId) -> &PromptTemplate {
        &self.templates[&id]
    }
}

/// Stable digest of a template id and its bindings, independent of binding
/// insertion order.
pub fn binding_digest(id: TemplateId, bindings: &Bindings) -> String {
    let mut hasher = Sha256::new();
    hasher.update(id.as_str().as_bytes());
    hasher.update([0u8]);
    for (name, value) in bindings {
        hasher.update(name.as_bytes());
        hasher.update([0u8]);
        hasher.update(value.as_bytes());
        hasher.update([0u8]);
    }
    let digest = hasher.finalize();
    digest[..16].iter().map(|b| format!("{b:02x}")).collect()
}

pub fn bindings<const N: usize>(pairs: [(&str, String); N]) -> Bindings {
    pairs
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
}
