//! Shared domain types: scenarios, dialogues, QA pairs, slot values, state
//! updates, compiled dialogue states, slot specs and training examples.
//!
//! All types are plain immutable values. Constructors validate invariants and
//! deserialization routes through the same checks.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// Wire token for a slot that one speaker asked about but nobody filled yet.
pub const REQUESTED_TOKEN: &str = "?";
/// Wire token for a slot with no value.
pub const EMPTY_TOKEN: &str = "none";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("scenario description must be a non-empty single line")]
    BadScenarioDescription,
    #[error("scenario embedding is not unit-normalized (norm {0})")]
    EmbeddingNotUnit(f64),
    #[error("speaker tag must be non-empty")]
    EmptySpeaker,
    #[error("dialogue {0} has fewer than 2 turns")]
    TooFewTurns(String),
    #[error("dialogue {id} must alternate between exactly two speakers (found {found:?})")]
    SpeakerStructure { id: String, found: Vec<String> },
    #[error("dialogue {id}: turn index {found} where {expected} was expected")]
    TurnIndex {
        id: String,
        expected: usize,
        found: usize,
    },
    #[error("question must be non-empty")]
    EmptyQuestion,
    #[error("answer text must be non-empty")]
    EmptyAnswer,
    #[error("slot name must be non-empty")]
    EmptySlot,
    #[error("filled value must be non-empty and distinct from the reserved tokens, got {0:?}")]
    BadFilledValue(String),
    #[error("slot {0:?} appears more than once in one state update")]
    DuplicateSlot(String),
    #[error("slot description must be non-empty")]
    EmptyDescription,
    #[error("slot example values must be non-empty strings")]
    EmptyExampleValue,
    #[error("update for turn {found} cannot follow state at turn {prev}")]
    OutOfOrderUpdate { prev: i64, found: usize },
}

/// Canonical comparison key for a slot name: trimmed, lowercased, inner
/// whitespace collapsed.
pub fn slot_key(name: &str) -> String {
    name.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub id: String,
    pub description: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<Vec<f64>>,
}

impl Scenario {
    pub fn new(id: impl Into<String>, description: impl Into<String>) -> Result<Self, ModelError> {
        let description = description.into();
        let trimmed = description.trim();
        if trimmed.is_empty() || trimmed.contains('\n') {
            return Err(ModelError::BadScenarioDescription);
        }
        Ok(Scenario {
            id: id.into(),
            description: trimmed.to_string(),
            embedding: None,
        })
    }

    pub fn with_embedding(mut self, embedding: Vec<f64>) -> Result<Self, ModelError> {
        let norm = embedding.iter().map(|x| x * x).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-6 {
            return Err(ModelError::EmbeddingNotUnit(norm));
        }
        self.embedding = Some(embedding);
        Ok(self)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    #[serde(skip)]
    pub index: usize,
    pub speaker: String,
    pub text: String,
}

impl Turn {
    /// The turn as it appears in prompts and training contexts.
    pub fn render(&self) -> String {
        format!("{}: {}", self.speaker, self.text)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Dialogue {
    pub id: String,
    pub scenario_id: String,
    pub turns: Vec<Turn>,
}

impl Dialogue {
    /// Builds a dialogue from `(speaker, text)` pairs, assigning indices.
    pub fn new(
        id: impl Into<String>,
        scenario_id: impl Into<String>,
        turns: impl IntoIterator<Item = (String, String)>,
    ) -> Result<Self, ModelError> {
        let turns = turns
            .into_iter()
            .enumerate()
            .map(|(index, (speaker, text))| Turn {
                index,
                speaker,
                text,
            })
            .collect();
        let dialogue = Dialogue {
            id: id.into(),
            scenario_id: scenario_id.into(),
            turns,
        };
        dialogue.validate()?;
        Ok(dialogue)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.turns.len() < 2 {
            return Err(ModelError::TooFewTurns(self.id.clone()));
        }
        for (expected, turn) in self.turns.iter().enumerate() {
            if turn.index != expected {
                return Err(ModelError::TurnIndex {
                    id: self.id.clone(),
                    expected,
                    found: turn.index,
                });
            }
            if turn.speaker.trim().is_empty() {
                return Err(ModelError::EmptySpeaker);
            }
        }
        let tags = self.speakers();
        let alternates = self
            .turns
            .windows(2)
            .all(|pair| pair[0].speaker != pair[1].speaker);
        if tags.len() != 2 || !alternates {
            return Err(ModelError::SpeakerStructure {
                id: self.id.clone(),
                found: tags,
            });
        }
        Ok(())
    }

    /// Distinct speaker tags in order of first appearance.
    pub fn speakers(&self) -> Vec<String> {
        let mut tags: Vec<String> = Vec::new();
        for turn in &self.turns {
            if !tags.contains(&turn.speaker) {
                tags.push(turn.speaker.clone());
            }
        }
        tags
    }

    /// The tag of whoever is not speaking at `index`.
    pub fn listener_of(&self, index: usize) -> &str {
        let speaker = &self.turns[index].speaker;
        self.turns
            .iter()
            .map(|t| t.speaker.as_str())
            .find(|s| s != speaker)
            .unwrap_or(speaker)
    }

    /// Rendered `Speaker: text` lines for turns `0..=index`.
    pub fn context_through(&self, index: usize) -> Vec<String> {
        self.turns[..=index].iter().map(Turn::render).collect()
    }
}

#[derive(Deserialize)]
struct RawDialogue {
    id: String,
    scenario_id: String,
    turns: Vec<Turn>,
}

impl<'de> Deserialize<'de> for Dialogue {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let raw = RawDialogue::deserialize(deserializer)?;
        Dialogue::new(
            raw.id,
            raw.scenario_id,
            raw.turns.into_iter().map(|t| (t.speaker, t.text)),
        )
        .map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Answer {
    Answered(String),
    Unknown,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QaPair {
    pub question: String,
    pub answer: Answer,
}

impl QaPair {
    pub fn answered(question: &str, answer: &str) -> Result<Self, ModelError> {
        let question = question.trim();
        let answer = answer.trim();
        if question.is_empty() {
            return Err(ModelError::EmptyQuestion);
        }
        if answer.is_empty() {
            return Err(ModelError::EmptyAnswer);
        }
        Ok(QaPair {
            question: question.to_string(),
            answer: Answer::Answered(answer.to_string()),
        })
    }

    pub fn unknown(question: &str) -> Result<Self, ModelError> {
        let question = question.trim();
        if question.is_empty() {
            return Err(ModelError::EmptyQuestion);
        }
        Ok(QaPair {
            question: question.to_string(),
            answer: Answer::Unknown,
        })
    }

    pub fn is_unknown(&self) -> bool {
        self.answer == Answer::Unknown
    }
}

/// Content of a slot: a concrete value, an open request, or nothing.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Value {
    Filled(String),
    Requested,
    Empty,
}

impl Value {
    pub fn filled(text: &str) -> Result<Self, ModelError> {
        let text = text.trim();
        if text.is_empty() || text == REQUESTED_TOKEN || text == EMPTY_TOKEN {
            return Err(ModelError::BadFilledValue(text.to_string()));
        }
        Ok(Value::Filled(text.to_string()))
    }

    /// Parses the wire form: `?` is requested, `none` is empty, anything else
    /// non-empty is filled.
    pub fn from_wire(text: &str) -> Result<Self, ModelError> {
        match text.trim() {
            REQUESTED_TOKEN => Ok(Value::Requested),
            EMPTY_TOKEN => Ok(Value::Empty),
            other => Value::filled(other),
        }
    }

    pub fn as_wire(&self) -> &str {
        match self {
            Value::Filled(text) => text,
            Value::Requested => REQUESTED_TOKEN,
            Value::Empty => EMPTY_TOKEN,
        }
    }

    pub fn is_filled(&self) -> bool {
        matches!(self, Value::Filled(_))
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_wire())
    }
}

impl Serialize for Value {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(self.as_wire())
    }
}

impl<'de> Deserialize<'de> for Value {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let text = String::deserialize(deserializer)?;
        Value::from_wire(&text).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotValue {
    pub slot: String,
    pub value: Value,
}

impl SlotValue {
    pub fn new(slot: &str, value: Value) -> Result<Self, ModelError> {
        let slot = slot.trim();
        if slot.is_empty() {
            return Err(ModelError::EmptySlot);
        }
        Ok(SlotValue {
            slot: slot.to_string(),
            value,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateUpdate {
    pub turn_index: usize,
    pub pairs: Vec<SlotValue>,
}

impl StateUpdate {
    pub fn new(turn_index: usize, pairs: Vec<SlotValue>) -> Result<Self, ModelError> {
        let mut seen = std::collections::HashSet::new();
        for pair in &pairs {
            if !seen.insert(slot_key(&pair.slot)) {
                return Err(ModelError::DuplicateSlot(pair.slot.clone()));
            }
        }
        Ok(StateUpdate { turn_index, pairs })
    }

    pub fn empty(turn_index: usize) -> Self {
        StateUpdate {
            turn_index,
            pairs: Vec::new(),
        }
    }
}

/// Compiled slot map after a given turn; `turn_index == -1` is the state
/// before the first turn.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogueState {
    pub turn_index: i64,
    /// Keyed by [`slot_key`]; the stored pair keeps the latest writer's name.
    pub slots: BTreeMap<String, SlotValue>,
}

impl DialogueState {
    pub fn initial() -> Self {
        DialogueState {
            turn_index: -1,
            slots: BTreeMap::new(),
        }
    }

    pub fn get(&self, slot: &str) -> Option<&Value> {
        self.slots.get(&slot_key(slot)).map(|sv| &sv.value)
    }

    /// True when the slot carries neither a filled value nor a request.
    pub fn lacks(&self, slot: &str) -> bool {
        matches!(self.get(slot), None | Some(Value::Empty))
    }
}

/// `S_t = update(S_{t-1}, U_t)`: every pair in the update overwrites the
/// slot (last writer wins) and untouched slots carry forward.
pub fn compile_state(
    prev: &DialogueState,
    update: &StateUpdate,
) -> Result<DialogueState, ModelError> {
    if update.turn_index as i64 != prev.turn_index + 1 {
        return Err(ModelError::OutOfOrderUpdate {
            prev: prev.turn_index,
            found: update.turn_index,
        });
    }
    let mut slots = prev.slots.clone();
    for pair in &update.pairs {
        slots.insert(slot_key(&pair.slot), pair.clone());
    }
    Ok(DialogueState {
        turn_index: update.turn_index as i64,
        slots,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotSpec {
    pub slot: String,
    pub description: String,
    pub examples: Vec<String>,
}

impl SlotSpec {
    pub fn new(slot: &str, description: &str, examples: Vec<String>) -> Result<Self, ModelError> {
        let slot = slot.trim();
        let description = description.trim();
        if slot.is_empty() {
            return Err(ModelError::EmptySlot);
        }
        if description.is_empty() {
            return Err(ModelError::EmptyDescription);
        }
        if examples.iter().any(|e| e.trim().is_empty()) {
            return Err(ModelError::EmptyExampleValue);
        }
        Ok(SlotSpec {
            slot: slot.to_string(),
            description: description.to_string(),
            examples,
        })
    }
}

/// Where a mined demonstration came from.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DemoSource {
    pub scenario_id: String,
    pub dialogue_id: String,
    pub turn_index: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Demonstration {
    pub turn_text: String,
    pub slot: String,
    pub value: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<DemoSource>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainingExample {
    pub scenario_id: String,
    pub dialogue_id: String,
    pub turn_index: usize,
    /// Rendered turns `0..=turn_index`, one entry per turn.
    pub context: Vec<String>,
    pub spec: SlotSpec,
    /// Target for `spec.slot`.
    pub target: Value,
    pub demos: Vec<Demonstration>,
}

impl TrainingExample {
    pub fn is_consistent(&self) -> bool {
        self.context.len() == self.turn_index + 1
            && self.demos.iter().all(|d| {
                d.source
                    .as_ref()
                    .is_none_or(|s| s.dialogue_id != self.dialogue_id)
            })
    }
}
