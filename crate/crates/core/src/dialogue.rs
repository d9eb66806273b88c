//! Two-step dialogue generation: an information-type list per scenario, then
//! dialogues written against that list.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{bindings, Gateway, GatewayError};
use crate::gateway::TemplateId;
use crate::model::{Dialogue, ModelError, Scenario};
use crate::parse::{parse_numbered_list, parse_turns, ParseError};

pub const MIN_INFO_TYPES: usize = 3;
pub const MIN_TURNS: usize = 6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DialogueError {
    #[error("scenario {scenario}: information types failed: {source}")]
    InfoTypesFailed {
        scenario: String,
        #[source]
        source: GatewayError,
    },
    #[error("scenario {scenario}: dialogue lacks a two-speaker structure: {detail}")]
    TurnParseError { scenario: String, detail: String },
    #[error("scenario {scenario}: dialogue has {found} turns, at least {min} required")]
    TooShort {
        scenario: String,
        min: usize,
        found: usize,
    },
    #[error("scenario {scenario}: {source}")]
    Gateway {
        scenario: String,
        #[source]
        source: GatewayError,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InfoTypeList {
    pub scenario_id: String,
    pub items: Vec<String>,
}

impl InfoTypeList {
    fn render(&self) -> String {
        self.items
            .iter()
            .enumerate()
            .map(|(i, item)| format!("{}. {item}", i + 1))
            .collect::<Vec<_>>()
            .join("\n")
    }
}

pub fn generate_info_types(gateway: &Gateway, scenario: &Scenario) -> Result<InfoTypeList, DialogueError> {
    let request = bindings([("domain", scenario.description.clone())]);
    let items = gateway
        .ask(TemplateId::InfoTypes, &request, 0, |text| {
            let items = parse_numbered_list(text)?;
            if items.len() < MIN_INFO_TYPES {
                return Err(ParseError::TooFew {
                    min: MIN_INFO_TYPES,
                    found: items.len(),
                });
            }
            Ok(items)
        })
        .map_err(|source| DialogueError::InfoTypesFailed {
            scenario: scenario.id.clone(),
            source,
        })?;
    Ok(InfoTypeList {
        scenario_id: scenario.id.clone(),
        items,
    })
}

pub fn dialogue_id(scenario_id: &str, ordinal: usize) -> String {
    format!("{scenario_id}-d{ordinal}")
}

/// Generates the `ordinal`-th dialogue for a scenario. Completions that do
/// not parse into at least [`MIN_TURNS`] two-speaker turns are retried once.
pub fn generate_dialogue(
    gateway: &Gateway,
    scenario: &Scenario,
    info_types: &InfoTypeList,
    ordinal: usize,
) -> Result<Dialogue, DialogueError> {
    let request = bindings([
        ("domain", scenario.description.clone()),
        ("info_types", info_types.render()),
    ]);
    let turns = gateway
        .ask(TemplateId::Dialogue, &request, ordinal as u32, |text| parse_turns(text, MIN_TURNS))
        .map_err(|source| match source {
            GatewayError::Parse {
                error: ParseError::TooShort { min, found },
                ..
            } => DialogueError::TooShort {
                scenario: scenario.id.clone(),
                min,
                found,
            },
            GatewayError::Parse {
                error: ParseError::TurnStructure(detail),
                ..
            } => DialogueError::TurnParseError {
                scenario: scenario.id.clone(),
                detail,
            },
            source => DialogueError::Gateway {
                scenario: scenario.id.clone(),
                source,
            },
        })?;
    Ok(Dialogue::new(dialogue_id(&scenario.id, ordinal), scenario.id.clone(), turns)?)
}
