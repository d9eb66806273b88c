//! Slot descriptions and example values, one prompt per state update.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotate::AnnotatedTurn;
use crate::gateway::{bindings, Gateway, GatewayError, TemplateId};
use crate::model::{slot_key, SlotSpec, StateUpdate, Value};
use crate::parse::parse_slot_spec_block;

pub const MAX_EXAMPLE_VALUES: usize = 6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DescribeError {
    #[error("{0} questions for {1} slot-value pairs")]
    Misaligned(usize, usize),
    #[error("turn {turn}: description failed: {source}")]
    DescriptionFailed {
        turn: usize,
        #[source]
        source: GatewayError,
    },
}

/// One line of the specs file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpecRecord {
    pub dialogue_id: String,
    pub turn_index: usize,
    pub specs: Vec<SlotSpec>,
}

fn render_triples(update: &StateUpdate, questions: &[String]) -> String {
    update
        .pairs
        .iter()
        .zip(questions)
        .map(|(pair, question)| {
            format!(
                "Info Type: {}\nQuestion: {question}\nValue: {}",
                pair.slot,
                pair.value.as_wire()
            )
        })
        .collect::<Vec<_>>()
        .join("\n\n")
}

fn fallback(slot: &str, question: &str, value: &Value) -> SlotSpec {
    let examples = match value {
        Value::Filled(v) => vec![v.clone()],
        _ => Vec::new(),
    };
    let description = if question.trim().is_empty() { slot } else { question };
    SlotSpec::new(slot, description, examples).expect("slot and description are non-empty")
}

/// Exactly one spec per slot of `update`, in update order. Slots the
/// completion leaves out fall back to their question and observed value.
pub fn generate_slot_specs(
    gateway: &Gateway,
    update: &StateUpdate,
    questions: &[String],
) -> Result<Vec<SlotSpec>, DescribeError> {
    if questions.len() != update.pairs.len() {
        return Err(DescribeError::Misaligned(questions.len(), update.pairs.len()));
    }
    if update.pairs.is_empty() {
        return Ok(Vec::new());
    }
    let request = bindings([("slot_triples", render_triples(update, questions))]);
    let parsed = gateway
        .ask(TemplateId::SlotSpecs, &request, 0, parse_slot_spec_block)
        .map_err(|source| DescribeError::DescriptionFailed {
            turn: update.turn_index,
            source,
        })?;

    Ok(update
        .pairs
        .iter()
        .zip(questions)
        .map(|(pair, question)| {
            let key = slot_key(&pair.slot);
            match parsed.iter().find(|s| slot_key(&s.slot) == key) {
                Some(found) => SlotSpec {
                    slot: pair.slot.clone(),
                    description: found.description.clone(),
                    examples: found.examples.iter().take(MAX_EXAMPLE_VALUES).cloned().collect(),
                },
                None => fallback(&pair.slot, question, &pair.value),
            }
        })
        .collect())
}

pub fn describe_turn(gateway: &Gateway, turn: &AnnotatedTurn) -> Result<SpecRecord, DescribeError> {
    let specs = generate_slot_specs(gateway, &turn.update(), &turn.questions())?;
    Ok(SpecRecord {
        dialogue_id: turn.dialogue_id.clone(),
        turn_index: turn.turn_index,
        specs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{binding_digest, GatewaySettings, ScriptedMock};
    use crate::model::SlotValue;
    use std::collections::HashMap;

    fn update() -> (StateUpdate, Vec<String>) {
        let u = StateUpdate::new(
            3,
            vec![
                SlotValue::new("land size", Value::filled("20 acres").unwrap()).unwrap(),
                SlotValue::new("terrain type", Value::Requested).unwrap(),
            ],
        )
        .unwrap();
        let q = vec![
            "What is the size of the land?".to_string(),
            "What type of terrain is on the property?".to_string(),
        ];
        (u, q)
    }

    fn gateway(reply: &str) -> Gateway {
        let (u, q) = update();
        let digest = binding_digest(
            TemplateId::SlotSpecs,
            &bindings([("slot_triples", render_triples(&u, &q))]),
        );
        let map = HashMap::from([(format!("slot_specs/{digest}.txt"), reply.to_string())]);
        Gateway::new(ScriptedMock::in_memory(map), GatewaySettings::default())
    }

    #[test]
    fn triples_render_wire_values() {
        let (u, q) = update();
        let text = render_triples(&u, &q);
        assert!(text.contains("Info Type: land size\nQuestion: What is the size of the land?\nValue: 20 acres"));
        assert!(text.ends_with("Value: ?"));
    }

    #[test]
    fn missing_slot_falls_back() {
        let reply = "Info Type: Land Size\nPossible Values: 50 hectares, 2 square miles, etc.\nDescription: the area encompassed by the property, typically measured in units such as acres, hectares, or square miles.";
        let (u, q) = update();
        let specs = generate_slot_specs(&gateway(reply), &u, &q).unwrap();
        assert_eq!(specs.len(), 2);
        assert_eq!(specs[0].slot, "land size");
        assert_eq!(specs[0].examples, vec!["50 hectares", "2 square miles"]);
        assert!(specs[0].description.starts_with("the area encompassed"));
        assert_eq!(specs[1].description, q[1]);
        assert!(specs[1].examples.is_empty());
    }

    #[test]
    fn examples_are_capped() {
        let reply = "Info Type: land size\nPossible Values: 1, 2, 3, 4, 5, 6, 7, 8\nDescription: size\nInfo Type: terrain type\nPossible Values: flat\nDescription: terrain";
        let (u, q) = update();
        let specs = generate_slot_specs(&gateway(reply), &u, &q).unwrap();
        assert_eq!(specs[0].examples.len(), MAX_EXAMPLE_VALUES);
        assert_eq!(specs[1].description, "terrain");
    }

    #[test]
    fn zero_records_fail() {
        let (u, q) = update();
        assert!(matches!(
            generate_slot_specs(&gateway("I cannot help with that."), &u, &q),
            Err(DescribeError::DescriptionFailed { turn: 3, .. })
        ));
        assert!(matches!(
            generate_slot_specs(&gateway(""), &u, &q[..1]),
            Err(DescribeError::Misaligned(1, 2))
        ));
    }
}
