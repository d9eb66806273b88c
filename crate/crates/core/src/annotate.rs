//! Turn-by-turn state annotation.
//!
//! For turn `t` the annotator asks for QA pairs covering what the current
//! speaker said (`QA_t`), collects the questions left `Unknown` (`R_t`), asks
//! the next turn to answer them (`QA'_{t+1}`), and carries those answers into
//! the prompt and update of turn `t+1`. QA pairs become slot-value pairs via
//! a slot-name prompt (questions only) and a value prompt (questions, answers
//! and slot names); `Unknown` answers become the requested marker.

use std::collections::hash_map::Entry;
use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{bindings, Gateway, GatewayError, TemplateId};
use crate::model::{slot_key, Answer, Dialogue, QaPair, SlotValue, StateUpdate, Value};
use crate::parse::{parse_arrow_mapping, parse_qa_block, parse_qvav_block, split_tag, strip_list_marker, ParseError};

/// Upper bound on QA pairs kept per turn.
pub const MAX_QA_PER_TURN: usize = 16;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnnotationError {
    #[error("dialogue {dialogue}, turn {turn}: {stage} failed: {source}")]
    Failed {
        dialogue: String,
        turn: usize,
        stage: &'static str,
        #[source]
        source: GatewayError,
    },
    #[error("dialogue {dialogue}, turn {turn}: {detail}")]
    Invalid {
        dialogue: String,
        turn: usize,
        detail: String,
    },
}

/// An answered question resolved against the next turn, with the slot name
/// assigned when it was first asked.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CarriedPair {
    pub question: String,
    pub answer: String,
    pub slot: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnnotationCursor {
    pub dialogue_id: String,
    pub t: usize,
    pub carryover: Vec<CarriedPair>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotatedPair {
    pub slot: String,
    pub value: Value,
    pub question: String,
}

/// One line of the updates file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotatedTurn {
    pub dialogue_id: String,
    pub turn_index: usize,
    pub pairs: Vec<AnnotatedPair>,
}

impl AnnotatedTurn {
    pub fn update(&self) -> StateUpdate {
        StateUpdate::new(
            self.turn_index,
            self.pairs
                .iter()
                .map(|p| SlotValue {
                    slot: p.slot.clone(),
                    value: p.value.clone(),
                })
                .collect(),
        )
        .unwrap_or_else(|_| StateUpdate {
            turn_index: self.turn_index,
            pairs: self
                .pairs
                .iter()
                .map(|p| SlotValue {
                    slot: p.slot.clone(),
                    value: p.value.clone(),
                })
                .collect(),
        })
    }

    pub fn questions(&self) -> Vec<String> {
        self.pairs.iter().map(|p| p.question.clone()).collect()
    }
}

fn question_key(q: &str) -> String {
    slot_key(q.trim().trim_end_matches(['?', '.', '!']))
}

/// Slot names are lowercased, underscores become spaces, quotes are dropped
/// and whitespace collapses.
pub fn normalize_slot_name(name: &str) -> String {
    let cleaned: String = name
        .chars()
        .map(|c| if c == '_' { ' ' } else { c })
        .filter(|c| !matches!(c, '"' | '`' | '\'' | '*'))
        .collect();
    slot_key(&cleaned)
}

fn has_tagged_line(text: &str, speaker: &str, listener: &str) -> bool {
    text.lines().filter_map(|l| split_tag(strip_list_marker(l).1)).any(|(tag, _)| {
        tag.eq_ignore_ascii_case(speaker.trim()) || tag.eq_ignore_ascii_case(listener.trim())
    })
}

/// A completion with no line tagged by either speaker means "nothing to
/// report"; anything else must parse as a QA block.
fn parse_qa_or_nothing(text: &str, speaker: &str, listener: &str) -> Result<Vec<QaPair>, ParseError> {
    if !has_tagged_line(text, speaker, listener) {
        return Ok(Vec::new());
    }
    parse_qa_block(text, speaker, listener)
}

fn render_answered(carryover: &[CarriedPair], speaker: &str, listener: &str) -> String {
    carryover
        .iter()
        .map(|c| format!("{listener}: {}\n{speaker}: {}", c.question, c.answer))
        .collect::<Vec<_>>()
        .join("\n")
}

pub struct Annotator<'a> {
    gateway: &'a Gateway,
    dialogue: &'a Dialogue,
}

impl<'a> Annotator<'a> {
    pub fn new(gateway: &'a Gateway, dialogue: &'a Dialogue) -> Self {
        Annotator { gateway, dialogue }
    }

    fn failed(&self, turn: usize, stage: &'static str) -> impl Fn(GatewayError) -> AnnotationError + '_ {
        move |source| AnnotationError::Failed {
            dialogue: self.dialogue.id.clone(),
            turn,
            stage,
            source,
        }
    }

    /// `QA_t` over the window `D_{t-1,t}` (just `D_t` at `t = 0`), with the
    /// carried-over answers shown as already covered.
    pub fn generate_qa_pairs(&self, t: usize, carryover: &[CarriedPair]) -> Result<Vec<QaPair>, AnnotationError> {
        let turns = &self.dialogue.turns;
        if t >= turns.len() {
            return Err(AnnotationError::Invalid {
                dialogue: self.dialogue.id.clone(),
                turn: t,
                detail: format!("dialogue has {} turns", turns.len()),
            });
        }
        let speaker = turns[t].speaker.clone();
        let listener = self.dialogue.listener_of(t).to_string();
        let context = if t > 0 { turns[t - 1].render() } else { String::new() };
        let request = bindings([
            ("speaker", speaker.clone()),
            ("listener", listener.clone()),
            ("dialogue_context", context),
            ("last_turn", turns[t].text.clone()),
            ("answered_qa_pairs", render_answered(carryover, &speaker, &listener)),
        ]);
        let pairs = self
            .gateway
            .ask(TemplateId::QaPairs, &request, 0, |text| parse_qa_or_nothing(text, &speaker, &listener))
            .map_err(self.failed(t, "qa pair generation"))?;
        let covered: Vec<String> = carryover.iter().map(|c| question_key(&c.question)).collect();
        Ok(pairs
            .into_iter()
            .filter(|p| !covered.contains(&question_key(&p.question)))
            .take(MAX_QA_PER_TURN)
            .collect())
    }

    /// `QA'_{t+1}`: answers to `R_t` found in turn `t+1`, `Unknown` dropped.
    /// Returned pairs keep the original question text.
    pub fn resolve_requests(&self, unanswered: &[String], t: usize) -> Result<Vec<QaPair>, AnnotationError> {
        let turns = &self.dialogue.turns;
        if unanswered.is_empty() || t + 1 >= turns.len() {
            return Ok(Vec::new());
        }
        let next = t + 1;
        let speaker = turns[next].speaker.clone();
        let listener = self.dialogue.listener_of(next).to_string();
        let questions = unanswered
            .iter()
            .map(|q| format!("{listener}: {q}"))
            .collect::<Vec<_>>()
            .join("\n");
        let request = bindings([
            ("speaker", speaker.clone()),
            ("listener", listener.clone()),
            ("dialogue_context", turns[t].render()),
            ("last_turn", turns[next].text.clone()),
            ("unanswered_questions", questions),
        ]);
        let parsed = self
            .gateway
            .ask(TemplateId::QaAnswers, &request, 0, |text| parse_qa_or_nothing(text, &speaker, &listener))
            .map_err(self.failed(t, "request resolution"))?;

        let by_question: HashMap<String, &QaPair> =
            parsed.iter().map(|p| (question_key(&p.question), p)).collect();
        let positional = parsed.len() == unanswered.len();
        let mut resolved = Vec::new();
        for (i, question) in unanswered.iter().enumerate() {
            let matched = by_question
                .get(&question_key(question))
                .copied()
                .or_else(|| positional.then(|| &parsed[i]));
            if let Some(QaPair {
                answer: Answer::Answered(answer),
                ..
            }) = matched
            {
                resolved.push(QaPair {
                    question: question.clone(),
                    answer: Answer::Answered(answer.clone()),
                });
            }
        }
        Ok(resolved)
    }

    /// One slot name per question, aligned by question text when the
    /// completion echoes the questions and by position otherwise.
    pub fn translate_slot_names(&self, t: usize, questions: &[String]) -> Result<Vec<String>, AnnotationError> {
        if questions.is_empty() {
            return Ok(Vec::new());
        }
        let request = bindings([("questions", questions.join("\n"))]);
        self.gateway
            .ask(TemplateId::SlotNames, &request, 0, |text| align_slot_names(text, questions))
            .map_err(self.failed(t, "slot name translation"))
    }

    /// Turns aligned `(pair, slot name)` inputs into update pairs. Unknown
    /// answers become requested slots without a backend call; later
    /// duplicates of a slot name get a `#n` suffix.
    pub fn translate_values(&self, t: usize, pairs: &[(QaPair, String)]) -> Result<Vec<AnnotatedPair>, AnnotationError> {
        let answered: Vec<(&str, &str, &str)> = pairs
            .iter()
            .filter_map(|(p, slot)| match &p.answer {
                Answer::Answered(a) => Some((p.question.as_str(), slot.as_str(), a.as_str())),
                Answer::Unknown => None,
            })
            .collect();
        let mut values = if answered.is_empty() {
            Vec::new()
        } else {
            let tuples = answered
                .iter()
                .map(|(q, v, a)| format!("Question: {q}\nVariable: {v}\nAnswer: {a}"))
                .collect::<Vec<_>>()
                .join("\n\n");
            let request = bindings([("qav_tuples", tuples)]);
            self.gateway
                .ask(TemplateId::SlotValues, &request, 0, |text| align_values(text, &answered))
                .map_err(self.failed(t, "value translation"))?
        }
        .into_iter();

        let mut used: HashMap<String, usize> = HashMap::new();
        let mut out = Vec::with_capacity(pairs.len());
        for (pair, slot) in pairs {
            let value = match pair.answer {
                Answer::Unknown => Value::Requested,
                Answer::Answered(_) => values.next().expect("one value per answered pair"),
            };
            out.push(AnnotatedPair {
                slot: unique_name(slot, &mut used),
                value,
                question: pair.question.clone(),
            });
        }
        Ok(out)
    }

    pub fn annotate(&self) -> Result<Vec<AnnotatedTurn>, AnnotationError> {
        let mut cursor = AnnotationCursor {
            dialogue_id: self.dialogue.id.clone(),
            t: 0,
            carryover: Vec::new(),
        };
        let mut turns = Vec::with_capacity(self.dialogue.turns.len());
        while cursor.t < self.dialogue.turns.len() {
            let t = cursor.t;
            let qa = self.generate_qa_pairs(t, &cursor.carryover)?;
            let questions: Vec<String> = qa.iter().map(|p| p.question.clone()).collect();
            let names = self.translate_slot_names(t, &questions)?;

            let mut inputs: Vec<(QaPair, String)> = cursor
                .carryover
                .iter()
                .map(|c| {
                    (
                        QaPair {
                            question: c.question.clone(),
                            answer: Answer::Answered(c.answer.clone()),
                        },
                        c.slot.clone(),
                    )
                })
                .collect();
            let carried = inputs.len();
            inputs.extend(qa.iter().cloned().zip(names));
            let pairs = self.translate_values(t, &inputs)?;

            // Requested slots keep their final name so the answer lands on it.
            let requested: HashMap<String, String> = qa
                .iter()
                .zip(&pairs[carried..])
                .filter(|(p, _)| p.is_unknown())
                .map(|(p, out)| (question_key(&p.question), out.slot.clone()))
                .collect();
            let unanswered = collect_unanswered(&qa);
            let resolved = self.resolve_requests(&unanswered, t)?;
            cursor.carryover = resolved
                .into_iter()
                .filter_map(|p| {
                    let slot = requested.get(&question_key(&p.question))?.clone();
                    match p.answer {
                        Answer::Answered(answer) => Some(CarriedPair {
                            question: p.question,
                            answer,
                            slot,
                        }),
                        Answer::Unknown => None,
                    }
                })
                .collect();

            turns.push(AnnotatedTurn {
                dialogue_id: self.dialogue.id.clone(),
                turn_index: t,
                pairs,
            });
            cursor.t += 1;
        }
        Ok(turns)
    }
}

/// `R_t`: questions whose answer is `Unknown`, in order.
pub fn collect_unanswered(qa: &[QaPair]) -> Vec<String> {
    qa.iter()
        .filter(|p| p.is_unknown())
        .map(|p| p.question.clone())
        .collect()
}

pub fn annotate_dialogue(gateway: &Gateway, dialogue: &Dialogue) -> Result<Vec<AnnotatedTurn>, AnnotationError> {
    Annotator::new(gateway, dialogue).annotate()
}

fn unique_name(slot: &str, used: &mut HashMap<String, usize>) -> String {
    let base = slot.to_string();
    let count = used.entry(slot_key(&base)).or_insert(0);
    *count += 1;
    if *count == 1 {
        return base;
    }
    let mut n = *count;
    loop {
        let candidate = format!("{base}#{n}");
        let key = slot_key(&candidate);
        if let Entry::Vacant(slot) = used.entry(key) {
            slot.insert(1);
            return candidate;
        }
        n += 1;
    }
}

fn align_slot_names(text: &str, questions: &[String]) -> Result<Vec<String>, ParseError> {
    let mapping = parse_arrow_mapping(text)?;
    if mapping.len() != questions.len() {
        return Err(ParseError::CountMismatch {
            expected: questions.len(),
            found: mapping.len(),
        });
    }
    let echoed: Vec<String> = mapping.iter().map(|(q, _)| question_key(q)).collect();
    let names: Vec<String> = if questions.iter().all(|q| echoed.contains(&question_key(q))) {
        let mut pool: Vec<Option<&(String, String)>> = mapping.iter().map(Some).collect();
        questions
            .iter()
            .map(|q| {
                let key = question_key(q);
                let slot = pool
                    .iter_mut()
                    .find(|m| m.is_some_and(|(mq, _)| question_key(mq) == key))
                    .and_then(Option::take)
                    .or_else(|| mapping.iter().find(|(mq, _)| question_key(mq) == key));
                normalize_slot_name(&slot.expect("checked above").1)
            })
            .collect()
    } else {
        mapping.iter().map(|(_, name)| normalize_slot_name(name)).collect()
    };
    if names.iter().any(String::is_empty) {
        return Err(ParseError::MalformedBlock("empty variable name".into()));
    }
    Ok(names)
}

fn align_values(text: &str, answered: &[(&str, &str, &str)]) -> Result<Vec<Value>, ParseError> {
    let parsed = parse_qvav_block(text)?;
    let records = &parsed.records;
    let positional = records.len() == answered.len();
    let mut taken = vec![false; records.len()];
    let mut values = Vec::with_capacity(answered.len());
    for (i, (question, variable, _)) in answered.iter().enumerate() {
        let by_match = records.iter().enumerate().position(|(j, r)| {
            !taken[j]
                && question_key(&r.question) == question_key(question)
                && normalize_slot_name(&r.variable) == normalize_slot_name(variable)
        });
        let index = match by_match {
            Some(j) => j,
            None if positional && !taken[i] => i,
            None => {
                return Err(ParseError::CountMismatch {
                    expected: answered.len(),
                    found: records.len(),
                })
            }
        };
        taken[index] = true;
        let value = Value::from_wire(&records[index].value)
            .map_err(|e| ParseError::MalformedBlock(e.to_string()))?;
        values.push(value);
    }
    Ok(values)
}
