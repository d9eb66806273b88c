//! Input rendering for slot-by-slot predictors, benchmark ingestion, value
//! normalization, joint goal accuracy and per-domain reports.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::icl::augment_description;
use crate::model::{Demonstration, SlotSpec};

pub const INSTRUCTION: &str = "Identify the information from the above dialogue:";
pub const DOMAINS: [&str; 5] = ["attraction", "hotel", "restaurant", "taxi", "train"];
pub const ANY: &str = "any";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EvalError {
    #[error("no gold turns to score")]
    EmptyGold,
    #[error("domain {0:?} does not occur in the benchmark")]
    UnknownDomain(String),
    #[error("no domain results to report")]
    EmptyReport,
    #[error("{0}")]
    Io(String),
    #[error("{path}: {message}")]
    Format { path: String, message: String },
}

/// Context lines, a blank line, the instruction, then the slot description
/// with its demonstrations.
pub fn render_sequence(context: &[String], spec: &SlotSpec, demos: &[Demonstration]) -> String {
    let mut out = context.join("\n");
    out.push_str("\n\n");
    out.push_str(INSTRUCTION);
    out.push('\n');
    out.push_str(&augment_description(spec, demos));
    out
}

/// Value canonicalization with an optional alias table applied last.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Normalizer {
    aliases: HashMap<String, String>,
}

fn basic_form(text: &str) -> String {
    let collapsed = text.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase();
    collapsed
        .trim_end_matches(['.', ',', '!', '?', ';', ':'])
        .trim()
        .to_string()
}

impl Normalizer {
    /// Tab-separated `variant<TAB>canonical` lines; `#` starts a comment.
    pub fn from_alias_text(text: &str) -> Result<Self, String> {
        let mut aliases = HashMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (variant, canonical) = line
                .split_once('\t')
                .ok_or_else(|| format!("line {}: expected variant<TAB>canonical", i + 1))?;
            aliases.insert(basic_form(variant), basic_form(canonical));
        }
        Ok(Normalizer { aliases })
    }

    pub fn from_alias_file(path: &Path) -> Result<Self, EvalError> {
        let text = fs::read_to_string(path).map_err(|e| EvalError::Io(format!("{}: {e}", path.display())))?;
        Self::from_alias_text(&text).map_err(|message| EvalError::Format {
            path: path.display().to_string(),
            message,
        })
    }

    /// `None` is the absent-slot form.
    pub fn normalize(&self, text: &str) -> Option<String> {
        let v = basic_form(text);
        let v = match v.as_str() {
            "" | "none" | "not mentioned" => return None,
            "dontcare" | "dont care" | "don't care" | "do not care" | ANY => ANY.to_string(),
            _ => v,
        };
        Some(self.aliases.get(&v).cloned().unwrap_or(v))
    }

    pub fn normalize_state(&self, state: &BTreeMap<String, String>) -> BTreeSet<(String, String)> {
        state
            .iter()
            .filter_map(|(slot, value)| Some((basic_form(slot), self.normalize(value)?)))
            .collect()
    }
}

pub fn normalize_value(text: &str) -> Option<String> {
    Normalizer::default().normalize(text)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TurnGold {
    pub dialogue_id: String,
    pub turn_index: usize,
    pub gold_state: BTreeMap<String, String>,
    pub domains: BTreeSet<String>,
}

/// One line of a predictions file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    pub dialogue_id: String,
    pub turn_index: usize,
    #[serde(rename = "slots")]
    pub predicted_state: BTreeMap<String, String>,
}

/// Fraction of gold turns whose normalized state equals the prediction
/// exactly. Missing predictions count as empty states.
pub fn joint_goal_accuracy(preds: &[Prediction], golds: &[TurnGold], norm: &Normalizer) -> Result<f64, EvalError> {
    if golds.is_empty() {
        return Err(EvalError::EmptyGold);
    }
    let by_turn: HashMap<(&str, usize), &Prediction> = preds
        .iter()
        .map(|p| ((p.dialogue_id.as_str(), p.turn_index), p))
        .collect();
    let empty = BTreeMap::new();
    let correct = golds
        .iter()
        .filter(|g| {
            let predicted = by_turn
                .get(&(g.dialogue_id.as_str(), g.turn_index))
                .map_or(&empty, |p| &p.predicted_state);
            norm.normalize_state(predicted) == norm.normalize_state(&g.gold_state)
        })
        .count();
    Ok(correct as f64 / golds.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchmarkTurn {
    pub speaker: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchmarkState {
    pub turn_index: usize,
    pub slots: BTreeMap<String, String>,
}

/// Benchmark interchange record. Slot names are `domain-slot`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchmarkDialogue {
    pub dialogue_id: String,
    pub turns: Vec<BenchmarkTurn>,
    pub states: Vec<BenchmarkState>,
}

pub fn slot_domain(slot: &str) -> &str {
    slot.split_once('-').map_or(slot, |(d, _)| d).trim()
}

impl BenchmarkDialogue {
    pub fn domains(&self) -> BTreeSet<String> {
        self.states
            .iter()
            .flat_map(|s| s.slots.keys())
            .map(|slot| slot_domain(slot).to_lowercase())
            .collect()
    }

    pub fn gold_turns(&self) -> Vec<TurnGold> {
        self.states
            .iter()
            .map(|s| TurnGold {
                dialogue_id: self.dialogue_id.clone(),
                turn_index: s.turn_index,
                domains: s.slots.keys().map(|k| slot_domain(k).to_lowercase()).collect(),
                gold_state: s.slots.clone(),
            })
            .collect()
    }
}

/// Train dialogues never mention the held-out domain; test turns come from
/// dialogues that do, with gold states cut down to that domain's slots.
pub fn leave_one_out_split(
    corpus: &[BenchmarkDialogue],
    holdout: &str,
) -> Result<(Vec<BenchmarkDialogue>, Vec<TurnGold>), EvalError> {
    let holdout = holdout.trim().to_lowercase();
    let mut train = Vec::new();
    let mut test = Vec::new();
    for d in corpus {
        if !d.domains().contains(&holdout) {
            train.push(d.clone());
            continue;
        }
        for mut gold in d.gold_turns() {
            gold.gold_state.retain(|slot, _| slot_domain(slot).eq_ignore_ascii_case(&holdout));
            gold.domains.retain(|dom| *dom == holdout);
            test.push(gold);
        }
    }
    if test.is_empty() {
        return Err(EvalError::UnknownDomain(holdout));
    }
    Ok((train, test))
}

/// Keeps only the predicted slots of one domain.
pub fn restrict_predictions(preds: &[Prediction], domain: &str) -> Vec<Prediction> {
    preds
        .iter()
        .map(|p| Prediction {
            dialogue_id: p.dialogue_id.clone(),
            turn_index: p.turn_index,
            predicted_state: p
                .predicted_state
                .iter()
                .filter(|(slot, _)| slot_domain(slot).eq_ignore_ascii_case(domain))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainReport {
    pub rows: Vec<(String, f64)>,
    pub average: f64,
}

/// Unweighted mean over domains.
pub fn per_domain_report(results: &[(String, f64)]) -> Result<DomainReport, EvalError> {
    if results.is_empty() {
        return Err(EvalError::EmptyReport);
    }
    let average = results.iter().map(|(_, v)| v).sum::<f64>() / results.len() as f64;
    Ok(DomainReport {
        rows: results.to_vec(),
        average,
    })
}

impl DomainReport {
    /// Header row `avg` plus domains, then one row of values as percentages.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("avg");
        for (domain, _) in &self.rows {
            out.push('\t');
            out.push_str(domain);
        }
        let _ = write!(out, "\n{:.1}", self.average * 100.0);
        for (_, v) in &self.rows {
            let _ = write!(out, "\t{:.1}", v * 100.0);
        }
        out.push('\n');
        out
    }
}

/// Converts a MultiWOZ-style `data.json` object (dialogue id to `{log: [...]}`
/// with belief states in system-turn metadata) into interchange records.
/// One state is emitted per user turn.
pub fn convert_multiwoz(data: &serde_json::Value) -> Result<Vec<BenchmarkDialogue>, String> {
    let dialogues = data.as_object().ok_or("expected an object keyed by dialogue id")?;
    let mut out = Vec::with_capacity(dialogues.len());
    for (id, body) in dialogues {
        let log = body["log"].as_array().ok_or_else(|| format!("{id}: missing log"))?;
        let mut turns = Vec::with_capacity(log.len());
        let mut states = Vec::new();
        for (i, entry) in log.iter().enumerate() {
            let text = entry["text"].as_str().ok_or_else(|| format!("{id}: turn {i} has no text"))?;
            let speaker = if i % 2 == 0 { "User" } else { "System" };
            turns.push(BenchmarkTurn {
                speaker: speaker.into(),
                text: text.trim().into(),
            });
            if i % 2 == 1 {
                states.push(BenchmarkState {
                    turn_index: i - 1,
                    slots: multiwoz_metadata_slots(&entry["metadata"]),
                });
            }
        }
        out.push(BenchmarkDialogue {
            dialogue_id: id.trim_end_matches(".json").to_string(),
            turns,
            states,
        });
    }
    Ok(out)
}

fn multiwoz_metadata_slots(metadata: &serde_json::Value) -> BTreeMap<String, String> {
    let mut slots = BTreeMap::new();
    let Some(domains) = metadata.as_object() else {
        return slots;
    };
    for (domain, parts) in domains {
        for (part, prefix) in [("semi", ""), ("book", "book ")] {
            let Some(fields) = parts[part].as_object() else {
                continue;
            };
            for (name, value) in fields {
                let Some(value) = value.as_str() else {
                    continue;
                };
                let value = value.trim();
                if value.is_empty() || value == "not mentioned" || value == "none" {
                    continue;
                }
                slots.insert(format!("{domain}-{prefix}{name}"), value.to_string());
            }
        }
    }
    slots
}
