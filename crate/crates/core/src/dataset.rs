//! State compilation, filled/empty downsampling, corpus statistics and the
//! dataset file.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::jsonl::{read_jsonl, write_jsonl, JsonlError};
use crate::model::{
    compile_state, slot_key, Demonstration, Dialogue, DialogueState, SlotSpec, StateUpdate, TrainingExample, Value,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DatasetError {
    #[error("corpus has no filled slot values")]
    EmptyCorpus,
    #[error("{m} empty examples requested but no slot is ever absent")]
    NoEmptyCandidates { m: usize },
    #[error("dialogue {dialogue}: {detail}")]
    Misaligned { dialogue: String, detail: String },
    #[error("{0}")]
    Io(String),
    #[error("{path}:{line}: {message}")]
    Schema {
        path: String,
        line: usize,
        message: String,
    },
}

impl From<JsonlError> for DatasetError {
    fn from(e: JsonlError) -> Self {
        match e {
            JsonlError::Io { .. } => DatasetError::Io(e.to_string()),
            JsonlError::Schema { path, line, message } => DatasetError::Schema { path, line, message },
        }
    }
}

/// One annotated dialogue with per-turn updates and the slot specs aligned
/// to each update's pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusDialogue {
    pub dialogue: Dialogue,
    pub updates: Vec<StateUpdate>,
    pub specs: Vec<Vec<SlotSpec>>,
}

impl CorpusDialogue {
    pub fn validate(&self) -> Result<(), DatasetError> {
        let bad = |detail: String| DatasetError::Misaligned {
            dialogue: self.dialogue.id.clone(),
            detail,
        };
        if self.updates.len() != self.dialogue.turns.len() {
            return Err(bad(format!(
                "{} updates for {} turns",
                self.updates.len(),
                self.dialogue.turns.len()
            )));
        }
        if self.specs.len() != self.updates.len() {
            return Err(bad(format!("{} spec lists for {} updates", self.specs.len(), self.updates.len())));
        }
        for (t, (update, specs)) in self.updates.iter().zip(&self.specs).enumerate() {
            if update.turn_index != t {
                return Err(bad(format!("update {t} is labelled turn {}", update.turn_index)));
            }
            let aligned = update.pairs.len() == specs.len()
                && update.pairs.iter().zip(specs).all(|(p, s)| slot_key(&p.slot) == slot_key(&s.slot));
            if !aligned {
                return Err(bad(format!("specs at turn {t} do not match the update")));
            }
        }
        Ok(())
    }
}

/// `S_t` for every turn, folding `compile_state` from the empty state.
pub fn compile_dialogue(updates: &[StateUpdate]) -> Vec<DialogueState> {
    let mut states = Vec::with_capacity(updates.len());
    let mut state = DialogueState::initial();
    for update in updates {
        let relabelled;
        let update = if update.turn_index as i64 == state.turn_index + 1 {
            update
        } else {
            relabelled = StateUpdate {
                turn_index: (state.turn_index + 1) as usize,
                pairs: update.pairs.clone(),
            };
            &relabelled
        };
        state = compile_state(&state, update).expect("turn order enforced above");
        states.push(state.clone());
    }
    states
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplingPlan {
    pub n: usize,
    pub m: usize,
    pub seed: u64,
}

impl SamplingPlan {
    pub fn new(n: usize, seed: u64) -> Self {
        SamplingPlan { n, m: n / 2, seed }
    }
}

/// Number of filled update pairs in the corpus.
pub fn filled_update_count(corpus: &[CorpusDialogue]) -> usize {
    corpus
        .iter()
        .flat_map(|d| &d.updates)
        .flat_map(|u| &u.pairs)
        .filter(|p| p.value.is_filled())
        .count()
}

fn example(d: &CorpusDialogue, t: usize, spec: &SlotSpec, target: Value) -> TrainingExample {
    TrainingExample {
        scenario_id: d.dialogue.scenario_id.clone(),
        dialogue_id: d.dialogue.id.clone(),
        turn_index: t,
        context: d.dialogue.context_through(t),
        spec: spec.clone(),
        target,
        demos: Vec::new(),
    }
}

/// One example per filled update pair, at a uniformly chosen later turn
/// where the slot is still filled, followed by `floor(n / 2)` examples of
/// slots the dialogue knows but the state lacks.
pub fn downsample(corpus: &[CorpusDialogue], seed: u64) -> Result<(SamplingPlan, Vec<TrainingExample>), DatasetError> {
    for d in corpus {
        d.validate()?;
    }
    let plan = SamplingPlan::new(filled_update_count(corpus), seed);
    if plan.n == 0 {
        return Err(DatasetError::EmptyCorpus);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut examples = Vec::with_capacity(plan.n + plan.m);
    let mut empty_pool: Vec<(usize, usize, usize, usize)> = Vec::new();

    for (di, d) in corpus.iter().enumerate() {
        let states = compile_dialogue(&d.updates);
        let mut first_seen: BTreeMap<String, (usize, usize)> = BTreeMap::new();
        for (t0, update) in d.updates.iter().enumerate() {
            for (pi, pair) in update.pairs.iter().enumerate() {
                first_seen.entry(slot_key(&pair.slot)).or_insert((t0, pi));
                if !pair.value.is_filled() {
                    continue;
                }
                let candidates: Vec<usize> = (t0..states.len())
                    .filter(|&t| states[t].get(&pair.slot).is_some_and(Value::is_filled))
                    .collect();
                let t = candidates[rng.random_range(0..candidates.len())];
                let target = states[t].get(&pair.slot).cloned().expect("candidate turns hold the slot");
                examples.push(example(d, t, &d.specs[t0][pi], target));
            }
        }
        for (t, state) in states.iter().enumerate() {
            for (key, &(t0, pi)) in &first_seen {
                if state.lacks(key) {
                    empty_pool.push((di, t, t0, pi));
                }
            }
        }
    }

    if plan.m > 0 && empty_pool.is_empty() {
        return Err(DatasetError::NoEmptyCandidates { m: plan.m });
    }
    let mut picks: Vec<usize> = if empty_pool.len() >= plan.m {
        index::sample(&mut rng, empty_pool.len(), plan.m).into_vec()
    } else {
        (0..plan.m).map(|_| rng.random_range(0..empty_pool.len())).collect()
    };
    picks.sort_unstable();
    for i in picks {
        let (di, t, t0, pi) = empty_pool[i];
        let d = &corpus[di];
        examples.push(example(d, t, &d.specs[t0][pi], Value::Empty));
    }
    Ok((plan, examples))
}

fn whitespace_tokens(text: &str) -> usize {
    text.split_whitespace().count()
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DatasetStats {
    pub scenarios: usize,
    pub dialogues: usize,
    pub turns: usize,
    pub turns_per_dialogue: f64,
    pub tokens: usize,
    pub tokens_per_turn: f64,
    pub slot_values: usize,
    pub unique_slots: usize,
    pub unique_slots_per_scenario: f64,
    pub unique_slots_per_dialogue: f64,
    pub unique_slots_per_turn: f64,
    pub turns_without_sv: usize,
    pub tokens_per_slot_name: f64,
    pub tokens_per_slot_value: f64,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Table-style counts over dialogues and their updates. Tokens are
/// whitespace-separated words of turn text; slot names match exactly.
pub fn compute_stats(corpus: &[CorpusDialogue]) -> DatasetStats {
    let mut scenario_slots: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
    let mut global: BTreeSet<&str> = BTreeSet::new();
    let mut s = DatasetStats::default();
    let mut per_dialogue_unique = 0;
    let mut per_turn_unique = 0;
    let mut name_tokens = 0;
    let mut value_tokens = 0;
    let mut filled = 0;

    for d in corpus {
        s.dialogues += 1;
        s.turns += d.dialogue.turns.len();
        s.tokens += d.dialogue.turns.iter().map(|t| whitespace_tokens(&t.text)).sum::<usize>();
        let mut in_dialogue: BTreeSet<&str> = BTreeSet::new();
        let scenario = scenario_slots.entry(d.dialogue.scenario_id.as_str()).or_default();
        for (t, _) in d.dialogue.turns.iter().enumerate() {
            let pairs = d.updates.get(t).map_or(&[][..], |u| &u.pairs[..]);
            if pairs.is_empty() {
                s.turns_without_sv += 1;
            }
            let in_turn: BTreeSet<&str> = pairs.iter().map(|p| p.slot.as_str()).collect();
            per_turn_unique += in_turn.len();
            for p in pairs {
                s.slot_values += 1;
                name_tokens += whitespace_tokens(&p.slot);
                if let Value::Filled(v) = &p.value {
                    filled += 1;
                    value_tokens += whitespace_tokens(v);
                }
            }
            in_dialogue.extend(&in_turn);
        }
        per_dialogue_unique += in_dialogue.len();
        scenario.extend(&in_dialogue);
        global.extend(&in_dialogue);
    }

    s.scenarios = scenario_slots.len();
    s.unique_slots = global.len();
    s.turns_per_dialogue = ratio(s.turns, s.dialogues);
    s.tokens_per_turn = ratio(s.tokens, s.turns);
    s.unique_slots_per_scenario = ratio(scenario_slots.values().map(BTreeSet::len).sum(), s.scenarios);
    s.unique_slots_per_dialogue = ratio(per_dialogue_unique, s.dialogues);
    s.unique_slots_per_turn = ratio(per_turn_unique, s.turns);
    s.tokens_per_slot_name = ratio(name_tokens, s.slot_values);
    s.tokens_per_slot_value = ratio(value_tokens, filled);
    s
}

impl fmt::Display for DatasetStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let rows: [(&str, String); 14] = [
            ("Scenarios", self.scenarios.to_string()),
            ("Dialogues", self.dialogues.to_string()),
            ("Turns", self.turns.to_string()),
            ("Turns / Dialogue", format!("{:.1}", self.turns_per_dialogue)),
            ("Tokens", self.tokens.to_string()),
            ("Tokens / Turn", format!("{:.1}", self.tokens_per_turn)),
            ("Slot-Values", self.slot_values.to_string()),
            ("Unique Slots", self.unique_slots.to_string()),
            ("Unique Slots / Scenario", format!("{:.1}", self.unique_slots_per_scenario)),
            ("Unique Slots / Dialogue", format!("{:.1}", self.unique_slots_per_dialogue)),
            ("Unique Slots / Turn", format!("{:.1}", self.unique_slots_per_turn)),
            ("Turns w/o SV", self.turns_without_sv.to_string()),
            ("Tokens_SN", format!("{:.1}", self.tokens_per_slot_name)),
            ("Tokens_SV", format!("{:.1}", self.tokens_per_slot_value)),
        ];
        for (name, value) in rows {
            writeln!(f, "{name}\t{value}")?;
        }
        Ok(())
    }
}

/// Dataset line layout.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetRecord {
    pub scenario_id: String,
    pub dialogue_id: String,
    pub turn_index: usize,
    pub context: Vec<String>,
    pub slot: String,
    pub description: String,
    pub examples: Vec<String>,
    pub target: Value,
    pub demos: Vec<Demonstration>,
}

impl From<&TrainingExample> for DatasetRecord {
    fn from(e: &TrainingExample) -> Self {
        DatasetRecord {
            scenario_id: e.scenario_id.clone(),
            dialogue_id: e.dialogue_id.clone(),
            turn_index: e.turn_index,
            context: e.context.clone(),
            slot: e.spec.slot.clone(),
            description: e.spec.description.clone(),
            examples: e.spec.examples.clone(),
            target: e.target.clone(),
            demos: e.demos.clone(),
        }
    }
}

impl From<DatasetRecord> for TrainingExample {
    fn from(r: DatasetRecord) -> Self {
        TrainingExample {
            scenario_id: r.scenario_id,
            dialogue_id: r.dialogue_id,
            turn_index: r.turn_index,
            context: r.context,
            spec: SlotSpec {
                slot: r.slot,
                description: r.description,
                examples: r.examples,
            },
            target: r.target,
            demos: r.demos,
        }
    }
}

pub fn write_dataset(examples: &[TrainingExample], path: &Path) -> Result<(), DatasetError> {
    let records: Vec<DatasetRecord> = examples.iter().map(DatasetRecord::from).collect();
    Ok(write_jsonl(path, &records)?)
}

pub fn read_dataset(path: &Path) -> Result<Vec<TrainingExample>, DatasetError> {
    let records: Vec<DatasetRecord> = read_jsonl(path)?;
    Ok(records.into_iter().map(TrainingExample::from).collect())
}

/// Filled/empty counts of a sampled set.
pub fn target_counts(examples: &[TrainingExample]) -> HashMap<&'static str, usize> {
    let mut counts = HashMap::new();
    for e in examples {
        let kind = match e.target {
            Value::Filled(_) => "filled",
            Value::Requested => "requested",
            Value::Empty => "empty",
        };
        *counts.entry(kind).or_insert(0) += 1;
    }
    counts
}
