//! A deterministic rule-based stand-in for a chat model. It answers every
//! pipeline prompt from the prompt's bindings, so whole runs work offline and
//! can be recorded as fixtures.
//!
//! Dialogues it writes share information as sentences of the form
//! `The <item> is <value>.` and request it as `What is the <item>?`; the
//! annotation replies read those sentences back.

use crate::embed::fnv1a;
use crate::gateway::{BackendError, ChatBackend, CompletionRequest, TemplateId};
use crate::parse::parse_numbered_list;

const ROLES_A: [&str; 12] = [
    "Tenant", "Patient", "Customer", "Student", "Traveler", "Homeowner", "Job applicant", "Parent", "Chef",
    "Musician", "Farmer", "Novelist",
];
const ROLES_B: [&str; 12] = [
    "landlord", "dentist", "bank teller", "librarian", "travel agent", "plumber", "recruiter", "pediatrician",
    "supplier", "venue manager", "veterinarian", "editor",
];
const GOALS: [&str; 12] = [
    "arrange a repair",
    "schedule an appointment",
    "open a savings account",
    "borrow rare books",
    "book a vacation",
    "fix a leaking pipe",
    "discuss a job offer",
    "plan vaccinations",
    "order fresh produce",
    "reserve a concert hall",
    "treat a sick goat",
    "revise a manuscript",
];

const ITEMS: [(&str, [&str; 4]); 12] = [
    ("price", ["$40", "$120", "$15", "$2,500"]),
    ("date", ["next Monday", "March 3rd", "the 14th", "Friday"]),
    ("time", ["10 am", "3:30 pm", "noon", "8 pm"]),
    ("location", ["the north office", "Main Street", "the old mill", "downtown"]),
    ("land size", ["20 acres", "150 hectares", "2 square miles", "50 acres"]),
    ("contact name", ["Maria Lopez", "Sam Lee", "Dana Reyes", "Tom Baker"]),
    ("budget", ["$300", "$5,000", "$75", "$900"]),
    ("duration", ["two hours", "three days", "a week", "45 minutes"]),
    ("number of people", ["4", "12", "2", "30"]),
    ("phone number", ["555-0142", "555-0199", "555-0107", "555-0123"]),
    ("deadline", ["end of the month", "June 1st", "tomorrow", "next week"]),
    ("color", ["blue", "dark green", "white", "red"]),
];

fn hash(parts: &[&str]) -> u64 {
    fnv1a(parts.join("\u{1f}").as_bytes())
}

fn values_for(item: &str) -> Vec<String> {
    ITEMS
        .iter()
        .find(|(name, _)| *name == item)
        .map(|(_, v)| v.iter().map(|s| s.to_string()).collect())
        .unwrap_or_else(|| (1..=4).map(|i| format!("{item} option {i}")).collect())
}

fn value_for(item: &str, salt: u64) -> String {
    let values = values_for(item);
    values[(salt % values.len() as u64) as usize].clone()
}

/// The i-th scenario of an endless, slowly repeating sequence.
pub fn simulated_scenario(i: usize) -> String {
    let a = ROLES_A[i % ROLES_A.len()];
    let b = ROLES_B[(i / ROLES_A.len() + i) % ROLES_B.len()];
    let goal = GOALS[(i * 7 / 5) % GOALS.len()];
    format!("{a} talks to {b} in order to {goal}")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sentence<'a> {
    Share { item: &'a str, value: &'a str },
    Request { item: &'a str },
}

/// Reads the share and request sentences out of a turn.
pub fn read_sentences(text: &str) -> Vec<Sentence<'_>> {
    let mut out = Vec::new();
    let mut start = 0;
    for (i, c) in text.char_indices() {
        if !matches!(c, '.' | '?') {
            continue;
        }
        let sentence = text[start..i].trim();
        let end = i + c.len_utf8();
        start = end;
        if c == '?' {
            if let Some(item) = sentence.strip_prefix("What is the ") {
                out.push(Sentence::Request { item });
            }
        } else if let Some(rest) = sentence.strip_prefix("The ") {
            if let Some((item, value)) = rest.split_once(" is ") {
                out.push(Sentence::Share { item, value });
            }
        }
    }
    out
}

fn question(item: &str) -> String {
    format!("What is the {item}?")
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Simulator;

impl Simulator {
    fn scenarios(count: usize, ordinal: u32) -> String {
        (0..count)
            .map(|i| format!("{}. {}", i + 1, simulated_scenario(ordinal as usize * count + i)))
            .collect::<Vec<_>>()
            .join("\n")
    }

    fn info_types(domain: &str) -> String {
        let h = hash(&[domain]) as usize;
        let count = 4 + h % 3;
        (0..count)
            .map(|i| format!("{}. {}", i + 1, ITEMS[(h / 7 + i * 5) % ITEMS.len()].0))
            .collect::<Vec<_>>()
            .join("\n")
    }

    fn dialogue(domain: &str, info_types: &str, ordinal: u32) -> String {
        let items = parse_numbered_list(info_types).unwrap_or_else(|_| vec!["price".into(), "date".into()]);
        let h = hash(&[domain, &ordinal.to_string()]);
        let turns = 6 + (h % 5) as usize;
        let value = |item: &str, t: usize| value_for(item, h.wrapping_add(t as u64 * 31) ^ hash(&[item]));
        let item_at = |k: usize| items[k % items.len()].as_str();
        let mut lines = vec!["A: Hello, thanks for taking the time to talk today.".to_string()];
        let mut next = (h % items.len() as u64) as usize;
        let mut pending: Option<&str> = None;
        for t in 1..turns {
            let mut text = String::new();
            if t % 2 == 1 {
                match pending.take() {
                    // Every third request after the first goes unanswered.
                    Some(item) if t > 3 && (t / 2) % 3 == 2 => {
                        text.push_str(&format!("I am not sure about the {item} yet."));
                    }
                    Some(item) => text.push_str(&format!("The {item} is {}.", value(item, t))),
                    None => text.push_str("Sure, I can help with that."),
                }
                if t % 4 == 1 {
                    let shared = item_at(next);
                    next += 1;
                    text.push_str(&format!(" The {shared} is {}.", value(shared, t)));
                }
            } else {
                text.push_str("Thanks.");
                if t % 4 == 0 {
                    let shared = item_at(next);
                    next += 1;
                    text.push_str(&format!(" The {shared} is {}.", value(shared, t)));
                }
                if t + 1 < turns {
                    let asked = item_at(next);
                    next += 1;
                    text.push_str(&format!(" {}", question(asked)));
                    pending = Some(asked);
                }
            }
            let speaker = if t % 2 == 0 { "A" } else { "B" };
            lines.push(format!("{speaker}: {}", text.trim()));
        }
        lines.join("\n")
    }

    fn qa_pairs(speaker: &str, listener: &str, last_turn: &str) -> String {
        let mut lines = Vec::new();
        for sentence in read_sentences(last_turn) {
            match sentence {
                Sentence::Share { item, value } => {
                    lines.push(format!("{listener}: {}", question(item)));
                    lines.push(format!("{speaker}: {value}"));
                }
                Sentence::Request { item } => {
                    lines.push(format!("{speaker}: {}", question(item)));
                    lines.push(format!("{listener}: Unknown."));
                }
            }
        }
        if lines.is_empty() {
            "No information was shared or requested.".to_string()
        } else {
            lines.join("\n")
        }
    }

    fn qa_answers(speaker: &str, listener: &str, last_turn: &str, questions: &str) -> String {
        let shared: Vec<(&str, &str)> = read_sentences(last_turn)
            .into_iter()
            .filter_map(|s| match s {
                Sentence::Share { item, value } => Some((item, value)),
                Sentence::Request { .. } => None,
            })
            .collect();
        let mut lines = Vec::new();
        for line in questions.lines() {
            let Some((_, q)) = line.split_once(": ") else { continue };
            let item = q.trim().strip_prefix("What is the ").and_then(|r| r.strip_suffix('?'));
            let answer = item
                .and_then(|item| shared.iter().find(|(i, _)| *i == item))
                .map_or("Unknown.".to_string(), |(_, v)| v.to_string());
            lines.push(format!("{listener}: {}", q.trim()));
            lines.push(format!("{speaker}: {answer}"));
        }
        lines.join("\n")
    }

    fn slot_names(questions: &str) -> String {
        questions
            .lines()
            .filter(|q| !q.trim().is_empty())
            .map(|q| {
                let item = q.trim().strip_prefix("What is the ").and_then(|r| r.strip_suffix('?'));
                format!("{} -> {}", q.trim(), item.unwrap_or("detail").replace(' ', "_"))
            })
            .collect::<Vec<_>>()
            .join("\n")
    }

    fn slot_values(tuples: &str) -> String {
        tuples
            .split("\n\n")
            .map(|block| {
                let answer = block
                    .lines()
                    .find_map(|l| l.strip_prefix("Answer: "))
                    .unwrap_or("")
                    .trim();
                format!("{block}\nValue: {answer}")
            })
            .collect::<Vec<_>>()
            .join("\n\n")
    }

    fn slot_specs(triples: &str) -> String {
        triples
            .split("\n\n")
            .filter_map(|block| {
                let slot = block.lines().find_map(|l| l.strip_prefix("Info Type: "))?.trim();
                let base = slot.split('#').next().unwrap_or(slot);
                let values = values_for(base);
                Some(format!(
                    "Info Type: {slot}\nPossible Values: {}, etc.\nDescription: the {base} mentioned in the conversation",
                    values[..3].join(", ")
                ))
            })
            .collect::<Vec<_>>()
            .join("\n\n")
    }
}

impl ChatBackend for Simulator {
    fn complete(&self, request: &CompletionRequest) -> Result<String, BackendError> {
        let origin = request
            .origin
            .as_ref()
            .ok_or_else(|| BackendError::MissingFixture("simulator needs template bindings".into()))?;
        let b = |name: &str| origin.bindings.get(name).map(String::as_str).unwrap_or("");
        let reply = match origin.key.template {
            TemplateId::Scenarios => Self::scenarios(b("count").parse().unwrap_or(10), origin.key.ordinal),
            TemplateId::InfoTypes => Self::info_types(b("domain")),
            TemplateId::Dialogue => Self::dialogue(b("domain"), b("info_types"), origin.key.ordinal),
            TemplateId::QaPairs => Self::qa_pairs(b("speaker"), b("listener"), b("last_turn")),
            TemplateId::QaAnswers => {
                Self::qa_answers(b("speaker"), b("listener"), b("last_turn"), b("unanswered_questions"))
            }
            TemplateId::SlotNames => Self::slot_names(b("questions")),
            TemplateId::SlotValues => Self::slot_values(b("qav_tuples")),
            TemplateId::SlotSpecs => Self::slot_specs(b("slot_triples")),
        };
        Ok(reply)
    }
}
