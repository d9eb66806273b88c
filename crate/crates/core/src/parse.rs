//! Parsers for every structured format the prompt templates ask for.
//!
//! Each parser is total: it returns a value or a [`ParseError`] for any input.
//! Tolerances (list markers, markdown bold, prose lines around the payload)
//! are documented per function.

use thiserror::Error;

use crate::model::{QaPair, SlotSpec};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ParseError {
    #[error("no items could be recovered from the completion")]
    EmptyParse,
    #[error("malformed block: {0}")]
    MalformedBlock(String),
    #[error("expected at least {min} items, found {found}")]
    TooFew { min: usize, found: usize },
    #[error("expected {expected} items, found {found}")]
    CountMismatch { expected: usize, found: usize },
    #[error("dialogue structure: {0}")]
    TurnStructure(String),
    #[error("dialogue has {found} turns, at least {min} required")]
    TooShort { min: usize, found: usize },
}

/// Strips a leading list marker (`12.`, `3)`, `(4)`, `-`, `*`, `•`).
/// Returns whether a marker was present and the remaining text.
pub(crate) fn strip_list_marker(line: &str) -> (bool, &str) {
    let trimmed = line.trim_start();
    for bullet in ["- ", "* ", "• ", "\u{2013} "] {
        if let Some(rest) = trimmed.strip_prefix(bullet) {
            return (true, rest.trim_start());
        }
    }
    let inner = trimmed.strip_prefix('(').unwrap_or(trimmed);
    let digits = inner.chars().take_while(|c| c.is_ascii_digit()).count();
    if digits > 0 {
        let rest = &inner[digits..];
        if let Some(after) = rest.strip_prefix('.').or_else(|| rest.strip_prefix(')')) {
            if after.is_empty() || after.starts_with(char::is_whitespace) {
                return (true, after.trim_start());
            }
        }
    }
    (false, trimmed)
}

/// Splits `Tag: rest` into its parts, ignoring markdown bold around the tag.
/// Tags are at most four words, start with a letter and carry no punctuation
/// other than `.`, `'`, `-`, `_`, `(` and `)`.
pub(crate) fn split_tag(line: &str) -> Option<(String, String)> {
    let line = line.trim();
    let (tag, rest) = line.split_once(':')?;
    let tag = tag.trim().trim_matches('*').trim();
    let rest = rest.trim().trim_start_matches('*').trim();
    let first = tag.chars().next()?;
    if !first.is_alphabetic()
        || tag.len() > 40
        || tag.split_whitespace().count() > 4
        || !tag
            .chars()
            .all(|c| c.is_alphanumeric() || c == ' ' || ".'-_()".contains(c))
    {
        return None;
    }
    if rest.is_empty() {
        return None;
    }
    Some((tag.to_string(), rest.to_string()))
}

fn same_tag(a: &str, b: &str) -> bool {
    a.trim().eq_ignore_ascii_case(b.trim())
}

/// `Unknown`, `unknown.`, `UNKNOWN` and so on.
pub fn is_unknown_answer(text: &str) -> bool {
    text.trim()
        .trim_end_matches(['.', '!'])
        .trim()
        .eq_ignore_ascii_case("unknown")
}

/// Numbered or bulleted list items in order.
///
/// When at least one line carries a list marker, unmarked lines are treated as
/// prose (headers, closing remarks) and skipped; otherwise every non-blank line
/// is an item.
pub fn parse_numbered_list(text: &str) -> Result<Vec<String>, ParseError> {
    let lines: Vec<(bool, &str)> = text
        .lines()
        .map(strip_list_marker)
        .filter(|(_, rest)| !rest.trim().is_empty())
        .collect();
    let any_marked = lines.iter().any(|(marked, _)| *marked);
    let items: Vec<String> = lines
        .into_iter()
        .filter(|(marked, _)| *marked || !any_marked)
        .map(|(_, rest)| rest.trim().to_string())
        .collect();
    if items.is_empty() {
        return Err(ParseError::EmptyParse);
    }
    Ok(items)
}

/// Question/answer pairs written as alternating tagged lines.
///
/// Shared information arrives as `{listener}: <question>` then
/// `{speaker}: <answer>`; requests as `{speaker}: <question>` then
/// `{listener}: Unknown.`. Lines tagged with neither speaker are ignored.
pub fn parse_qa_block(text: &str, speaker: &str, listener: &str) -> Result<Vec<QaPair>, ParseError> {
    if same_tag(speaker, listener) {
        return Err(ParseError::MalformedBlock(
            "speaker and listener tags coincide".into(),
        ));
    }
    let tagged: Vec<(bool, String)> = text
        .lines()
        .filter_map(|line| split_tag(strip_list_marker(line).1))
        .filter_map(|(tag, rest)| {
            if same_tag(&tag, speaker) {
                Some((true, rest))
            } else if same_tag(&tag, listener) {
                Some((false, rest))
            } else {
                None
            }
        })
        .collect();
    if tagged.is_empty() {
        return Err(ParseError::MalformedBlock("no tagged lines".into()));
    }
    if !tagged.len().is_multiple_of(2) {
        return Err(ParseError::MalformedBlock(format!(
            "{} tagged lines cannot be paired",
            tagged.len()
        )));
    }
    let mut pairs = Vec::with_capacity(tagged.len() / 2);
    for chunk in tagged.chunks(2) {
        let (asker_is_speaker, question) = &chunk[0];
        let (answerer_is_speaker, answer) = &chunk[1];
        if asker_is_speaker == answerer_is_speaker {
            return Err(ParseError::MalformedBlock(format!(
                "question {question:?} is followed by a line from the same speaker"
            )));
        }
        let pair = if is_unknown_answer(answer) {
            QaPair::unknown(question)
        } else {
            QaPair::answered(question, answer)
        };
        pairs.push(pair.map_err(|e| ParseError::MalformedBlock(e.to_string()))?);
    }
    Ok(pairs)
}

/// `<question> -> <variable name>` lines, split on the first arrow.
pub fn parse_arrow_mapping(text: &str) -> Result<Vec<(String, String)>, ParseError> {
    let pairs: Vec<(String, String)> = text
        .lines()
        .filter_map(|line| {
            let (_, line) = strip_list_marker(line);
            let (left, right) = line.split_once("->")?;
            let left = left.trim();
            let right = right.trim();
            (!left.is_empty() && !right.is_empty()).then(|| (left.to_string(), right.to_string()))
        })
        .collect();
    if pairs.is_empty() {
        return Err(ParseError::EmptyParse);
    }
    Ok(pairs)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QvavRecord {
    pub question: String,
    pub variable: String,
    pub answer: String,
    pub value: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QvavParse {
    pub records: Vec<QvavRecord>,
    /// Records that started but lacked at least one field.
    pub dropped: usize,
}

fn labeled<'a>(line: &'a str, labels: &[&str]) -> Option<(usize, &'a str)> {
    let (_, line) = strip_list_marker(line);
    let (label, rest) = line.split_once(':')?;
    let label = label.trim().trim_matches('*').trim();
    let idx = labels.iter().position(|l| l.eq_ignore_ascii_case(label))?;
    Some((idx, rest.trim().trim_start_matches('*').trim()))
}

/// Repeated `Question:` / `Variable:` / `Answer:` / `Value:` records. A new
/// `Question:` line starts a record; incomplete records are dropped and counted.
pub fn parse_qvav_block(text: &str) -> Result<QvavParse, ParseError> {
    const LABELS: [&str; 4] = ["question", "variable", "answer", "value"];
    let mut records = Vec::new();
    let mut dropped = 0;
    let mut current: Option<[Option<String>; 4]> = None;

    let mut finish = |fields: [Option<String>; 4], records: &mut Vec<QvavRecord>| {
        match fields {
            [Some(question), Some(variable), Some(answer), Some(value)] => records.push(QvavRecord {
                question,
                variable,
                answer,
                value,
            }),
            _ => dropped += 1,
        }
    };

    for line in text.lines() {
        let Some((idx, rest)) = labeled(line, &LABELS) else {
            continue;
        };
        if idx == 0 {
            if let Some(fields) = current.take() {
                finish(fields, &mut records);
            }
            current = Some(Default::default());
        }
        if let Some(fields) = current.as_mut() {
            if !rest.is_empty() && fields[idx].is_none() {
                fields[idx] = Some(rest.to_string());
            }
        }
    }
    if let Some(fields) = current.take() {
        finish(fields, &mut records);
    }
    if records.is_empty() {
        return Err(ParseError::EmptyParse);
    }
    Ok(QvavParse { records, dropped })
}

/// Splits a comma-separated value list, dropping an `etc.` tail and blanks.
pub fn split_possible_values(text: &str) -> Vec<String> {
    text.split(',')
        .map(|v| v.trim().trim_matches('"').trim())
        .map(|v| v.strip_suffix("etc.").or_else(|| v.strip_suffix("etc")).unwrap_or(v).trim())
        .map(|v| v.trim_end_matches("...").trim())
        .filter(|v| !v.is_empty() && !v.eq_ignore_ascii_case("and"))
        .map(str::to_string)
        .collect()
}

/// `Info Type:` / `Possible Values:` / `Description:` records. Records
/// without a description are dropped.
pub fn parse_slot_spec_block(text: &str) -> Result<Vec<SlotSpec>, ParseError> {
    const LABELS: [&str; 3] = ["info type", "possible values", "description"];
    let mut specs = Vec::new();
    let mut current: Option<[Option<String>; 3]> = None;

    let finish = |fields: [Option<String>; 3], specs: &mut Vec<SlotSpec>| {
        if let [Some(slot), values, Some(description)] = fields {
            let examples = values.as_deref().map(split_possible_values).unwrap_or_default();
            if let Ok(spec) = SlotSpec::new(&slot, &description, examples) {
                specs.push(spec);
            }
        }
    };

    for line in text.lines() {
        let Some((idx, rest)) = labeled(line, &LABELS) else {
            continue;
        };
        if idx == 0 {
            if let Some(fields) = current.take() {
                finish(fields, &mut specs);
            }
            current = Some(Default::default());
        }
        if let Some(fields) = current.as_mut() {
            if !rest.is_empty() && fields[idx].is_none() {
                fields[idx] = Some(rest.to_string());
            }
        }
    }
    if let Some(fields) = current.take() {
        finish(fields, &mut specs);
    }
    if specs.is_empty() {
        return Err(ParseError::EmptyParse);
    }
    Ok(specs)
}

fn is_stage_direction(line: &str) -> bool {
    let l = line.trim();
    (l.starts_with('(') && l.ends_with(')'))
        || (l.starts_with('[') && l.ends_with(']'))
        || (l.len() > 1 && l.starts_with('*') && l.ends_with('*'))
}

/// Speaker-tagged dialogue turns.
///
/// Untagged lines directly below a turn continue that turn; untagged lines
/// after a blank line, before the first turn, or wrapped in brackets are
/// narration and dropped. Consecutive turns by one speaker are merged.
pub fn parse_turns(text: &str, min_turns: usize) -> Result<Vec<(String, String)>, ParseError> {
    let mut turns: Vec<(String, String)> = Vec::new();
    let mut open = false;
    for line in text.lines() {
        let trimmed = line.trim();
        if trimmed.is_empty() {
            open = false;
            continue;
        }
        if is_stage_direction(trimmed) {
            continue;
        }
        if let Some((tag, rest)) = split_tag(trimmed) {
            match turns.last_mut() {
                Some((last, text)) if *last == tag => {
                    text.push(' ');
                    text.push_str(&rest);
                }
                _ => turns.push((tag, rest)),
            }
            open = true;
        } else if open {
            if let Some((_, text)) = turns.last_mut() {
                text.push(' ');
                text.push_str(trimmed);
            }
        }
    }
    let mut tags: Vec<&str> = Vec::new();
    for (tag, _) in &turns {
        if !tags.contains(&tag.as_str()) {
            tags.push(tag);
        }
    }
    if tags.len() != 2 {
        return Err(ParseError::TurnStructure(format!(
            "expected exactly two speaker tags, found {}: {:?}",
            tags.len(),
            tags
        )));
    }
    if turns.len() < min_turns {
        return Err(ParseError::TooShort {
            min: min_turns,
            found: turns.len(),
        });
    }
    Ok(turns)
}

/// Every completion format, for running any parser by name.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParserKind {
    NumberedList,
    QaBlock,
    ArrowMapping,
    Qvav,
    SlotSpec,
    Turns,
}

impl std::str::FromStr for ParserKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "numbered_list" => ParserKind::NumberedList,
            "qa_block" => ParserKind::QaBlock,
            "arrow_mapping" => ParserKind::ArrowMapping,
            "qvav" => ParserKind::Qvav,
            "slot_spec" => ParserKind::SlotSpec,
            "turns" => ParserKind::Turns,
            other => return Err(format!("unknown parser {other:?}")),
        })
    }
}

/// Runs one parser and reports how many items it recovered. QA blocks use
/// speaker `A` and listener `B`; dialogues require six turns.
pub fn recovered_items(kind: ParserKind, text: &str) -> Result<usize, ParseError> {
    match kind {
        ParserKind::NumberedList => parse_numbered_list(text).map(|v| v.len()),
        ParserKind::QaBlock => parse_qa_block(text, "A", "B").map(|v| v.len()),
        ParserKind::ArrowMapping => parse_arrow_mapping(text).map(|v| v.len()),
        ParserKind::Qvav => parse_qvav_block(text).map(|v| v.records.len()),
        ParserKind::SlotSpec => parse_slot_spec_block(text).map(|v| v.len()),
        ParserKind::Turns => parse_turns(text, 6).map(|v| v.len()),
    }
}

/// Variant name of an error, as used in fixture expectations.
pub fn error_kind(e: &ParseError) -> &'static str {
    match e {
        ParseError::EmptyParse => "EmptyParse",
        ParseError::MalformedBlock(_) => "MalformedBlock",
        ParseError::TooFew { .. } => "TooFew",
        ParseError::CountMismatch { .. } => "CountMismatch",
        ParseError::TurnStructure(_) => "TurnStructure",
        ParseError::TooShort { .. } => "TooShort",
    }
}
