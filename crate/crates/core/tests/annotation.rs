use std::collections::HashSet;
use std::sync::Mutex;

use dstgen::annotate::{annotate_dialogue, collect_unanswered, AnnotationError, Annotator};
use dstgen::dialogue::{generate_dialogue, generate_info_types};
use dstgen::gateway::{BackendError, ChatBackend, CompletionRequest, Gateway, GatewaySettings, TemplateId};
use dstgen::model::{slot_key, Answer, Dialogue, Scenario, Value};
use dstgen::sim::{read_sentences, simulated_scenario, Sentence, Simulator};

/// Replies from a closure over (template, bindings) and logs each call.
struct Scripted<F> {
    reply: F,
    calls: Mutex<Vec<(TemplateId, String)>>,
}

impl<F: Fn(TemplateId, &dyn Fn(&str) -> String) -> String + Send + Sync> ChatBackend for Scripted<F> {
    fn complete(&self, request: &CompletionRequest) -> Result<String, BackendError> {
        let origin = request.origin.as_ref().unwrap();
        let get = |k: &str| origin.bindings.get(k).cloned().unwrap_or_default();
        self.calls.lock().unwrap().push((origin.key.template, get("last_turn")));
        Ok((self.reply)(origin.key.template, &get))
    }
}

fn scripted<F>(reply: F) -> (Gateway, std::sync::Arc<Scripted<F>>)
where
    F: Fn(TemplateId, &dyn Fn(&str) -> String) -> String + Send + Sync + 'static,
{
    let backend = std::sync::Arc::new(Scripted {
        reply,
        calls: Mutex::new(Vec::new()),
    });
    (Gateway::new(backend.clone(), GatewaySettings::default()), backend)
}

fn land_dialogue() -> Dialogue {
    Dialogue::new(
        "land-d0",
        "land",
        vec![
            ("A".into(), "Firstly, can you tell me the location and size of the land?".into()),
            (
                "B".into(),
                "Sure. The land is located on the outskirts of town, about 10 miles away from the city center. It's approximately 20 acres.".into(),
            ),
        ],
    )
    .unwrap()
}

/// Hand-written replies for the land-survey exchange.
fn land_reply(template: TemplateId, get: &dyn Fn(&str) -> String) -> String {
    let asking = get("last_turn").starts_with("Firstly");
    match template {
        TemplateId::QaPairs if asking => {
            "A: Where is the land located?\nB: Unknown.\nA: What is the size of the land?\nB: Unknown.".into()
        }
        // Repeats a carried-over question, which must be dropped.
        TemplateId::QaPairs => "A: What is the size of the land?\nB: About 20 acres\nA: How far is the land from the city center?\nB: About 10 miles".into(),
        TemplateId::QaAnswers => "A: Where is the land located?\nB: On the outskirts of town\nA: What is the size of the land?\nB: It's approximately 20 acres.".into(),
        TemplateId::SlotNames => get("questions")
            .lines()
            .map(|q| {
                let name = if q.contains("size") {
                    "land size"
                } else if q.contains("located") {
                    "Land_Location"
                } else {
                    "distance to city"
                };
                format!("{q} -> {name}")
            })
            .collect::<Vec<_>>()
            .join("\n"),
        TemplateId::SlotValues => get("qav_tuples")
            .split("\n\n")
            .map(|block| {
                let value = if block.contains("20 acres") {
                    "20 acres"
                } else if block.contains("outskirts") {
                    "outskirts of town"
                } else {
                    "10 miles"
                };
                format!("{block}\nValue: {value}")
            })
            .collect::<Vec<_>>()
            .join("\n\n"),
        _ => String::new(),
    }
}

#[test]
fn land_survey_request_then_fill() {
    let (gw, backend) = scripted(land_reply);
    let turns = annotate_dialogue(&gw, &land_dialogue()).unwrap();
    assert_eq!(turns.len(), 2);

    let u0 = turns[0].update();
    assert_eq!(u0.pairs.len(), 2);
    assert!(u0.pairs.iter().all(|p| p.value == Value::Requested));
    assert_eq!(u0.pairs[0].slot, "land location");

    let u1 = turns[1].update();
    let slots: Vec<(&str, &str)> = u1.pairs.iter().map(|p| (p.slot.as_str(), p.value.as_wire())).collect();
    // Carried answers come first, then new pairs; the repeated size question is gone.
    assert_eq!(
        slots,
        vec![
            ("land location", "outskirts of town"),
            ("land size", "20 acres"),
            ("distance to city", "10 miles"),
        ]
    );
    assert_eq!(turns[1].questions()[1], "What is the size of the land?");

    // Slot names for carried questions are reused, not translated again.
    let calls = backend.calls.lock().unwrap();
    let name_calls = calls.iter().filter(|(t, _)| *t == TemplateId::SlotNames).count();
    assert_eq!(name_calls, 2);
    // No requests remain after the final turn, so there is no answer call for it.
    let answer_calls = calls.iter().filter(|(t, _)| *t == TemplateId::QaAnswers).count();
    assert_eq!(answer_calls, 1);
}

#[test]
fn no_information_means_empty_updates() {
    let (gw, backend) = scripted(|_, _| "Nothing to report here.".to_string());
    let d = Dialogue::new(
        "d",
        "s",
        vec![("A".into(), "Hi.".into()), ("B".into(), "Hello.".into()), ("A".into(), "Bye.".into())],
    )
    .unwrap();
    let turns = annotate_dialogue(&gw, &d).unwrap();
    assert!(turns.iter().all(|t| t.pairs.is_empty()));
    let calls = backend.calls.lock().unwrap();
    assert!(calls.iter().all(|(t, _)| *t == TemplateId::QaPairs));
}

#[test]
fn misaligned_slot_names_fail_after_retry() {
    let (gw, backend) = scripted(|template, _| match template {
        TemplateId::QaPairs => "B: Where?\nA: here\nB: When?\nA: now\nB: Who?\nA: me".into(),
        TemplateId::SlotNames => "Where? -> place\nWhen? -> time".into(),
        _ => String::new(),
    });
    let d = Dialogue::new("d", "s", vec![("A".into(), "x".into()), ("B".into(), "y".into())]).unwrap();
    let err = annotate_dialogue(&gw, &d).unwrap_err();
    match err {
        AnnotationError::Failed { dialogue, turn, stage, .. } => {
            assert_eq!((dialogue.as_str(), turn, stage), ("d", 0, "slot name translation"));
        }
        other => panic!("{other:?}"),
    }
    let calls = backend.calls.lock().unwrap();
    assert_eq!(calls.iter().filter(|(t, _)| *t == TemplateId::SlotNames).count(), 2);
}

#[test]
fn unanswered_requests_are_dropped() {
    let (gw, _) = scripted(|template, _| match template {
        TemplateId::QaAnswers => "A: What is the price?\nB: Unknown.".into(),
        _ => String::new(),
    });
    let d = Dialogue::new("d", "s", vec![("A".into(), "x".into()), ("B".into(), "y".into())]).unwrap();
    let annotator = Annotator::new(&gw, &d);
    assert!(annotator.resolve_requests(&["What is the price?".into()], 0).unwrap().is_empty());
    assert!(annotator.resolve_requests(&[], 0).unwrap().is_empty());
    assert!(annotator.resolve_requests(&["What is the price?".into()], 1).unwrap().is_empty());
}

#[test]
fn price_request_resolves_against_next_turn() {
    let (gw, _) = scripted(|template, _| match template {
        TemplateId::QaAnswers => "A: What is the price?\nB: $40".into(),
        _ => String::new(),
    });
    let d = Dialogue::new(
        "d",
        "s",
        vec![("A".into(), "How much is it?".into()), ("B".into(), "It's $40.".into())],
    )
    .unwrap();
    let resolved = Annotator::new(&gw, &d)
        .resolve_requests(&["What is the price?".into()], 0)
        .unwrap();
    assert_eq!(resolved.len(), 1);
    assert_eq!(resolved[0].answer, Answer::Answered("$40".into()));
}

/// Over many simulated dialogues: per-update slot uniqueness, every answered
/// request filled under the same name at the next turn, and carried
/// questions never asked again as new pairs.
#[test]
fn simulated_annotation_properties() {
    let gw = Gateway::new(Simulator, GatewaySettings::default());
    let mut resolved_requests = 0;
    for s in 0..6 {
        let scenario = Scenario::new(format!("scn-{s:06}"), simulated_scenario(s)).unwrap();
        let info = generate_info_types(&gw, &scenario).unwrap();
        for o in 0..4 {
            let d = generate_dialogue(&gw, &scenario, &info, o).unwrap();
            let turns = annotate_dialogue(&gw, &d).unwrap();
            assert_eq!(turns.len(), d.turns.len());
            for (t, turn) in turns.iter().enumerate() {
                let keys: HashSet<String> = turn.pairs.iter().map(|p| slot_key(&p.slot)).collect();
                assert_eq!(keys.len(), turn.pairs.len(), "duplicate slot in {} turn {t}", d.id);

                let questions: Vec<String> = turn.questions();
                let unique: HashSet<&String> = questions.iter().collect();
                assert_eq!(unique.len(), questions.len(), "question repeated in {} turn {t}", d.id);

                for p in turn.pairs.iter().filter(|p| p.value == Value::Requested) {
                    let Some(next) = d.turns.get(t + 1) else { continue };
                    let item = p.question.trim_start_matches("What is the ").trim_end_matches('?');
                    let answered = read_sentences(&next.text)
                        .iter()
                        .any(|s| matches!(s, Sentence::Share { item: i, .. } if *i == item));
                    let filled = turns[t + 1].pairs.iter().any(|q| q.slot == p.slot && q.value.is_filled());
                    assert_eq!(answered, filled, "{} turn {t} slot {}", d.id, p.slot);
                    resolved_requests += usize::from(filled);
                }
            }
        }
    }
    assert!(resolved_requests > 10);
    assert!(collect_unanswered(&[]).is_empty());
}
