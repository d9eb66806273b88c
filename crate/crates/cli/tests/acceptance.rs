//! Acceptance checks. Each criterion prints one PASS or FAIL line; the
//! process exits nonzero if any fails.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use clap::Parser;
use dstgen::annotate::AnnotatedTurn;
use dstgen::dataset::{compute_stats, downsample, read_dataset, CorpusDialogue, DatasetStats};
use dstgen::embed::{dot, Embedder, HashedEmbedder};
use dstgen::eval::{joint_goal_accuracy, per_domain_report, render_sequence, Normalizer, Prediction, TurnGold};
use dstgen::gateway::{BackendError, ChatBackend, CompletionRequest, Gateway, GatewaySettings};
use dstgen::icl::{augment_examples, slot_value_keys, IclParams};
use dstgen::jsonl::read_jsonl;
use dstgen::model::{slot_key, Demonstration, DemoSource, Dialogue, SlotSpec, SlotValue, StateUpdate, Value};
use dstgen::parse::{error_kind, recovered_items, ParserKind};
use dstgen::scenario::{derive_scenarios, DerivationParams, ScenarioError};
use dstgen::sim::{read_sentences, simulated_scenario, Sentence};
use dstgen_cli::stages::{self, Context};
use dstgen_cli::{resolve_config, run, Cli, PipelineConfig};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        let holds: bool = $cond;
        if !holds {
            return Err(format!($($fmt)+));
        }
    };
}

fn main() -> ExitCode {
    let criteria: [Criterion; 9] = [
        ("end-to-end mock pipeline", end_to_end_mock_pipeline),
        ("scenario derivation properties", scenario_derivation),
        ("joint goal accuracy oracle", jga_oracle),
        ("per-domain average", per_domain_average),
        ("downsampling ratio", downsampling_ratio),
        ("input sequence golden render", golden_render),
        ("demonstration constraints", demonstration_constraints),
        ("stats hand count", stats_hand_count),
        ("parser robustness corpus", parser_robustness),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(detail) => println!("PASS [{}] {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL [{}] {name}: {detail}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn write_config(dir: &Path, name: &str, body: &str) -> PathBuf {
    let path = dir.join(format!("{name}.toml"));
    let text = format!(
        "run_dir = \"{}\"\nfixtures_dir = \"{}\"\n{body}",
        dir.join(name).display(),
        dir.join("fx").display()
    );
    fs::write(&path, text).unwrap();
    path
}

fn dstgen(config: &Path, stage: &str) -> Result<(), String> {
    let cli = Cli::try_parse_from(["dstgen", "--config", config.to_str().unwrap(), stage]).map_err(|e| e.to_string())?;
    run(&cli).map_err(|e| format!("{stage}: {e}"))
}

const GENERATION: [&str; 5] = ["scenarios", "dialogues", "annotate", "describe", "assemble"];
const ARTIFACTS: [&str; 10] = [
    "scenarios.jsonl",
    "scenarios.emb",
    "info_types.jsonl",
    "dialogues.jsonl",
    "updates.jsonl",
    "specs.jsonl",
    "dataset.jsonl",
    "stats.tsv",
    "stats.json",
    "manifest.json",
];

fn end_to_end_mock_pipeline() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let small = "scenario_count = 3\nmini_set = 3\ndialogues_per_scenario = 2\nseed = 11\n";
    // Record fixtures with the simulator, then replay them twice.
    let record = write_config(dir.path(), "recorded", &format!("backend = \"sim\"\n{small}"));
    for stage in GENERATION {
        dstgen(&record, stage)?;
    }
    let mut slowest = Duration::ZERO;
    for name in ["replay1", "replay2"] {
        let config = write_config(dir.path(), name, &format!("backend = \"replay\"\n{small}"));
        let start = Instant::now();
        for stage in GENERATION {
            dstgen(&config, stage)?;
        }
        slowest = slowest.max(start.elapsed());
    }
    ensure!(slowest < Duration::from_secs(30), "replay took {slowest:?}");
    for artifact in ARTIFACTS {
        let read = |run: &str| fs::read(dir.path().join(run).join(artifact)).unwrap();
        ensure!(read("replay1") == read("replay2"), "{artifact} differs between seeded replays");
        ensure!(read("replay1") == read("recorded"), "{artifact} differs between recording and replay");
    }

    let run_dir = dir.path().join("replay1");
    let dialogues: Vec<Dialogue> = read_jsonl(&run_dir.join("dialogues.jsonl")).unwrap();
    let scenarios: HashSet<&str> = dialogues.iter().map(|d| d.scenario_id.as_str()).collect();
    ensure!(dialogues.len() == 6 && scenarios.len() == 3, "{} dialogues over {} scenarios", dialogues.len(), scenarios.len());
    ensure!(
        dialogues.iter().all(|d| (6..=10).contains(&d.turns.len())),
        "turn counts outside 6..=10"
    );

    let updates: Vec<AnnotatedTurn> = read_jsonl(&run_dir.join("updates.jsonl")).unwrap();
    let by_turn: HashMap<(&str, usize), &AnnotatedTurn> =
        updates.iter().map(|u| ((u.dialogue_id.as_str(), u.turn_index), u)).collect();
    for u in &updates {
        let keys: HashSet<String> = u.pairs.iter().map(|p| slot_key(&p.slot)).collect();
        ensure!(keys.len() == u.pairs.len(), "duplicate slot in {} turn {}", u.dialogue_id, u.turn_index);
    }

    // Every request answered in the next turn's text is filled there under the same slot.
    let mut resolved = 0;
    for d in &dialogues {
        for t in 0..d.turns.len().saturating_sub(1) {
            let Some(u) = by_turn.get(&(d.id.as_str(), t)) else { return Err(format!("{} turn {t} missing", d.id)) };
            for p in u.pairs.iter().filter(|p| p.value == Value::Requested) {
                let item = p.question.trim_start_matches("What is the ").trim_end_matches('?');
                let answered = read_sentences(&d.turns[t + 1].text)
                    .iter()
                    .any(|s| matches!(s, Sentence::Share { item: i, .. } if *i == item));
                let next = by_turn[&(d.id.as_str(), t + 1)];
                let filled = next.pairs.iter().any(|q| q.slot == p.slot && q.value.is_filled());
                ensure!(answered == filled, "{} turn {t}: request for {} answered={answered} filled={filled}", d.id, p.slot);
                resolved += usize::from(filled);
            }
        }
    }
    ensure!(resolved > 0, "no request was filled at the following turn");

    let n = updates.iter().flat_map(|u| &u.pairs).filter(|p| p.value.is_filled()).count();
    let examples = read_dataset(&run_dir.join("dataset.jsonl")).unwrap();
    let filled = examples.iter().filter(|e| e.target.is_filled()).count();
    let empty = examples.iter().filter(|e| e.target == Value::Empty).count();
    ensure!(filled == n && empty == n / 2 && examples.len() == n + n / 2, "n={n}: {filled} filled, {empty} empty");
    Ok(format!(
        "6 dialogues, {resolved} requests filled next turn, {filled} filled + {empty} empty examples, replay {slowest:.2?}, byte-identical"
    ))
}

/// Serves numbered scenario lines from a function of the batch ordinal.
struct Batches<F> {
    batch: F,
    calls: AtomicUsize,
}

impl<F: Fn(u32) -> Vec<String> + Send + Sync> ChatBackend for Batches<F> {
    fn complete(&self, request: &CompletionRequest) -> Result<String, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let ordinal = request.origin.as_ref().map_or(0, |o| o.key.ordinal);
        Ok((self.batch)(ordinal)
            .iter()
            .enumerate()
            .map(|(i, s)| format!("{}. {s}", i + 1))
            .collect::<Vec<_>>()
            .join("\n"))
    }
}

fn batch_gateway<F: Fn(u32) -> Vec<String> + Send + Sync + 'static>(batch: F) -> (Gateway, Arc<Batches<F>>) {
    let backend = Arc::new(Batches {
        batch,
        calls: AtomicUsize::new(0),
    });
    (Gateway::new(backend.clone(), GatewaySettings::default()), backend)
}

fn scenario_derivation() -> Outcome {
    let embedder = HashedEmbedder::default();
    let (gw, _) = batch_gateway(|o| {
        let o = o as usize;
        let mut batch: Vec<String> = (0..o.min(5)).map(|i| format!("{}!", simulated_scenario(i).to_uppercase())).collect();
        batch.push(simulated_scenario(o));
        batch.push(simulated_scenario(o).replace(" in order to ", ", in order to "));
        batch
    });
    let params = DerivationParams {
        mini_set: 7,
        target: 12,
        ..DerivationParams::default()
    };
    let kept = derive_scenarios(&gw, &embedder, &params).map_err(|e| e.to_string())?;
    ensure!(kept.len() == params.target, "kept {} of {}", kept.len(), params.target);
    let texts: Vec<String> = kept.iter().map(|s| s.description.clone()).collect();
    let vectors = embedder.embed(&texts).unwrap();
    let mut worst = f64::NEG_INFINITY;
    for i in 0..vectors.len() {
        for j in i + 1..vectors.len() {
            worst = worst.max(dot(&vectors[i], &vectors[j]));
        }
    }
    ensure!(worst < params.threshold, "max pairwise similarity {worst}");

    let (gw, backend) = batch_gateway(|_| vec![simulated_scenario(3); 5]);
    let params = DerivationParams {
        mini_set: 5,
        target: 10,
        ..DerivationParams::default()
    };
    match derive_scenarios(&gw, &embedder, &params) {
        Err(ScenarioError::Stagnation { iterations, kept }) => {
            ensure!(iterations == 20 && kept == 1, "stagnated after {iterations} with {kept} kept");
        }
        other => return Err(format!("expected stagnation, got {other:?}")),
    }
    let calls = backend.calls.load(Ordering::SeqCst);

    let defaults = PipelineConfig::default();
    ensure!((defaults.mini_set, defaults.scenario_count) == (100, 1000), "defaults are not k=100, n=1000");
    defaults.validate().map_err(|e| e.to_string())?;
    DerivationParams::default().validate().map_err(|e| e.to_string())?;
    let cli = Cli::try_parse_from(["dstgen", "show-config"]).unwrap();
    resolve_config(&cli).map_err(|e| e.to_string())?;
    Ok(format!("12 kept, max pairwise {worst:.3} < 0.75; duplicates stagnate after {calls} calls; k=100 n=1000 valid"))
}

/// Canonical value written independently of the evaluator.
fn oracle_value(v: &str) -> Option<String> {
    let mut s = v.to_lowercase().split_whitespace().collect::<Vec<_>>().join(" ");
    while s.ends_with(['.', ',', '!', '?', ';', ':']) {
        s.pop();
        s = s.trim_end().to_string();
    }
    match s.as_str() {
        "" | "none" | "not mentioned" => None,
        "dontcare" | "dont care" | "don't care" | "do not care" | "any" => Some("any".into()),
        _ => Some(s),
    }
}

fn oracle_jga(preds: &[Prediction], golds: &[TurnGold]) -> f64 {
    let canon = |m: &BTreeMap<String, String>| {
        let mut v: Vec<(String, String)> = m
            .iter()
            .filter_map(|(k, v)| Some((k.trim().to_lowercase(), oracle_value(v)?)))
            .collect();
        v.sort();
        v.dedup();
        v
    };
    let mut correct = 0;
    for g in golds {
        let mut pred = BTreeMap::new();
        for p in preds {
            if p.dialogue_id == g.dialogue_id && p.turn_index == g.turn_index {
                pred = p.predicted_state.clone();
            }
        }
        if canon(&pred) == canon(&g.gold_state) {
            correct += 1;
        }
    }
    correct as f64 / golds.len() as f64
}

fn gold(i: usize, state: &[(&str, &str)]) -> TurnGold {
    TurnGold {
        dialogue_id: format!("d{}", i / 4),
        turn_index: i % 4,
        gold_state: state.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        domains: Default::default(),
    }
}

fn jga_oracle() -> Outcome {
    const SLOTS: [&str; 5] = ["hotel-area", "hotel-stars", "train-day", "taxi-leaveat", "restaurant-food"];
    const VALUES: [&str; 10] = ["north", "North.", " north ", "4", "dontcare", "any", "none", "", "monday", "Don't Care"];
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let random_state = |rng: &mut ChaCha8Rng| -> BTreeMap<String, String> {
        let n = rng.random_range(0..4);
        (0..n)
            .map(|_| (SLOTS.choose(rng).unwrap().to_string(), VALUES.choose(rng).unwrap().to_string()))
            .collect()
    };
    let mut golds = Vec::new();
    let mut preds = Vec::new();
    for i in 0..200 {
        let g = gold(i, &[]);
        let state = random_state(&mut rng);
        let pred_state = match rng.random_range(0..4) {
            0 => state.clone(),
            1 => state.iter().map(|(k, v)| (k.to_uppercase(), format!(" {v} "))).collect(),
            2 => random_state(&mut rng),
            _ => BTreeMap::new(),
        };
        if rng.random_range(0..10) > 0 {
            preds.push(Prediction {
                dialogue_id: g.dialogue_id.clone(),
                turn_index: g.turn_index,
                predicted_state: pred_state,
            });
        }
        golds.push(TurnGold { gold_state: state, ..g });
    }
    let got = joint_goal_accuracy(&preds, &golds, &Normalizer::default()).map_err(|e| e.to_string())?;
    let expected = oracle_jga(&preds, &golds);
    ensure!(got == expected, "evaluator {got} vs oracle {expected}");

    // Hand fixture: turns 0..7 match exactly, 7..10 differ.
    let golds: Vec<TurnGold> = (0..10).map(|i| gold(i, &[("hotel-area", "north"), ("hotel-stars", "4")])).collect();
    let preds: Vec<Prediction> = golds
        .iter()
        .enumerate()
        .map(|(i, g)| Prediction {
            dialogue_id: g.dialogue_id.clone(),
            turn_index: g.turn_index,
            predicted_state: if i < 7 {
                g.gold_state.clone()
            } else {
                BTreeMap::from([("hotel-area".to_string(), "south".to_string())])
            },
        })
        .collect();
    let hand = joint_goal_accuracy(&preds, &golds, &Normalizer::default()).map_err(|e| e.to_string())?;
    ensure!(hand == 0.7, "hand fixture scored {hand}");
    Ok(format!("200 random turns: {got:.3} == oracle; 7/10 fixture = {hand}"))
}

fn per_domain_average() -> Outcome {
    let rows: Vec<(String, f64)> = [("attraction", 26.7), ("hotel", 11.4), ("restaurant", 39.7), ("taxi", 13.9), ("train", 26.9)]
        .iter()
        .map(|(d, v)| (d.to_string(), v / 100.0))
        .collect();
    let report = per_domain_report(&rows).map_err(|e| e.to_string())?;
    let average = report.average * 100.0;
    ensure!((average - 23.6).abs() <= 0.2, "average {average}");
    Ok(format!("average {average:.2} within 0.2 of 23.6"))
}

fn toy_corpus(rng: &mut ChaCha8Rng) -> Vec<CorpusDialogue> {
    const SLOTS: [&str; 5] = ["area", "price", "day", "people", "time"];
    const VALUES: [&str; 6] = ["north", "cheap", "?", "monday", "2", "none"];
    (0..rng.random_range(1..5))
        .map(|d| {
            let turns = rng.random_range(2..9);
            let updates: Vec<StateUpdate> = (0..turns)
                .map(|t| {
                    let mut slots: Vec<&str> = SLOTS.to_vec();
                    let k = rng.random_range(0..3);
                    let pairs = (0..k)
                        .map(|_| {
                            let s = slots.remove(rng.random_range(0..slots.len()));
                            SlotValue::new(s, Value::from_wire(VALUES.choose(rng).unwrap()).unwrap()).unwrap()
                        })
                        .collect();
                    StateUpdate::new(t, pairs).unwrap()
                })
                .collect();
            let specs = updates
                .iter()
                .map(|u| u.pairs.iter().map(|p| SlotSpec::new(&p.slot, "a slot", vec![]).unwrap()).collect())
                .collect();
            CorpusDialogue {
                dialogue: Dialogue::new(
                    format!("d{d}"),
                    format!("s{}", d % 2),
                    (0..turns).map(|t| (["A", "B"][t % 2].to_string(), format!("turn {t}"))),
                )
                .unwrap(),
                updates,
                specs,
            }
        })
        .collect()
}

/// Slot values per turn, folded by hand.
fn oracle_states(updates: &[StateUpdate]) -> Vec<HashMap<String, Value>> {
    let mut state = HashMap::new();
    updates
        .iter()
        .map(|u| {
            for p in &u.pairs {
                state.insert(slot_key(&p.slot), p.value.clone());
            }
            state.clone()
        })
        .collect()
}

fn downsampling_ratio() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut checked = 0;
    let mut total = 0;
    for _ in 0..300 {
        let corpus = toy_corpus(&mut rng);
        let seed = rng.random();
        let n: usize = corpus
            .iter()
            .flat_map(|d| &d.updates)
            .flat_map(|u| &u.pairs)
            .filter(|p| p.value.is_filled())
            .count();
        let (plan, examples) = match downsample(&corpus, seed) {
            Ok(r) => r,
            Err(e) if n == 0 || n / 2 > 0 => {
                // Only an empty corpus, or one with no empty candidate at all, may refuse.
                let no_candidates = corpus.iter().all(|d| {
                    let vocab: HashSet<String> = d.updates.iter().flat_map(|u| &u.pairs).map(|p| slot_key(&p.slot)).collect();
                    oracle_states(&d.updates).iter().all(|s| vocab.iter().all(|k| s.contains_key(k)))
                });
                ensure!(n == 0 || no_candidates, "refused a valid corpus: {e}");
                continue;
            }
            Err(e) => return Err(e.to_string()),
        };
        ensure!(plan.n == n && plan.m == n / 2, "plan {plan:?} for n={n}");
        let filled: Vec<_> = examples.iter().filter(|e| e.target.is_filled()).collect();
        let empty = examples.iter().filter(|e| e.target == Value::Empty).count();
        ensure!(filled.len() == n && empty == n / 2, "n={n}: {} filled, {empty} empty", filled.len());

        // Each filled update pair gets its own example at a turn at or after
        // it where the slot is still filled.
        for d in &corpus {
            let states = oracle_states(&d.updates);
            let mut origins: HashMap<String, Vec<usize>> = HashMap::new();
            for (t0, u) in d.updates.iter().enumerate() {
                for p in u.pairs.iter().filter(|p| p.value.is_filled()) {
                    origins.entry(slot_key(&p.slot)).or_default().push(t0);
                }
            }
            for (slot, mut starts) in origins {
                let mut turns: Vec<usize> = filled
                    .iter()
                    .filter(|e| e.dialogue_id == d.dialogue.id && slot_key(&e.spec.slot) == slot)
                    .map(|e| e.turn_index)
                    .collect();
                ensure!(turns.len() == starts.len(), "{} {slot}: {} examples for {} updates", d.dialogue.id, turns.len(), starts.len());
                starts.sort_unstable();
                turns.sort_unstable();
                ensure!(starts.iter().zip(&turns).all(|(s, t)| t >= s), "{} {slot}: example before its update", d.dialogue.id);
            }
            for e in filled.iter().filter(|e| e.dialogue_id == d.dialogue.id) {
                ensure!(
                    states[e.turn_index].get(&slot_key(&e.spec.slot)) == Some(&e.target),
                    "{} turn {}: target is not the compiled value",
                    d.dialogue.id,
                    e.turn_index
                );
            }
        }
        checked += 1;
        total += examples.len();
    }
    ensure!(checked > 200, "only {checked} corpora were checkable");
    Ok(format!("{checked} toy corpora, {total} examples, m = floor(n/2) and one example per filled update"))
}

fn golden_render() -> Outcome {
    let context = [
        "A: Good afternoon, Mr. Smith. I'm here today to survey your land and assess its value.",
        "B: Of course, please go ahead.",
        "A: Firstly, can you tell me the location and size of the land?",
        "B: Sure. The land is located on the outskirts of town, about 10 miles away from the city center. It's approximately 20 acres.",
        "A: That's helpful. Can you also tell me about the type of terrain and land features on the property?",
    ]
    .map(String::from);
    let spec = SlotSpec::new(
        "land size",
        "the area encompassed by the property, typically measured in units such as acres, hectares, or square miles.",
        vec!["50 hectares".into(), "2 square miles".into()],
    )
    .unwrap();
    let demo = |text: &str, value: &str| Demonstration {
        turn_text: text.into(),
        slot: "land size".into(),
        value: value.into(),
        source: None,
    };
    let demos = [
        demo("The floodwaters have submerged over 150 hectares of farmland.", "150 hectares"),
        demo("Yes, we're finalizing a purchase of 50 acres in the valley.", "50 acres"),
    ];
    let expected = "A: Good afternoon, Mr. Smith. I'm here today to survey your land and assess its value.
B: Of course, please go ahead.
A: Firstly, can you tell me the location and size of the land?
B: Sure. The land is located on the outskirts of town, about 10 miles away from the city center. It's approximately 20 acres.
A: That's helpful. Can you also tell me about the type of terrain and land features on the property?

Identify the information from the above dialogue:
land size: the area encompassed by the property, typically measured in units such as acres, hectares, or square miles. (e.g. 50 hectares, 2 square miles)?
ex. The floodwaters have submerged over 150 hectares of farmland. land size? -> 150 hectares
ex. Yes, we're finalizing a purchase of 50 acres in the valley. land size? -> 50 acres";
    let got = render_sequence(&context, &spec, &demos);
    ensure!(got == expected, "rendered:\n{got}");
    Ok(format!("{} bytes identical", got.len()))
}

fn demonstration_constraints() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let config_path = write_config(
        dir.path(),
        "icl",
        "backend = \"sim\"\nscenario_count = 12\nmini_set = 12\ndialogues_per_scenario = 13\nseed = 3\n",
    );
    for stage in GENERATION.iter().copied().chain(["augment"]) {
        dstgen(&config_path, stage)?;
    }
    let config: PipelineConfig = PipelineConfig::from_toml(&fs::read_to_string(&config_path).unwrap()).unwrap();
    let ctx = Context::new(config.clone(), false);
    let augmented = read_dataset(&ctx.path(stages::DATASET_ICL)).map_err(|e| e.to_string())?;
    ensure!(augmented.len() >= 1000, "only {} augmented examples", augmented.len());

    // Recompute cluster labels to check pool membership.
    let corpus = stages::load_corpus(&ctx, "augment").map_err(|e| e.to_string())?;
    let keys = slot_value_keys(&corpus);
    let mut examples = read_dataset(&ctx.path(stages::DATASET)).map_err(|e| e.to_string())?;
    let params = IclParams {
        min_cluster_size: config.min_cluster_size,
        max_demos: config.max_demos,
        seed: config.seed,
    };
    let embedder = HashedEmbedder { dim: config.embedding_dim };
    let labels = augment_examples(&mut examples, &keys, &embedder, &params).map_err(|e| e.to_string())?;
    ensure!(examples == augmented, "augment output is not reproducible from the dataset");

    let key_label: HashMap<(&str, &str, &str, &DemoSource), HashSet<i64>> =
        keys.iter().zip(&labels.keys).fold(HashMap::new(), |mut m, (k, &l)| {
            m.entry((k.slot.as_str(), k.value.as_str(), k.turn_text.as_str(), &k.source))
                .or_default()
                .insert(l);
            m
        });
    let mut demos_total = 0;
    for (e, &label) in augmented.iter().zip(&labels.receivers) {
        ensure!(e.demos.len() <= 3, "{} demos at {} turn {}", e.demos.len(), e.dialogue_id, e.turn_index);
        for d in &e.demos {
            let Some(source) = &d.source else { return Err("demo without source".into()) };
            ensure!(source.dialogue_id != e.dialogue_id, "same-dialogue demo in {}", e.dialogue_id);
            ensure!(source.scenario_id == e.scenario_id, "cross-scenario demo in {}", e.dialogue_id);
            let in_cluster = key_label
                .get(&(d.slot.as_str(), d.value.as_str(), d.turn_text.as_str(), source))
                .is_some_and(|ls| ls.contains(&label));
            ensure!(in_cluster, "demo outside the receiver's cluster in {}", e.dialogue_id);
            demos_total += 1;
        }
    }
    ensure!(demos_total > 0, "no demonstrations attached");
    let with_demos = augmented.iter().filter(|e| !e.demos.is_empty()).count();
    Ok(format!(
        "{} examples, {with_demos} with demos, {demos_total} demos, all other-dialogue, same scenario and cluster, at most 3",
        augmented.len()
    ))
}

fn stats_hand_count() -> Outcome {
    let update = |t: usize, pairs: &[(&str, &str)]| {
        StateUpdate::new(
            t,
            pairs
                .iter()
                .map(|(s, v)| SlotValue::new(s, Value::from_wire(v).unwrap()).unwrap())
                .collect(),
        )
        .unwrap()
    };
    let entry = |id: &str, scenario: &str, turns: &[&str], updates: Vec<StateUpdate>| {
        let specs = updates
            .iter()
            .map(|u| u.pairs.iter().map(|p| SlotSpec::new(&p.slot, "d", vec![]).unwrap()).collect())
            .collect();
        CorpusDialogue {
            dialogue: Dialogue::new(
                id,
                scenario,
                turns.iter().enumerate().map(|(i, t)| (["A", "B"][i % 2].to_string(), t.to_string())),
            )
            .unwrap(),
            updates,
            specs,
        }
    };
    let corpus = vec![
        entry(
            "hotel-d0",
            "hotel",
            &["I need a room for two nights.", "Which area do you prefer?", "The north area please."],
            vec![update(0, &[("stay length", "2 nights")]), update(1, &[("area", "?")]), update(2, &[("area", "north")])],
        ),
        entry(
            "taxi-d0",
            "taxi",
            &["Book a taxi to the airport.", "Sure, when?", "At 5 pm.", "Done."],
            vec![
                update(0, &[("destination", "the airport"), ("area", "?")]),
                update(1, &[]),
                update(2, &[("leave time", "5 pm")]),
                update(3, &[]),
            ],
        ),
    ];
    // Tokens: 7+5+4 and 6+2+3+1. Slot names: stay length, area x3,
    // destination, leave time. Filled values: 2 nights, north, the airport, 5 pm.
    let expected = DatasetStats {
        scenarios: 2,
        dialogues: 2,
        turns: 7,
        turns_per_dialogue: 3.5,
        tokens: 28,
        tokens_per_turn: 4.0,
        slot_values: 6,
        unique_slots: 4,
        unique_slots_per_scenario: 2.5,
        unique_slots_per_dialogue: 2.5,
        unique_slots_per_turn: 6.0 / 7.0,
        turns_without_sv: 2,
        tokens_per_slot_name: 8.0 / 6.0,
        tokens_per_slot_value: 7.0 / 4.0,
    };
    let got = compute_stats(&corpus);
    ensure!(got == expected, "got {got:?}");
    let mut reversed = corpus.clone();
    reversed.reverse();
    ensure!(compute_stats(&reversed) == expected, "stats depend on dialogue order");
    Ok("all 14 fields match the hand count".into())
}

#[derive(Deserialize)]
struct Case {
    name: String,
    parser: String,
    input: String,
    expect: String,
}

fn parser_robustness() -> Outcome {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../core/tests/fixtures/malformed_completions.jsonl");
    let cases: Vec<Case> = read_jsonl(Path::new(path)).map_err(|e| e.to_string())?;
    ensure!(cases.len() >= 40, "only {} fixtures", cases.len());
    let mut errors = 0;
    for case in &cases {
        let kind: ParserKind = case.parser.parse().map_err(|e| format!("{}: {e}", case.name))?;
        let outcome = catch_unwind(|| recovered_items(kind, &case.input)).map_err(|_| format!("{} panicked", case.name))?;
        let got = match outcome {
            Ok(n) => format!("ok:{n}"),
            Err(e) => {
                errors += 1;
                format!("err:{}", error_kind(&e))
            }
        };
        ensure!(got == case.expect, "{}: expected {}, got {got}", case.name, case.expect);
    }
    Ok(format!("{} fixtures, {errors} typed errors, {} tolerant parses, no panics", cases.len(), cases.len() - errors))
}
