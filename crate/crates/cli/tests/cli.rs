use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command as Process;

use clap::Parser;
use dstgen::eval::{BenchmarkDialogue, BenchmarkState, BenchmarkTurn, Prediction, DOMAINS};
use dstgen::jsonl::write_jsonl;
use dstgen_cli::stages::{DIALOGUES, UPDATES};
use dstgen_cli::{run, Cli, CliError};

fn write_config(dir: &Path, backend: &str, run_dir: &str) -> PathBuf {
    let path = dir.join(format!("{run_dir}.toml"));
    let text = format!(
        "backend = \"{backend}\"\nscenario_count = 3\nmini_set = 3\ndialogues_per_scenario = 2\nworkers = 3\n\
         run_dir = \"{}\"\nfixtures_dir = \"{}\"\n",
        dir.join(run_dir).display(),
        dir.join("fx").display()
    );
    fs::write(&path, text).unwrap();
    path
}

fn dstgen(config: &Path, args: &[&str]) -> Result<(), CliError> {
    let mut argv = vec!["dstgen", "--config", config.to_str().unwrap()];
    argv.extend_from_slice(args);
    run(&Cli::try_parse_from(argv).unwrap())
}

fn generate(config: &Path) {
    for stage in ["scenarios", "dialogues", "annotate"] {
        dstgen(config, &[stage]).unwrap();
    }
}

#[test]
fn annotate_without_dialogues_is_missing_input() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "sim", "run");
    let err = dstgen(&config, &["annotate"]).unwrap_err();
    assert!(matches!(err, CliError::MissingInput { stage: "annotate", .. }), "{err:?}");
    assert_eq!(err.summary()["error"], "missing_input");
}

#[test]
fn binary_reports_missing_input_as_json() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "sim", "run");
    let out = Process::new(env!("CARGO_BIN_EXE_dstgen"))
        .args(["--config", config.to_str().unwrap(), "describe"])
        .env("RUST_LOG", "off")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
    let stderr = String::from_utf8(out.stderr).unwrap();
    let summary: serde_json::Value = serde_json::from_str(stderr.lines().last().unwrap()).unwrap();
    assert_eq!(summary["error"], "missing_input");
    assert_eq!(summary["stage"], "describe");
}

#[test]
fn evaluate_with_gold_predictions_scores_one_everywhere() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "sim", "run");
    let slot = |d: &str| match d {
        "taxi" => "taxi-leaveat",
        "train" => "train-day",
        _ => "area",
    };
    let benchmark: Vec<BenchmarkDialogue> = DOMAINS
        .iter()
        .enumerate()
        .map(|(i, domain)| {
            let name = if slot(domain).contains('-') {
                slot(domain).to_string()
            } else {
                format!("{domain}-{}", slot(domain))
            };
            BenchmarkDialogue {
                dialogue_id: format!("mul{i}"),
                turns: vec![BenchmarkTurn {
                    speaker: "user".into(),
                    text: "hello".into(),
                }],
                states: vec![
                    BenchmarkState {
                        turn_index: 0,
                        slots: BTreeMap::new(),
                    },
                    BenchmarkState {
                        turn_index: 1,
                        slots: BTreeMap::from([(name, "north".to_string())]),
                    },
                ],
            }
        })
        .collect();
    let preds: Vec<Prediction> = benchmark
        .iter()
        .flat_map(|d| d.gold_turns())
        .map(|g| Prediction {
            dialogue_id: g.dialogue_id,
            turn_index: g.turn_index,
            predicted_state: g.gold_state,
        })
        .collect();
    let bench_path = dir.path().join("bench.jsonl");
    let pred_path = dir.path().join("preds.jsonl");
    write_jsonl(&bench_path, &benchmark).unwrap();
    write_jsonl(&pred_path, &preds).unwrap();

    dstgen(
        &config,
        &["evaluate", "--benchmark", bench_path.to_str().unwrap(), "--predictions", pred_path.to_str().unwrap()],
    )
    .unwrap();
    let report = fs::read_to_string(dir.path().join("run/report.tsv")).unwrap();
    assert_eq!(report, "avg\tattraction\thotel\trestaurant\ttaxi\ttrain\n100.0\t100.0\t100.0\t100.0\t100.0\t100.0\n");

    let err = dstgen(
        &config,
        &["evaluate", "--benchmark", bench_path.to_str().unwrap(), "--predictions", pred_path.to_str().unwrap(), "--domains", "police"],
    )
    .unwrap_err();
    assert!(matches!(err, CliError::Failed { stage: "evaluate", .. }));
}

#[test]
fn interrupted_annotation_resumes_to_identical_output() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "sim", "run");
    generate(&config);
    let updates = dir.path().join("run").join(UPDATES);
    let complete = fs::read(&updates).unwrap();

    // Keep the first 40% of lines plus half of the next one.
    let text = String::from_utf8(complete.clone()).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    let keep = lines.len() * 2 / 5;
    let mut torn = lines[..keep].join("\n");
    torn.push('\n');
    torn.push_str(&lines[keep][..lines[keep].len() / 2]);
    fs::write(&updates, torn).unwrap();

    dstgen(&config, &["annotate"]).unwrap();
    assert_eq!(fs::read(&updates).unwrap(), complete);

    // Nothing pending: the file is untouched.
    dstgen(&config, &["annotate"]).unwrap();
    assert_eq!(fs::read(&updates).unwrap(), complete);

    dstgen(&config, &["--force", "annotate"]).unwrap();
    assert_eq!(fs::read(&updates).unwrap(), complete);
}

#[test]
fn failed_units_are_reported_and_retried() {
    let dir = tempfile::tempdir().unwrap();
    generate(&write_config(dir.path(), "sim", "recorded"));
    let replay = write_config(dir.path(), "replay", "replayed");
    fs::create_dir_all(dir.path().join("replayed")).unwrap();
    for name in ["scenarios.jsonl", DIALOGUES] {
        fs::copy(dir.path().join("recorded").join(name), dir.path().join("replayed").join(name)).unwrap();
    }

    let hidden = dir.path().join("slot_names.hidden");
    fs::rename(dir.path().join("fx/slot_names"), &hidden).unwrap();
    let err = dstgen(&replay, &["annotate"]).unwrap_err();
    let CliError::Units { stage, failures } = &err else { panic!("{err:?}") };
    assert_eq!(*stage, "annotate");
    assert!(!failures.is_empty());
    assert!(failures.iter().all(|f| f.error.contains("no fixture")), "{failures:?}");
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("replayed/errors.annotate.json")).unwrap()).unwrap();
    assert_eq!(summary["failures"].as_array().unwrap().len(), failures.len());

    fs::rename(&hidden, dir.path().join("fx/slot_names")).unwrap();
    dstgen(&replay, &["annotate"]).unwrap();
    assert!(!dir.path().join("replayed/errors.annotate.json").exists());
    assert_eq!(
        fs::read(dir.path().join("replayed").join(UPDATES)).unwrap(),
        fs::read(dir.path().join("recorded").join(UPDATES)).unwrap()
    );
}

#[test]
fn show_config_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "replay", "run");
    let cli = Cli::try_parse_from(["dstgen", "--config", config.to_str().unwrap(), "--seed", "5", "show-config"]).unwrap();
    let resolved = dstgen_cli::resolve_config(&cli).unwrap();
    let back = dstgen_cli::PipelineConfig::from_toml(&resolved.to_toml()).unwrap();
    assert_eq!(back, resolved);
    assert_eq!(back.seed, 5);
}
