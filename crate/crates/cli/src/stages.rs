//! Stage runners. Generation stages work in units (a scenario for
//! `dialogues`, a dialogue for `annotate` and `describe`); finished units are
//! appended as they complete and skipped on re-runs unless forced.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use dstgen::annotate::{annotate_dialogue, AnnotatedTurn};
use dstgen::dataset::{compute_stats, downsample, read_dataset, write_dataset, CorpusDialogue, DatasetStats};
use dstgen::describe::{describe_turn, SpecRecord};
use dstgen::dialogue::{generate_dialogue, generate_info_types, InfoTypeList};
use dstgen::embed::{Embedder, HashedEmbedder, HttpEmbedder};
use dstgen::eval::{
    convert_multiwoz, joint_goal_accuracy, leave_one_out_split, per_domain_report, render_sequence,
    restrict_predictions, BenchmarkDialogue, DomainReport, Normalizer, Prediction, DOMAINS,
};
use dstgen::gateway::{
    ChatBackend, Gateway, GatewaySettings, HttpBackend, Recorder, RetryPolicy, ScriptedMock, TemplateSet, Throttle,
};
use dstgen::icl::{augment_examples, read_manual_demos, slot_value_keys, IclParams, NOISE};
use dstgen::jsonl::{read_jsonl, read_jsonl_resumable, write_jsonl, JsonlAppender};
use dstgen::model::{Dialogue, Scenario};
use dstgen::scenario::{derive_scenarios, write_embeddings, DerivationParams};
use dstgen::sim::Simulator;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tracing::{info, warn};

use crate::checkpoint::{canonicalize, complete_units, retain_units, write_atomic, Manifest};
use crate::config::{BackendKind, EmbedderKind, PipelineConfig};
use crate::{CliError, UnitFailure};

pub const SCENARIOS: &str = "scenarios.jsonl";
pub const EMBEDDINGS: &str = "scenarios.emb";
pub const INFO_TYPES: &str = "info_types.jsonl";
pub const DIALOGUES: &str = "dialogues.jsonl";
pub const UPDATES: &str = "updates.jsonl";
pub const SPECS: &str = "specs.jsonl";
pub const DATASET: &str = "dataset.jsonl";
pub const DATASET_ICL: &str = "dataset.icl.jsonl";
pub const STATS_TSV: &str = "stats.tsv";
pub const STATS_JSON: &str = "stats.json";
pub const REPORT: &str = "report.tsv";
pub const INPUTS: &str = "inputs.jsonl";

/// Bumped when a stage's output format or semantics change.
const STAGE_VERSION: u32 = 1;

pub struct Context {
    pub config: PipelineConfig,
    pub force: bool,
}

impl Context {
    pub fn new(config: PipelineConfig, force: bool) -> Self {
        Context { config, force }
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.config.run_dir.join(name)
    }

    fn require(&self, stage: &'static str, name: &str) -> Result<PathBuf, CliError> {
        let path = self.path(name);
        if path.exists() {
            Ok(path)
        } else {
            Err(CliError::MissingInput {
                stage,
                path: path.display().to_string(),
            })
        }
    }

    fn retry(&self) -> RetryPolicy {
        RetryPolicy {
            max_retries: self.config.max_retries,
            ..RetryPolicy::default()
        }
    }

    pub fn gateway(&self) -> Result<Gateway, CliError> {
        let c = &self.config;
        let recording = |inner: Box<dyn ChatBackend>| -> Box<dyn ChatBackend> {
            match &c.fixtures_dir {
                Some(dir) => Box::new(Recorder::new(inner, dir.clone())),
                None => inner,
            }
        };
        let backend: Box<dyn ChatBackend> = match c.backend {
            BackendKind::Sim => recording(Box::new(Simulator)),
            BackendKind::Http => {
                let http = HttpBackend::new(&c.base_url, Some(&c.api_key_env), self.retry())
                    .map_err(|e| CliError::Config(e.to_string()))?;
                recording(Box::new(http))
            }
            BackendKind::Replay => {
                let dir = c.fixtures_dir.clone().expect("validated: replay has fixtures_dir");
                Box::new(ScriptedMock::from_dir(dir))
            }
        };
        let settings = GatewaySettings {
            default_model: c.default_model.clone(),
            stage_models: c.stage_model_map(),
            seed: Some(c.seed),
            ..GatewaySettings::default()
        };
        let tpm = (c.tokens_per_minute > 0).then_some(c.tokens_per_minute);
        let mut gateway = Gateway::new(backend, settings).with_throttle(Throttle::new(c.max_in_flight, tpm));
        if let Some(dir) = &c.templates_dir {
            gateway = gateway.with_templates(TemplateSet::from_dir(dir).map_err(|e| CliError::Config(e.to_string()))?);
        }
        Ok(gateway)
    }

    pub fn embedder(&self) -> Result<Box<dyn Embedder>, CliError> {
        let c = &self.config;
        Ok(match c.embedder {
            EmbedderKind::Hashed => Box::new(HashedEmbedder { dim: c.embedding_dim }),
            EmbedderKind::Http => Box::new(
                HttpEmbedder::new(&c.base_url, &c.embedding_model, Some(&c.api_key_env), self.retry())
                    .map_err(|e| CliError::Config(e.to_string()))?,
            ),
        })
    }

    fn remove_if_forced(&self, names: &[&str]) -> Result<(), CliError> {
        if !self.force {
            return Ok(());
        }
        for name in names {
            let path = self.path(name);
            match fs::remove_file(&path) {
                Ok(()) => {}
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
                Err(e) => return Err(CliError::Io(format!("{}: {e}", path.display()))),
            }
        }
        Ok(())
    }

    /// Records the stage in the manifest and turns unit failures into an
    /// error, also written to `errors.<stage>.json`.
    fn finish(&self, stage: &'static str, outputs: &[&str], failures: Vec<UnitFailure>) -> Result<(), CliError> {
        Manifest::record(&self.config.run_dir, stage, STAGE_VERSION, self.config.seed, outputs)?;
        let errors = self.path(&format!("errors.{stage}.json"));
        if failures.is_empty() {
            let _ = fs::remove_file(errors);
            return Ok(());
        }
        let err = CliError::Units { stage, failures };
        let text = serde_json::to_string_pretty(&err.summary()).expect("summary serializes") + "\n";
        write_atomic(&errors, text.as_bytes())?;
        Err(err)
    }

    /// Runs `work` over units in batches of `workers`, committing results in
    /// unit order. Failed units are collected, not committed.
    fn run_units<U, R, W, C>(&self, units: &[U], id: impl Fn(&U) -> String, work: W, mut commit: C) -> Result<Vec<UnitFailure>, CliError>
    where
        U: Sync,
        R: Send,
        W: Fn(&U) -> Result<R, String> + Sync,
        C: FnMut(R) -> Result<(), CliError>,
    {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(self.config.workers)
            .build()
            .map_err(|e| CliError::Config(e.to_string()))?;
        let mut failures = Vec::new();
        for batch in units.chunks(self.config.workers) {
            let results: Vec<Result<R, String>> = pool.install(|| batch.par_iter().map(&work).collect());
            for (unit, result) in batch.iter().zip(results) {
                match result {
                    Ok(r) => commit(r)?,
                    Err(error) => {
                        let unit = id(unit);
                        warn!(%unit, %error, "unit failed");
                        failures.push(UnitFailure { unit, error });
                    }
                }
            }
        }
        Ok(failures)
    }
}

fn failed(stage: &'static str) -> impl Fn(String) -> CliError {
    move |message| CliError::Failed { stage, message }
}

pub fn scenarios(ctx: &Context) -> Result<(), CliError> {
    const STAGE: &str = "scenarios";
    let out = ctx.path(SCENARIOS);
    if out.exists() && !ctx.force {
        info!(path = %out.display(), "scenarios exist, skipping");
        return Ok(());
    }
    let c = &ctx.config;
    let params = DerivationParams {
        mini_set: c.mini_set,
        target: c.scenario_count,
        threshold: c.dedup_threshold,
        stagnation_limit: c.stagnation_limit,
    };
    let gateway = ctx.gateway()?;
    let embedder = ctx.embedder()?;
    let scenarios = derive_scenarios(&gateway, embedder.as_ref(), &params).map_err(|e| failed(STAGE)(e.to_string()))?;
    fs::create_dir_all(&c.run_dir).map_err(|e| CliError::Io(e.to_string()))?;
    write_embeddings(&ctx.path(EMBEDDINGS), &scenarios).map_err(|e| CliError::Io(e.to_string()))?;
    let bare: Vec<Scenario> = scenarios
        .into_iter()
        .map(|s| Scenario { embedding: None, ..s })
        .collect();
    write_jsonl(&out, &bare)?;
    info!(count = bare.len(), "scenarios written");
    ctx.finish(STAGE, &[SCENARIOS, EMBEDDINGS], Vec::new())
}

pub fn dialogues(ctx: &Context) -> Result<(), CliError> {
    const STAGE: &str = "dialogues";
    let scenarios: Vec<Scenario> = read_jsonl(&ctx.require(STAGE, SCENARIOS)?)?;
    ctx.remove_if_forced(&[INFO_TYPES, DIALOGUES])?;
    let (info_path, dialogue_path) = (ctx.path(INFO_TYPES), ctx.path(DIALOGUES));

    // The info-type record is appended after a scenario's dialogues and marks
    // the unit complete.
    let known: HashSet<&str> = scenarios.iter().map(|s| s.id.as_str()).collect();
    let previous: Vec<InfoTypeList> = read_jsonl_resumable(&info_path)?;
    let done: HashSet<String> = previous
        .iter()
        .filter(|r| known.contains(r.scenario_id.as_str()))
        .map(|r| r.scenario_id.clone())
        .collect();
    retain_units(&info_path, |r: &InfoTypeList| &r.scenario_id, &done)?;
    retain_units(&dialogue_path, |d: &Dialogue| &d.scenario_id, &done)?;

    let pending: Vec<&Scenario> = scenarios.iter().filter(|s| !done.contains(&s.id)).collect();
    info!(total = scenarios.len(), pending = pending.len(), "generating dialogues");
    let failures = if pending.is_empty() {
        Vec::new()
    } else {
        let gateway = ctx.gateway()?;
        let per_scenario = ctx.config.dialogues_per_scenario;
        let mut info_out = JsonlAppender::open(&info_path)?;
        let mut dialogue_out = JsonlAppender::open(&dialogue_path)?;
        ctx.run_units(
            &pending,
            |s| s.id.clone(),
            |s| {
                let info = generate_info_types(&gateway, s).map_err(|e| e.to_string())?;
                let dialogues = (0..per_scenario)
                    .map(|o| generate_dialogue(&gateway, s, &info, o))
                    .collect::<Result<Vec<_>, _>>()
                    .map_err(|e| e.to_string())?;
                Ok((info, dialogues))
            },
            |(info, dialogues)| {
                dialogue_out.append(&dialogues)?;
                info_out.append(&[info])?;
                Ok(())
            },
        )?
    };
    let order: Vec<String> = scenarios.iter().map(|s| s.id.clone()).collect();
    canonicalize(&info_path, &order, |r: &InfoTypeList| &r.scenario_id, |_| 0)?;
    canonicalize(&dialogue_path, &order, |d: &Dialogue| &d.scenario_id, |_| 0)?;
    ctx.finish(STAGE, &[INFO_TYPES, DIALOGUES], failures)
}

pub fn annotate(ctx: &Context) -> Result<(), CliError> {
    const STAGE: &str = "annotate";
    let dialogues: Vec<Dialogue> = read_jsonl(&ctx.require(STAGE, DIALOGUES)?)?;
    ctx.remove_if_forced(&[UPDATES])?;
    let path = ctx.path(UPDATES);

    let expected: HashMap<String, usize> = dialogues.iter().map(|d| (d.id.clone(), d.turns.len())).collect();
    let previous: Vec<AnnotatedTurn> = read_jsonl_resumable(&path)?;
    let done = complete_units(&previous, |r| &r.dialogue_id, &expected);
    retain_units(&path, |r: &AnnotatedTurn| &r.dialogue_id, &done)?;

    let pending: Vec<&Dialogue> = dialogues.iter().filter(|d| !done.contains(&d.id)).collect();
    info!(total = dialogues.len(), pending = pending.len(), "annotating dialogues");
    let failures = if pending.is_empty() {
        Vec::new()
    } else {
        let gateway = ctx.gateway()?;
        let mut out = JsonlAppender::open(&path)?;
        ctx.run_units(
            &pending,
            |d| d.id.clone(),
            |d| annotate_dialogue(&gateway, d).map_err(|e| e.to_string()),
            |turns| Ok(out.append(&turns)?),
        )?
    };
    let order: Vec<String> = dialogues.iter().map(|d| d.id.clone()).collect();
    canonicalize(&path, &order, |r: &AnnotatedTurn| &r.dialogue_id, |r| r.turn_index)?;
    ctx.finish(STAGE, &[UPDATES], failures)
}

/// Groups records by dialogue in first-appearance order.
fn group_by_dialogue<T>(records: Vec<T>, id: impl Fn(&T) -> &str) -> Vec<(String, Vec<T>)> {
    let mut groups: Vec<(String, Vec<T>)> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    for r in records {
        let key = id(&r).to_string();
        let i = *index.entry(key.clone()).or_insert_with(|| {
            groups.push((key, Vec::new()));
            groups.len() - 1
        });
        groups[i].1.push(r);
    }
    groups
}

pub fn describe(ctx: &Context) -> Result<(), CliError> {
    const STAGE: &str = "describe";
    let updates: Vec<AnnotatedTurn> = read_jsonl(&ctx.require(STAGE, UPDATES)?)?;
    ctx.remove_if_forced(&[SPECS])?;
    let path = ctx.path(SPECS);

    let groups = group_by_dialogue(updates, |u| &u.dialogue_id);
    let expected: HashMap<String, usize> = groups.iter().map(|(id, turns)| (id.clone(), turns.len())).collect();
    let previous: Vec<SpecRecord> = read_jsonl_resumable(&path)?;
    let done = complete_units(&previous, |r| &r.dialogue_id, &expected);
    retain_units(&path, |r: &SpecRecord| &r.dialogue_id, &done)?;

    let pending: Vec<&(String, Vec<AnnotatedTurn>)> = groups.iter().filter(|(id, _)| !done.contains(id)).collect();
    info!(total = groups.len(), pending = pending.len(), "describing slots");
    let failures = if pending.is_empty() {
        Vec::new()
    } else {
        let gateway = ctx.gateway()?;
        let mut out = JsonlAppender::open(&path)?;
        ctx.run_units(
            &pending,
            |(id, _)| id.clone(),
            |(_, turns)| {
                turns
                    .iter()
                    .map(|t| describe_turn(&gateway, t))
                    .collect::<Result<Vec<_>, _>>()
                    .map_err(|e| e.to_string())
            },
            |records| Ok(out.append(&records)?),
        )?
    };
    let order: Vec<String> = groups.iter().map(|(id, _)| id.clone()).collect();
    canonicalize(&path, &order, |r: &SpecRecord| &r.dialogue_id, |r| r.turn_index)?;
    ctx.finish(STAGE, &[SPECS], failures)
}

/// Joins dialogues, updates and specs. Dialogues without a full set of
/// updates and specs (failed earlier units) are left out.
pub fn load_corpus(ctx: &Context, stage: &'static str) -> Result<Vec<CorpusDialogue>, CliError> {
    let dialogues: Vec<Dialogue> = read_jsonl(&ctx.require(stage, DIALOGUES)?)?;
    let updates: Vec<AnnotatedTurn> = read_jsonl(&ctx.require(stage, UPDATES)?)?;
    let specs: Vec<SpecRecord> = read_jsonl(&ctx.require(stage, SPECS)?)?;
    let mut updates: HashMap<String, Vec<AnnotatedTurn>> = group_by_dialogue(updates, |u| &u.dialogue_id).into_iter().collect();
    let mut specs: HashMap<String, Vec<SpecRecord>> = group_by_dialogue(specs, |s| &s.dialogue_id).into_iter().collect();

    let mut corpus = Vec::with_capacity(dialogues.len());
    let mut skipped = 0;
    for dialogue in dialogues {
        let (Some(mut turns), Some(mut spec_records)) = (updates.remove(&dialogue.id), specs.remove(&dialogue.id)) else {
            skipped += 1;
            continue;
        };
        turns.sort_by_key(|t| t.turn_index);
        spec_records.sort_by_key(|s| s.turn_index);
        let entry = CorpusDialogue {
            updates: turns.iter().map(AnnotatedTurn::update).collect(),
            specs: spec_records.into_iter().map(|r| r.specs).collect(),
            dialogue,
        };
        entry.validate().map_err(|e| CliError::Input(e.to_string()))?;
        corpus.push(entry);
    }
    if skipped > 0 {
        warn!(skipped, "dialogues without complete annotation left out");
    }
    Ok(corpus)
}

fn write_stats(ctx: &Context, stats: &DatasetStats) -> Result<(), CliError> {
    write_atomic(&ctx.path(STATS_TSV), stats.to_string().as_bytes())?;
    let json = serde_json::to_string_pretty(stats).expect("stats serialize") + "\n";
    write_atomic(&ctx.path(STATS_JSON), json.as_bytes())
}

pub fn assemble(ctx: &Context) -> Result<(), CliError> {
    const STAGE: &str = "assemble";
    let corpus = load_corpus(ctx, STAGE)?;
    let (plan, examples) = downsample(&corpus, ctx.config.seed).map_err(|e| failed(STAGE)(e.to_string()))?;
    write_dataset(&examples, &ctx.path(DATASET)).map_err(|e| CliError::Io(e.to_string()))?;
    write_stats(ctx, &compute_stats(&corpus))?;
    info!(filled = plan.n, empty = plan.m, dialogues = corpus.len(), "dataset assembled");
    ctx.finish(STAGE, &[DATASET, STATS_TSV, STATS_JSON], Vec::new())
}

pub fn augment(ctx: &Context, manual_demos: Option<&Path>) -> Result<(), CliError> {
    const STAGE: &str = "augment";
    let mut examples = read_dataset(&ctx.require(STAGE, DATASET)?).map_err(|e| CliError::Input(e.to_string()))?;
    let corpus = load_corpus(ctx, STAGE)?;
    let keys = slot_value_keys(&corpus);
    let params = IclParams {
        min_cluster_size: ctx.config.min_cluster_size,
        max_demos: ctx.config.max_demos,
        seed: ctx.config.seed,
    };
    let embedder = ctx.embedder()?;
    let labels = augment_examples(&mut examples, &keys, embedder.as_ref(), &params).map_err(|e| failed(STAGE)(e.to_string()))?;
    let clusters: HashSet<i64> = labels.keys.iter().copied().filter(|&l| l != NOISE).collect();
    info!(keys = keys.len(), clusters = clusters.len(), "slot-value pairs clustered");

    if let Some(path) = manual_demos {
        let manual = read_manual_demos(path)?;
        for e in examples.iter_mut() {
            if let Some(demos) = manual.get(&e.spec.slot) {
                e.demos = demos.iter().take(params.max_demos).cloned().collect();
            }
        }
    }
    write_dataset(&examples, &ctx.path(DATASET_ICL)).map_err(|e| CliError::Io(e.to_string()))?;
    ctx.finish(STAGE, &[DATASET_ICL], Vec::new())
}

pub fn stats(ctx: &Context) -> Result<DatasetStats, CliError> {
    let stats = compute_stats(&load_corpus(ctx, "stats")?);
    write_stats(ctx, &stats)?;
    ctx.finish("stats", &[STATS_TSV, STATS_JSON], Vec::new())?;
    Ok(stats)
}

pub enum BenchmarkSource {
    /// JSONL of interchange records.
    Interchange(PathBuf),
    /// MultiWOZ-style `data.json`.
    MultiWoz(PathBuf),
}

fn read_benchmark(source: &BenchmarkSource) -> Result<Vec<BenchmarkDialogue>, CliError> {
    match source {
        BenchmarkSource::Interchange(path) => Ok(read_jsonl(path)?),
        BenchmarkSource::MultiWoz(path) => {
            let text = fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
            let data: serde_json::Value =
                serde_json::from_str(&text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
            convert_multiwoz(&data).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
        }
    }
}

/// Held-out JGA per domain. Predictions are restricted to the held-out
/// domain's slots before scoring.
pub fn evaluate(
    ctx: &Context,
    source: &BenchmarkSource,
    predictions: &Path,
    domains: &[String],
    aliases: Option<&Path>,
    output: Option<&Path>,
) -> Result<DomainReport, CliError> {
    const STAGE: &str = "evaluate";
    let benchmark = read_benchmark(source)?;
    let preds: Vec<Prediction> = read_jsonl(predictions)?;
    let normalizer = match aliases {
        Some(p) => Normalizer::from_alias_file(p).map_err(|e| CliError::Input(e.to_string()))?,
        None => Normalizer::default(),
    };
    let domains: Vec<String> = if domains.is_empty() {
        DOMAINS.iter().map(|d| d.to_string()).collect()
    } else {
        domains.to_vec()
    };
    let mut rows = Vec::with_capacity(domains.len());
    for domain in &domains {
        let (_, golds) = leave_one_out_split(&benchmark, domain).map_err(|e| failed(STAGE)(e.to_string()))?;
        let restricted = restrict_predictions(&preds, domain);
        let jga = joint_goal_accuracy(&restricted, &golds, &normalizer).map_err(|e| failed(STAGE)(e.to_string()))?;
        info!(%domain, turns = golds.len(), jga, "domain scored");
        rows.push((domain.clone(), jga));
    }
    let report = per_domain_report(&rows).map_err(|e| failed(STAGE)(e.to_string()))?;
    match output {
        Some(path) => write_atomic(path, report.to_tsv().as_bytes())?,
        None => {
            write_atomic(&ctx.path(REPORT), report.to_tsv().as_bytes())?;
            ctx.finish(STAGE, &[REPORT], Vec::new())?;
        }
    }
    Ok(report)
}

/// One model input and its target.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputRecord {
    pub dialogue_id: String,
    pub turn_index: usize,
    pub slot: String,
    pub input: String,
    pub target: String,
}

pub fn render(ctx: &Context, input: Option<&Path>) -> Result<(), CliError> {
    const STAGE: &str = "render";
    let path = match input {
        Some(p) => p.to_path_buf(),
        None if ctx.path(DATASET_ICL).exists() => ctx.path(DATASET_ICL),
        None => ctx.require(STAGE, DATASET)?,
    };
    let examples = read_dataset(&path).map_err(|e| CliError::Input(e.to_string()))?;
    let records: Vec<InputRecord> = examples
        .iter()
        .map(|e| InputRecord {
            dialogue_id: e.dialogue_id.clone(),
            turn_index: e.turn_index,
            slot: e.spec.slot.clone(),
            input: render_sequence(&e.context, &e.spec, &e.demos),
            target: e.target.as_wire().to_string(),
        })
        .collect();
    write_jsonl(&ctx.path(INPUTS), &records)?;
    ctx.finish(STAGE, &[INPUTS], Vec::new())
}
