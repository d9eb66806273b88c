//! Pipeline configuration: a flat TOML file, `DSTGEN_*` environment
//! overrides, then command-line flags.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use dstgen::gateway::TemplateId;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    /// Offline rule-based simulator.
    Sim,
    /// OpenAI-compatible chat completions endpoint.
    Http,
    /// Fixture replay from `fixtures_dir`.
    Replay,
}

impl std::str::FromStr for BackendKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sim" => Ok(BackendKind::Sim),
            "http" => Ok(BackendKind::Http),
            "replay" => Ok(BackendKind::Replay),
            other => Err(format!("unknown backend {other:?} (expected sim, http or replay)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbedderKind {
    /// Offline hashed bag of words.
    Hashed,
    /// OpenAI-compatible embeddings endpoint.
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub backend: BackendKind,
    pub base_url: String,
    pub api_key_env: String,
    /// Replay source, or recording target for the sim and http backends.
    pub fixtures_dir: Option<PathBuf>,
    pub templates_dir: Option<PathBuf>,
    pub default_model: String,
    /// Template id to model tag.
    pub stage_models: BTreeMap<String, String>,
    pub embedder: EmbedderKind,
    pub embedding_model: String,
    pub embedding_dim: usize,
    pub mini_set: usize,
    pub scenario_count: usize,
    pub dedup_threshold: f64,
    pub stagnation_limit: usize,
    pub dialogues_per_scenario: usize,
    pub min_cluster_size: usize,
    pub max_demos: usize,
    pub seed: u64,
    pub workers: usize,
    pub max_in_flight: usize,
    /// 0 disables the token budget.
    pub tokens_per_minute: u64,
    pub max_retries: u32,
    pub run_dir: PathBuf,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            backend: BackendKind::Sim,
            base_url: "https://api.openai.com/v1".into(),
            api_key_env: "OPENAI_API_KEY".into(),
            fixtures_dir: None,
            templates_dir: None,
            default_model: "gpt-3.5-turbo".into(),
            stage_models: BTreeMap::new(),
            embedder: EmbedderKind::Hashed,
            embedding_model: "text-embedding-3-small".into(),
            embedding_dim: 256,
            mini_set: 100,
            scenario_count: 1000,
            dedup_threshold: 0.75,
            stagnation_limit: 20,
            dialogues_per_scenario: 5,
            min_cluster_size: 5,
            max_demos: 3,
            seed: 0,
            workers: 4,
            max_in_flight: 8,
            tokens_per_minute: 0,
            max_retries: 4,
            run_dir: PathBuf::from("run"),
        }
    }
}

const ENV_PREFIX: &str = "DSTGEN_";

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let mut config = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
                Self::from_toml(&text)?
            }
            None => PipelineConfig::default(),
        };
        config.apply_env(std::env::vars())?;
        Ok(config)
    }

    /// Applies `DSTGEN_<FIELD>` variables; values are parsed as TOML scalars
    /// and fall back to plain strings.
    pub fn apply_env(&mut self, vars: impl IntoIterator<Item = (String, String)>) -> Result<(), CliError> {
        let mut table = toml::Table::try_from(&*self).map_err(|e| CliError::Config(e.to_string()))?;
        let mut changed = false;
        for (name, raw) in vars {
            let Some(field) = name.strip_prefix(ENV_PREFIX) else { continue };
            let field = field.to_lowercase();
            if field == "stage_models" || !Self::field_names().contains(&field.as_str()) {
                continue;
            }
            let value = format!("v = {raw}")
                .parse::<toml::Table>()
                .ok()
                .and_then(|mut t| t.remove("v"))
                .unwrap_or(toml::Value::String(raw));
            table.insert(field, value);
            changed = true;
        }
        if changed {
            *self = PipelineConfig::deserialize(toml::Value::Table(table))
                .map_err(|e| CliError::Config(format!("environment override: {e}")))?;
        }
        Ok(())
    }

    fn field_names() -> &'static [&'static str] {
        &[
            "backend",
            "base_url",
            "api_key_env",
            "fixtures_dir",
            "templates_dir",
            "default_model",
            "embedder",
            "embedding_model",
            "embedding_dim",
            "mini_set",
            "scenario_count",
            "dedup_threshold",
            "stagnation_limit",
            "dialogues_per_scenario",
            "min_cluster_size",
            "max_demos",
            "seed",
            "workers",
            "max_in_flight",
            "tokens_per_minute",
            "max_retries",
            "run_dir",
        ]
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        if !(1..=10_000).contains(&self.mini_set) {
            return bad(format!("mini_set {} outside 1..=10000", self.mini_set));
        }
        if !(1..=1_000_000).contains(&self.scenario_count) {
            return bad(format!("scenario_count {} outside 1..=1000000", self.scenario_count));
        }
        if !(0.0..=1.0).contains(&self.dedup_threshold) {
            return bad(format!("dedup_threshold {} outside [0, 1]", self.dedup_threshold));
        }
        if self.stagnation_limit == 0 {
            return bad("stagnation_limit must be positive".into());
        }
        if !(1..=1000).contains(&self.dialogues_per_scenario) {
            return bad(format!("dialogues_per_scenario {} outside 1..=1000", self.dialogues_per_scenario));
        }
        if self.min_cluster_size < 2 {
            return bad("min_cluster_size must be at least 2".into());
        }
        if self.max_demos > 32 {
            return bad(format!("max_demos {} above 32", self.max_demos));
        }
        if !(1..=256).contains(&self.workers) {
            return bad(format!("workers {} outside 1..=256", self.workers));
        }
        if self.max_in_flight == 0 {
            return bad("max_in_flight must be positive".into());
        }
        if !(1..=65_536).contains(&self.embedding_dim) {
            return bad(format!("embedding_dim {} outside 1..=65536", self.embedding_dim));
        }
        if self.backend == BackendKind::Replay && self.fixtures_dir.is_none() {
            return bad("the replay backend needs fixtures_dir".into());
        }
        for stage in self.stage_models.keys() {
            stage.parse::<TemplateId>().map_err(|e| CliError::Config(e.to_string()))?;
        }
        Ok(())
    }

    pub fn stage_model_map(&self) -> BTreeMap<TemplateId, String> {
        self.stage_models
            .iter()
            .filter_map(|(k, v)| Some((k.parse().ok()?, v.clone())))
            .collect()
    }
}
