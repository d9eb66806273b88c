//! Resumable per-unit JSONL outputs and the run manifest.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::Path;

use dstgen::jsonl::{read_jsonl, read_jsonl_resumable, write_jsonl};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

/// Drops every record whose unit is not in `complete`, rewriting the file
/// atomically. Returns the records kept.
pub fn retain_units<T, F>(path: &Path, unit_of: F, complete: &HashSet<String>) -> Result<Vec<T>, CliError>
where
    T: Serialize + DeserializeOwned,
    F: Fn(&T) -> &str,
{
    let records: Vec<T> = read_jsonl_resumable(path)?;
    let before = records.len();
    let kept: Vec<T> = records.into_iter().filter(|r| complete.contains(unit_of(r))).collect();
    if path.exists() && (kept.len() != before || !ends_cleanly(path)) {
        write_jsonl(path, &kept)?;
    }
    Ok(kept)
}

fn ends_cleanly(path: &Path) -> bool {
    fs::read(path).map(|b| b.is_empty() || b.ends_with(b"\n")).unwrap_or(true)
}

/// Units whose record count in `records` equals `expected[unit]`.
pub fn complete_units<T>(records: &[T], unit_of: impl Fn(&T) -> &str, expected: &HashMap<String, usize>) -> HashSet<String> {
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for r in records {
        *counts.entry(unit_of(r)).or_default() += 1;
    }
    counts
        .into_iter()
        .filter(|(unit, n)| expected.get(*unit) == Some(n))
        .map(|(unit, _)| unit.to_string())
        .collect()
}

/// Rewrites `path` with records in canonical order: by unit position in
/// `order`, then by `within`. Units missing from `order` go last.
pub fn canonicalize<T, F, G>(path: &Path, order: &[String], unit_of: F, within: G) -> Result<(), CliError>
where
    T: Serialize + DeserializeOwned,
    F: Fn(&T) -> &str,
    G: Fn(&T) -> usize,
{
    if !path.exists() {
        return Ok(());
    }
    let position: HashMap<&str, usize> = order.iter().enumerate().map(|(i, u)| (u.as_str(), i)).collect();
    let mut records: Vec<T> = read_jsonl(path)?;
    records.sort_by_key(|r| (position.get(unit_of(r)).copied().unwrap_or(usize::MAX), within(r)));
    write_jsonl(path, &records)?;
    Ok(())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageEntry {
    pub version: u32,
    pub seed: u64,
    /// File name to sha256 of its contents.
    pub outputs: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool_version: String,
    pub stages: BTreeMap<String, StageEntry>,
}

pub const MANIFEST: &str = "manifest.json";

impl Manifest {
    pub fn load(run_dir: &Path) -> Result<Self, CliError> {
        let path = run_dir.join(MANIFEST);
        match fs::read_to_string(&path) {
            Ok(text) => serde_json::from_str(&text).map_err(|e| CliError::Io(format!("{}: {e}", path.display()))),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Manifest::default()),
            Err(e) => Err(CliError::Io(format!("{}: {e}", path.display()))),
        }
    }

    /// Digests `outputs` (relative to `run_dir`) and stores the stage entry.
    pub fn record(run_dir: &Path, stage: &str, version: u32, seed: u64, outputs: &[&str]) -> Result<(), CliError> {
        let mut manifest = Manifest::load(run_dir)?;
        manifest.tool_version = env!("CARGO_PKG_VERSION").to_string();
        let mut digests = BTreeMap::new();
        for name in outputs {
            let path = run_dir.join(name);
            let bytes = fs::read(&path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
            digests.insert(name.to_string(), sha256_hex(&bytes));
        }
        manifest.stages.insert(
            stage.to_string(),
            StageEntry {
                version,
                seed,
                outputs: digests,
            },
        );
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
        write_atomic(&run_dir.join(MANIFEST), text.as_bytes())
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| CliError::Io(format!("{}: {e}", parent.display())))?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)
        .and_then(|_| fs::rename(&tmp, path))
        .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}
