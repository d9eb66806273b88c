//! Newline-delimited JSON files: whole-file writes, strict reads with line
//! numbers, and crash-tolerant appends for checkpointed stages.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum JsonlError {
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("{path}:{line}: {message}")]
    Schema {
        path: String,
        line: usize,
        message: String,
    },
}

fn io_error(path: &Path, e: impl std::fmt::Display) -> JsonlError {
    JsonlError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

pub fn to_line<T: Serialize>(item: &T) -> String {
    serde_json::to_string(item).expect("record types serialize infallibly")
}

/// Writes the whole file through a temporary sibling and a rename.
pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), JsonlError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| io_error(parent, e))?;
    }
    let tmp = path.with_extension("tmp");
    {
        let file = File::create(&tmp).map_err(|e| io_error(&tmp, e))?;
        let mut out = BufWriter::new(file);
        for item in items {
            writeln!(out, "{}", to_line(item)).map_err(|e| io_error(&tmp, e))?;
        }
        out.flush().map_err(|e| io_error(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| io_error(path, e))
}

fn parse_lines<T: DeserializeOwned>(path: &Path, text: &str, tolerate_torn_tail: bool) -> Result<Vec<T>, JsonlError> {
    let complete = text.ends_with('\n');
    let lines: Vec<&str> = text.lines().collect();
    let mut items = Vec::with_capacity(lines.len());
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(line) {
            Ok(item) => items.push(item),
            Err(_) if tolerate_torn_tail && !complete && i + 1 == lines.len() => break,
            Err(e) => {
                return Err(JsonlError::Schema {
                    path: path.display().to_string(),
                    line: i + 1,
                    message: e.to_string(),
                })
            }
        }
    }
    Ok(items)
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, JsonlError> {
    let text = fs::read_to_string(path).map_err(|e| io_error(path, e))?;
    parse_lines(path, &text, false)
}

/// Like [`read_jsonl`], but a final line cut off mid-write is ignored. A
/// missing file reads as empty.
pub fn read_jsonl_resumable<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, JsonlError> {
    match fs::read_to_string(path) {
        Ok(text) => parse_lines(path, &text, true),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Vec::new()),
        Err(e) => Err(io_error(path, e)),
    }
}

/// Appends whole units of records; each batch is written and synced as one
/// block so an interrupted run loses at most the unit in flight.
pub struct JsonlAppender {
    path: PathBuf,
    file: File,
}

impl JsonlAppender {
    pub fn open(path: &Path) -> Result<Self, JsonlError> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| io_error(parent, e))?;
        }
        // A torn tail from an earlier crash is dropped before appending.
        if let Ok(text) = fs::read_to_string(path) {
            if !text.is_empty() && !text.ends_with('\n') {
                let keep = text.rfind('\n').map_or(0, |i| i + 1);
                fs::write(path, &text[..keep]).map_err(|e| io_error(path, e))?;
            }
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| io_error(path, e))?;
        Ok(JsonlAppender {
            path: path.to_path_buf(),
            file,
        })
    }

    pub fn append<T: Serialize>(&mut self, items: &[T]) -> Result<(), JsonlError> {
        let mut block = String::new();
        for item in items {
            block.push_str(&to_line(item));
            block.push('\n');
        }
        self.file
            .write_all(block.as_bytes())
            .and_then(|_| self.file.sync_data())
            .map_err(|e| io_error(&self.path, e))
    }
}
