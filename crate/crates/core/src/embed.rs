//! Text embedders producing unit-normalized vectors.

use std::time::Duration;

use rayon::prelude::*;
use serde_json::json;
use thiserror::Error;

use crate::gateway::RetryPolicy;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EmbedError {
    #[error("embedding endpoint: {0}")]
    Transport(String),
    #[error("embedding response: {0}")]
    BadResponse(String),
    #[error("embedding has zero norm")]
    ZeroVector,
}

pub trait Embedder: Send + Sync {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, EmbedError>;
}

pub fn normalize(mut v: Vec<f64>) -> Result<Vec<f64>, EmbedError> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(EmbedError::ZeroVector);
    }
    v.iter_mut().for_each(|x| *x /= norm);
    Ok(v)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        hash ^= u64::from(*b);
        hash = hash.wrapping_mul(0x0100_0000_01b3);
    }
    hash
}

/// Signed feature hashing of lowercase word unigrams and bigrams. Offline and
/// deterministic; texts with the same words map to the same vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashedEmbedder {
    pub dim: usize,
}

impl Default for HashedEmbedder {
    fn default() -> Self {
        HashedEmbedder { dim: 256 }
    }
}

impl HashedEmbedder {
    pub fn embed_one(&self, text: &str) -> Vec<f64> {
        let dim = self.dim.max(1);
        let tokens: Vec<String> = text
            .split(|c: char| !c.is_alphanumeric())
            .filter(|t| !t.is_empty())
            .map(str::to_lowercase)
            .collect();
        let mut v = vec![0.0; dim];
        let mut add = |feature: &str, weight: f64| {
            let h = fnv1a(feature.as_bytes());
            let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
            v[(h % dim as u64) as usize] += sign * weight;
        };
        for t in &tokens {
            add(t, 1.0);
        }
        for w in tokens.windows(2) {
            add(&format!("{} {}", w[0], w[1]), 0.5);
        }
        normalize(v).unwrap_or_else(|_| {
            let mut unit = vec![0.0; dim];
            unit[0] = 1.0;
            unit
        })
    }
}

impl Embedder for HashedEmbedder {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, EmbedError> {
        Ok(texts.par_iter().map(|t| self.embed_one(t)).collect())
    }
}

/// OpenAI-compatible `POST {base_url}/embeddings`, batched and fanned out.
pub struct HttpEmbedder {
    client: reqwest::blocking::Client,
    endpoint: String,
    model: String,
    api_key: Option<String>,
    retry: RetryPolicy,
    batch: usize,
}

impl HttpEmbedder {
    pub fn new(base_url: &str, model: &str, api_key_env: Option<&str>, retry: RetryPolicy) -> Result<Self, EmbedError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(120))
            .build()
            .map_err(|e| EmbedError::Transport(e.to_string()))?;
        Ok(HttpEmbedder {
            client,
            endpoint: format!("{}/embeddings", base_url.trim_end_matches('/')),
            model: model.to_string(),
            api_key: api_key_env.and_then(|name| std::env::var(name).ok()),
            retry,
            batch: 64,
        })
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, EmbedError> {
        let body = json!({"model": self.model, "input": texts});
        let mut last = String::new();
        for retry in 0..=self.retry.max_retries {
            if retry > 0 {
                std::thread::sleep(self.retry.delay_for(retry - 1));
            }
            let mut request = self.client.post(&self.endpoint).json(&body);
            if let Some(key) = &self.api_key {
                request = request.bearer_auth(key);
            }
            let response = match request.send() {
                Ok(r) => r,
                Err(e) => {
                    last = e.to_string();
                    continue;
                }
            };
            let status = response.status();
            let text = response.text().map_err(|e| EmbedError::Transport(e.to_string()))?;
            if status.as_u16() == 429 || status.is_server_error() {
                last = format!("HTTP {status}");
                continue;
            }
            if !status.is_success() {
                return Err(EmbedError::Transport(format!("HTTP {status}: {text}")));
            }
            return parse_embedding_response(&text, texts.len());
        }
        Err(EmbedError::Transport(last))
    }
}

fn parse_embedding_response(text: &str, expected: usize) -> Result<Vec<Vec<f64>>, EmbedError> {
    let parsed: serde_json::Value =
        serde_json::from_str(text).map_err(|e| EmbedError::BadResponse(e.to_string()))?;
    let data = parsed["data"]
        .as_array()
        .ok_or_else(|| EmbedError::BadResponse("missing data array".into()))?;
    let mut rows: Vec<(u64, Vec<f64>)> = data
        .iter()
        .enumerate()
        .map(|(pos, row)| {
            let index = row["index"].as_u64().unwrap_or(pos as u64);
            let vector = row["embedding"]
                .as_array()
                .ok_or_else(|| EmbedError::BadResponse("missing embedding".into()))?
                .iter()
                .map(|x| x.as_f64().ok_or_else(|| EmbedError::BadResponse("non-numeric".into())))
                .collect::<Result<Vec<f64>, _>>()?;
            Ok((index, vector))
        })
        .collect::<Result<_, EmbedError>>()?;
    if rows.len() != expected {
        return Err(EmbedError::BadResponse(format!(
            "{} embeddings for {expected} inputs",
            rows.len()
        )));
    }
    rows.sort_by_key(|(i, _)| *i);
    rows.into_iter().map(|(_, v)| normalize(v)).collect()
}

impl Embedder for HttpEmbedder {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, EmbedError> {
        let batches: Vec<Vec<Vec<f64>>> = texts
            .par_chunks(self.batch)
            .map(|chunk| self.embed_batch(chunk))
            .collect::<Result<_, _>>()?;
        Ok(batches.into_iter().flatten().collect())
    }
}
