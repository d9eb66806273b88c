//! Scenario derivation: repeatedly ask for a mini-set of scenario lines,
//! embed the union with what is already kept, cluster near-duplicates and
//! keep one scenario per cluster until the requested count is reached.

use std::fs;
use std::path::Path;

use thiserror::Error;
use tracing::info;

use crate::embed::{dot, EmbedError, Embedder};
use crate::gateway::{bindings, Gateway, GatewayError, TemplateId};
use crate::model::Scenario;
use crate::parse::parse_numbered_list;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScenarioError {
    #[error("invalid derivation parameters: {0}")]
    InvalidParams(String),
    #[error("vector {index} has dimension {found}, expected {expected}")]
    DimensionMismatch {
        index: usize,
        expected: usize,
        found: usize,
    },
    #[error("no net new scenarios for {iterations} consecutive iterations ({kept} kept)")]
    Stagnation { iterations: usize, kept: usize },
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error("embedding sidecar {path}: {message}")]
    Sidecar { path: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Cluster {
    /// Ascending member indices.
    pub members: Vec<usize>,
    pub representative: usize,
}

/// Greedy community detection over cosine similarity.
///
/// Each vector's neighbourhood is every vector with similarity `>= threshold`
/// (itself included). Neighbourhoods of at least `min_size` are visited
/// largest first (ties by index); a visit whose seed is still unassigned claims
/// the unassigned part of the neighbourhood if that part still has `min_size`
/// members. Leftover vectors become singleton clusters, so the result always
/// partitions `0..vectors.len()`.
pub fn cluster_communities(
    vectors: &[Vec<f64>],
    threshold: f64,
    min_size: usize,
) -> Result<Vec<Cluster>, ScenarioError> {
    let Some(dim) = vectors.first().map(Vec::len) else {
        return Ok(Vec::new());
    };
    if let Some((index, v)) = vectors.iter().enumerate().find(|(_, v)| v.len() != dim) {
        return Err(ScenarioError::DimensionMismatch {
            index,
            expected: dim,
            found: v.len(),
        });
    }
    let n = vectors.len();
    let min_size = min_size.max(1);
    let neighbours: Vec<Vec<usize>> = (0..n)
        .map(|i| {
            (0..n)
                .filter(|&j| j == i || dot(&vectors[i], &vectors[j]) >= threshold)
                .collect()
        })
        .collect();
    let mut seeds: Vec<usize> = (0..n).filter(|&i| neighbours[i].len() >= min_size).collect();
    seeds.sort_by_key(|&i| (std::cmp::Reverse(neighbours[i].len()), i));

    let mut assigned = vec![false; n];
    let mut clusters = Vec::new();
    for seed in seeds {
        if assigned[seed] {
            continue;
        }
        let members: Vec<usize> = neighbours[seed].iter().copied().filter(|&j| !assigned[j]).collect();
        if members.len() < min_size {
            continue;
        }
        for &m in &members {
            assigned[m] = true;
        }
        clusters.push(Cluster {
            members,
            representative: seed,
        });
    }
    for i in (0..n).filter(|&i| !assigned[i]) {
        clusters.push(Cluster {
            members: vec![i],
            representative: i,
        });
    }
    Ok(clusters)
}

/// Indices (ascending) of the vectors kept after near-duplicate removal,
/// one per community, preferring the lowest index. Communities are recomputed
/// over the survivors until no two survivors reach the threshold.
pub fn deduplicate(vectors: &[Vec<f64>], threshold: f64) -> Result<Vec<usize>, ScenarioError> {
    let mut kept: Vec<usize> = (0..vectors.len()).collect();
    loop {
        let subset: Vec<Vec<f64>> = kept.iter().map(|&i| vectors[i].clone()).collect();
        let clusters = cluster_communities(&subset, threshold, 1)?;
        let all_single = clusters.iter().all(|c| c.members.len() == 1);
        let mut next: Vec<usize> = clusters.iter().map(|c| kept[c.members[0]]).collect();
        next.sort_unstable();
        if all_single {
            return Ok(next);
        }
        kept = next;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DerivationParams {
    /// Scenarios requested per iteration.
    pub mini_set: usize,
    /// Final scenario count.
    pub target: usize,
    /// Cosine similarity at which two scenarios count as duplicates.
    pub threshold: f64,
    /// Consecutive iterations without net growth before giving up.
    pub stagnation_limit: usize,
}

impl Default for DerivationParams {
    fn default() -> Self {
        DerivationParams {
            mini_set: 100,
            target: 1000,
            threshold: 0.75,
            stagnation_limit: 20,
        }
    }
}

impl DerivationParams {
    pub fn validate(&self) -> Result<(), ScenarioError> {
        let bad = |m: &str| Err(ScenarioError::InvalidParams(m.to_string()));
        if !(1..=10_000).contains(&self.mini_set) {
            return bad("mini-set size must be in 1..=10000");
        }
        if !(1..=1_000_000).contains(&self.target) {
            return bad("final set size must be in 1..=1000000");
        }
        if !(-1.0..=1.0).contains(&self.threshold) {
            return bad("threshold must be a cosine similarity in [-1, 1]");
        }
        if self.stagnation_limit == 0 {
            return bad("stagnation limit must be positive");
        }
        Ok(())
    }
}

pub fn scenario_id(ordinal: usize) -> String {
    format!("scn-{ordinal:06}")
}

/// Runs the derivation loop; returned scenarios carry their embeddings and
/// keep generation order.
pub fn derive_scenarios(
    gateway: &Gateway,
    embedder: &dyn Embedder,
    params: &DerivationParams,
) -> Result<Vec<Scenario>, ScenarioError> {
    params.validate()?;
    let mut kept: Vec<Scenario> = Vec::new();
    let mut generated = 0usize;
    let mut stagnant = 0usize;
    // Re-clustering the union can shrink the kept set, so growth is measured
    // against the largest size reached; this bounds the loop.
    let mut best = 0usize;
    let mut iteration = 0u32;
    let request = bindings([("count", params.mini_set.to_string())]);

    while kept.len() < params.target {
        let lines = gateway.ask(TemplateId::Scenarios, &request, iteration, parse_numbered_list)?;
        iteration += 1;
        let fresh: Vec<Scenario> = lines
            .into_iter()
            .take(params.mini_set)
            .filter_map(|line| {
                let s = Scenario::new(scenario_id(generated), line).ok()?;
                generated += 1;
                Some(s)
            })
            .collect();
        let texts: Vec<String> = fresh.iter().map(|s| s.description.clone()).collect();
        let vectors = embedder.embed(&texts)?;
        let mut union = kept;
        for (scenario, vector) in fresh.into_iter().zip(vectors) {
            union.push(Scenario {
                embedding: Some(vector),
                ..scenario
            });
        }
        let embeddings: Vec<Vec<f64>> = union
            .iter()
            .map(|s| s.embedding.clone().unwrap_or_default())
            .collect();
        let keep = deduplicate(&embeddings, params.threshold)?;
        let mut slots: Vec<Option<Scenario>> = union.into_iter().map(Some).collect();
        kept = keep.into_iter().filter_map(|i| slots[i].take()).collect();

        if kept.len() > best {
            best = kept.len();
            stagnant = 0;
        } else {
            stagnant += 1;
            if stagnant >= params.stagnation_limit {
                return Err(ScenarioError::Stagnation {
                    iterations: stagnant,
                    kept: kept.len(),
                });
            }
        }
        info!(iteration, kept = kept.len(), target = params.target, "scenario derivation");
    }
    kept.truncate(params.target);
    Ok(kept)
}

const SIDECAR_MAGIC: &[u8; 8] = b"DSTEMB01";

/// Binary sidecar: magic, `u32` dimension, `u32` count, then per record a
/// `u32` id length, the UTF-8 id and `dimension` little-endian `f64`s.
pub fn write_embeddings(path: &Path, scenarios: &[Scenario]) -> Result<(), ScenarioError> {
    let err = |m: String| ScenarioError::Sidecar {
        path: path.display().to_string(),
        message: m,
    };
    let dim = scenarios
        .iter()
        .find_map(|s| s.embedding.as_ref().map(Vec::len))
        .unwrap_or(0);
    let mut out = Vec::new();
    out.extend_from_slice(SIDECAR_MAGIC);
    out.extend_from_slice(&(dim as u32).to_le_bytes());
    let records: Vec<(&str, &Vec<f64>)> = scenarios
        .iter()
        .filter_map(|s| s.embedding.as_ref().map(|e| (s.id.as_str(), e)))
        .collect();
    out.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for (id, vector) in records {
        if vector.len() != dim {
            return Err(err(format!("{id} has dimension {}, expected {dim}", vector.len())));
        }
        out.extend_from_slice(&(id.len() as u32).to_le_bytes());
        out.extend_from_slice(id.as_bytes());
        for x in vector {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    fs::write(path, out).map_err(|e| err(e.to_string()))
}

pub fn read_embeddings(path: &Path) -> Result<Vec<(String, Vec<f64>)>, ScenarioError> {
    let err = |m: &str| ScenarioError::Sidecar {
        path: path.display().to_string(),
        message: m.to_string(),
    };
    let bytes = fs::read(path).map_err(|e| err(&e.to_string()))?;
    let mut cursor = bytes.as_slice();
    let mut take = |n: usize| -> Result<&[u8], ScenarioError> {
        if cursor.len() < n {
            return Err(err("truncated file"));
        }
        let (head, tail) = cursor.split_at(n);
        cursor = tail;
        Ok(head)
    };
    if take(8)? != SIDECAR_MAGIC {
        return Err(err("bad magic"));
    }
    let u32_at = |b: &[u8]| u32::from_le_bytes(b.try_into().unwrap()) as usize;
    let dim = u32_at(take(4)?);
    let count = u32_at(take(4)?);
    let mut records = Vec::with_capacity(count);
    for _ in 0..count {
        let len = u32_at(take(4)?);
        let id = String::from_utf8(take(len)?.to_vec()).map_err(|_| err("id is not UTF-8"))?;
        let vector = (0..dim)
            .map(|_| Ok(f64::from_le_bytes(take(8)?.try_into().unwrap())))
            .collect::<Result<Vec<f64>, ScenarioError>>()?;
        records.push((id, vector));
    }
    Ok(records)
}
