//! In-context demonstration mining: density clustering of silver slot-value
//! pairs and same-cluster, same-scenario, other-dialogue sampling.

use std::collections::HashMap;
use std::path::Path;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::CorpusDialogue;
use crate::embed::{fnv1a, EmbedError, Embedder};
use crate::jsonl::{read_jsonl, JsonlError};
use crate::model::{DemoSource, Demonstration, SlotSpec, TrainingExample, Value};

pub type ClusterLabel = i64;
pub const NOISE: ClusterLabel = -1;

/// A filled slot-value pair from the corpus, embedded as `"slot: value"`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SlotValueKey {
    pub slot: String,
    pub value: String,
    pub turn_text: String,
    pub source: DemoSource,
}

impl SlotValueKey {
    pub fn text(&self) -> String {
        key_text(&self.slot, &self.value)
    }
}

pub fn key_text(slot: &str, value: &str) -> String {
    format!("{slot}: {value}")
}

pub fn slot_value_keys(corpus: &[CorpusDialogue]) -> Vec<SlotValueKey> {
    let mut keys = Vec::new();
    for d in corpus {
        for (t, update) in d.updates.iter().enumerate() {
            for pair in &update.pairs {
                if let Value::Filled(value) = &pair.value {
                    keys.push(SlotValueKey {
                        slot: pair.slot.clone(),
                        value: value.clone(),
                        turn_text: d.dialogue.turns[t].text.clone(),
                        source: DemoSource {
                            scenario_id: d.dialogue.scenario_id.clone(),
                            dialogue_id: d.dialogue.id.clone(),
                            turn_index: t,
                        },
                    });
                }
            }
        }
    }
    keys
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Density at zero distance is capped so identical points stay finite.
const MAX_LAMBDA: f64 = 1e12;

fn lambda_of(distance: f64) -> f64 {
    if distance <= 1.0 / MAX_LAMBDA {
        MAX_LAMBDA
    } else {
        1.0 / distance
    }
}

struct Merge {
    left: usize,
    right: usize,
    distance: f64,
    size: usize,
}

struct CondensedCluster {
    parent: Option<usize>,
    birth: f64,
    size: usize,
    children: Vec<usize>,
    stability: f64,
}

/// HDBSCAN over Euclidean distance with `min_samples = min_cluster_size`.
///
/// Clusters come from excess-of-mass selection on the condensed tree. The
/// root is only a cluster when nothing below it is large enough to split
/// off. Labels are numbered by each cluster's smallest member; noise is
/// [`NOISE`]. Time is quadratic and memory linear in the number of points.
pub fn hdbscan(points: &[Vec<f64>], min_cluster_size: usize) -> Vec<ClusterLabel> {
    let n = points.len();
    let mcs = min_cluster_size.max(2);
    if n < mcs {
        return vec![NOISE; n];
    }

    // Core distance: distance to the mcs-th nearest point, counting itself.
    let core: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut d: Vec<f64> = points.iter().map(|p| euclidean(&points[i], p)).collect();
            let k = mcs - 1;
            d.select_nth_unstable_by(k, f64::total_cmp);
            d[k]
        })
        .collect();

    // Prim's minimum spanning tree over mutual reachability.
    let mut in_tree = vec![false; n];
    let mut best = vec![f64::INFINITY; n];
    let mut from = vec![0usize; n];
    let mut edges: Vec<(f64, usize, usize)> = Vec::with_capacity(n - 1);
    let mut current = 0;
    in_tree[0] = true;
    for _ in 1..n {
        let updated: Vec<(usize, f64)> = (0..n)
            .into_par_iter()
            .filter(|&j| !in_tree[j])
            .map(|j| {
                let d = euclidean(&points[current], &points[j]).max(core[current]).max(core[j]);
                (j, d)
            })
            .collect();
        for (j, d) in updated {
            if d < best[j] {
                best[j] = d;
                from[j] = current;
            }
        }
        let next = (0..n)
            .filter(|&j| !in_tree[j])
            .min_by(|&a, &b| best[a].total_cmp(&best[b]).then(a.cmp(&b)))
            .expect("a point remains outside the tree");
        in_tree[next] = true;
        edges.push((best[next], from[next].min(next), from[next].max(next)));
        current = next;
    }
    edges.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));

    // Single-linkage tree: leaves are 0..n, merges are n..2n-1.
    let mut parent: Vec<usize> = (0..2 * n - 1).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    let mut sizes = vec![1usize; 2 * n - 1];
    let mut merges: Vec<Merge> = Vec::with_capacity(n - 1);
    for (distance, a, b) in edges {
        let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
        let node = n + merges.len();
        parent[ra] = node;
        parent[rb] = node;
        sizes[node] = sizes[ra] + sizes[rb];
        merges.push(Merge {
            left: ra,
            right: rb,
            distance,
            size: sizes[node],
        });
    }
    let node_size = |node: usize| if node < n { 1 } else { merges[node - n].size };
    let leaves_under = |node: usize| {
        let mut out = Vec::new();
        let mut stack = vec![node];
        while let Some(x) = stack.pop() {
            if x < n {
                out.push(x);
            } else {
                stack.push(merges[x - n].left);
                stack.push(merges[x - n].right);
            }
        }
        out
    };

    // Condensed tree.
    let mut clusters = vec![CondensedCluster {
        parent: None,
        birth: 0.0,
        size: n,
        children: Vec::new(),
        stability: 0.0,
    }];
    let mut fell_from = vec![0usize; n];
    let mut stack = vec![(2 * n - 2, 0usize)];
    while let Some((node, c)) = stack.pop() {
        if node < n {
            fell_from[node] = c;
            clusters[c].stability += MAX_LAMBDA - clusters[c].birth;
            continue;
        }
        let m = &merges[node - n];
        let lambda = lambda_of(m.distance);
        let (left, right) = (m.left, m.right);
        let big = [node_size(left) >= mcs, node_size(right) >= mcs];
        match big {
            [true, true] => {
                for child in [left, right] {
                    let id = clusters.len();
                    let size = node_size(child);
                    clusters.push(CondensedCluster {
                        parent: Some(c),
                        birth: lambda,
                        size,
                        children: Vec::new(),
                        stability: 0.0,
                    });
                    clusters[c].children.push(id);
                    clusters[c].stability += size as f64 * (lambda - clusters[c].birth);
                    stack.push((child, id));
                }
            }
            [keep_left, keep_right] => {
                for (child, keep) in [(left, keep_left), (right, keep_right)] {
                    if keep {
                        stack.push((child, c));
                    } else {
                        for p in leaves_under(child) {
                            fell_from[p] = c;
                            clusters[c].stability += lambda - clusters[c].birth;
                        }
                    }
                }
            }
        }
    }

    // Excess-of-mass selection, children before parents.
    let mut selected = vec![false; clusters.len()];
    let mut subtree = vec![0.0; clusters.len()];
    for c in (1..clusters.len()).rev() {
        let children: f64 = clusters[c].children.iter().map(|&k| subtree[k]).sum();
        if clusters[c].children.is_empty() || clusters[c].stability >= children {
            selected[c] = true;
            subtree[c] = clusters[c].stability;
            let mut stack = clusters[c].children.clone();
            while let Some(k) = stack.pop() {
                selected[k] = false;
                stack.extend(clusters[k].children.iter().copied());
            }
        } else {
            subtree[c] = children;
        }
    }
    if clusters[0].children.is_empty() && clusters[0].size >= mcs {
        selected[0] = true;
    }

    let owner = |mut c: usize| loop {
        if selected[c] {
            return Some(c);
        }
        c = clusters[c].parent?;
    };
    let owners: Vec<Option<usize>> = fell_from.iter().map(|&c| owner(c)).collect();
    let mut numbering: HashMap<usize, ClusterLabel> = HashMap::new();
    owners
        .iter()
        .map(|o| match o {
            None => NOISE,
            Some(c) => {
                let next = numbering.len() as ClusterLabel;
                *numbering.entry(*c).or_insert(next)
            }
        })
        .collect()
}

/// Embeds each text and clusters the vectors.
pub fn cluster_texts(
    texts: &[String],
    embedder: &dyn Embedder,
    min_cluster_size: usize,
) -> Result<Vec<ClusterLabel>, EmbedError> {
    if texts.is_empty() {
        return Ok(Vec::new());
    }
    let vectors = embedder.embed(texts)?;
    Ok(hdbscan(&vectors, min_cluster_size))
}

pub fn cluster_slot_values(
    keys: &[SlotValueKey],
    embedder: &dyn Embedder,
    min_cluster_size: usize,
) -> Result<Vec<ClusterLabel>, EmbedError> {
    let texts: Vec<String> = keys.iter().map(SlotValueKey::text).collect();
    cluster_texts(&texts, embedder, min_cluster_size)
}

fn example_seed(seed: u64, example: &TrainingExample, position: usize) -> u64 {
    let id = format!(
        "{}\u{1f}{}\u{1f}{}\u{1f}{position}",
        example.dialogue_id, example.turn_index, example.spec.slot
    );
    seed ^ fnv1a(id.as_bytes())
}

/// Up to `max_k` demonstrations drawn uniformly without replacement from
/// keys in the receiver's cluster and scenario but another dialogue.
pub fn sample_demonstrations(
    example: &TrainingExample,
    label: ClusterLabel,
    keys: &[SlotValueKey],
    labels: &[ClusterLabel],
    max_k: usize,
    seed: u64,
) -> Vec<Demonstration> {
    if label == NOISE || max_k == 0 {
        return Vec::new();
    }
    let pool: Vec<&SlotValueKey> = keys
        .iter()
        .zip(labels)
        .filter(|(k, &l)| {
            l == label && k.source.scenario_id == example.scenario_id && k.source.dialogue_id != example.dialogue_id
        })
        .map(|(k, _)| k)
        .collect();
    let take = max_k.min(pool.len());
    if take == 0 {
        return Vec::new();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    index::sample(&mut rng, pool.len(), take)
        .into_iter()
        .map(|i| {
            let k = pool[i];
            Demonstration {
                turn_text: k.turn_text.clone(),
                slot: k.slot.clone(),
                value: k.value.clone(),
                source: Some(k.source.clone()),
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IclParams {
    pub min_cluster_size: usize,
    pub max_demos: usize,
    pub seed: u64,
}

impl Default for IclParams {
    fn default() -> Self {
        IclParams {
            min_cluster_size: 5,
            max_demos: 3,
            seed: 0,
        }
    }
}

/// Cluster labels of the corpus keys and of each receiving example.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IclLabels {
    pub keys: Vec<ClusterLabel>,
    pub receivers: Vec<ClusterLabel>,
}

/// Clusters the corpus keys together with any receiver key not already
/// among them, then attaches demonstrations to every example. Receivers are
/// keyed by `"slot: target"`, so empty targets embed as `"slot: none"`.
pub fn augment_examples(
    examples: &mut [TrainingExample],
    keys: &[SlotValueKey],
    embedder: &dyn Embedder,
    params: &IclParams,
) -> Result<IclLabels, EmbedError> {
    let mut texts: Vec<String> = keys.iter().map(SlotValueKey::text).collect();
    let mut index_of: HashMap<String, usize> = HashMap::new();
    for (i, t) in texts.iter().enumerate() {
        index_of.entry(t.clone()).or_insert(i);
    }
    let receiver_texts: Vec<String> = examples
        .iter()
        .map(|e| key_text(&e.spec.slot, e.target.as_wire()))
        .collect();
    for t in &receiver_texts {
        if !index_of.contains_key(t) {
            index_of.insert(t.clone(), texts.len());
            texts.push(t.clone());
        }
    }
    let all_labels = cluster_texts(&texts, embedder, params.min_cluster_size)?;
    let key_labels = &all_labels[..keys.len()];
    let receivers: Vec<ClusterLabel> = receiver_texts.iter().map(|t| all_labels[index_of[t]]).collect();

    examples.par_iter_mut().enumerate().for_each(|(i, example)| {
        let seed = example_seed(params.seed, example, i);
        example.demos = sample_demonstrations(example, receivers[i], keys, key_labels, params.max_demos, seed);
    });
    Ok(IclLabels {
        keys: key_labels.to_vec(),
        receivers,
    })
}

/// `slot: description (e.g. v1, v2)?`, without the parenthetical when there
/// are no example values.
pub fn render_spec(spec: &SlotSpec) -> String {
    if spec.examples.is_empty() {
        format!("{}: {}?", spec.slot, spec.description)
    } else {
        format!("{}: {} (e.g. {})?", spec.slot, spec.description, spec.examples.join(", "))
    }
}

pub fn render_demo(demo: &Demonstration) -> String {
    format!("ex. {} {}? -> {}", demo.turn_text, demo.slot, demo.value)
}

/// The rendered spec followed by one `ex.` line per demonstration.
pub fn augment_description(spec: &SlotSpec, demos: &[Demonstration]) -> String {
    let mut out = render_spec(spec);
    for demo in demos {
        out.push('\n');
        out.push_str(&render_demo(demo));
    }
    out
}

/// Hand-written demonstrations, one `{slot, turn_text, value}` per line.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManualDemo {
    pub slot: String,
    pub turn_text: String,
    pub value: String,
}

/// Manual demonstrations grouped by slot, file order preserved.
pub fn read_manual_demos(path: &Path) -> Result<HashMap<String, Vec<Demonstration>>, JsonlError> {
    let records: Vec<ManualDemo> = read_jsonl(path)?;
    let mut by_slot: HashMap<String, Vec<Demonstration>> = HashMap::new();
    for r in records {
        by_slot.entry(r.slot.clone()).or_default().push(Demonstration {
            turn_text: r.turn_text,
            slot: r.slot,
            value: r.value,
            source: None,
        });
    }
    Ok(by_slot)
}
