//! Graph and dataset representation: JSON-Lines ingestion, train/test
//! splitting, Z-score target normalization, support sampling, and the
//! synthetic related-task family used for desk-scale experiments.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const FORMAT_TAG: &str = "meta-gnn-graphs-v1";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error at line {line}: {detail}")]
    Parse { line: usize, detail: String },
    #[error("schema error at line {line}: {detail}")]
    Schema { line: usize, detail: String },
    #[error("degenerate data: {0}")]
    Degenerate(String),
    #[error("contract violation: {0}")]
    Contract(String),
}

/// One undirected graph with node/edge features, optional 3-D coordinates,
/// and a multi-target label vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    pub id: String,
    pub num_nodes: usize,
    /// `num_nodes x d_node`, row-major by node.
    pub node_feats: Vec<Vec<f64>>,
    /// Undirected, stored once with `i < j`, no duplicates or self-loops.
    pub edges: Vec<(usize, usize)>,
    /// One row per stored edge; rows may be zero-width.
    pub edge_feats: Vec<Vec<f64>>,
    pub coords: Option<Vec<[f64; 3]>>,
    pub targets: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub graphs: Vec<Graph>,
    pub task_names: Vec<String>,
    pub d_node: usize,
    pub d_edge: usize,
    pub has_coords: bool,
}

impl Dataset {
    pub fn num_tasks(&self) -> usize {
        self.task_names.len()
    }
}

/// Z-score statistics fitted over pooled train-split labels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: f64,
    /// Population (divide-by-N) standard deviation; always > 0.
    pub std: f64,
}

impl Normalizer {
    pub fn apply(&self, y: f64) -> f64 {
        (y - self.mean) / self.std
    }

    pub fn invert(&self, z: f64) -> f64 {
        z * self.std + self.mean
    }
}

/// One regression task: a target index over a fixed graph-index split.
#[derive(Debug, Clone, Copy)]
pub struct Task<'a> {
    pub target_index: usize,
    pub split: &'a [usize],
}

/// K graphs with normalized labels for one task.
#[derive(Debug, Clone)]
pub struct SupportBatch {
    /// Indices into the owning dataset's graph list.
    pub graph_indices: Vec<usize>,
    pub labels: Vec<f64>,
}

// ---------------------------------------------------------------------------
// File format

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    task_names: Vec<String>,
    d_node: usize,
    d_edge: usize,
    has_coords: bool,
}

#[derive(Serialize, Deserialize)]
struct GraphRecord {
    id: String,
    num_nodes: usize,
    node_feats: Vec<Vec<f64>>,
    edges: Vec<[usize; 2]>,
    edge_feats: Vec<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    coords: Option<Vec<[f64; 3]>>,
    targets: Vec<f64>,
}

fn validate_graph(g: &Graph, d_node: usize, d_edge: usize, num_tasks: usize, has_coords: bool, line: usize) -> Result<(), DataError> {
    let schema = |detail: String| DataError::Schema { line, detail };
    if g.num_nodes == 0 {
        return Err(schema(format!("graph '{}' has no nodes", g.id)));
    }
    if g.node_feats.len() != g.num_nodes {
        return Err(schema(format!(
            "graph '{}': {} node feature rows for {} nodes",
            g.id,
            g.node_feats.len(),
            g.num_nodes
        )));
    }
    for row in &g.node_feats {
        if row.len() != d_node {
            return Err(schema(format!(
                "graph '{}': node feature width {} != {}",
                g.id,
                row.len(),
                d_node
            )));
        }
    }
    if g.edge_feats.len() != g.edges.len() {
        return Err(schema(format!(
            "graph '{}': {} edge feature rows for {} edges",
            g.id,
            g.edge_feats.len(),
            g.edges.len()
        )));
    }
    for row in &g.edge_feats {
        if row.len() != d_edge {
            return Err(schema(format!(
                "graph '{}': edge feature width {} != {}",
                g.id,
                row.len(),
                d_edge
            )));
        }
    }
    let mut seen = BTreeSet::new();
    for &(i, j) in &g.edges {
        if i >= j {
            return Err(schema(format!(
                "graph '{}': edge ({i},{j}) must satisfy i < j (no self-loops)",
                g.id
            )));
        }
        if j >= g.num_nodes {
            return Err(schema(format!(
                "graph '{}': edge endpoint {j} out of range",
                g.id
            )));
        }
        if !seen.insert((i, j)) {
            return Err(schema(format!("graph '{}': duplicate edge ({i},{j})", g.id)));
        }
    }
    match (&g.coords, has_coords) {
        (Some(c), true) => {
            if c.len() != g.num_nodes {
                return Err(schema(format!(
                    "graph '{}': {} coordinate rows for {} nodes",
                    g.id,
                    c.len(),
                    g.num_nodes
                )));
            }
        }
        (None, false) => {}
        (Some(_), false) => {
            return Err(schema(format!(
                "graph '{}': coords present but header has_coords=false",
                g.id
            )))
        }
        (None, true) => {
            return Err(schema(format!(
                "graph '{}': coords missing but header has_coords=true",
                g.id
            )))
        }
    }
    if g.targets.len() != num_tasks {
        return Err(schema(format!(
            "graph '{}': {} targets for {} tasks",
            g.id,
            g.targets.len(),
            num_tasks
        )));
    }
    Ok(())
}

/// Load and validate a JSON-Lines dataset file.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset, DataError> {
    let file = std::fs::File::open(path)?;
    let mut lines = BufReader::new(file).lines().enumerate();

    let (_, header_line) = lines.next().ok_or(DataError::Parse {
        line: 1,
        detail: "empty file".into(),
    })?;
    let header: Header = serde_json::from_str(&header_line?).map_err(|e| DataError::Parse {
        line: 1,
        detail: e.to_string(),
    })?;
    if header.format != FORMAT_TAG {
        return Err(DataError::Parse {
            line: 1,
            detail: format!("unknown format tag '{}'", header.format),
        });
    }

    let mut graphs = Vec::new();
    for (idx, line) in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let lineno = idx + 1;
        let rec: GraphRecord = serde_json::from_str(&line).map_err(|e| DataError::Parse {
            line: lineno,
            detail: e.to_string(),
        })?;
        let graph = Graph {
            id: rec.id,
            num_nodes: rec.num_nodes,
            node_feats: rec.node_feats,
            edges: rec.edges.iter().map(|e| (e[0], e[1])).collect(),
            edge_feats: rec.edge_feats,
            coords: rec.coords,
            targets: rec.targets,
        };
        validate_graph(
            &graph,
            header.d_node,
            header.d_edge,
            header.task_names.len(),
            header.has_coords,
            lineno,
        )?;
        graphs.push(graph);
    }

    Ok(Dataset {
        graphs,
        task_names: header.task_names,
        d_node: header.d_node,
        d_edge: header.d_edge,
        has_coords: header.has_coords,
    })
}

/// Write a dataset in the JSON-Lines format read by [`load_dataset`].
pub fn save_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<(), DataError> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    let header = Header {
        format: FORMAT_TAG.to_string(),
        task_names: ds.task_names.clone(),
        d_node: ds.d_node,
        d_edge: ds.d_edge,
        has_coords: ds.has_coords,
    };
    writeln!(out, "{}", serde_json::to_string(&header).expect("header serialization"))?;
    for g in &ds.graphs {
        let rec = GraphRecord {
            id: g.id.clone(),
            num_nodes: g.num_nodes,
            node_feats: g.node_feats.clone(),
            edges: g.edges.iter().map(|&(i, j)| [i, j]).collect(),
            edge_feats: g.edge_feats.clone(),
            coords: g.coords.clone(),
            targets: g.targets.clone(),
        };
        writeln!(out, "{}", serde_json::to_string(&rec).expect("graph serialization"))?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Splitting and normalization

/// Seeded random partition into `ceil(N*f)` train and the rest test indices.
pub fn split_dataset(ds: &Dataset, train_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>), DataError> {
    if !(0.0 < train_fraction && train_fraction < 1.0) {
        return Err(DataError::Contract(format!(
            "train_fraction {train_fraction} outside (0, 1)"
        )));
    }
    let n = ds.graphs.len();
    if n < 2 {
        return Err(DataError::Contract(format!("need at least 2 graphs, have {n}")));
    }
    let mut indices: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    indices.shuffle(&mut rng);
    let n_train = ((n as f64) * train_fraction).ceil() as usize;
    let test = indices.split_off(n_train);
    Ok((indices, test))
}

/// Fit Z-score statistics over the pooled labels of all tasks, restricted
/// to the train split. Population standard deviation.
pub fn zscore_fit(ds: &Dataset, train_indices: &[usize]) -> Result<Normalizer, DataError> {
    let labels: Vec<f64> = train_indices
        .iter()
        .flat_map(|&i| ds.graphs[i].targets.iter().copied())
        .collect();
    if labels.len() < 2 {
        return Err(DataError::Contract(format!(
            "need at least 2 labels to normalize, have {}",
            labels.len()
        )));
    }
    let n = labels.len() as f64;
    let mean = labels.iter().sum::<f64>() / n;
    let var = labels.iter().map(|&y| (y - mean) * (y - mean)).sum::<f64>() / n;
    if var <= 0.0 {
        return Err(DataError::Degenerate(
            "constant labels: zero standard deviation".into(),
        ));
    }
    Ok(Normalizer { mean, std: var.sqrt() })
}

/// Sample K graphs without replacement from the task's split, with labels
/// normalized for the task's target index.
pub fn sample_support(
    ds: &Dataset,
    task: Task<'_>,
    norm: &Normalizer,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Result<SupportBatch, DataError> {
    if task.target_index >= ds.num_tasks() {
        return Err(DataError::Contract(format!(
            "target index {} out of range for {} tasks",
            task.target_index,
            ds.num_tasks()
        )));
    }
    if task.split.len() < k {
        return Err(DataError::Contract(format!(
            "split of {} graphs is smaller than K={k}",
            task.split.len()
        )));
    }
    let picks = rand::seq::index::sample(rng, task.split.len(), k);
    let graph_indices: Vec<usize> = picks.iter().map(|i| task.split[i]).collect();
    let labels = graph_indices
        .iter()
        .map(|&i| norm.apply(ds.graphs[i].targets[task.target_index]))
        .collect();
    Ok(SupportBatch { graph_indices, labels })
}

// ---------------------------------------------------------------------------
// Synthetic task family

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthSpec {
    pub num_graphs: usize,
    pub nodes_min: usize,
    pub nodes_max: usize,
    pub d_node: usize,
    pub d_edge: usize,
    pub num_tasks: usize,
    pub with_coords: bool,
}

/// 6-dim graph summary the synthetic targets are linear in.
fn graph_summary(g: &Graph, nodes_max: usize) -> [f64; 6] {
    let node_norms: Vec<f64> = g
        .node_feats
        .iter()
        .map(|row| row.iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    let mean_node_norm = node_norms.iter().sum::<f64>() / node_norms.len() as f64;
    let max_node_norm = node_norms.iter().cloned().fold(0.0, f64::max);
    let edge_ratio = g.edges.len() as f64 / g.num_nodes as f64;
    let mean_edge_norm = if g.edge_feats.is_empty() {
        0.0
    } else {
        g.edge_feats
            .iter()
            .map(|row| row.iter().map(|x| x * x).sum::<f64>().sqrt())
            .sum::<f64>()
            / g.edge_feats.len() as f64
    };
    let mean_pair_dist = match &g.coords {
        Some(coords) if g.num_nodes > 1 => {
            let mut total = 0.0;
            let mut count = 0usize;
            for i in 0..coords.len() {
                for j in (i + 1)..coords.len() {
                    let d: f64 = (0..3)
                        .map(|a| (coords[i][a] - coords[j][a]).powi(2))
                        .sum::<f64>()
                        .sqrt();
                    total += d;
                    count += 1;
                }
            }
            total / count as f64
        }
        _ => 0.0,
    };
    [
        mean_node_norm,
        max_node_norm,
        edge_ratio,
        mean_edge_norm,
        mean_pair_dist,
        g.num_nodes as f64 / nodes_max as f64,
    ]
}

/// Uniform random labeled tree on `n` nodes (Pruefer decoding).
fn random_tree(n: usize, rng: &mut ChaCha8Rng) -> Vec<(usize, usize)> {
    match n {
        0 | 1 => Vec::new(),
        2 => vec![(0, 1)],
        _ => {
            let pruefer: Vec<usize> = (0..n - 2).map(|_| rng.gen_range(0..n)).collect();
            let mut degree = vec![1usize; n];
            for &p in &pruefer {
                degree[p] += 1;
            }
            let mut edges = Vec::with_capacity(n - 1);
            let mut ptr = 0;
            while degree[ptr] != 1 {
                ptr += 1;
            }
            let mut leaf = ptr;
            for &p in &pruefer {
                edges.push((leaf.min(p), leaf.max(p)));
                degree[p] -= 1;
                if degree[p] == 1 && p < ptr {
                    leaf = p;
                } else {
                    ptr += 1;
                    while degree[ptr] != 1 {
                        ptr += 1;
                    }
                    leaf = ptr;
                }
            }
            let last = degree
                .iter()
                .enumerate()
                .rev()
                .find(|&(i, &d)| d == 1 && i != leaf)
                .map(|(i, _)| i)
                .unwrap();
            edges.push((leaf.min(last), leaf.max(last)));
            edges
        }
    }
}

/// Generate a seeded dataset of random connected graphs whose targets are
/// linear functions of shared graph summaries, so tasks transfer.
pub fn synth_generate(spec: &SynthSpec, seed: u64) -> Result<Dataset, DataError> {
    if spec.nodes_min > spec.nodes_max {
        return Err(DataError::Contract(format!(
            "nodes_min {} > nodes_max {}",
            spec.nodes_min, spec.nodes_max
        )));
    }
    if spec.nodes_min == 0 {
        return Err(DataError::Contract("nodes_min must be >= 1".into()));
    }
    if spec.num_tasks < 2 {
        return Err(DataError::Contract(format!(
            "need at least 2 tasks, got {}",
            spec.num_tasks
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Task coefficients and offsets share a common random center with a small
    // per-task perturbation: the tasks stay distinct, but most of the label
    // variance comes from a shared graph-dependent signal, so an initialization
    // learned on some tasks transfers to the rest.
    const TASK_SPREAD: f64 = 0.05;
    // The shared Gaussian is centered on the structural (node-count) summary,
    // which graph-level readouts can recover from unseen graphs; the remaining
    // components contribute smaller, task-flavoring weights.
    const CENTER_MEAN: [f64; 6] = [0.0, 0.0, 0.0, 0.0, 0.0, 6.0];
    const CENTER_SPREAD: f64 = 0.3;
    let center: Vec<f64> = CENTER_MEAN
        .iter()
        .map(|m| m + CENTER_SPREAD * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let coeffs: Vec<Vec<f64>> = (0..spec.num_tasks)
        .map(|_| {
            (0..6)
                .map(|d| center[d] + TASK_SPREAD * rng.sample::<f64, _>(StandardNormal))
                .collect()
        })
        .collect();
    let offset_center: f64 = rng.sample(StandardNormal);
    let offsets: Vec<f64> = (0..spec.num_tasks)
        .map(|_| offset_center + TASK_SPREAD * rng.sample::<f64, _>(StandardNormal))
        .collect();

    let mut graphs = Vec::with_capacity(spec.num_graphs);
    for gi in 0..spec.num_graphs {
        let n = rng.gen_range(spec.nodes_min..=spec.nodes_max);
        let mut edge_set: BTreeSet<(usize, usize)> = random_tree(n, &mut rng).into_iter().collect();
        // sprinkle extra edges on top of the spanning tree
        if n >= 3 {
            for _ in 0..n / 2 {
                let i = rng.gen_range(0..n);
                let j = rng.gen_range(0..n);
                if i != j {
                    edge_set.insert((i.min(j), i.max(j)));
                }
            }
        }
        let edges: Vec<(usize, usize)> = edge_set.into_iter().collect();
        let node_feats: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..spec.d_node).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
            .collect();
        let edge_feats: Vec<Vec<f64>> = (0..edges.len())
            .map(|_| (0..spec.d_edge).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
            .collect();
        let coords = spec.with_coords.then(|| {
            (0..n)
                .map(|_| {
                    [
                        rng.sample::<f64, _>(StandardNormal),
                        rng.sample::<f64, _>(StandardNormal),
                        rng.sample::<f64, _>(StandardNormal),
                    ]
                })
                .collect::<Vec<[f64; 3]>>()
        });
        let mut graph = Graph {
            id: format!("synth-{gi}"),
            num_nodes: n,
            node_feats,
            edges,
            edge_feats,
            coords,
            targets: Vec::new(),
        };
        let summary = graph_summary(&graph, spec.nodes_max);
        graph.targets = (0..spec.num_tasks)
            .map(|t| {
                offsets[t]
                    + coeffs[t]
                        .iter()
                        .zip(&summary)
                        .map(|(c, s)| c * s)
                        .sum::<f64>()
            })
            .collect();
        graphs.push(graph);
    }

    Ok(Dataset {
        graphs,
        task_names: (0..spec.num_tasks).map(|t| format!("task-{t}")).collect(),
        d_node: spec.d_node,
        d_edge: spec.d_edge,
        has_coords: spec.with_coords,
    })
}

/// Child RNG for trial `stream` of a seeded experiment.
pub fn child_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Connectivity check used by generation tests.
pub fn is_connected(g: &Graph) -> bool {
    if g.num_nodes == 0 {
        return false;
    }
    let mut adj = vec![Vec::new(); g.num_nodes];
    for &(i, j) in &g.edges {
        adj[i].push(j);
        adj[j].push(i);
    }
    let mut seen = vec![false; g.num_nodes];
    let mut stack = vec![0usize];
    seen[0] = true;
    while let Some(v) = stack.pop() {
        for &w in &adj[v] {
            if !seen[w] {
                seen[w] = true;
                stack.push(w);
            }
        }
    }
    seen.into_iter().all(|s| s)
}

/// Format a float with a fixed exponent notation used in CSV artifacts.
pub fn sci3(x: f64) -> String {
    let mut s = String::new();
    write!(s, "{x:.2e}").unwrap();
    s
}
