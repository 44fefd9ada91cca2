//! GNN layers and full model assemblies: GCN, GAT, MPNN, and the
//! E(3)-equivariant message-passing variant, plus graph normalization,
//! global max pooling, initialization, and parameter persistence.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use thiserror::Error;

use crate::data::{Dataset, SupportBatch};
use crate::tensor::{BoundParams, ParamSet, Tape, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error: {0}")]
    Parse(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArchKind {
    Gcn,
    Gat,
    Mpnn,
    Egnn,
}

impl ArchKind {
    pub fn name(self) -> &'static str {
        match self {
            ArchKind::Gcn => "gcn",
            ArchKind::Gat => "gat",
            ArchKind::Mpnn => "mpnn",
            ArchKind::Egnn => "egnn",
        }
    }

    pub fn parse(s: &str) -> Result<Self, ModelError> {
        match s {
            "gcn" => Ok(ArchKind::Gcn),
            "gat" => Ok(ArchKind::Gat),
            "mpnn" => Ok(ArchKind::Mpnn),
            "egnn" => Ok(ArchKind::Egnn),
            other => Err(ModelError::Parse(format!("unknown architecture '{other}'"))),
        }
    }

    pub fn uses_coords(self) -> bool {
        matches!(self, ArchKind::Egnn)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Architecture {
    pub kind: ArchKind,
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub d_node: usize,
    pub d_edge: usize,
}

impl Architecture {
    pub fn new(kind: ArchKind, d_node: usize, d_edge: usize) -> Self {
        Architecture { kind, hidden_dim: 64, num_layers: 3, d_node, d_edge }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.hidden_dim == 0 || self.num_layers == 0 {
            return Err(ModelError::Contract(
                "hidden_dim and num_layers must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// A ParamSet tied to the architecture whose shape table produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub arch: Architecture,
    pub params: ParamSet,
}

/// Batch-norm mode: training uses current-batch statistics, evaluation
/// uses stored running averages.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Running-statistic refresh produced by a training-mode forward pass.
#[derive(Debug, Clone)]
pub struct BnUpdate {
    pub name: String,
    pub value: Vec<f64>,
}

const BN_EPS: f64 = 1e-5;
const GRAPH_NORM_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;
pub const GAT_LEAKY_SLOPE: f64 = 0.2;

/// Stacked multi-graph batch. Edges are stored directed, both
/// orientations of every undirected edge.
#[derive(Debug, Clone)]
pub struct GraphBatch {
    pub num_nodes: usize,
    pub num_graphs: usize,
    pub node_feats: Tensor,
    pub undirected_edges: Vec<(usize, usize)>,
    pub edge_src: Vec<usize>,
    pub edge_dst: Vec<usize>,
    pub edge_feats: Tensor,
    pub coords: Option<Tensor>,
    /// Non-decreasing graph assignment per node row.
    pub graph_of_node: Vec<usize>,
    pub labels: Vec<f64>,
}

impl GraphBatch {
    pub fn from_graphs(ds: &Dataset, indices: &[usize], labels: &[f64]) -> Self {
        assert_eq!(indices.len(), labels.len());
        let mut node_feats = Vec::new();
        let mut undirected = Vec::new();
        let mut edge_src = Vec::new();
        let mut edge_dst = Vec::new();
        let mut edge_feats = Vec::new();
        let mut coords = ds.has_coords.then(Vec::new);
        let mut graph_of_node = Vec::new();
        let mut offset = 0usize;
        for (gi, &idx) in indices.iter().enumerate() {
            let g = &ds.graphs[idx];
            for row in &g.node_feats {
                node_feats.extend_from_slice(row);
            }
            graph_of_node.extend(std::iter::repeat(gi).take(g.num_nodes));
            for (&(i, j), ef) in g.edges.iter().zip(&g.edge_feats) {
                undirected.push((offset + i, offset + j));
                edge_src.push(offset + i);
                edge_dst.push(offset + j);
                edge_feats.extend_from_slice(ef);
                edge_src.push(offset + j);
                edge_dst.push(offset + i);
                edge_feats.extend_from_slice(ef);
            }
            if let (Some(acc), Some(c)) = (coords.as_mut(), g.coords.as_ref()) {
                for row in c {
                    acc.extend_from_slice(row);
                }
            }
            offset += g.num_nodes;
        }
        let num_directed = edge_dst.len();
        GraphBatch {
            num_nodes: offset,
            num_graphs: indices.len(),
            node_feats: Tensor::new(vec![offset, ds.d_node], node_feats).expect("node feats"),
            undirected_edges: undirected,
            edge_src,
            edge_dst,
            edge_feats: Tensor::new(vec![num_directed, ds.d_edge], edge_feats)
                .expect("edge feats"),
            coords: coords.map(|c| Tensor::new(vec![offset, 3], c).expect("coords")),
            graph_of_node,
            labels: labels.to_vec(),
        }
    }

    pub fn from_support(ds: &Dataset, support: &SupportBatch) -> Self {
        Self::from_graphs(ds, &support.graph_indices, &support.labels)
    }

    /// Directed in-degree per node (self-loops excluded).
    pub fn in_degrees(&self) -> Vec<usize> {
        let mut deg = vec![0usize; self.num_nodes];
        for &d in &self.edge_dst {
            deg[d] += 1;
        }
        deg
    }
}

// ---------------------------------------------------------------------------
// Initialization

enum Init {
    UniformFanIn(usize),
    /// Fan-in noise plus a single shared uniform offset: a fresh readout
    /// starts visibly uncalibrated, so training has a calibration signal.
    UncalibratedHead(usize),
    Zero,
    One,
}

/// Deterministic parameter shape table for an architecture.
fn shape_table(arch: &Architecture) -> Vec<(String, Vec<usize>, Init)> {
    let h = arch.hidden_dim;
    let l = arch.num_layers;
    let mut out = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, init: Init| out.push((name, shape, init));

    let mlp = |out: &mut Vec<(String, Vec<usize>, Init)>, prefix: &str, d_in: usize, d_out: usize| {
        out.push((format!("{prefix}.lin0.weight"), vec![d_in, d_out], Init::UniformFanIn(d_in)));
        out.push((format!("{prefix}.lin0.bias"), vec![d_out], Init::Zero));
        out.push((format!("{prefix}.bn.scale"), vec![d_out], Init::One));
        out.push((format!("{prefix}.bn.shift"), vec![d_out], Init::Zero));
        out.push((format!("{prefix}.bn.running_mean"), vec![d_out], Init::Zero));
        out.push((format!("{prefix}.bn.running_var"), vec![d_out], Init::One));
        out.push((format!("{prefix}.lin1.weight"), vec![d_out, d_out], Init::UniformFanIn(d_out)));
        out.push((format!("{prefix}.lin1.bias"), vec![d_out], Init::Zero));
    };

    match arch.kind {
        ArchKind::Gcn => {
            for layer in 0..l {
                let d_in = if layer == 0 { arch.d_node } else { h };
                push(format!("layer{layer}.weight"), vec![d_in, h], Init::UniformFanIn(d_in));
                push(format!("layer{layer}.bias"), vec![h], Init::Zero);
                push(format!("norm{layer}.scale"), vec![h], Init::One);
                push(format!("norm{layer}.shift"), vec![h], Init::Zero);
            }
            push("head.weight".into(), vec![h, 1], Init::UncalibratedHead(h));
            push("head.bias".into(), vec![1], Init::Zero);
        }
        ArchKind::Gat => {
            for layer in 0..l {
                let d_in = if layer == 0 { arch.d_node } else { h };
                push(format!("layer{layer}.weight"), vec![d_in, h], Init::UniformFanIn(d_in));
                push(format!("layer{layer}.attn"), vec![2 * h, 1], Init::UniformFanIn(2 * h));
                push(format!("norm{layer}.scale"), vec![h], Init::One);
                push(format!("norm{layer}.shift"), vec![h], Init::Zero);
            }
            push("head.weight".into(), vec![h, 1], Init::UncalibratedHead(h));
            push("head.bias".into(), vec![1], Init::Zero);
        }
        ArchKind::Mpnn => {
            for layer in 0..l {
                let d_in = if layer == 0 { arch.d_node } else { h };
                mlp(&mut out, &format!("layer{layer}.psi"), 2 * d_in + arch.d_edge, h);
                mlp(&mut out, &format!("layer{layer}.phi"), d_in + h, h);
            }
            out.push(("head.weight".into(), vec![h, 1], Init::UniformFanIn(h)));
            out.push(("head.bias".into(), vec![1], Init::Zero));
        }
        ArchKind::Egnn => {
            for layer in 0..l {
                let d_in = if layer == 0 { arch.d_node } else { h };
                mlp(&mut out, &format!("layer{layer}.psi_e"), 2 * d_in + 1 + arch.d_edge, h);
                out.push((format!("layer{layer}.psi_x.weight"), vec![h, 1], Init::UniformFanIn(h)));
                out.push((format!("layer{layer}.psi_x.bias"), vec![1], Init::Zero));
                mlp(&mut out, &format!("layer{layer}.phi"), d_in + h, h);
            }
            out.push(("head.weight".into(), vec![h, 1], Init::UniformFanIn(h)));
            out.push(("head.bias".into(), vec![1], Init::Zero));
        }
    }
    out
}

/// Seeded initialization: weight matrices uniform in
/// `(-sqrt(1/fan_in), sqrt(1/fan_in))`, biases and shifts zero,
/// scales one.
pub fn model_init(arch: Architecture, seed: u64) -> Result<ModelParams, ModelError> {
    arch.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamSet::new();
    for (name, shape, init) in shape_table(&arch) {
        let numel: usize = shape.iter().product();
        let data = match init {
            Init::UniformFanIn(fan_in) => {
                let bound = (1.0 / fan_in as f64).sqrt();
                (0..numel).map(|_| rng.gen_range(-bound..bound)).collect()
            }
            Init::UncalibratedHead(fan_in) => {
                let offset = rng.gen_range(-1.5..1.5);
                let bound = (1.0 / fan_in as f64).sqrt();
                (0..numel).map(|_| offset + rng.gen_range(-bound..bound)).collect()
            }
            Init::Zero => vec![0.0; numel],
            Init::One => vec![1.0; numel],
        };
        params.insert(name, Tensor::new(shape, data).expect("shape table"));
    }
    Ok(ModelParams { arch, params })
}

// ---------------------------------------------------------------------------
// Layer primitives

/// Tile a `[1,n]` row to `[m,n]` via ones-matmul (keeps gradients exact).
fn tile_rows(tape: &mut Tape, row: Var, m: usize) -> Result<Var, TensorError> {
    let ones = tape.constant(m, 1, vec![1.0; m])?;
    tape.matmul(ones, row)
}

/// Tile an `[m,1]` column to `[m,n]`.
fn tile_cols(tape: &mut Tape, col: Var, n: usize) -> Result<Var, TensorError> {
    let ones = tape.constant(1, n, vec![1.0; n])?;
    tape.matmul(col, ones)
}

/// Symmetric-normalized adjacency with self-loops,
/// `D^{-1/2} (A + I) D^{-1/2}`, as a dense row-major matrix.
pub fn normalized_adjacency(num_nodes: usize, undirected_edges: &[(usize, usize)]) -> Vec<f64> {
    let mut deg = vec![1.0f64; num_nodes]; // self-loop
    for &(i, j) in undirected_edges {
        deg[i] += 1.0;
        deg[j] += 1.0;
    }
    let inv_sqrt: Vec<f64> = deg.iter().map(|d| 1.0 / d.sqrt()).collect();
    let mut c = vec![0.0; num_nodes * num_nodes];
    for v in 0..num_nodes {
        c[v * num_nodes + v] = inv_sqrt[v] * inv_sqrt[v];
    }
    for &(i, j) in undirected_edges {
        c[i * num_nodes + j] = inv_sqrt[i] * inv_sqrt[j];
        c[j * num_nodes + i] = inv_sqrt[i] * inv_sqrt[j];
    }
    c
}

/// `H' = C H W + b` with the Kipf-Welling normalized adjacency.
pub fn gcn_layer(
    tape: &mut Tape,
    h: Var,
    num_nodes: usize,
    undirected_edges: &[(usize, usize)],
    weight: Var,
    bias: Var,
) -> Result<Var, TensorError> {
    let c = normalized_adjacency(num_nodes, undirected_edges);
    let c = tape.constant(num_nodes, num_nodes, c)?;
    let agg = tape.matmul(c, h)?;
    let hw = tape.matmul(agg, weight)?;
    tape.add_bias(hw, bias)
}

/// Single-head attention over `N_i âˆª {i}`:
/// `score(i,j) = leaky_relu(a^T [W h_i || W h_j])`, softmax per
/// destination, `h'_i = sum_j alpha_ij W h_j`.
pub fn gat_layer(
    tape: &mut Tape,
    h: Var,
    num_nodes: usize,
    edge_src: &[usize],
    edge_dst: &[usize],
    weight: Var,
    attn: Var,
) -> Result<Var, TensorError> {
    // self-loops appended after the directed edges
    let mut src: Vec<usize> = edge_src.to_vec();
    let mut dst: Vec<usize> = edge_dst.to_vec();
    src.extend(0..num_nodes);
    dst.extend(0..num_nodes);

    let wh = tape.matmul(h, weight)?;
    let (_, f) = tape.dims(wh);
    let hi = tape.gather_rows(wh, &dst)?;
    let hj = tape.gather_rows(wh, &src)?;
    let cat = tape.concat_cols(&[hi, hj])?;
    let score = tape.matmul(cat, attn)?;
    let score = tape.leaky_relu(score, GAT_LEAKY_SLOPE)?;
    let alpha = tape.segment_softmax(score, &dst, num_nodes)?;
    let alpha_tiled = tile_cols(tape, alpha, f)?;
    let weighted = tape.mul(hj, alpha_tiled)?;
    tape.segment_sum(weighted, &dst, num_nodes)
}

/// Aggregation for the message-passing layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Aggregation {
    Max,
    Sum,
}

struct MlpParams<'a> {
    prefix: String,
    bound: &'a BoundParams,
    params: &'a ParamSet,
}

impl<'a> MlpParams<'a> {
    fn new(prefix: impl Into<String>, bound: &'a BoundParams, params: &'a ParamSet) -> Self {
        MlpParams { prefix: prefix.into(), bound, params }
    }

    fn var(&self, suffix: &str) -> Var {
        self.bound[&format!("{}.{suffix}", self.prefix)]
    }

    fn raw(&self, suffix: &str) -> &Tensor {
        self.params.get(&format!("{}.{suffix}", self.prefix)).expect("mlp param")
    }
}

/// 1-D batch normalization over rows. Training mode normalizes with
/// current-batch statistics and emits a running-average refresh;
/// evaluation mode uses the stored running statistics as constants.
fn batch_norm(
    tape: &mut Tape,
    x: Var,
    mlp: &MlpParams<'_>,
    mode: Mode,
    updates: &mut Vec<BnUpdate>,
) -> Result<Var, TensorError> {
    let (m, n) = tape.dims(x);
    let centered;
    let denom_row;
    match mode {
        Mode::Train => {
            let averager = tape.constant(1, m, vec![1.0 / m as f64; m])?;
            let mean = tape.matmul(averager, x)?;
            let mean_tiled = tile_rows(tape, mean, m)?;
            centered = tape.sub(x, mean_tiled)?;
            let sq = tape.square(centered)?;
            let var = tape.matmul(averager, sq)?;
            let eps = tape.constant(1, n, vec![BN_EPS; n])?;
            let var_eps = tape.add(var, eps)?;
            denom_row = tape.sqrt(var_eps)?;

            let batch_mean = tape.data(mean).to_vec();
            let batch_var: Vec<f64> = {
                let ve = tape.data(var_eps);
                ve.iter().map(|v| v - BN_EPS).collect()
            };
            let rm = mlp.raw("bn.running_mean");
            let rv = mlp.raw("bn.running_var");
            updates.push(BnUpdate {
                name: format!("{}.bn.running_mean", mlp.prefix),
                value: rm
                    .data
                    .iter()
                    .zip(&batch_mean)
                    .map(|(&r, &b)| (1.0 - BN_MOMENTUM) * r + BN_MOMENTUM * b)
                    .collect(),
            });
            updates.push(BnUpdate {
                name: format!("{}.bn.running_var", mlp.prefix),
                value: rv
                    .data
                    .iter()
                    .zip(&batch_var)
                    .map(|(&r, &b)| (1.0 - BN_MOMENTUM) * r + BN_MOMENTUM * b)
                    .collect(),
            });
        }
        Mode::Eval => {
            // running stats enter as constants so adaptation gradients
            // do not flow into them
            let rm = mlp.raw("bn.running_mean").data.clone();
            let rv = mlp.raw("bn.running_var").data.clone();
            let mean = tape.constant(1, n, rm)?;
            let mean_tiled = tile_rows(tape, mean, m)?;
            centered = tape.sub(x, mean_tiled)?;
            let denom: Vec<f64> = rv.iter().map(|v| (v + BN_EPS).sqrt()).collect();
            denom_row = tape.constant(1, n, denom)?;
        }
    }
    let denom_tiled = tile_rows(tape, denom_row, m)?;
    let normed = tape.div(centered, denom_tiled)?;
    let scale_tiled = tile_rows(tape, mlp.var("bn.scale"), m)?;
    let scaled = tape.mul(normed, scale_tiled)?;
    tape.add_bias(scaled, mlp.var("bn.shift"))
}

/// Two linear layers with 1-D batch normalization and ReLU:
/// `lin0 -> bn -> relu -> lin1`.
fn mlp_forward(
    tape: &mut Tape,
    x: Var,
    mlp: &MlpParams<'_>,
    mode: Mode,
    updates: &mut Vec<BnUpdate>,
) -> Result<Var, TensorError> {
    let h = tape.matmul(x, mlp.var("lin0.weight"))?;
    let h = tape.add_bias(h, mlp.var("lin0.bias"))?;
    let h = batch_norm(tape, h, mlp, mode, updates)?;
    let h = tape.relu(h)?;
    let h = tape.matmul(h, mlp.var("lin1.weight"))?;
    tape.add_bias(h, mlp.var("lin1.bias"))
}

/// `m_ij = psi([h_i || h_j || e_ij])`, aggregated over in-neighbors
/// (isolated nodes aggregate to zero), `h'_i = phi([h_i || M_i])`.
#[allow(clippy::too_many_arguments)]
pub fn mpnn_layer(
    tape: &mut Tape,
    h: Var,
    num_nodes: usize,
    edge_src: &[usize],
    edge_dst: &[usize],
    edge_feats: Var,
    psi: &MlpSpec<'_>,
    phi: &MlpSpec<'_>,
    aggregation: Aggregation,
    mode: Mode,
    updates: &mut Vec<BnUpdate>,
) -> Result<Var, TensorError> {
    let (_, hidden) = {
        let w = psi.mlp.raw("lin1.weight");
        w.matrix_dims()
    };
    let aggregated = if edge_src.is_empty() {
        tape.constant(num_nodes, hidden, vec![0.0; num_nodes * hidden])?
    } else {
        let hi = tape.gather_rows(h, edge_dst)?;
        let hj = tape.gather_rows(h, edge_src)?;
        let (_, d_edge) = tape.dims(edge_feats);
        let cat = if d_edge > 0 {
            tape.concat_cols(&[hi, hj, edge_feats])?
        } else {
            tape.concat_cols(&[hi, hj])?
        };
        let messages = mlp_forward(tape, cat, psi.mlp, mode, updates)?;
        match aggregation {
            Aggregation::Max => tape.segment_max(messages, edge_dst, num_nodes)?,
            Aggregation::Sum => tape.segment_sum(messages, edge_dst, num_nodes)?,
        }
    };
    let cat = tape.concat_cols(&[h, aggregated])?;
    mlp_forward(tape, cat, phi.mlp, mode, updates)
}

/// Borrow wrapper naming one MLP inside a ParamSet.
pub struct MlpSpec<'a> {
    mlp: &'a MlpParams<'a>,
}

/// E(3)-equivariant layer. Messages see only invariant quantities
/// (features and squared distances); coordinates move along pairwise
/// difference vectors, so rotations and translations commute with the
/// update. No distance division, so coincident nodes stay finite.
#[allow(clippy::too_many_arguments)]
fn egnn_layer_inner(
    tape: &mut Tape,
    h: Var,
    x: Var,
    num_nodes: usize,
    edge_src: &[usize],
    edge_dst: &[usize],
    edge_feats: Var,
    psi_e: &MlpParams<'_>,
    psi_x_w: Var,
    psi_x_b: Var,
    phi: &MlpParams<'_>,
    mode: Mode,
    updates: &mut Vec<BnUpdate>,
) -> Result<(Var, Var), TensorError> {
    let hidden = psi_e.raw("lin1.weight").matrix_dims().1;
    if edge_src.is_empty() {
        let zeros = tape.constant(num_nodes, hidden, vec![0.0; num_nodes * hidden])?;
        let cat = tape.concat_cols(&[h, zeros])?;
        let h_new = mlp_forward(tape, cat, phi, mode, updates)?;
        return Ok((h_new, x));
    }
    let hi = tape.gather_rows(h, edge_dst)?;
    let hj = tape.gather_rows(h, edge_src)?;
    let xi = tape.gather_rows(x, edge_dst)?;
    let xj = tape.gather_rows(x, edge_src)?;
    let diff = tape.sub(xi, xj)?;
    let diff_sq = tape.square(diff)?;
    let col_ones = tape.constant(3, 1, vec![1.0; 3])?;
    let dist_sq = tape.matmul(diff_sq, col_ones)?;

    let (_, d_edge) = tape.dims(edge_feats);
    let cat = if d_edge > 0 {
        tape.concat_cols(&[hi, hj, dist_sq, edge_feats])?
    } else {
        tape.concat_cols(&[hi, hj, dist_sq])?
    };
    let messages = mlp_forward(tape, cat, psi_e, mode, updates)?;

    // coordinate update: x_i + (1/|N_i|) sum_j (x_i - x_j) * psi_x(m_ij)
    let scale = tape.matmul(messages, psi_x_w)?;
    let scale = tape.add_bias(scale, psi_x_b)?;
    let scale_tiled = tile_cols(tape, scale, 3)?;
    let moved = tape.mul(diff, scale_tiled)?;
    let summed = tape.segment_sum(moved, edge_dst, num_nodes)?;
    let mut recip_deg = vec![0.0; num_nodes * 3];
    {
        let mut deg = vec![0usize; num_nodes];
        for &d in edge_dst {
            deg[d] += 1;
        }
        for v in 0..num_nodes {
            if deg[v] > 0 {
                let r = 1.0 / deg[v] as f64;
                for c in 0..3 {
                    recip_deg[v * 3 + c] = r;
                }
            }
        }
    }
    let recip = tape.constant(num_nodes, 3, recip_deg)?;
    let delta = tape.mul(summed, recip)?;
    let x_new = tape.add(x, delta)?;

    let aggregated = tape.segment_max(messages, edge_dst, num_nodes)?;
    let cat = tape.concat_cols(&[h, aggregated])?;
    let h_new = mlp_forward(tape, cat, phi, mode, updates)?;
    Ok((h_new, x_new))
}

/// Per-graph per-channel standardization with learnable affine,
/// `(x - mu_g) / sqrt(var_g + 1e-5) * scale + shift`.
pub fn graph_norm(
    tape: &mut Tape,
    h: Var,
    graph_of_node: &[usize],
    num_graphs: usize,
    scale: Var,
    shift: Var,
) -> Result<Var, TensorError> {
    let (m, n) = tape.dims(h);
    let mut counts = vec![0usize; num_graphs];
    for &g in graph_of_node {
        counts[g] += 1;
    }
    let recip: Vec<f64> = counts
        .iter()
        .flat_map(|&c| std::iter::repeat(1.0 / c as f64).take(n))
        .collect();
    let recip_sum = tape.constant(num_graphs, n, recip.clone())?;

    let sums = tape.segment_sum(h, graph_of_node, num_graphs)?;
    let means = tape.mul(sums, recip_sum)?;
    let mean_rows = tape.gather_rows(means, graph_of_node)?;
    let centered = tape.sub(h, mean_rows)?;
    let sq = tape.square(centered)?;
    let var_sums = tape.segment_sum(sq, graph_of_node, num_graphs)?;
    let recip_sum2 = tape.constant(num_graphs, n, recip)?;
    let vars = tape.mul(var_sums, recip_sum2)?;
    let eps = tape.constant(num_graphs, n, vec![GRAPH_NORM_EPS; num_graphs * n])?;
    let var_eps = tape.add(vars, eps)?;
    let std = tape.sqrt(var_eps)?;
    let std_rows = tape.gather_rows(std, graph_of_node)?;
    let normed = tape.div(centered, std_rows)?;
    let scale_tiled = tile_rows(tape, scale, m)?;
    let scaled = tape.mul(normed, scale_tiled)?;
    tape.add_bias(scaled, shift)
}

/// Per-graph elementwise max over node rows.
pub fn global_max_pool(
    tape: &mut Tape,
    h: Var,
    graph_of_node: &[usize],
    num_graphs: usize,
) -> Result<Var, TensorError> {
    tape.segment_max(h, graph_of_node, num_graphs)
}

// ---------------------------------------------------------------------------
// Full assemblies

/// Forward pass over a batch: one scalar prediction per graph,
/// differentiable end-to-end. Training mode also returns batch-norm
/// running-statistic refreshes.
pub fn model_forward(
    tape: &mut Tape,
    mp: &ModelParams,
    bound: &BoundParams,
    batch: &GraphBatch,
    mode: Mode,
) -> Result<(Var, Vec<BnUpdate>), ModelError> {
    let arch = &mp.arch;
    let (_, d_node) = batch.node_feats.matrix_dims();
    if d_node != arch.d_node {
        return Err(ModelError::Contract(format!(
            "batch node width {d_node} != architecture d_node {}",
            arch.d_node
        )));
    }
    let mut updates = Vec::new();
    let h0 = tape.leaf(&batch.node_feats);
    let l = arch.num_layers;

    let preds = match arch.kind {
        ArchKind::Gcn | ArchKind::Gat => {
            let mut h = h0;
            for layer in 0..l {
                h = match arch.kind {
                    ArchKind::Gcn => gcn_layer(
                        tape,
                        h,
                        batch.num_nodes,
                        &batch.undirected_edges,
                        bound[&format!("layer{layer}.weight")],
                        bound[&format!("layer{layer}.bias")],
                    )?,
                    _ => gat_layer(
                        tape,
                        h,
                        batch.num_nodes,
                        &batch.edge_src,
                        &batch.edge_dst,
                        bound[&format!("layer{layer}.weight")],
                        bound[&format!("layer{layer}.attn")],
                    )?,
                };
                h = graph_norm(
                    tape,
                    h,
                    &batch.graph_of_node,
                    batch.num_graphs,
                    bound[&format!("norm{layer}.scale")],
                    bound[&format!("norm{layer}.shift")],
                )?;
                // No activation after the last layer: pooling over the
                // standardized values avoids exact ties at zero.
                if layer + 1 < l {
                    h = tape.relu(h)?;
                }
            }
            let pooled = global_max_pool(tape, h, &batch.graph_of_node, batch.num_graphs)?;
            // Scale the readout by 4/h: keeps the head's quadratic curvature
            // small enough that the default inner learning rate stays in the
            // stable descent regime.
            let scale = 4.0 / arch.hidden_dim as f64;
            let scale_t =
                tape.constant(batch.num_graphs, arch.hidden_dim, vec![scale; batch.num_graphs * arch.hidden_dim])?;
            let scaled = tape.mul(pooled, scale_t)?;
            let out = tape.matmul(scaled, bound["head.weight"])?;
            tape.add_bias(out, bound["head.bias"])?
        }
        ArchKind::Mpnn => {
            let edge_feats = tape.leaf(&batch.edge_feats);
            let mut h = h0;
            for layer in 0..l {
                let psi = MlpParams::new(format!("layer{layer}.psi"), bound, &mp.params);
                let phi = MlpParams::new(format!("layer{layer}.phi"), bound, &mp.params);
                h = mpnn_layer(
                    tape,
                    h,
                    batch.num_nodes,
                    &batch.edge_src,
                    &batch.edge_dst,
                    edge_feats,
                    &MlpSpec { mlp: &psi },
                    &MlpSpec { mlp: &phi },
                    Aggregation::Max,
                    mode,
                    &mut updates,
                )?;
            }
            let pooled = global_max_pool(tape, h, &batch.graph_of_node, batch.num_graphs)?;
            let out = tape.matmul(pooled, bound["head.weight"])?;
            tape.add_bias(out, bound["head.bias"])?
        }
        ArchKind::Egnn => {
            let coords = batch.coords.as_ref().ok_or_else(|| {
                ModelError::Contract("egnn requires coordinates in the batch".into())
            })?;
            let edge_feats = tape.leaf(&batch.edge_feats);
            let mut h = h0;
            let mut x = tape.leaf(coords);
            for layer in 0..l {
                let psi_e = MlpParams::new(format!("layer{layer}.psi_e"), bound, &mp.params);
                let phi = MlpParams::new(format!("layer{layer}.phi"), bound, &mp.params);
                let (h_new, x_new) = egnn_layer_inner(
                    tape,
                    h,
                    x,
                    batch.num_nodes,
                    &batch.edge_src,
                    &batch.edge_dst,
                    edge_feats,
                    &psi_e,
                    bound[&format!("layer{layer}.psi_x.weight")],
                    bound[&format!("layer{layer}.psi_x.bias")],
                    &phi,
                    mode,
                    &mut updates,
                )?;
                h = h_new;
                x = x_new;
            }
            let pooled = global_max_pool(tape, h, &batch.graph_of_node, batch.num_graphs)?;
            let out = tape.matmul(pooled, bound["head.weight"])?;
            tape.add_bias(out, bound["head.bias"])?
        }
    };
    Ok((preds, updates))
}

/// Standalone EGNN layer application for equivariance tests: returns the
/// updated `(H', X')` pair of the first layer as detached tensors.
pub fn egnn_first_layer(
    mp: &ModelParams,
    batch: &GraphBatch,
    mode: Mode,
) -> Result<(Tensor, Tensor), ModelError> {
    let coords = batch
        .coords
        .as_ref()
        .ok_or_else(|| ModelError::Contract("egnn requires coordinates".into()))?;
    let mut tape = Tape::new();
    let bound = mp.params.bind(&mut tape);
    let h = tape.leaf(&batch.node_feats);
    let x = tape.leaf(coords);
    let edge_feats = tape.leaf(&batch.edge_feats);
    let psi_e = MlpParams::new("layer0.psi_e", &bound, &mp.params);
    let phi = MlpParams::new("layer0.phi", &bound, &mp.params);
    let mut updates = Vec::new();
    let (h_new, x_new) = egnn_layer_inner(
        &mut tape,
        h,
        x,
        batch.num_nodes,
        &batch.edge_src,
        &batch.edge_dst,
        edge_feats,
        &psi_e,
        bound["layer0.psi_x.weight"],
        bound["layer0.psi_x.bias"],
        &phi,
        mode,
        &mut updates,
    )?;
    Ok((tape.to_tensor(h_new), tape.to_tensor(x_new)))
}

/// Finite-difference check of the batch MSE gradient in training mode.
/// Returns the maximum relative error over the probed coordinates.
pub fn model_gradcheck(
    mp: &ModelParams,
    batch: &GraphBatch,
    probes: usize,
    eps: f64,
    seed: u64,
) -> Result<f64, ModelError> {
    let forward = |tape: &mut Tape, bound: &BoundParams| {
        let (preds, _) = model_forward(tape, mp, bound, batch, Mode::Train)
            .map_err(|e| TensorError::Contract(e.to_string()))?;
        mse_loss(tape, preds, &batch.labels)
    };
    Ok(crate::tensor::finite_diff_check(forward, &mp.params, probes, eps, seed)?)
}

/// Mean squared error of predictions against a label column.
pub fn mse_loss(tape: &mut Tape, preds: Var, labels: &[f64]) -> Result<Var, TensorError> {
    let y = tape.constant(labels.len(), 1, labels.to_vec())?;
    let d = tape.sub(preds, y)?;
    let sq = tape.square(d)?;
    tape.mean_all(sq)
}

/// Apply batch-norm running-statistic refreshes to a parameter set.
pub fn apply_bn_updates(params: &mut ParamSet, updates: &[BnUpdate]) {
    for u in updates {
        if let Some(t) = params.get(&u.name) {
            let shape = t.shape.clone();
            params.insert(u.name.clone(), Tensor { shape, data: u.value.clone() });
        }
    }
}

// ---------------------------------------------------------------------------
// Persistence

/// Render a model as a JSON document string. Floats carry 17
/// significant digits so reloading is bit-exact.
pub fn model_to_json(mp: &ModelParams, hyperparams: &Value) -> String {
    let mut out = String::new();
    out.push_str("{\"arch\":");
    out.push_str(&serde_json::to_string(mp.arch.kind.name()).unwrap());
    out.push_str(",\"hyperparams\":");
    let mut hp = hyperparams.as_object().cloned().unwrap_or_default();
    hp.insert("hidden_dim".into(), json!(mp.arch.hidden_dim));
    hp.insert("num_layers".into(), json!(mp.arch.num_layers));
    hp.insert("d_node".into(), json!(mp.arch.d_node));
    hp.insert("d_edge".into(), json!(mp.arch.d_edge));
    out.push_str(&serde_json::to_string(&hp).unwrap());
    out.push_str(",\"params\":{");
    for (i, (name, t)) in mp.params.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        out.push_str(&serde_json::to_string(name).unwrap());
        out.push_str(":{\"shape\":[");
        for (j, d) in t.shape.iter().enumerate() {
            if j > 0 {
                out.push(',');
            }
            out.push_str(&d.to_string());
        }
        out.push_str("],\"data\":[");
        for (j, x) in t.data.iter().enumerate() {
            if j > 0 {
                out.push(',');
            }
            out.push_str(&format!("{x:.16e}"));
        }
        out.push_str("]}");
    }
    out.push_str("}}");
    out
}

/// Write a model as a single JSON document via [`model_to_json`].
pub fn save_model(mp: &ModelParams, hyperparams: &Value, path: impl AsRef<Path>) -> Result<(), ModelError> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(model_to_json(mp, hyperparams).as_bytes())?;
    Ok(())
}

/// Rebuild a model from a parsed document produced by [`model_to_json`].
pub fn model_from_value(doc: &Value) -> Result<(ModelParams, Value), ModelError> {
    let kind = ArchKind::parse(
        doc.get("arch")
            .and_then(Value::as_str)
            .ok_or_else(|| ModelError::Parse("missing 'arch'".into()))?,
    )?;
    let hp = doc
        .get("hyperparams")
        .cloned()
        .ok_or_else(|| ModelError::Parse("missing 'hyperparams'".into()))?;
    let field = |name: &str| -> Result<usize, ModelError> {
        hp.get(name)
            .and_then(Value::as_u64)
            .map(|v| v as usize)
            .ok_or_else(|| ModelError::Parse(format!("missing hyperparam '{name}'")))
    };
    let arch = Architecture {
        kind,
        hidden_dim: field("hidden_dim")?,
        num_layers: field("num_layers")?,
        d_node: field("d_node")?,
        d_edge: field("d_edge")?,
    };
    let mut params = ParamSet::new();
    let entries = doc
        .get("params")
        .and_then(Value::as_object)
        .ok_or_else(|| ModelError::Parse("missing 'params'".into()))?;
    for (name, entry) in entries {
        let shape: Vec<usize> = entry
            .get("shape")
            .and_then(Value::as_array)
            .ok_or_else(|| ModelError::Parse(format!("param '{name}' missing shape")))?
            .iter()
            .map(|v| v.as_u64().unwrap_or(0) as usize)
            .collect();
        let data: Vec<f64> = entry
            .get("data")
            .and_then(Value::as_array)
            .ok_or_else(|| ModelError::Parse(format!("param '{name}' missing data")))?
            .iter()
            .map(|v| v.as_f64().unwrap_or(f64::NAN))
            .collect();
        params.insert(
            name.clone(),
            Tensor::new(shape, data).map_err(|e| ModelError::Parse(e.to_string()))?,
        );
    }
    // validate against the architecture's shape table
    for (name, shape, _) in shape_table(&arch) {
        match params.get(&name) {
            Some(t) if t.shape == shape => {}
            Some(t) => {
                return Err(ModelError::Parse(format!(
                    "param '{name}' has shape {:?}, expected {shape:?}",
                    t.shape
                )))
            }
            None => return Err(ModelError::Parse(format!("missing param '{name}'"))),
        }
    }
    Ok((ModelParams { arch, params }, hp))
}

/// Read a model document written by [`save_model`].
pub fn load_model(path: impl AsRef<Path>) -> Result<(ModelParams, Value), ModelError> {
    let text = std::fs::read_to_string(path)?;
    let doc: Value = serde_json::from_str(&text).map_err(|e| ModelError::Parse(e.to_string()))?;
    model_from_value(&doc)
}
