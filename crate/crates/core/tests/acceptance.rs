//! Acceptance suite: one printed pass/fail line per criterion.
//!
//! Run with `cargo test --test acceptance -- --nocapture` to see the
//! per-criterion lines.

use metagnn::data::{
    child_rng, split_dataset, synth_generate, zscore_fit, Dataset, Graph, SynthSpec,
};
use metagnn::ensemble::{ensemble_init, ensemble_predict, Ensemble, EnsembleMode};
use metagnn::eval::{baseline_random, evaluate, EvalConfig, EvalReport, Predictor, TaskStats};
use metagnn::layers::{
    egnn_first_layer, model_gradcheck, model_init, Architecture, ArchKind, GraphBatch, Mode,
    ModelParams,
};
use metagnn::meta::{reptile_meta_update, reptile_train, MetaConfig, TrainLog};
use metagnn::tensor::{param_grads, sgd_step, ParamSet, Tape, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

fn report(criterion: u32, desc: &str, ok: bool, detail: &str) {
    println!(
        "ACCEPTANCE {criterion} ({desc}): {} [{detail}]",
        if ok { "PASS" } else { "FAIL" }
    );
    assert!(ok, "acceptance criterion {criterion} ({desc}) failed: {detail}");
}

const ALL_KINDS: [ArchKind; 4] = [ArchKind::Gcn, ArchKind::Gat, ArchKind::Mpnn, ArchKind::Egnn];

/// Dataset of `n`-node random graphs with coordinates.
fn graphs(num: usize, nodes: usize, seed: u64) -> Dataset {
    synth_generate(
        &SynthSpec {
            num_graphs: num,
            nodes_min: nodes,
            nodes_max: nodes,
            d_node: 4,
            d_edge: 2,
            num_tasks: 2,
            with_coords: true,
        },
        seed,
    )
    .unwrap()
}

fn batch_of(ds: &Dataset, indices: &[usize]) -> GraphBatch {
    let labels: Vec<f64> = indices.iter().map(|&i| ds.graphs[i].targets[0]).collect();
    GraphBatch::from_graphs(ds, indices, &labels)
}

fn predictions(mp: &ModelParams, batch: &GraphBatch) -> Vec<f64> {
    Predictor::Single(mp.clone()).predict(batch).unwrap()
}

#[test]
fn criterion_1_gradient_correctness() {
    let ds = graphs(1, 6, 3);
    let mut worst = 0.0f64;
    for kind in ALL_KINDS {
        let arch = Architecture::new(kind, ds.d_node, ds.d_edge);
        let mp = model_init(arch, 3).unwrap();
        let batch = batch_of(&ds, &[0]);
        let err = model_gradcheck(&mp, &batch, 100, 1e-5, 3).unwrap();
        worst = worst.max(err);
    }
    report(
        1,
        "gradient correctness",
        worst < 1e-4,
        &format!("max relative error {worst:.3e} over 100 probes x 4 architectures"),
    );
}

/// Relabel the nodes of a graph by `perm` (node v becomes `perm[v]`).
fn permute_graph(g: &Graph, perm: &[usize]) -> Graph {
    let n = g.num_nodes;
    let mut node_feats = vec![Vec::new(); n];
    for v in 0..n {
        node_feats[perm[v]] = g.node_feats[v].clone();
    }
    let coords = g.coords.as_ref().map(|c| {
        let mut out = vec![[0.0; 3]; n];
        for v in 0..n {
            out[perm[v]] = c[v];
        }
        out
    });
    // keep edge order; normalize endpoint order to i < j as the format
    // requires (edge features follow their edge)
    let mut edges = Vec::with_capacity(g.edges.len());
    for &(i, j) in &g.edges {
        let (a, b) = (perm[i], perm[j]);
        edges.push((a.min(b), a.max(b)));
    }
    Graph {
        id: g.id.clone(),
        num_nodes: n,
        node_feats,
        edges,
        edge_feats: g.edge_feats.clone(),
        coords,
        targets: g.targets.clone(),
    }
}

#[test]
fn criterion_2_permutation_invariance() {
    let ds = graphs(3, 9, 5);
    let mut rng = child_rng(5, 1);
    let mut worst = 0.0f64;
    for kind in ALL_KINDS {
        let arch = Architecture::new(kind, ds.d_node, ds.d_edge);
        let mp = model_init(arch, 5).unwrap();
        let base = predictions(&mp, &batch_of(&ds, &[0, 1, 2]));
        for _ in 0..50 {
            let mut permuted = ds.clone();
            for g in &mut permuted.graphs {
                let mut perm: Vec<usize> = (0..g.num_nodes).collect();
                for v in (1..perm.len()).rev() {
                    perm.swap(v, rng.gen_range(0..=v));
                }
                *g = permute_graph(g, &perm);
            }
            let got = predictions(&mp, &batch_of(&permuted, &[0, 1, 2]));
            for (a, b) in base.iter().zip(&got) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    report(
        2,
        "permutation invariance",
        worst < 1e-9,
        &format!("max |delta prediction| {worst:.3e} over 50 permutations x 4 architectures"),
    );
}

/// Random orthogonal 3x3 via Gram-Schmidt.
fn random_orthogonal(rng: &mut ChaCha8Rng) -> [[f64; 3]; 3] {
    loop {
        let mut q = [[0.0f64; 3]; 3];
        for row in q.iter_mut() {
            for v in row.iter_mut() {
                *v = rng.gen_range(-1.0..1.0);
            }
        }
        let mut ok = true;
        for i in 0..3 {
            for j in 0..i {
                let dot: f64 = (0..3).map(|k| q[i][k] * q[j][k]).sum();
                for k in 0..3 {
                    q[i][k] -= dot * q[j][k];
                }
            }
            let norm: f64 = q[i].iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < 1e-3 {
                ok = false;
                break;
            }
            for k in 0..3 {
                q[i][k] /= norm;
            }
        }
        if ok {
            return q;
        }
    }
}

fn transform_dataset(ds: &Dataset, q: &[[f64; 3]; 3], t: &[f64; 3]) -> Dataset {
    let mut out = ds.clone();
    for g in &mut out.graphs {
        if let Some(coords) = &mut g.coords {
            for c in coords.iter_mut() {
                let x = *c;
                for i in 0..3 {
                    c[i] = q[i][0] * x[0] + q[i][1] * x[1] + q[i][2] * x[2] + t[i];
                }
            }
        }
    }
    out
}

#[test]
fn criterion_3_e3_invariance_and_equivariance() {
    let ds = graphs(3, 8, 9);
    let arch = Architecture::new(ArchKind::Egnn, ds.d_node, ds.d_edge);
    let mp = model_init(arch, 9).unwrap();
    let batch = batch_of(&ds, &[0, 1, 2]);
    let base_preds = predictions(&mp, &batch);
    let (_, base_coords) = egnn_first_layer(&mp, &batch, Mode::Eval).unwrap();

    let mut rng = child_rng(9, 2);
    let mut worst_scalar = 0.0f64;
    let mut worst_coord = 0.0f64;
    for _ in 0..20 {
        let q = random_orthogonal(&mut rng);
        let t = [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)];
        let moved = transform_dataset(&ds, &q, &t);
        let moved_batch = batch_of(&moved, &[0, 1, 2]);
        let preds = predictions(&mp, &moved_batch);
        for (a, b) in base_preds.iter().zip(&preds) {
            worst_scalar = worst_scalar.max((a - b).abs());
        }
        // coordinate outputs must transform with the input frame
        let (_, coords) = egnn_first_layer(&mp, &moved_batch, Mode::Eval).unwrap();
        for node in 0..batch.num_nodes {
            for i in 0..3 {
                let expected: f64 = (0..3)
                    .map(|k| q[i][k] * base_coords.data[node * 3 + k])
                    .sum::<f64>()
                    + t[i];
                worst_coord = worst_coord.max((coords.data[node * 3 + i] - expected).abs());
            }
        }
    }
    report(
        3,
        "E(3) invariance/equivariance",
        worst_scalar < 1e-9 && worst_coord < 1e-9,
        &format!("max scalar delta {worst_scalar:.3e}, max coordinate delta {worst_coord:.3e}"),
    );
}

#[test]
fn criterion_4_reptile_identities() {
    let ds = graphs(4, 6, 13);
    let arch = Architecture::new(ArchKind::Gcn, ds.d_node, ds.d_edge);
    let mp = model_init(arch, 13).unwrap();

    // (a) theta' = theta is a fixed point
    let mut theta = mp.clone();
    reptile_meta_update(&mut theta, &mp, 0.375).unwrap();
    let fixed_point = theta == mp;

    // (b) with k=1, the meta update equals one SGD step at rate
    // alpha*beta, bitwise, on a toy linear model with dyadic data
    let alpha = 0.015625; // 2^-6
    let beta = 0.25; // 2^-2
    let mut toy = ParamSet::new();
    toy.insert("w", Tensor::new(vec![1, 1], vec![0.5]).unwrap());
    let grad_of = |p: &ParamSet| {
        let mut tape = Tape::new();
        let bound = p.bind(&mut tape);
        let x = tape.constant(2, 1, vec![1.0, 2.0]).unwrap();
        let y = tape.constant(2, 1, vec![1.0, -2.0]).unwrap();
        let pred = tape.matmul(x, bound["w"]).unwrap();
        let diff = tape.sub(pred, y).unwrap();
        let sq = tape.square(diff).unwrap();
        let loss = tape.mean_all(sq).unwrap();
        param_grads(&tape, loss, &bound, p).unwrap()
    };
    let g = grad_of(&toy);
    let toy_arch = Architecture::new(ArchKind::Gcn, 1, 0);
    let mut via_meta = ModelParams { arch: toy_arch, params: toy.clone() };
    let adapted = ModelParams { arch: toy_arch, params: sgd_step(&toy, &g, alpha).unwrap() };
    reptile_meta_update(&mut via_meta, &adapted, beta).unwrap();
    let direct = sgd_step(&toy, &g, alpha * beta).unwrap();
    let bitwise = via_meta.params.get("w").unwrap().data[0].to_bits()
        == direct.get("w").unwrap().data[0].to_bits();

    // worked interpolation example: [0,0] toward [2,-4] at 0.25
    let mut ex = ModelParams {
        arch: toy_arch,
        params: {
            let mut p = ParamSet::new();
            p.insert("w", Tensor::new(vec![2], vec![0.0, 0.0]).unwrap());
            p
        },
    };
    let ex_adapted = ModelParams {
        arch: toy_arch,
        params: {
            let mut p = ParamSet::new();
            p.insert("w", Tensor::new(vec![2], vec![2.0, -4.0]).unwrap());
            p
        },
    };
    reptile_meta_update(&mut ex, &ex_adapted, 0.25).unwrap();
    let interpolated = ex.params.get("w").unwrap().data == vec![0.5, -1.0];

    // (c) beta endpoints: 0 keeps theta, 1 adopts theta'
    let other = model_init(arch, 14).unwrap();
    let mut at_zero = mp.clone();
    reptile_meta_update(&mut at_zero, &other, 0.0).unwrap();
    let mut at_one = mp.clone();
    reptile_meta_update(&mut at_one, &other, 1.0).unwrap();
    let endpoints = at_zero == mp && at_one == other;

    report(
        4,
        "reptile identities",
        fixed_point && bitwise && interpolated && endpoints,
        &format!(
            "fixed point {fixed_point}, k=1 bitwise {bitwise}, \
             interpolation {interpolated}, endpoints {endpoints}"
        ),
    );
}

#[test]
fn criterion_5_ensemble_pre_update_equivalence() {
    let ds = graphs(60, 7, 21);
    let arch = Architecture::new(ArchKind::Mpnn, ds.d_node, ds.d_edge);
    let members: Vec<ModelParams> =
        (0..2).map(|s| model_init(arch, 100 + s).unwrap()).collect();
    let average: Ensemble = ensemble_init(members.clone(), EnsembleMode::Average).unwrap();
    let learned: Ensemble = ensemble_init(members, EnsembleMode::Learned).unwrap();

    let mut rng = child_rng(21, 3);
    let mut all_equal = true;
    for _ in 0..100 {
        let indices: Vec<usize> = (0..5).map(|_| rng.gen_range(0..ds.graphs.len())).collect();
        let batch = batch_of(&ds, &indices);
        let a = ensemble_predict(&average, &batch, Mode::Eval).unwrap();
        let l = ensemble_predict(&learned, &batch, Mode::Eval).unwrap();
        all_equal &= a.len() == l.len()
            && a.iter().zip(&l).all(|(x, y)| x.to_bits() == y.to_bits());
    }
    report(
        5,
        "ensemble pre-update equivalence",
        all_equal,
        "average vs learned predictions bitwise equal on 100 random batches",
    );
}

/// Shared configuration for the scaled-down experiment (criteria 6, 7, 9).
struct Experiment {
    ds: Dataset,
    train: Vec<usize>,
    test: Vec<usize>,
    norm: metagnn::data::Normalizer,
    arch: Architecture,
    holdout: usize,
    eval_cfg: EvalConfig,
}

const EXP_SEED: u64 = 7;

fn experiment_setup() -> Experiment {
    let ds = synth_generate(
        &SynthSpec {
            num_graphs: 500,
            nodes_min: 5,
            nodes_max: 15,
            d_node: 4,
            d_edge: 2,
            num_tasks: 8,
            with_coords: false,
        },
        EXP_SEED,
    )
    .unwrap();
    let (train, test) = split_dataset(&ds, 0.9, EXP_SEED).unwrap();
    let norm = zscore_fit(&ds, &train).unwrap();
    let arch = Architecture::new(ArchKind::Gcn, ds.d_node, ds.d_edge);
    Experiment {
        ds,
        train,
        test,
        norm,
        arch,
        holdout: 7,
        eval_cfg: EvalConfig { alpha: 5e-3, k: 5, support_size: 10, trials: 100, seed: EXP_SEED },
    }
}

fn meta_train_member(exp: &Experiment, seed: u64) -> (ModelParams, TrainLog) {
    let init = model_init(exp.arch, seed).unwrap();
    let cfg = MetaConfig {
        inner_lr: 5e-3,
        meta_lr: 1e-3,
        inner_steps: 5,
        support_size: 10,
        epochs: 2000,
        seed,
    };
    let targets: Vec<usize> =
        (0..exp.ds.num_tasks()).filter(|&t| t != exp.holdout).collect();
    reptile_train(&init, &exp.ds, &targets, &exp.train, &exp.norm, &cfg).unwrap()
}

fn holdout_stats(exp: &Experiment, p: &Predictor) -> TaskStats {
    evaluate(p, &exp.ds, &[exp.holdout], &exp.test, &exp.norm, &exp.eval_cfg)
        .unwrap()
        .remove(0)
}

fn report_csv(model: &str, init: &str, stats: &TaskStats) -> Vec<u8> {
    let rep = EvalReport {
        model: model.into(),
        init: init.into(),
        k: 5,
        rows: vec![stats.clone()],
    };
    let mut buf = Vec::new();
    rep.write_csv(&mut buf).unwrap();
    buf
}

#[test]
fn criteria_6_7_9_scaled_experiment() {
    let exp = experiment_setup();

    // --- criterion 6: meta vs random on the held-out task -----------------
    let (meta_model, train_log) = meta_train_member(&exp, EXP_SEED);
    let meta = holdout_stats(&exp, &Predictor::Single(meta_model.clone()));
    let random = baseline_random(
        exp.arch,
        &exp.ds,
        &[exp.holdout],
        &exp.test,
        &exp.norm,
        &exp.eval_cfg,
    )
    .unwrap()
    .remove(0);
    let ratio = meta.mean[5] / random.mean[5];
    let monotone = meta.mean[0] >= meta.mean[1] && meta.mean[1] >= meta.mean[5];
    report(
        6,
        "scaled-down meta-learning experiment",
        ratio <= 0.5 && monotone,
        &format!(
            "meta 5-step {:.3e} vs random 5-step {:.3e} (ratio {:.2}), \
             meta curve {:.3e} >= {:.3e} >= {:.3e} monotone {monotone}",
            meta.mean[5], random.mean[5], ratio, meta.mean[0], meta.mean[1], meta.mean[5]
        ),
    );

    // --- criterion 7: ensembles of meta-trained members -------------------
    let mut members = vec![meta_model.clone()];
    for s in 1..4u64 {
        members.push(meta_train_member(&exp, EXP_SEED + s).0);
    }
    let single = meta.mean[5];
    let mut ens_stats = Vec::new();
    let mut ok7 = true;
    let mut detail7 = String::new();
    for m in [2usize, 4] {
        let subset: Vec<ModelParams> = members[..m].to_vec();
        let avg = holdout_stats(
            &exp,
            &Predictor::Ensemble(ensemble_init(subset.clone(), EnsembleMode::Average).unwrap()),
        );
        let lrn = holdout_stats(
            &exp,
            &Predictor::Ensemble(ensemble_init(subset, EnsembleMode::Learned).unwrap()),
        );
        ok7 &= lrn.mean[5] <= 1.1 * avg.mean[5]
            && avg.mean[5] <= 1.1 * single
            && lrn.mean[5] <= 1.1 * single;
        detail7.push_str(&format!(
            "M={m}: learned {:.3e} avg {:.3e}; ",
            lrn.mean[5], avg.mean[5]
        ));
        ens_stats.push((m, avg, lrn));
    }
    detail7.push_str(&format!("single {single:.3e}"));
    report(7, "ensemble improvement direction", ok7, &detail7);

    // --- criterion 9: byte-identical CSV artifacts on repetition ----------
    let mut log_buf = Vec::new();
    train_log.write_csv(&mut log_buf).unwrap();
    let (model2, train_log2) = meta_train_member(&exp, EXP_SEED);
    let mut log_buf2 = Vec::new();
    train_log2.write_csv(&mut log_buf2).unwrap();
    let mut ok9 = log_buf == log_buf2 && model2 == meta_model;

    let meta2 = holdout_stats(&exp, &Predictor::Single(model2));
    ok9 &= report_csv("gcn", "meta", &meta) == report_csv("gcn", "meta", &meta2);
    let random2 = baseline_random(
        exp.arch,
        &exp.ds,
        &[exp.holdout],
        &exp.test,
        &exp.norm,
        &exp.eval_cfg,
    )
    .unwrap()
    .remove(0);
    ok9 &= report_csv("gcn", "random", &random) == report_csv("gcn", "random", &random2);
    for (m, avg, _) in &ens_stats {
        let again = holdout_stats(
            &exp,
            &Predictor::Ensemble(
                ensemble_init(members[..*m].to_vec(), EnsembleMode::Average).unwrap(),
            ),
        );
        let name = format!("gcn-x{m}-average");
        ok9 &= report_csv(&name, "meta", avg) == report_csv(&name, "meta", &again);
    }
    report(
        9,
        "determinism of CSV artifacts",
        ok9,
        "train log, model, and evaluation reports byte-identical on repetition",
    );
}

#[test]
fn criterion_8_normalization() {
    let exp = experiment_setup();
    let mut worst_mean = 0.0f64;
    let mut worst_std = 0.0f64;
    let mut worst_round = 0.0f64;
    let mut normalized = Vec::new();
    for &i in &exp.train {
        for t in 0..exp.ds.num_tasks() {
            let raw = exp.ds.graphs[i].targets[t];
            let z = exp.norm.apply(raw);
            normalized.push(z);
            worst_round = worst_round.max((exp.norm.invert(z) - raw).abs());
        }
    }
    let n = normalized.len() as f64;
    let mean = normalized.iter().sum::<f64>() / n;
    let var = normalized.iter().map(|z| (z - mean) * (z - mean)).sum::<f64>() / n;
    worst_mean = worst_mean.max(mean.abs());
    worst_std = worst_std.max((var.sqrt() - 1.0).abs());
    report(
        8,
        "normalization",
        worst_mean < 1e-9 && worst_std < 1e-9 && worst_round < 1e-12,
        &format!(
            "|mean| {worst_mean:.3e}, |std-1| {worst_std:.3e}, round-trip {worst_round:.3e}"
        ),
    );
}
