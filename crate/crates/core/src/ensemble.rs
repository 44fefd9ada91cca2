//! Weighted ensembles of identically shaped models. Predictions are
//! always the weighted sum of member outputs; the two modes differ only
//! in whether the weights adapt alongside the members.

use std::io::Write;
use std::path::Path;

use serde_json::Value;
use thiserror::Error;

use crate::layers::{
    apply_bn_updates, model_forward, model_from_value, model_to_json, mse_loss, GraphBatch, Mode,
    ModelError, ModelParams,
};
use crate::meta::{MetaError, DIVERGENCE_LIMIT};
use crate::tensor::{param_grads, sgd_step, Tape, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum EnsembleError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Meta(#[from] MetaError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnsembleMode {
    /// Fixed weights; adaptation updates member parameters only.
    Average,
    /// Weights are free parameters updated jointly with the members.
    Learned,
}

impl EnsembleMode {
    pub fn name(self) -> &'static str {
        match self {
            EnsembleMode::Average => "average",
            EnsembleMode::Learned => "learned",
        }
    }

    pub fn parse(s: &str) -> Result<Self, EnsembleError> {
        match s {
            "average" => Ok(EnsembleMode::Average),
            "learned" => Ok(EnsembleMode::Learned),
            other => Err(EnsembleError::Parse(format!("unknown ensemble mode '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    pub members: Vec<ModelParams>,
    pub weights: Vec<f64>,
    pub mode: EnsembleMode,
}

/// Uniform `1/M` weights over identically shaped members.
pub fn ensemble_init(members: Vec<ModelParams>, mode: EnsembleMode) -> Result<Ensemble, EnsembleError> {
    if members.is_empty() {
        return Err(EnsembleError::Contract("ensemble needs at least one member".into()));
    }
    let arch = members[0].arch;
    for (i, m) in members.iter().enumerate() {
        if m.arch != arch {
            return Err(EnsembleError::Contract(format!(
                "member {i} architecture differs from member 0"
            )));
        }
    }
    let m = members.len();
    Ok(Ensemble { members, weights: vec![1.0 / m as f64; m], mode })
}

/// Weighted-sum forward pass on one tape. The math is identical in both
/// modes; only the leaf-vs-constant status of the weight column differs,
/// so uniform-weight predictions agree bitwise across modes.
fn ensemble_forward(
    tape: &mut Tape,
    ens: &Ensemble,
    bound_members: &[crate::tensor::BoundParams],
    weights_var: Var,
    batch: &GraphBatch,
    mode: Mode,
) -> Result<(Var, Vec<Vec<crate::layers::BnUpdate>>), EnsembleError> {
    let mut member_preds = Vec::with_capacity(ens.members.len());
    let mut updates = Vec::with_capacity(ens.members.len());
    for (mp, bound) in ens.members.iter().zip(bound_members) {
        let (preds, upd) = model_forward(tape, mp, bound, batch, mode)?;
        member_preds.push(preds);
        updates.push(upd);
    }
    let stacked = tape.concat_cols(&member_preds)?;
    let combined = tape.matmul(stacked, weights_var)?;
    Ok((combined, updates))
}

/// Ensemble predictions for a batch, one value per graph.
pub fn ensemble_predict(ens: &Ensemble, batch: &GraphBatch, mode: Mode) -> Result<Vec<f64>, EnsembleError> {
    let mut tape = Tape::new();
    let bound: Vec<_> = ens.members.iter().map(|m| m.params.bind(&mut tape)).collect();
    let m = ens.members.len();
    let wt = Tensor::new(vec![m, 1], ens.weights.clone()).expect("weights");
    let weights_var = match ens.mode {
        EnsembleMode::Learned => tape.leaf(&wt),
        EnsembleMode::Average => {
            let w = ens.weights.clone();
            tape.constant(m, 1, w)?
        }
    };
    let (preds, _) = ensemble_forward(&mut tape, ens, &bound, weights_var, batch, mode)?;
    Ok(tape.data(preds).to_vec())
}

/// `k` full-batch SGD steps on the ensemble MSE. Members always update;
/// weights update only in learned mode. Returns the loss trajectory
/// (`k + 1` values).
pub fn ensemble_adapt(
    ens: &mut Ensemble,
    batch: &GraphBatch,
    alpha: f64,
    k: usize,
) -> Result<Vec<f64>, EnsembleError> {
    if alpha <= 0.0 {
        return Err(EnsembleError::Contract(format!("alpha must be > 0, got {alpha}")));
    }
    let mut losses = Vec::with_capacity(k + 1);
    for step in 0..=k {
        let mut tape = Tape::new();
        let bound: Vec<_> = ens.members.iter().map(|m| m.params.bind(&mut tape)).collect();
        let m = ens.members.len();
        let wt = Tensor::new(vec![m, 1], ens.weights.clone()).expect("weights");
        let weights_var = match ens.mode {
            EnsembleMode::Learned => tape.leaf(&wt),
            EnsembleMode::Average => tape.constant(m, 1, ens.weights.clone())?,
        };
        let (preds, bn_updates) =
            ensemble_forward(&mut tape, ens, &bound, weights_var, batch, Mode::Train)?;
        let loss = mse_loss(&mut tape, preds, &batch.labels)?;
        let loss_val = tape.scalar_value(loss)?;
        if !loss_val.is_finite() || loss_val > DIVERGENCE_LIMIT {
            return Err(EnsembleError::Meta(MetaError::Diverged { iteration: step, loss: loss_val }));
        }
        losses.push(loss_val);
        if step == k {
            break;
        }
        let all_grads = tape.backward(loss)?;
        for ((mp, b), upd) in ens.members.iter_mut().zip(&bound).zip(&bn_updates) {
            let grads = param_grads(&tape, loss, b, &mp.params)?;
            mp.params = sgd_step(&mp.params, &grads, alpha)?;
            apply_bn_updates(&mut mp.params, upd);
        }
        if ens.mode == EnsembleMode::Learned {
            let wg = all_grads.get(&tape, weights_var);
            for (w, g) in ens.weights.iter_mut().zip(&wg.data) {
                *w -= alpha * g;
            }
        }
    }
    Ok(losses)
}

// ---------------------------------------------------------------------------
// Persistence

/// Write an ensemble as one JSON document embedding member model
/// documents; floats carry 17 significant digits.
pub fn save_ensemble(ens: &Ensemble, hyperparams: &Value, path: impl AsRef<Path>) -> Result<(), EnsembleError> {
    let mut out = String::new();
    out.push_str("{\"mode\":\"");
    out.push_str(ens.mode.name());
    out.push_str("\",\"weights\":[");
    for (i, w) in ens.weights.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        out.push_str(&format!("{w:.16e}"));
    }
    out.push_str("],\"members\":[");
    for (i, m) in ens.members.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        out.push_str(&model_to_json(m, hyperparams));
    }
    out.push_str("]}");
    let mut f = std::fs::File::create(path)?;
    f.write_all(out.as_bytes())?;
    Ok(())
}

/// Read an ensemble document written by [`save_ensemble`].
pub fn load_ensemble(path: impl AsRef<Path>) -> Result<(Ensemble, Value), EnsembleError> {
    let text = std::fs::read_to_string(path)?;
    let doc: Value = serde_json::from_str(&text).map_err(|e| EnsembleError::Parse(e.to_string()))?;
    let mode = EnsembleMode::parse(
        doc.get("mode")
            .and_then(Value::as_str)
            .ok_or_else(|| EnsembleError::Parse("missing 'mode'".into()))?,
    )?;
    let weights: Vec<f64> = doc
        .get("weights")
        .and_then(Value::as_array)
        .ok_or_else(|| EnsembleError::Parse("missing 'weights'".into()))?
        .iter()
        .map(|v| v.as_f64().unwrap_or(f64::NAN))
        .collect();
    let member_docs = doc
        .get("members")
        .and_then(Value::as_array)
        .ok_or_else(|| EnsembleError::Parse("missing 'members'".into()))?;
    if member_docs.len() != weights.len() {
        return Err(EnsembleError::Parse(format!(
            "{} weights for {} members",
            weights.len(),
            member_docs.len()
        )));
    }
    let mut members = Vec::with_capacity(member_docs.len());
    let mut hp = Value::Null;
    for d in member_docs {
        let (mp, h) = model_from_value(d)?;
        members.push(mp);
        hp = h;
    }
    if members.is_empty() {
        return Err(EnsembleError::Parse("ensemble has no members".into()));
    }
    let arch = members[0].arch;
    if members.iter().any(|m| m.arch != arch) {
        return Err(EnsembleError::Parse("members have mixed architectures".into()));
    }
    Ok((Ensemble { members, weights, mode }, hp))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_generate, SynthSpec};
    use crate::layers::{model_init, ArchKind, Architecture};
    use crate::tensor::finite_diff_check;
    use serde_json::json;

    fn setup(m: usize) -> (crate::data::Dataset, Ensemble) {
        let ds = synth_generate(
            &SynthSpec {
                num_graphs: 8,
                nodes_min: 4,
                nodes_max: 7,
                d_node: 3,
                d_edge: 1,
                num_tasks: 2,
                with_coords: false,
            },
            13,
        )
        .unwrap();
        let mut arch = Architecture::new(ArchKind::Gcn, ds.d_node, ds.d_edge);
        arch.hidden_dim = 8;
        let members: Vec<_> = (0..m).map(|i| model_init(arch, 100 + i as u64).unwrap()).collect();
        let ens = ensemble_init(members, EnsembleMode::Average).unwrap();
        (ds, ens)
    }

    fn batch(ds: &crate::data::Dataset) -> GraphBatch {
        let indices = vec![0, 1, 2, 3];
        let labels: Vec<f64> = indices.iter().map(|&i| ds.graphs[i].targets[0]).collect();
        GraphBatch::from_graphs(ds, &indices, &labels)
    }

    #[test]
    fn init_weights_uniform() {
        let (_, ens) = setup(4);
        assert_eq!(ens.weights, vec![0.25; 4]);
    }

    #[test]
    fn heterogeneous_members_rejected() {
        let (_, ens) = setup(2);
        let mut arch = ens.members[0].arch;
        arch.kind = ArchKind::Gat;
        let other = model_init(arch, 0).unwrap();
        let members = vec![ens.members[0].clone(), other];
        assert!(ensemble_init(members, EnsembleMode::Average).is_err());
    }

    #[test]
    fn uniform_weight_predictions_bitwise_equal_across_modes() {
        let (ds, ens) = setup(3);
        let b = batch(&ds);
        let avg = ensemble_predict(&ens, &b, Mode::Eval).unwrap();
        let mut learned = ens.clone();
        learned.mode = EnsembleMode::Learned;
        let lrn = ensemble_predict(&learned, &b, Mode::Eval).unwrap();
        for (a, l) in avg.iter().zip(&lrn) {
            assert_eq!(a.to_bits(), l.to_bits());
        }
    }

    #[test]
    fn single_member_matches_model() {
        let (ds, ens) = setup(1);
        let b = batch(&ds);
        let ens_pred = ensemble_predict(&ens, &b, Mode::Eval).unwrap();
        let mp = &ens.members[0];
        let mut tape = Tape::new();
        let bound = mp.params.bind(&mut tape);
        let (preds, _) = model_forward(&mut tape, mp, &bound, &b, Mode::Eval).unwrap();
        for (e, p) in ens_pred.iter().zip(tape.data(preds)) {
            assert!((e - p).abs() < 1e-15);
        }
    }

    #[test]
    fn weight_gradient_matches_analytic_formula() {
        // dL/dw_m = (2/G) sum_g (yhat_g - y_g) f_m(g)
        let (ds, mut ens) = setup(2);
        ens.mode = EnsembleMode::Learned;
        let b = batch(&ds);

        // member outputs and ensemble outputs before the step
        let member_out: Vec<Vec<f64>> = ens
            .members
            .iter()
            .map(|mp| {
                let mut tape = Tape::new();
                let bound = mp.params.bind(&mut tape);
                let (p, _) = model_forward(&mut tape, mp, &bound, &b, Mode::Train).unwrap();
                tape.data(p).to_vec()
            })
            .collect();
        let yhat: Vec<f64> = (0..b.num_graphs)
            .map(|g| ens.weights.iter().zip(&member_out).map(|(w, f)| w * f[g]).sum())
            .collect();
        let g_count = b.num_graphs as f64;
        let analytic: Vec<f64> = (0..2)
            .map(|m| {
                (0..b.num_graphs)
                    .map(|g| 2.0 / g_count * (yhat[g] - b.labels[g]) * member_out[m][g])
                    .sum()
            })
            .collect();

        let alpha = 1e-3;
        let before = ens.weights.clone();
        ensemble_adapt(&mut ens, &b, alpha, 1).unwrap();
        for m in 0..2 {
            let implied = (before[m] - ens.weights[m]) / alpha;
            assert!(
                (implied - analytic[m]).abs() < 1e-10,
                "weight {m}: implied {implied}, analytic {}",
                analytic[m]
            );
        }
    }

    #[test]
    fn weight_gradient_matches_finite_differences() {
        let (ds, mut ens) = setup(2);
        ens.mode = EnsembleMode::Learned;
        let b = batch(&ds);
        // check via the generic finite-difference harness: treat weights
        // as the only parameters, member outputs as constants
        let member_out: Vec<Vec<f64>> = ens
            .members
            .iter()
            .map(|mp| {
                let mut tape = Tape::new();
                let bound = mp.params.bind(&mut tape);
                let (p, _) = model_forward(&mut tape, mp, &bound, &b, Mode::Train).unwrap();
                tape.data(p).to_vec()
            })
            .collect();
        let mut wp = crate::tensor::ParamSet::new();
        wp.insert("weights", Tensor::new(vec![2, 1], ens.weights.clone()).unwrap());
        let labels = b.labels.clone();
        let g = b.num_graphs;
        let err = finite_diff_check(
            |tape, bound| {
                let stacked: Vec<f64> = (0..g)
                    .flat_map(|row| member_out.iter().map(move |f| f[row]))
                    .collect();
                let f = tape.constant(g, 2, stacked)?;
                let yhat = tape.matmul(f, bound["weights"])?;
                mse_loss(tape, yhat, &labels)
            },
            &wp,
            2,
            1e-5,
            9,
        )
        .unwrap();
        assert!(err < 1e-6, "weight gradient relative error {err}");
    }

    #[test]
    fn average_mode_keeps_weights_fixed() {
        let (ds, mut ens) = setup(3);
        let b = batch(&ds);
        let before = ens.weights.clone();
        let losses = ensemble_adapt(&mut ens, &b, 1e-2, 3).unwrap();
        assert_eq!(ens.weights, before);
        assert_eq!(losses.len(), 4);
    }

    #[test]
    fn learned_mode_moves_weights() {
        let (ds, mut ens) = setup(3);
        ens.mode = EnsembleMode::Learned;
        let b = batch(&ds);
        let before = ens.weights.clone();
        ensemble_adapt(&mut ens, &b, 1e-2, 3).unwrap();
        assert_ne!(ens.weights, before);
    }

    #[test]
    fn adaptation_reduces_support_loss() {
        let (ds, mut ens) = setup(2);
        let b = batch(&ds);
        let losses = ensemble_adapt(&mut ens, &b, 1e-2, 5).unwrap();
        assert!(losses.last().unwrap() < losses.first().unwrap());
    }

    #[test]
    fn save_load_roundtrip_exact() {
        let (_, mut ens) = setup(2);
        ens.mode = EnsembleMode::Learned;
        ens.weights = vec![0.3141592653589793, 0.6858407346410207];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ensemble.json");
        save_ensemble(&ens, &json!({"alpha": 5e-3}), &path).unwrap();
        let (back, hp) = load_ensemble(&path).unwrap();
        assert_eq!(ens, back);
        assert_eq!(hp["alpha"], json!(5e-3));
    }
}
