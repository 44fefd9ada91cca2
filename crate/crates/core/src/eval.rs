//! K-shot evaluation: repeated trials of support-set adaptation with
//! query-set MSE measured after every inner step, aggregated per task.

use std::io::Write;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::data::{child_rng, sample_support, sci3, DataError, Dataset, Normalizer, Task};
use crate::ensemble::{ensemble_adapt, ensemble_predict, Ensemble, EnsembleError};
use crate::layers::{model_forward, GraphBatch, Mode, ModelError, ModelParams};
use crate::meta::{inner_step, MetaError};
use crate::tensor::Tape;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Meta(#[from] MetaError),
    #[error(transparent)]
    Ensemble(#[from] EnsembleError),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalConfig {
    /// Inner-loop learning rate during adaptation.
    pub alpha: f64,
    /// Adaptation steps per trial.
    pub k: usize,
    /// Support-set size per trial.
    pub support_size: usize,
    /// Independent trials per task.
    pub trials: usize,
    pub seed: u64,
}

impl EvalConfig {
    pub fn validate(&self) -> Result<(), EvalError> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(EvalError::Contract(format!("alpha must be > 0, got {}", self.alpha)));
        }
        if self.k == 0 || self.support_size == 0 || self.trials == 0 {
            return Err(EvalError::Contract(
                "k, support_size, and trials must all be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Either a single model or an ensemble, adapted the same way.
#[derive(Debug, Clone)]
pub enum Predictor {
    Single(ModelParams),
    Ensemble(Ensemble),
}

impl Predictor {
    pub fn predict(&self, batch: &GraphBatch) -> Result<Vec<f64>, EvalError> {
        match self {
            Predictor::Single(mp) => {
                let mut tape = Tape::new();
                let bound = mp.params.bind(&mut tape);
                let (preds, _) = model_forward(&mut tape, mp, &bound, batch, Mode::Eval)?;
                Ok(tape.data(preds).to_vec())
            }
            Predictor::Ensemble(ens) => Ok(ensemble_predict(ens, batch, Mode::Eval)?),
        }
    }

    fn adapt_one_step(&mut self, batch: &GraphBatch, alpha: f64, step: usize) -> Result<(), EvalError> {
        match self {
            Predictor::Single(mp) => {
                inner_step(mp, batch, alpha, step)?;
            }
            Predictor::Ensemble(ens) => {
                ensemble_adapt(ens, batch, alpha, 1)?;
            }
        }
        Ok(())
    }
}

fn mse(preds: &[f64], labels: &[f64]) -> f64 {
    let n = preds.len() as f64;
    preds.iter().zip(labels).map(|(p, y)| (p - y) * (p - y)).sum::<f64>() / n
}

/// Query and support MSE after each adaptation step; index 0 is the
/// unadapted model, index `k` the fully adapted one.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialCurve {
    pub query_mse: Vec<f64>,
    pub support_mse: Vec<f64>,
}

/// One k-shot trial: draw a support set from the test split, adapt on
/// it, and measure MSE on the disjoint remainder of the split.
pub fn kshot_trial(
    predictor: &Predictor,
    ds: &Dataset,
    target: usize,
    test_split: &[usize],
    norm: &Normalizer,
    cfg: &EvalConfig,
    rng: &mut ChaCha8Rng,
) -> Result<TrialCurve, EvalError> {
    cfg.validate()?;
    if test_split.len() <= cfg.support_size {
        return Err(EvalError::Contract(format!(
            "test split of {} graphs leaves no query set after a support of {}",
            test_split.len(),
            cfg.support_size
        )));
    }
    let task = Task { target_index: target, split: test_split };
    let support = sample_support(ds, task, norm, cfg.support_size, rng)?;
    let support_batch = GraphBatch::from_support(ds, &support);

    let query_indices: Vec<usize> = test_split
        .iter()
        .copied()
        .filter(|i| !support.graph_indices.contains(i))
        .collect();
    let query_labels: Vec<f64> = query_indices
        .iter()
        .map(|&i| norm.apply(ds.graphs[i].targets[target]))
        .collect();
    let query_batch = GraphBatch::from_graphs(ds, &query_indices, &query_labels);

    let mut p = predictor.clone();
    let mut curve = TrialCurve {
        query_mse: Vec::with_capacity(cfg.k + 1),
        support_mse: Vec::with_capacity(cfg.k + 1),
    };
    curve.query_mse.push(mse(&p.predict(&query_batch)?, &query_batch.labels));
    curve.support_mse.push(mse(&p.predict(&support_batch)?, &support_batch.labels));
    for step in 0..cfg.k {
        p.adapt_one_step(&support_batch, cfg.alpha, step)?;
        curve.query_mse.push(mse(&p.predict(&query_batch)?, &query_batch.labels));
        curve.support_mse.push(mse(&p.predict(&support_batch)?, &support_batch.labels));
    }
    Ok(curve)
}

/// Per-task summary: query-MSE mean and population standard deviation
/// at each adaptation step, over all trials.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskStats {
    pub task: String,
    pub trials: usize,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

fn summarize(task: String, curves: &[TrialCurve]) -> TaskStats {
    let steps = curves[0].query_mse.len();
    let n = curves.len() as f64;
    let mut mean = vec![0.0; steps];
    let mut std = vec![0.0; steps];
    for c in curves {
        for (s, &v) in c.query_mse.iter().enumerate() {
            mean[s] += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= n;
    }
    for c in curves {
        for (s, &v) in c.query_mse.iter().enumerate() {
            std[s] += (v - mean[s]) * (v - mean[s]);
        }
    }
    for s in std.iter_mut() {
        *s = (*s / n).sqrt();
    }
    TaskStats { task, trials: curves.len(), mean, std }
}

/// Evaluate a per-trial predictor factory over every requested task.
/// Trials run in parallel but are summarized in trial-index order, so
/// results are deterministic for a fixed configuration.
pub fn evaluate_with<F>(
    factory: F,
    ds: &Dataset,
    targets: &[usize],
    test_split: &[usize],
    norm: &Normalizer,
    cfg: &EvalConfig,
) -> Result<Vec<TaskStats>, EvalError>
where
    F: Fn(usize) -> Predictor + Sync,
{
    cfg.validate()?;
    let mut out = Vec::with_capacity(targets.len());
    for &target in targets {
        if target >= ds.num_tasks() {
            return Err(EvalError::Contract(format!(
                "task index {target} out of range ({} tasks)",
                ds.num_tasks()
            )));
        }
        let curves: Vec<Result<TrialCurve, EvalError>> = (0..cfg.trials)
            .into_par_iter()
            .map(|trial| {
                let stream = (target as u64) << 32 | trial as u64;
                let mut rng = child_rng(cfg.seed, stream);
                let p = factory(trial);
                kshot_trial(&p, ds, target, test_split, norm, cfg, &mut rng)
            })
            .collect();
        let curves: Vec<TrialCurve> = curves.into_iter().collect::<Result<_, _>>()?;
        out.push(summarize(ds.task_names[target].clone(), &curves));
    }
    Ok(out)
}

/// Evaluate one fixed predictor (meta-trained weights, a loaded model,
/// or an ensemble) on the given tasks.
pub fn evaluate(
    predictor: &Predictor,
    ds: &Dataset,
    targets: &[usize],
    test_split: &[usize],
    norm: &Normalizer,
    cfg: &EvalConfig,
) -> Result<Vec<TaskStats>, EvalError> {
    evaluate_with(|_| predictor.clone(), ds, targets, test_split, norm, cfg)
}

/// Random-initialization baseline: every trial starts from a fresh
/// seeded initialization of the same architecture.
pub fn baseline_random(
    arch: crate::layers::Architecture,
    ds: &Dataset,
    targets: &[usize],
    test_split: &[usize],
    norm: &Normalizer,
    cfg: &EvalConfig,
) -> Result<Vec<TaskStats>, EvalError> {
    evaluate_with(
        |trial| {
            let seed = cfg.seed ^ (0x5851_f42d_4c95_7f2d_u64.wrapping_mul(trial as u64 + 1));
            Predictor::Single(crate::layers::model_init(arch, seed).expect("valid architecture"))
        },
        ds,
        targets,
        test_split,
        norm,
        cfg,
    )
}

/// Mean of per-task means and standard deviations, optionally excluding
/// tasks by name.
pub fn aggregate_across_tasks(stats: &[TaskStats], exclude: &[&str]) -> Result<TaskStats, EvalError> {
    let kept: Vec<&TaskStats> = stats.iter().filter(|s| !exclude.contains(&s.task.as_str())).collect();
    if kept.is_empty() {
        return Err(EvalError::Contract("no tasks left to aggregate".into()));
    }
    let steps = kept[0].mean.len();
    if kept.iter().any(|s| s.mean.len() != steps) {
        return Err(EvalError::Contract("tasks have differing step counts".into()));
    }
    let n = kept.len() as f64;
    let mut mean = vec![0.0; steps];
    let mut std = vec![0.0; steps];
    for s in &kept {
        for i in 0..steps {
            mean[i] += s.mean[i] / n;
            std[i] += s.std[i] / n;
        }
    }
    Ok(TaskStats {
        task: "aggregate".into(),
        trials: kept.iter().map(|s| s.trials).sum(),
        mean,
        std,
    })
}

/// Evaluation report: one row per task, columns for the unadapted
/// model, one adaptation step, and the final step.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub model: String,
    pub init: String,
    pub k: usize,
    pub rows: Vec<TaskStats>,
}

impl EvalReport {
    pub fn write_csv(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(
            w,
            "model,init,task,trials,pre_mean,pre_std,step1_mean,step1_std,step{k}_mean,step{k}_std",
            k = self.k
        )?;
        for r in &self.rows {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{},{}",
                self.model,
                self.init,
                r.task,
                r.trials,
                sci3(r.mean[0]),
                sci3(r.std[0]),
                sci3(r.mean[1]),
                sci3(r.std[1]),
                sci3(r.mean[self.k]),
                sci3(r.std[self.k]),
            )?;
        }
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> std::io::Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(f))
    }
}
