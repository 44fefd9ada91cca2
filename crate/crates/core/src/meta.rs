//! Reptile meta-learning: inner-loop SGD adaptation on small support
//! sets and the interpolation-toward-adapted-weights outer update.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use thiserror::Error;

use crate::data::{sample_support, DataError, Dataset, Normalizer, Task};
use crate::layers::{
    apply_bn_updates, model_forward, mse_loss, GraphBatch, Mode, ModelError, ModelParams,
};
use crate::tensor::{param_grads, sgd_step, Tape, TensorError, Tensor};

/// Inner-loop losses above this are treated as divergence.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

#[derive(Debug, Error)]
pub enum MetaError {
    #[error("inner loop diverged at iteration {iteration}: loss {loss}")]
    Diverged { iteration: usize, loss: f64 },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetaConfig {
    /// Inner-loop SGD learning rate (alpha).
    pub inner_lr: f64,
    /// Outer interpolation rate (beta).
    pub meta_lr: f64,
    /// Inner-loop steps per task draw (k).
    pub inner_steps: usize,
    /// Support-set size per draw (K).
    pub support_size: usize,
    /// Outer iterations.
    pub epochs: usize,
    pub seed: u64,
}

impl MetaConfig {
    pub fn validate(&self) -> Result<(), MetaError> {
        if !(self.inner_lr > 0.0 && self.inner_lr.is_finite()) {
            return Err(MetaError::Contract(format!("inner_lr must be > 0, got {}", self.inner_lr)));
        }
        if !(0.0 < self.meta_lr && self.meta_lr <= 1.0) {
            return Err(MetaError::Contract(format!(
                "meta_lr must be in (0, 1], got {}",
                self.meta_lr
            )));
        }
        if self.inner_steps == 0 {
            return Err(MetaError::Contract("inner_steps must be >= 1".into()));
        }
        if self.support_size == 0 {
            return Err(MetaError::Contract("support_size must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainLogRow {
    pub iteration: usize,
    pub task: String,
    pub loss_pre: f64,
    pub loss_post: f64,
}

/// Per-iteration support losses before and after adaptation.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<TrainLogRow>,
}

impl TrainLog {
    pub fn write_csv(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(w, "iteration,task,loss_pre,loss_post")?;
        for r in &self.rows {
            writeln!(
                w,
                "{},{},{},{}",
                r.iteration,
                r.task,
                crate::data::sci3(r.loss_pre),
                crate::data::sci3(r.loss_post)
            )?;
        }
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> std::io::Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(f))
    }
}

/// One full-batch MSE SGD step in place. Returns the loss *before* the
/// step. Fails if the loss is non-finite or exceeds [`DIVERGENCE_LIMIT`].
pub fn inner_step(
    mp: &mut ModelParams,
    batch: &GraphBatch,
    alpha: f64,
    iteration: usize,
) -> Result<f64, MetaError> {
    let mut tape = Tape::new();
    let bound = mp.params.bind(&mut tape);
    let (preds, bn_updates) = model_forward(&mut tape, mp, &bound, batch, Mode::Train)?;
    let loss = mse_loss(&mut tape, preds, &batch.labels)?;
    let loss_val = tape.scalar_value(loss)?;
    if !loss_val.is_finite() || loss_val > DIVERGENCE_LIMIT {
        return Err(MetaError::Diverged { iteration, loss: loss_val });
    }
    let grads = param_grads(&tape, loss, &bound, &mp.params)?;
    mp.params = sgd_step(&mp.params, &grads, alpha)?;
    apply_bn_updates(&mut mp.params, &bn_updates);
    Ok(loss_val)
}

/// Support loss without stepping, in training mode.
pub fn support_loss(mp: &ModelParams, batch: &GraphBatch) -> Result<f64, MetaError> {
    let mut tape = Tape::new();
    let bound = mp.params.bind(&mut tape);
    let (preds, _) = model_forward(&mut tape, mp, &bound, batch, Mode::Train)?;
    let loss = mse_loss(&mut tape, preds, &batch.labels)?;
    Ok(tape.scalar_value(loss)?)
}

/// Adapted parameters plus the support-loss trajectory (`k + 1` values:
/// before each step and after the last).
#[derive(Debug, Clone)]
pub struct AdaptResult {
    pub params: ModelParams,
    pub support_losses: Vec<f64>,
}

/// Run `k` full-batch SGD steps on the support batch starting from `mp`.
pub fn inner_adapt(
    mp: &ModelParams,
    batch: &GraphBatch,
    alpha: f64,
    k: usize,
    iteration: usize,
) -> Result<AdaptResult, MetaError> {
    if k == 0 {
        return Err(MetaError::Contract("inner_steps must be >= 1".into()));
    }
    let mut adapted = mp.clone();
    let mut losses = Vec::with_capacity(k + 1);
    for _ in 0..k {
        losses.push(inner_step(&mut adapted, batch, alpha, iteration)?);
    }
    losses.push(support_loss(&adapted, batch)?);
    Ok(AdaptResult { params: adapted, support_losses: losses })
}

/// Componentwise interpolation `theta <- theta + beta (theta' - theta)`.
/// `beta = 0` leaves `theta` untouched; `beta = 1` adopts the adapted
/// weights exactly.
pub fn reptile_meta_update(theta: &mut ModelParams, adapted: &ModelParams, beta: f64) -> Result<(), MetaError> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(MetaError::Contract(format!("beta must be in [0, 1], got {beta}")));
    }
    if theta.arch != adapted.arch {
        return Err(MetaError::Contract("architectures differ in meta update".into()));
    }
    let names: Vec<String> = theta.params.iter().map(|(n, _)| n.clone()).collect();
    for name in names {
        let cur = theta.params.get(&name).unwrap();
        let new = adapted
            .params
            .get(&name)
            .ok_or_else(|| MetaError::Contract(format!("adapted params missing '{name}'")))?;
        if cur.shape != new.shape {
            return Err(MetaError::Contract(format!("shape mismatch for '{name}'")));
        }
        // the endpoints are exact: beta=0 keeps theta, beta=1 adopts theta'
        let data: Vec<f64> = if beta == 0.0 {
            cur.data.clone()
        } else if beta == 1.0 {
            new.data.clone()
        } else {
            cur.data
                .iter()
                .zip(&new.data)
                .map(|(&t, &a)| t + beta * (a - t))
                .collect()
        };
        let shape = cur.shape.clone();
        theta.params.insert(name, Tensor { shape, data });
    }
    Ok(())
}

/// Meta-train with Reptile: each iteration draws one training task
/// uniformly, adapts a clone on a fresh support batch, and interpolates
/// the meta-parameters toward the adapted weights. Deterministic for a
/// fixed configuration.
pub fn reptile_train(
    init: &ModelParams,
    ds: &Dataset,
    task_targets: &[usize],
    train_split: &[usize],
    norm: &Normalizer,
    cfg: &MetaConfig,
) -> Result<(ModelParams, TrainLog), MetaError> {
    cfg.validate()?;
    if task_targets.is_empty() {
        return Err(MetaError::Contract("no training tasks".into()));
    }
    for &t in task_targets {
        if t >= ds.num_tasks() {
            return Err(MetaError::Contract(format!(
                "task index {t} out of range ({} tasks)",
                ds.num_tasks()
            )));
        }
    }
    if train_split.len() < cfg.support_size {
        return Err(MetaError::Contract(format!(
            "train split of {} graphs cannot supply support size {}",
            train_split.len(),
            cfg.support_size
        )));
    }
    let mut rng = crate::data::child_rng(cfg.seed, 0);
    let mut theta = init.clone();
    let mut log = TrainLog::default();
    for iteration in 0..cfg.epochs {
        let target = task_targets[rng.gen_range(0..task_targets.len())];
        let task = Task { target_index: target, split: train_split };
        let support = sample_support(ds, task, norm, cfg.support_size, &mut rng)?;
        let batch = GraphBatch::from_support(ds, &support);
        let result = inner_adapt(&theta, &batch, cfg.inner_lr, cfg.inner_steps, iteration)?;
        reptile_meta_update(&mut theta, &result.params, cfg.meta_lr)?;
        log.rows.push(TrainLogRow {
            iteration,
            task: ds.task_names[target].clone(),
            loss_pre: result.support_losses[0],
            loss_post: *result.support_losses.last().unwrap(),
        });
    }
    Ok((theta, log))
}
