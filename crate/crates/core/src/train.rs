// SPDX-License-Identifier: Apache-2.0

//! Training loops: source pretraining, target adaptation (adapters or full
//! fine-tuning), the from-scratch baseline and low-resource subsampling.
//!
//! A batch is cut into fixed-size shards. Each shard gets its own tape and
//! the shard gradients are summed in shard order, so the rayon and
//! sequential paths give the same bits.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamState, Graph, OneCycleSchedule};
use crate::checkpoint::Checkpoint;
use crate::embed::SessionMatrix;
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport, DEFAULT_THRESHOLD};
use crate::model::{AnomalyModel, Mode, ModelConfig};
use crate::parallel::Parallelism;
use crate::seed::derive_seed;
use crate::session::Session;

/// Learning rates the full-size preset is meant to be picked from.
pub const LR_GRID: [f64; 3] = [1e-5, 5e-5, 1e-6];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_lr: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Dev evaluation period in optimizer steps; 0 means once per epoch.
    pub eval_every: usize,
    /// Stop after this many dev evaluations without an F1 gain, counted
    /// once warmup is over. `None` always runs every epoch.
    pub early_stop_patience: Option<usize>,
    pub threshold: f64,
    /// Trailing share of the training split held out as the dev set.
    pub dev_fraction: f64,
    /// Sessions per gradient shard.
    pub shard_size: usize,
    pub parallelism: Parallelism,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            max_lr: 5e-5,
            epochs: 30,
            seed: 7,
            eval_every: 0,
            early_stop_patience: Some(3),
            threshold: DEFAULT_THRESHOLD,
            dev_fraction: 0.1,
            shard_size: 16,
            parallelism: Parallelism::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.shard_size == 0 {
            return Err(Error::config("batch_size and shard_size must be >= 1"));
        }
        if !(self.max_lr.is_finite() && self.max_lr > 0.0) {
            return Err(Error::config(format!("max_lr must be positive, got {}", self.max_lr)));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::config(format!(
                "threshold must be in (0,1), got {}",
                self.threshold
            )));
        }
        if !(0.0..1.0).contains(&self.dev_fraction) {
            return Err(Error::config(format!(
                "dev_fraction must be in [0,1), got {}",
                self.dev_fraction
            )));
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.batch_size)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub step: u64,
    pub split: String,
    pub loss: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub mode: Mode,
    pub trainable_params: usize,
    /// Training loss after each optimizer step (index `i` is step `i + 1`).
    pub step_loss: Vec<f64>,
    pub evals: Vec<EvalPoint>,
    pub epoch_seconds: Vec<f64>,
    pub stopped_early: bool,
    pub warnings: Vec<String>,
}

impl RunMetrics {
    fn new(mode: Mode, trainable_params: usize) -> Self {
        Self {
            mode,
            trainable_params,
            step_loss: Vec::new(),
            evals: Vec::new(),
            epoch_seconds: Vec::new(),
            stopped_early: false,
            warnings: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step_loss.len() as u64
    }

    /// First evaluated step whose dev F1 reaches `target`.
    pub fn steps_to_f1(&self, target: f64) -> Option<u64> {
        self.evals.iter().find(|e| e.f1 >= target).map(|e| e.step)
    }

    pub fn best_f1(&self) -> f64 {
        self.evals.iter().map(|e| e.f1).fold(0.0, f64::max)
    }

    pub fn final_f1(&self) -> Option<f64> {
        self.evals.last().map(|e| e.f1)
    }

    /// Rows for `metrics.jsonl`. Wall-clock time is left out so the file is
    /// reproducible.
    pub fn jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.evals {
            out.push_str(&serde_json::to_string(e).expect("serializable"));
            out.push('\n');
        }
        out
    }
}

/// BCE of `probs` against `labels`, clamped as in the graph op.
pub fn bce_loss(probs: &[f32], labels: &[bool]) -> f64 {
    let eps = crate::autodiff::BCE_EPS;
    let sum: f64 = probs
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let p = (p as f64).clamp(eps, 1.0 - eps);
            if y {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum();
    sum / probs.len() as f64
}

/// Deterministic per-epoch visiting order.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(
        seed,
        &format!("train.shuffle.{epoch}"),
    )));
    idx
}

/// Predicts in fixed shards, optionally in parallel.
pub fn predict(model: &AnomalyModel<f32>, data: &[SessionMatrix], shard: usize, par: Parallelism) -> Result<Vec<f32>> {
    let chunks: Vec<Vec<&SessionMatrix>> = data.chunks(shard.max(1)).map(|c| c.iter().collect()).collect();
    let parts = par.map(&chunks, |_, c| model.predict(c));
    let mut out = Vec::with_capacity(data.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Evaluates `model` on `data`, returning the report and mean BCE.
pub fn evaluate_model(
    model: &AnomalyModel<f32>,
    data: &[SessionMatrix],
    cfg: &TrainConfig,
) -> Result<(EvalReport, f64)> {
    let probs = predict(model, data, cfg.shard_size, cfg.parallelism)?;
    let labels: Vec<bool> = data.iter().map(|s| s.label).collect();
    Ok((evaluate(&probs, &labels, cfg.threshold)?, bce_loss(&probs, &labels)))
}

struct ShardResult {
    loss: f64,
    grads: Vec<Option<Vec<f32>>>,
}

fn shard_gradients(
    model: &AnomalyModel<f32>,
    shard: &[&SessionMatrix],
    batch_len: usize,
    mode: Mode,
    dropout_seed: u64,
) -> Result<ShardResult> {
    let mut g = Graph::new();
    let mut rng = ChaCha8Rng::seed_from_u64(dropout_seed);
    let fwd = model.forward(&mut g, shard, mode, true, Some(&mut rng))?;
    let labels: Vec<f32> = shard.iter().map(|s| f32::from(u8::from(s.label))).collect();
    let loss = g.bce(fwd.probs, &labels)?;
    let weight = shard.len() as f64 / batch_len as f64;
    let loss_value = g.value(loss)[0] as f64 * weight;
    let mut grads = g.backward_with(loss, vec![weight as f32])?;
    let grads = fwd.param_vars.iter().map(|&v| grads.take(v)).collect();
    Ok(ShardResult {
        loss: loss_value,
        grads,
    })
}

fn reduce(parts: Vec<ShardResult>) -> (f64, Vec<Option<Vec<f32>>>) {
    let mut iter = parts.into_iter();
    let first = iter.next().expect("at least one shard");
    let (mut loss, mut acc) = (first.loss, first.grads);
    for part in iter {
        loss += part.loss;
        for (a, g) in acc.iter_mut().zip(part.grads) {
            match (a.as_mut(), g) {
                (Some(a), Some(g)) => a.iter_mut().zip(&g).for_each(|(x, y)| *x += y),
                (None, Some(g)) => *a = Some(g),
                _ => {}
            }
        }
    }
    (loss, acc)
}

/// Trains `model` in its current mode on `train`, evaluating on `dev`.
///
/// With early stopping, the parameters of the best dev evaluation are kept.
pub fn train_model(
    model: &mut AnomalyModel<f32>,
    train: &[SessionMatrix],
    dev: &[SessionMatrix],
    cfg: &TrainConfig,
) -> Result<RunMetrics> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::data("empty training set"));
    }
    let mode = model.mode();
    let mut metrics = RunMetrics::new(mode, model.trainable_count());
    let positives = train.iter().filter(|s| s.label).count();
    if positives == 0 || positives == train.len() {
        metrics.warnings.push(format!(
            "training data has a single class ({} of {} anomalous)",
            positives,
            train.len()
        ));
    }
    let spe = cfg.steps_per_epoch(train.len());
    let total = (cfg.epochs * spe) as u64;
    if total == 0 {
        return Ok(metrics);
    }
    let schedule = OneCycleSchedule::new(cfg.max_lr, total).map_err(|e| Error::config(e.to_string()))?;
    let eval_every = if cfg.eval_every == 0 { spe } else { cfg.eval_every } as u64;
    let mut adam = AdamState::new(model.params());
    let mut best: Option<(f64, AnomalyModel<f32>)> = None;
    let mut since_best = 0usize;
    let mut step: u64 = 0;

    'epochs: for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let order = epoch_order(cfg.seed, epoch, train.len());
        for batch_idx in order.chunks(cfg.batch_size) {
            let batch: Vec<&SessionMatrix> = batch_idx.iter().map(|&i| &train[i]).collect();
            let shards: Vec<&[&SessionMatrix]> = batch.chunks(cfg.shard_size).collect();
            let frozen: &AnomalyModel<f32> = model;
            let parts = cfg.parallelism.map(&shards, |k, shard| {
                let seed = derive_seed(cfg.seed, &format!("train.dropout.{step}.{k}"));
                shard_gradients(frozen, shard, batch.len(), mode, seed)
            });
            let parts = parts.into_iter().collect::<Result<Vec<_>>>()?;
            let (loss, grads) = reduce(parts);
            if !loss.is_finite() || grads.iter().flatten().flatten().any(|g| !g.is_finite()) {
                return Err(Error::Divergence(format!(
                    "non-finite loss {loss} at step {}",
                    step + 1
                )));
            }
            let lr = schedule.lr_at(step).map_err(|e| Error::config(e.to_string()))?;
            adam.step(model.params_mut(), &grads, lr)?;
            step += 1;
            metrics.step_loss.push(loss);

            if step.is_multiple_of(eval_every) || step == total {
                let (report, dev_loss) = evaluate_model(model, dev, cfg)?;
                metrics.evals.push(EvalPoint {
                    step,
                    split: "dev".into(),
                    loss: dev_loss,
                    precision: report.precision,
                    recall: report.recall,
                    f1: report.f1,
                });
                if let Some(patience) = cfg.early_stop_patience {
                    if best.as_ref().is_none_or(|(f, _)| report.f1 > *f) {
                        best = Some((report.f1, model.clone()));
                        since_best = 0;
                    } else if step >= schedule.warmup_steps() {
                        since_best += 1;
                        if since_best >= patience {
                            metrics.stopped_early = step < total;
                            metrics.epoch_seconds.push(started.elapsed().as_secs_f64());
                            break 'epochs;
                        }
                    }
                }
            }
        }
        metrics.epoch_seconds.push(started.elapsed().as_secs_f64());
    }
    if let Some((_, m)) = best {
        *model = m;
    }
    Ok(metrics)
}

/// Supervised source-domain training of backbone and head, no adapters.
pub fn pretrain(
    train: &[SessionMatrix],
    dev: &[SessionMatrix],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<(Checkpoint, RunMetrics)> {
    let mut model = AnomalyModel::new(model_cfg.clone(), derive_seed(cfg.seed, "model.init"))?;
    let metrics = train_model(&mut model, train, dev, cfg)?;
    let step = metrics.steps();
    Ok((
        Checkpoint {
            model,
            seed: cfg.seed,
            step,
        },
        metrics,
    ))
}

/// Target-domain baseline from random init; same procedure as [`pretrain`].
pub fn train_from_scratch(
    train: &[SessionMatrix],
    dev: &[SessionMatrix],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<(Checkpoint, RunMetrics)> {
    pretrain(train, dev, model_cfg, cfg)
}

fn check_backbone(backbone: &Checkpoint, model_cfg: &ModelConfig) -> Result<()> {
    let (have, want) = (backbone.model.config().backbone_hash(), model_cfg.backbone_hash());
    if have != want {
        return Err(Error::IncompatibleBackbone(format!(
            "checkpoint config hash {} does not match {}",
            &have[..12],
            &want[..12]
        )));
    }
    Ok(())
}

fn tune(
    backbone: &Checkpoint,
    model_cfg: &ModelConfig,
    train: &[SessionMatrix],
    dev: &[SessionMatrix],
    cfg: &TrainConfig,
    mode: Mode,
) -> Result<(Checkpoint, RunMetrics)> {
    check_backbone(backbone, model_cfg)?;
    cfg.validate()?;
    let mut model = backbone.model.clone();
    if cfg.epochs == 0 {
        // Nothing is trained, so nothing is touched.
        let metrics = RunMetrics::new(mode, count_for(model_cfg, mode));
        return Ok((backbone.clone(), metrics));
    }
    let init = derive_seed(cfg.seed, &format!("{mode}.init"));
    match mode {
        Mode::Adapter => model.prepare_adapter_tuning(init, true),
        Mode::Finetune => model.prepare_finetune(init, true),
        Mode::Scratch => return Err(Error::config("tuning needs adapter or finetune mode")),
    }
    let metrics = train_model(&mut model, train, dev, cfg)?;
    let step = metrics.steps();
    Ok((
        Checkpoint {
            model,
            seed: cfg.seed,
            step,
        },
        metrics,
    ))
}

fn count_for(model_cfg: &ModelConfig, mode: Mode) -> usize {
    crate::model::count_params(model_cfg, mode)
}

/// Freezes attention and feed-forward weights, inserts fresh adapters and
/// a new head, and trains on the target domain.
pub fn adapter_tune(
    backbone: &Checkpoint,
    model_cfg: &ModelConfig,
    train: &[SessionMatrix],
    dev: &[SessionMatrix],
    cfg: &TrainConfig,
) -> Result<(Checkpoint, RunMetrics)> {
    tune(backbone, model_cfg, train, dev, cfg, Mode::Adapter)
}

/// Updates every backbone parameter plus a new head on the target domain.
pub fn fine_tune(
    backbone: &Checkpoint,
    model_cfg: &ModelConfig,
    train: &[SessionMatrix],
    dev: &[SessionMatrix],
    cfg: &TrainConfig,
) -> Result<(Checkpoint, RunMetrics)> {
    tune(backbone, model_cfg, train, dev, cfg, Mode::Finetune)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Subsample {
    pub sessions: Vec<Session>,
    pub anomalous: usize,
    pub normal: usize,
}

/// Uniform sample of `n` sessions without replacement, kept in original
/// order.
pub fn subsample(train: &[Session], n: usize, seed: u64) -> Result<Subsample> {
    if n == 0 {
        return Err(Error::data("empty training set"));
    }
    if n > train.len() {
        return Err(Error::data(format!(
            "subsample of {n} requested from {} sessions",
            train.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "train.subsample"));
    let mut idx = rand::seq::index::sample(&mut rng, train.len(), n).into_vec();
    idx.sort_unstable();
    let sessions: Vec<Session> = idx.into_iter().map(|i| train[i].clone()).collect();
    let anomalous = sessions.iter().filter(|s| s.label).count();
    Ok(Subsample {
        normal: sessions.len() - anomalous,
        anomalous,
        sessions,
    })
}
