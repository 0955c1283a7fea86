//! Stage 1 masked reconstruction training and stage 2 multi-task prompt
//! tuning.

mod losses;

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::Tensor;
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use losses::{mrt_loss, predict, pt_loss, LossBreakdown, MrtWeights, Predictions, PtWeights};

use crate::backbone::{StModel, Stage};
use crate::data::{Dataset, SequenceKind, SplitName, StUnitSequence, WorldStats};
use crate::error::{Error, Result};
use crate::nn::ParamGroup;
use crate::prompting::{build_prompt, build_reconstruction_prompt, PromptContext, PromptInstance, TaskId, TaskParams};
use crate::tokenizer::{FeatureBank, RepresentationTables};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MrtConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub mask_ratio: f64,
    pub weights: MrtWeights,
    /// Reconstruct traffic series alongside trajectories.
    pub include_series: bool,
    pub seed: u64,
}

impl Default for MrtConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 16,
            lr: 1e-3,
            weight_decay: 0.0,
            mask_ratio: 0.15,
            weights: MrtWeights::default(),
            include_series: true,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskShare {
    pub task: TaskId,
    pub proportion: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub weights: PtWeights,
    pub task_mix: Vec<TaskShare>,
    pub params: TaskParams,
    pub seed: u64,
}

impl Default for TuneConfig {
    fn default() -> Self {
        let tasks = [
            TaskId::NextHop,
            TaskId::Classification,
            TaskId::Tte,
            TaskId::OneStep,
            TaskId::MultiStep,
            TaskId::Imputation,
            TaskId::Recovery,
        ];
        Self {
            epochs: 10,
            batch_size: 32,
            lr: 1e-3,
            weight_decay: 0.0,
            weights: PtWeights::default(),
            task_mix: tasks
                .into_iter()
                .map(|task| TaskShare { task, proportion: 1.0 })
                .collect(),
            params: TaskParams::default(),
            seed: 0,
        }
    }
}

impl TuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.task_mix.is_empty() {
            return Err(Error::Config("task_mix is empty".into()));
        }
        for share in &self.task_mix {
            if share.task == TaskId::SimilarSearch {
                return Err(Error::Config("similar_search is not trained".into()));
            }
            if !(share.proportion > 0.0 && share.proportion.is_finite()) {
                return Err(Error::Config(format!("proportion of {} must be positive", share.task)));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub epoch: usize,
    pub task: String,
    pub component: String,
    pub value: f64,
}

pub fn write_trace(rows: &[TraceRow], path: &Path) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)
        .map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::Input(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_trace(path: &Path) -> Result<Vec<TraceRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
    r.deserialize()
        .enumerate()
        .map(|(i, row)| {
            row.map_err(|e| Error::Parse {
                file: path.display().to_string(),
                line: i as u64 + 2,
                message: e.to_string(),
            })
        })
        .collect()
}

/// Per-sample seed derived from a run seed and sample coordinates.
pub fn sample_seed(seed: u64, epoch: usize, stream: u64, id: usize) -> u64 {
    let mut x = seed
        ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ stream.wrapping_mul(0xD6E8_FEB8_6659_FD93)
        ^ (id as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    x ^= x >> 31;
    x = x.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x ^ (x >> 29)
}

/// `K = max(1, round(ratio L))`, at most `L`.
pub fn mask_count(len: usize, ratio: f64) -> usize {
    ((ratio * len as f64).round() as usize).max(1).min(len)
}

/// Masks `k` seeded positions of `seq`; the prompt carries a `(CLS, REG)`
/// pair and targets per masked unit.
pub fn mask_for_reconstruction(seq: &StUnitSequence, k: usize, seed: u64, stats: &WorldStats) -> Result<PromptInstance> {
    build_reconstruction_prompt(seq, k, seed, stats)
}

fn snapshot(groups: &[&ParamGroup]) -> Result<Vec<BTreeMap<String, Tensor>>> {
    groups.iter().map(|g| g.snapshot()).collect()
}

fn restore(groups: &[&ParamGroup], snap: &[BTreeMap<String, Tensor>]) -> Result<()> {
    for (g, s) in groups.iter().zip(snap) {
        g.restore(s)?;
    }
    Ok(())
}

fn optimizer(model: &StModel, stage: Stage, lr: f64, weight_decay: f64) -> Result<AdamW> {
    Ok(AdamW::new(
        model.trainable_parameters(stage),
        ParamsAdamW {
            lr,
            weight_decay,
            ..ParamsAdamW::default()
        },
    )?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub components: BTreeMap<String, f64>,
    /// Masked segment-id reconstruction accuracy.
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MrtReport {
    pub epochs: Vec<EpochSummary>,
}

impl MrtReport {
    pub fn trace(&self) -> Vec<TraceRow> {
        self.epochs
            .iter()
            .flat_map(|e| {
                e.components
                    .iter()
                    .map(move |(k, v)| (k.clone(), *v))
                    .chain(std::iter::once(("accuracy".to_string(), e.accuracy)))
                    .map(move |(component, value)| TraceRow {
                        epoch: e.epoch,
                        task: "mrt".into(),
                        component,
                        value,
                    })
            })
            .collect()
    }
}

/// Stage 1: tokenizer, adapters, heads and placeholders are optimized
/// jointly on masked reconstruction of training-split sequences. A
/// non-finite loss restores the state at the end of the last good epoch
/// and aborts.
pub fn run_mrt_stage(model: &StModel, bank: &FeatureBank, ds: &Dataset, cfg: &MrtConfig) -> Result<MrtReport> {
    cfg.weights.validate()?;
    if cfg.batch_size == 0 || !(cfg.mask_ratio > 0.0 && cfg.mask_ratio <= 1.0) {
        return Err(Error::Config("batch_size > 0 and mask_ratio in (0, 1] required".into()));
    }
    let mut samples: Vec<&StUnitSequence> = ds.trajectory_part(SplitName::Train);
    if cfg.include_series {
        samples.extend(ds.series_part(SplitName::Train));
    }
    if samples.is_empty() && cfg.epochs > 0 {
        return Err(Error::Input("no training sequences".into()));
    }
    let groups = model.trainable_groups(Stage::Mrt);
    let mut opt = optimizer(model, Stage::Mrt, cfg.lr, cfg.weight_decay)?;
    let mut last_good = snapshot(&groups)?;
    let mut report = MrtReport { epochs: Vec::new() };
    for epoch in 1..=cfg.epochs {
        let mut order: Vec<&StUnitSequence> = samples.clone();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(sample_seed(cfg.seed, epoch, 0, 0)));
        let mut sums: BTreeMap<String, f64> = BTreeMap::new();
        let mut steps = 0usize;
        let (mut correct, mut masked) = (0usize, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            let prompts = batch
                .iter()
                .map(|s| {
                    let stream = if s.kind == SequenceKind::Trajectory { 1 } else { 2 };
                    let seed = sample_seed(cfg.seed, epoch, stream, s.id);
                    mask_for_reconstruction(s, mask_count(s.len(), cfg.mask_ratio), seed, &ds.stats)
                })
                .collect::<Result<Vec<_>>>()?;
            let units: Vec<_> = prompts.iter().map(|p| p.units.clone()).collect();
            let step = (|| -> Result<(LossBreakdown, Predictions)> {
                let tokens = model.tokenizer.tokenize(bank, &units)?;
                let out = model.forward(&prompts, &tokens)?;
                let pred = predict(model, &out, &prompts, 0)?;
                let loss = mrt_loss(&pred, &cfg.weights)?;
                Ok((loss, pred))
            })();
            let (loss, pred) = match step {
                Ok(v) => v,
                Err(e @ Error::Numeric { .. }) => {
                    restore(&groups, &last_good)?;
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            opt.backward_step(&loss.total)?;
            for (k, v) in &loss.components {
                *sums.entry(k.clone()).or_default() += v;
            }
            correct += pred.correct()?;
            masked += pred.labels.len();
            steps += 1;
        }
        let components: BTreeMap<String, f64> = sums.into_iter().map(|(k, v)| (k, v / steps as f64)).collect();
        let accuracy = correct as f64 / masked.max(1) as f64;
        info!(
            "mrt epoch {epoch}: total {:.4} accuracy {:.4}",
            components.get("total").copied().unwrap_or(f64::NAN),
            accuracy
        );
        report.epochs.push(EpochSummary {
            epoch,
            components,
            accuracy,
        });
        last_good = snapshot(&groups)?;
    }
    Ok(report)
}

/// Reconstruction loss components and masked segment accuracy on `split`
/// without parameter updates. Masks are drawn with the epoch-0 seeds.
pub fn evaluate_mrt(model: &StModel, bank: &FeatureBank, ds: &Dataset, split: SplitName, cfg: &MrtConfig) -> Result<EpochSummary> {
    let mut samples: Vec<&StUnitSequence> = ds.trajectory_part(split);
    if cfg.include_series {
        samples.extend(ds.series_part(split));
    }
    if samples.is_empty() {
        return Err(Error::Input(format!("no {split} sequences")));
    }
    let mut tables = RepresentationTables::new();
    let mut sums: BTreeMap<String, f64> = BTreeMap::new();
    let mut weight = 0usize;
    let (mut correct, mut masked) = (0usize, 0usize);
    for batch in samples.chunks(cfg.batch_size.max(1)) {
        let prompts = batch
            .iter()
            .map(|s| {
                let stream = if s.kind == SequenceKind::Trajectory { 1 } else { 2 };
                mask_for_reconstruction(s, mask_count(s.len(), cfg.mask_ratio), sample_seed(cfg.seed, 0, stream, s.id), &ds.stats)
            })
            .collect::<Result<Vec<_>>>()?;
        let units: Vec<_> = prompts.iter().map(|p| p.units.clone()).collect();
        let tokens = tables.tokenize(&model.tokenizer, bank, &units)?;
        let out = model.forward(&prompts, &tokens)?;
        let pred = predict(model, &out, &prompts, 0)?;
        let loss = mrt_loss(&pred, &cfg.weights)?;
        for (k, v) in &loss.components {
            *sums.entry(k.clone()).or_default() += v * batch.len() as f64;
        }
        weight += batch.len();
        correct += pred.correct()?;
        masked += pred.labels.len();
    }
    Ok(EpochSummary {
        epoch: 0,
        components: sums.into_iter().map(|(k, v)| (k, v / weight as f64)).collect(),
        accuracy: correct as f64 / masked.max(1) as f64,
    })
}

/// Prompts of one task over `samples`; too-short or unlabeled samples are
/// skipped and counted.
#[derive(Debug, Clone)]
pub struct TaskBatch {
    pub task: TaskId,
    pub prompts: Vec<PromptInstance>,
    pub rejected: usize,
}

pub fn build_task_batch(
    ctx: &PromptContext,
    task: TaskId,
    samples: &[&StUnitSequence],
    ds: &Dataset,
    params: &TaskParams,
) -> Result<TaskBatch> {
    let mut prompts = Vec::with_capacity(samples.len());
    let mut rejected = 0;
    for s in samples {
        let trip = (s.kind == SequenceKind::Trajectory).then(|| ds.trips.get(s.id)).flatten();
        let p = TaskParams {
            seed: sample_seed(params.seed, 0, task as u64 + 10, s.id),
            ..*params
        };
        match build_prompt(ctx, task, s, trip, &p) {
            Ok(prompt) => prompts.push(prompt),
            Err(Error::Input(_)) => rejected += 1,
            Err(e) => return Err(e),
        }
    }
    Ok(TaskBatch { task, prompts, rejected })
}

/// Task samples of a split.
pub fn task_samples(ds: &Dataset, task: TaskId, split: SplitName) -> Vec<&StUnitSequence> {
    match task.modality() {
        SequenceKind::Trajectory => ds.trajectory_part(split),
        SequenceKind::TrafficSeries => ds.series_part(split),
    }
}

/// Prompts with precomputed, detached ST tokens.
#[derive(Debug, Clone)]
pub struct TokenizedTask {
    pub task: TaskId,
    pub prompts: Vec<PromptInstance>,
    pub tokens: Vec<Tensor>,
    pub rejected: usize,
}

pub fn tokenize_task(
    model: &StModel,
    bank: &FeatureBank,
    tables: &mut RepresentationTables,
    batch: TaskBatch,
) -> Result<TokenizedTask> {
    let mut tokens = Vec::with_capacity(batch.prompts.len());
    for chunk in batch.prompts.chunks(64) {
        let units: Vec<_> = chunk.iter().map(|p| p.units.clone()).collect();
        tokens.extend(tables.tokenize(&model.tokenizer, bank, &units)?);
    }
    Ok(TokenizedTask {
        task: batch.task,
        prompts: batch.prompts,
        tokens,
        rejected: batch.rejected,
    })
}

/// Mean stage-2 loss of a task over `data`, without gradients.
pub fn evaluate_loss(model: &StModel, data: &TokenizedTask, ds: &Dataset, w: &PtWeights, batch_size: usize) -> Result<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (prompts, tokens) in data.prompts.chunks(batch_size).zip(data.tokens.chunks(batch_size)) {
        let out = model.forward(prompts, tokens)?;
        let pred = predict(model, &out, prompts, ds.stats.num_classes)?;
        let loss = pt_loss(&[(data.task.family(), &pred)], w)?;
        sum += loss.total_value()? * prompts.len() as f64;
        n += prompts.len();
    }
    Ok(if n == 0 { f64::NAN } else { sum / n as f64 })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneReport {
    pub trace: Vec<TraceRow>,
    pub rejected: BTreeMap<String, usize>,
}

impl TuneReport {
    /// Values of `component` for `task`, by epoch.
    pub fn series(&self, task: TaskId, component: &str) -> Vec<f64> {
        self.trace
            .iter()
            .filter(|r| r.task == task.as_str() && r.component == component)
            .map(|r| r.value)
            .collect()
    }
}

/// Interleaves per-task batch lists round-robin: each round takes one batch
/// from every task that still has some.
fn round_robin(counts: &[usize]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let max = counts.iter().copied().max().unwrap_or(0);
    for round in 0..max {
        for (t, &c) in counts.iter().enumerate() {
            if round < c {
                out.push((t, round));
            }
        }
    }
    out
}

/// Stage 2: co-trains the tasks of `task_mix` on single-task mini-batches
/// with the tokenizer frozen. Per epoch it records the mean training loss
/// and the validation loss of every task.
pub fn run_prompt_tuning(
    model: &StModel,
    bank: &FeatureBank,
    ds: &Dataset,
    ctx: &PromptContext,
    cfg: &TuneConfig,
) -> Result<TuneReport> {
    cfg.validate()?;
    let mut tables = RepresentationTables::new();
    let mut train = Vec::new();
    let mut valid = Vec::new();
    let mut rejected = BTreeMap::new();
    for share in &cfg.task_mix {
        let t = share.task;
        let tr = build_task_batch(ctx, t, &task_samples(ds, t, SplitName::Train), ds, &cfg.params)?;
        let va = build_task_batch(ctx, t, &task_samples(ds, t, SplitName::Valid), ds, &cfg.params)?;
        if tr.prompts.is_empty() {
            return Err(Error::Input(format!("no usable training samples for {t}")));
        }
        rejected.insert(t.to_string(), tr.rejected + va.rejected);
        train.push(tokenize_task(model, bank, &mut tables, tr)?);
        valid.push(tokenize_task(model, bank, &mut tables, va)?);
    }
    let groups = model.trainable_groups(Stage::PromptTuning);
    let mut opt = optimizer(model, Stage::PromptTuning, cfg.lr, cfg.weight_decay)?;
    let mut last_good = snapshot(&groups)?;
    let mut trace = Vec::new();
    for epoch in 1..=cfg.epochs {
        let mut plans = Vec::with_capacity(train.len());
        for (k, (data, share)) in train.iter().zip(&cfg.task_mix).enumerate() {
            let mut idx: Vec<usize> = (0..data.prompts.len()).collect();
            idx.shuffle(&mut ChaCha8Rng::seed_from_u64(sample_seed(cfg.seed, epoch, 100 + k as u64, 0)));
            let batches: Vec<Vec<usize>> = idx.chunks(cfg.batch_size).map(<[usize]>::to_vec).collect();
            let count = ((share.proportion * batches.len() as f64).round() as usize).max(1);
            plans.push((0..count).map(|b| batches[b % batches.len()].clone()).collect::<Vec<_>>());
        }
        let counts: Vec<usize> = plans.iter().map(Vec::len).collect();
        let mut sums = vec![0.0; train.len()];
        for (t, b) in round_robin(&counts) {
            let data = &train[t];
            let sel = &plans[t][b];
            let prompts: Vec<PromptInstance> = sel.iter().map(|&i| data.prompts[i].clone()).collect();
            let tokens: Vec<Tensor> = sel.iter().map(|&i| data.tokens[i].clone()).collect();
            let step = (|| -> Result<LossBreakdown> {
                let out = model.forward(&prompts, &tokens)?;
                let pred = predict(model, &out, &prompts, ds.stats.num_classes)?;
                pt_loss(&[(data.task.family(), &pred)], &cfg.weights)
            })();
            let loss = match step {
                Ok(l) => l,
                Err(e @ Error::Numeric { .. }) => {
                    restore(&groups, &last_good)?;
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            opt.backward_step(&loss.total)?;
            sums[t] += loss.total_value()?;
        }
        for (t, data) in train.iter().enumerate() {
            let task = data.task.to_string();
            trace.push(TraceRow {
                epoch,
                task: task.clone(),
                component: "train".into(),
                value: sums[t] / counts[t] as f64,
            });
            let v = evaluate_loss(model, &valid[t], ds, &cfg.weights, cfg.batch_size)?;
            if !v.is_nan() {
                trace.push(TraceRow {
                    epoch,
                    task: task.clone(),
                    component: "valid".into(),
                    value: v,
                });
            }
            info!("tune epoch {epoch} {task}: train {:.4} valid {v:.4}", sums[t] / counts[t] as f64);
        }
        last_good = snapshot(&groups)?;
    }
    Ok(TuneReport { trace, rejected })
}

#[cfg(test)]
mod tests;
