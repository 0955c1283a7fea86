//! Task harnesses that score a tuned model on a dataset split, and the
//! similar-search comparison over pooled backbone outputs.

mod metrics;

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use metrics::{
    accuracy, binary_auc, classification_metrics, macro_f1, masked_classification_metrics, masked_regression_metrics,
    rank_by_score, rank_of, ranking_metrics, regression_metrics, ClassScheme, RegressionMetrics,
};

use crate::backbone::StModel;
use crate::data::io::{read_json, write_json};
use crate::data::{Dataset, SequenceKind, SplitName, StUnitSequence};
use crate::error::{Error, Result};
use crate::nn::to_f64_rows;
use crate::prompting::{build_prompt, PromptContext, PromptInstance, TaskId, TaskParams};
use crate::tokenizer::{FeatureBank, RepresentationTables};
use crate::training::{build_task_batch, predict, sample_seed, task_samples};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimilarSearchConfig {
    pub k_list: Vec<usize>,
    /// Database size as a multiple of the query count.
    pub database_factor: usize,
    pub max_queries: usize,
}

impl Default for SimilarSearchConfig {
    fn default() -> Self {
        Self {
            k_list: vec![1, 5, 10],
            database_factor: 10,
            max_queries: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub split: SplitName,
    pub params: TaskParams,
    pub batch_size: usize,
    /// Ranking cutoff for next-hop prediction.
    pub k: usize,
    pub similar: SimilarSearchConfig,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            split: SplitName::Test,
            params: TaskParams::default(),
            batch_size: 64,
            k: 5,
            similar: SimilarSearchConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub task: TaskId,
    pub split: SplitName,
    pub seed: u64,
    pub params: TaskParams,
    pub metrics: BTreeMap<String, f64>,
    /// Scored prompts.
    pub samples: usize,
    /// Samples the task template could not use.
    pub rejected: usize,
    /// Set when the split overlaps training data.
    pub warning: Option<String>,
}

impl MetricReport {
    pub fn validate(&self) -> Result<()> {
        if self.samples == 0 {
            return Err(Error::Input(format!("{} report scored no samples", self.task)));
        }
        if let Some((k, _)) = self.metrics.iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::Numeric { component: k.clone() });
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(self, path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        read_json(path)
    }
}

/// Pooled representation per sequence id, iterated in ascending id order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingIndex {
    pub pooling: String,
    /// Vectors are L2-normalized on insertion.
    pub normalized: bool,
    pub vectors: BTreeMap<usize, Vec<f64>>,
}

impl EmbeddingIndex {
    pub fn new(pooling: &str, normalized: bool) -> Self {
        Self {
            pooling: pooling.to_string(),
            normalized,
            vectors: BTreeMap::new(),
        }
    }

    pub fn width(&self) -> Option<usize> {
        self.vectors.values().next().map(Vec::len)
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn insert(&mut self, id: usize, mut v: Vec<f64>) -> Result<()> {
        if let Some(w) = self.width() {
            if w != v.len() {
                return Err(Error::Index(format!("vector width {} differs from index width {w}", v.len())));
            }
        }
        if self.normalized {
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 0.0 {
                v.iter_mut().for_each(|x| *x /= norm);
            }
        }
        self.vectors.insert(id, v);
        Ok(())
    }

    /// Ids by descending cosine similarity to `query`, ties by ascending id.
    pub fn rank(&self, query: &[f64]) -> Result<Vec<usize>> {
        if let Some(w) = self.width() {
            if w != query.len() {
                return Err(Error::Index(format!("query width {} differs from index width {w}", query.len())));
            }
        }
        let qn = query.iter().map(|x| x * x).sum::<f64>().sqrt();
        let ids: Vec<usize> = self.vectors.keys().copied().collect();
        let scores: Vec<f64> = self
            .vectors
            .values()
            .map(|v| {
                let dot: f64 = v.iter().zip(query).map(|(a, b)| a * b).sum();
                let vn = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                if qn == 0.0 || vn == 0.0 {
                    0.0
                } else {
                    dot / (qn * vn)
                }
            })
            .collect();
        Ok(rank_by_score(&scores).into_iter().map(|i| ids[i]).collect())
    }
}

/// `hr@k` for every `k` in `k_list`; `truths` maps query id to database id.
pub fn eval_similar_search(
    queries: &EmbeddingIndex,
    database: &EmbeddingIndex,
    truths: &BTreeMap<usize, usize>,
    k_list: &[usize],
) -> Result<BTreeMap<String, f64>> {
    if queries.width() != database.width() {
        return Err(Error::Index(format!(
            "query width {:?} differs from database width {:?}",
            queries.width(),
            database.width()
        )));
    }
    let mut lists = Vec::with_capacity(queries.len());
    let mut expected = Vec::with_capacity(queries.len());
    for (id, v) in &queries.vectors {
        let truth = truths
            .get(id)
            .ok_or_else(|| Error::Input(format!("query {id} has no ground truth")))?;
        lists.push(database.rank(v)?);
        expected.push(*truth);
    }
    let mut out = BTreeMap::new();
    for &k in k_list {
        let m = ranking_metrics(&lists, &expected, k)?;
        out.insert(format!("hr@{k}"), m[&format!("hr@{k}")]);
    }
    Ok(out)
}

/// Head outputs of a prompt list, flattened in prompt and placeholder order.
#[derive(Debug, Default)]
struct Outputs {
    logits: Vec<Vec<f64>>,
    dynamic: Vec<Vec<f64>>,
    time: Vec<f64>,
}

fn run_prompts(
    model: &StModel,
    bank: &FeatureBank,
    tables: &mut RepresentationTables,
    prompts: &[PromptInstance],
    ds: &Dataset,
    batch_size: usize,
) -> Result<Outputs> {
    let mut out = Outputs::default();
    for chunk in prompts.chunks(batch_size.max(1)) {
        let units: Vec<_> = chunk.iter().map(|p| p.units.clone()).collect();
        let tokens = tables.tokenize(&model.tokenizer, bank, &units)?;
        let hidden = model.forward(chunk, &tokens)?;
        let pred = predict(model, &hidden, chunk, ds.stats.num_classes)?;
        if let Some(l) = &pred.logits {
            out.logits.extend(to_f64_rows(l)?);
        }
        if let Some((p, _)) = &pred.dynamic {
            out.dynamic.extend(to_f64_rows(p)?);
        }
        if let Some((p, _)) = &pred.time {
            out.time.extend(p.to_dtype(DType::F64)?.to_vec1::<f64>()?);
        }
    }
    Ok(out)
}

fn argmax(row: &[f64]) -> usize {
    rank_by_score(row)[0]
}

fn softmax_positive(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|x| (x - m).exp()).collect();
    e[1] / e.iter().sum::<f64>()
}

fn sequence_of<'a>(ds: &'a Dataset, p: &PromptInstance, task: TaskId) -> &'a StUnitSequence {
    match task.modality() {
        SequenceKind::Trajectory => &ds.trajectories[p.sequence_id],
        SequenceKind::TrafficSeries => &ds.series[p.sequence_id],
    }
}

fn raw_dynamic(seq: &StUnitSequence, pos: usize) -> Result<[f64; 3]> {
    seq.units[pos].dynamic.ok_or(Error::MissingState {
        segment: seq.segment_ids[pos],
        slice: seq.units[pos].temporal.slice_index,
    })
}

/// Scores `task` on `cfg.split`.
pub fn eval_task(
    model: &StModel,
    bank: &FeatureBank,
    ds: &Dataset,
    ctx: &PromptContext,
    task: TaskId,
    cfg: &EvalConfig,
) -> Result<MetricReport> {
    let params = TaskParams {
        seed: cfg.seed,
        ..cfg.params
    };
    let mut tables = RepresentationTables::new();
    let (metrics, samples, rejected) = if task == TaskId::SimilarSearch {
        let (m, n) = similar_search(model, bank, &mut tables, ds, ctx, cfg)?;
        (m, n, 0)
    } else {
        let samples = task_samples(ds, task, cfg.split);
        let batch = build_task_batch(ctx, task, &samples, ds, &params)?;
        if batch.prompts.is_empty() {
            return Err(Error::Input(format!("no usable {} samples for {task}", cfg.split)));
        }
        let out = run_prompts(model, bank, &mut tables, &batch.prompts, ds, cfg.batch_size)?;
        let metrics = score(task, &batch.prompts, &out, ds, cfg)?;
        (metrics, batch.prompts.len(), batch.rejected)
    };
    let report = MetricReport {
        task,
        split: cfg.split,
        seed: cfg.seed,
        params,
        metrics,
        samples,
        rejected,
        warning: (cfg.split == SplitName::Train).then(|| "evaluated on the training split".to_string()),
    };
    report.validate()?;
    Ok(report)
}

fn score(task: TaskId, prompts: &[PromptInstance], out: &Outputs, ds: &Dataset, cfg: &EvalConfig) -> Result<BTreeMap<String, f64>> {
    let stats = &ds.stats;
    match task {
        TaskId::NextHop => {
            let lists: Vec<Vec<usize>> = out.logits.iter().map(|r| rank_by_score(r)).collect();
            let truths: Vec<usize> = prompts.iter().map(|p| sequence_of(ds, p, task).segment_ids.last().copied().unwrap_or(0)).collect();
            ranking_metrics(&lists, &truths, cfg.k)
        }
        TaskId::Classification => {
            let preds: Vec<usize> = out.logits.iter().map(|r| argmax(r)).collect();
            let truths: Vec<usize> = prompts
                .iter()
                .map(|p| sequence_of(ds, p, task).label.unwrap_or(0))
                .collect();
            if stats.num_classes == 2 {
                let scores: Vec<f64> = out.logits.iter().map(|r| softmax_positive(r)).collect();
                classification_metrics(&preds, &truths, Some(&scores), ClassScheme::Binary)
            } else {
                classification_metrics(&preds, &truths, None, ClassScheme::Multiclass)
            }
        }
        TaskId::Tte => {
            // Interval 0 is zero by definition; predicted intervals are clamped at zero.
            let mut cursor = 0;
            let (mut pred_trip, mut true_trip) = (Vec::new(), Vec::new());
            let (mut pred_step, mut true_step) = (Vec::new(), Vec::new());
            for p in prompts {
                let seq = sequence_of(ds, p, task);
                let n = p.placeholders.len();
                let pred: Vec<f64> = out.time[cursor..cursor + n]
                    .iter()
                    .map(|&z| stats.interval.inverse(z).max(0.0) / 60.0)
                    .collect();
                cursor += n;
                let truth: Vec<f64> = seq.intervals.iter().map(|&d| d as f64 / 60.0).collect();
                pred_trip.push(pred[1..].iter().sum::<f64>());
                true_trip.push(truth[1..].iter().sum::<f64>());
                pred_step.extend_from_slice(&pred[1..]);
                true_step.extend_from_slice(&truth[1..]);
            }
            let mut m = BTreeMap::new();
            regression_metrics(&pred_trip, &true_trip)?.insert_into(&mut m, "");
            m.insert("interval_mae".into(), regression_metrics(&pred_step, &true_step)?.mae);
            Ok(m)
        }
        TaskId::OneStep | TaskId::MultiStep => {
            let h = if task == TaskId::OneStep {
                cfg.params.horizon_one_step
            } else {
                cfg.params.horizon_multi_step
            };
            let mut per_step: Vec<(Vec<f64>, Vec<f64>)> = vec![(Vec::new(), Vec::new()); h];
            let (mut all_p, mut all_t) = (Vec::new(), Vec::new());
            let mut cursor = 0;
            for p in prompts {
                let seq = sequence_of(ds, p, task);
                let len = seq.len();
                for (step, pos) in (len - h..len).enumerate() {
                    let pred = stats.destandardize_dynamic(&out.dynamic[cursor]);
                    cursor += 1;
                    let truth = raw_dynamic(seq, pos)?;
                    per_step[step].0.extend_from_slice(&pred);
                    per_step[step].1.extend_from_slice(&truth);
                    all_p.extend_from_slice(&pred);
                    all_t.extend_from_slice(&truth);
                }
            }
            let mut m = BTreeMap::new();
            regression_metrics(&all_p, &all_t)?.insert_into(&mut m, "");
            if h > 1 {
                for (step, (p, t)) in per_step.iter().enumerate() {
                    regression_metrics(p, t)?.insert_into(&mut m, &format!("@{}", step + 1));
                }
            }
            Ok(m)
        }
        TaskId::Imputation | TaskId::Recovery => assemble_masked(task, prompts, out, ds)?.metrics(),
        TaskId::SimilarSearch => Err(Error::Input("similar search has its own harness".into())),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum MaskedValues {
    /// Segment ids.
    Labels { preds: Vec<usize>, truths: Vec<usize> },
    /// Flattened dynamic vectors in original units.
    Values { preds: Vec<f64>, truths: Vec<f64> },
}

/// Full-length predictions and truths of recovery or imputation. Unmasked
/// entries hold the visible values and never enter a metric.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedOutputs {
    pub values: MaskedValues,
    pub mask: Vec<bool>,
}

impl MaskedOutputs {
    pub fn metrics(&self) -> Result<BTreeMap<String, f64>> {
        match &self.values {
            MaskedValues::Labels { preds, truths } => masked_classification_metrics(preds, truths, &self.mask),
            MaskedValues::Values { preds, truths } => {
                let mut m = BTreeMap::new();
                masked_regression_metrics(preds, truths, &self.mask)?.insert_into(&mut m, "");
                Ok(m)
            }
        }
    }
}

fn assemble_masked(task: TaskId, prompts: &[PromptInstance], out: &Outputs, ds: &Dataset) -> Result<MaskedOutputs> {
    let mut mask = Vec::new();
    let mut cursor = 0;
    let values = match task {
        TaskId::Recovery => {
            let (mut preds, mut truths) = (Vec::new(), Vec::new());
            for p in prompts {
                let seq = sequence_of(ds, p, task);
                for (pos, &truth) in seq.segment_ids.iter().enumerate() {
                    let masked = p.mask_positions.contains(&pos);
                    let pred = if masked {
                        cursor += 1;
                        argmax(&out.logits[cursor - 1])
                    } else {
                        truth
                    };
                    preds.push(pred);
                    truths.push(truth);
                    mask.push(masked);
                }
            }
            MaskedValues::Labels { preds, truths }
        }
        TaskId::Imputation => {
            let (mut preds, mut truths) = (Vec::new(), Vec::new());
            for p in prompts {
                let seq = sequence_of(ds, p, task);
                for pos in 0..seq.len() {
                    let truth = raw_dynamic(seq, pos)?;
                    let masked = p.mask_positions.contains(&pos);
                    let pred = if masked {
                        cursor += 1;
                        ds.stats.destandardize_dynamic(&out.dynamic[cursor - 1])
                    } else {
                        truth
                    };
                    preds.extend_from_slice(&pred);
                    truths.extend_from_slice(&truth);
                    mask.extend(std::iter::repeat_n(masked, truth.len()));
                }
            }
            MaskedValues::Values { preds, truths }
        }
        other => return Err(Error::Input(format!("{other} has no masked positions"))),
    };
    Ok(MaskedOutputs { values, mask })
}

/// Masked-position outputs of recovery or imputation on `cfg.split`.
pub fn masked_outputs(
    model: &StModel,
    bank: &FeatureBank,
    ds: &Dataset,
    ctx: &PromptContext,
    task: TaskId,
    cfg: &EvalConfig,
) -> Result<MaskedOutputs> {
    let params = TaskParams {
        seed: cfg.seed,
        ..cfg.params
    };
    let batch = build_task_batch(ctx, task, &task_samples(ds, task, cfg.split), ds, &params)?;
    if batch.prompts.is_empty() {
        return Err(Error::Input(format!("no usable {} samples for {task}", cfg.split)));
    }
    let out = run_prompts(model, bank, &mut RepresentationTables::new(), &batch.prompts, ds, cfg.batch_size)?;
    assemble_masked(task, &batch.prompts, &out, ds)
}

/// Every other point, starting with the first.
pub fn downsample_half(seq: &StUnitSequence) -> Result<StUnitSequence> {
    let positions: Vec<usize> = (0..seq.len()).step_by(2).collect();
    seq.select(&positions)
}

/// Mean of the backbone outputs over the ST positions of each sequence.
pub fn embed_sequences(
    model: &StModel,
    bank: &FeatureBank,
    tables: &mut RepresentationTables,
    ctx: &PromptContext,
    seqs: &[StUnitSequence],
    batch_size: usize,
) -> Result<Vec<Vec<f64>>> {
    let prompts = seqs
        .iter()
        .map(|s| build_prompt(ctx, TaskId::SimilarSearch, s, None, &TaskParams::default()))
        .collect::<Result<Vec<_>>>()?;
    let mut out = Vec::with_capacity(seqs.len());
    for chunk in prompts.chunks(batch_size.max(1)) {
        let units: Vec<_> = chunk.iter().map(|p| p.units.clone()).collect();
        let tokens = tables.tokenize(&model.tokenizer, bank, &units)?;
        let hidden = model.forward(chunk, &tokens)?;
        for b in 0..chunk.len() {
            let pooled: Tensor = hidden.v_st(b)?.mean(0)?;
            out.push(pooled.to_dtype(DType::F64)?.to_vec1::<f64>()?);
        }
    }
    Ok(out)
}

/// Queries come from the split; each one's truth is its half-downsampled
/// variant, hidden among distractor trajectories drawn from the rest of the
/// corpus.
fn similar_search(
    model: &StModel,
    bank: &FeatureBank,
    tables: &mut RepresentationTables,
    ds: &Dataset,
    ctx: &PromptContext,
    cfg: &EvalConfig,
) -> Result<(BTreeMap<String, f64>, usize)> {
    let sc = &cfg.similar;
    if sc.database_factor < 1 || sc.k_list.is_empty() {
        return Err(Error::Config("similar search needs database_factor >= 1 and a nonempty k_list".into()));
    }
    let split_ids: Vec<usize> = ds.trajectory_split.part(cfg.split).to_vec();
    let per_query = sc.database_factor - 1;
    let m = split_ids
        .len()
        .min(sc.max_queries)
        .min(ds.trajectories.len() / sc.database_factor);
    if m == 0 {
        return Err(Error::Input("too few trajectories for similar search".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(cfg.seed, 0, 900, 0));
    let mut query_ids: Vec<usize> = rand::seq::index::sample(&mut rng, split_ids.len(), m)
        .into_iter()
        .map(|i| split_ids[i])
        .collect();
    query_ids.sort_unstable();
    let others: Vec<usize> = (0..ds.trajectories.len()).filter(|i| query_ids.binary_search(i).is_err()).collect();
    let mut distractors: Vec<usize> = rand::seq::index::sample(&mut rng, others.len(), per_query * m)
        .into_iter()
        .map(|i| others[i])
        .collect();
    distractors.sort_unstable();

    let queries: Vec<StUnitSequence> = query_ids.iter().map(|&i| ds.trajectories[i].clone()).collect();
    let mut database: Vec<StUnitSequence> = queries.iter().map(downsample_half).collect::<Result<_>>()?;
    database.extend(distractors.iter().map(|&i| ds.trajectories[i].clone()));

    let mut qi = EmbeddingIndex::new("mean_st_output", true);
    for (id, v) in query_ids.iter().zip(embed_sequences(model, bank, tables, ctx, &queries, cfg.batch_size)?) {
        qi.insert(*id, v)?;
    }
    let mut di = EmbeddingIndex::new("mean_st_output", true);
    for (k, v) in embed_sequences(model, bank, tables, ctx, &database, cfg.batch_size)?.into_iter().enumerate() {
        di.insert(k, v)?;
    }
    let truths: BTreeMap<usize, usize> = query_ids.iter().enumerate().map(|(k, &id)| (id, k)).collect();
    Ok((eval_similar_search(&qi, &di, &truths, &sc.k_list)?, m))
}
