//! Task-oriented prompts: instruction text, ST data with optional MASK
//! substitutions, and task placeholders with their supervision targets.

mod registry;

use std::str::FromStr;

use candle_core::{Tensor, D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use registry::{
    coarse_range, render_supplement, InstructionEntry, InstructionRegistry, SupplementField, TaskFamily, TaskId,
    Vocabulary, REGISTRY_FILE,
};

use crate::data::{SequenceKind, StUnitSequence, TripSummary, WorldStats, DYNAMIC_DIM};
use crate::error::{Error, Result};
use crate::tokenizer::{token_units, TimeView, TokenUnit};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PlaceholderKind {
    Cls,
    Reg,
}

/// Layout of a placeholder list.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlaceholderPattern {
    Cls,
    Reg,
    /// `(CLS, REG)` per masked unit.
    ReconstructionPair,
}

impl FromStr for PlaceholderPattern {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cls" => Ok(Self::Cls),
            "reg" => Ok(Self::Reg),
            "reconstruction_pair" => Ok(Self::ReconstructionPair),
            other => Err(Error::Input(format!("unknown placeholder kind `{other}`"))),
        }
    }
}

pub fn placeholder_sequence(pattern: PlaceholderPattern, count: usize) -> Vec<PlaceholderKind> {
    match pattern {
        PlaceholderPattern::Cls => vec![PlaceholderKind::Cls; count],
        PlaceholderPattern::Reg => vec![PlaceholderKind::Reg; count],
        PlaceholderPattern::ReconstructionPair => (0..count)
            .flat_map(|_| [PlaceholderKind::Cls, PlaceholderKind::Reg])
            .collect(),
    }
}

/// Supervision for one placeholder. Regression values are standardized.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Target {
    /// Segment id or class label for a CLS placeholder.
    Class(usize),
    /// Dynamic vector and/or interval for a REG placeholder.
    Regression {
        dynamic: Option<[f64; DYNAMIC_DIM]>,
        time: Option<f64>,
    },
}

/// Assembled prompt `(X^(txt), X^(st), X^(tsk))`.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptInstance {
    pub task: Option<TaskId>,
    pub sequence_id: usize,
    pub text: Vec<u32>,
    /// Tokenizer inputs for the ST part, MASK positions included.
    pub units: Vec<TokenUnit>,
    pub mask_positions: Vec<usize>,
    pub placeholders: Vec<PlaceholderKind>,
    /// One per placeholder; empty for untrained tasks.
    pub targets: Vec<Target>,
}

impl PromptInstance {
    pub fn len(&self) -> usize {
        self.text.len() + self.units.len() + self.placeholders.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Index of the first ST position in the concatenated stream.
    pub fn st_offset(&self) -> usize {
        self.text.len()
    }

    /// Index of the first placeholder in the concatenated stream.
    pub fn task_offset(&self) -> usize {
        self.text.len() + self.units.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TaskParams {
    pub horizon_one_step: usize,
    pub horizon_multi_step: usize,
    pub imputation_ratio: f64,
    pub recovery_ratio: f64,
    pub seed: u64,
}

impl Default for TaskParams {
    fn default() -> Self {
        Self {
            horizon_one_step: 1,
            horizon_multi_step: 6,
            imputation_ratio: 0.25,
            recovery_ratio: 0.90,
            seed: 0,
        }
    }
}

/// Frozen pieces shared by every prompt of a run.
#[derive(Debug, Clone)]
pub struct PromptContext {
    pub registry: InstructionRegistry,
    pub vocab: Vocabulary,
    pub stats: WorldStats,
}

impl PromptContext {
    pub fn new(registry: InstructionRegistry, stats: WorldStats) -> Self {
        let vocab = Vocabulary::from_registry(&registry);
        Self { registry, vocab, stats }
    }

    pub fn encode_instruction(&self, text: &str) -> Result<Vec<u32>> {
        self.vocab.encode(text)
    }

    pub fn instruction_text(&self, task: TaskId, trip: Option<&TripSummary>) -> Result<String> {
        let entry = self.registry.get(task)?;
        let supplement = render_supplement(&entry.supplement_fields, trip, &self.stats);
        Ok(if supplement.is_empty() {
            entry.instruction.clone()
        } else {
            format!("{} {}", entry.instruction, supplement)
        })
    }
}

/// `count` distinct positions drawn uniformly from `candidates`, ascending.
pub fn sample_positions(candidates: &[usize], count: usize, seed: u64) -> Result<Vec<usize>> {
    if count > candidates.len() {
        return Err(Error::Input(format!(
            "cannot mask {count} of {} positions",
            candidates.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked: Vec<usize> = rand::seq::index::sample(&mut rng, candidates.len(), count)
        .into_iter()
        .map(|i| candidates[i])
        .collect();
    picked.sort_unstable();
    Ok(picked)
}

/// Number of recovery masks: `round(r L)` capped so both endpoints stay.
pub fn recovery_mask_count(len: usize, ratio: f64) -> usize {
    ((ratio * len as f64).round() as usize).min(len.saturating_sub(2))
}

pub fn imputation_mask_count(len: usize, ratio: f64) -> usize {
    ((ratio * len as f64).round() as usize).min(len)
}

fn dynamic_target(seq: &StUnitSequence, pos: usize, stats: &WorldStats) -> Result<[f64; DYNAMIC_DIM]> {
    seq.units[pos]
        .dynamic
        .map(|d| stats.standardize_dynamic(d))
        .ok_or_else(|| Error::Input(format!("sequence {} has no dynamic features", seq.id)))
}

fn too_short(task: TaskId, seq: &StUnitSequence) -> Error {
    Error::Input(format!("sequence {} of length {} is too short for {task}", seq.id, seq.len()))
}

/// Builds the prompt of `task` for one sequence. `trip` feeds the
/// supplement and is ignored by tasks without one.
pub fn build_prompt(
    ctx: &PromptContext,
    task: TaskId,
    seq: &StUnitSequence,
    trip: Option<&TripSummary>,
    params: &TaskParams,
) -> Result<PromptInstance> {
    if seq.kind != task.modality() {
        return Err(Error::Modality {
            task: task.to_string(),
            expected: task.modality().to_string(),
            found: seq.kind.to_string(),
        });
    }
    let text = ctx.encode_instruction(&ctx.instruction_text(task, trip)?)?;
    let len = seq.len();
    let stats = &ctx.stats;
    let visible = token_units(seq, TimeView::Visible);
    let (units, mask_positions, placeholders, targets) = match task {
        TaskId::NextHop => {
            if len < 2 {
                return Err(too_short(task, seq));
            }
            let target = Target::Class(seq.segment_ids[len - 1]);
            (visible[..len - 1].to_vec(), vec![], vec![PlaceholderKind::Cls], vec![target])
        }
        TaskId::Classification => {
            let label = seq
                .label
                .ok_or_else(|| Error::Input(format!("sequence {} has no label", seq.id)))?;
            (visible, vec![], vec![PlaceholderKind::Cls], vec![Target::Class(label)])
        }
        TaskId::Tte => {
            let targets = seq
                .intervals
                .iter()
                .map(|&d| Target::Regression {
                    dynamic: None,
                    time: Some(stats.interval.forward(d as f64)),
                })
                .collect();
            (
                token_units(seq, TimeView::Masked),
                vec![],
                placeholder_sequence(PlaceholderPattern::Reg, len),
                targets,
            )
        }
        TaskId::OneStep | TaskId::MultiStep => {
            let h = if task == TaskId::OneStep {
                params.horizon_one_step
            } else {
                params.horizon_multi_step
            };
            if h == 0 || len <= h {
                return Err(too_short(task, seq));
            }
            let targets = (len - h..len)
                .map(|p| {
                    Ok(Target::Regression {
                        dynamic: Some(dynamic_target(seq, p, stats)?),
                        time: None,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            (
                visible[..len - h].to_vec(),
                vec![],
                placeholder_sequence(PlaceholderPattern::Reg, h),
                targets,
            )
        }
        TaskId::Imputation => {
            let m = imputation_mask_count(len, params.imputation_ratio);
            if m == 0 {
                return Err(too_short(task, seq));
            }
            let all: Vec<usize> = (0..len).collect();
            let positions = sample_positions(&all, m, params.seed)?;
            let targets = positions
                .iter()
                .map(|&p| {
                    Ok(Target::Regression {
                        dynamic: Some(dynamic_target(seq, p, stats)?),
                        time: None,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            (visible, positions, placeholder_sequence(PlaceholderPattern::Reg, m), targets)
        }
        TaskId::Recovery => {
            let m = recovery_mask_count(len, params.recovery_ratio);
            if m == 0 {
                return Err(too_short(task, seq));
            }
            let interior: Vec<usize> = (1..len - 1).collect();
            let positions = sample_positions(&interior, m, params.seed)?;
            let targets = positions.iter().map(|&p| Target::Class(seq.segment_ids[p])).collect();
            (visible, positions, placeholder_sequence(PlaceholderPattern::Cls, m), targets)
        }
        TaskId::SimilarSearch => (visible, vec![], vec![], vec![]),
    };
    Ok(PromptInstance {
        task: Some(task),
        sequence_id: seq.id,
        text,
        units,
        mask_positions,
        placeholders,
        targets,
    })
}

/// Reconstruction prompt: no text, `k` random MASKs and a `(CLS, REG)` pair
/// per mask. The REG target holds the dynamic vector when present and, for
/// trajectories, the standardized interval.
pub fn build_reconstruction_prompt(
    seq: &StUnitSequence,
    k: usize,
    seed: u64,
    stats: &WorldStats,
) -> Result<PromptInstance> {
    let len = seq.len();
    if k > len {
        return Err(Error::Input(format!("cannot mask {k} of {len} positions")));
    }
    let all: Vec<usize> = (0..len).collect();
    let positions = sample_positions(&all, k, seed)?;
    let mut targets = Vec::with_capacity(2 * k);
    for &p in &positions {
        targets.push(Target::Class(seq.segment_ids[p]));
        targets.push(Target::Regression {
            dynamic: seq.units[p].dynamic.map(|d| stats.standardize_dynamic(d)),
            time: (seq.kind == SequenceKind::Trajectory).then(|| stats.interval.forward(seq.intervals[p] as f64)),
        });
    }
    Ok(PromptInstance {
        task: None,
        sequence_id: seq.id,
        text: Vec::new(),
        units: token_units(seq, TimeView::Visible),
        mask_positions: positions,
        placeholders: placeholder_sequence(PlaceholderPattern::ReconstructionPair, k),
        targets,
    })
}

fn position_indicator(len: usize, positions: &[usize], tokens: &Tensor) -> Result<Tensor> {
    let mut flags = vec![0u8; len];
    for &p in positions {
        if p >= len {
            return Err(Error::Index(format!("mask position {p} out of range for length {len}")));
        }
        if flags[p] == 1 {
            return Err(Error::Index(format!("duplicate mask position {p}")));
        }
        flags[p] = 1;
    }
    let width = tokens.dim(D::Minus1)?;
    Ok(Tensor::from_vec(flags, (len, 1), tokens.device())?.broadcast_as((len, width))?)
}

/// Replaces rows at `positions` with `mask`. `tokens: (L, D)`, `mask: (D)`.
pub fn apply_masks(tokens: &Tensor, positions: &[usize], mask: &Tensor) -> Result<Tensor> {
    let (len, width) = tokens.dims2()?;
    if positions.is_empty() {
        return Ok(tokens.clone());
    }
    let flags = position_indicator(len, positions, tokens)?;
    let fill = mask.reshape((1, width))?.broadcast_as((len, width))?;
    Ok(flags.where_cond(&fill, tokens)?)
}

/// Restores the saved rows at `positions`.
pub fn unmask(masked: &Tensor, positions: &[usize], original: &Tensor) -> Result<Tensor> {
    let (len, _) = masked.dims2()?;
    if positions.is_empty() {
        return Ok(masked.clone());
    }
    let flags = position_indicator(len, positions, masked)?;
    Ok(flags.where_cond(original, masked)?)
}
