//! Experiment configuration, run-directory layout and the stage functions
//! behind the command-line tool.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::{DType, Device};
use log::info;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{BackboneConfig, ModelConfig, StModel, MODEL_CONFIG_FILE};
use crate::data::io::{read_json, read_world, write_json, write_world};
use crate::data::{generate_synthetic_world, Dataset, DatasetConfig, World, WorldConfig};
use crate::error::{Error, Result};
use crate::evaluation::{eval_task, EvalConfig, MetricReport};
use crate::prompting::{InstructionRegistry, PromptContext, TaskId, REGISTRY_FILE};
use crate::tokenizer::{FeatureBank, TokenizerConfig};
use crate::training::{run_mrt_stage, run_prompt_tuning, write_trace, MrtConfig, MrtReport, TaskShare, TuneConfig, TuneReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Self::F32 => DType::F32,
            Self::F64 => DType::F64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Replaces `world` when set; relative paths resolve against the
    /// config file's directory.
    pub world_config: Option<PathBuf>,
    pub world: WorldConfig,
    pub dataset: DatasetConfig,
    pub tokenizer: TokenizerConfig,
    pub backbone: BackboneConfig,
    pub head_hidden: Option<usize>,
    pub mrt: MrtConfig,
    pub tune: TuneConfig,
    pub eval: EvalConfig,
    /// Tasks scored by `eval` when none is named.
    pub eval_tasks: Vec<TaskId>,
    pub seed: u64,
    pub precision: Precision,
    pub out: Option<PathBuf>,
    pub serial_mode: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            world_config: None,
            world: WorldConfig::default(),
            dataset: DatasetConfig::default(),
            tokenizer: TokenizerConfig::default(),
            backbone: BackboneConfig::default(),
            head_hidden: Some(128),
            mrt: MrtConfig::default(),
            tune: TuneConfig::default(),
            eval: EvalConfig::default(),
            eval_tasks: TaskId::ALL.to_vec(),
            seed: 0,
            precision: Precision::F32,
            out: None,
            serial_mode: false,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::Config(format!("config file {} does not exist", path.display())));
        }
        let mut cfg: Self = read_json(path)?;
        if let Some(rel) = cfg.world_config.take() {
            let world_path = if rel.is_absolute() {
                rel
            } else {
                path.parent().unwrap_or(Path::new(".")).join(rel)
            };
            if !world_path.exists() {
                return Err(Error::Config(format!("world config {} does not exist", world_path.display())));
            }
            cfg.world = read_json(&world_path)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.tokenizer.validate()?;
        self.backbone.validate()?;
        self.tune.validate()?;
        self.mrt.weights.validate()?;
        if self.tokenizer.token_dim != self.backbone.width {
            return Err(Error::Config(format!(
                "token_dim {} must equal backbone width {}",
                self.tokenizer.token_dim, self.backbone.width
            )));
        }
        if self.eval_tasks.is_empty() {
            return Err(Error::Config("eval_tasks is empty".into()));
        }
        Ok(())
    }

    /// Spreads the master seed over every seeded component.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.world.seed = seed;
        self.mrt.seed = seed;
        self.tune.seed = seed;
        self.tune.params.seed = seed;
        self.eval.seed = seed;
        self
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> Result<String> {
        let body = serde_json::to_vec(self)?;
        Ok(hex::encode(Sha256::digest(&body)))
    }

    pub fn dtype(&self) -> DType {
        self.precision.dtype()
    }
}

/// File locations inside a run directory.
#[derive(Debug, Clone)]
pub struct RunLayout {
    pub root: PathBuf,
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CONFIG_FILE: &str = "config.json";
pub const SUMMARY_FILE: &str = "summary.json";

impl RunLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn checkpoint(&self, stage: &str) -> PathBuf {
        self.root.join("checkpoints").join(stage)
    }

    pub fn traces(&self) -> PathBuf {
        self.root.join("traces")
    }

    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }

    pub fn report(&self, task: TaskId) -> PathBuf {
        self.reports().join(format!("{task}.json"))
    }

    pub fn plots(&self) -> PathBuf {
        self.root.join("plots")
    }

    pub fn summary(&self) -> PathBuf {
        self.root.join(SUMMARY_FILE)
    }

    pub fn manifest(&self) -> PathBuf {
        self.root.join(MANIFEST_FILE)
    }

    pub fn config(&self) -> PathBuf {
        self.root.join(CONFIG_FILE)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub config_hash: String,
    pub checkpoint: Option<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub wall_clock_s: f64,
}

/// Provenance of a run directory; `config_hash` is the hash of the stored
/// `config.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub code_version: String,
    pub stages: BTreeMap<String, StageRecord>,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        read_json(path)
    }

    /// Writes through a temporary file and a rename.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("json.tmp");
        write_json(self, &tmp)?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    /// Checks `config_hash` against the config stored beside the manifest.
    pub fn verify(&self, layout: &RunLayout) -> Result<()> {
        let stored: ExperimentConfig = read_json(&layout.config())?;
        let hash = stored.hash()?;
        if hash != self.config_hash {
            return Err(Error::Config(format!(
                "manifest hash {} does not match stored config hash {hash}",
                self.config_hash
            )));
        }
        Ok(())
    }
}

/// Stores `cfg` and folds `record` into the manifest.
fn record_stage(layout: &RunLayout, cfg: &ExperimentConfig, stage: &str, mut record: StageRecord) -> Result<()> {
    fs::create_dir_all(&layout.root).map_err(|e| Error::io(&layout.root, e))?;
    let hash = cfg.hash()?;
    record.config_hash = hash.clone();
    let mut manifest = if layout.manifest().exists() {
        RunManifest::load(&layout.manifest())?
    } else {
        RunManifest {
            config_hash: hash.clone(),
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            stages: BTreeMap::new(),
        }
    };
    manifest.config_hash = hash;
    manifest.code_version = env!("CARGO_PKG_VERSION").to_string();
    manifest.stages.insert(stage.to_string(), record);
    let tmp = layout.config().with_extension("json.tmp");
    write_json(cfg, &tmp)?;
    fs::rename(&tmp, layout.config()).map_err(|e| Error::io(layout.config(), e))?;
    manifest.save(&layout.manifest())
}

fn require(path: PathBuf) -> Result<PathBuf> {
    if path.exists() {
        Ok(path)
    } else {
        Err(Error::Dependency(path))
    }
}

fn dir_is_nonempty(dir: &Path) -> bool {
    fs::read_dir(dir).map(|mut d| d.next().is_some()).unwrap_or(false)
}

fn record(checkpoint: Option<PathBuf>, outputs: Vec<PathBuf>, started: Instant) -> StageRecord {
    StageRecord {
        config_hash: String::new(),
        checkpoint,
        outputs,
        wall_clock_s: started.elapsed().as_secs_f64(),
    }
}

/// Generates the synthetic world into `data/`.
pub fn gen_data(cfg: &ExperimentConfig, layout: &RunLayout, force: bool) -> Result<World> {
    let started = Instant::now();
    let dir = layout.data();
    if dir_is_nonempty(&dir) && !force {
        return Err(Error::Config(format!("{} is not empty; pass --force to overwrite", dir.display())));
    }
    let world = generate_synthetic_world(&cfg.world, cfg.world.seed)?;
    write_world(&world, &dir)?;
    info!("wrote {} trajectories to {}", world.trajectories.len(), dir.display());
    record_stage(layout, cfg, "gen_data", record(None, vec![dir], started))?;
    Ok(world)
}

/// World, dataset, prompt context and feature bank of a run.
pub struct Loaded {
    pub world: World,
    pub dataset: Dataset,
    pub context: PromptContext,
    pub bank: FeatureBank,
}

pub fn load_data(cfg: &ExperimentConfig, layout: &RunLayout) -> Result<Loaded> {
    let dir = layout.data();
    require(dir.join(crate::data::io::WORLD_CONFIG_FILE))?;
    require(dir.join(crate::data::io::NETWORK_FILE))?;
    require(dir.join(crate::data::io::TRAJECTORY_FILE))?;
    let world = read_world(&dir)?;
    let dataset = Dataset::build(&world, &cfg.dataset)?;
    let context = PromptContext::new(InstructionRegistry::default(), dataset.stats.clone());
    let bank = FeatureBank::new(
        &world.network,
        &world.store,
        &dataset.stats,
        cfg.tokenizer.window,
        cfg.dtype(),
        &Device::Cpu,
    )?;
    Ok(Loaded {
        world,
        dataset,
        context,
        bank,
    })
}

pub fn model_config(cfg: &ExperimentConfig, data: &Loaded) -> ModelConfig {
    ModelConfig {
        tokenizer: cfg.tokenizer.clone(),
        backbone: cfg.backbone.clone(),
        head_hidden: cfg.head_hidden,
        num_segments: data.world.network.num_segments(),
        vocab_size: data.context.vocab.len(),
        seed: cfg.seed,
    }
}

fn save_checkpoint(model: &StModel, dir: &Path, ctx: &PromptContext) -> Result<()> {
    model.save(dir)?;
    ctx.registry.save(&dir.join(REGISTRY_FILE))
}

fn load_checkpoint(cfg: &ExperimentConfig, dir: &Path) -> Result<StModel> {
    require(dir.join(MODEL_CONFIG_FILE))?;
    StModel::load(dir, cfg.dtype(), &Device::Cpu)
}

/// Stage 1 from fresh initialization.
pub fn pretrain(cfg: &ExperimentConfig, layout: &RunLayout) -> Result<MrtReport> {
    let started = Instant::now();
    let data = load_data(cfg, layout)?;
    let model = StModel::new(&model_config(cfg, &data), cfg.dtype(), &Device::Cpu)?;
    let report = run_mrt_stage(&model, &data.bank, &data.dataset, &cfg.mrt)?;
    let ckpt = layout.checkpoint("pretrain");
    save_checkpoint(&model, &ckpt, &data.context)?;
    fs::create_dir_all(layout.traces()).map_err(|e| Error::io(layout.traces(), e))?;
    let trace = layout.traces().join("mrt.csv");
    write_trace(&report.trace(), &trace)?;
    record_stage(layout, cfg, "pretrain", record(Some(ckpt), vec![trace], started))?;
    Ok(report)
}

/// Stage 2 from the stage-1 checkpoint.
pub fn tune(cfg: &ExperimentConfig, layout: &RunLayout) -> Result<TuneReport> {
    let started = Instant::now();
    let model = load_checkpoint(cfg, &layout.checkpoint("pretrain"))?;
    let data = load_data(cfg, layout)?;
    let report = run_prompt_tuning(&model, &data.bank, &data.dataset, &data.context, &cfg.tune)?;
    let ckpt = layout.checkpoint("tuned");
    save_checkpoint(&model, &ckpt, &data.context)?;
    fs::create_dir_all(layout.traces()).map_err(|e| Error::io(layout.traces(), e))?;
    let trace = layout.traces().join("tune.csv");
    write_trace(&report.trace, &trace)?;
    record_stage(layout, cfg, "tune", record(Some(ckpt), vec![trace], started))?;
    Ok(report)
}

/// Co-trains `tasks` and, separately, each task alone, every run starting
/// from the stage-1 checkpoint. Keys are `co_trained` and the task names.
pub fn tune_ablation(cfg: &ExperimentConfig, layout: &RunLayout, tasks: &[TaskId]) -> Result<BTreeMap<String, TuneReport>> {
    let started = Instant::now();
    let data = load_data(cfg, layout)?;
    let mut runs: Vec<(String, Vec<TaskId>)> = vec![("co_trained".into(), tasks.to_vec())];
    runs.extend(tasks.iter().map(|t| (t.to_string(), vec![*t])));
    fs::create_dir_all(layout.traces()).map_err(|e| Error::io(layout.traces(), e))?;
    let mut out = BTreeMap::new();
    let mut outputs = Vec::new();
    for (name, mix) in runs {
        let model = load_checkpoint(cfg, &layout.checkpoint("pretrain"))?;
        let tune_cfg = TuneConfig {
            task_mix: mix
                .iter()
                .map(|&task| TaskShare { task, proportion: 1.0 })
                .collect(),
            ..cfg.tune.clone()
        };
        let report = run_prompt_tuning(&model, &data.bank, &data.dataset, &data.context, &tune_cfg)?;
        let trace = layout.traces().join(format!("ablation_{name}.csv"));
        write_trace(&report.trace, &trace)?;
        outputs.push(trace);
        out.insert(name, report);
    }
    record_stage(layout, cfg, "ablation", record(None, outputs, started))?;
    Ok(out)
}

/// Scores `tasks` with the tuned checkpoint.
pub fn evaluate(cfg: &ExperimentConfig, layout: &RunLayout, tasks: &[TaskId]) -> Result<Vec<MetricReport>> {
    let started = Instant::now();
    let model = load_checkpoint(cfg, &layout.checkpoint("tuned"))?;
    let data = load_data(cfg, layout)?;
    fs::create_dir_all(layout.reports()).map_err(|e| Error::io(layout.reports(), e))?;
    let mut reports = Vec::with_capacity(tasks.len());
    let mut outputs = Vec::new();
    for &task in tasks {
        let r = eval_task(&model, &data.bank, &data.dataset, &data.context, task, &cfg.eval)?;
        let path = layout.report(task);
        r.save(&path)?;
        info!("{task}: {:?}", r.metrics);
        outputs.push(path);
        reports.push(r);
    }
    record_stage(layout, cfg, "eval", record(Some(layout.checkpoint("tuned")), outputs, started))?;
    Ok(reports)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub reports: BTreeMap<String, MetricReport>,
}

/// Collects every report under `reports/` into `summary.json`.
pub fn summarize(cfg: &ExperimentConfig, layout: &RunLayout) -> Result<Summary> {
    let started = Instant::now();
    let dir = require(layout.reports())?;
    let mut paths: Vec<PathBuf> = fs::read_dir(&dir)
        .map_err(|e| Error::io(&dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Dependency(dir.join("<task>.json")));
    }
    let mut reports = BTreeMap::new();
    for p in &paths {
        let r = MetricReport::load(p)?;
        reports.insert(r.task.to_string(), r);
    }
    let summary = Summary { reports };
    write_json(&summary, &layout.summary())?;
    record_stage(layout, cfg, "report", record(None, vec![layout.summary()], started))?;
    Ok(summary)
}

/// Data generation, both stages, evaluation and the summary.
pub fn run_all(cfg: &ExperimentConfig, layout: &RunLayout, force: bool) -> Result<Summary> {
    gen_data(cfg, layout, force)?;
    pretrain(cfg, layout)?;
    tune(cfg, layout)?;
    evaluate(cfg, layout, &cfg.eval_tasks)?;
    summarize(cfg, layout)
}

#[cfg(test)]
mod tests;
