//! The full model: tokenizer, placeholder vectors, LoRA-adapted backbone and
//! shared task heads, organised into separately stored parameter groups.

mod transformer;

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use candle_core::{DType, Device, Tensor, Var};
use serde::{Deserialize, Serialize};

pub use transformer::{causal_bias, AdaptedLinear, Backbone, BackboneConfig, Block, LoraAdapter, LoraTarget};

use crate::data::io::{read_json, write_json};
use crate::data::DYNAMIC_DIM;
use crate::error::{Error, Result};
use crate::nn::{gelu, Init, Linear, ParamGroup};
use crate::prompting::{apply_masks, PlaceholderKind, PromptInstance};
use crate::tokenizer::{StTokenizer, TokenizerConfig};

pub const MODEL_CONFIG_FILE: &str = "model_config.json";
pub const GROUP_NAMES: [&str; 5] = ["base", "lora", "heads", "tokenizer", "placeholders"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub tokenizer: TokenizerConfig,
    pub backbone: BackboneConfig,
    /// Hidden width of the task heads; `None` makes each head one linear map.
    pub head_hidden: Option<usize>,
    pub num_segments: usize,
    pub vocab_size: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            tokenizer: TokenizerConfig::default(),
            backbone: BackboneConfig::default(),
            head_hidden: Some(128),
            num_segments: 50,
            vocab_size: 64,
            seed: 0,
        }
    }
}

/// Linear layers with GELU between consecutive ones.
#[derive(Debug, Clone)]
pub struct Head {
    pub layers: Vec<Linear>,
}

impl Head {
    fn new(group: &mut ParamGroup, prefix: &str, init: &mut Init, d_in: usize, hidden: Option<usize>, d_out: usize) -> Result<Self> {
        let layers = match hidden {
            Some(h) => vec![
                Linear::new(group, &format!("{prefix}.fc1"), init, d_in, h, true)?,
                Linear::new(group, &format!("{prefix}.fc2"), init, h, d_out, true)?,
            ],
            None => vec![Linear::new(group, &format!("{prefix}.fc"), init, d_in, d_out, true)?],
        };
        Ok(Self { layers })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for (k, layer) in self.layers.iter().enumerate() {
            h = layer.forward(&h)?;
            if k + 1 < self.layers.len() {
                h = gelu(&h)?;
            }
        }
        Ok(h)
    }
}

/// `MLP_c`, `MLP_t`, `MLP_r`, shared by every task of the matching output
/// kind.
#[derive(Debug, Clone)]
pub struct TaskHeads {
    pub classification: Head,
    pub time: Head,
    pub regression: Head,
}

impl TaskHeads {
    /// Segment logits, `(.., I)`.
    pub fn decode_classification(&self, z: &Tensor) -> Result<Tensor> {
        self.classification.forward(z)
    }

    /// Standardized interval, `(.., 1)`.
    pub fn decode_time(&self, z: &Tensor) -> Result<Tensor> {
        self.time.forward(z)
    }

    /// Standardized dynamic vector, `(.., D_d)`.
    pub fn decode_regression(&self, z: &Tensor) -> Result<Tensor> {
        self.regression.forward(z)
    }

    pub fn decode_st_unit(&self, z_clas: &Tensor, z_reg: &Tensor) -> Result<PredictedStUnit> {
        Ok(PredictedStUnit {
            logits: self.decode_classification(z_clas)?,
            dynamic: self.decode_regression(z_reg)?,
            time: self.decode_time(z_reg)?,
        })
    }
}

#[derive(Debug, Clone)]
pub struct PredictedStUnit {
    pub logits: Tensor,
    pub dynamic: Tensor,
    pub time: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Mrt,
    PromptTuning,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Mrt => "mrt",
            Stage::PromptTuning => "prompt_tuning",
        })
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mrt" => Ok(Stage::Mrt),
            "prompt_tuning" => Ok(Stage::PromptTuning),
            other => Err(Error::Config(format!("unknown training stage `{other}`"))),
        }
    }
}

/// Backbone output for a batch. Row `b` of `hidden` holds prompt `b`
/// right-padded to the batch length.
#[derive(Debug, Clone)]
pub struct BackboneOutput {
    pub hidden: Tensor,
    pub layouts: Vec<PromptLayout>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PromptLayout {
    pub text: usize,
    pub st: usize,
    pub task: usize,
}

impl PromptLayout {
    pub fn len(&self) -> usize {
        self.text + self.st + self.task
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl BackboneOutput {
    /// Result tokens `Z` of prompt `b`, `(|X^(tsk)|, D)`.
    pub fn z(&self, b: usize) -> Result<Tensor> {
        let l = self.layouts[b];
        Ok(self.hidden.get(b)?.narrow(0, l.text + l.st, l.task)?)
    }

    /// Remaining tokens `V` of prompt `b`, `(|X^(txt)| + |X^(st)|, D)`.
    pub fn v(&self, b: usize) -> Result<Tensor> {
        let l = self.layouts[b];
        Ok(self.hidden.get(b)?.narrow(0, 0, l.text + l.st)?)
    }

    /// `V` rows at ST positions only.
    pub fn v_st(&self, b: usize) -> Result<Tensor> {
        let l = self.layouts[b];
        Ok(self.hidden.get(b)?.narrow(0, l.text, l.st)?)
    }

    /// All `Z` rows of the batch in prompt order, with the placeholder kind
    /// of each row.
    pub fn z_all(&self) -> Result<Tensor> {
        let t = self.hidden.dim(1)?;
        let idx: Vec<u32> = self
            .layouts
            .iter()
            .enumerate()
            .flat_map(|(b, l)| (l.text + l.st..l.len()).map(move |p| (b * t + p) as u32))
            .collect();
        let d = self.hidden.dim(2)?;
        let flat = self.hidden.reshape((self.layouts.len() * t, d))?;
        let n = idx.len();
        Ok(flat.index_select(&Tensor::from_vec(idx, n, self.hidden.device())?, 0)?)
    }
}

#[derive(Debug, Clone)]
pub struct StModel {
    pub config: ModelConfig,
    pub tokenizer: StTokenizer,
    pub backbone: Backbone,
    pub heads: TaskHeads,
    pub cls: Var,
    pub reg: Var,
    pub mask: Var,
    heads_group: ParamGroup,
    placeholder_group: ParamGroup,
    dtype: DType,
    device: Device,
}

impl StModel {
    pub fn new(config: &ModelConfig, dtype: DType, device: &Device) -> Result<Self> {
        if config.tokenizer.token_dim != config.backbone.width {
            return Err(Error::Config(format!(
                "token width {} must equal backbone width {}",
                config.tokenizer.token_dim, config.backbone.width
            )));
        }
        if config.num_segments == 0 {
            return Err(Error::Config("model needs at least one segment".into()));
        }
        let mut init = Init::new(config.seed, dtype, device.clone());
        let tokenizer = StTokenizer::new(&config.tokenizer, config.num_segments, &mut init)?;
        let backbone = Backbone::new(&config.backbone, config.vocab_size, &mut init)?;
        let d = config.backbone.width;
        let mut heads_group = ParamGroup::new("heads");
        let heads = TaskHeads {
            classification: Head::new(&mut heads_group, "clas", &mut init, d, config.head_hidden, config.num_segments)?,
            time: Head::new(&mut heads_group, "time", &mut init, d, config.head_hidden, 1)?,
            regression: Head::new(&mut heads_group, "reg", &mut init, d, config.head_hidden, DYNAMIC_DIM)?,
        };
        let mut placeholder_group = ParamGroup::new("placeholders");
        let cls = placeholder_group.add("cls", init.normal(&[d], 0.02)?);
        let reg = placeholder_group.add("reg", init.normal(&[d], 0.02)?);
        let mask = placeholder_group.add("mask", init.normal(&[d], 0.02)?);
        Ok(Self {
            config: config.clone(),
            tokenizer,
            backbone,
            heads,
            cls,
            reg,
            mask,
            heads_group,
            placeholder_group,
            dtype,
            device: device.clone(),
        })
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn groups(&self) -> [&ParamGroup; 5] {
        [
            self.backbone.base_group(),
            self.backbone.lora_group(),
            &self.heads_group,
            self.tokenizer.group(),
            &self.placeholder_group,
        ]
    }

    pub fn group(&self, name: &str) -> Result<&ParamGroup> {
        self.groups()
            .into_iter()
            .find(|g| g.name() == name)
            .ok_or_else(|| Error::Config(format!("no parameter group `{name}`")))
    }

    pub fn trainable_groups(&self, stage: Stage) -> Vec<&ParamGroup> {
        let mut out = vec![self.backbone.lora_group(), &self.heads_group, &self.placeholder_group];
        if stage == Stage::Mrt {
            out.push(self.tokenizer.group());
        }
        out
    }

    pub fn trainable_parameters(&self, stage: Stage) -> Vec<Var> {
        self.trainable_groups(stage).into_iter().flat_map(|g| g.vars()).collect()
    }

    fn placeholder_rows(&self, kinds: &[PlaceholderKind]) -> Result<Tensor> {
        let d = self.config.backbone.width;
        if kinds.is_empty() {
            return Ok(Tensor::zeros((0, d), self.dtype, &self.device)?);
        }
        let table = Tensor::stack(&[self.cls.as_tensor(), self.reg.as_tensor()], 0)?;
        let idx: Vec<u32> = kinds
            .iter()
            .map(|k| match k {
                PlaceholderKind::Cls => 0,
                PlaceholderKind::Reg => 1,
            })
            .collect();
        Ok(table.index_select(&Tensor::from_vec(idx, kinds.len(), &self.device)?, 0)?)
    }

    /// Embeds one prompt as `(len, D)`; `st` holds its unmasked ST tokens.
    pub fn embed_prompt(&self, prompt: &PromptInstance, st: &Tensor) -> Result<Tensor> {
        let (n, d) = st.dims2()?;
        if n != prompt.units.len() || d != self.config.backbone.width {
            return Err(Error::Shape(format!(
                "prompt expects ({}, {}) ST tokens, got ({n}, {d})",
                prompt.units.len(),
                self.config.backbone.width
            )));
        }
        let st = apply_masks(st, &prompt.mask_positions, self.mask.as_tensor())?;
        let text = self.backbone.embed_text(&prompt.text, &self.device)?;
        let tsk = self.placeholder_rows(&prompt.placeholders)?;
        Ok(Tensor::cat(&[&text, &st, &tsk], 0)?)
    }

    /// Runs a right-padded batch of prompts through the backbone.
    pub fn forward(&self, prompts: &[PromptInstance], st_tokens: &[Tensor]) -> Result<BackboneOutput> {
        self.forward_with(prompts, st_tokens, true)
    }

    pub fn forward_with(&self, prompts: &[PromptInstance], st_tokens: &[Tensor], use_lora: bool) -> Result<BackboneOutput> {
        if prompts.len() != st_tokens.len() || prompts.is_empty() {
            return Err(Error::Input(format!(
                "{} prompts with {} token sequences",
                prompts.len(),
                st_tokens.len()
            )));
        }
        let max = self.config.backbone.max_len;
        if let Some(p) = prompts.iter().find(|p| p.len() > max) {
            return Err(Error::Length { len: p.len(), max });
        }
        let t = prompts.iter().map(PromptInstance::len).max().unwrap_or(0);
        let d = self.config.backbone.width;
        let rows = prompts
            .iter()
            .zip(st_tokens)
            .map(|(p, st)| {
                let e = self.embed_prompt(p, st)?;
                if p.len() < t {
                    let pad = Tensor::zeros((t - p.len(), d), self.dtype, &self.device)?;
                    Ok(Tensor::cat(&[&e, &pad], 0)?)
                } else {
                    Ok(e)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let x = Tensor::stack(&rows, 0)?;
        let hidden = self.backbone.forward_embeddings(&x, use_lora)?;
        Ok(BackboneOutput {
            hidden,
            layouts: prompts
                .iter()
                .map(|p| PromptLayout {
                    text: p.text.len(),
                    st: p.units.len(),
                    task: p.placeholders.len(),
                })
                .collect(),
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_json(&self.config, &dir.join(MODEL_CONFIG_FILE))?;
        for g in self.groups() {
            g.save(&dir.join(format!("{}.safetensors", g.name())))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path, dtype: DType, device: &Device) -> Result<Self> {
        let cfg_path = dir.join(MODEL_CONFIG_FILE);
        if !cfg_path.exists() {
            return Err(Error::Dependency(cfg_path));
        }
        let config: ModelConfig = read_json(&cfg_path)?;
        let model = Self::new(&config, dtype, device)?;
        for g in model.groups() {
            g.load(&dir.join(format!("{}.safetensors", g.name())))?;
        }
        Ok(model)
    }
}
