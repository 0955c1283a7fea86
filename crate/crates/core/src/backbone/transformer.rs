//! Pre-LN causal transformer with low-rank adapters on selected projections.

use std::str::FromStr;

use candle_core::{DType, Device, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{gelu, mask_bias, softmax_last, Init, LayerNorm, Linear, ParamGroup};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoraTarget {
    Q,
    K,
    V,
    Ffn,
}

impl FromStr for LoraTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "q" => Ok(Self::Q),
            "k" => Ok(Self::K),
            "v" => Ok(Self::V),
            "ffn" => Ok(Self::Ffn),
            other => Err(Error::Config(format!("unknown LoRA target `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    pub layers: usize,
    pub heads: usize,
    pub width: usize,
    pub ffn_width: usize,
    pub max_len: usize,
    /// Fraction `n` of blocks, counted from the input side, that carry
    /// adapters.
    pub attach_rate: f64,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub lora_targets: Vec<LoraTarget>,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            heads: 4,
            width: 128,
            ffn_width: 512,
            max_len: 192,
            attach_rate: 1.0,
            lora_rank: 8,
            lora_alpha: 8.0,
            lora_targets: vec![LoraTarget::Q, LoraTarget::K, LoraTarget::V, LoraTarget::Ffn],
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.width == 0 || self.ffn_width == 0 || self.max_len == 0 {
            return Err(Error::Config("backbone sizes must be positive".into()));
        }
        if self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::Config(format!(
                "width {} is not divisible by {} heads",
                self.width, self.heads
            )));
        }
        if !(self.attach_rate > 0.0 && self.attach_rate <= 1.0) {
            return Err(Error::Config("attach_rate must lie in (0, 1]".into()));
        }
        if self.lora_rank < 1 {
            return Err(Error::Config("lora_rank must be at least 1".into()));
        }
        Ok(())
    }

    /// `ceil(n * layers)`.
    pub fn adapted_blocks(&self) -> usize {
        ((self.attach_rate * self.layers as f64) - 1e-9).ceil().max(1.0) as usize
    }

    pub fn lora_scale(&self) -> f64 {
        self.lora_alpha / self.lora_rank as f64
    }
}

/// `A: (r, d_in)` random, `B: (d_out, r)` zero.
#[derive(Debug, Clone)]
pub struct LoraAdapter {
    pub a: Var,
    pub b: Var,
    pub scale: f64,
}

impl LoraAdapter {
    pub fn new(group: &mut ParamGroup, prefix: &str, init: &mut Init, d_in: usize, d_out: usize, rank: usize, scale: f64) -> Result<Self> {
        let a = group.add(format!("{prefix}.lora_a"), init.uniform(&[rank, d_in], (1.0 / d_in as f64).sqrt())?);
        let b = group.add(format!("{prefix}.lora_b"), init.constant(&[d_out, rank], 0.0)?);
        Ok(Self { a, b, scale })
    }

    /// `scale * x A^T B^T`.
    pub fn delta(&self, x: &Tensor) -> Result<Tensor> {
        let low = x.broadcast_matmul(&self.a.as_tensor().t()?)?;
        Ok((low.broadcast_matmul(&self.b.as_tensor().t()?)? * self.scale)?)
    }
}

/// Frozen projection plus an optional adapter.
#[derive(Debug, Clone)]
pub struct AdaptedLinear {
    pub base: Linear,
    pub lora: Option<LoraAdapter>,
}

impl AdaptedLinear {
    pub fn forward(&self, x: &Tensor, use_lora: bool) -> Result<Tensor> {
        let y = self.base.forward(x)?;
        match (&self.lora, use_lora) {
            (Some(l), true) => Ok((y + l.delta(x)?)?),
            _ => Ok(y),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Block {
    pub ln1: LayerNorm,
    pub q: AdaptedLinear,
    pub k: AdaptedLinear,
    pub v: AdaptedLinear,
    pub o: Linear,
    pub ln2: LayerNorm,
    pub fc1: AdaptedLinear,
    pub fc2: AdaptedLinear,
    heads: usize,
}

impl Block {
    fn attention(&self, x: &Tensor, bias: &Tensor, use_lora: bool) -> Result<Tensor> {
        let (b, t, d) = x.dims3()?;
        let hd = d / self.heads;
        let split = |y: Tensor| -> Result<Tensor> {
            Ok(y.reshape((b, t, self.heads, hd))?.transpose(1, 2)?.contiguous()?)
        };
        let q = split(self.q.forward(x, use_lora)?)?;
        let k = split(self.k.forward(x, use_lora)?)?;
        let v = split(self.v.forward(x, use_lora)?)?;
        let scores = (q.matmul(&k.transpose(2, 3)?.contiguous()?)? / (hd as f64).sqrt())?.broadcast_add(bias)?;
        let att = softmax_last(&scores)?;
        let y = att.matmul(&v)?.transpose(1, 2)?.contiguous()?.reshape((b, t, d))?;
        self.o.forward(&y)
    }

    pub fn forward(&self, x: &Tensor, bias: &Tensor, use_lora: bool) -> Result<Tensor> {
        let x = (x + self.attention(&self.ln1.forward(x)?, bias, use_lora)?)?;
        let h = gelu(&self.fc1.forward(&self.ln2.forward(&x)?, use_lora)?)?;
        Ok((&x + self.fc2.forward(&h, use_lora)?)?)
    }
}

/// Frozen base transformer with its adapters. Base weights live in the
/// `base` group and never receive gradients; adapters live in `lora`.
#[derive(Debug, Clone)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub wte: Var,
    pub wpe: Var,
    pub blocks: Vec<Block>,
    pub ln_f: LayerNorm,
    base: ParamGroup,
    lora: ParamGroup,
}

impl Backbone {
    pub fn new(config: &BackboneConfig, vocab_size: usize, init: &mut Init) -> Result<Self> {
        config.validate()?;
        let mut base = ParamGroup::new("base");
        let mut lora = ParamGroup::new("lora");
        let d = config.width;
        let wte = base.add("wte", init.normal(&[vocab_size, d], 0.02)?);
        let wpe = base.add("wpe", init.normal(&[config.max_len, d], 0.02)?);
        let adapted = config.adapted_blocks();
        let scale = config.lora_scale();
        let mut blocks = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let p = format!("h{l}");
            let mut proj = |name: &str, d_in: usize, d_out: usize, target: LoraTarget, init: &mut Init| -> Result<AdaptedLinear> {
                let key = format!("{p}.{name}");
                let base_lin = Linear::new(&mut base, &key, init, d_in, d_out, true)?.frozen();
                let lora_mod = if l < adapted && config.lora_targets.contains(&target) {
                    Some(LoraAdapter::new(&mut lora, &key, init, d_in, d_out, config.lora_rank, scale)?)
                } else {
                    None
                };
                Ok(AdaptedLinear {
                    base: base_lin,
                    lora: lora_mod,
                })
            };
            let q = proj("attn.q", d, d, LoraTarget::Q, init)?;
            let k = proj("attn.k", d, d, LoraTarget::K, init)?;
            let v = proj("attn.v", d, d, LoraTarget::V, init)?;
            let fc1 = proj("mlp.fc1", d, config.ffn_width, LoraTarget::Ffn, init)?;
            let fc2 = proj("mlp.fc2", config.ffn_width, d, LoraTarget::Ffn, init)?;
            let o = Linear::new(&mut base, &format!("{p}.attn.o"), init, d, d, true)?.frozen();
            let ln1 = LayerNorm::new(&mut base, &format!("{p}.ln1"), init, d)?.frozen();
            let ln2 = LayerNorm::new(&mut base, &format!("{p}.ln2"), init, d)?.frozen();
            blocks.push(Block {
                ln1,
                q,
                k,
                v,
                o,
                ln2,
                fc1,
                fc2,
                heads: config.heads,
            });
        }
        let ln_f = LayerNorm::new(&mut base, "ln_f", init, d)?.frozen();
        Ok(Self {
            config: config.clone(),
            wte,
            wpe,
            blocks,
            ln_f,
            base,
            lora,
        })
    }

    pub fn base_group(&self) -> &ParamGroup {
        &self.base
    }

    pub fn lora_group(&self) -> &ParamGroup {
        &self.lora
    }

    pub fn adapters(&self) -> Vec<&LoraAdapter> {
        self.blocks
            .iter()
            .flat_map(|b| [&b.q, &b.k, &b.v, &b.fc1, &b.fc2])
            .filter_map(|p| p.lora.as_ref())
            .collect()
    }

    /// Frozen word embeddings for `ids`, `(len, D)`.
    pub fn embed_text(&self, ids: &[u32], device: &Device) -> Result<Tensor> {
        let vocab = self.wte.dims()[0];
        if let Some(&bad) = ids.iter().find(|&&i| i as usize >= vocab) {
            return Err(Error::Index(format!("text id {bad} outside vocabulary of {vocab}")));
        }
        let idx = Tensor::from_vec(ids.to_vec(), ids.len(), device)?;
        Ok(self.wte.as_detached_tensor().index_select(&idx, 0)?)
    }

    /// Runs the stack over `(B, T, D)` embeddings under a causal mask.
    pub fn forward_embeddings(&self, x: &Tensor, use_lora: bool) -> Result<Tensor> {
        let (_, t, d) = x.dims3()?;
        if d != self.config.width {
            return Err(Error::Shape(format!("token width {d} differs from model width {}", self.config.width)));
        }
        if t > self.config.max_len {
            return Err(Error::Length {
                len: t,
                max: self.config.max_len,
            });
        }
        let pos = self.wpe.as_detached_tensor().narrow(0, 0, t)?;
        let mut h = x.broadcast_add(&pos)?;
        let bias = causal_bias(t, x.dtype(), x.device())?;
        for block in &self.blocks {
            h = block.forward(&h, &bias, use_lora)?;
        }
        self.ln_f.forward(&h)
    }
}

pub fn causal_bias(t: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let mask: Vec<u8> = (0..t).flat_map(|i| (0..t).map(move |j| u8::from(j <= i))).collect();
    mask_bias(&mask, t, t, dtype, device)
}
