//! Spatiotemporal tokenizer.
//!
//! Static features go through a GAT and an FFN (`H^(s)`); per-slice history
//! windows of traffic states go through a second GAT and FFN (`H^(d)_t`).
//! Learnable per-segment queries cross-attend over the concatenated
//! `(h^(s)_j || h^(d)_{j,t})` to give the fused table `S_t`, and an MLP maps
//! `(s_{i,t} || iota || delta)` to an ST token.

mod bank;
mod gat;

use std::collections::{BTreeMap, BTreeSet};

use candle_core::{Tensor, Var, D};
use serde::{Deserialize, Serialize};

pub use bank::{temporal_input, token_units, FeatureBank, TimeView, TokenUnit, DELTA_CHANNEL, TIME_DIM};
pub use gat::{Gat, GatLayer};

use crate::data::STATIC_DIM;
use crate::error::{Error, Result};
use crate::nn::{softmax_last, Init, Mlp, ParamGroup};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TokenizerConfig {
    /// `D_h`, width of static and dynamic representations.
    pub hidden: usize,
    /// `T'`, number of history slices before the current one.
    pub window: usize,
    pub gat_layers: usize,
    pub gat_heads: usize,
    /// Width of the produced ST tokens; must equal the backbone width.
    pub token_dim: usize,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            window: 6,
            gat_layers: 2,
            gat_heads: 2,
            token_dim: 128,
        }
    }
}

impl TokenizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window < 1 {
            return Err(Error::Config("dynamic window T' must be at least 1".into()));
        }
        if self.hidden == 0 || self.token_dim == 0 || self.gat_layers == 0 {
            return Err(Error::Config("tokenizer widths and depth must be positive".into()));
        }
        if self.gat_heads == 0 || self.hidden % self.gat_heads != 0 {
            return Err(Error::Config("hidden width must be divisible by gat_heads".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct StTokenizer {
    pub config: TokenizerConfig,
    pub static_gat: Gat,
    pub static_ffn: Mlp,
    pub dynamic_gat: Gat,
    pub dynamic_ffn: Mlp,
    /// `W_Q`, one query row of width `2 D_h` per segment.
    pub queries: Var,
    /// Dynamic representation used when the modality is absent.
    pub missing: Var,
    pub token_mlp: Mlp,
    group: ParamGroup,
    num_segments: usize,
}

impl StTokenizer {
    pub fn new(config: &TokenizerConfig, num_segments: usize, init: &mut Init) -> Result<Self> {
        config.validate()?;
        let mut group = ParamGroup::new("tokenizer");
        let h = config.hidden;
        let window_width = crate::data::DYNAMIC_DIM * (config.window + 1);
        let g = &mut group;
        let static_gat = Gat::new(g, "static_gat", init, STATIC_DIM, h, config.gat_heads, config.gat_layers)?;
        let static_ffn = Mlp::new(g, "static_ffn", init, h, h, h)?;
        let dynamic_gat = Gat::new(g, "dynamic_gat", init, window_width, h, config.gat_heads, config.gat_layers)?;
        let dynamic_ffn = Mlp::new(g, "dynamic_ffn", init, h, h, h)?;
        let queries = g.add("fusion.queries", init.normal(&[num_segments, 2 * h], 1.0 / (2.0 * h as f64).sqrt())?);
        let missing = g.add("dynamic_missing", init.normal(&[h], 0.02)?);
        let token_mlp = Mlp::new(g, "token_mlp", init, 2 * h + TIME_DIM, config.token_dim, config.token_dim)?;
        Ok(Self {
            config: config.clone(),
            static_gat,
            static_ffn,
            dynamic_gat,
            dynamic_ffn,
            queries,
            missing,
            token_mlp,
            group,
            num_segments,
        })
    }

    pub fn group(&self) -> &ParamGroup {
        &self.group
    }

    pub fn num_segments(&self) -> usize {
        self.num_segments
    }

    fn check_bank(&self, bank: &FeatureBank) -> Result<()> {
        if bank.num_segments() != self.num_segments {
            return Err(Error::Shape(format!(
                "tokenizer built for {} segments, bank has {}",
                self.num_segments,
                bank.num_segments()
            )));
        }
        if bank.window() != self.config.window {
            return Err(Error::Shape(format!(
                "tokenizer window {} differs from bank window {}",
                self.config.window,
                bank.window()
            )));
        }
        Ok(())
    }

    /// `H^(s) = FFN(GAT_s(E^(s), G))` plus the per-layer attention weights.
    pub fn encode_static_with_attention(&self, bank: &FeatureBank) -> Result<(Tensor, Vec<Tensor>)> {
        self.check_bank(bank)?;
        let x = bank.static_rows().unsqueeze(0)?;
        let (h, atts) = self.static_gat.forward(&x, bank.neighbor_bias())?;
        Ok((self.static_ffn.forward(&h)?.squeeze(0)?, atts))
    }

    pub fn encode_static(&self, bank: &FeatureBank) -> Result<Tensor> {
        Ok(self.encode_static_with_attention(bank)?.0)
    }

    /// `H^(d)_t` for each requested slice, `(S, I, D_h)`.
    pub fn encode_dynamic_with_attention(&self, bank: &FeatureBank, slices: &[i64]) -> Result<(Tensor, Vec<Tensor>)> {
        self.check_bank(bank)?;
        if !bank.has_dynamic() {
            let h = self.config.hidden;
            let t = self
                .missing
                .as_tensor()
                .reshape((1, 1, h))?
                .broadcast_as((slices.len(), self.num_segments, h))?
                .contiguous()?;
            return Ok((t, Vec::new()));
        }
        let x = bank.window_features(slices)?;
        let (h, atts) = self.dynamic_gat.forward(&x, bank.neighbor_bias())?;
        Ok((self.dynamic_ffn.forward(&h)?, atts))
    }

    pub fn encode_dynamic(&self, bank: &FeatureBank, slices: &[i64]) -> Result<Tensor> {
        Ok(self.encode_dynamic_with_attention(bank, slices)?.0)
    }

    /// Cross-attention fusion. `hs: (I, D_h)`, `hd: (S, I, D_h)` →
    /// `(S_t: (S, I, 2 D_h), ATT: (S, I, I))` with
    /// `ATT = softmax(W_Q h_t^T / sqrt(2 D_h))`.
    pub fn fuse(&self, hs: &Tensor, hd: &Tensor) -> Result<(Tensor, Tensor)> {
        fuse_with_queries(self.queries.as_tensor(), hs, hd)
    }

    /// `x = MLP(s || iota || delta)` row-wise.
    pub fn integrate(&self, spatial: &Tensor, time: &Tensor) -> Result<Tensor> {
        let input = Tensor::cat(&[spatial, time], D::Minus1)?;
        self.token_mlp.forward(&input)
    }

    fn check_units(&self, bank: &FeatureBank, seqs: &[Vec<TokenUnit>]) -> Result<()> {
        let covered = bank.covered_slices();
        for u in seqs.iter().flatten() {
            let slice_ok = covered.map_or(true, |(lo, hi)| (lo..=hi).contains(&u.slice));
            if u.segment >= self.num_segments || !slice_ok {
                return Err(Error::Coverage {
                    segment: u.segment,
                    slice: u.slice,
                });
            }
        }
        Ok(())
    }

    /// Tokenizes sequences with the computation graph intact, recomputing
    /// the tables of every touched slice. Output `k` has shape
    /// `(|seqs[k]|, D_token)`.
    pub fn tokenize(&self, bank: &FeatureBank, seqs: &[Vec<TokenUnit>]) -> Result<Vec<Tensor>> {
        self.check_units(bank, seqs)?;
        let slices: Vec<i64> = seqs.iter().flatten().map(|u| u.slice).collect::<BTreeSet<_>>().into_iter().collect();
        if slices.is_empty() {
            return Ok(seqs
                .iter()
                .map(|_| Tensor::zeros((0, self.config.token_dim), bank.dtype(), bank.device()))
                .collect::<candle_core::Result<_>>()?);
        }
        let hs = self.encode_static(bank)?;
        let hd = self.encode_dynamic(bank, &slices)?;
        let (fused, _) = self.fuse(&hs, &hd)?;
        let flat = fused.reshape((slices.len() * self.num_segments, 2 * self.config.hidden))?;
        let pos: BTreeMap<i64, usize> = slices.iter().enumerate().map(|(k, &s)| (s, k)).collect();
        self.gather_and_integrate(bank, &flat, |u| pos[&u.slice], seqs)
    }

    fn gather_and_integrate(
        &self,
        bank: &FeatureBank,
        flat: &Tensor,
        table_of: impl Fn(&TokenUnit) -> usize,
        seqs: &[Vec<TokenUnit>],
    ) -> Result<Vec<Tensor>> {
        let n = self.num_segments;
        let idx: Vec<u32> = seqs
            .iter()
            .flatten()
            .map(|u| (table_of(u) * n + u.segment) as u32)
            .collect();
        let total = idx.len();
        let time: Vec<f64> = seqs.iter().flatten().flat_map(|u| u.time).collect();
        let idx = Tensor::from_vec(idx, total, bank.device())?;
        let time = Tensor::from_vec(time, (total, TIME_DIM), bank.device())?.to_dtype(bank.dtype())?;
        let rows = flat.index_select(&idx, 0)?;
        let tokens = self.integrate(&rows, &time)?;
        let mut out = Vec::with_capacity(seqs.len());
        let mut offset = 0;
        for s in seqs {
            out.push(tokens.narrow(0, offset, s.len())?);
            offset += s.len();
        }
        Ok(out)
    }
}

pub fn fuse_with_queries(queries: &Tensor, hs: &Tensor, hd: &Tensor) -> Result<(Tensor, Tensor)> {
    let (s, n, d_dyn) = hd.dims3()?;
    let (n_s, d_static) = hs.dims2()?;
    if n_s != n {
        return Err(Error::Shape(format!("static table has {n_s} rows, dynamic has {n}")));
    }
    let key_width = d_static + d_dyn;
    let (n_q, q_width) = queries.dims2()?;
    if q_width != key_width || n_q != n {
        return Err(Error::Shape(format!(
            "queries ({n_q}, {q_width}) do not match keys ({n}, {key_width})"
        )));
    }
    let keys = Tensor::cat(&[&hs.unsqueeze(0)?.broadcast_as((s, n, d_static))?.contiguous()?, hd], 2)?;
    let scores = (queries.broadcast_matmul(&keys.transpose(1, 2)?)? / (key_width as f64).sqrt())?;
    let att = softmax_last(&scores)?;
    let fused = att.matmul(&keys)?;
    Ok((fused, att))
}

/// Lazily filled, detached per-slice tables for a frozen tokenizer.
#[derive(Debug, Default)]
pub struct RepresentationTables {
    static_table: Option<Tensor>,
    fused: BTreeMap<i64, Tensor>,
}

impl RepresentationTables {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn static_table(&self) -> Option<&Tensor> {
        self.static_table.as_ref()
    }

    pub fn fused(&self, slice: i64) -> Option<&Tensor> {
        self.fused.get(&slice)
    }

    pub fn cached_slices(&self) -> usize {
        self.fused.len()
    }

    pub fn ensure(&mut self, tok: &StTokenizer, bank: &FeatureBank, slices: &[i64]) -> Result<()> {
        let missing: Vec<i64> = slices
            .iter()
            .copied()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .filter(|s| !self.fused.contains_key(s))
            .collect();
        if missing.is_empty() {
            return Ok(());
        }
        if self.static_table.is_none() {
            self.static_table = Some(tok.encode_static(bank)?.detach());
        }
        let hs = self.static_table.as_ref().unwrap();
        for chunk in missing.chunks(32) {
            let hd = tok.encode_dynamic(bank, chunk)?;
            let (fused, _) = tok.fuse(hs, &hd)?;
            for (k, &slice) in chunk.iter().enumerate() {
                self.fused.insert(slice, fused.get(k)?.detach());
            }
        }
        Ok(())
    }

    pub fn tokenize(&mut self, tok: &StTokenizer, bank: &FeatureBank, seqs: &[Vec<TokenUnit>]) -> Result<Vec<Tensor>> {
        tok.check_units(bank, seqs)?;
        let slices: Vec<i64> = seqs.iter().flatten().map(|u| u.slice).collect::<BTreeSet<_>>().into_iter().collect();
        if slices.is_empty() {
            return tok.tokenize(bank, seqs);
        }
        self.ensure(tok, bank, &slices)?;
        let stacked = Tensor::stack(&slices.iter().map(|s| &self.fused[s]).collect::<Vec<_>>(), 0)?;
        let flat = stacked.reshape((slices.len() * tok.num_segments, 2 * tok.config.hidden))?;
        let pos: BTreeMap<i64, usize> = slices.iter().enumerate().map(|(k, &s)| (s, k)).collect();
        Ok(tok
            .gather_and_integrate(bank, &flat, |u| pos[&u.slice], seqs)?
            .into_iter()
            .map(|t| t.detach())
            .collect())
    }
}
