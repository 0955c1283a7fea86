//! Dense multi-head graph attention over the road graph.

use candle_core::{Tensor, Var, D};

use crate::error::{Error, Result};
use crate::nn::{leaky_relu, softmax_last, Init, Linear, ParamGroup};

const LEAKY_SLOPE: f64 = 0.2;

/// `h'_i = ||_k sum_{j in N(i)} a^k_ij W^k h_j` with
/// `a^k_ij = softmax_j(LeakyReLU(a_dst^k . W^k h_i + a_src^k . W^k h_j))`.
#[derive(Debug, Clone)]
pub struct GatLayer {
    pub proj: Linear,
    pub att_src: Var,
    pub att_dst: Var,
    heads: usize,
    head_dim: usize,
}

impl GatLayer {
    pub fn new(
        group: &mut ParamGroup,
        prefix: &str,
        init: &mut Init,
        d_in: usize,
        heads: usize,
        head_dim: usize,
    ) -> Result<Self> {
        let proj = Linear::new(group, &format!("{prefix}.proj"), init, d_in, heads * head_dim, false)?;
        let bound = (1.0 / head_dim as f64).sqrt();
        let att_src = group.add(format!("{prefix}.att_src"), init.uniform(&[heads, head_dim], bound)?);
        let att_dst = group.add(format!("{prefix}.att_dst"), init.uniform(&[heads, head_dim], bound)?);
        Ok(Self {
            proj,
            att_src,
            att_dst,
            heads,
            head_dim,
        })
    }

    pub fn out_dim(&self) -> usize {
        self.heads * self.head_dim
    }

    /// `x: (S, I, F)`, `bias: (I, I)` → `((S, I, H*d), attention (S, H, I, I))`.
    pub fn forward(&self, x: &Tensor, bias: &Tensor) -> Result<(Tensor, Tensor)> {
        let (s, n, _) = x.dims3()?;
        if bias.dims() != [n, n] {
            return Err(Error::Shape(format!(
                "neighborhood bias {:?} does not match {n} nodes",
                bias.dims()
            )));
        }
        let h = self
            .proj
            .forward(x)?
            .reshape((s, n, self.heads, self.head_dim))?
            .transpose(1, 2)?
            .contiguous()?;
        let src = self.att_src.as_tensor().reshape((1, self.heads, 1, self.head_dim))?;
        let dst = self.att_dst.as_tensor().reshape((1, self.heads, 1, self.head_dim))?;
        let e_src = h.broadcast_mul(&src)?.sum(D::Minus1)?;
        let e_dst = h.broadcast_mul(&dst)?.sum(D::Minus1)?;
        let scores = e_dst.unsqueeze(3)?.broadcast_add(&e_src.unsqueeze(2)?)?;
        let scores = leaky_relu(&scores, LEAKY_SLOPE)?.broadcast_add(bias)?;
        let att = softmax_last(&scores)?;
        let out = att
            .matmul(&h)?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((s, n, self.heads * self.head_dim))?;
        Ok((out, att))
    }
}

/// Two attention layers with an ELU between them.
#[derive(Debug, Clone)]
pub struct Gat {
    pub layers: Vec<GatLayer>,
}

impl Gat {
    pub fn new(
        group: &mut ParamGroup,
        prefix: &str,
        init: &mut Init,
        d_in: usize,
        d_out: usize,
        heads: usize,
        depth: usize,
    ) -> Result<Self> {
        if heads == 0 || d_out % heads != 0 {
            return Err(Error::Config(format!(
                "GAT width {d_out} must be divisible by its {heads} heads"
            )));
        }
        let mut layers = Vec::with_capacity(depth);
        let mut width = d_in;
        for l in 0..depth {
            let layer = GatLayer::new(group, &format!("{prefix}.layer{l}"), init, width, heads, d_out / heads)?;
            width = layer.out_dim();
            layers.push(layer);
        }
        Ok(Self { layers })
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].proj.in_dim()
    }

    pub fn forward(&self, x: &Tensor, bias: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        let mut h = x.clone();
        let mut atts = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate() {
            let (out, att) = layer.forward(&h, bias)?;
            h = if l + 1 < self.layers.len() { out.elu(1.0)? } else { out };
            atts.push(att);
        }
        Ok((h, atts))
    }
}
