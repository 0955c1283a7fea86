//! Parameter groups, seeded initialization and the small layers shared by
//! the tokenizer, backbone and heads.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Deterministic initializer. Candle's own random constructors draw from a
/// thread-local generator, so all parameters are sampled here instead.
pub struct Init {
    rng: ChaCha8Rng,
    pub dtype: DType,
    pub device: Device,
}

impl Init {
    pub fn new(seed: u64, dtype: DType, device: Device) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            dtype,
            device,
        }
    }

    fn from_values(&self, values: Vec<f64>, shape: &[usize]) -> Result<Var> {
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        Ok(Var::from_tensor(&t)?)
    }

    pub fn normal(&mut self, shape: &[usize], std: f64) -> Result<Var> {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
        let values = (0..n).map(|_| dist.sample(&mut self.rng)).collect();
        self.from_values(values, shape)
    }

    pub fn uniform(&mut self, shape: &[usize], bound: f64) -> Result<Var> {
        let n: usize = shape.iter().product();
        let dist = Uniform::new_inclusive(-bound, bound).map_err(|e| Error::Config(e.to_string()))?;
        let values = (0..n).map(|_| dist.sample(&mut self.rng)).collect();
        self.from_values(values, shape)
    }

    pub fn constant(&mut self, shape: &[usize], value: f64) -> Result<Var> {
        let n: usize = shape.iter().product();
        self.from_values(vec![value; n], shape)
    }
}

/// Named collection of variables saved, hashed and optimized as one unit.
#[derive(Clone)]
pub struct ParamGroup {
    name: String,
    vars: BTreeMap<String, Var>,
}

impl std::fmt::Debug for ParamGroup {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ParamGroup")
            .field("name", &self.name)
            .field("len", &self.vars.len())
            .finish()
    }
}

impl ParamGroup {
    pub fn new(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            vars: BTreeMap::new(),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// Registers `var` under `key` and hands back a shared handle.
    pub fn add(&mut self, key: impl Into<String>, var: Var) -> Var {
        let key = key.into();
        assert!(
            !self.vars.contains_key(&key),
            "duplicate parameter {key} in group {}",
            self.name
        );
        self.vars.insert(key, var.clone());
        var
    }

    pub fn get(&self, key: &str) -> Option<&Var> {
        self.vars.get(key)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn vars(&self) -> Vec<Var> {
        self.vars.values().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// SHA-256 over names, shapes and values (as little-endian f64).
    pub fn hash(&self) -> Result<String> {
        let mut h = Sha256::new();
        for (name, var) in &self.vars {
            h.update(name.as_bytes());
            h.update([0u8]);
            for d in var.dims() {
                h.update((*d as u64).to_le_bytes());
            }
            let values = var.as_tensor().to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
            for v in values {
                h.update(v.to_le_bytes());
            }
        }
        Ok(hex::encode(h.finalize()))
    }

    pub fn snapshot(&self) -> Result<BTreeMap<String, Tensor>> {
        self.vars
            .iter()
            .map(|(k, v)| Ok((k.clone(), v.as_tensor().copy()?)))
            .collect()
    }

    pub fn restore(&self, snapshot: &BTreeMap<String, Tensor>) -> Result<()> {
        for (k, var) in &self.vars {
            let t = snapshot
                .get(k)
                .ok_or_else(|| Error::Input(format!("snapshot lacks {}/{k}", self.name)))?;
            if t.dims() != var.dims() {
                return Err(Error::Shape(format!(
                    "{}/{k}: expected {:?}, found {:?}",
                    self.name,
                    var.dims(),
                    t.dims()
                )));
            }
            var.set(&t.to_dtype(var.dtype())?)?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let map: std::collections::HashMap<String, Tensor> = self
            .vars
            .iter()
            .map(|(k, v)| (k.clone(), v.as_tensor().clone()))
            .collect();
        candle_core::safetensors::save(&map, path).map_err(Error::from)
    }

    pub fn load(&self, path: &Path) -> Result<()> {
        if !path.exists() {
            return Err(Error::Dependency(path.to_path_buf()));
        }
        let device = self
            .vars
            .values()
            .next()
            .map(|v| v.device().clone())
            .unwrap_or(Device::Cpu);
        let loaded = candle_core::safetensors::load(path, &device)?;
        let snapshot: BTreeMap<String, Tensor> = loaded.into_iter().collect();
        self.restore(&snapshot)
    }
}

fn weight(var: &Var, frozen: bool) -> Tensor {
    if frozen {
        var.as_detached_tensor()
    } else {
        var.as_tensor().clone()
    }
}

/// `y = x W + b` with `W` stored as `(in, out)`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Var,
    pub bias: Option<Var>,
    pub frozen: bool,
}

impl Linear {
    pub fn new(
        group: &mut ParamGroup,
        prefix: &str,
        init: &mut Init,
        d_in: usize,
        d_out: usize,
        bias: bool,
    ) -> Result<Self> {
        let bound = (1.0 / d_in as f64).sqrt();
        let weight = group.add(format!("{prefix}.weight"), init.uniform(&[d_in, d_out], bound)?);
        let bias = if bias {
            Some(group.add(format!("{prefix}.bias"), init.constant(&[d_out], 0.0)?))
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            frozen: false,
        })
    }

    pub fn frozen(mut self) -> Self {
        self.frozen = true;
        self
    }

    pub fn in_dim(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let last = x.dim(D::Minus1)?;
        if last != self.in_dim() {
            return Err(Error::Shape(format!(
                "linear layer expects width {}, got {last}",
                self.in_dim()
            )));
        }
        let y = x.broadcast_matmul(&weight(&self.weight, self.frozen))?;
        match &self.bias {
            Some(b) => Ok(y.broadcast_add(&weight(b, self.frozen))?),
            None => Ok(y),
        }
    }
}

/// Two-layer perceptron with a GELU in between.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub hidden: Linear,
    pub out: Linear,
}

impl Mlp {
    pub fn new(
        group: &mut ParamGroup,
        prefix: &str,
        init: &mut Init,
        d_in: usize,
        d_hidden: usize,
        d_out: usize,
    ) -> Result<Self> {
        Ok(Self {
            hidden: Linear::new(group, &format!("{prefix}.fc1"), init, d_in, d_hidden, true)?,
            out: Linear::new(group, &format!("{prefix}.fc2"), init, d_hidden, d_out, true)?,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.hidden.in_dim()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.out.forward(&gelu(&self.hidden.forward(x)?)?)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: Var,
    pub beta: Var,
    pub eps: f64,
    pub frozen: bool,
}

impl LayerNorm {
    pub fn new(group: &mut ParamGroup, prefix: &str, init: &mut Init, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: group.add(format!("{prefix}.gamma"), init.constant(&[dim], 1.0)?),
            beta: group.add(format!("{prefix}.beta"), init.constant(&[dim], 0.0)?),
            eps: 1e-5,
            frozen: false,
        })
    }

    pub fn frozen(mut self) -> Self {
        self.frozen = true;
        self
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed
            .broadcast_mul(&weight(&self.gamma, self.frozen))?
            .broadcast_add(&weight(&self.beta, self.frozen))?)
    }
}

pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::softmax(x, D::Minus1)?)
}

/// `max(x, slope * x)`.
pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    Ok((x.relu()? - (x.neg()?.relu()? * slope)?)?)
}

/// Additive attention bias: 0 where `mask` is set, a large negative value
/// elsewhere so the masked weights underflow to exactly zero.
pub fn mask_bias(mask: &[u8], rows: usize, cols: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let values: Vec<f32> = mask
        .iter()
        .map(|&m| if m == 1 { 0.0 } else { -1e9 })
        .collect();
    Ok(Tensor::from_vec(values, (rows, cols), device)?.to_dtype(dtype)?)
}

/// `0.5 x (1 + erf(x / sqrt 2))`, composed from `erf` so autodiff uses the
/// exact derivative.
pub fn gelu(x: &Tensor) -> Result<Tensor> {
    let phi = ((x / std::f64::consts::SQRT_2)?.erf()? + 1.0)?;
    Ok(((x * phi)? * 0.5)?)
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

pub fn to_f64_rows(t: &Tensor) -> Result<Vec<Vec<f64>>> {
    Ok(t.to_dtype(DType::F64)?.to_vec2::<f64>()?)
}

/// Fourth-order central-difference check of `analytic`, the gradient of
/// `loss` with respect to `var`, at the flat coordinates `coords`, with step
/// `eps`. Returns the largest `|a - n| / max(|a|, |n|, floor)`.
pub fn max_gradient_error(
    var: &Var,
    analytic: &Tensor,
    coords: &[usize],
    eps: f64,
    floor: f64,
    mut loss: impl FnMut() -> Result<f64>,
) -> Result<f64> {
    let shape = var.shape().clone();
    let original = var.as_tensor().flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
    let grad = analytic.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
    let mut worst = 0.0f64;
    let set = |values: &[f64]| -> Result<()> {
        let t = Tensor::from_slice(values, shape.clone(), var.device())?.to_dtype(var.dtype())?;
        Ok(var.set(&t)?)
    };
    for &c in coords {
        let mut v = original.clone();
        let mut at = |offset: f64| -> Result<f64> {
            v[c] = original[c] + offset;
            set(&v)?;
            loss()
        };
        let (p2, p1, m1, m2) = (at(2.0 * eps)?, at(eps)?, at(-eps)?, at(-2.0 * eps)?);
        set(&original)?;
        let numeric = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * eps);
        let a = grad[c];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
        worst = worst.max(err);
    }
    Ok(worst)
}
