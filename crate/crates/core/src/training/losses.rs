//! Head predictions gathered per placeholder and the two stage losses.

use std::collections::BTreeMap;

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneOutput, StModel};
use crate::error::{Error, Result};
use crate::nn::scalar;
use crate::prompting::{PromptInstance, TaskFamily, TaskId, Target};

/// Decoded outputs of a batch, each paired with its target.
#[derive(Debug, Clone, Default)]
pub struct Predictions {
    /// `(N_c, C)` logits with labels.
    pub logits: Option<Tensor>,
    pub labels: Vec<u32>,
    /// `(N_d, D_d)` predicted and target dynamic vectors.
    pub dynamic: Option<(Tensor, Tensor)>,
    /// `(N_t,)` predicted and target intervals.
    pub time: Option<(Tensor, Tensor)>,
}

impl Predictions {
    pub fn num_targets(&self) -> usize {
        self.labels.len()
            + self.dynamic.as_ref().map_or(0, |(p, _)| p.dim(0).unwrap_or(0))
            + self.time.as_ref().map_or(0, |(p, _)| p.dim(0).unwrap_or(0))
    }

    /// Count of rows whose argmax equals the label.
    pub fn correct(&self) -> Result<usize> {
        let Some(logits) = &self.logits else {
            return Ok(0);
        };
        let am = logits.argmax(D::Minus1)?.to_vec1::<u32>()?;
        Ok(am.iter().zip(&self.labels).filter(|(a, b)| a == b).count())
    }
}

/// Routes every `Z` row of `out` through the head of its placeholder kind.
/// Classification-task logits keep the first `num_classes` columns.
pub fn predict(model: &StModel, out: &BackboneOutput, prompts: &[PromptInstance], num_classes: usize) -> Result<Predictions> {
    let z = out.z_all()?;
    let device = model.device();
    let dtype = model.dtype();
    let mut cls_rows = Vec::new();
    let mut labels = Vec::new();
    let mut dyn_rows = Vec::new();
    let mut dyn_targets = Vec::new();
    let mut time_rows = Vec::new();
    let mut time_targets = Vec::new();
    let mut row = 0u32;
    let mut label_task = None;
    for p in prompts {
        if p.targets.len() != p.placeholders.len() && !p.targets.is_empty() {
            return Err(Error::Input(format!(
                "prompt {} has {} targets for {} placeholders",
                p.sequence_id,
                p.targets.len(),
                p.placeholders.len()
            )));
        }
        let is_label = p.task == Some(TaskId::Classification);
        if !p.targets.is_empty() {
            match label_task {
                None => label_task = Some(is_label),
                Some(prev) if prev != is_label => {
                    return Err(Error::Input("label and segment targets cannot share a batch".into()));
                }
                _ => {}
            }
        }
        for target in &p.targets {
            match *target {
                Target::Class(c) => {
                    cls_rows.push(row);
                    labels.push(c as u32);
                }
                Target::Regression { dynamic, time } => {
                    if let Some(d) = dynamic {
                        dyn_rows.push(row);
                        dyn_targets.extend_from_slice(&d);
                    }
                    if let Some(t) = time {
                        time_rows.push(row);
                        time_targets.push(t);
                    }
                }
            }
            row += 1;
        }
        if p.targets.is_empty() {
            row += p.placeholders.len() as u32;
        }
    }
    let select = |rows: &[u32]| -> Result<Tensor> {
        Ok(z.index_select(&Tensor::from_vec(rows.to_vec(), rows.len(), device)?, 0)?)
    };
    let mut pred = Predictions::default();
    if !cls_rows.is_empty() {
        let mut logits = model.heads.decode_classification(&select(&cls_rows)?)?;
        if label_task == Some(true) {
            if num_classes == 0 || num_classes > model.config.num_segments {
                return Err(Error::Config(format!(
                    "{num_classes} classes do not fit the {} classification logits",
                    model.config.num_segments
                )));
            }
            logits = logits.narrow(1, 0, num_classes)?;
        }
        pred.logits = Some(logits);
        pred.labels = labels;
    }
    if !dyn_rows.is_empty() {
        let p = model.heads.decode_regression(&select(&dyn_rows)?)?;
        let n = dyn_rows.len();
        let t = Tensor::from_vec(dyn_targets, (n, p.dim(1)?), device)?.to_dtype(dtype)?;
        pred.dynamic = Some((p, t));
    }
    if !time_rows.is_empty() {
        let p = model.heads.decode_time(&select(&time_rows)?)?.squeeze(1)?;
        let n = time_rows.len();
        let t = Tensor::from_vec(time_targets, n, device)?.to_dtype(dtype)?;
        pred.time = Some((p, t));
    }
    Ok(pred)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MrtWeights {
    pub clas: f64,
    pub reg: f64,
    pub tim: f64,
    /// Rescale the three weights to sum to one.
    pub normalize: bool,
}

impl Default for MrtWeights {
    fn default() -> Self {
        Self {
            clas: 1.0,
            reg: 1.0,
            tim: 1.0,
            normalize: false,
        }
    }
}

impl MrtWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.clas, self.reg, self.tim].iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::Config("loss weights must be finite and nonnegative".into()));
        }
        if self.normalize && self.clas + self.reg + self.tim == 0.0 {
            return Err(Error::Config("normalized loss weights need a positive sum".into()));
        }
        Ok(())
    }

    pub fn effective(&self) -> (f64, f64, f64) {
        if self.normalize {
            let s = self.clas + self.reg + self.tim;
            (self.clas / s, self.reg / s, self.tim / s)
        } else {
            (self.clas, self.reg, self.tim)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PtWeights {
    pub reg: f64,
    pub gen: f64,
}

impl Default for PtWeights {
    fn default() -> Self {
        Self { reg: 1.0, gen: 1.0 }
    }
}

#[derive(Debug, Clone)]
pub struct LossBreakdown {
    pub total: Tensor,
    /// Component name to value; absent terms are 0.
    pub components: BTreeMap<String, f64>,
}

impl LossBreakdown {
    pub fn total_value(&self) -> Result<f64> {
        scalar(&self.total)
    }
}

fn zero_like(pred: &Predictions) -> Option<Tensor> {
    let t = pred
        .logits
        .as_ref()
        .or(pred.dynamic.as_ref().map(|(p, _)| p))
        .or(pred.time.as_ref().map(|(p, _)| p))?;
    t.zeros_like().ok()?.sum_all().ok()
}

/// `(sum of CE, count)`.
fn ce_sum(pred: &Predictions) -> Result<Option<(Tensor, usize)>> {
    let Some(logits) = &pred.logits else {
        return Ok(None);
    };
    let n = pred.labels.len();
    let labels = Tensor::from_vec(pred.labels.clone(), n, logits.device())?;
    let mean = candle_nn::loss::cross_entropy(logits, &labels)?;
    Ok(Some(((mean * n as f64)?, n)))
}

/// `(sum over rows of the per-row mean squared error, rows)`.
fn se_sum(pair: &Option<(Tensor, Tensor)>) -> Result<Option<(Tensor, usize)>> {
    let Some((p, t)) = pair else {
        return Ok(None);
    };
    let n = p.dim(0)?;
    let width = if p.rank() == 2 { p.dim(1)? } else { 1 };
    Ok(Some((((p - t)?.sqr()?.sum_all()? / width as f64)?, n)))
}

fn finite(components: &BTreeMap<String, f64>) -> Result<()> {
    for (k, v) in components {
        if !v.is_finite() {
            return Err(Error::Numeric { component: k.clone() });
        }
    }
    Ok(())
}

fn mean_of(parts: Vec<(Tensor, usize)>) -> Result<Option<Tensor>> {
    let n: usize = parts.iter().map(|(_, c)| c).sum();
    if n == 0 {
        return Ok(None);
    }
    let mut it = parts.into_iter().map(|(t, _)| t);
    let first = it.next().expect("nonempty");
    let sum = it.try_fold(first, |acc, t| acc + t)?;
    Ok(Some((sum / n as f64)?))
}

/// `L_MRT = w_c L_clas + w_r L_reg + w_t L_tim`, each a mean over the
/// masked units of the batch.
pub fn mrt_loss(pred: &Predictions, w: &MrtWeights) -> Result<LossBreakdown> {
    w.validate()?;
    let (wc, wr, wt) = w.effective();
    let zero = zero_like(pred).ok_or_else(|| Error::Input("batch has no targets".into()))?;
    let clas = mean_of(ce_sum(pred)?.into_iter().collect())?;
    let reg = mean_of(se_sum(&pred.dynamic)?.into_iter().collect())?;
    let tim = mean_of(se_sum(&pred.time)?.into_iter().collect())?;
    let mut components = BTreeMap::new();
    let mut total = zero;
    for (name, term, weight) in [("clas", clas, wc), ("reg", reg, wr), ("tim", tim, wt)] {
        let value = match term {
            Some(t) => {
                let v = scalar(&t)?;
                total = (total + (t * weight)?)?;
                v
            }
            None => 0.0,
        };
        components.insert(name.to_string(), value);
    }
    components.insert("total".to_string(), scalar(&total)?);
    finite(&components)?;
    Ok(LossBreakdown { total, components })
}

/// `L_PT = L_CLAS + l_REG L_REG + l_GEN L_GEN`. Each term is the mean over
/// all targets of its task family across `parts`.
pub fn pt_loss(parts: &[(TaskFamily, &Predictions)], w: &PtWeights) -> Result<LossBreakdown> {
    if !(w.reg >= 0.0 && w.gen >= 0.0) {
        return Err(Error::Config("loss weights must be nonnegative".into()));
    }
    let zero = parts
        .iter()
        .find_map(|(_, p)| zero_like(p))
        .ok_or_else(|| Error::Input("batch has no targets".into()))?;
    let mut clas = Vec::new();
    let mut reg = Vec::new();
    let mut gen = Vec::new();
    for (family, pred) in parts {
        match family {
            TaskFamily::Classification => clas.extend(ce_sum(pred)?),
            TaskFamily::Generation => gen.extend(ce_sum(pred)?),
            TaskFamily::Regression => {
                reg.extend(se_sum(&pred.dynamic)?);
                reg.extend(se_sum(&pred.time)?);
            }
            TaskFamily::Comparison => {
                return Err(Error::Input("comparison tasks have no training loss".into()));
            }
        }
    }
    let mut components = BTreeMap::new();
    let mut total = zero;
    for (name, terms, weight) in [("clas", clas, 1.0), ("reg", reg, w.reg), ("gen", gen, w.gen)] {
        let value = match mean_of(terms)? {
            Some(t) => {
                let v = scalar(&t)?;
                total = (total + (t * weight)?)?;
                v
            }
            None => 0.0,
        };
        components.insert(name.to_string(), value);
    }
    components.insert("total".to_string(), scalar(&total)?);
    finite(&components)?;
    Ok(LossBreakdown { total, components })
}
