//! Exact ranking, regression and classification metrics.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Candidate ids ordered by descending score, ties by ascending id.
pub fn rank_by_score(scores: &[f64]) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..scores.len()).collect();
    ids.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    ids
}

/// 1-based rank of `truth` in `list`, if present.
pub fn rank_of(list: &[usize], truth: usize) -> Option<usize> {
    list.iter().position(|&c| c == truth).map(|p| p + 1)
}

/// `acc`, `mrr@k`, `ndcg@k` and `hr@k` over queries with one relevant item
/// each. A truth missing from its list contributes 0.
pub fn ranking_metrics(ranked_lists: &[Vec<usize>], truths: &[usize], k: usize) -> Result<BTreeMap<String, f64>> {
    if ranked_lists.is_empty() || ranked_lists.len() != truths.len() {
        return Err(Error::Input(format!(
            "{} ranked lists for {} truths",
            ranked_lists.len(),
            truths.len()
        )));
    }
    if k == 0 {
        return Err(Error::Input("cutoff k must be positive".into()));
    }
    let (mut acc, mut mrr, mut ndcg, mut hr) = (0.0, 0.0, 0.0, 0.0);
    for (list, &truth) in ranked_lists.iter().zip(truths) {
        if list.is_empty() {
            return Err(Error::Input("empty ranked list".into()));
        }
        if list.iter().collect::<BTreeSet<_>>().len() != list.len() {
            return Err(Error::Input("ranked list repeats a candidate".into()));
        }
        let Some(rank) = rank_of(list, truth) else {
            continue;
        };
        if rank == 1 {
            acc += 1.0;
        }
        if rank <= k {
            mrr += 1.0 / rank as f64;
            ndcg += 1.0 / (rank as f64 + 1.0).log2();
            hr += 1.0;
        }
    }
    let n = truths.len() as f64;
    Ok(BTreeMap::from([
        ("acc".to_string(), acc / n),
        (format!("mrr@{k}"), mrr / n),
        (format!("ndcg@{k}"), ndcg / n),
        (format!("hr@{k}"), hr / n),
    ]))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegressionMetrics {
    pub mae: f64,
    pub rmse: f64,
    /// Percentage over nonzero truths.
    pub mape: f64,
    /// Terms left out of MAPE because their truth is zero.
    pub mape_excluded: usize,
    pub count: usize,
}

impl RegressionMetrics {
    pub fn insert_into(&self, out: &mut BTreeMap<String, f64>, suffix: &str) {
        out.insert(format!("mae{suffix}"), self.mae);
        out.insert(format!("rmse{suffix}"), self.rmse);
        out.insert(format!("mape{suffix}"), self.mape);
    }
}

pub fn regression_metrics(preds: &[f64], truths: &[f64]) -> Result<RegressionMetrics> {
    if preds.len() != truths.len() {
        return Err(Error::Shape(format!("{} predictions for {} truths", preds.len(), truths.len())));
    }
    if preds.is_empty() {
        return Err(Error::Input("no values to score".into()));
    }
    let n = preds.len() as f64;
    let mut abs = 0.0;
    let mut sq = 0.0;
    let mut pct = 0.0;
    let mut nonzero = 0usize;
    for (&p, &t) in preds.iter().zip(truths) {
        let e = p - t;
        abs += e.abs();
        sq += e * e;
        if t != 0.0 {
            pct += (e / t).abs();
            nonzero += 1;
        }
    }
    if nonzero == 0 {
        return Err(Error::Input("MAPE is undefined when every truth is zero".into()));
    }
    Ok(RegressionMetrics {
        mae: abs / n,
        rmse: (sq / n).sqrt(),
        mape: 100.0 * pct / nonzero as f64,
        mape_excluded: preds.len() - nonzero,
        count: preds.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassScheme {
    /// Labels in {0, 1}; reports `acc`, `f1` of class 1 and `auc`.
    Binary,
    /// Reports `micro_f1`, `macro_f1` and `macro_recall`.
    Multiclass,
}

/// Precision, recall and F1 of `class`; empty denominators give 0.
fn class_scores(preds: &[usize], truths: &[usize], class: usize) -> (f64, f64, f64) {
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut fn_ = 0usize;
    for (&p, &t) in preds.iter().zip(truths) {
        match (p == class, t == class) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            _ => {}
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    (precision, recall, f1)
}

pub fn accuracy(preds: &[usize], truths: &[usize]) -> f64 {
    preds.iter().zip(truths).filter(|(p, t)| p == t).count() as f64 / truths.len() as f64
}

/// Macro-F1 over the classes present in `truths`.
pub fn macro_f1(preds: &[usize], truths: &[usize]) -> f64 {
    let classes: BTreeSet<usize> = truths.iter().copied().collect();
    classes.iter().map(|&c| class_scores(preds, truths, c).2).sum::<f64>() / classes.len() as f64
}

/// Area under the ROC curve from midranks; tied scores count one half.
pub fn binary_auc(truths: &[usize], scores: &[f64]) -> Result<f64> {
    if truths.len() != scores.len() {
        return Err(Error::Shape(format!("{} scores for {} truths", scores.len(), truths.len())));
    }
    if truths.iter().any(|&t| t > 1) {
        return Err(Error::Input("AUC needs binary labels".into()));
    }
    let pos = truths.iter().filter(|&&t| t == 1).count();
    let neg = truths.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Input("AUC needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += order[i..=j].iter().filter(|&&o| truths[o] == 1).count() as f64 * midrank;
        i = j + 1;
    }
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos * neg) as f64)
}

/// `scores` are positive-class scores and are required for `Binary`.
pub fn classification_metrics(
    preds: &[usize],
    truths: &[usize],
    scores: Option<&[f64]>,
    scheme: ClassScheme,
) -> Result<BTreeMap<String, f64>> {
    if preds.len() != truths.len() {
        return Err(Error::Shape(format!("{} predictions for {} truths", preds.len(), truths.len())));
    }
    if truths.is_empty() {
        return Err(Error::Input("no labels to score".into()));
    }
    let mut out = BTreeMap::new();
    match scheme {
        ClassScheme::Binary => {
            if preds.iter().chain(truths).any(|&c| c > 1) {
                return Err(Error::Input("binary scheme needs labels in {0, 1}".into()));
            }
            let scores = scores.ok_or_else(|| Error::Input("binary scheme needs positive-class scores".into()))?;
            out.insert("acc".into(), accuracy(preds, truths));
            out.insert("f1".into(), class_scores(preds, truths, 1).2);
            out.insert("auc".into(), binary_auc(truths, scores)?);
        }
        ClassScheme::Multiclass => {
            if scores.is_some() {
                return Err(Error::Input("AUC is only defined for the binary scheme".into()));
            }
            let classes: BTreeSet<usize> = truths.iter().copied().collect();
            let recall = classes.iter().map(|&c| class_scores(preds, truths, c).1).sum::<f64>() / classes.len() as f64;
            // Single-label micro averaging reduces to accuracy.
            out.insert("micro_f1".into(), accuracy(preds, truths));
            out.insert("macro_f1".into(), macro_f1(preds, truths));
            out.insert("macro_recall".into(), recall);
        }
    }
    Ok(out)
}

fn masked<T: Copy>(values: &[T], mask: &[bool]) -> Vec<T> {
    values.iter().zip(mask).filter(|(_, &m)| m).map(|(v, _)| *v).collect()
}

fn check_mask(len_a: usize, len_b: usize, mask: &[bool]) -> Result<()> {
    if len_a != len_b || len_a != mask.len() {
        return Err(Error::Shape(format!(
            "predictions ({len_a}), truths ({len_b}) and mask ({}) differ in length",
            mask.len()
        )));
    }
    if !mask.iter().any(|&m| m) {
        return Err(Error::Input("mask selects no position".into()));
    }
    Ok(())
}

/// `accuracy` and `macro_f1` over the positions where `mask` is set.
pub fn masked_classification_metrics(preds: &[usize], truths: &[usize], mask: &[bool]) -> Result<BTreeMap<String, f64>> {
    check_mask(preds.len(), truths.len(), mask)?;
    let p = masked(preds, mask);
    let t = masked(truths, mask);
    Ok(BTreeMap::from([
        ("accuracy".to_string(), accuracy(&p, &t)),
        ("macro_f1".to_string(), macro_f1(&p, &t)),
    ]))
}

/// Regression metrics over the positions where `mask` is set.
pub fn masked_regression_metrics(preds: &[f64], truths: &[f64], mask: &[bool]) -> Result<RegressionMetrics> {
    check_mask(preds.len(), truths.len(), mask)?;
    regression_metrics(&masked(preds, mask), &masked(truths, mask))
}
