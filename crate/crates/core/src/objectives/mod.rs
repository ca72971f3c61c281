//! Pretraining and finetuning losses built on the autodiff graph.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dicom::ProtocolHeader;
use crate::genome::{split_text, GenomeSequence, MaskPlan, PositionKind, MISSING};
use crate::model::{Encoded, ImageEncoded, ProtocolModel};
use crate::numeric::{Graph, ShapeMismatch, Tensor, Var};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ObjectiveError {
    #[error("temperature must be positive, got {0}")]
    NonPositiveTemperature(f64),
    #[error("source has {src} fields but target has {tgt}")]
    LengthMismatch { src: usize, tgt: usize },
    #[error(transparent)]
    Shape(#[from] ShapeMismatch),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub lambda_num: f64,
    pub lambda_cont: f64,
    pub lambda_adv: f64,
    pub lambda_cal: f64,
    pub tau: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 1.0,
            beta: 1.0,
            gamma: 0.5,
            lambda_num: 1.0,
            lambda_cont: 1.0,
            lambda_adv: 0.3,
            lambda_cal: 0.01,
            tau: 0.07,
        }
    }
}

/// Per-step loss components. Finetuning fields stay 0 during pretraining
/// and vice versa.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_pic: f64,
    pub l_mpm: f64,
    pub l_p2p: f64,
    pub l_pre: f64,
    pub l_task: f64,
    pub l_adv: f64,
    pub l_calib: f64,
    pub weights: LossWeights,
}

impl LossBreakdown {
    pub fn pretrain(l_pic: f64, l_mpm: f64, l_p2p: f64, weights: &LossWeights) -> Self {
        LossBreakdown {
            l_pic,
            l_mpm,
            l_p2p,
            l_pre: loss_pre_value(l_pic, l_mpm, l_p2p, weights),
            weights: weights.clone(),
            ..Default::default()
        }
    }

    pub fn recomposes(&self) -> bool {
        let w = &self.weights;
        let want = w.alpha * self.l_pic + w.beta * self.l_mpm + w.gamma * self.l_p2p;
        (self.l_pre - want).abs() <= 1e-12 && self.all_finite()
    }

    pub fn all_finite(&self) -> bool {
        [self.l_pic, self.l_mpm, self.l_p2p, self.l_pre, self.l_task, self.l_adv, self.l_calib]
            .iter()
            .all(|x| x.is_finite())
    }
}

fn zero(g: &mut Graph<'_>) -> Var {
    g.constant(Tensor::scalar(0.0))
}

/// Symmetric InfoNCE over L2-normalized rows of `z` (image side) and `u`
/// (protocol side). Row i of each is the positive pair.
pub fn loss_pic(g: &mut Graph<'_>, z: Var, u: Var, tau: f64) -> Result<Var, ObjectiveError> {
    if !(tau > 0.0) {
        return Err(ObjectiveError::NonPositiveTemperature(tau));
    }
    if g.shape(z) != g.shape(u) {
        return Err(ShapeMismatch {
            op: "loss_pic",
            lhs: g.shape(z),
            rhs: g.shape(u),
        }
        .into());
    }
    let n = g.shape(z).0;
    if n == 0 {
        return Ok(zero(g));
    }
    let zn = g.normalize_rows(z);
    let un = g.normalize_rows(u);
    let ut = g.transpose(un);
    let s = g.matmul(zn, ut)?;
    let s = g.scale(s, 1.0 / tau);
    let st = g.transpose(s);
    let diag: Vec<usize> = (0..n).collect();
    let a = g.log_softmax_rows(s);
    let b = g.log_softmax_rows(st);
    let da = g.pick(a, &diag)?;
    let db = g.pick(b, &diag)?;
    let both = g.add(da, db)?;
    let total = g.sum(both);
    Ok(g.scale(total, -1.0 / n as f64))
}

/// Mean CE over categorical rows plus `lambda_num` times mean L1 over
/// numeric rows. Either set may be empty.
pub fn masked_objective(
    g: &mut Graph<'_>,
    cat_logits: Option<(Var, &[usize])>,
    num: Option<(Var, &[f64])>,
    lambda_num: f64,
) -> Result<Var, ObjectiveError> {
    let mut terms = Vec::new();
    if let Some((logits, classes)) = cat_logits {
        if !classes.is_empty() {
            let ce = g.cross_entropy(logits, classes)?;
            terms.push(g.mean(ce));
        }
    }
    if let Some((pred, targets)) = num {
        if !targets.is_empty() && lambda_num != 0.0 {
            let t = g.constant(Tensor::col(targets.to_vec()));
            let l = g.l1(pred, t)?;
            terms.push(g.scale(l, lambda_num));
        }
    }
    let mut acc = match terms.first() {
        Some(&t) => t,
        None => return Ok(zero(g)),
    };
    for &t in &terms[1..] {
        acc = g.add(acc, t)?;
    }
    Ok(acc)
}

/// Masked protocol modeling. `enc` encodes the masked sequences and
/// `plans[i]` records what was hidden in item i.
pub fn loss_mpm(
    g: &mut Graph<'_>,
    model: &ProtocolModel,
    enc: &Encoded,
    img: &ImageEncoded,
    masked: &[&GenomeSequence],
    plans: &[&MaskPlan],
    lambda_num: f64,
) -> Result<Var, ObjectiveError> {
    let mut cat_rows = Vec::new();
    let mut cat_classes = Vec::new();
    let mut num_rows = Vec::new();
    let mut num_cols = Vec::new();
    let mut num_targets = Vec::new();
    for (i, (seq, plan)) in masked.iter().zip(plans).enumerate() {
        let base = enc.offsets[i];
        for m in &plan.masked {
            match m.kind {
                PositionKind::Categorical => {
                    cat_rows.push(base + m.position);
                    cat_classes.push(model.layout.cat_class(m.token_id));
                }
                PositionKind::Numeric => {
                    let field = seq.field_ids[m.position] as usize;
                    if let Some(col) = model.layout.cont_column[field] {
                        num_rows.push(base + m.position);
                        num_cols.push(col);
                        num_targets.push(model.layout.standardize(col, m.raw_value));
                    }
                }
                PositionKind::Separator => {}
            }
        }
    }
    if cat_rows.is_empty() && num_rows.is_empty() {
        return Ok(zero(g));
    }
    let states = model.mpm_decode(g, enc, img)?;
    let cat = if cat_rows.is_empty() {
        None
    } else {
        let (logits, _) = model.mpm_heads(g, states, &cat_rows)?;
        Some(logits)
    };
    let num = if num_rows.is_empty() {
        None
    } else {
        let (_, preds) = model.mpm_heads(g, states, &num_rows)?;
        Some(g.pick(preds, &num_cols)?)
    };
    masked_objective(
        g,
        cat.map(|l| (l, cat_classes.as_slice())),
        num.map(|p| (p, num_targets.as_slice())),
        lambda_num,
    )
}

/// Translation loss given decoder outputs: mean per-position CE plus
/// `lambda_cont` times the per-item sum of L1 over continuous fields,
/// averaged over items.
pub fn p2p_objective(
    g: &mut Graph<'_>,
    logits: Var,
    classes: &[usize],
    reg: Option<(Var, &[f64])>,
    n_items: usize,
    lambda_cont: f64,
) -> Result<Var, ObjectiveError> {
    let ce = g.cross_entropy(logits, classes)?;
    let mut loss = g.mean(ce);
    if let Some((pred, targets)) = reg {
        if !targets.is_empty() && lambda_cont != 0.0 {
            let t = g.constant(Tensor::col(targets.to_vec()));
            let d = g.sub(pred, t)?;
            let a = g.abs(d);
            let s = g.sum(a);
            let s = g.scale(s, lambda_cont / n_items.max(1) as f64);
            loss = g.add(loss, s)?;
        }
    }
    Ok(loss)
}

/// Protocol-to-protocol translation from encoded sources to targets of
/// the same studies, teacher forced.
pub fn loss_p2p(
    g: &mut Graph<'_>,
    model: &ProtocolModel,
    src_enc: &Encoded,
    sources: &[&GenomeSequence],
    targets: &[&GenomeSequence],
    lambda_cont: f64,
) -> Result<Var, ObjectiveError> {
    if sources.len() != targets.len() {
        return Err(ObjectiveError::LengthMismatch {
            src: sources.len(),
            tgt: targets.len(),
        });
    }
    for (s, t) in sources.iter().zip(targets) {
        let (a, b) = (model.field_count(s), model.field_count(t));
        if a != b {
            return Err(ObjectiveError::LengthMismatch { src: a, tgt: b });
        }
    }
    let out = model.p2p_forward(g, src_enc, targets)?;
    let mut rows = Vec::new();
    let mut cols = Vec::new();
    let mut vals = Vec::new();
    for (i, t) in targets.iter().enumerate() {
        for p in t.numeric_positions() {
            if t.missing_mask[p] || t.token_ids[p] == MISSING {
                continue;
            }
            if let Some(col) = model.layout.cont_column[t.field_ids[p] as usize] {
                rows.push(out.offsets[i] + p);
                cols.push(col);
                vals.push(model.layout.standardize(col, t.raw_values[p]));
            }
        }
    }
    let reg = if rows.is_empty() {
        None
    } else {
        let r = g.gather_rows(out.reg, &rows)?;
        Some(g.pick(r, &cols)?)
    };
    p2p_objective(
        g,
        out.logits,
        &out.classes,
        reg.map(|p| (p, vals.as_slice())),
        targets.len(),
        lambda_cont,
    )
}

pub fn loss_pre_value(l_pic: f64, l_mpm: f64, l_p2p: f64, w: &LossWeights) -> f64 {
    w.alpha * l_pic + w.beta * l_mpm + w.gamma * l_p2p
}

pub fn loss_pre(g: &mut Graph<'_>, l_pic: Var, l_mpm: Var, l_p2p: Var, w: &LossWeights) -> Result<Var, ObjectiveError> {
    let a = g.scale(l_pic, w.alpha);
    let b = g.scale(l_mpm, w.beta);
    let c = g.scale(l_p2p, w.gamma);
    let ab = g.add(a, b)?;
    Ok(g.add(ab, c)?)
}

/// Prevalence key: vendor, model and the ProtocolName words.
pub fn protocol_key(h: &ProtocolHeader) -> String {
    let words = h.text("ProtocolName").map(split_text).unwrap_or_default().join(" ");
    format!("{}|{}|{}", h.vendor.to_lowercase(), h.model.to_lowercase(), words)
}

/// Inverse-prevalence weights normalized to mean 1.
pub fn importance_weights<K: Ord>(keys: &[K]) -> Vec<f64> {
    let mut counts: BTreeMap<&K, usize> = BTreeMap::new();
    for k in keys {
        *counts.entry(k).or_default() += 1;
    }
    let raw: Vec<f64> = keys.iter().map(|k| 1.0 / counts[k] as f64).collect();
    let mean = raw.iter().sum::<f64>() / raw.len().max(1) as f64;
    raw.into_iter().map(|w| w / mean).collect()
}

/// Mean of -(1-p)^gamma ln p over the true-class probabilities of `probs`.
pub fn focal_loss(g: &mut Graph<'_>, probs: Var, labels: &[usize], gamma: f64) -> Result<Var, ObjectiveError> {
    let p = g.pick(probs, labels)?;
    let lp = g.log(p);
    let q = g.neg(p);
    let q = g.add_scalar(q, 1.0);
    let focus = if gamma == 0.0 { None } else { Some(g.powf(q, gamma)) };
    let t = match focus {
        Some(f) => g.mul(f, lp)?,
        None => lp,
    };
    let m = g.mean(t);
    Ok(g.neg(m))
}

/// Soft-binned ECE on top-class confidence of probability rows.
pub fn loss_calib_surrogate(g: &mut Graph<'_>, probs: Var, labels: &[usize], bins: usize) -> Result<Var, ObjectiveError> {
    let p = g.value(probs);
    if labels.len() != p.rows {
        return Err(ShapeMismatch {
            op: "loss_calib_surrogate",
            lhs: p.shape(),
            rhs: (labels.len(), 1),
        }
        .into());
    }
    let mut top = Vec::with_capacity(p.rows);
    let mut correct = Vec::with_capacity(p.rows);
    for r in 0..p.rows {
        let row = p.row_slice(r);
        let arg = (0..row.len()).fold(0, |b, c| if row[c] > row[b] { c } else { b });
        top.push(arg);
        correct.push(if arg == labels[r] { 1.0 } else { 0.0 });
    }
    let conf = g.pick(probs, &top)?;
    Ok(g.soft_ece(conf, &correct, bins)?)
}

#[cfg(test)]
mod tests;
