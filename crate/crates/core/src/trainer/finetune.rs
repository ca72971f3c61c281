use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{epoch_batches, features, group_index, params_digest, RunConfig, StudyRecord, TrainError};
use crate::genome::GenomeSequence;
use crate::model::{linear, ImageFeatureProvider, ImageFeatures, ProtocolModel};
use crate::numeric::{cosine_lr, AdamW, Graph, OptimState, ParamStore, Tensor};
use crate::objectives::{importance_weights, loss_calib_surrogate};
use crate::stats::{auroc, ece, softmax, ECE_BINS};

const HEAD_PREFIXES: [&str; 2] = ["clin.", "adv."];
const BACKBONE_PREFIXES: [&str; 2] = ["img.", "fuse."];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneRecord {
    pub epoch: usize,
    pub l_task: f64,
    pub l_adv: f64,
    pub l_calib: f64,
    pub loss: f64,
    pub val_auroc: Option<f64>,
    pub val_ece: Option<f64>,
}

pub struct FinetuneOutcome {
    pub model: ProtocolModel,
    pub log: Vec<FinetuneRecord>,
    /// Weighted task loss at every step.
    pub step_task_losses: Vec<f64>,
    /// Adversary class per group value.
    pub adversary_classes: BTreeMap<String, usize>,
    pub encoder_digest_before: String,
    pub encoder_digest_after: String,
}

/// Study-level outputs: logits and clinical embedding averaged over series.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub study: usize,
    pub logits: Vec<f64>,
    pub embedding: Vec<f64>,
}

fn check_labels(studies: &[StudyRecord], n_classes: usize) -> Result<Vec<usize>, TrainError> {
    studies
        .iter()
        .map(|s| match s.label {
            Some(y) if y < n_classes => Ok(y),
            Some(y) => Err(TrainError::LabelSpaceMismatch(format!(
                "{}: label {y} outside {n_classes} classes",
                s.study_id
            ))),
            None => Err(TrainError::LabelSpaceMismatch(format!("{}: unlabeled", s.study_id))),
        })
        .collect()
}

/// Finetunes the fusion backbone and clinical head on labeled studies
/// with the protocol encoder frozen. The adversary reads the clinical
/// embedding through gradient reversal; the calibration surrogate is
/// added with weight `lambda_cal`. Per-epoch metrics use `val` if given.
pub fn finetune(
    studies: &[StudyRecord],
    val: Option<&[StudyRecord]>,
    provider: &dyn ImageFeatureProvider,
    pretrained: &ProtocolModel,
    cfg: &RunConfig,
) -> Result<FinetuneOutcome, TrainError> {
    cfg.validate()?;
    let labels = check_labels(studies, cfg.model.n_classes)?;
    if let Some(v) = val {
        check_labels(v, cfg.model.n_classes)?;
    }
    let adv_classes = group_index(studies, &cfg.adversary_target);
    if adv_classes.len() > cfg.model.n_adv_classes {
        return Err(TrainError::LabelSpaceMismatch(format!(
            "{} {} groups for {} adversary classes",
            adv_classes.len(),
            cfg.adversary_target,
            cfg.model.n_adv_classes
        )));
    }
    let mut model = ProtocolModel::new(cfg.model.clone(), pretrained.layout.clone());
    let mut carried = ParamStore::new();
    for (name, t) in pretrained.params.iter() {
        if !HEAD_PREFIXES.iter().any(|p| name.starts_with(p)) {
            carried.add(name, t.clone());
        }
    }
    model.params.load_from(&carried)?;
    model.params.set_trainable("", false);
    for p in HEAD_PREFIXES.iter().chain(&BACKBONE_PREFIXES) {
        model.params.set_trainable(p, true);
    }
    let digest_before = params_digest(&model, ProtocolModel::ENCODER_PREFIX);

    let keys: Vec<&str> = studies
        .iter()
        .flat_map(|s| s.series.iter().map(|x| x.protocol_key.as_str()))
        .collect();
    let weight_of: BTreeMap<&str, f64> = keys.iter().copied().zip(importance_weights(&keys)).collect();
    let adv_labels: Vec<usize> = studies.iter().map(|s| adv_classes[s.group(&cfg.adversary_target)]).collect();
    let repeat: Vec<usize> = labels.iter().map(|&y| if y == 1 { cfg.oversample_positive } else { 1 }).collect();

    let b = cfg.finetune_batch_size.min(studies.len());
    let per_epoch = epoch_batches(studies, b, cfg.seed, 0, Some(&repeat))?.len();
    let total = per_epoch * cfg.finetune_epochs;
    let opt = AdamW {
        weight_decay: cfg.weight_decay,
        ..AdamW::default()
    };
    let mut state = OptimState::new(&model.params);
    let mut adv_store = ParamStore::new();
    for name in ["adv.head.w", "adv.head.b"] {
        adv_store.add(name, model.params.by_name(name).expect("adversary head").clone());
    }
    let mut adv_state = OptimState::new(&adv_store);
    let w = &cfg.weights;
    let mut log = Vec::new();
    let mut step_task = Vec::new();
    let mut step = 0;
    for epoch in 0..cfg.finetune_epochs {
        let (mut sum_task, mut sum_adv, mut sum_cal, mut sum_loss, mut n) = (0.0, 0.0, 0.0, 0.0, 0usize);
        for batch in epoch_batches(studies, b, cfg.seed, 1000 + epoch, Some(&repeat))? {
            let (seqs, feats) = features(provider, studies, &batch)?;
            let fr: Vec<&ImageFeatures> = feats.iter().collect();
            let y: Vec<usize> = batch.iter().map(|it| labels[it.study]).collect();
            let s: Vec<usize> = batch.iter().map(|it| adv_labels[it.study]).collect();
            let wts: Vec<f64> = batch
                .iter()
                .map(|it| weight_of[studies[it.study].series[it.series].protocol_key.as_str()])
                .collect();
            let wsum: f64 = wts.iter().sum();
            let factor = cosine_lr(step, total, cfg.warmup_steps, 1.0);
            let (grads, vals, v_detached) = {
                let mut g = Graph::new(&model.params);
                let (v, logits) = model.forward_clinical(&mut g, &seqs, &fr)?;
                let ce = g.cross_entropy(logits, &y)?;
                let wc = g.constant(Tensor::col(wts));
                let wce = g.mul(ce, wc)?;
                let l_task = g.sum(wce);
                let l_task = g.scale(l_task, 1.0 / wsum);
                let adv = model.adversary(&mut g, v, w.lambda_adv)?;
                let ace = g.cross_entropy(adv, &s)?;
                let l_adv = g.mean(ace);
                let mut loss = g.add(l_task, l_adv)?;
                let mut l_cal_val = 0.0;
                if w.lambda_cal != 0.0 {
                    let probs = g.softmax_rows(logits);
                    let cal = loss_calib_surrogate(&mut g, probs, &y, ECE_BINS)?;
                    l_cal_val = g.scalar(cal);
                    let cal = g.scale(cal, w.lambda_cal);
                    loss = g.add(loss, cal)?;
                }
                let vals = (g.scalar(l_task), g.scalar(l_adv), l_cal_val, g.scalar(loss));
                if !vals.3.is_finite() {
                    return Err(TrainError::DivergedLoss {
                        step,
                        detail: format!("l_task={} l_adv={} l_calib={}", vals.0, vals.1, vals.2),
                    });
                }
                (g.backward(loss), vals, g.value(v).clone())
            };
            opt.step_with(&mut model.params, &grads, &mut state, |name| {
                let base = if name.starts_with("adv.") {
                    cfg.lr_adversary
                } else if name.starts_with("clin.") {
                    cfg.lr_heads
                } else {
                    cfg.lr_backbone
                };
                base * factor
            })?;
            if cfg.adversary_steps > 0 {
                adv_store.load_from(&model.params)?;
                for _ in 0..cfg.adversary_steps {
                    let grads = {
                        let mut g = Graph::new(&adv_store);
                        let vc = g.constant(v_detached.clone());
                        let logits = linear(&mut g, vc, "adv.head")?;
                        let ce = g.cross_entropy(logits, &s)?;
                        let l = g.mean(ce);
                        g.backward(l)
                    };
                    opt.step(&mut adv_store, &grads, &mut adv_state, cfg.lr_adversary * factor)?;
                }
                model.params.load_from(&adv_store)?;
            }
            step_task.push(vals.0);
            sum_task += vals.0;
            sum_adv += vals.1;
            sum_cal += vals.2;
            sum_loss += vals.3;
            n += 1;
            step += 1;
        }
        let (val_auroc, val_ece) = match val {
            Some(v) => {
                let preds = predict(&model, v, provider)?;
                let p: Vec<f64> = preds.iter().map(|p| softmax(&p.logits)[1.min(p.logits.len() - 1)]).collect();
                let yb: Vec<bool> = v.iter().map(|s| s.label == Some(1)).collect();
                (auroc(&p, &yb).ok(), Some(ece(&p, &yb, ECE_BINS)))
            }
            None => (None, None),
        };
        let nf = n.max(1) as f64;
        let rec = FinetuneRecord {
            epoch,
            l_task: sum_task / nf,
            l_adv: sum_adv / nf,
            l_calib: sum_cal / nf,
            loss: sum_loss / nf,
            val_auroc,
            val_ece,
        };
        log::info!("finetune epoch {epoch} task {:.4} adv {:.4}", rec.l_task, rec.l_adv);
        log.push(rec);
    }
    let digest_after = params_digest(&model, ProtocolModel::ENCODER_PREFIX);
    Ok(FinetuneOutcome {
        model,
        log,
        step_task_losses: step_task,
        adversary_classes: adv_classes,
        encoder_digest_before: digest_before,
        encoder_digest_after: digest_after,
    })
}

const PREDICT_CHUNK: usize = 64;

/// Forward pass over every series; study outputs average their series.
pub fn predict(
    model: &ProtocolModel,
    studies: &[StudyRecord],
    provider: &dyn ImageFeatureProvider,
) -> Result<Vec<Prediction>, TrainError> {
    let items: Vec<(usize, &GenomeSequence, &str)> = studies
        .iter()
        .enumerate()
        .flat_map(|(i, s)| s.series.iter().map(move |x| (i, &x.sequence, x.series_uid.as_str())))
        .collect();
    let mut out: Vec<Prediction> = (0..studies.len())
        .map(|i| Prediction {
            study: i,
            logits: vec![0.0; model.config.n_classes],
            embedding: vec![0.0; model.config.clin_dim],
        })
        .collect();
    for chunk in items.chunks(PREDICT_CHUNK) {
        let seqs: Vec<&GenomeSequence> = chunk.iter().map(|c| c.1).collect();
        let feats = chunk
            .iter()
            .map(|c| provider.features(c.2))
            .collect::<Result<Vec<_>, _>>()?;
        let fr: Vec<&ImageFeatures> = feats.iter().collect();
        let mut g = Graph::new(&model.params);
        let (v, logits) = model.forward_clinical(&mut g, &seqs, &fr)?;
        for (r, c) in chunk.iter().enumerate() {
            let k = studies[c.0].series.len() as f64;
            let p = &mut out[c.0];
            for (o, x) in p.logits.iter_mut().zip(g.value(logits).row_slice(r)) {
                *o += x / k;
            }
            for (o, x) in p.embedding.iter_mut().zip(g.value(v).row_slice(r)) {
                *o += x / k;
            }
        }
    }
    Ok(out)
}

/// Mean per-class recall over classes present in `truth`.
pub fn balanced_accuracy(pred: &[usize], truth: &[usize]) -> f64 {
    let classes: BTreeSet<usize> = truth.iter().copied().collect();
    let recall: Vec<f64> = classes
        .iter()
        .map(|&c| {
            let idx: Vec<usize> = (0..truth.len()).filter(|&i| truth[i] == c).collect();
            idx.iter().filter(|&&i| pred[i] == c).count() as f64 / idx.len() as f64
        })
        .collect();
    recall.iter().sum::<f64>() / recall.len().max(1) as f64
}

fn argmax(row: &[f64]) -> usize {
    (0..row.len()).fold(0, |b, c| if row[c] > row[b] { c } else { b })
}

/// Balanced accuracy of the trained adversary head on study embeddings.
/// Studies whose group is absent from `classes` are skipped.
pub fn adversary_balanced_accuracy(
    outcome: &FinetuneOutcome,
    studies: &[StudyRecord],
    provider: &dyn ImageFeatureProvider,
    target: &str,
) -> Result<f64, TrainError> {
    let preds = predict(&outcome.model, studies, provider)?;
    let mut pred = Vec::new();
    let mut truth = Vec::new();
    for p in &preds {
        let Some(&c) = outcome.adversary_classes.get(studies[p.study].group(target)) else {
            continue;
        };
        let mut g = Graph::new(&outcome.model.params);
        let v = g.constant(Tensor::row(p.embedding.clone()));
        let logits = linear(&mut g, v, "adv.head")?;
        pred.push(argmax(g.value(logits).row_slice(0)));
        truth.push(c);
    }
    Ok(balanced_accuracy(&pred, &truth))
}

/// Fits a fresh softmax-regression probe on (train embeddings, groups)
/// and returns its balanced accuracy on the test embeddings.
pub fn linear_probe_balanced_accuracy(
    train: (&[Vec<f64>], &[usize]),
    test: (&[Vec<f64>], &[usize]),
    n_classes: usize,
    steps: usize,
) -> Result<f64, TrainError> {
    let d = train.0.first().map_or(0, Vec::len);
    let mut store = ParamStore::new();
    store.add("probe.w", Tensor::zeros(d, n_classes));
    store.add("probe.b", Tensor::zeros(1, n_classes));
    let x = Tensor::from_rows(train.0);
    let opt = AdamW {
        weight_decay: 0.0,
        ..AdamW::default()
    };
    let mut state = OptimState::new(&store);
    for _ in 0..steps {
        let grads = {
            let mut g = Graph::new(&store);
            let xv = g.constant(x.clone());
            let logits = linear(&mut g, xv, "probe")?;
            let ce = g.cross_entropy(logits, train.1)?;
            let l = g.mean(ce);
            g.backward(l)
        };
        opt.step(&mut store, &grads, &mut state, 0.05)?;
    }
    let mut g = Graph::new(&store);
    let xv = g.constant(Tensor::from_rows(test.0));
    let logits = linear(&mut g, xv, "probe")?;
    let t = g.value(logits);
    let pred: Vec<usize> = (0..t.rows).map(|r| argmax(t.row_slice(r))).collect();
    Ok(balanced_accuracy(&pred, test.1))
}
