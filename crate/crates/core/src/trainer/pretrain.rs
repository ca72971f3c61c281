use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{derived_rng, epoch_batches, features, jitter, BatchItem, RunConfig, StudyRecord, TrainError};
use crate::genome::{mask_sequence, GenomeSequence, GenomeVocab, MaskPlan};
use crate::model::{ImageFeatureProvider, ImageFeatures, ProtocolModel, VocabLayout};
use crate::numeric::{cosine_lr, save_checkpoint, AdamW, Graph, OptimState, Tensor, Var};
use crate::objectives::{loss_mpm, loss_p2p, loss_pic, loss_pre, LossBreakdown};

/// One metrics-log line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainRecord {
    pub step: usize,
    pub epoch: usize,
    pub l_pic: f64,
    pub l_mpm: f64,
    pub l_p2p: f64,
    pub l_pre: f64,
    pub lr: f64,
}

pub struct PretrainOutcome {
    pub model: ProtocolModel,
    pub log: Vec<PretrainRecord>,
}

/// Everything one optimisation step consumes, with masking and jitter
/// already drawn so the loss is a pure function of the parameters.
pub struct PretrainBatch {
    pub headers: Vec<GenomeSequence>,
    pub masked: Vec<GenomeSequence>,
    pub plans: Vec<MaskPlan>,
    pub targets: Vec<GenomeSequence>,
    pub feats: Vec<ImageFeatures>,
    pub jitter: Vec<Tensor>,
}

impl PretrainBatch {
    pub fn prepare(
        studies: &[StudyRecord],
        provider: &dyn ImageFeatureProvider,
        vocab: &GenomeVocab,
        batch: &[BatchItem],
        cfg: &RunConfig,
        step: usize,
    ) -> Result<Self, TrainError> {
        let (seqs, feats) = features(provider, studies, batch)?;
        let mut rng = derived_rng(cfg.seed, "step", step as u64);
        let mut masked = Vec::with_capacity(seqs.len());
        let mut plans = Vec::with_capacity(seqs.len());
        for s in &seqs {
            let (m, p) = mask_sequence(s, vocab, cfg.mask_rate_cat, cfg.mask_rate_num, rng.random());
            masked.push(m);
            plans.push(p);
        }
        let jit = jitter(&feats, cfg.feature_jitter, &mut rng);
        Ok(PretrainBatch {
            headers: seqs.into_iter().cloned().collect(),
            masked,
            plans,
            targets: batch
                .iter()
                .map(|it| studies[it.study].series[it.target].sequence.clone())
                .collect(),
            feats,
            jitter: jit,
        })
    }
}

/// Builds the combined objective; returns (L_pre, L_pic, L_mpm, L_p2p).
pub fn pretrain_loss(
    g: &mut Graph<'_>,
    model: &ProtocolModel,
    b: &PretrainBatch,
    cfg: &RunConfig,
) -> Result<(Var, Var, Var, Var), TrainError> {
    let w = &cfg.weights;
    let heads: Vec<&GenomeSequence> = b.headers.iter().collect();
    let feats: Vec<&ImageFeatures> = b.feats.iter().collect();
    let enc = model.encode(g, &heads)?;
    let img = model.encode_image(g, &feats, Some(&b.jitter))?;
    let z = model.project_image(g, img.pooled)?;
    let u = model.project_protocol(g, enc.pooled)?;
    let pic = loss_pic(g, z, u, w.tau)?;
    let masked: Vec<&GenomeSequence> = b.masked.iter().collect();
    let plans: Vec<&MaskPlan> = b.plans.iter().collect();
    let menc = model.encode(g, &masked)?;
    let mpm = loss_mpm(g, model, &menc, &img, &masked, &plans, w.lambda_num)?;
    let targets: Vec<&GenomeSequence> = b.targets.iter().collect();
    let p2p = loss_p2p(g, model, &enc, &heads, &targets, w.lambda_cont)?;
    let pre = loss_pre(g, pic, mpm, p2p, w)?;
    Ok((pre, pic, mpm, p2p))
}

/// Contrastive, masked-modeling and translation pretraining with AdamW
/// under a warmup-cosine schedule. Checkpoints go to `checkpoint_dir`
/// every `checkpoint_every` steps when both are set.
pub fn pretrain(
    studies: &[StudyRecord],
    provider: &dyn ImageFeatureProvider,
    vocab: &GenomeVocab,
    cfg: &RunConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<PretrainOutcome, TrainError> {
    cfg.validate()?;
    let mut model = ProtocolModel::new(cfg.model.clone(), VocabLayout::from_vocab(vocab));
    let mut log = Vec::new();
    if cfg.epochs == 0 {
        return Ok(PretrainOutcome { model, log });
    }
    let per_epoch = epoch_batches(studies, cfg.batch_size, cfg.seed, 0, None)?.len();
    let total = per_epoch * cfg.epochs;
    let opt = AdamW {
        weight_decay: cfg.weight_decay,
        ..AdamW::default()
    };
    let mut state = OptimState::new(&model.params);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        for batch in epoch_batches(studies, cfg.batch_size, cfg.seed, epoch, None)? {
            let prepared = PretrainBatch::prepare(studies, provider, vocab, &batch, cfg, step)?;
            let lr = cosine_lr(step, total, cfg.warmup_steps, cfg.lr);
            let (grads, br) = {
                let mut g = Graph::new(&model.params);
                let (pre, pic, mpm, p2p) = pretrain_loss(&mut g, &model, &prepared, cfg)?;
                let br = LossBreakdown::pretrain(g.scalar(pic), g.scalar(mpm), g.scalar(p2p), &cfg.weights);
                if !br.all_finite() {
                    return Err(TrainError::DivergedLoss {
                        step,
                        detail: format!(
                            "l_pic={} l_mpm={} l_p2p={} l_pre={}",
                            br.l_pic, br.l_mpm, br.l_p2p, br.l_pre
                        ),
                    });
                }
                (g.backward(pre), br)
            };
            opt.step(&mut model.params, &grads, &mut state, lr)?;
            log.push(PretrainRecord {
                step,
                epoch,
                l_pic: br.l_pic,
                l_mpm: br.l_mpm,
                l_p2p: br.l_p2p,
                l_pre: br.l_pre,
                lr,
            });
            log::debug!("pretrain step {step} l_pre {:.5} l_pic {:.5}", br.l_pre, br.l_pic);
            step += 1;
            if let Some(dir) = checkpoint_dir {
                if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 {
                    std::fs::create_dir_all(dir)?;
                    save_checkpoint(&model.params, &dir.join(format!("step{step:06}.ckpt")))
                        .map_err(|e| TrainError::Model(e.to_string()))?;
                }
            }
        }
    }
    Ok(PretrainOutcome { model, log })
}

/// Mean top-1 accuracy of matching each header to its own features and
/// each feature set to its own header among the other items of a batch,
/// in both directions, over study-aware batches of size `b` (first
/// series of each study, no jitter).
pub fn batch_retrieval_top1(
    model: &ProtocolModel,
    studies: &[StudyRecord],
    provider: &dyn ImageFeatureProvider,
    b: usize,
    seed: u64,
) -> Result<f64, TrainError> {
    let batches = epoch_batches(studies, b, seed, 0, None)?;
    let mut hits = 0usize;
    let mut total = 0usize;
    for batch in batches {
        let batch: Vec<BatchItem> = batch.into_iter().map(|it| BatchItem { series: 0, ..it }).collect();
        let (seqs, feats) = features(provider, studies, &batch)?;
        let fr: Vec<&ImageFeatures> = feats.iter().collect();
        let mut g = Graph::new(&model.params);
        let enc = model.encode(&mut g, &seqs)?;
        let img = model.encode_image(&mut g, &fr, None)?;
        let z = model.project_image(&mut g, img.pooled)?;
        let u = model.project_protocol(&mut g, enc.pooled)?;
        let z = g.normalize_rows(z);
        let u = g.normalize_rows(u);
        let ut = g.transpose(u);
        let s = g.matmul(z, ut)?;
        let s = g.value(s);
        let n = s.rows;
        let argmax = |vals: &mut dyn Iterator<Item = f64>| {
            vals.enumerate()
                .fold((0, f64::NEG_INFINITY), |b, (j, v)| if v > b.1 { (j, v) } else { b })
                .0
        };
        for i in 0..n {
            hits += usize::from(argmax(&mut (0..n).map(|j| s.at(i, j))) == i);
            hits += usize::from(argmax(&mut (0..n).map(|j| s.at(j, i))) == i);
            total += 2;
        }
    }
    Ok(hits as f64 / total.max(1) as f64)
}
