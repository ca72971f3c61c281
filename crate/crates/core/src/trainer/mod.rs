//! Pretraining, finetuning and site-held-out evaluation pipelines.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dicom::ProtocolHeader;
use crate::genome::{tokenize, GenomeSequence, GenomeVocab, VocabConfig};
use crate::model::{ImageFeatureProvider, ImageFeatures, ModelConfig, ProtocolModel};
use crate::numeric::Tensor;
use crate::objectives::{protocol_key, LossWeights};
use crate::synth::{SyntheticCorpus, TreeSeries};

mod evaluate;
mod finetune;
mod pretrain;

pub use evaluate::{evaluate_site_heldout, prediction_records, FoldReport, HeldoutReport};
pub use finetune::{
    adversary_balanced_accuracy, balanced_accuracy, finetune, linear_probe_balanced_accuracy, predict, FinetuneOutcome,
    FinetuneRecord, Prediction,
};
pub use pretrain::{batch_retrieval_top1, pretrain, pretrain_loss, PretrainBatch, PretrainOutcome, PretrainRecord};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("need at least {needed} distinct studies, have {have}")]
    InsufficientStudies { needed: usize, have: usize },
    #[error("non-finite loss at step {step}: {detail}")]
    DivergedLoss { step: usize, detail: String },
    #[error("label space mismatch: {0}")]
    LabelSpaceMismatch(String),
    #[error("corpus has a single site")]
    SingleSiteCorpus,
    #[error("invalid run config: {0}")]
    InvalidConfig(String),
    #[error("invalid study record: {0}")]
    InvalidRecord(String),
    #[error("model: {0}")]
    Model(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl From<crate::numeric::ShapeMismatch> for TrainError {
    fn from(e: crate::numeric::ShapeMismatch) -> Self {
        TrainError::Model(e.to_string())
    }
}

impl From<crate::objectives::ObjectiveError> for TrainError {
    fn from(e: crate::objectives::ObjectiveError) -> Self {
        TrainError::Model(e.to_string())
    }
}

impl From<crate::model::ProviderError> for TrainError {
    fn from(e: crate::model::ProviderError) -> Self {
        TrainError::Model(e.to_string())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeriesItem {
    pub series_uid: String,
    pub sequence: GenomeSequence,
    /// Prevalence key used for importance weighting.
    pub protocol_key: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyRecord {
    pub study_id: String,
    pub patient_id: String,
    pub series: Vec<SeriesItem>,
    pub site: String,
    pub vendor: String,
    pub model: String,
    #[serde(default)]
    pub age_band: String,
    #[serde(default)]
    pub sex: String,
    pub label: Option<usize>,
}

impl StudyRecord {
    pub fn new(
        study_id: impl Into<String>,
        patient_id: impl Into<String>,
        headers: &[(String, ProtocolHeader)],
        vocab: &GenomeVocab,
    ) -> Result<Self, TrainError> {
        let study_id = study_id.into();
        if headers.is_empty() {
            return Err(TrainError::InvalidRecord(format!("{study_id}: no series")));
        }
        let series = headers
            .iter()
            .map(|(uid, h)| {
                Ok(SeriesItem {
                    series_uid: uid.clone(),
                    sequence: tokenize(h, vocab).map_err(|e| TrainError::InvalidRecord(e.to_string()))?,
                    protocol_key: protocol_key(h),
                })
            })
            .collect::<Result<Vec<_>, TrainError>>()?;
        let h = &headers[0].1;
        Ok(StudyRecord {
            study_id,
            patient_id: patient_id.into(),
            series,
            site: h.site.clone(),
            vendor: h.vendor.clone(),
            model: h.model.clone(),
            age_band: String::new(),
            sex: String::new(),
            label: None,
        })
    }

    /// Value of a grouping attribute: "site", "vendor" or "model".
    pub fn group(&self, key: &str) -> &str {
        match key {
            "site" => &self.site,
            "model" => &self.model,
            _ => &self.vendor,
        }
    }
}

/// Vocabulary over every series header of a synthetic corpus.
pub fn synth_vocab(corpus: &SyntheticCorpus, cfg: &VocabConfig) -> Result<GenomeVocab, TrainError> {
    let headers: Vec<ProtocolHeader> = corpus
        .studies
        .iter()
        .flat_map(|s| s.series.iter().map(|se| se.header.clone()))
        .collect();
    GenomeVocab::build(&headers, &crate::dicom::FieldSchema::default(), cfg).map_err(|e| TrainError::Model(e.to_string()))
}

/// Labeled study records for a synthetic corpus.
pub fn synth_records(corpus: &SyntheticCorpus, vocab: &GenomeVocab) -> Result<Vec<StudyRecord>, TrainError> {
    corpus
        .studies
        .iter()
        .map(|st| {
            let hs: Vec<(String, ProtocolHeader)> =
                st.series.iter().map(|s| (s.series_uid.clone(), s.header.clone())).collect();
            let mut r = StudyRecord::new(&st.study_uid, &st.patient_id, &hs, vocab)?;
            r.label = Some(st.label);
            r.age_band = st.age_band.clone();
            r.sex = st.sex.clone();
            Ok(r)
        })
        .collect()
}

/// Vocabulary over the headers of an on-disk corpus.
pub fn tree_vocab(rows: &[TreeSeries], cfg: &VocabConfig) -> Result<GenomeVocab, TrainError> {
    GenomeVocab::build(rows.iter().map(|r| &r.header), &crate::dicom::FieldSchema::default(), cfg)
        .map_err(|e| TrainError::Model(e.to_string()))
}

/// Groups manifest rows into study records, keeping manifest order.
pub fn tree_records(rows: &[TreeSeries], vocab: &GenomeVocab) -> Result<Vec<StudyRecord>, TrainError> {
    let mut order: Vec<&str> = Vec::new();
    let mut by_study: BTreeMap<&str, Vec<&TreeSeries>> = BTreeMap::new();
    for r in rows {
        let e = by_study.entry(&r.study_uid).or_default();
        if e.is_empty() {
            order.push(&r.study_uid);
        }
        e.push(r);
    }
    order
        .into_iter()
        .map(|uid| {
            let series = &by_study[uid];
            let hs: Vec<(String, ProtocolHeader)> =
                series.iter().map(|r| (r.series_uid.clone(), r.header.clone())).collect();
            let first = series[0];
            let mut rec = StudyRecord::new(uid, &first.patient_id, &hs, vocab)?;
            rec.label = first.label;
            rec.age_band.clone_from(&first.age_band);
            rec.sex.clone_from(&first.sex);
            Ok(rec)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub weights: LossWeights,
    pub mask_rate_cat: f64,
    pub mask_rate_num: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub warmup_steps: usize,
    pub batch_size: usize,
    pub finetune_epochs: usize,
    pub finetune_batch_size: usize,
    pub lr_heads: f64,
    pub lr_backbone: f64,
    pub lr_adversary: f64,
    /// Extra adversary-only updates per step on the detached embeddings.
    pub adversary_steps: usize,
    /// Std of additive per-token feature jitter during pretraining.
    pub feature_jitter: f64,
    /// Positive studies appear this many times per finetune epoch.
    pub oversample_positive: usize,
    /// Attribute the adversary predicts: "vendor", "site" or "model".
    pub adversary_target: String,
    /// Share of held-out sites' patients used for temperature fitting.
    pub calibration_fraction: f64,
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            weights: LossWeights::default(),
            mask_rate_cat: 0.30,
            mask_rate_num: 0.20,
            lr: 2e-4,
            weight_decay: 0.05,
            epochs: 10,
            warmup_steps: 10,
            batch_size: 64,
            finetune_epochs: 10,
            finetune_batch_size: 32,
            lr_heads: 1e-4,
            lr_backbone: 3e-5,
            lr_adversary: 1e-4,
            adversary_steps: 0,
            feature_jitter: 0.05,
            oversample_positive: 1,
            adversary_target: "vendor".into(),
            calibration_fraction: 0.3,
            checkpoint_every: 0,
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        for (name, v) in [
            ("lr", self.lr),
            ("lr_heads", self.lr_heads),
            ("lr_backbone", self.lr_backbone),
            ("lr_adversary", self.lr_adversary),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.batch_size < 2 || self.finetune_batch_size < 2 {
            return bad("batch sizes must be at least 2".into());
        }
        if !(self.weights.tau > 0.0) {
            return bad("tau must be positive".into());
        }
        for (name, v) in [
            ("mask_rate_cat", self.mask_rate_cat),
            ("mask_rate_num", self.mask_rate_num),
            ("calibration_fraction", self.calibration_fraction),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} must lie in [0, 1]"));
            }
        }
        if !matches!(self.adversary_target.as_str(), "vendor" | "site" | "model") {
            return bad(format!("unknown adversary target {}", self.adversary_target));
        }
        if self.oversample_positive == 0 {
            return bad("oversample_positive must be at least 1".into());
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self, TrainError> {
        let c: RunConfig = toml::from_str(text).map_err(|e| TrainError::InvalidConfig(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn from_json(text: &str) -> Result<Self, TrainError> {
        let c: RunConfig = serde_json::from_str(text).map_err(|e| TrainError::InvalidConfig(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    /// Reads TOML or JSON, by extension (`.toml` is TOML, otherwise JSON).
    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let text = std::fs::read_to_string(path)?;
        if path.extension().is_some_and(|e| e == "toml") {
            Self::from_toml(&text)
        } else {
            Self::from_json(&text)
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("config serializes")))
    }
}

/// One batch slot: a study, the series whose header and features pair up,
/// and a series of the same study used as translation target.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchItem {
    pub study: usize,
    pub series: usize,
    pub target: usize,
}

pub(crate) fn derived_rng(seed: u64, stream: &str, idx: u64) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(stream.as_bytes());
    h.update(idx.to_le_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

/// Batches for one epoch: a seeded permutation of all studies cut into
/// batches of `b` distinct studies. A trailing single study joins the
/// previous batch. `repeat[i]` copies of study i enter the pool; copies
/// that would collide inside a batch move to a later batch.
pub fn epoch_batches(
    studies: &[StudyRecord],
    b: usize,
    seed: u64,
    epoch: usize,
    repeat: Option<&[usize]>,
) -> Result<Vec<Vec<BatchItem>>, TrainError> {
    let distinct: BTreeSet<&str> = studies.iter().map(|s| s.study_id.as_str()).collect();
    if b < 2 || distinct.len() < b {
        return Err(TrainError::InsufficientStudies {
            needed: b.max(2),
            have: distinct.len(),
        });
    }
    if distinct.len() != studies.len() {
        return Err(TrainError::InvalidRecord("duplicate study ids".into()));
    }
    let mut rng = derived_rng(seed, "epoch", epoch as u64);
    let mut pool: Vec<usize> = (0..studies.len())
        .flat_map(|i| std::iter::repeat_n(i, repeat.map_or(1, |r| r[i].max(1))))
        .collect();
    pool.shuffle(&mut rng);
    let mut batches: Vec<Vec<usize>> = Vec::new();
    let mut current: Vec<usize> = Vec::new();
    let mut carry: Vec<usize> = Vec::new();
    for s in pool {
        if current.contains(&s) {
            carry.push(s);
        } else {
            current.push(s);
        }
        if current.len() == b {
            batches.push(std::mem::take(&mut current));
            let mut rest = Vec::new();
            for c in carry.drain(..) {
                if current.contains(&c) || current.len() == b {
                    rest.push(c);
                } else {
                    current.push(c);
                }
            }
            carry = rest;
        }
    }
    // Leftover duplicates that cannot join a distinct batch are dropped.
    match current.len() {
        0 => {}
        1 if batches.last().is_some_and(|l| !l.contains(&current[0])) => {
            batches.last_mut().unwrap().push(current[0])
        }
        1 => {}
        _ => batches.push(current),
    }
    Ok(batches
        .into_iter()
        .map(|batch| {
            batch
                .into_iter()
                .map(|s| {
                    let n = studies[s].series.len();
                    let series = rng.random_range(0..n);
                    let target = if n > 1 {
                        (series + rng.random_range(1..n)) % n
                    } else {
                        series
                    };
                    BatchItem {
                        study: s,
                        series,
                        target,
                    }
                })
                .collect()
        })
        .collect())
}

/// Batch stream over `epochs` epochs.
pub fn study_aware_batches(
    studies: &[StudyRecord],
    b: usize,
    seed: u64,
    epochs: usize,
) -> Result<Vec<Vec<BatchItem>>, TrainError> {
    let mut out = Vec::new();
    for e in 0..epochs {
        out.extend(epoch_batches(studies, b, seed, e, None)?);
    }
    Ok(out)
}

/// Deterministic bucket in [0, buckets) from the patient key.
pub fn patient_bucket(patient_id: &str, seed: u64, buckets: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(patient_id.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes")) % buckets.max(1)
}

/// Splits studies so that every patient lands on exactly one side; a
/// patient goes to the first part with probability `fraction`.
pub fn patient_split(studies: &[StudyRecord], fraction: f64, seed: u64) -> (Vec<StudyRecord>, Vec<StudyRecord>) {
    const BUCKETS: u64 = 10_000;
    let cut = (fraction * BUCKETS as f64).round() as u64;
    studies
        .iter()
        .cloned()
        .partition(|s| patient_bucket(&s.patient_id, seed, BUCKETS) < cut)
}

/// Index of each distinct value of `key` over the studies, sorted.
pub fn group_index(studies: &[StudyRecord], key: &str) -> BTreeMap<String, usize> {
    let names: BTreeSet<&str> = studies.iter().map(|s| s.group(key)).collect();
    names.into_iter().enumerate().map(|(i, n)| (n.to_string(), i)).collect()
}

pub(crate) fn features<'a>(
    provider: &dyn ImageFeatureProvider,
    studies: &'a [StudyRecord],
    batch: &[BatchItem],
) -> Result<(Vec<&'a GenomeSequence>, Vec<ImageFeatures>), TrainError> {
    let mut seqs = Vec::with_capacity(batch.len());
    let mut feats = Vec::with_capacity(batch.len());
    for it in batch {
        let s = &studies[it.study].series[it.series];
        seqs.push(&s.sequence);
        feats.push(provider.features(&s.series_uid)?);
    }
    Ok((seqs, feats))
}

pub(crate) fn jitter(feats: &[ImageFeatures], std: f64, rng: &mut ChaCha8Rng) -> Vec<Tensor> {
    use rand_distr::{Distribution, StandardNormal};
    feats
        .iter()
        .map(|f| {
            let (r, c) = f.tokens.shape();
            let data = (0..r * c)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(rng);
                    std * z
                })
                .collect();
            Tensor::new(r, c, data)
        })
        .collect()
}

/// SHA-256 over the named parameters' bytes, in store order.
pub fn params_digest(model: &ProtocolModel, prefix: &str) -> String {
    let mut h = Sha256::new();
    for (name, t) in model.params.iter() {
        if name.starts_with(prefix) {
            h.update(name.as_bytes());
            for v in &t.data {
                h.update(v.to_le_bytes());
            }
        }
    }
    hex::encode(h.finalize())
}

/// SHA-256 over the study records' canonical JSON.
pub fn corpus_hash(studies: &[StudyRecord]) -> String {
    hex::encode(Sha256::digest(serde_json::to_vec(studies).expect("records serialize")))
}

/// Writes records as newline-delimited JSON.
pub fn write_ndjson<T: Serialize>(records: &[T], mut w: impl Write) -> std::io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

/// Run metadata written next to every pipeline output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub corpus_hash: String,
    pub seed: u64,
    pub version: String,
    pub created: String,
    pub config: RunConfig,
    /// Named input paths, enough to rerun the command.
    #[serde(default)]
    pub inputs: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn new(command: &str, config: &RunConfig, corpus_hash: String) -> Self {
        RunManifest {
            command: command.into(),
            config_hash: config.hash(),
            corpus_hash,
            seed: config.seed,
            version: env!("CARGO_PKG_VERSION").into(),
            created: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
            config: config.clone(),
            inputs: BTreeMap::new(),
        }
    }
}
