use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{finetune, patient_split, predict, RunConfig, StudyRecord, TrainError};
use crate::model::{ImageFeatureProvider, ProtocolModel};
use crate::stats::{
    apply_temperature, nll, subgroup_report, temperature_fit, write_predictions_csv, MetricsReport, PredictionRecord,
    ReportOptions, SUBGROUP_KEYS,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub site: String,
    pub n_train: usize,
    pub n_cal: usize,
    pub n_ext: usize,
    pub temperature: f64,
    pub cal_nll_before: f64,
    pub cal_nll_after: f64,
    pub report: MetricsReport,
    pub predictions: Vec<PredictionRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeldoutReport {
    pub folds: Vec<FoldReport>,
}

impl HeldoutReport {
    /// `report.json` plus `predictions_<site>.csv` per fold.
    pub fn write(&self, dir: &Path) -> Result<(), TrainError> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(
            dir.join("report.json"),
            serde_json::to_string_pretty(self).expect("report serializes"),
        )?;
        for f in &self.folds {
            let file = std::fs::File::create(dir.join(format!("predictions_{}.csv", f.site)))?;
            write_predictions_csv(&f.predictions, file).map_err(|e| TrainError::Model(e.to_string()))?;
        }
        Ok(())
    }
}

/// Temperature-scaled prediction records, one per study.
pub fn prediction_records(
    studies: &[StudyRecord],
    logits: &[Vec<f64>],
    t: f64,
) -> Vec<PredictionRecord> {
    apply_temperature(logits, t)
        .into_iter()
        .zip(studies)
        .map(|(probs, s)| {
            let pred = (0..probs.len()).fold(0, |b, c| if probs[c] > probs[b] { c } else { b });
            PredictionRecord {
                item_id: s.study_id.clone(),
                probs,
                pred,
                label: s.label.unwrap_or(0),
                site: s.site.clone(),
                vendor: s.vendor.clone(),
                model: s.model.clone(),
                age_band: s.age_band.clone(),
                sex: s.sex.clone(),
                protocol_key: s.series[0].protocol_key.clone(),
            }
        })
        .collect()
}

fn fold(
    site: &str,
    studies: &[StudyRecord],
    provider: &(dyn ImageFeatureProvider + Sync),
    pretrained: &ProtocolModel,
    cfg: &RunConfig,
    opts: &ReportOptions,
) -> Result<FoldReport, TrainError> {
    let (held, train): (Vec<StudyRecord>, Vec<StudyRecord>) = studies.iter().cloned().partition(|s| s.site == site);
    let (cal, ext) = patient_split(&held, cfg.calibration_fraction, cfg.seed);
    let out = finetune(&train, None, provider, pretrained, cfg)?;
    let logits = |set: &[StudyRecord]| -> Result<Vec<Vec<f64>>, TrainError> {
        Ok(predict(&out.model, set, provider)?.into_iter().map(|p| p.logits).collect())
    };
    let cal_logits = logits(&cal)?;
    let cal_labels: Vec<usize> = cal.iter().map(|s| s.label.unwrap_or(0)).collect();
    let t = if cal.is_empty() { 1.0 } else { temperature_fit(&cal_logits, &cal_labels) };
    let predictions = prediction_records(&ext, &logits(&ext)?, t);
    let report = subgroup_report(&predictions, &SUBGROUP_KEYS, opts);
    Ok(FoldReport {
        site: site.to_string(),
        n_train: train.len(),
        n_cal: cal.len(),
        n_ext: ext.len(),
        temperature: t,
        cal_nll_before: nll(&cal_logits, &cal_labels, 1.0),
        cal_nll_after: nll(&cal_logits, &cal_labels, t),
        report,
        predictions,
    })
}

/// One fold per site: finetune on the other sites, fit a temperature on
/// a patient-disjoint calibration part of the held-out site, and report
/// metrics on the rest. Folds run in parallel.
pub fn evaluate_site_heldout(
    studies: &[StudyRecord],
    provider: &(dyn ImageFeatureProvider + Sync),
    pretrained: &ProtocolModel,
    cfg: &RunConfig,
    opts: &ReportOptions,
) -> Result<HeldoutReport, TrainError> {
    let sites: Vec<&str> = studies.iter().map(|s| s.site.as_str()).collect::<BTreeSet<_>>().into_iter().collect();
    if sites.len() < 2 {
        return Err(TrainError::SingleSiteCorpus);
    }
    let folds = std::thread::scope(|sc| {
        let handles: Vec<_> = sites
            .iter()
            .map(|site| sc.spawn(move || fold(site, studies, provider, pretrained, cfg, opts)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("fold thread panicked"))
            .collect::<Result<Vec<_>, _>>()
    })?;
    Ok(HeldoutReport { folds })
}
