//! Discrimination, calibration, hypothesis tests, drift and subgroup
//! reporting.

mod calibration;
mod drift;
mod inference;
mod metrics;
mod report;
mod sensitivity;

pub use calibration::{apply_temperature, isotonic_fit, nll, softmax, temperature_fit, Isotonic, T_MAX, T_MIN};
pub use drift::{drift_alert, key_histograms, kl, psi, Alert, DriftThresholds, SMOOTH_EPS};
pub use inference::{
    bh_fdr, bootstrap_ci, delong_test, delong_unpaired, delong_variance, mcnemar, mcnemar_chi2, mcnemar_exact,
    mutual_information, paired_t_greater, two_sided_normal_p, Ci, DeLong,
};
pub use metrics::{
    auprc, auroc, brier, dice, ece, jaccard, mask_set, midranks, reliability_bins, roc_points,
    sensitivity_at_specificity, top_label, Confusion, ReliabilityBin,
};
pub use report::{
    evaluate, read_predictions_csv, subgroup_report, write_predictions_csv, write_reliability_csv, write_roc_csv,
    MetricsReport, PairwiseTest, PredictionRecord,
    ReportOptions, SubgroupRow, SUBGROUP_KEYS,
};
pub use sensitivity::{protocol_sensitivity, SensitivityEntry};

/// ECE bin count used throughout.
pub const ECE_BINS: usize = 15;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum StatsError {
    #[error("both classes must be present")]
    DegenerateLabels,
    #[error("paired structural components have zero variance but the AUROCs differ")]
    ZeroVariance,
    #[error("empty stratum")]
    EmptyStratum,
    #[error("histograms have {0} and {1} bins")]
    BinMismatch(usize, usize),
    #[error("inputs have lengths {0} and {1}")]
    LengthMismatch(usize, usize),
    #[error("unknown field {0}")]
    UnknownField(String),
    #[error("model evaluation failed: {0}")]
    Model(String),
}
