use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::report::MetricsReport;
use super::StatsError;

pub const SMOOTH_EPS: f64 = 1e-6;

/// Normalizes counts or masses to probabilities, replacing empty bins by
/// SMOOTH_EPS before renormalizing.
fn smooth(h: &[f64]) -> Vec<f64> {
    let total: f64 = h.iter().sum();
    let p: Vec<f64> = h
        .iter()
        .map(|&c| if total > 0.0 { c / total } else { 0.0 })
        .map(|v| if v <= 0.0 { SMOOTH_EPS } else { v })
        .collect();
    let s: f64 = p.iter().sum();
    p.into_iter().map(|v| v / s).collect()
}

fn check(a: &[f64], b: &[f64]) -> Result<(), StatsError> {
    if a.len() != b.len() || a.is_empty() {
        return Err(StatsError::BinMismatch(a.len(), b.len()));
    }
    Ok(())
}

pub fn psi(reference: &[f64], current: &[f64]) -> Result<f64, StatsError> {
    check(reference, current)?;
    let (p, q) = (smooth(reference), smooth(current));
    Ok(p.iter().zip(&q).map(|(a, b)| (a - b) * (a / b).ln()).sum::<f64>().max(0.0))
}

/// KL(p || q).
pub fn kl(p: &[f64], q: &[f64]) -> Result<f64, StatsError> {
    check(p, q)?;
    let (p, q) = (smooth(p), smooth(q));
    Ok(p.iter().zip(&q).map(|(a, b)| a * (a / b).ln()).sum::<f64>().max(0.0))
}

/// Histograms of categorical keys over bins fixed by the reference; keys
/// unseen in the reference fall into a trailing overflow bin.
pub fn key_histograms<'a, K: Ord>(reference: &'a [K], current: &[K]) -> (Vec<&'a K>, Vec<f64>, Vec<f64>) {
    let bins: Vec<&K> = reference.iter().collect::<BTreeSet<_>>().into_iter().collect();
    let index: BTreeMap<&K, usize> = bins.iter().enumerate().map(|(i, k)| (*k, i)).collect();
    let mut r = vec![0.0; bins.len() + 1];
    let mut c = vec![0.0; bins.len() + 1];
    for k in reference {
        r[index[k]] += 1.0;
    }
    for k in current {
        c[index.get(k).copied().unwrap_or(bins.len())] += 1.0;
    }
    (bins, r, c)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DriftThresholds {
    pub auroc_drop: f64,
    pub ece: f64,
    pub psi: f64,
}

impl Default for DriftThresholds {
    fn default() -> Self {
        DriftThresholds {
            auroc_drop: 0.05,
            ece: 0.06,
            psi: 0.2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Alert {
    AurocDrop {
        key: String,
        group: String,
        reference: f64,
        current: f64,
    },
    Ece {
        value: f64,
    },
    Psi {
        value: f64,
    },
}

// Comparisons ignore float noise from differencing decimal inputs.
const SLACK: f64 = 1e-9;

/// Compares the latest report against the first one in `history`.
pub fn drift_alert(history: &[MetricsReport], t: &DriftThresholds) -> Vec<Alert> {
    let (Some(reference), Some(current)) = (history.first(), history.last()) else {
        return Vec::new();
    };
    let mut alerts = Vec::new();
    if history.len() >= 2 {
        for row in &current.subgroups {
            if !matches!(row.key.as_str(), "vendor" | "model") {
                continue;
            }
            let Some(cur) = row.auroc.map(|c| c.point) else { continue };
            let prior = reference
                .subgroups
                .iter()
                .find(|r| r.key == row.key && r.group == row.group)
                .and_then(|r| r.auroc.map(|c| c.point));
            if let Some(prev) = prior {
                if prev - cur > t.auroc_drop + SLACK {
                    alerts.push(Alert::AurocDrop {
                        key: row.key.clone(),
                        group: row.group.clone(),
                        reference: prev,
                        current: cur,
                    });
                }
            }
        }
    }
    if current.ece > t.ece + SLACK {
        alerts.push(Alert::Ece { value: current.ece });
    }
    if let Some(p) = current.psi {
        if p > t.psi + SLACK {
            alerts.push(Alert::Psi { value: p });
        }
    }
    alerts
}
