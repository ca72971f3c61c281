use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use super::inference::{bh_fdr, bootstrap_ci, delong_unpaired, Ci};
use super::metrics::{auprc, auroc, brier, ece, reliability_bins, roc_points, Confusion};
use super::StatsError;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub item_id: String,
    pub probs: Vec<f64>,
    pub pred: usize,
    pub label: usize,
    #[serde(default)]
    pub site: String,
    #[serde(default)]
    pub vendor: String,
    #[serde(default)]
    pub model: String,
    #[serde(default)]
    pub age_band: String,
    #[serde(default)]
    pub sex: String,
    #[serde(default)]
    pub protocol_key: String,
}

impl PredictionRecord {
    pub fn positive_prob(&self) -> f64 {
        self.probs.get(1).copied().unwrap_or(0.0)
    }

    pub fn key(&self, k: &str) -> &str {
        match k {
            "site" => &self.site,
            "vendor" => &self.vendor,
            "model" => &self.model,
            "age_band" => &self.age_band,
            "sex" => &self.sex,
            "protocol" => &self.protocol_key,
            _ => "",
        }
    }
}

pub const SUBGROUP_KEYS: [&str; 6] = ["site", "vendor", "model", "age_band", "sex", "protocol"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportOptions {
    pub bins: usize,
    pub replicates: usize,
    pub seed: u64,
    /// Subgroups smaller than this are flagged and not scored.
    pub min_n: usize,
    pub fdr_q: f64,
}

impl Default for ReportOptions {
    fn default() -> Self {
        ReportOptions {
            bins: 15,
            replicates: 1000,
            seed: 0,
            min_n: 10,
            fdr_q: 0.05,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SubgroupRow {
    pub key: String,
    pub group: String,
    pub n: usize,
    pub auroc: Option<Ci>,
    pub auprc: Option<Ci>,
    pub ece: f64,
    pub brier: f64,
    /// Below the minimum size; metrics were not computed.
    pub small: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairwiseTest {
    pub key: String,
    pub a: String,
    pub b: String,
    pub z: f64,
    pub p: f64,
    pub reject: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n: usize,
    pub accuracy: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub f1: f64,
    pub auroc: Option<Ci>,
    pub auprc: Option<Ci>,
    pub ece: f64,
    pub brier: f64,
    #[serde(default)]
    pub subgroups: Vec<SubgroupRow>,
    /// Best minus worst subgroup AUROC per key.
    #[serde(default)]
    pub gaps: BTreeMap<String, f64>,
    #[serde(default)]
    pub tests: Vec<PairwiseTest>,
    #[serde(default)]
    pub psi: Option<f64>,
}

fn binary(records: &[&PredictionRecord]) -> (Vec<f64>, Vec<bool>) {
    records.iter().map(|r| (r.positive_prob(), r.label == 1)).unzip()
}

fn ci_of<F>(records: &[&PredictionRecord], opts: &ReportOptions, f: F) -> Option<Ci>
where
    F: Fn(&[f64], &[bool]) -> Result<f64, StatsError>,
{
    let (s, y) = binary(records);
    let strata: Vec<&str> = records.iter().map(|r| r.site.as_str()).collect();
    bootstrap_ci(&strata, opts.replicates, opts.seed, |idx| {
        let ss: Vec<f64> = idx.iter().map(|&i| s[i]).collect();
        let yy: Vec<bool> = idx.iter().map(|&i| y[i]).collect();
        f(&ss, &yy).ok()
    })
    .ok()
}

/// Overall binary metrics with site-stratified bootstrap CIs.
pub fn evaluate(records: &[PredictionRecord], opts: &ReportOptions) -> MetricsReport {
    let refs: Vec<&PredictionRecord> = records.iter().collect();
    let (s, y) = binary(&refs);
    let pred: Vec<bool> = records.iter().map(|r| r.pred == 1).collect();
    let c = Confusion::new(&pred, &y);
    MetricsReport {
        n: records.len(),
        accuracy: c.accuracy(),
        sensitivity: c.sensitivity(),
        specificity: c.specificity(),
        f1: c.f1(),
        auroc: ci_of(&refs, opts, auroc),
        auprc: ci_of(&refs, opts, auprc),
        ece: ece(&s, &y, opts.bins),
        brier: brier(&s, &y),
        ..Default::default()
    }
}

/// Overall metrics plus one row per subgroup of each key, AUROC gaps and
/// BH-corrected pairwise AUROC comparisons within each key.
pub fn subgroup_report(records: &[PredictionRecord], keys: &[&str], opts: &ReportOptions) -> MetricsReport {
    let mut report = evaluate(records, opts);
    let mut raw_tests = Vec::new();
    for &key in keys {
        let mut groups: BTreeMap<&str, Vec<&PredictionRecord>> = BTreeMap::new();
        for r in records {
            groups.entry(r.key(key)).or_default().push(r);
        }
        let mut scored: Vec<(&str, f64)> = Vec::new();
        for (g, members) in &groups {
            let (s, y) = binary(members);
            let small = members.len() < opts.min_n;
            let row = if small {
                SubgroupRow {
                    key: key.into(),
                    group: g.to_string(),
                    n: members.len(),
                    small,
                    ..Default::default()
                }
            } else {
                SubgroupRow {
                    key: key.into(),
                    group: g.to_string(),
                    n: members.len(),
                    auroc: ci_of(members, opts, auroc),
                    auprc: ci_of(members, opts, auprc),
                    ece: ece(&s, &y, opts.bins),
                    brier: brier(&s, &y),
                    small,
                }
            };
            if let Some(a) = row.auroc {
                scored.push((g, a.point));
            }
            report.subgroups.push(row);
        }
        let gap = match (
            scored.iter().map(|x| x.1).reduce(f64::max),
            scored.iter().map(|x| x.1).reduce(f64::min),
        ) {
            (Some(hi), Some(lo)) => hi - lo,
            _ => 0.0,
        };
        report.gaps.insert(key.into(), gap);
        for i in 0..scored.len() {
            for j in i + 1..scored.len() {
                let (a, b) = (binary(&groups[scored[i].0]), binary(&groups[scored[j].0]));
                if let Ok(t) = delong_unpaired((&a.0, &a.1), (&b.0, &b.1)) {
                    raw_tests.push((key, scored[i].0, scored[j].0, t.z, t.p));
                }
            }
        }
    }
    let p: Vec<f64> = raw_tests.iter().map(|t| t.4).collect();
    let rej = bh_fdr(&p, opts.fdr_q);
    report.tests = raw_tests
        .into_iter()
        .zip(rej)
        .map(|((key, a, b, z, p), reject)| PairwiseTest {
            key: key.into(),
            a: a.into(),
            b: b.into(),
            z,
            p,
            reject,
        })
        .collect();
    report
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// One row per subgroup: key, group, n, AUROC and AUPRC with CI, ECE, Brier.
    pub fn write_subgroup_csv<W: Write>(&self, w: W) -> csv::Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record([
            "key", "group", "n", "auroc", "auroc_lo", "auroc_hi", "auprc", "auprc_lo", "auprc_hi", "ece", "brier",
        ])?;
        let ci = |c: &Option<Ci>| match c {
            Some(c) => [c.point.to_string(), c.lo.to_string(), c.hi.to_string()],
            None => [String::new(), String::new(), String::new()],
        };
        for r in &self.subgroups {
            let a = ci(&r.auroc);
            let p = ci(&r.auprc);
            out.write_record([
                r.key.clone(),
                r.group.clone(),
                r.n.to_string(),
                a[0].clone(),
                a[1].clone(),
                a[2].clone(),
                p[0].clone(),
                p[1].clone(),
                p[2].clone(),
                r.ece.to_string(),
                r.brier.to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct PredictionRow {
    item_id: String,
    score: f64,
    label: usize,
    #[serde(default)]
    site: String,
    #[serde(default)]
    vendor: String,
    #[serde(default)]
    model: String,
    #[serde(default)]
    age_band: String,
    #[serde(default)]
    sex: String,
    #[serde(default)]
    protocol_key: String,
}

/// Binary predictions as CSV with header
/// `item_id,score,label,site,vendor,model,age_band,sex,protocol_key`.
pub fn write_predictions_csv<W: Write>(records: &[PredictionRecord], w: W) -> csv::Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in records {
        out.serialize(PredictionRow {
            item_id: r.item_id.clone(),
            score: r.positive_prob(),
            label: r.label,
            site: r.site.clone(),
            vendor: r.vendor.clone(),
            model: r.model.clone(),
            age_band: r.age_band.clone(),
            sex: r.sex.clone(),
            protocol_key: r.protocol_key.clone(),
        })?;
    }
    out.flush()?;
    Ok(())
}

/// Reads the CSV written by `write_predictions_csv`; the predicted class
/// thresholds the score at 0.5.
pub fn read_predictions_csv<R: std::io::Read>(r: R) -> csv::Result<Vec<PredictionRecord>> {
    let mut rd = csv::Reader::from_reader(r);
    rd.deserialize::<PredictionRow>()
        .map(|row| {
            row.map(|p| PredictionRecord {
                item_id: p.item_id,
                probs: vec![1.0 - p.score, p.score],
                pred: usize::from(p.score >= 0.5),
                label: p.label,
                site: p.site,
                vendor: p.vendor,
                model: p.model,
                age_band: p.age_band,
                sex: p.sex,
                protocol_key: p.protocol_key,
            })
        })
        .collect()
}

/// ROC vertices as CSV rows `fpr,tpr`.
pub fn write_roc_csv<W: Write>(records: &[PredictionRecord], w: W) -> csv::Result<()> {
    let refs: Vec<&PredictionRecord> = records.iter().collect();
    let (s, y) = binary(&refs);
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["fpr", "tpr"])?;
    for (f, t) in roc_points(&s, &y).unwrap_or_default() {
        out.write_record([f.to_string(), t.to_string()])?;
    }
    out.flush()?;
    Ok(())
}

/// Reliability-diagram bins as CSV.
pub fn write_reliability_csv<W: Write>(records: &[PredictionRecord], bins: usize, w: W) -> csv::Result<()> {
    let refs: Vec<&PredictionRecord> = records.iter().collect();
    let (s, y) = binary(&refs);
    let mut out = csv::Writer::from_writer(w);
    for b in reliability_bins(&s, &y, bins) {
        out.serialize(b)?;
    }
    out.flush()?;
    Ok(())
}
