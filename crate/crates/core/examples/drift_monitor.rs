//! Builds a reference and a drifted deployment batch of predictions and
//! runs the drift checks over the two subgroup reports.

use protocol_genome::stats::{
    drift_alert, key_histograms, kl, psi, subgroup_report, DriftThresholds, PredictionRecord, ReportOptions,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn batch(seed: u64, siemens_noise: f64, protocol_mix: f64) -> Vec<PredictionRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..2000)
        .map(|i| {
            let vendor = if rng.random::<f64>() < 0.5 { "GE" } else { "SIEMENS" };
            let label = usize::from(rng.random::<f64>() < 0.3);
            let noise = if vendor == "SIEMENS" { siemens_noise } else { 0.3 };
            let p = (0.25 + 0.5 * label as f64 + noise * (rng.random::<f64>() * 2.0 - 1.0)).clamp(0.01, 0.99);
            let protocol = if rng.random::<f64>() < protocol_mix { "CT|CHEST LOW DOSE" } else { "CT|CHEST ROUTINE" };
            PredictionRecord {
                item_id: format!("s{i}"),
                probs: vec![1.0 - p, p],
                pred: usize::from(p >= 0.5),
                label,
                site: "SITE1".into(),
                vendor: vendor.into(),
                model: format!("{vendor}-1"),
                age_band: "40-59".into(),
                sex: "F".into(),
                protocol_key: protocol.into(),
            }
        })
        .collect()
}

fn main() {
    let reference = batch(1, 0.3, 0.2);
    let current = batch(2, 0.6, 0.6);
    let opts = ReportOptions {
        replicates: 200,
        ..ReportOptions::default()
    };
    let r0 = subgroup_report(&reference, &["vendor"], &opts);
    let mut r1 = subgroup_report(&current, &["vendor"], &opts);
    let rk: Vec<&str> = reference.iter().map(|r| r.protocol_key.as_str()).collect();
    let ck: Vec<&str> = current.iter().map(|r| r.protocol_key.as_str()).collect();
    let (bins, h0, h1) = key_histograms(&rk, &ck);
    println!("protocol bins {bins:?}");
    println!("PSI {:.4}  KL {:.4}", psi(&h0, &h1).expect("same bins"), kl(&h0, &h1).expect("same bins"));
    r1.psi = psi(&h0, &h1).ok();
    for row in r0.subgroups.iter().chain(&r1.subgroups) {
        println!("{} {}: AUROC {:?}", row.key, row.group, row.auroc.map(|c| c.point));
    }
    for a in drift_alert(&[r0, r1], &DriftThresholds::default()) {
        println!("alert: {}", serde_json::to_string(&a).expect("alert serializes"));
    }
}
