use std::fmt::Write;

use crate::stats::{Ci, DriftThresholds, MetricsReport, PredictionRecord, ReportOptions};
use crate::trainer::RunManifest;

fn ci(c: &Option<Ci>) -> String {
    match c {
        Some(c) => format!("{:.3} [{:.3}, {:.3}]", c.point, c.lo, c.hi),
        None => "n/a".into(),
    }
}

/// Markdown model card; sections the pipeline cannot fill are left as
/// `TODO` prompts for the owner.
pub fn model_card(rep: &MetricsReport, records: &[PredictionRecord], m: &RunManifest, opts: &ReportOptions) -> String {
    let mut s = String::new();
    let sites: std::collections::BTreeSet<&str> = records.iter().map(|r| r.site.as_str()).collect();
    let vendors: std::collections::BTreeSet<&str> = records.iter().map(|r| r.vendor.as_str()).collect();
    let pos = records.iter().filter(|r| r.label == 1).count();
    let _ = writeln!(s, "# Model card\n");
    let _ = writeln!(s, "## Model details\n");
    let _ = writeln!(s, "| field | value |\n|---|---|");
    let _ = writeln!(s, "| producing command | `{}` |", m.command);
    let _ = writeln!(s, "| package version | {} |", m.version);
    let _ = writeln!(s, "| config hash | `{}` |", m.config_hash);
    let _ = writeln!(s, "| corpus hash | `{}` |", m.corpus_hash);
    let _ = writeln!(s, "| seed | {} |", m.seed);
    let _ = writeln!(s, "| created | {} |", m.created);
    let mc = &m.config.model;
    let _ = writeln!(
        s,
        "| encoder | d_model {}, {} layers, {} heads, fusion {} layers |",
        mc.d_model, mc.layers, mc.heads, mc.fusion_layers
    );
    let _ = writeln!(s, "| adversarial weight | {} |", m.config.weights.lambda_adv);
    for (k, v) in &m.inputs {
        let _ = writeln!(s, "| input `{k}` | `{v}` |");
    }
    let _ = writeln!(s, "\n## Intended use\n\nTODO: clinical task, population, and decisions this output may inform.\n");
    let _ = writeln!(s, "## Evaluation data\n");
    let _ = writeln!(
        s,
        "{} studies, {} positive; {} site(s): {}; {} vendor(s): {}.\n",
        records.len(),
        pos,
        sites.len(),
        sites.into_iter().collect::<Vec<_>>().join(", "),
        vendors.len(),
        vendors.into_iter().collect::<Vec<_>>().join(", ")
    );
    let _ = writeln!(s, "## Overall metrics\n");
    let _ = writeln!(s, "Intervals: {} site-stratified bootstrap replicates, seed {}.\n", opts.replicates, opts.seed);
    let _ = writeln!(s, "| metric | value |\n|---|---|");
    let _ = writeln!(s, "| AUROC | {} |", ci(&rep.auroc));
    let _ = writeln!(s, "| AUPRC | {} |", ci(&rep.auprc));
    let _ = writeln!(s, "| accuracy | {:.3} |", rep.accuracy);
    let _ = writeln!(s, "| sensitivity | {:.3} |", rep.sensitivity);
    let _ = writeln!(s, "| specificity | {:.3} |", rep.specificity);
    let _ = writeln!(s, "| ECE ({} bins) | {:.4} |", opts.bins, rep.ece);
    let _ = writeln!(s, "| Brier | {:.4} |", rep.brier);
    let _ = writeln!(s, "\n## Subgroups\n");
    let _ = writeln!(s, "| key | group | n | AUROC | ECE | note |\n|---|---|---|---|---|---|");
    for r in &rep.subgroups {
        let note = if r.small { "below minimum size" } else { "" };
        let _ = writeln!(s, "| {} | {} | {} | {} | {:.4} | {} |", r.key, r.group, r.n, ci(&r.auroc), r.ece, note);
    }
    if !rep.gaps.is_empty() {
        let _ = writeln!(s, "\nLargest AUROC gap per key:\n");
        for (k, g) in &rep.gaps {
            let _ = writeln!(s, "- {k}: {g:.3}");
        }
    }
    let rejected: Vec<_> = rep.tests.iter().filter(|t| t.reject).collect();
    let _ = writeln!(
        s,
        "\n{} pairwise subgroup comparison(s), {} significant after FDR control at q = {}.",
        rep.tests.len(),
        rejected.len(),
        opts.fdr_q
    );
    for t in rejected {
        let _ = writeln!(s, "- {} {} vs {}: p = {:.4}", t.key, t.a, t.b, t.p);
    }
    let d = DriftThresholds::default();
    let _ = writeln!(s, "\n## Monitoring\n");
    let _ = writeln!(
        s,
        "Alert when a vendor or model subgroup AUROC drops by more than {}, ECE exceeds {}, or protocol PSI exceeds {}.\n",
        d.auroc_drop, d.ece, d.psi
    );
    let _ = writeln!(s, "## Limitations\n\nTODO: known failure modes, unsupported protocols, and populations not represented.\n");
    let _ = writeln!(s, "## Files\n\n- `report.json`\n- `subgroups.csv`\n- `roc.csv`\n- `reliability.csv`");
    s
}
