//! Leave-one-site-out evaluation on a small two-site synthetic corpus:
//! finetune on the other site, fit a temperature on part of the held-out
//! site, report on the rest.

use protocol_genome::genome::VocabConfig;
use protocol_genome::model::ModelConfig;
use protocol_genome::stats::ReportOptions;
use protocol_genome::synth::{generate_corpus, CorpusSpec};
use protocol_genome::trainer::{evaluate_site_heldout, pretrain, synth_records, synth_vocab, RunConfig};

fn main() {
    let corpus = generate_corpus(&CorpusSpec {
        n_studies: 240,
        n_vendors: 2,
        d_img: 16,
        ..CorpusSpec::default()
    })
    .expect("valid spec");
    let vocab = synth_vocab(&corpus, &VocabConfig::default()).expect("vocab");
    let studies = synth_records(&corpus, &vocab).expect("records");
    let cfg = RunConfig {
        model: ModelConfig {
            d_model: 32,
            d_img: 16,
            ..ModelConfig::default()
        },
        epochs: 3,
        finetune_epochs: 10,
        lr: 2e-3,
        lr_heads: 1e-2,
        lr_backbone: 3e-3,
        ..RunConfig::default()
    };
    let pre = pretrain(&studies, &corpus.provider, &vocab, &cfg, None).expect("pretrain");
    let opts = ReportOptions {
        replicates: 200,
        ..ReportOptions::default()
    };
    let rep = evaluate_site_heldout(&studies, &corpus.provider, &pre.model, &cfg, &opts).expect("evaluation");
    for f in &rep.folds {
        println!(
            "{}: train {} cal {} ext {}  T {:.3}  cal NLL {:.4} -> {:.4}  AUROC {:.3}  ECE {:.4}",
            f.site,
            f.n_train,
            f.n_cal,
            f.n_ext,
            f.temperature,
            f.cal_nll_before,
            f.cal_nll_after,
            f.report.auroc.map_or(f64::NAN, |c| c.point),
            f.report.ece
        );
    }
}
