//! Finetunes on a vendor-confounded synthetic corpus with and without the
//! adversary and compares how much vendor information reaches the
//! predictions.
//!
//! `cargo run --release --example debias_synthetic [seeds]`

use protocol_genome::genome::VocabConfig;
use protocol_genome::stats::{auroc, mutual_information, paired_t_greater, softmax};
use protocol_genome::synth::{generate_corpus, CorpusSpec};
use protocol_genome::trainer::{
    adversary_balanced_accuracy, finetune, patient_split, predict, pretrain, synth_records, synth_vocab, RunConfig,
};

fn main() {
    let seeds: u64 = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(5);
    let corpus = generate_corpus(&CorpusSpec {
        n_vendors: 2,
        confounding: 0.6,
        prevalence: 0.5,
        disease_strength: 1.0,
        ..CorpusSpec::default()
    })
    .expect("valid spec");
    let vocab = synth_vocab(&corpus, &VocabConfig::default()).expect("vocab");
    let studies = synth_records(&corpus, &vocab).expect("records");
    let (train, test) = patient_split(&studies, 0.7, 0);
    let base = RunConfig::from_toml(include_str!("../configs/debias.toml")).expect("config");
    let pre = pretrain(&train, &corpus.provider, &vocab, &base, None).expect("pretrain");
    let vendors: Vec<&str> = test.iter().map(|s| s.vendor.as_str()).collect();
    let labels: Vec<bool> = test.iter().map(|s| s.label == Some(1)).collect();
    let mut mi = [Vec::new(), Vec::new()];
    for seed in 0..seeds {
        for (k, lambda) in [0.3, 0.0].into_iter().enumerate() {
            let mut cfg = RunConfig { seed, ..base.clone() };
            cfg.weights.lambda_adv = lambda;
            let out = finetune(&train, None, &corpus.provider, &pre.model, &cfg).expect("finetune");
            let preds = predict(&out.model, &test, &corpus.provider).expect("predict");
            let yhat: Vec<usize> = preds.iter().map(|p| usize::from(p.logits[1] > p.logits[0])).collect();
            let p: Vec<f64> = preds.iter().map(|p| softmax(&p.logits)[1]).collect();
            let ba = adversary_balanced_accuracy(&out, &test, &corpus.provider, "vendor").expect("adversary");
            let m = mutual_information(&yhat, &vendors);
            println!(
                "seed {seed} lambda_adv {lambda}: adversary BA {ba:.3}  MI(pred; vendor) {m:.4}  AUROC {:.3}",
                auroc(&p, &labels).unwrap_or(f64::NAN)
            );
            mi[k].push(m);
        }
    }
    if seeds >= 2 {
        let (t, p) = paired_t_greater(&mi[1], &mi[0]).expect("paired test");
        println!("MI without minus with adversary: t = {t:.3}, one-sided p = {p:.4}");
    }
}
