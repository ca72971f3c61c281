//! Pretrains on the default aligned synthetic corpus and reports top-1
//! header/feature retrieval in batches of 64.
//!
//! `cargo run --release --example pretrain_synthetic [epochs]`

use std::time::Instant;

use protocol_genome::genome::VocabConfig;
use protocol_genome::synth::{generate_corpus, CorpusSpec};
use protocol_genome::trainer::{batch_retrieval_top1, pretrain, synth_records, synth_vocab, RunConfig};

fn main() {
    let mut cfg = RunConfig::from_toml(include_str!("../configs/retrieval.toml")).expect("config");
    if let Some(e) = std::env::args().nth(1).and_then(|a| a.parse().ok()) {
        cfg.epochs = e;
    }
    let corpus = generate_corpus(&CorpusSpec::default()).expect("valid spec");
    let vocab = synth_vocab(&corpus, &VocabConfig::default()).expect("vocab");
    let studies = synth_records(&corpus, &vocab).expect("records");
    let t = Instant::now();
    let out = pretrain(&studies, &corpus.provider, &vocab, &cfg, None).expect("pretrain");
    for r in out.log.iter().step_by(16) {
        println!("step {:4} l_pic {:.4} l_mpm {:.4} l_p2p {:.4}", r.step, r.l_pic, r.l_mpm, r.l_p2p);
    }
    let acc = batch_retrieval_top1(&out.model, &studies, &corpus.provider, 64, 1).expect("retrieval");
    println!("top-1 retrieval at B=64: {acc:.3} ({:.1}s)", t.elapsed().as_secs_f64());
}
