//! Builds a vocabulary over a small synthetic corpus, tokenizes one header,
//! masks it and maps the tokens back to a header.

use protocol_genome::genome::{detokenize, mask_sequence, render_token, tokenize, GenomeVocab, VocabConfig};
use protocol_genome::synth::{generate_corpus, CorpusSpec};

fn main() {
    let corpus = generate_corpus(&CorpusSpec {
        n_studies: 200,
        ..CorpusSpec::default()
    })
    .expect("valid spec");
    let headers: Vec<_> = corpus.studies.iter().flat_map(|s| s.series.iter().map(|x| x.header.clone())).collect();
    let schema = protocol_genome::dicom::FieldSchema::default();
    let vocab = GenomeVocab::build(&headers, &schema, &VocabConfig::default()).expect("vocab");
    println!("vocabulary: {} ids, {} learned words", vocab.size(), vocab.learned_size());
    let h = &headers[0];
    let seq = tokenize(h, &vocab).expect("tokenize");
    let shown: Vec<String> = seq.token_ids.iter().map(|&t| render_token(t, &vocab)).collect();
    println!("tokens: {}", shown.join(" "));
    let (masked, plan) = mask_sequence(&seq, &vocab, 0.3, 0.2, 7);
    let shown: Vec<String> = masked.token_ids.iter().map(|&t| render_token(t, &vocab)).collect();
    println!("masked ({} positions): {}", plan.masked.len(), shown.join(" "));
    let back = detokenize(&seq, &vocab);
    for (a, b) in h.fields.iter().zip(&back.fields) {
        if a != b {
            println!("  {a:?} -> {b:?}");
        }
    }
}
