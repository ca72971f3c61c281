use super::*;
use crate::dicom::{FieldSchema, HeaderField, ProtocolHeader};
use crate::genome::{tokenize, VocabConfig};
use crate::numeric::grad_check;

pub(crate) fn fixture_vocab() -> (GenomeVocab, Vec<GenomeSequence>) {
    let schema = FieldSchema::default();
    let texts = ["CHEST PE", "HEAD ROUTINE", "ABD PELVIS", "CHEST LOW DOSE"];
    let headers: Vec<ProtocolHeader> = (0..8)
        .map(|i| {
            let mut h = ProtocolHeader::empty(&schema);
            *h.field_mut("ProtocolName").unwrap() = HeaderField::Categorical {
                name: "ProtocolName".into(),
                text: texts[i % 4].into(),
            };
            *h.field_mut("KVP").unwrap() = HeaderField::Continuous {
                name: "KVP".into(),
                value: 80.0 + 10.0 * (i % 3) as f64,
                unit: None,
            };
            *h.field_mut("SliceThickness").unwrap() = HeaderField::Continuous {
                name: "SliceThickness".into(),
                value: 0.5 + 0.37 * i as f64,
                unit: None,
            };
            h
        })
        .collect();
    let cfg = VocabConfig {
        hash_bucket_count: 16,
        bins_per_field: 4,
        ..VocabConfig::default()
    };
    let v = GenomeVocab::build(&headers, &schema, &cfg).unwrap();
    let seqs = headers.iter().map(|h| tokenize(h, &v).unwrap()).collect();
    (v, seqs)
}

pub(crate) fn tiny_config() -> ModelConfig {
    ModelConfig {
        d_model: 8,
        layers: 1,
        heads: 2,
        d_ff: 12,
        sin_width: 4,
        proj_dim: 4,
        fusion_layers: 1,
        clin_dim: 4,
        n_classes: 2,
        n_adv_classes: 2,
        p2p_layers: 1,
        d_img: 6,
        init_seed: 3,
    }
}

pub(crate) fn fixture_images(n: usize, m: usize, d: usize) -> Vec<ImageFeatures> {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    (0..n)
        .map(|_| ImageFeatures {
            tokens: Tensor::randn(m, d, 1.0, &mut rng),
        })
        .collect()
}

#[test]
fn sinusoidal_examples() {
    let z = sinusoidal_project(0.0, 8);
    for k in 0..4 {
        assert_eq!(z[2 * k], 0.0);
        assert_eq!(z[2 * k + 1], 1.0);
    }
    let v = sinusoidal_project(1.0, 4);
    let want = [1f64.sin(), 1f64.cos(), (0.01f64).sin(), (0.01f64).cos()];
    for (a, b) in v.iter().zip(want) {
        assert!((a - b).abs() < 1e-15);
    }
    for x in [-1e6, -3.3, 7.0, 1e9] {
        assert!(sinusoidal_project(x, 16).iter().all(|c| c.abs() <= 1.0));
    }
}

#[test]
fn encoder_properties() {
    let (v, seqs) = fixture_vocab();
    let m = ProtocolModel::new(ModelConfig::default(), VocabLayout::from_vocab(&v));
    let pooled = |s: &GenomeSequence| {
        let mut g = Graph::new(&m.params);
        let e = m.encode(&mut g, &[s]).unwrap();
        g.value(e.pooled).data.clone()
    };
    assert_eq!(pooled(&seqs[0]), pooled(&seqs[0]));
    let missing = tokenize(&ProtocolHeader::empty(&v.schema), &v).unwrap();
    assert!(pooled(&missing).iter().all(|x| x.is_finite()));
    let mut changed = seqs[0].clone();
    changed.token_ids[0] = v.word_id("HEAD").unwrap();
    changed.blend_ids[0] = changed.token_ids[0];
    assert_ne!(pooled(&changed), pooled(&seqs[0]));
}

#[test]
fn batch_encoding_matches_single() {
    let (v, seqs) = fixture_vocab();
    let m = ProtocolModel::new(tiny_config(), VocabLayout::from_vocab(&v));
    let mut g = Graph::new(&m.params);
    let refs: Vec<&GenomeSequence> = seqs.iter().take(3).collect();
    let e = m.encode(&mut g, &refs).unwrap();
    let batch = g.value(e.pooled).clone();
    for (i, s) in refs.iter().enumerate() {
        let mut g1 = Graph::new(&m.params);
        let e1 = m.encode(&mut g1, &[s]).unwrap();
        let one = g1.value(e1.pooled);
        for (a, b) in one.data.iter().zip(batch.row_slice(i)) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn film_starts_as_identity_and_single_token_attention() {
    let (v, seqs) = fixture_vocab();
    let cfg = tiny_config();
    let m = ProtocolModel::new(cfg.clone(), VocabLayout::from_vocab(&v));
    let imgs = fixture_images(2, 1, cfg.d_img);
    let mut g = Graph::new(&m.params);
    let enc = m.encode(&mut g, &[&seqs[0], &seqs[1]]).unwrap();
    let img = m.encode_image(&mut g, &[&imgs[0], &imgs[1]], None).unwrap();
    let f = m.fuse(&mut g, &img, &enc).unwrap();
    assert_eq!(g.value(f.film_tokens), g.value(img.tokens));
    assert!(g.value(f.gamma).data.iter().all(|&x| x == 1.0));
    // One key: attention output is that key's value projection.
    let mem = g.slice_rows(img.tokens, 0, 1).unwrap();
    let q = g.slice_rows(enc.states, 0, seqs[0].len()).unwrap();
    let n = seqs[0].len();
    let a = m.mha(&mut g, "fuse.l0.xattn", q, mem, &[0, n], &[0, 1], false).unwrap();
    let vproj = linear(&mut g, mem, "fuse.l0.xattn.v").unwrap();
    let want = linear(&mut g, vproj, "fuse.l0.xattn.o").unwrap();
    for r in 0..n {
        for (x, y) in g.value(a).row_slice(r).iter().zip(&g.value(want).data) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn fused_graph_grad_check() {
    let (v, seqs) = fixture_vocab();
    let cfg = tiny_config();
    let mut m = ProtocolModel::new(cfg.clone(), VocabLayout::from_vocab(&v));
    // Move FiLM off its zero initialization so its gradients are exercised.
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for name in ["fuse.film.gamma.w", "fuse.film.beta.w"] {
        let id = m.params.id(name).unwrap();
        *m.params.get_mut(id) = Tensor::randn(cfg.d_model, cfg.d_model, 0.3, &mut rng);
    }
    let imgs = fixture_images(3, 2, cfg.d_img);
    let w = Tensor::randn(3, cfg.d_model, 1.0, &mut rng);
    let rep = grad_check(
        &m.params,
        |g| {
            let enc = m.encode(g, &[&seqs[0], &seqs[1], &seqs[2]]).unwrap();
            let img = m.encode_image(g, &[&imgs[0], &imgs[1], &imgs[2]], None).unwrap();
            let f = m.fuse(g, &img, &enc).unwrap();
            let wv = g.constant(w.clone());
            let p = g.mul(f.fused, wv).unwrap();
            g.sum(p)
        },
        1e-5,
        6,
        1,
    );
    assert!(rep.max_rel_error <= 1e-4, "{rep:?}");
}

#[test]
fn translate_emits_schema_shaped_sequence() {
    let (v, seqs) = fixture_vocab();
    let m = ProtocolModel::new(tiny_config(), VocabLayout::from_vocab(&v));
    let out = m.translate(&seqs[0], &v).unwrap();
    assert!(out.parallel_lengths_agree());
    assert_eq!(m.field_count(&out), v.fields.len());
    let h = crate::genome::detokenize(&out, &v);
    assert_eq!(h.fields.len(), v.fields.len());
}
