use super::*;
use crate::genome::mask_sequence;
use crate::model::tests::{fixture_images, fixture_vocab, tiny_config};
use crate::model::{ProtocolModel, VocabLayout};
use crate::numeric::{grad_check, AdamW, OptimState, ParamStore};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn pic_value(z: &Tensor, u: &Tensor, tau: f64) -> f64 {
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let zv = g.constant(z.clone());
    let uv = g.constant(u.clone());
    let l = loss_pic(&mut g, zv, uv, tau).unwrap();
    g.scalar(l)
}

// Direct double sum, independent of the graph kernels.
fn pic_oracle(z: &Tensor, u: &Tensor, tau: f64) -> f64 {
    let norm = |r: &[f64]| {
        let n = r.iter().map(|x| x * x).sum::<f64>().sqrt();
        r.iter().map(|x| x / n).collect::<Vec<_>>()
    };
    let n = z.rows;
    let zs: Vec<_> = (0..n).map(|i| norm(z.row_slice(i))).collect();
    let us: Vec<_> = (0..n).map(|i| norm(u.row_slice(i))).collect();
    let s = |i: usize, j: usize| zs[i].iter().zip(&us[j]).map(|(a, b)| a * b).sum::<f64>() / tau;
    let mut total = 0.0;
    for i in 0..n {
        let row: f64 = (0..n).map(|j| s(i, j).exp()).sum();
        let col: f64 = (0..n).map(|j| s(j, i).exp()).sum();
        total += s(i, i) - row.ln() + s(i, i) - col.ln();
    }
    -total / n as f64
}

#[test]
fn pic_examples() {
    let one = Tensor::from_rows(&[vec![0.3, -1.0, 2.0]]);
    assert!(pic_value(&one, &Tensor::from_rows(&[vec![1.0, 1.0, 0.0]]), 0.07).abs() < 1e-12);
    let same = Tensor::from_rows(&vec![vec![1.0, 2.0]; 4]);
    assert!((pic_value(&same, &same, 0.3) - 2.0 * 4f64.ln()).abs() < 1e-12);
    let e = Tensor::eye(2);
    let want = 2.0 * (1.0 + std::f64::consts::E).ln() - 2.0;
    assert!((pic_value(&e, &e, 1.0) - want).abs() < 1e-12);
    assert!((want - 0.62652).abs() < 1e-5);
    assert!((pic_oracle(&e, &e, 1.0) - want).abs() < 1e-12);
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let z = g.constant(e.clone());
    assert_eq!(
        loss_pic(&mut g, z, z, 0.0).unwrap_err(),
        ObjectiveError::NonPositiveTemperature(0.0)
    );
}

fn random_pair(n: usize, k: usize, seed: u64) -> (Tensor, Tensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (Tensor::randn(n, k, 1.0, &mut rng), Tensor::randn(n, k, 1.0, &mut rng))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn pic_matches_oracle_and_grad_check(n in 1usize..=8, k in 2usize..=16, seed in 0u64..1000) {
        let (z, u) = random_pair(n, k, seed);
        prop_assert!((pic_value(&z, &u, 0.07) - pic_oracle(&z, &u, 0.07)).abs() < 1e-9);
        let mut store = ParamStore::new();
        store.add("z", z);
        store.add("u", u);
        let rep = grad_check(&store, |g| {
            let zv = g.p("z");
            let uv = g.p("u");
            loss_pic(g, zv, uv, 0.07).unwrap()
        }, 1e-6, 64, seed);
        prop_assert!(rep.max_rel_error <= 1e-4, "{:?}", rep);
    }

    #[test]
    fn pic_permutation_invariant(n in 2usize..=8, k in 2usize..=16, seed in 0u64..1000) {
        let (z, u) = random_pair(n, k, seed);
        let perm: Vec<usize> = (0..n).rev().collect();
        let pz = Tensor::from_rows(&perm.iter().map(|&i| z.row_slice(i).to_vec()).collect::<Vec<_>>());
        let pu = Tensor::from_rows(&perm.iter().map(|&i| u.row_slice(i).to_vec()).collect::<Vec<_>>());
        prop_assert!((pic_value(&z, &u, 0.1) - pic_value(&pz, &pu, 0.1)).abs() < 1e-9);
    }

    #[test]
    fn pic_improves_when_pair_aligned(n in 2usize..=8, seed in 0u64..1000, i in 0usize..8) {
        // Rotate z_i toward u_i along a direction orthogonal to z_i and to
        // every other u_j, so only the positive similarity moves.
        let (z, u) = random_pair(n, 16, seed);
        let i = i % n;
        let unit = |r: &[f64]| {
            let m = r.iter().map(|x| x * x).sum::<f64>().sqrt();
            r.iter().map(|x| x / m).collect::<Vec<f64>>()
        };
        let mut basis: Vec<Vec<f64>> = Vec::new();
        let others = (0..n).filter(|&j| j != i).map(|j| u.row_slice(j).to_vec());
        for b in std::iter::once(z.row_slice(i).to_vec()).chain(others) {
            let mut b = b;
            for e in &basis {
                let d: f64 = b.iter().zip(e).map(|(x, y)| x * y).sum();
                b.iter_mut().zip(e).for_each(|(x, y)| *x -= d * y);
            }
            basis.push(unit(&b));
        }
        let mut w = unit(u.row_slice(i));
        for e in &basis {
            let d: f64 = w.iter().zip(e).map(|(x, y)| x * y).sum();
            w.iter_mut().zip(e).for_each(|(x, y)| *x -= d * y);
        }
        let zi = unit(z.row_slice(i));
        let mut z2 = z.clone();
        let cols = z.cols;
        for c in 0..cols {
            z2.data[i * cols + c] = zi[c] + 1e-3 * w[c];
        }
        prop_assert!(pic_value(&z2, &u, 0.07) < pic_value(&z, &u, 0.07));
    }
}

#[test]
fn masked_objective_examples() {
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let l = masked_objective(&mut g, None, None, 1.0).unwrap();
    assert_eq!(g.scalar(l), 0.0);
    let logits = g.constant(Tensor::zeros(1, 37));
    let l = masked_objective(&mut g, Some((logits, &[5])), None, 1.0).unwrap();
    assert!((g.scalar(l) - 37f64.ln()).abs() < 1e-12);
    let pred = g.constant(Tensor::col(vec![0.25, -1.5]));
    for lam in [0.0, 1.0, 7.5] {
        let l = masked_objective(&mut g, None, Some((pred, &[0.25, -1.5])), lam).unwrap();
        assert_eq!(g.scalar(l), 0.0);
    }
}

#[test]
fn mpm_on_model() {
    let (v, seqs) = fixture_vocab();
    let cfg = tiny_config();
    let m = ProtocolModel::new(cfg.clone(), VocabLayout::from_vocab(&v));
    let imgs = fixture_images(2, 2, cfg.d_img);
    let (m0, p0) = mask_sequence(&seqs[0], &v, 0.0, 0.0, 1);
    let (m1, p1) = mask_sequence(&seqs[1], &v, 1.0, 1.0, 1);
    assert!(p0.masked.is_empty());
    let mut g = Graph::new(&m.params);
    let enc = m.encode(&mut g, &[&m0, &m0]).unwrap();
    let img = m.encode_image(&mut g, &[&imgs[0], &imgs[1]], None).unwrap();
    let l = loss_mpm(&mut g, &m, &enc, &img, &[&m0, &m0], &[&p0, &p0], 1.0).unwrap();
    assert_eq!(g.scalar(l), 0.0);
    let enc = m.encode(&mut g, &[&m0, &m1]).unwrap();
    let l = loss_mpm(&mut g, &m, &enc, &img, &[&m0, &m1], &[&p0, &p1], 1.0).unwrap();
    assert!(g.scalar(l) > 0.0 && g.scalar(l).is_finite());
}

#[test]
fn p2p_objective_limits() {
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let classes = [3usize, 0, 9, 2];
    let mut t = Tensor::zeros(4, 10);
    for (r, &c) in classes.iter().enumerate() {
        t.data[r * 10 + c] = 20.0;
    }
    let sharp = g.constant(t);
    let l = p2p_objective(&mut g, sharp, &classes, None, 1, 1.0).unwrap();
    assert!(g.scalar(l) <= 0.001);
    let flat = g.constant(Tensor::zeros(4, 10));
    let l = p2p_objective(&mut g, flat, &classes, None, 1, 1.0).unwrap();
    assert!((g.scalar(l) - 10f64.ln()).abs() < 1e-12);
    // Continuous term sums over fields and averages over items.
    let pred = g.constant(Tensor::col(vec![1.0, 2.0, 3.0]));
    let l = p2p_objective(&mut g, flat, &classes, Some((pred, &[0.0, 2.0, 5.0])), 2, 1.0).unwrap();
    assert!((g.scalar(l) - 10f64.ln() - 1.5).abs() < 1e-12);
}

#[test]
fn p2p_length_mismatch() {
    let (v, seqs) = fixture_vocab();
    let m = ProtocolModel::new(tiny_config(), VocabLayout::from_vocab(&v));
    let mut short = seqs[1].clone();
    let cut = short.token_ids.iter().position(|&t| t == crate::genome::FIELD_SEP).unwrap();
    for col in [&mut short.token_ids, &mut short.field_ids, &mut short.blend_ids] {
        col.truncate(cut);
    }
    short.bin_indices.truncate(cut);
    short.raw_values.truncate(cut);
    short.missing_mask.truncate(cut);
    short.interp_weights.truncate(cut);
    short.kinds.truncate(cut);
    let mut g = Graph::new(&m.params);
    let enc = m.encode(&mut g, &[&seqs[0]]).unwrap();
    let err = loss_p2p(&mut g, &m, &enc, &[&seqs[0]], &[&short], 1.0).unwrap_err();
    assert_eq!(
        err,
        ObjectiveError::LengthMismatch {
            src: v.fields.len(),
            tgt: 1
        }
    );
}

#[test]
fn p2p_identity_training_decreases() {
    let (v, seqs) = fixture_vocab();
    let mut m = ProtocolModel::new(tiny_config(), VocabLayout::from_vocab(&v));
    let batch: Vec<&GenomeSequence> = seqs.iter().take(4).collect();
    let opt = AdamW::default();
    let mut state = OptimState::new(&m.params);
    let mut losses = Vec::new();
    for _ in 0..50 {
        let grads = {
            let mut g = Graph::new(&m.params);
            let enc = m.encode(&mut g, &batch).unwrap();
            let l = loss_p2p(&mut g, &m, &enc, &batch, &batch, 1.0).unwrap();
            losses.push(g.scalar(l));
            g.backward(l)
        };
        opt.step(&mut m.params, &grads, &mut state, 3e-3).unwrap();
    }
    assert!(losses[49] < losses[0], "{} -> {}", losses[0], losses[49]);
}

#[test]
fn loss_pre_examples_and_gamma_zero() {
    let w = LossWeights::default();
    assert!((loss_pre_value(0.6, 0.2, 0.4, &w) - 1.0).abs() < 1e-12);
    assert_eq!(loss_pre_value(0.0, 0.0, 0.0, &w), 0.0);
    let b = LossBreakdown::pretrain(0.6, 0.2, 0.4, &w);
    assert!(b.recomposes());

    let (v, seqs) = fixture_vocab();
    let cfg = tiny_config();
    let m = ProtocolModel::new(cfg.clone(), VocabLayout::from_vocab(&v));
    let imgs = fixture_images(2, 2, cfg.d_img);
    let no_p2p = LossWeights { gamma: 0.0, ..w };
    let total = |g: &mut Graph<'_>| {
        let enc = m.encode(g, &[&seqs[0], &seqs[1]]).unwrap();
        let img = m.encode_image(g, &[&imgs[0], &imgs[1]], None).unwrap();
        let z = m.project_image(g, img.pooled).unwrap();
        let u = m.project_protocol(g, enc.pooled).unwrap();
        let pic = loss_pic(g, z, u, no_p2p.tau).unwrap();
        let mpm = g.constant(Tensor::scalar(0.0));
        let p2p = loss_p2p(g, &m, &enc, &[&seqs[0], &seqs[1]], &[&seqs[1], &seqs[0]], 1.0).unwrap();
        loss_pre(g, pic, mpm, p2p, &no_p2p).unwrap()
    };
    let mut g = Graph::new(&m.params);
    let l = total(&mut g);
    let grads = g.backward(l);
    for id in m.params.ids().filter(|&id| m.params.name(id).starts_with("p2p.")) {
        if let Some(gr) = grads.param(id) {
            assert!(gr.iter().all(|&x| x == 0.0), "{}", m.params.name(id));
        }
    }
    let rep = grad_check(&m.params, total, 1e-5, 4, 2);
    assert!(rep.max_rel_error <= 1e-4, "{rep:?}");
}

#[test]
fn importance_weight_examples() {
    assert_eq!(importance_weights(&["a", "a", "a"]), vec![1.0; 3]);
    let w = importance_weights(&["A", "A", "A", "B"]);
    for x in &w[..3] {
        assert!((x - 2.0 / 3.0).abs() < 1e-12);
    }
    assert!((w[3] - 2.0).abs() < 1e-12);
    assert!((w[..3].iter().sum::<f64>() - w[3]).abs() < 1e-12);
    assert!((w.iter().sum::<f64>() / 4.0 - 1.0).abs() < 1e-12);
}

fn focal_value(p_true: f64, gamma: f64) -> f64 {
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let p = g.constant(Tensor::from_rows(&[vec![1.0 - p_true, p_true]]));
    let l = focal_loss(&mut g, p, &[1], gamma).unwrap();
    g.scalar(l)
}

#[test]
fn focal_examples() {
    assert!((focal_value(0.5, 2.0) - 0.25 * 2f64.ln()).abs() < 1e-12);
    assert!((focal_value(0.5, 2.0) - 0.17329).abs() < 1e-5);
    assert_eq!(focal_value(1.0, 2.0), 0.0);
    for p in [0.1, 0.5, 0.9] {
        assert!((focal_value(p, 0.0) + p.ln()).abs() < 1e-12);
    }
}

fn calib_value(probs: Tensor, labels: &[usize], bins: usize) -> f64 {
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let p = g.constant(probs);
    let l = loss_calib_surrogate(&mut g, p, labels, bins).unwrap();
    g.scalar(l)
}

#[test]
fn calibration_surrogate_examples() {
    let sure = Tensor::from_rows(&vec![vec![0.0, 1.0]; 5]);
    assert_eq!(calib_value(sure.clone(), &[1; 5], 15), 0.0);
    assert!((calib_value(sure, &[0; 5], 15) - 1.0).abs() < 1e-12);

    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let n = 100_000;
    let mut rows = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let c: f64 = rng.random_range(0.5..1.0);
        rows.push(vec![1.0 - c, c]);
        labels.push(if rng.random::<f64>() < c { 1 } else { 0 });
    }
    let e = calib_value(Tensor::from_rows(&rows), &labels, 15);
    assert!(e <= 0.01, "{e}");
}
