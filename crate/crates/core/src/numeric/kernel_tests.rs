//! Forward oracles (naive loops) and finite-difference checks per kernel.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len()
        && a.iter()
            .zip(b)
            .all(|(x, y)| (x - y).abs() <= tol * x.abs().max(y.abs()).max(1.0))
}

fn naive_matmul(a: &Tensor, b: &Tensor) -> Vec<f64> {
    let mut out = vec![0.0; a.rows * b.cols];
    for i in 0..a.rows {
        for j in 0..b.cols {
            let mut s = 0.0;
            for k in 0..a.cols {
                s += a.at(i, k) * b.at(k, j);
            }
            out[i * b.cols + j] = s;
        }
    }
    out
}

fn naive_softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::MIN, f64::max);
    let e: Vec<f64> = row.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

/// Reduces `out` with fixed random weights so upstream gradients vary.
fn probe<'a>(g: &mut Graph<'a>, out: Var, seed: u64) -> Var {
    let (r, c) = g.shape(out);
    let w = Tensor::randn(r, c, 1.0, &mut rng(seed));
    let w = g.constant(w);
    let m = g.mul(out, w).unwrap();
    g.sum(m)
}

fn store_of(inputs: &[(&str, Tensor)]) -> ParamStore {
    let mut s = ParamStore::new();
    for (n, t) in inputs {
        s.add(*n, t.clone());
    }
    s
}

fn check<F>(s: &ParamStore, f: F) -> f64
where
    F: for<'a> Fn(&mut Graph<'a>) -> Var,
{
    let r = grad_check(s, |g| { let o = f(g); probe(g, o, 99) }, 1e-5, 64, 7);
    r.max_rel_error
}

#[test]
fn matmul_identity_and_oracle() {
    let a = Tensor::randn(5, 7, 1.0, &mut rng(1));
    let b = Tensor::randn(7, 3, 1.0, &mut rng(2));
    let s = store_of(&[("a", a.clone()), ("b", b.clone())]);
    let mut g = Graph::new(&s);
    let (va, vb) = (g.p("a"), g.p("b"));
    let c = g.matmul(va, vb).unwrap();
    assert!(close(&g.value(c).data, &naive_matmul(&a, &b), 1e-12));
    let i = g.constant(Tensor::eye(5));
    let ia = g.matmul(i, va).unwrap();
    assert_eq!(g.value(ia), &a);
    assert!(g.matmul(va, va).is_err());
}

#[test]
fn softmax_oracle_and_symmetry() {
    let x = Tensor::randn(4, 9, 3.0, &mut rng(3));
    let s = store_of(&[("x", x.clone())]);
    let mut g = Graph::new(&s);
    let v = g.p("x");
    let y = g.softmax_rows(v);
    for r in 0..4 {
        assert!(close(g.value(y).row_slice(r), &naive_softmax(x.row_slice(r)), 1e-12));
        let sum: f64 = g.value(y).row_slice(r).iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }
    let eq = g.constant(Tensor::filled(1, 6, 2.5));
    let ye = g.softmax_rows(eq);
    assert!(g.value(ye).data.iter().all(|&p| (p - 1.0 / 6.0).abs() < 1e-15));
    let ls = g.log_softmax_rows(v);
    let logs: Vec<f64> = g.value(y).data.iter().map(|p| p.ln()).collect();
    assert!(close(&g.value(ls).data, &logs, 1e-12));
}

fn naive_layer_norm(x: &Tensor, gamma: &[f64], beta: &[f64]) -> Vec<f64> {
    let mut out = Vec::new();
    for r in 0..x.rows {
        let row = x.row_slice(r);
        let n = row.len() as f64;
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        for j in 0..row.len() {
            out.push((row[j] - mean) / (var + 1e-5).sqrt() * gamma[j] + beta[j]);
        }
    }
    out
}

#[test]
fn layer_norm_oracle_and_fd() {
    let mut r = rng(4);
    let x = Tensor::randn(4, 8, 2.0, &mut r);
    let gm = Tensor::randn(1, 8, 1.0, &mut r);
    let bt = Tensor::randn(1, 8, 1.0, &mut r);
    let s = store_of(&[("x", x.clone()), ("g", gm.clone()), ("b", bt.clone())]);
    let mut g = Graph::new(&s);
    let (vx, vg, vb) = (g.p("x"), g.p("g"), g.p("b"));
    let y = g.layer_norm(vx, vg, vb).unwrap();
    assert!(close(&g.value(y).data, &naive_layer_norm(&x, &gm.data, &bt.data), 1e-12));
    let rep = grad_check(
        &s,
        |g| {
            let (vx, vg, vb) = (g.p("x"), g.p("g"), g.p("b"));
            let y = g.layer_norm(vx, vg, vb).unwrap();
            probe(g, y, 5)
        },
        1e-4,
        64,
        0,
    );
    assert!(rep.max_rel_error <= 1e-5, "{rep:?}");
}

fn naive_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    qo: &[usize],
    ko: &[usize],
    heads: usize,
    causal: bool,
) -> Vec<f64> {
    let d = q.cols;
    let dh = d / heads;
    let mut out = vec![0.0; q.rows * d];
    for s in 0..qo.len() - 1 {
        for h in 0..heads {
            for i in qo[s]..qo[s + 1] {
                let mut scores = Vec::new();
                for j in ko[s]..ko[s + 1] {
                    if causal && j - ko[s] > i - qo[s] {
                        continue;
                    }
                    let mut dot = 0.0;
                    for t in 0..dh {
                        dot += q.at(i, h * dh + t) * k.at(j, h * dh + t);
                    }
                    scores.push((j, dot / (dh as f64).sqrt()));
                }
                let p = naive_softmax(&scores.iter().map(|x| x.1).collect::<Vec<_>>());
                for (pi, (j, _)) in p.iter().zip(&scores) {
                    for t in 0..dh {
                        out[i * d + h * dh + t] += pi * v.at(*j, h * dh + t);
                    }
                }
            }
        }
    }
    out
}

#[test]
fn attention_oracle_rows_and_grads() {
    let mut r = rng(6);
    let q = Tensor::randn(7, 8, 1.0, &mut r);
    let k = Tensor::randn(5, 8, 1.0, &mut r);
    let v = Tensor::randn(5, 8, 1.0, &mut r);
    let (qo, ko) = (vec![0, 3, 7], vec![0, 1, 5]);
    let s = store_of(&[("q", q.clone()), ("k", k.clone()), ("v", v.clone())]);
    let mut g = Graph::new(&s);
    let (vq, vk, vv) = (g.p("q"), g.p("k"), g.p("v"));
    let o = g.attention(vq, vk, vv, &qo, &ko, 2, false).unwrap();
    assert!(close(&g.value(o).data, &naive_attention(&q, &k, &v, &qo, &ko, 2, false), 1e-12));
    // Segment 0 has one key: output equals that value row.
    for i in 0..3 {
        assert!(close(g.value(o).row_slice(i), v.row_slice(0), 1e-15));
    }
    let w = g.attention_weights(o).unwrap();
    let mut pos = 0;
    for (nq, nk) in [(3, 1), (4, 4)] {
        for _ in 0..2 * nq {
            let sum: f64 = w[pos..pos + nk].iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
            pos += nk;
        }
    }
    let e = check(&s, |g| {
        let (vq, vk, vv) = (g.p("q"), g.p("k"), g.p("v"));
        g.attention(vq, vk, vv, &[0, 3, 7], &[0, 1, 5], 2, false).unwrap()
    });
    assert!(e < 1e-4, "{e}");

    let x = Tensor::randn(6, 8, 1.0, &mut r);
    let s = store_of(&[("x", x.clone())]);
    let mut g = Graph::new(&s);
    let vx = g.p("x");
    let o = g.attention(vx, vx, vx, &[0, 2, 6], &[0, 2, 6], 4, true).unwrap();
    assert!(close(
        &g.value(o).data,
        &naive_attention(&x, &x, &x, &[0, 2, 6], &[0, 2, 6], 4, true),
        1e-12
    ));
    let e = check(&s, |g| {
        let vx = g.p("x");
        g.attention(vx, vx, vx, &[0, 2, 6], &[0, 2, 6], 4, true).unwrap()
    });
    assert!(e < 1e-4, "{e}");
    assert!(g.attention(vx, vx, vx, &[0, 6], &[0, 3, 6], 4, false).is_err());
}

#[test]
fn cross_entropy_oracle() {
    let z = Tensor::randn(5, 6, 2.0, &mut rng(8));
    let t = [0usize, 5, 2, 2, 1];
    let s = store_of(&[("z", z.clone())]);
    let mut g = Graph::new(&s);
    let vz = g.p("z");
    let ce = g.cross_entropy(vz, &t).unwrap();
    let oracle: Vec<f64> = (0..5)
        .map(|r| -naive_softmax(z.row_slice(r))[t[r]].ln())
        .collect();
    assert!(close(&g.value(ce).data, &oracle, 1e-12));
    assert!(g.cross_entropy(vz, &[9, 0, 0, 0, 0]).is_err());
    let e = check(&s, |g| {
        let vz = g.p("z");
        g.cross_entropy(vz, &[0, 5, 2, 2, 1]).unwrap()
    });
    assert!(e < 1e-4);
}

#[test]
fn grl_example() {
    let s = store_of(&[("v", Tensor::row(vec![0.7, -1.1]))]);
    let mut g = Graph::new(&s);
    let v = g.p("v");
    let r = g.grl(v, 0.3);
    assert_eq!(g.value(r), s.by_name("v").unwrap());
    let up = g.constant(Tensor::row(vec![1.0, -2.0]));
    let m = g.mul(r, up).unwrap();
    let l = g.sum(m);
    let gr = g.backward(l);
    let d = gr.param(s.id("v").unwrap()).unwrap();
    assert!((d[0] + 0.3).abs() < 1e-15 && (d[1] - 0.6).abs() < 1e-15);

    let mut g = Graph::new(&s);
    let v = g.p("v");
    let r = g.grl(v, 0.0);
    let l = g.sum(r);
    let gr = g.backward(l);
    assert!(gr.param(s.id("v").unwrap()).unwrap().iter().all(|&x| x == 0.0));
}

#[test]
fn misc_forward_oracles() {
    let mut r = rng(9);
    let a = Tensor::randn(3, 4, 1.0, &mut r);
    let b = Tensor::randn(2, 4, 1.0, &mut r);
    let s = store_of(&[("a", a.clone()), ("b", b.clone())]);
    let mut g = Graph::new(&s);
    let (va, vb) = (g.p("a"), g.p("b"));
    let cat = g.concat_rows(&[va, vb]).unwrap();
    assert_eq!(g.value(cat).data, [a.data.clone(), b.data.clone()].concat());
    let gat = g.gather_rows(va, &[2, 0, 2]).unwrap();
    assert_eq!(g.value(gat).row_slice(0), a.row_slice(2));
    assert!(g.gather_rows(va, &[3]).is_err());
    let m = g.mean(va);
    assert!((g.scalar(m) - a.data.iter().sum::<f64>() / 12.0).abs() < 1e-15);
    let a2 = g.slice_rows(va, 0, 2).unwrap();
    let l1 = g.l1(a2, vb).unwrap();
    let oracle: f64 = a.data[..8].iter().zip(&b.data).map(|(x, y)| (x - y).abs()).sum::<f64>() / 8.0;
    assert!((g.scalar(l1) - oracle).abs() < 1e-15);
    let e = g.exp(va);
    let l = g.log(e);
    assert!(close(&g.value(l).data, &a.data, 1e-12));
    let sm = g.segment_mean(va, &[0, 1, 3]).unwrap();
    let want: Vec<f64> = (0..4).map(|j| (a.at(1, j) + a.at(2, j)) / 2.0).collect();
    assert!(close(g.value(sm).row_slice(1), &want, 1e-15));
    let n = g.normalize_rows(va);
    let norm: f64 = g.value(n).row_slice(0).iter().map(|x| x * x).sum();
    assert!((norm - 1.0).abs() < 1e-12);
}

#[test]
fn soft_ece_partition_and_value() {
    // Memberships sum to one everywhere in [0, 1].
    for i in 0..=200 {
        let (m, _) = super::graph::hat_memberships(i as f64 / 200.0, 15);
        assert!((m.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    let s = store_of(&[("c", Tensor::col(vec![0.9, 0.9]))]);
    let mut g = Graph::new(&s);
    let c = g.p("c");
    let l = g.soft_ece(c, &[1.0, 0.0], 10).unwrap();
    // Both points split evenly between two bins; each bin gap is 0.5*(0.1-0.9).
    assert!((g.scalar(l) - 0.4).abs() < 1e-12);
}

fn all_kernels_error(rows: usize, cols: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let a = Tensor::randn(rows, cols, 1.0, &mut r);
    let b = Tensor::randn(rows, cols, 1.0, &mut r);
    let w = Tensor::randn(cols, 5, 1.0, &mut r);
    let row = Tensor::randn(1, cols, 1.0, &mut r);
    let col = Tensor::randn(rows, 1, 1.0, &mut r);
    let pos = Tensor::new(rows, cols, (0..rows * cols).map(|_| r.random_range(0.2..2.0)).collect());
    let conf = Tensor::col((0..rows).map(|_| r.random_range(0.03..0.97)).collect());
    let s = store_of(&[
        ("a", a),
        ("b", b),
        ("w", w),
        ("row", row),
        ("col", col),
        ("pos", pos),
        ("conf", conf),
    ]);
    let targets: Vec<usize> = (0..rows).map(|i| (i * 7) % cols).collect();
    let correct: Vec<f64> = (0..rows).map(|i| (i % 2) as f64).collect();
    let mid = rows / 2;
    let off = vec![0, mid, rows];
    type K = fn(&mut Graph<'_>, &[usize], &[f64], &[usize]) -> Var;
    let kernels: Vec<(&str, K)> = vec![
        ("matmul", |g, _, _, _| { let (a, w) = (g.p("a"), g.p("w")); g.matmul(a, w).unwrap() }),
        ("transpose", |g, _, _, _| { let a = g.p("a"); g.transpose(a) }),
        ("add", |g, _, _, _| { let (a, b) = (g.p("a"), g.p("b")); g.add(a, b).unwrap() }),
        ("sub", |g, _, _, _| { let (a, b) = (g.p("a"), g.p("b")); g.sub(a, b).unwrap() }),
        ("mul", |g, _, _, _| { let (a, b) = (g.p("a"), g.p("b")); g.mul(a, b).unwrap() }),
        ("add_row", |g, _, _, _| { let (a, r) = (g.p("a"), g.p("row")); g.add_row(a, r).unwrap() }),
        ("mul_row", |g, _, _, _| { let (a, r) = (g.p("a"), g.p("row")); g.mul_row(a, r).unwrap() }),
        ("mul_col", |g, _, _, _| { let (a, c) = (g.p("a"), g.p("col")); g.mul_col(a, c).unwrap() }),
        ("scale", |g, _, _, _| { let a = g.p("a"); let x = g.scale(a, -1.7); g.add_scalar(x, 0.3) }),
        ("exp", |g, _, _, _| { let a = g.p("a"); g.exp(a) }),
        ("log", |g, _, _, _| { let a = g.p("pos"); g.log(a) }),
        ("tanh", |g, _, _, _| { let a = g.p("a"); g.tanh(a) }),
        ("sigmoid", |g, _, _, _| { let a = g.p("a"); g.sigmoid(a) }),
        ("gelu", |g, _, _, _| { let a = g.p("a"); g.gelu(a) }),
        ("powf", |g, _, _, _| { let a = g.p("pos"); g.powf(a, 2.5) }),
        ("abs", |g, _, _, _| { let a = g.p("pos"); g.abs(a) }),
        ("softmax", |g, _, _, _| { let a = g.p("a"); g.softmax_rows(a) }),
        ("log_softmax", |g, _, _, _| { let a = g.p("a"); g.log_softmax_rows(a) }),
        ("layer_norm", |g, _, _, _| {
            let (a, r, b) = (g.p("a"), g.p("row"), g.p("b"));
            let b0 = g.slice_rows(b, 0, 1).unwrap();
            g.layer_norm(a, r, b0).unwrap()
        }),
        ("gather", |g, t, _, _| { let a = g.p("a"); let t: Vec<usize> = t.iter().map(|&x| x % g.shape(a).0).collect(); g.gather_rows(a, &t).unwrap() }),
        ("concat", |g, _, _, _| {
            let (a, b) = (g.p("a"), g.p("b"));
            let r = g.concat_rows(&[a, b]).unwrap();
            let c = g.concat_cols(&[a, b]).unwrap();
            let rs = g.sum(r);
            let cs = g.mul(c, c).unwrap();
            let cs = g.sum(cs);
            g.add(rs, cs).unwrap()
        }),
        ("slice_cols", |g, _, _, _| { let a = g.p("a"); let c = g.shape(a).1; g.slice_cols(a, c / 3, c - c / 3).unwrap() }),
        ("means", |g, _, _, _| {
            let a = g.p("a");
            let m = g.mean_rows(a);
            let s = g.sum_cols(a);
            let mm = g.mean(a);
            let ms = g.sum(m);
            let ss = g.sum(s);
            let t = g.add(ms, ss).unwrap();
            g.add(t, mm).unwrap()
        }),
        ("segments", |g, _, _, off| {
            let a = g.p("a");
            let m = g.segment_mean(a, off).unwrap();
            let e = g.segment_expand(m, off).unwrap();
            g.mul(e, a).unwrap()
        }),
        ("cross_entropy", |g, t, _, _| { let a = g.p("a"); g.cross_entropy(a, t).unwrap() }),
        ("pick", |g, t, _, _| { let a = g.p("a"); g.pick(a, t).unwrap() }),
        ("normalize", |g, _, _, _| { let a = g.p("a"); g.normalize_rows(a) }),
        ("soft_ece", |g, _, c, _| { let x = g.p("conf"); g.soft_ece(x, c, 15).unwrap() }),
        ("attention", |g, _, _, off| {
            let (a, b) = (g.p("a"), g.p("b"));
            let h = if g.shape(a).1 % 2 == 0 { 2 } else { 1 };
            g.attention(a, b, b, off, off, h, false).unwrap()
        }),
    ];
    let mut worst: f64 = 0.0;
    for (name, k) in &kernels {
        let e = grad_check(
            &s,
            |g| {
                let o = k(g, &targets, &correct, &off);
                probe(g, o, 11)
            },
            1e-5,
            24,
            seed,
        )
        .max_rel_error;
        assert!(e <= 1e-4, "{name} at {rows}x{cols}: {e}");
        worst = worst.max(e);
    }
    worst
}

#[test]
fn every_kernel_passes_grad_check() {
    all_kernels_error(4, 6, 1);
    all_kernels_error(16, 32, 2);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn kernels_grad_check_random_shapes(rows in 2usize..=16, cols in 2usize..=32, seed in 0u64..1000) {
        prop_assert!(all_kernels_error(rows, cols, seed) <= 1e-4);
    }

    #[test]
    fn softmax_rows_sum_to_one(v in prop::collection::vec(-50.0f64..50.0, 1..40)) {
        let s = ParamStore::new();
        let mut g = Graph::new(&s);
        let x = g.constant(Tensor::row(v));
        let y = g.softmax_rows(x);
        prop_assert!((g.value(y).data.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn deterministic_forward_backward(seed in 0u64..100) {
        let a = Tensor::randn(5, 8, 1.0, &mut rng(seed));
        let s = store_of(&[("a", a)]);
        let run = || {
            let mut g = Graph::new(&s);
            let a = g.p("a");
            let o = g.attention(a, a, a, &[0, 5], &[0, 5], 2, false).unwrap();
            let l = probe(&mut g, o, seed);
            let gr = g.backward(l);
            (g.scalar(l), gr.param(s.id("a").unwrap()).unwrap().to_vec())
        };
        let (l1, g1) = run();
        let (l2, g2) = run();
        prop_assert_eq!(l1.to_bits(), l2.to_bits());
        prop_assert!(g1.iter().zip(&g2).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
