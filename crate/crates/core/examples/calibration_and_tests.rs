//! Temperature scaling and isotonic recalibration of an overconfident
//! scorer, then DeLong, McNemar and Benjamini-Hochberg on two scorers.

use protocol_genome::stats::{
    apply_temperature, auroc, bh_fdr, delong_test, ece, isotonic_fit, mcnemar_exact, nll, temperature_fit, top_label,
    ECE_BINS,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let n = 4000;
    let labels: Vec<usize> = (0..n).map(|_| usize::from(rng.random::<f64>() < 0.4)).collect();
    // true log-odds scaled by 3: an overconfident scorer
    let margin: Vec<f64> = labels.iter().map(|&y| (y as f64 - 0.5) * 1.6 + noise.sample(&mut rng)).collect();
    let logits: Vec<Vec<f64>> = margin.iter().map(|m| vec![0.0, 3.0 * m]).collect();
    let t = temperature_fit(&logits, &labels);
    let (conf0, ok0) = top_label(&apply_temperature(&logits, 1.0), &labels);
    let (conf1, ok1) = top_label(&apply_temperature(&logits, t), &labels);
    println!("temperature {t:.3}");
    println!("NLL  {:.4} -> {:.4}", nll(&logits, &labels, 1.0), nll(&logits, &labels, t));
    println!("ECE  {:.4} -> {:.4}", ece(&conf0, &ok0, ECE_BINS), ece(&conf1, &ok1, ECE_BINS));

    let p_raw: Vec<f64> = apply_temperature(&logits, 1.0).iter().map(|p| p[1]).collect();
    let y: Vec<f64> = labels.iter().map(|&l| l as f64).collect();
    let iso = isotonic_fit(&p_raw, &y);
    println!("isotonic map at 0.1/0.5/0.9: {:.3} {:.3} {:.3}", iso.predict(0.1), iso.predict(0.5), iso.predict(0.9));

    let yb: Vec<bool> = labels.iter().map(|&l| l == 1).collect();
    let weaker: Vec<f64> = margin.iter().map(|m| m + 0.8 * noise.sample(&mut rng)).collect();
    let d = delong_test(&margin, &weaker, &yb).expect("both classes");
    println!("AUROC {:.4} vs {:.4}: z {:.3} p {:.2e}", d.auroc_a, d.auroc_b, d.z, d.p);
    println!("check: {:.4}", auroc(&margin, &yb).expect("both classes"));

    let pa: Vec<bool> = margin.iter().map(|&m| m > 0.0).collect();
    let pb: Vec<bool> = weaker.iter().map(|&m| m > 0.0).collect();
    let b = (0..n).filter(|&i| pa[i] == yb[i] && pb[i] != yb[i]).count() as u64;
    let c = (0..n).filter(|&i| pa[i] != yb[i] && pb[i] == yb[i]).count() as u64;
    println!("McNemar b={b} c={c}: exact p {:.2e}", mcnemar_exact(b, c));

    let ps = [0.001, 0.008, 0.039, 0.041, 0.042, 0.06, 0.074, 0.205, 0.212, 0.216];
    println!("BH at q=0.05: {:?}", bh_fdr(&ps, 0.05));
}
