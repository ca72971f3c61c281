use serde::{Deserialize, Serialize};

pub const T_MIN: f64 = 0.05;
pub const T_MAX: f64 = 20.0;

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

pub fn apply_temperature(logits: &[Vec<f64>], t: f64) -> Vec<Vec<f64>> {
    logits
        .iter()
        .map(|r| softmax(&r.iter().map(|v| v / t).collect::<Vec<_>>()))
        .collect()
}

/// Mean negative log-likelihood of softmax(logits / t).
pub fn nll(logits: &[Vec<f64>], labels: &[usize], t: f64) -> f64 {
    let mut s = 0.0;
    for (row, &y) in logits.iter().zip(labels) {
        let z: Vec<f64> = row.iter().map(|v| v / t).collect();
        let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        s += lse - z[y];
    }
    s / logits.len().max(1) as f64
}

/// Golden-section search for the NLL-minimizing temperature on
/// [T_MIN, T_MAX], in log space. Falls back to 1 if the search lands
/// anywhere worse than T = 1.
pub fn temperature_fit(logits: &[Vec<f64>], labels: &[usize]) -> f64 {
    if logits.is_empty() {
        return 1.0;
    }
    let f = |lt: f64| nll(logits, labels, lt.exp());
    let phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (T_MIN.ln(), T_MAX.ln());
    let mut c = b - phi * (b - a);
    let mut d = a + phi * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..200 {
        if (b - a).abs() < 1e-10 {
            break;
        }
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + phi * (b - a);
            fd = f(d);
        }
    }
    let t = ((a + b) / 2.0).exp();
    if nll(logits, labels, t) <= nll(logits, labels, 1.0) {
        t
    } else {
        1.0
    }
}

/// Nondecreasing step function from pool-adjacent-violators.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Isotonic {
    /// Distinct training scores, ascending.
    pub xs: Vec<f64>,
    /// Fitted value at each of `xs`.
    pub ys: Vec<f64>,
}

impl Isotonic {
    /// Value of the step at or left of `x`; the first step below range.
    pub fn predict(&self, x: f64) -> f64 {
        if self.xs.is_empty() {
            return 0.0;
        }
        let i = self.xs.partition_point(|&v| v <= x);
        self.ys[i.saturating_sub(1)]
    }
}

/// Least-squares monotone fit of `targets` against `scores`. Tied scores
/// are pooled first so the result is a function of the score.
pub fn isotonic_fit(scores: &[f64], targets: &[f64]) -> Isotonic {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // (x, sum, weight) per distinct score.
    let mut groups: Vec<(f64, f64, f64)> = Vec::new();
    for &i in &idx {
        match groups.last_mut() {
            Some(g) if g.0 == scores[i] => {
                g.1 += targets[i];
                g.2 += 1.0;
            }
            _ => groups.push((scores[i], targets[i], 1.0)),
        }
    }
    // Blocks of (sum, weight, first group, last group).
    let mut blocks: Vec<(f64, f64, usize, usize)> = Vec::new();
    for (k, g) in groups.iter().enumerate() {
        blocks.push((g.1, g.2, k, k));
        while blocks.len() > 1 {
            let n = blocks.len();
            let (s1, w1, _, _) = blocks[n - 2];
            let (s2, w2, _, e2) = blocks[n - 1];
            if s1 / w1 > s2 / w2 {
                blocks.pop();
                let b = blocks.last_mut().unwrap();
                b.0 += s2;
                b.1 += w2;
                b.3 = e2;
            } else {
                break;
            }
        }
    }
    let mut ys = vec![0.0; groups.len()];
    for (s, w, a, b) in blocks {
        for y in &mut ys[a..=b] {
            *y = s / w;
        }
    }
    Isotonic {
        xs: groups.iter().map(|g| g.0).collect(),
        ys,
    }
}
