use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal, StudentsT};

use super::metrics::midranks;
use super::StatsError;

/// Per-positive and per-negative structural components of one score set.
fn components(scores: &[f64], labels: &[bool]) -> Result<(f64, Vec<f64>, Vec<f64>), StatsError> {
    let pos: Vec<f64> = scores.iter().zip(labels).filter(|(_, &y)| y).map(|(s, _)| *s).collect();
    let neg: Vec<f64> = scores.iter().zip(labels).filter(|(_, &y)| !y).map(|(s, _)| *s).collect();
    let (m, n) = (pos.len(), neg.len());
    if m == 0 || n == 0 || scores.len() != labels.len() {
        return Err(StatsError::DegenerateLabels);
    }
    let all: Vec<f64> = pos.iter().chain(&neg).copied().collect();
    let r_all = midranks(&all);
    let r_pos = midranks(&pos);
    let r_neg = midranks(&neg);
    let v10: Vec<f64> = (0..m).map(|i| (r_all[i] - r_pos[i]) / n as f64).collect();
    let v01: Vec<f64> = (0..n).map(|j| 1.0 - (r_all[m + j] - r_neg[j]) / m as f64).collect();
    let auc = v10.iter().sum::<f64>() / m as f64;
    Ok((auc, v10, v01))
}

fn cov(a: &[f64], b: &[f64]) -> f64 {
    let k = a.len();
    if k < 2 {
        return 0.0;
    }
    let ma = a.iter().sum::<f64>() / k as f64;
    let mb = b.iter().sum::<f64>() / k as f64;
    a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / (k - 1) as f64
}

/// AUROC and its DeLong variance for one model.
pub fn delong_variance(scores: &[f64], labels: &[bool]) -> Result<(f64, f64), StatsError> {
    let (auc, v10, v01) = components(scores, labels)?;
    let var = cov(&v10, &v10) / v10.len() as f64 + cov(&v01, &v01) / v01.len() as f64;
    Ok((auc, var))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeLong {
    pub auroc_a: f64,
    pub auroc_b: f64,
    pub var_diff: f64,
    pub z: f64,
    pub p: f64,
}

pub fn two_sided_normal_p(z: f64) -> f64 {
    let n = Normal::new(0.0, 1.0).expect("standard normal");
    (2.0 * (1.0 - n.cdf(z.abs()))).clamp(0.0, 1.0)
}

/// Paired DeLong test for two score sets on the same items.
pub fn delong_test(a: &[f64], b: &[f64], labels: &[bool]) -> Result<DeLong, StatsError> {
    if a.len() != b.len() {
        return Err(StatsError::LengthMismatch(a.len(), b.len()));
    }
    let (auc_a, a10, a01) = components(a, labels)?;
    let (auc_b, b10, b01) = components(b, labels)?;
    let (m, n) = (a10.len() as f64, a01.len() as f64);
    let s10 = cov(&a10, &a10) + cov(&b10, &b10) - 2.0 * cov(&a10, &b10);
    let s01 = cov(&a01, &a01) + cov(&b01, &b01) - 2.0 * cov(&a01, &b01);
    let var = s10 / m + s01 / n;
    let diff = auc_a - auc_b;
    let (z, p) = if diff == 0.0 {
        (0.0, 1.0)
    } else if var <= 1e-15 {
        return Err(StatsError::ZeroVariance);
    } else {
        let z = diff / var.sqrt();
        (z, two_sided_normal_p(z))
    };
    Ok(DeLong {
        auroc_a: auc_a,
        auroc_b: auc_b,
        var_diff: var,
        z,
        p,
    })
}

/// Unpaired comparison of AUROCs from disjoint item sets.
pub fn delong_unpaired(a: (&[f64], &[bool]), b: (&[f64], &[bool])) -> Result<DeLong, StatsError> {
    let (auc_a, va) = delong_variance(a.0, a.1)?;
    let (auc_b, vb) = delong_variance(b.0, b.1)?;
    let var = va + vb;
    let diff = auc_a - auc_b;
    let (z, p) = if diff == 0.0 {
        (0.0, 1.0)
    } else if var <= 1e-15 {
        return Err(StatsError::ZeroVariance);
    } else {
        let z = diff / var.sqrt();
        (z, two_sided_normal_p(z))
    };
    Ok(DeLong {
        auroc_a: auc_a,
        auroc_b: auc_b,
        var_diff: var,
        z,
        p,
    })
}

fn ln_choose(n: u64, k: u64) -> f64 {
    statrs::function::factorial::ln_binomial(n, k)
}

/// Exact two-sided sign test on the discordant counts.
pub fn mcnemar_exact(b: u64, c: u64) -> f64 {
    let n = b + c;
    if n == 0 {
        return 1.0;
    }
    let k = b.min(c);
    let tail: f64 = (0..=k).map(|i| (ln_choose(n, i) - n as f64 * 2f64.ln()).exp()).sum();
    (2.0 * tail).min(1.0)
}

/// Chi-square with continuity correction, one degree of freedom.
pub fn mcnemar_chi2(b: u64, c: u64) -> f64 {
    let n = (b + c) as f64;
    if n == 0.0 {
        return 1.0;
    }
    let stat = ((b as f64 - c as f64).abs() - 1.0).max(0.0).powi(2) / n;
    let chi = ChiSquared::new(1.0).expect("one degree of freedom");
    (1.0 - chi.cdf(stat)).clamp(0.0, 1.0)
}

/// Exact below 25 discordant pairs, chi-square from there. No discordant
/// pairs gives p = 1.
pub fn mcnemar(b: u64, c: u64) -> f64 {
    if b + c < 25 {
        mcnemar_exact(b, c)
    } else {
        mcnemar_chi2(b, c)
    }
}

/// Benjamini-Hochberg step-up rejections at level q.
pub fn bh_fdr(p: &[f64], q: f64) -> Vec<bool> {
    let m = p.len();
    let mut idx: Vec<usize> = (0..m).collect();
    idx.sort_by(|&a, &b| p[a].total_cmp(&p[b]));
    let k_star = (1..=m).rev().find(|&k| p[idx[k - 1]] <= k as f64 * q / m as f64);
    let mut out = vec![false; m];
    if let Some(k) = k_star {
        for &i in &idx[..k] {
            out[i] = true;
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ci {
    pub point: f64,
    pub lo: f64,
    pub hi: f64,
}

pub(crate) fn percentile(sorted: &[f64], q: f64) -> f64 {
    crate::genome::quantile_sorted(sorted, q)
}

/// Stratified percentile bootstrap. `metric` receives the resampled item
/// indices and may decline (degenerate resample); declined replicates are
/// skipped. The interval is widened to contain the point estimate.
pub fn bootstrap_ci<K: Ord, F>(strata: &[K], replicates: usize, seed: u64, metric: F) -> Result<Ci, StatsError>
where
    F: Fn(&[usize]) -> Option<f64>,
{
    let mut groups: BTreeMap<&K, Vec<usize>> = BTreeMap::new();
    for (i, k) in strata.iter().enumerate() {
        groups.entry(k).or_default().push(i);
    }
    if groups.is_empty() || groups.values().any(Vec::is_empty) {
        return Err(StatsError::EmptyStratum);
    }
    let all: Vec<usize> = (0..strata.len()).collect();
    let point = metric(&all).ok_or(StatsError::DegenerateLabels)?;
    let mut vals = Vec::with_capacity(replicates);
    let mut sample = Vec::with_capacity(strata.len());
    for r in 0..replicates {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(r as u64 + 1);
        sample.clear();
        for members in groups.values() {
            for _ in 0..members.len() {
                sample.push(members[rng.random_range(0..members.len())]);
            }
        }
        if let Some(v) = metric(&sample) {
            vals.push(v);
        }
    }
    if vals.is_empty() {
        return Ok(Ci {
            point,
            lo: point,
            hi: point,
        });
    }
    vals.sort_by(f64::total_cmp);
    Ok(Ci {
        point,
        lo: percentile(&vals, 0.025).min(point),
        hi: percentile(&vals, 0.975).max(point),
    })
}

/// One-sided paired t-test of mean(a - b) > 0. Returns (t, p).
pub fn paired_t_greater(a: &[f64], b: &[f64]) -> Result<(f64, f64), StatsError> {
    if a.len() != b.len() {
        return Err(StatsError::LengthMismatch(a.len(), b.len()));
    }
    let n = a.len();
    if n < 2 {
        return Err(StatsError::ZeroVariance);
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    if var <= 0.0 {
        return if mean > 0.0 { Ok((f64::INFINITY, 0.0)) } else { Err(StatsError::ZeroVariance) };
    }
    let t = mean / (var / n as f64).sqrt();
    let dist = StudentsT::new(0.0, 1.0, (n - 1) as f64).expect("valid dof");
    Ok((t, 1.0 - dist.cdf(t)))
}

/// Plug-in mutual information in nats.
pub fn mutual_information<A: Ord, B: Ord>(a: &[A], b: &[B]) -> f64 {
    let n = a.len().min(b.len());
    if n == 0 {
        return 0.0;
    }
    let mut joint: BTreeMap<(&A, &B), usize> = BTreeMap::new();
    let mut pa: BTreeMap<&A, usize> = BTreeMap::new();
    let mut pb: BTreeMap<&B, usize> = BTreeMap::new();
    for (x, y) in a.iter().zip(b) {
        *joint.entry((x, y)).or_default() += 1;
        *pa.entry(x).or_default() += 1;
        *pb.entry(y).or_default() += 1;
    }
    let nf = n as f64;
    joint
        .iter()
        .map(|((x, y), &c)| {
            let pxy = c as f64 / nf;
            pxy * (pxy / (pa[x] as f64 / nf * pb[y] as f64 / nf)).ln()
        })
        .sum::<f64>()
        .max(0.0)
}
