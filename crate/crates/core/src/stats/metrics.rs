use std::collections::BTreeSet;

use super::StatsError;

fn class_counts(labels: &[bool]) -> (usize, usize) {
    let pos = labels.iter().filter(|&&y| y).count();
    (pos, labels.len() - pos)
}

/// Average ranks (1-based) with ties sharing their mean rank.
pub fn midranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut r = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = mid;
        }
        i = j + 1;
    }
    r
}

/// Tie-aware Mann-Whitney AUROC.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64, StatsError> {
    let (p, n) = class_counts(labels);
    if p == 0 || n == 0 || scores.len() != labels.len() {
        return Err(StatsError::DegenerateLabels);
    }
    let r = midranks(scores);
    let rank_sum: f64 = r.iter().zip(labels).filter(|(_, &y)| y).map(|(r, _)| r).sum();
    let (pf, nf) = (p as f64, n as f64);
    Ok((rank_sum - pf * (pf + 1.0) / 2.0) / (pf * nf))
}

/// Average precision: precision at each distinct threshold weighted by the
/// recall gained there.
pub fn auprc(scores: &[f64], labels: &[bool]) -> Result<f64, StatsError> {
    let (p, _) = class_counts(labels);
    if p == 0 || scores.len() != labels.len() {
        return Err(StatsError::DegenerateLabels);
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut fp, mut ap, mut prev_recall) = (0usize, 0usize, 0.0, 0.0);
    let mut i = 0;
    while i < idx.len() {
        let s = scores[idx[i]];
        while i < idx.len() && scores[idx[i]] == s {
            if labels[idx[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let recall = tp as f64 / p as f64;
        ap += (recall - prev_recall) * tp as f64 / (tp + fp) as f64;
        prev_recall = recall;
    }
    Ok(ap)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn new(pred: &[bool], labels: &[bool]) -> Self {
        let mut c = Confusion::default();
        for (&p, &y) in pred.iter().zip(labels) {
            match (p, y) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        c
    }

    fn ratio(a: usize, b: usize) -> f64 {
        if b == 0 {
            0.0
        } else {
            a as f64 / b as f64
        }
    }

    pub fn n(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn accuracy(&self) -> f64 {
        Self::ratio(self.tp + self.tn, self.n())
    }

    pub fn sensitivity(&self) -> f64 {
        Self::ratio(self.tp, self.tp + self.fn_)
    }

    pub fn specificity(&self) -> f64 {
        Self::ratio(self.tn, self.tn + self.fp)
    }

    pub fn precision(&self) -> f64 {
        Self::ratio(self.tp, self.tp + self.fp)
    }

    pub fn f1(&self) -> f64 {
        Self::ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn_)
    }
}

/// ROC vertices (fpr, tpr) from (0,0) to (1,1), one per distinct threshold.
pub fn roc_points(scores: &[f64], labels: &[bool]) -> Result<Vec<(f64, f64)>, StatsError> {
    let (p, n) = class_counts(labels);
    if p == 0 || n == 0 || scores.len() != labels.len() {
        return Err(StatsError::DegenerateLabels);
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut pts = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0, 0);
    let mut i = 0;
    while i < idx.len() {
        let s = scores[idx[i]];
        while i < idx.len() && scores[idx[i]] == s {
            if labels[idx[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        pts.push((fp as f64 / n as f64, tp as f64 / p as f64));
    }
    Ok(pts)
}

/// Sensitivity where the ROC crosses `target` specificity, linearly
/// interpolated between vertices. On a vertical ROC segment the best
/// sensitivity at that false-positive rate is reported.
pub fn sensitivity_at_specificity(scores: &[f64], labels: &[bool], target: f64) -> Result<f64, StatsError> {
    let pts = roc_points(scores, labels)?;
    let f = (1.0 - target).clamp(0.0, 1.0);
    let mut best = 0.0f64;
    for w in pts.windows(2) {
        let ((f0, t0), (f1, t1)) = (w[0], w[1]);
        if f0 <= f && f <= f1 {
            let t = if f1 == f0 { t1 } else { t0 + (t1 - t0) * (f - f0) / (f1 - f0) };
            best = best.max(t);
        }
    }
    Ok(best)
}

fn bin_index(p: f64, bins: usize) -> usize {
    ((p * bins as f64).ceil() as usize).saturating_sub(1).min(bins - 1)
}

#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct ReliabilityBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    pub confidence: f64,
    pub accuracy: f64,
}

/// Equal-width bins on (0,1]; empty bins are kept with zero counts.
pub fn reliability_bins(conf: &[f64], outcome: &[bool], bins: usize) -> Vec<ReliabilityBin> {
    let bins = bins.max(1);
    let mut count = vec![0usize; bins];
    let mut sc = vec![0.0; bins];
    let mut sa = vec![0.0; bins];
    for (&c, &o) in conf.iter().zip(outcome) {
        let b = bin_index(c, bins);
        count[b] += 1;
        sc[b] += c;
        sa[b] += if o { 1.0 } else { 0.0 };
    }
    (0..bins)
        .map(|b| {
            let k = count[b].max(1) as f64;
            ReliabilityBin {
                lo: b as f64 / bins as f64,
                hi: (b + 1) as f64 / bins as f64,
                count: count[b],
                confidence: sc[b] / k,
                accuracy: sa[b] / k,
            }
        })
        .collect()
}

/// Expected calibration error. For binary tasks pass the positive-class
/// probability and the label; for multiclass the top-label confidence and
/// whether the top label was right.
pub fn ece(conf: &[f64], outcome: &[bool], bins: usize) -> f64 {
    let n = conf.len();
    if n == 0 {
        return 0.0;
    }
    reliability_bins(conf, outcome, bins)
        .iter()
        .map(|b| b.count as f64 / n as f64 * (b.accuracy - b.confidence).abs())
        .sum()
}

pub fn brier(p_pos: &[f64], labels: &[bool]) -> f64 {
    if p_pos.is_empty() {
        return 0.0;
    }
    let s: f64 = p_pos
        .iter()
        .zip(labels)
        .map(|(p, &y)| (p - if y { 1.0 } else { 0.0 }).powi(2))
        .sum();
    s / p_pos.len() as f64
}

/// Top-label confidence and correctness of probability rows.
pub fn top_label(probs: &[Vec<f64>], labels: &[usize]) -> (Vec<f64>, Vec<bool>) {
    probs
        .iter()
        .zip(labels)
        .map(|(row, &y)| {
            let arg = (0..row.len()).fold(0, |b, c| if row[c] > row[b] { c } else { b });
            (row[arg], arg == y)
        })
        .unzip()
}

pub fn dice<T: Ord>(a: &BTreeSet<T>, b: &BTreeSet<T>) -> f64 {
    if a.is_empty() && b.is_empty() {
        return 1.0;
    }
    2.0 * a.intersection(b).count() as f64 / (a.len() + b.len()) as f64
}

pub fn jaccard<T: Ord>(a: &BTreeSet<T>, b: &BTreeSet<T>) -> f64 {
    if a.is_empty() && b.is_empty() {
        return 1.0;
    }
    a.intersection(b).count() as f64 / a.union(b).count() as f64
}

/// Mask form: indices where the mask is set.
pub fn mask_set(mask: &[bool]) -> BTreeSet<usize> {
    mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pair_oracle(s: &[f64], y: &[bool]) -> f64 {
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..s.len() {
            for j in 0..s.len() {
                if y[i] && !y[j] {
                    den += 1.0;
                    num += if s[i] > s[j] {
                        1.0
                    } else if s[i] == s[j] {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        num / den
    }

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&[0.9, 0.8, 0.2, 0.1], &[true, true, false, false]).unwrap(), 1.0);
        assert_eq!(auroc(&[0.3; 4], &[true, false, true, false]).unwrap(), 0.5);
        assert_eq!(auroc(&[0.9, 0.4, 0.5, 0.1], &[true, true, false, false]).unwrap(), 0.75);
        assert_eq!(auroc(&[0.1, 0.2], &[true, true]), Err(StatsError::DegenerateLabels));
    }

    proptest! {
        #[test]
        fn auroc_matches_pair_counting(
            v in prop::collection::vec((0u8..6, any::<bool>()), 2..=50)
        ) {
            let s: Vec<f64> = v.iter().map(|(a, _)| *a as f64 / 5.0).collect();
            let y: Vec<bool> = v.iter().map(|(_, b)| *b).collect();
            if y.iter().any(|&b| b) && y.iter().any(|&b| !b) {
                prop_assert_eq!(auroc(&s, &y).unwrap(), pair_oracle(&s, &y));
            }
        }

        #[test]
        fn ece_bounded_and_permutation_invariant(
            v in prop::collection::vec((0.0f64..=1.0, any::<bool>()), 1..60)
        ) {
            let c: Vec<f64> = v.iter().map(|x| x.0).collect();
            let o: Vec<bool> = v.iter().map(|x| x.1).collect();
            let e = ece(&c, &o, 15);
            prop_assert!((0.0..=1.0).contains(&e));
            let mut idx: Vec<usize> = (0..c.len()).collect();
            idx.sort_by_key(|&i| bin_index(c[i], 15));
            let c2: Vec<f64> = idx.iter().map(|&i| c[i]).collect();
            let o2: Vec<bool> = idx.iter().map(|&i| o[i]).collect();
            prop_assert!((ece(&c2, &o2, 15) - e).abs() < 1e-12);
        }
    }

    #[test]
    fn ece_and_brier_examples() {
        assert_eq!(ece(&[1.0; 4], &[true; 4], 15), 0.0);
        assert_eq!(brier(&[1.0; 4], &[true; 4]), 0.0);
        assert_eq!(brier(&[0.5; 4], &[true, false, true, false]), 0.25);
        let e = ece(&[0.7, 0.7, 0.9, 0.9], &[true, true, true, false], 15);
        assert!((e - 0.35).abs() < 1e-12, "{e}");
    }

    #[test]
    fn confusion_metrics() {
        let c = Confusion::new(&[true, true, false, false], &[true, false, true, false]);
        assert_eq!((c.tp, c.fp, c.tn, c.fn_), (1, 1, 1, 1));
        assert_eq!(c.f1(), 0.5);
        assert_eq!(c.accuracy(), 0.5);
        assert_eq!(Confusion::default().f1(), 0.0);
    }

    #[test]
    fn auprc_and_sens_at_spec() {
        let s = [0.9, 0.8, 0.7, 0.6];
        let y = [true, false, true, false];
        assert!((auprc(&s, &y).unwrap() - (0.5 * 1.0 + 0.5 * 2.0 / 3.0)).abs() < 1e-12);
        assert_eq!(auprc(&[0.9, 0.1], &[true, false]).unwrap(), 1.0);
        // ROC: (0,0) (0,.5) (.5,.5) (.5,1) (1,1); spec 0.75 -> fpr 0.25 on a flat segment.
        assert_eq!(sensitivity_at_specificity(&s, &y, 0.75).unwrap(), 0.5);
        assert_eq!(sensitivity_at_specificity(&s, &y, 0.5).unwrap(), 1.0);
        let s2 = [0.9, 0.5, 0.5, 0.1];
        let y2 = [true, true, false, false];
        // Diagonal segment from (0,.5) to (.5,1).
        assert!((sensitivity_at_specificity(&s2, &y2, 0.8).unwrap() - 0.7).abs() < 1e-12);
    }

    #[test]
    fn overlap_examples() {
        let a: BTreeSet<i32> = [1, 2].into();
        let b: BTreeSet<i32> = [2, 3].into();
        assert_eq!(dice(&a, &a), 1.0);
        assert_eq!(dice(&a, &[7].into()), 0.0);
        assert_eq!(dice(&a, &b), 0.5);
        assert!((jaccard(&a, &b) - 1.0 / 3.0).abs() < 1e-15);
        let e = BTreeSet::<i32>::new();
        assert_eq!((dice(&e, &e), jaccard(&e, &e)), (1.0, 1.0));
        assert_eq!(mask_set(&[true, false, true]), [0, 2].into());
    }
}
