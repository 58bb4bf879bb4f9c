// SPDX-License-Identifier: MIT OR Apache-2.0

//! Evaluation metrics: Pearson, Spearman and Kendall tau-b correlations for
//! regression probes, macro-F1 and accuracy for classification probes.
//!
//! Correlations that are undefined because one input has zero variance are
//! not errors. They come back as `value = 0.0` with `degenerate = true`, so a
//! sweep cell whose probe collapsed to a constant predictor ranks below every
//! informative cell instead of aborting the sweep.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricName {
    Pearson,
    Spearman,
    Kendall,
    MacroF1,
    Accuracy,
}

impl MetricName {
    pub fn as_str(self) -> &'static str {
        match self {
            MetricName::Pearson => "pearson",
            MetricName::Spearman => "spearman",
            MetricName::Kendall => "kendall",
            MetricName::MacroF1 => "macro_f1",
            MetricName::Accuracy => "accuracy",
        }
    }
}

impl std::fmt::Display for MetricName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One metric value together with its sample count and degeneracy flag.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub name: MetricName,
    pub value: f64,
    pub degenerate: bool,
    pub n: usize,
}

impl MetricReport {
    fn new(name: MetricName, value: f64, n: usize) -> Self {
        Self {
            name,
            value,
            degenerate: false,
            n,
        }
    }

    fn degenerate(name: MetricName, n: usize) -> Self {
        Self {
            name,
            value: 0.0,
            degenerate: true,
            n,
        }
    }
}

fn check_pair(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::Shape(format!(
            "correlation inputs differ in length: {} vs {}",
            x.len(),
            y.len()
        )));
    }
    if x.len() < 2 {
        return Err(Error::Data(format!(
            "correlation needs at least 2 samples, got {}",
            x.len()
        )));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::Data("correlation input contains a non-finite value".into()));
    }
    Ok(())
}

fn clamp_unit(v: f64) -> f64 {
    v.clamp(-1.0, 1.0)
}

/// Product-moment correlation, computed with centered two-pass sums.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<MetricReport> {
    check_pair(x, y)?;
    Ok(pearson_unchecked(MetricName::Pearson, x, y))
}

fn pearson_unchecked(name: MetricName, x: &[f64], y: &[f64]) -> MetricReport {
    let n = x.len();
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 || syy == 0.0 {
        return MetricReport::degenerate(name, n);
    }
    MetricReport::new(name, clamp_unit(sxy / (sxx * syy).sqrt()), n)
}

/// Mid-ranks (1-based), ties receiving the average of the ranks they span.
pub fn midranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && v[order[j]] == v[order[i]] {
            j += 1;
        }
        // positions i..j (0-based) hold ranks i+1..=j
        let avg = (i + 1 + j) as f64 / 2.0;
        for &k in &order[i..j] {
            ranks[k] = avg;
        }
        i = j;
    }
    ranks
}

/// Spearman's rho: Pearson correlation of mid-ranks.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<MetricReport> {
    check_pair(x, y)?;
    let (rx, ry) = (midranks(x), midranks(y));
    Ok(pearson_unchecked(MetricName::Spearman, &rx, &ry))
}

/// Number of unordered pairs inside runs of equal keys of a sorted slice.
fn tied_pairs<T: PartialEq>(sorted: &[T]) -> u64 {
    let mut total = 0u64;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i + 1;
        while j < sorted.len() && sorted[j] == sorted[i] {
            j += 1;
        }
        let t = (j - i) as u64;
        total += t * (t - 1) / 2;
        i = j;
    }
    total
}

/// Stable merge sort returning the number of inversions (strictly decreasing pairs).
fn merge_count(v: &mut [f64], buf: &mut [f64]) -> u64 {
    let n = v.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let mut swaps = {
        let (l, r) = v.split_at_mut(mid);
        let (bl, br) = buf.split_at_mut(mid);
        merge_count(l, bl) + merge_count(r, br)
    };
    let (mut i, mut j, mut k) = (0, mid, 0);
    while i < mid && j < n {
        if v[j] < v[i] {
            buf[k] = v[j];
            swaps += (mid - i) as u64;
            j += 1;
        } else {
            buf[k] = v[i];
            i += 1;
        }
        k += 1;
    }
    buf[k..k + mid - i].copy_from_slice(&v[i..mid]);
    k += mid - i;
    buf[k..k + n - j].copy_from_slice(&v[j..n]);
    v.copy_from_slice(&buf[..n]);
    swaps
}

/// Kendall's tau-b with tie correction, O(n log n) (Knight's algorithm).
///
/// `tau_b = (C - D) / sqrt((n0 - n1) (n0 - n2))` where `n0 = n(n-1)/2`,
/// `n1` and `n2` count pairs tied in x and in y respectively. All pair
/// counts are exact integers, so the result matches direct pair counting.
pub fn kendall_tau_b(x: &[f64], y: &[f64]) -> Result<MetricReport> {
    check_pair(x, y)?;
    let n = x.len();
    // `+ 0.0` folds -0.0 into 0.0 so total_cmp agrees with `==` on ties.
    let mut pairs: Vec<(f64, f64)> = x.iter().zip(y).map(|(a, b)| (a + 0.0, b + 0.0)).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));

    let xs: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let n1 = tied_pairs(&xs);
    let n3 = tied_pairs(&pairs);

    let mut ys: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let mut buf = vec![0.0; n];
    let swaps = merge_count(&mut ys, &mut buf);
    let n2 = tied_pairs(&ys);

    let n0 = (n as u64) * (n as u64 - 1) / 2;
    if n1 == n0 || n2 == n0 {
        return Ok(MetricReport::degenerate(MetricName::Kendall, n));
    }
    // C - D = n0 - n1 - n2 + n3 - 2 * swaps, evaluated in signed integers.
    let numer = n0 as i128 - n1 as i128 - n2 as i128 + n3 as i128 - 2 * swaps as i128;
    let denom = ((n0 - n1) as f64).sqrt() * ((n0 - n2) as f64).sqrt();
    Ok(MetricReport::new(
        MetricName::Kendall,
        clamp_unit(numer as f64 / denom),
        n,
    ))
}

fn check_labels(pred: &[usize], truth: &[usize], classes: usize) -> Result<()> {
    if pred.len() != truth.len() {
        return Err(Error::Shape(format!(
            "prediction/label length mismatch: {} vs {}",
            pred.len(),
            truth.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::Data("no predictions to score".into()));
    }
    if classes == 0 {
        return Err(Error::Data("class count must be positive".into()));
    }
    if let Some(bad) = pred.iter().chain(truth).find(|&&c| c >= classes) {
        return Err(Error::Data(format!(
            "label {bad} outside [0, {}]",
            classes - 1
        )));
    }
    Ok(())
}

/// Unweighted mean of per-class F1 over all `classes` classes.
///
/// A class absent from both predictions and truth contributes F1 = 0.
pub fn macro_f1(pred: &[usize], truth: &[usize], classes: usize) -> Result<MetricReport> {
    check_labels(pred, truth, classes)?;
    let mut tp = vec![0u64; classes];
    let mut fp = vec![0u64; classes];
    let mut fneg = vec![0u64; classes];
    for (&p, &t) in pred.iter().zip(truth) {
        if p == t {
            tp[p] += 1;
        } else {
            fp[p] += 1;
            fneg[t] += 1;
        }
    }
    let sum: f64 = (0..classes)
        .map(|c| {
            let denom = 2 * tp[c] + fp[c] + fneg[c];
            if denom == 0 {
                0.0
            } else {
                (2 * tp[c]) as f64 / denom as f64
            }
        })
        .sum();
    Ok(MetricReport::new(
        MetricName::MacroF1,
        sum / classes as f64,
        pred.len(),
    ))
}

pub fn accuracy(pred: &[usize], truth: &[usize]) -> Result<MetricReport> {
    let classes = pred.iter().chain(truth).max().map_or(1, |m| m + 1);
    check_labels(pred, truth, classes)?;
    let hits = pred.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(MetricReport::new(
        MetricName::Accuracy,
        hits as f64 / pred.len() as f64,
        pred.len(),
    ))
}

/// Index of the largest score; ties go to the lowest index.
pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, s) in scores.iter().enumerate().skip(1) {
        if s.partial_cmp(&scores[best]) == Some(Ordering::Greater) {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-12
    }

    #[test]
    fn pearson_identity_and_antisymmetry() {
        let x = [1.0, 2.0, 3.0];
        assert_eq!(pearson(&x, &x).unwrap().value, 1.0);
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        assert_eq!(pearson(&x, &neg).unwrap().value, -1.0);
    }

    #[test]
    fn pearson_small_case_matches_hand_formula() {
        // x=(1,2,3,4), y=(2,1,4,3): means 2.5, 2.5; sxy = 3, sxx = syy = 5.
        let r = pearson(&[1.0, 2.0, 3.0, 4.0], &[2.0, 1.0, 4.0, 3.0]).unwrap();
        assert!(close(r.value, 0.6), "{}", r.value);
        assert!(!r.degenerate);
    }

    #[test]
    fn spearman_mid_ranks() {
        assert_eq!(midranks(&[1.0, 1.0, 2.0]), vec![1.5, 1.5, 3.0]);
        // ranks x=(1.5,1.5,3), y=(1,3,2): centered products cancel, sxy = 0
        let r = spearman(&[1.0, 1.0, 2.0], &[3.0, 5.0, 4.0]).unwrap();
        assert!(close(r.value, 0.0), "{}", r.value);
        assert!(!r.degenerate);
    }

    #[test]
    fn spearman_monotone_is_one() {
        let x = [0.1, 0.5, 2.0, 7.0];
        let y = [-3.0, 10.0, 11.0, 400.0];
        assert_eq!(spearman(&x, &y).unwrap().value, 1.0);
    }

    #[test]
    fn constant_input_is_degenerate() {
        let r = spearman(&[1.0, 2.0, 3.0], &[4.0, 4.0, 4.0]).unwrap();
        assert!(r.degenerate);
        assert_eq!(r.value, 0.0);
        let k = kendall_tau_b(&[2.0, 2.0, 2.0], &[1.0, 2.0, 3.0]).unwrap();
        assert!(k.degenerate);
        assert_eq!(k.value, 0.0);
        assert!(pearson(&[1.0, 1.0], &[0.0, 1.0]).unwrap().degenerate);
    }

    #[test]
    fn kendall_examples() {
        assert_eq!(
            kendall_tau_b(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]).unwrap().value,
            1.0
        );
        // 5 concordant, 1 discordant, no ties: (5 - 1) / 6
        let k = kendall_tau_b(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]).unwrap();
        assert!(close(k.value, 2.0 / 3.0), "{}", k.value);
        assert_eq!(kendall_tau_b(&[1.0, 2.0], &[2.0, 1.0]).unwrap().value, -1.0);
    }

    #[test]
    fn kendall_with_ties_matches_hand_count() {
        // x=(1,1,2,3), y=(1,2,2,3): n0=6, n1=1, n2=1, C=4 D=0 -> 4/5
        let k = kendall_tau_b(&[1.0, 1.0, 2.0, 3.0], &[1.0, 2.0, 2.0, 3.0]).unwrap();
        assert!(close(k.value, 0.8), "{}", k.value);
    }

    #[test]
    fn length_errors() {
        assert!(matches!(pearson(&[1.0], &[1.0]), Err(Error::Data(_))));
        assert!(matches!(
            spearman(&[1.0, 2.0], &[1.0]),
            Err(Error::Shape(_))
        ));
        assert!(kendall_tau_b(&[1.0, f64::NAN], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn macro_f1_examples() {
        assert_eq!(
            macro_f1(&[0, 1, 2, 3], &[0, 1, 2, 3], 4).unwrap().value,
            1.0
        );
        // class0 F1 = 2/3, class1 F1 = 4/5 -> 11/15
        let f = macro_f1(&[0, 1, 1, 1], &[0, 0, 1, 1], 2).unwrap();
        assert!(close(f.value, 11.0 / 15.0), "{}", f.value);
        // class 2 absent from both sides still counts with F1 = 0
        let f = macro_f1(&[0, 1], &[0, 1], 3).unwrap();
        assert!(close(f.value, 2.0 / 3.0));
        assert!(matches!(macro_f1(&[0, 5], &[0, 1], 2), Err(Error::Data(_))));
    }

    #[test]
    fn accuracy_extremes() {
        assert_eq!(accuracy(&[0, 1, 2], &[0, 1, 2]).unwrap().value, 1.0);
        assert_eq!(accuracy(&[1, 0], &[0, 1]).unwrap().value, 0.0);
    }

    #[test]
    fn argmax_prefers_lowest_index_on_ties() {
        assert_eq!(argmax(&[0.2; 5]), 0);
        assert_eq!(argmax(&[0.1, 0.3, 0.3]), 1);
    }
}
