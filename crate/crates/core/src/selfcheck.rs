// SPDX-License-Identifier: MIT OR Apache-2.0

//! Built-in correctness checks run by `planprobe selfcheck`: fast metrics
//! against the brute-force oracles, and probe gradients against finite
//! differences.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::error::Result;
use crate::metrics::{self, MetricName, MetricReport};
use crate::probe::{gradient_check, GradCheckReport, ProbeConfig, TaskKind, Targets};
use crate::synth;

/// Largest absolute value difference per metric across random cases.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleEquivalence {
    pub cases: usize,
    pub max_abs_diff: BTreeMap<String, f64>,
    /// Cases where the fast and oracle degenerate flags disagree.
    pub flag_mismatches: usize,
}

impl OracleEquivalence {
    pub fn worst(&self) -> f64 {
        self.max_abs_diff.values().fold(0.0, |a, &b| a.max(b))
    }
}

/// Draw a vector of length `n` where roughly a third of the cases are coarse
/// integers (many ties) and some entries are copies of earlier ones.
fn tied_vector(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let coarse = rng.random_bool(0.35);
    let levels = rng.random_range(1..=6) as f64;
    let mut v: Vec<f64> = (0..n)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            if coarse {
                (z * levels).round()
            } else {
                z
            }
        })
        .collect();
    for i in 1..n {
        if rng.random_bool(0.15) {
            v[i] = v[rng.random_range(0..i)];
        }
    }
    v
}

fn track(diffs: &mut BTreeMap<String, f64>, flags: &mut usize, fast: MetricReport, slow: MetricReport) {
    let e = diffs.entry(fast.name.as_str().to_string()).or_insert(0.0);
    *e = e.max((fast.value - slow.value).abs());
    if fast.degenerate != slow.degenerate {
        *flags += 1;
    }
}

/// Compare Pearson, Spearman, Kendall tau-b and macro-F1 with their oracles
/// on `cases` random inputs of length 2..=`max_n`.
pub fn oracle_equivalence(cases: usize, max_n: usize, seed: u64) -> Result<OracleEquivalence> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut diffs = BTreeMap::new();
    let mut flags = 0;
    for _ in 0..cases {
        let n = rng.random_range(2..=max_n.max(2));
        let x = tied_vector(&mut rng, n);
        let y = tied_vector(&mut rng, n);
        track(&mut diffs, &mut flags, metrics::pearson(&x, &y)?, synth::bf_pearson(&x, &y)?);
        track(&mut diffs, &mut flags, metrics::spearman(&x, &y)?, synth::bf_spearman(&x, &y)?);
        track(&mut diffs, &mut flags, metrics::kendall_tau_b(&x, &y)?, synth::bf_kendall(&x, &y)?);

        let k = rng.random_range(2..=6);
        let pred: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let truth: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        track(&mut diffs, &mut flags, metrics::macro_f1(&pred, &truth, k)?, synth::bf_macro_f1(&pred, &truth, k)?);
    }
    for name in [MetricName::Pearson, MetricName::Spearman, MetricName::Kendall, MetricName::MacroF1] {
        diffs.entry(name.as_str().to_string()).or_insert(0.0);
    }
    Ok(OracleEquivalence {
        cases,
        max_abs_diff: diffs,
        flag_mismatches: flags,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCase {
    pub hidden_size: usize,
    pub kind: TaskKind,
    pub report: GradCheckReport,
}

/// Gradient check at input width `dim` for each hidden size, on a
/// regression and a `classes`-way problem with `n` random rows.
pub fn gradient_suite(dim: usize, hidden_sizes: &[usize], classes: usize, n: usize, seed: u64) -> Result<Vec<GradCase>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Array2::from_shape_simple_fn((n, dim), || rng.sample::<f64, _>(StandardNormal));
    let reg = Targets::Regression((0..n).map(|_| rng.sample(StandardNormal)).collect());
    let cls = Targets::Classes((0..n).map(|i| i % classes).collect());
    let mut out = Vec::new();
    for &h in hidden_sizes {
        for (kind, targets) in [(TaskKind::Regression, &reg), (TaskKind::Classification { classes }, &cls)] {
            let cfg = ProbeConfig::new(kind, 0, h, seed);
            out.push(GradCase {
                hidden_size: h,
                kind,
                report: gradient_check(&cfg, x.view(), targets)?,
            });
        }
    }
    Ok(out)
}
