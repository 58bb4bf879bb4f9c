// SPDX-License-Identifier: MIT OR Apache-2.0

//! Planted-signal activation datasets and brute-force metric oracles.
//!
//! Every non-planted layer is isotropic standard-normal noise. The planted
//! layer adds a label-dependent component:
//!
//! - regression: `snr * y * u` for a unit vector `u`, `y ~ N(0, 1)`;
//! - k-class: `snr * m_c` for per-class unit vectors `m_c`;
//! - xor: `snr * a` and `snr * b` on two coordinates, label `[a * b > 0]`,
//!   with `a, b ~ N(0, 1)`. Not linearly separable.
//!
//! Randomness comes from ChaCha8 streams of one seed: stream 0 draws the
//! planted structure (from `structure_seed`), stream 1 the labels, and
//! stream `2 + i` the noise of record `i`.

use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::{LabelSet, LabeledExample};
use crate::probe::TaskKind;
use crate::error::{Error, Result};
use crate::labeling::{LabelOutcome, LabelValue};
use crate::metrics::{MetricName, MetricReport};
use crate::store::{self, ActivationRecord, DatasetHeader};

pub const GENERATOR: &str = "ChaCha8 (rand_chacha 0.9) + StandardNormal (rand_distr 0.5)";

/// Response length recorded on synthetic records; long enough to pass the
/// minimum-length filter.
const SYNTH_TOKENS: u32 = 32;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Signal {
    Regression,
    KClass(usize),
    Xor,
}

/// Position-indexed records for dynamics checks: each example yields
/// `positions` records at offsets spread over `[0, usable_length)`, and the
/// planted component is present only while `offset < signal_until`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Positions {
    pub positions: usize,
    pub usable_length: u64,
    pub signal_until: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlantSpec {
    pub layers: usize,
    pub dim: usize,
    pub n: usize,
    pub planted_layer: usize,
    pub signal: Signal,
    pub snr: f64,
    pub seed: u64,
    /// Seed of the planted direction(s); two specs sharing it share `u`.
    pub structure_seed: u64,
    pub positions: Option<Positions>,
}

impl Default for PlantSpec {
    fn default() -> Self {
        Self::new(Signal::Regression, 0)
    }
}

impl PlantSpec {
    pub fn new(signal: Signal, seed: u64) -> Self {
        Self {
            layers: 8,
            dim: 64,
            n: 2000,
            planted_layer: 5,
            signal,
            snr: 5.0,
            seed,
            structure_seed: seed,
            positions: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.layers > u16::MAX as usize || self.dim == 0 || self.n == 0 {
            return Err(Error::Config("planted spec needs L, d and N positive".into()));
        }
        if self.planted_layer >= self.layers {
            return Err(Error::Config(format!(
                "planted layer {} outside [0, {}]",
                self.planted_layer,
                self.layers - 1
            )));
        }
        if !(self.snr > 0.0 && self.snr.is_finite()) {
            return Err(Error::Config(format!("snr must be positive, got {}", self.snr)));
        }
        match self.signal {
            Signal::KClass(k) if k < 2 || k > self.n => {
                return Err(Error::Config(format!("k-class signal needs 2 <= k <= N, got {k}")))
            }
            Signal::Xor if self.dim < 2 => return Err(Error::Config("xor signal needs d >= 2".into())),
            _ => {}
        }
        if let Some(p) = self.positions {
            if p.positions == 0 || p.usable_length < p.positions as u64 {
                return Err(Error::Config("positions must be at least 1 and at most usable_length".into()));
            }
        }
        Ok(())
    }

    /// Parse a TOML spec; omitted fields take the defaults.
    pub fn parse_toml(text: &str) -> Result<Self> {
        let spec: PlantSpec = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn classes(&self) -> Option<usize> {
        match self.signal {
            Signal::Regression => None,
            Signal::KClass(k) => Some(k),
            Signal::Xor => Some(2),
        }
    }
}

/// Planted structure drawn from the structure stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Plant {
    Direction(Vec<f64>),
    Means(Vec<Vec<f64>>),
    Coordinates(usize, usize),
}

/// Ground truth written next to a planted file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    pub spec: PlantSpec,
    pub generator: String,
    pub plant: Plant,
    /// One label per record, in file order.
    pub labels: Vec<LabelValue>,
    pub example_ids: Vec<u64>,
    pub group_ids: Vec<u64>,
    pub truncation_offsets: Vec<i64>,
}

impl Truth {
    pub fn sidecar_path(data: &Path) -> PathBuf {
        let mut s = data.as_os_str().to_owned();
        s.push(".truth.json");
        PathBuf::from(s)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(self)?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn kind(&self) -> TaskKind {
        match self.spec.classes() {
            None => TaskKind::Regression,
            Some(classes) => TaskKind::Classification { classes },
        }
    }

    pub fn label_set(&self, activations_sha256: Option<String>) -> LabelSet {
        LabelSet {
            task: signal_name(self.spec.signal),
            kind: self.kind(),
            classes: Vec::new(),
            activations_sha256,
            examples: self.labeled_examples(),
        }
    }

    /// Labeled examples ready for the dataset builder. With positions, the
    /// usable length doubles as the key offset.
    pub fn labeled_examples(&self) -> Vec<LabeledExample> {
        let key = self.spec.positions.map(|p| p.usable_length);
        (0..self.labels.len())
            .map(|i| LabeledExample {
                record_index: i,
                example_id: self.example_ids[i],
                group_id: self.group_ids[i],
                truncation_offset: self.truncation_offsets[i],
                response_tokens: SYNTH_TOKENS as u64,
                outcome: LabelOutcome::Value(self.labels[i]),
                key_offset: key,
                split: None,
            })
            .collect()
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn unit_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| normal(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

fn stream(seed: u64, s: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(s);
    rng
}

fn draw_plant(spec: &PlantSpec) -> Plant {
    let mut rng = stream(spec.structure_seed, 0);
    match spec.signal {
        Signal::Regression => Plant::Direction(unit_vector(&mut rng, spec.dim)),
        Signal::KClass(k) => Plant::Means((0..k).map(|_| unit_vector(&mut rng, spec.dim)).collect()),
        Signal::Xor => {
            let a = rng.random_range(0..spec.dim);
            let mut b = rng.random_range(0..spec.dim - 1);
            if b >= a {
                b += 1;
            }
            Plant::Coordinates(a, b)
        }
    }
}

/// Generate records and truth in memory.
pub fn generate_planted(spec: &PlantSpec) -> Result<(DatasetHeader, Vec<ActivationRecord>, Truth)> {
    spec.validate()?;
    let plant = draw_plant(spec);
    let mut label_rng = stream(spec.seed, 1);
    // per example: label and planted component
    let mut bases: Vec<(LabelValue, Vec<(usize, f64)>)> = Vec::with_capacity(spec.n);
    for i in 0..spec.n {
        let (label, component) = match (&plant, spec.signal) {
            (Plant::Direction(u), _) => {
                let y = normal(&mut label_rng);
                let c = u.iter().enumerate().map(|(j, &uj)| (j, spec.snr * y * uj)).collect();
                (LabelValue::Real(y), c)
            }
            (Plant::Means(means), Signal::KClass(k)) => {
                let c = i % k;
                let comp = means[c].iter().enumerate().map(|(j, &m)| (j, spec.snr * m)).collect();
                (LabelValue::Class(c), comp)
            }
            (&Plant::Coordinates(ca, cb), _) => {
                let (a, b) = (normal(&mut label_rng), normal(&mut label_rng));
                let class = usize::from(a * b > 0.0);
                (LabelValue::Class(class), vec![(ca, spec.snr * a), (cb, spec.snr * b)])
            }
            _ => unreachable!("plant matches signal"),
        };
        bases.push((label, component));
    }

    let offsets: Vec<Option<u64>> = match spec.positions {
        None => vec![None],
        Some(p) => (0..p.positions)
            .map(|k| Some(k as u64 * p.usable_length / p.positions as u64))
            .collect(),
    };
    let mut records = Vec::with_capacity(spec.n * offsets.len());
    let mut truth = Truth {
        spec: spec.clone(),
        generator: GENERATOR.to_string(),
        plant,
        labels: Vec::new(),
        example_ids: Vec::new(),
        group_ids: Vec::new(),
        truncation_offsets: Vec::new(),
    };
    for (i, (label, component)) in bases.iter().enumerate() {
        for &offset in &offsets {
            let r = records.len() as u64;
            let mut rng = stream(spec.seed, 2 + r);
            let mut act = Array2::<f32>::zeros((spec.layers, spec.dim));
            for v in act.iter_mut() {
                *v = normal(&mut rng) as f32;
            }
            let planted = match (offset, spec.positions) {
                (Some(o), Some(p)) => o < p.signal_until,
                _ => true,
            };
            if planted {
                for &(j, c) in component {
                    let cell = &mut act[[spec.planted_layer, j]];
                    *cell = (*cell as f64 + c) as f32;
                }
            }
            let trunc = offset.map_or(-1, |o| o as i64);
            records.push(ActivationRecord {
                example_id: r,
                group_id: i as u64,
                prompt_text: format!("planted prompt {i}"),
                response_text: format!("planted response {i}"),
                truncation_offset: trunc,
                response_tokens: SYNTH_TOKENS.max(spec.positions.map_or(0, |p| p.usable_length as u32)),
                complete: true,
                gold_label: None,
                layers: (0..spec.layers).collect(),
                activations: act,
            });
            truth.labels.push(*label);
            truth.example_ids.push(r);
            truth.group_ids.push(i as u64);
            truth.truncation_offsets.push(trunc);
        }
    }
    let header = DatasetHeader::new("planted", signal_name(spec.signal), spec.layers as u16, spec.dim as u32);
    Ok((header, records, truth))
}

fn signal_name(s: Signal) -> String {
    match s {
        Signal::Regression => "planted_regression".into(),
        Signal::KClass(k) => format!("planted_{k}_class"),
        Signal::Xor => "planted_xor".into(),
    }
}

/// Write the activation file, its manifest and the truth sidecar.
pub fn write_planted(spec: &PlantSpec, path: &Path) -> Result<Truth> {
    let (header, records, truth) = generate_planted(spec)?;
    let manifest = store::write_dataset(&header, &records, path)?;
    manifest.save(&store::Manifest::sidecar_path(path))?;
    truth.save(&Truth::sidecar_path(path))?;
    Ok(truth)
}

// ---------------------------------------------------------------------------
// Brute-force oracles. Deliberately naive and independent of `metrics`.
// ---------------------------------------------------------------------------

fn oracle_check(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::Shape(format!("lengths {} and {} differ", x.len(), y.len())));
    }
    if x.len() < 2 {
        return Err(Error::Data("need at least two points".into()));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::Data("non-finite input".into()));
    }
    Ok(())
}

fn report(name: MetricName, value: f64, degenerate: bool, n: usize) -> MetricReport {
    MetricReport {
        name,
        value: if degenerate { 0.0 } else { value },
        degenerate,
        n,
    }
}

/// Pearson from raw sums.
pub fn bf_pearson(x: &[f64], y: &[f64]) -> Result<MetricReport> {
    oracle_check(x, y)?;
    let n = x.len() as f64;
    let (mut sx, mut sy, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        sx += a;
        sy += b;
        sxx += a * a;
        syy += b * b;
        sxy += a * b;
    }
    let vx = n * sxx - sx * sx;
    let vy = n * syy - sy * sy;
    let constant = |v: &[f64]| v.iter().all(|&a| a == v[0]);
    let degenerate = constant(x) || constant(y);
    let r = if degenerate { 0.0 } else { (n * sxy - sx * sy) / (vx * vy).sqrt() };
    Ok(report(MetricName::Pearson, r.clamp(-1.0, 1.0), degenerate, x.len()))
}

/// Rank of each value by counting: smaller values plus the mid-point of ties.
pub fn bf_ranks(v: &[f64]) -> Vec<f64> {
    v.iter()
        .map(|&a| {
            let less = v.iter().filter(|&&b| b < a).count() as f64;
            let equal = v.iter().filter(|&&b| b == a).count() as f64;
            less + (equal + 1.0) / 2.0
        })
        .collect()
}

pub fn bf_spearman(x: &[f64], y: &[f64]) -> Result<MetricReport> {
    oracle_check(x, y)?;
    let r = bf_pearson(&bf_ranks(x), &bf_ranks(y))?;
    Ok(MetricReport {
        name: MetricName::Spearman,
        ..r
    })
}

/// Kendall tau-b over all pairs.
pub fn bf_kendall(x: &[f64], y: &[f64]) -> Result<MetricReport> {
    oracle_check(x, y)?;
    let n = x.len();
    let (mut concordant, mut discordant, mut tie_x, mut tie_y) = (0i64, 0i64, 0i64, 0i64);
    for i in 0..n {
        for j in i + 1..n {
            let dx = x[i] - x[j];
            let dy = y[i] - y[j];
            if dx == 0.0 {
                tie_x += 1;
            }
            if dy == 0.0 {
                tie_y += 1;
            }
            if dx != 0.0 && dy != 0.0 {
                if (dx > 0.0) == (dy > 0.0) {
                    concordant += 1;
                } else {
                    discordant += 1;
                }
            }
        }
    }
    let pairs = (n * (n - 1) / 2) as i64;
    let degenerate = tie_x == pairs || tie_y == pairs;
    let denom = (((pairs - tie_x) as f64) * ((pairs - tie_y) as f64)).sqrt();
    let tau = if degenerate { 0.0 } else { (concordant - discordant) as f64 / denom };
    Ok(report(MetricName::Kendall, tau, degenerate, n))
}

/// Confusion matrix, rows = truth, columns = prediction.
pub fn bf_confusion(pred: &[usize], truth: &[usize], classes: usize) -> Result<Vec<Vec<u64>>> {
    if pred.len() != truth.len() {
        return Err(Error::Shape(format!("lengths {} and {} differ", pred.len(), truth.len())));
    }
    let mut m = vec![vec![0u64; classes]; classes];
    for (&p, &t) in pred.iter().zip(truth) {
        if p >= classes || t >= classes {
            return Err(Error::Data(format!("label outside [0, {})", classes)));
        }
        m[t][p] += 1;
    }
    Ok(m)
}

/// Macro-F1 via precision and recall per class; absent classes score 0.
pub fn bf_macro_f1(pred: &[usize], truth: &[usize], classes: usize) -> Result<MetricReport> {
    if pred.is_empty() {
        return Err(Error::Data("empty input".into()));
    }
    let m = bf_confusion(pred, truth, classes)?;
    let mut total = 0.0;
    for c in 0..classes {
        let tp = m[c][c] as f64;
        let predicted: f64 = (0..classes).map(|t| m[t][c] as f64).sum();
        let actual: f64 = m[c].iter().map(|&v| v as f64).sum();
        let precision = if predicted > 0.0 { tp / predicted } else { 0.0 };
        let recall = if actual > 0.0 { tp / actual } else { 0.0 };
        if precision + recall > 0.0 {
            total += 2.0 * precision * recall / (precision + recall);
        }
    }
    Ok(report(MetricName::MacroF1, total / classes as f64, false, pred.len()))
}

/// Dispatch by name. For classification metrics `x` holds predictions and
/// `y` truth as non-negative integers; the class count is `max + 1`.
pub fn brute_force_metric(name: MetricName, x: &[f64], y: &[f64]) -> Result<MetricReport> {
    match name {
        MetricName::Pearson => bf_pearson(x, y),
        MetricName::Spearman => bf_spearman(x, y),
        MetricName::Kendall => bf_kendall(x, y),
        MetricName::MacroF1 | MetricName::Accuracy => {
            let to_class = |v: &[f64]| -> Result<Vec<usize>> {
                v.iter()
                    .map(|&a| {
                        if a >= 0.0 && a.fract() == 0.0 {
                            Ok(a as usize)
                        } else {
                            Err(Error::Data(format!("{a} is not a class label")))
                        }
                    })
                    .collect()
            };
            let (p, t) = (to_class(x)?, to_class(y)?);
            let classes = p.iter().chain(&t).max().map_or(1, |m| m + 1);
            if name == MetricName::MacroF1 {
                bf_macro_f1(&p, &t, classes)
            } else {
                let m = bf_confusion(&p, &t, classes)?;
                let hits: u64 = (0..classes).map(|c| m[c][c]).sum();
                Ok(report(MetricName::Accuracy, hits as f64 / p.len() as f64, false, p.len()))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics;

    fn small(signal: Signal) -> PlantSpec {
        PlantSpec {
            layers: 3,
            dim: 8,
            n: 50,
            planted_layer: 1,
            ..PlantSpec::new(signal, 4)
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = small(Signal::Regression);
        let a = generate_planted(&spec).unwrap();
        let b = generate_planted(&spec).unwrap();
        assert_eq!(a.1, b.1);
        assert_eq!(a.2, b.2);
        let other = generate_planted(&PlantSpec { seed: 5, ..spec }).unwrap();
        assert_ne!(a.1[0].activations, other.1[0].activations);
    }

    #[test]
    fn structure_seed_fixes_direction() {
        let a = generate_planted(&small(Signal::Regression)).unwrap().2;
        let b = generate_planted(&PlantSpec { seed: 99, ..small(Signal::Regression) }).unwrap().2;
        assert_eq!(a.plant, b.plant);
        assert_ne!(a.labels, b.labels);
    }

    #[test]
    fn planted_projection_tracks_label() {
        let spec = PlantSpec { n: 400, ..small(Signal::Regression) };
        let (_, recs, truth) = generate_planted(&spec).unwrap();
        let Plant::Direction(u) = &truth.plant else { panic!() };
        let proj = |layer: usize| -> Vec<f64> {
            recs.iter()
                .map(|r| r.activations.row(layer).iter().zip(u).map(|(&a, &b)| a as f64 * b).sum())
                .collect()
        };
        let y: Vec<f64> = truth.labels.iter().map(|l| match l { LabelValue::Real(v) => *v, _ => panic!() }).collect();
        assert!(metrics::spearman(&proj(1), &y).unwrap().value > 0.95);
        assert!(metrics::spearman(&proj(0), &y).unwrap().value.abs() < 0.2);
    }

    #[test]
    fn kclass_and_xor_labels() {
        let (_, _, t) = generate_planted(&small(Signal::KClass(5))).unwrap();
        assert_eq!(t.labels[7], LabelValue::Class(2));
        let (_, recs, t) = generate_planted(&small(Signal::Xor)).unwrap();
        let Plant::Coordinates(a, b) = t.plant else { panic!() };
        assert_ne!(a, b);
        assert!(recs.iter().all(|r| r.activations.dim() == (3, 8)));
    }

    #[test]
    fn positions_share_groups() {
        let spec = PlantSpec {
            positions: Some(Positions { positions: 4, usable_length: 40, signal_until: 10 }),
            ..small(Signal::Regression)
        };
        let (_, recs, t) = generate_planted(&spec).unwrap();
        assert_eq!(recs.len(), 200);
        assert_eq!(t.truncation_offsets[..4], [0, 10, 20, 30]);
        assert!(t.group_ids[..4].iter().all(|&g| g == 0));
        let ex = t.labeled_examples();
        assert_eq!(ex[3].key_offset, Some(40));
    }

    #[test]
    fn toml_spec() {
        let s = PlantSpec::parse_toml("dim = 8\nsnr = 20.0\nsignal = \"xor\"").unwrap();
        assert_eq!((s.dim, s.signal, s.n), (8, Signal::Xor, 2000));
        let k = PlantSpec::parse_toml("[signal]\nk_class = 4").unwrap();
        assert_eq!(k.signal, Signal::KClass(4));
        assert!(PlantSpec::parse_toml("bogus = 1").is_err());
    }

    #[test]
    fn invalid_specs() {
        assert!(PlantSpec { planted_layer: 3, ..small(Signal::Regression) }.validate().is_err());
        assert!(PlantSpec { snr: 0.0, ..small(Signal::Regression) }.validate().is_err());
        assert!(small(Signal::KClass(1)).validate().is_err());
    }

    #[test]
    fn oracle_basics() {
        let id = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(bf_pearson(&id, &id).unwrap().value, 1.0);
        assert_eq!(bf_spearman(&id, &id).unwrap().value, 1.0);
        assert_eq!(bf_kendall(&id, &id).unwrap().value, 1.0);
        assert_eq!(bf_kendall(&[0.0, 1.0], &[1.0, 0.0]).unwrap().value, -1.0);
        assert!(bf_kendall(&[1.0, 1.0], &[1.0, 2.0]).unwrap().degenerate);
        assert_eq!(bf_ranks(&[10.0, 20.0, 20.0, 5.0]), [2.0, 3.5, 3.5, 1.0]);
        let f1 = bf_macro_f1(&[0, 1, 1, 2], &[0, 1, 2, 2], 3).unwrap().value;
        assert!((f1 - metrics::macro_f1(&[0, 1, 1, 2], &[0, 1, 2, 2], 3).unwrap().value).abs() < 1e-12);
    }

    #[test]
    fn truth_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("planted.bin");
        let truth = write_planted(&small(Signal::Xor), &p).unwrap();
        assert_eq!(Truth::load(&Truth::sidecar_path(&p)).unwrap(), truth);
        let (h, recs) = store::read_all(&p).unwrap();
        assert_eq!(h.record_count, 50);
        assert_eq!(recs.len(), 50);
    }
}
