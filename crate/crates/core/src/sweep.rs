// SPDX-License-Identifier: MIT OR Apache-2.0

//! Layer x hidden-size x seed grid search and the analyses derived from it.
//!
//! Layers are processed one at a time so only one layer's features are in
//! memory; the (hidden size, seed) cells of a layer train in parallel on a
//! rayon pool sized by `PLANPROBE_WORKERS`. Every cell is deterministic, so
//! the result table does not depend on scheduling.
//!
//! Selection sees only the validation table. Test metrics are computed when
//! a cell finishes but live in a separate table that [`select_best`] never
//! receives.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{BuiltDataset, LabeledExample, Split};
use crate::error::{Error, Result};
use crate::labeling::LabelValue;
use crate::metrics::{self, MetricName, MetricReport};
use crate::probe::{train_probe, Predictions, ProbeConfig, ProbeData, ProbeModel, Targets, TaskKind};
use crate::store::DatasetReader;
use crate::HIDDEN_SIZES;

pub const WORKERS_ENV: &str = "PLANPROBE_WORKERS";
pub const DEFAULT_SEGMENTS: usize = 10;
pub const LOW_N: usize = 30;

/// Worker count from `PLANPROBE_WORKERS`, else the available parallelism.
pub fn worker_count() -> usize {
    std::env::var(WORKERS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub layers: Vec<usize>,
    pub hidden_sizes: Vec<usize>,
    pub seeds: Vec<u64>,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
}

impl SweepGrid {
    /// All `layer_count` layers, full W, seeds {0, 1, 2}.
    pub fn full(layer_count: usize) -> Self {
        Self {
            layers: (0..layer_count).collect(),
            hidden_sizes: HIDDEN_SIZES.to_vec(),
            seeds: vec![0, 1, 2],
            epochs: 400,
            learning_rate: 1e-3,
            batch_size: 64,
        }
    }

    pub fn validate(&self, layer_count: usize) -> Result<()> {
        if self.layers.is_empty() || self.hidden_sizes.is_empty() || self.seeds.is_empty() {
            return Err(Error::Config("grid needs at least one layer, hidden size and seed".into()));
        }
        let mut seeds = self.seeds.clone();
        seeds.sort_unstable();
        seeds.dedup();
        if seeds.len() != self.seeds.len() {
            return Err(Error::Config("grid seeds must be distinct".into()));
        }
        if let Some(&h) = self.hidden_sizes.iter().find(|h| !HIDDEN_SIZES.contains(h)) {
            return Err(Error::Config(format!("hidden size {h} is not one of W = {HIDDEN_SIZES:?}")));
        }
        if let Some(&l) = self.layers.iter().find(|&&l| l >= layer_count) {
            return Err(Error::Config(format!("layer {l} outside the file's {layer_count} layers")));
        }
        Ok(())
    }

    pub fn probe_config(&self, kind: TaskKind, layer: usize, hidden: usize, seed: u64) -> ProbeConfig {
        ProbeConfig {
            epochs: self.epochs,
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            ..ProbeConfig::new(kind, layer, hidden, seed)
        }
    }

    fn sorted_layers(&self) -> Vec<usize> {
        let mut l = self.layers.clone();
        l.sort_unstable();
        l.dedup();
        l
    }

    fn sorted_hidden(&self) -> Vec<usize> {
        let mut h = self.hidden_sizes.clone();
        h.sort_unstable();
        h.dedup();
        h
    }
}

/// Record indices and targets of one split.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitData {
    pub records: Vec<usize>,
    pub targets: Targets,
}

/// An activation file plus its train/val/test partition.
#[derive(Debug, Clone)]
pub struct SweepInput {
    pub path: PathBuf,
    pub kind: TaskKind,
    pub train: SplitData,
    pub val: SplitData,
    pub test: SplitData,
}

impl SweepInput {
    pub fn from_built(path: &Path, built: &BuiltDataset, kind: TaskKind) -> Self {
        let split = |s| {
            let (records, targets) = built.split_targets(s);
            SplitData { records, targets }
        };
        Self {
            path: path.to_path_buf(),
            kind,
            train: split(Split::Train),
            val: split(Split::Val),
            test: split(Split::Test),
        }
    }
}

/// Rows of one stored layer for the given records, in the given order.
pub fn load_features(path: &Path, layer: usize, records: &[usize]) -> Result<Array2<f32>> {
    let mut reader = DatasetReader::open(path)?.with_layers(&[layer])?;
    let d = reader.header().hidden_dim as usize;
    let mut out = Array2::<f32>::zeros((records.len(), d));
    for (row, &i) in records.iter().enumerate() {
        let rec = reader.read_record(i)?;
        out.row_mut(row).assign(&rec.activations.row(0));
    }
    Ok(out)
}

/// Task metrics of predictions against targets: Pearson, Spearman and
/// Kendall for regression; macro-F1 and accuracy for classification.
pub fn evaluate(pred: &Predictions, targets: &Targets, kind: TaskKind) -> Result<Vec<MetricReport>> {
    match (pred, targets, kind) {
        (Predictions::Regression(p), Targets::Regression(t), TaskKind::Regression) => Ok(vec![
            metrics::pearson(p, t)?,
            metrics::spearman(p, t)?,
            metrics::kendall_tau_b(p, t)?,
        ]),
        (Predictions::Classification { classes: p, .. }, Targets::Classes(t), TaskKind::Classification { classes }) => {
            Ok(vec![metrics::macro_f1(p, t, classes)?, metrics::accuracy(p, t)?])
        }
        _ => Err(Error::Data("predictions, targets and task kind disagree".into())),
    }
}

fn metric_value(reports: &[MetricReport], name: MetricName) -> Option<f64> {
    reports.iter().find(|r| r.name == name).map(|r| r.value)
}

/// Mean of each metric across seeds, in the first report's metric order.
/// Flagged degenerate when any seed was.
pub fn average_reports(per_seed: &[Vec<MetricReport>]) -> Vec<MetricReport> {
    let Some(first) = per_seed.first() else { return Vec::new() };
    first
        .iter()
        .map(|r| {
            let same: Vec<&MetricReport> = per_seed.iter().filter_map(|s| s.iter().find(|x| x.name == r.name)).collect();
            MetricReport {
                name: r.name,
                value: same.iter().map(|x| x.value).sum::<f64>() / same.len() as f64,
                degenerate: same.iter().any(|x| x.degenerate),
                n: r.n,
            }
        })
        .collect()
}

/// One trained (layer, hidden size, seed) probe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub layer: usize,
    pub hidden_size: usize,
    pub seed: u64,
    pub best_epoch: Option<usize>,
    pub val: Vec<MetricReport>,
    /// Why the cell failed; failed cells are excluded from selection.
    pub error: Option<String>,
}

impl CellResult {
    pub fn failed(&self) -> bool {
        self.error.is_some()
    }
}

/// Test metrics of one cell, kept apart from selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestEntry {
    pub layer: usize,
    pub hidden_size: usize,
    pub seed: u64,
    pub test: Vec<MetricReport>,
}

/// Selection metric on validation, `None` for failed cells.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValidationEntry {
    pub layer: usize,
    pub hidden_size: usize,
    pub seed: u64,
    pub value: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BestCell {
    pub layer: usize,
    pub hidden_size: usize,
    /// Seed-averaged validation selection metric.
    pub val: f64,
}

/// Seed-averaged validation value per (layer, hidden size), over the cells
/// that did not fail. Seeds are summed in table order.
pub fn seed_averaged(table: &[ValidationEntry]) -> BTreeMap<(usize, usize), f64> {
    let mut acc: BTreeMap<(usize, usize), (f64, usize)> = BTreeMap::new();
    for e in table {
        if let Some(v) = e.value {
            let slot = acc.entry((e.layer, e.hidden_size)).or_insert((0.0, 0));
            slot.0 += v;
            slot.1 += 1;
        }
    }
    acc.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect()
}

/// The (layer, hidden size) with the highest seed-averaged validation
/// metric; ties go to the smaller hidden size, then the lower layer.
pub fn select_best(table: &[ValidationEntry]) -> Option<BestCell> {
    let mut best: Option<BestCell> = None;
    for ((layer, hidden_size), val) in seed_averaged(table) {
        let better = match best {
            None => true,
            Some(b) => {
                val > b.val
                    || (val == b.val && (hidden_size, layer) < (b.hidden_size, b.layer))
            }
        };
        if better {
            best = Some(BestCell { layer, hidden_size, val });
        }
    }
    best
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepResult {
    pub kind: TaskKind,
    pub selection_metric: MetricName,
    pub grid: SweepGrid,
    pub cells: Vec<CellResult>,
    pub tests: Vec<TestEntry>,
    pub best_cell: Option<BestCell>,
    /// Seed-averaged test metrics at the best cell.
    pub best_test: Vec<MetricReport>,
    /// Seeds of `best_models`.
    pub best_seeds: Vec<u64>,
    /// Best-cell probes, one per successful seed in grid seed order.
    #[serde(skip)]
    pub best_models: Vec<ProbeModel>,
}

impl SweepResult {
    pub fn validation_table(&self) -> Vec<ValidationEntry> {
        self.cells
            .iter()
            .map(|c| ValidationEntry {
                layer: c.layer,
                hidden_size: c.hidden_size,
                seed: c.seed,
                value: if c.failed() { None } else { metric_value(&c.val, self.selection_metric) },
            })
            .collect()
    }

    pub fn failed_cells(&self) -> impl Iterator<Item = &CellResult> {
        self.cells.iter().filter(|c| c.failed())
    }

    fn test_value(&self, layer: usize, hidden: usize, seed: u64) -> Option<f64> {
        self.tests
            .iter()
            .find(|t| t.layer == layer && t.hidden_size == hidden && t.seed == seed)
            .and_then(|t| metric_value(&t.test, self.selection_metric))
    }

    fn seed_mean_test(&self, layer: usize, hidden: usize) -> Option<f64> {
        let v: Vec<f64> = self.grid.seeds.iter().filter_map(|&s| self.test_value(layer, hidden, s)).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

struct CellOutput {
    cell: CellResult,
    test: Option<TestEntry>,
    model: Option<ProbeModel>,
}

fn run_cell(
    config: ProbeConfig,
    train: ProbeData<'_>,
    val: ProbeData<'_>,
    test: ProbeData<'_>,
) -> CellOutput {
    let (layer, hidden_size, seed) = (config.layer, config.hidden_size, config.seed);
    let attempt = || -> Result<(ProbeModel, Vec<MetricReport>, Vec<MetricReport>)> {
        let (model, _) = train_probe(train, val, &config)?;
        let v = evaluate(&model.predict(val.features)?, val.targets, config.kind)?;
        let t = evaluate(&model.predict(test.features)?, test.targets, config.kind)?;
        Ok((model, v, t))
    };
    match attempt() {
        Ok((model, v, t)) => CellOutput {
            cell: CellResult {
                layer,
                hidden_size,
                seed,
                best_epoch: Some(model.best_epoch),
                val: v,
                error: None,
            },
            test: Some(TestEntry { layer, hidden_size, seed, test: t }),
            model: Some(model),
        },
        Err(e) => CellOutput {
            cell: CellResult {
                layer,
                hidden_size,
                seed,
                best_epoch: None,
                val: Vec::new(),
                error: Some(e.to_string()),
            },
            test: None,
            model: None,
        },
    }
}

/// Train every grid cell and select the best (layer, hidden size).
pub fn grid_search(input: &SweepInput, grid: &SweepGrid) -> Result<SweepResult> {
    let header = DatasetReader::open(&input.path)?.header().clone();
    grid.validate(header.layer_count as usize)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(worker_count())
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;

    let selection_metric = input.kind.selection_metric();
    let hidden = grid.sorted_hidden();
    let mut cells = Vec::new();
    let mut tests = Vec::new();
    let mut table = Vec::new();
    let mut best_models: Vec<(u64, ProbeModel)> = Vec::new();
    for layer in grid.sorted_layers() {
        let xtr = load_features(&input.path, layer, &input.train.records)?;
        let xva = load_features(&input.path, layer, &input.val.records)?;
        let xte = load_features(&input.path, layer, &input.test.records)?;
        let train = ProbeData::new(xtr.view(), &input.train.targets);
        let val = ProbeData::new(xva.view(), &input.val.targets);
        let test = ProbeData::new(xte.view(), &input.test.targets);
        let jobs: Vec<(usize, u64)> = hidden
            .iter()
            .flat_map(|&h| grid.seeds.iter().map(move |&s| (h, s)))
            .collect();
        let outputs: Vec<CellOutput> = pool.install(|| {
            jobs.par_iter()
                .map(|&(h, s)| run_cell(grid.probe_config(input.kind, layer, h, s), train, val, test))
                .collect()
        });
        let mut layer_models: BTreeMap<usize, Vec<(u64, ProbeModel)>> = BTreeMap::new();
        for out in outputs {
            table.push(ValidationEntry {
                layer,
                hidden_size: out.cell.hidden_size,
                seed: out.cell.seed,
                value: if out.cell.failed() { None } else { metric_value(&out.cell.val, selection_metric) },
            });
            if let Some(m) = out.model {
                layer_models.entry(m.hidden_size).or_default().push((out.cell.seed, m));
            }
            tests.extend(out.test);
            cells.push(out.cell);
        }
        // keep only the probes of the running best cell
        if let Some(b) = select_best(&table) {
            if b.layer == layer {
                best_models = layer_models.remove(&b.hidden_size).unwrap_or_default();
            }
        }
    }
    let best_cell = select_best(&table);
    let best_test = match best_cell {
        Some(b) => {
            let per_seed: Vec<Vec<MetricReport>> = grid
                .seeds
                .iter()
                .filter_map(|&s| {
                    tests
                        .iter()
                        .find(|t| t.layer == b.layer && t.hidden_size == b.hidden_size && t.seed == s)
                        .map(|t| t.test.clone())
                })
                .collect();
            average_reports(&per_seed)
        }
        None => Vec::new(),
    };
    Ok(SweepResult {
        kind: input.kind,
        selection_metric,
        grid: grid.clone(),
        cells,
        tests,
        best_cell,
        best_test,
        best_seeds: best_models.iter().map(|(s, _)| *s).collect(),
        best_models: best_models.into_iter().map(|(_, m)| m).collect(),
    })
}

/// Per-layer test metric with the hidden size chosen on validation per layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerwiseCurve {
    pub metric: MetricName,
    pub layers: Vec<usize>,
    pub hidden_sizes: Vec<Option<usize>>,
    pub values: Vec<Option<f64>>,
    /// `(v - min) / (max - min)`; all zeros when degenerate.
    pub normalized: Vec<Option<f64>>,
    pub degenerate: bool,
}

/// Min-max normalization of a series; degenerate when max equals min or
/// nothing is present.
pub fn row_normalize(values: &[Option<f64>]) -> (Vec<Option<f64>>, bool) {
    let present: Vec<f64> = values.iter().flatten().copied().collect();
    let lo = present.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = present.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if present.is_empty() || hi == lo {
        return (values.iter().map(|v| v.map(|_| 0.0)).collect(), true);
    }
    (values.iter().map(|v| v.map(|x| (x - lo) / (hi - lo))).collect(), false)
}

pub fn layerwise_curve(result: &SweepResult) -> LayerwiseCurve {
    let table = result.validation_table();
    let layers = result.grid.sorted_layers();
    let mut hidden_sizes = Vec::with_capacity(layers.len());
    let mut values = Vec::with_capacity(layers.len());
    for &layer in &layers {
        let rows: Vec<ValidationEntry> = table.iter().filter(|e| e.layer == layer).copied().collect();
        let best = select_best(&rows);
        hidden_sizes.push(best.map(|b| b.hidden_size));
        values.push(best.and_then(|b| result.seed_mean_test(layer, b.hidden_size)));
    }
    let (normalized, degenerate) = row_normalize(&values);
    LayerwiseCurve {
        metric: result.selection_metric,
        layers,
        hidden_sizes,
        values,
        normalized,
        degenerate,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HiddenSizeCurve {
    pub metric: MetricName,
    pub hidden_sizes: Vec<usize>,
    /// Mean test metric over layers and seeds; `None` when every cell failed.
    pub values: Vec<Option<f64>>,
}

pub fn hidden_size_curve(result: &SweepResult) -> Result<HiddenSizeCurve> {
    let hidden_sizes = result.grid.sorted_hidden();
    let layers = result.grid.sorted_layers();
    let values: Vec<Option<f64>> = hidden_sizes
        .iter()
        .map(|&h| {
            let v: Vec<f64> = layers
                .iter()
                .flat_map(|&l| result.grid.seeds.iter().map(move |&s| (l, s)))
                .filter_map(|(l, s)| result.test_value(l, h, s))
                .collect();
            (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
        })
        .collect();
    if values.iter().all(Option::is_none) {
        return Err(Error::Data("every grid cell failed; no hidden-size curve".into()));
    }
    Ok(HiddenSizeCurve {
        metric: result.selection_metric,
        hidden_sizes,
        values,
    })
}

fn check_compatible(models: &[ProbeModel], path: &Path, kind: TaskKind) -> Result<()> {
    let header = DatasetReader::open(path)?.header().clone();
    let Some(first) = models.first() else {
        return Err(Error::Data("no trained probes to apply".into()));
    };
    for m in models {
        if m.kind != kind {
            return Err(Error::Compatibility(format!(
                "probe task kind {:?} differs from target {:?}",
                m.kind, kind
            )));
        }
        if m.input_dim() != header.hidden_dim as usize {
            return Err(Error::Compatibility(format!(
                "probe expects d = {}, target has d = {}",
                m.input_dim(),
                header.hidden_dim
            )));
        }
        if m.layer >= header.layer_count as usize || m.layer != first.layer {
            return Err(Error::Compatibility(format!(
                "probe layer {} not available in the {}-layer target",
                m.layer, header.layer_count
            )));
        }
    }
    Ok(())
}

/// Targets of labeled examples; all must carry a value of the task's kind.
pub fn targets_for(examples: &[&LabeledExample], kind: TaskKind) -> Result<Targets> {
    let values = examples.iter().map(|e| {
        e.value()
            .ok_or_else(|| Error::Data(format!("example {} has no label", e.example_id)))
    });
    match kind {
        TaskKind::Regression => values
            .map(|v| match v? {
                LabelValue::Real(x) => Ok(x),
                LabelValue::Class(c) => Ok(c as f64),
            })
            .collect::<Result<_>>()
            .map(Targets::Regression),
        TaskKind::Classification { .. } => values
            .map(|v| match v? {
                LabelValue::Class(c) => Ok(c),
                LabelValue::Real(_) => Err(Error::Data("real label on a classification task".into())),
            })
            .collect::<Result<_>>()
            .map(Targets::Classes),
    }
}

/// Apply source probes (never retrained) to `records` of a target file and
/// average each metric over the probes.
pub fn cross_dataset_eval(models: &[ProbeModel], path: &Path, records: &[usize], targets: &Targets, kind: TaskKind) -> Result<Vec<MetricReport>> {
    check_compatible(models, path, kind)?;
    let x = load_features(path, models[0].layer, records)?;
    let per_seed = models
        .iter()
        .map(|m| evaluate(&m.predict(x.view())?, targets, kind))
        .collect::<Result<Vec<_>>>()?;
    Ok(average_reports(&per_seed))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentMetric {
    pub segment: usize,
    pub n: usize,
    /// Seed-averaged task metrics; empty when the segment has < 2 records.
    pub metrics: Vec<MetricReport>,
    pub low_n: bool,
}

/// Segment of a record at `offset` out of `usable` positions.
pub fn segment_of(offset: u64, usable: u64, segments: usize) -> usize {
    if usable == 0 {
        return 0;
    }
    let s = (segments as u128 * offset as u128 / usable as u128) as usize;
    s.min(segments - 1)
}

/// Metric per generation-position segment. Only records with a truncation
/// offset and a key offset (their usable length) take part.
pub fn dynamics_eval(models: &[ProbeModel], path: &Path, examples: &[LabeledExample], segments: usize, kind: TaskKind) -> Result<Vec<SegmentMetric>> {
    if segments == 0 {
        return Err(Error::Config("segment count must be positive".into()));
    }
    check_compatible(models, path, kind)?;
    let positioned: Vec<(&LabeledExample, usize)> = examples
        .iter()
        .filter(|e| e.truncation_offset >= 0 && e.value().is_some())
        .filter_map(|e| Some((e, segment_of(e.truncation_offset as u64, e.key_offset?, segments))))
        .collect();
    if positioned.is_empty() {
        return Err(Error::Data("no position-indexed records".into()));
    }
    let records: Vec<usize> = positioned.iter().map(|(e, _)| e.record_index).collect();
    let x = load_features(path, models[0].layer, &records)?;
    let preds = models.iter().map(|m| m.predict(x.view())).collect::<Result<Vec<_>>>()?;
    let mut out = Vec::with_capacity(segments);
    for s in 0..segments {
        let rows: Vec<usize> = (0..positioned.len()).filter(|&i| positioned[i].1 == s).collect();
        let members: Vec<&LabeledExample> = rows.iter().map(|&i| positioned[i].0).collect();
        let metrics = if rows.len() >= 2 {
            let t = targets_for(&members, kind)?;
            let per_seed = preds
                .iter()
                .map(|p| evaluate(&select_predictions(p, &rows), &t, kind))
                .collect::<Result<Vec<_>>>()?;
            average_reports(&per_seed)
        } else {
            Vec::new()
        };
        out.push(SegmentMetric {
            segment: s,
            n: rows.len(),
            metrics,
            low_n: rows.len() < LOW_N,
        });
    }
    Ok(out)
}

fn select_predictions(p: &Predictions, rows: &[usize]) -> Predictions {
    match p {
        Predictions::Regression(v) => Predictions::Regression(rows.iter().map(|&i| v[i]).collect()),
        Predictions::Classification { probs, classes } => Predictions::Classification {
            probs: probs.select(ndarray::Axis(0), rows),
            classes: rows.iter().map(|&i| classes[i]).collect(),
        },
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelfEstimateReport {
    pub metric: MetricName,
    pub probe: MetricReport,
    pub verbalized: MetricReport,
    /// probe minus verbalized.
    pub gap: f64,
    pub compared: usize,
    /// Examples with truth and probe prediction but no parseable estimate.
    pub missing_estimates: usize,
}

/// Compare probe predictions and verbalized self-estimates against truth
/// on the examples where all three exist.
pub fn self_estimate_compare(
    truth: &BTreeMap<u64, f64>,
    probe: &BTreeMap<u64, f64>,
    verbalized: &BTreeMap<u64, Option<f64>>,
    metric: MetricName,
) -> Result<SelfEstimateReport> {
    let mut t = Vec::new();
    let mut p = Vec::new();
    let mut v = Vec::new();
    let mut missing = 0;
    for (id, &y) in truth {
        let Some(&yp) = probe.get(id) else { continue };
        match verbalized.get(id).copied().flatten() {
            Some(yv) => {
                t.push(y);
                p.push(yp);
                v.push(yv);
            }
            None => missing += 1,
        }
    }
    if t.is_empty() {
        return Err(Error::Data("no example has a truth value, a probe prediction and a verbalized estimate".into()));
    }
    let score = |pred: &[f64]| -> Result<MetricReport> {
        match metric {
            MetricName::Pearson => metrics::pearson(pred, &t),
            MetricName::Spearman => metrics::spearman(pred, &t),
            MetricName::Kendall => metrics::kendall_tau_b(pred, &t),
            MetricName::MacroF1 | MetricName::Accuracy => {
                let cls = |v: &[f64]| v.iter().map(|&x| x.max(0.0).round() as usize).collect::<Vec<_>>();
                let (pc, tc) = (cls(pred), cls(&t));
                if metric == MetricName::Accuracy {
                    metrics::accuracy(&pc, &tc)
                } else {
                    let k = pc.iter().chain(&tc).max().map_or(1, |m| m + 1);
                    metrics::macro_f1(&pc, &tc, k)
                }
            }
        }
    };
    let probe_r = score(&p)?;
    let verbal_r = score(&v)?;
    Ok(SelfEstimateReport {
        metric,
        gap: probe_r.value - verbal_r.value,
        probe: probe_r,
        verbalized: verbal_r,
        compared: t.len(),
        missing_estimates: missing,
    })
}

/// Regression predictions of one probe keyed by example id.
pub fn predict_examples(model: &ProbeModel, path: &Path, examples: &[LabeledExample]) -> Result<BTreeMap<u64, f64>> {
    let records: Vec<usize> = examples.iter().map(|e| e.record_index).collect();
    let x = load_features(path, model.layer, &records)?;
    let values = match model.predict(x.view())? {
        Predictions::Regression(v) => v,
        Predictions::Classification { classes, .. } => classes.into_iter().map(|c| c as f64).collect(),
    };
    Ok(examples.iter().map(|e| e.example_id).zip(values).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(layer: usize, hidden_size: usize, seed: u64, value: Option<f64>) -> ValidationEntry {
        ValidationEntry { layer, hidden_size, seed, value }
    }

    #[test]
    fn selection_tie_breaks() {
        let t = vec![
            entry(3, 16, 0, Some(0.8)),
            entry(1, 16, 0, Some(0.8)),
            entry(1, 32, 0, Some(0.8)),
            entry(0, 4, 0, Some(0.5)),
        ];
        let b = select_best(&t).unwrap();
        assert_eq!((b.layer, b.hidden_size), (1, 16));
        assert_eq!(select_best(&[entry(2, 8, 0, Some(0.1))]).unwrap().layer, 2);
        assert!(select_best(&[entry(2, 8, 0, None)]).is_none());
    }

    #[test]
    fn failed_seeds_do_not_count() {
        let t = vec![entry(0, 1, 0, Some(0.9)), entry(0, 1, 1, None), entry(1, 1, 0, Some(0.8)), entry(1, 1, 1, Some(0.8))];
        let avg = seed_averaged(&t);
        assert_eq!(avg[&(0, 1)], 0.9);
        assert_eq!(select_best(&t).unwrap().layer, 0);
    }

    #[test]
    fn normalization() {
        let (n, d) = row_normalize(&[Some(1.0), Some(3.0), Some(2.0)]);
        assert_eq!(n, [Some(0.0), Some(1.0), Some(0.5)]);
        assert!(!d);
        let (n, d) = row_normalize(&[Some(0.4), Some(0.4)]);
        assert!(d);
        assert_eq!(n, [Some(0.0), Some(0.0)]);
    }

    #[test]
    fn segment_boundaries() {
        assert_eq!(segment_of(0, 100, 10), 0);
        assert_eq!(segment_of(10, 100, 10), 1);
        assert_eq!(segment_of(9, 100, 10), 0);
        assert_eq!(segment_of(100, 100, 10), 9);
        assert_eq!(segment_of(250, 100, 10), 9);
        assert_eq!(segment_of(42, 100, 1), 0);
    }

    #[test]
    fn grid_validation() {
        let mut g = SweepGrid::full(4);
        assert!(g.validate(4).is_ok());
        assert!(g.validate(3).is_err());
        g.seeds = vec![1, 1];
        assert!(g.validate(4).is_err());
        g.seeds = vec![0];
        g.hidden_sizes = vec![3];
        assert!(g.validate(4).is_err());
    }

    #[test]
    fn self_estimates() {
        let truth: BTreeMap<u64, f64> = (0..50).map(|i| (i, (i * 7 % 50) as f64)).collect();
        let probe = truth.clone();
        let mut verbal: BTreeMap<u64, Option<f64>> = truth.iter().map(|(&k, &v)| (k, Some(v))).collect();
        verbal.insert(3, None);
        let r = self_estimate_compare(&truth, &probe, &verbal, MetricName::Spearman).unwrap();
        assert_eq!(r.verbalized.value, 1.0);
        assert_eq!(r.compared, 49);
        assert_eq!(r.missing_estimates, 1);
        assert!(self_estimate_compare(&truth, &BTreeMap::new(), &verbal, MetricName::Spearman).is_err());
    }

    #[test]
    fn seed_averages() {
        let r = |v: f64, d: bool| vec![MetricReport { name: MetricName::Spearman, value: v, degenerate: d, n: 10 }];
        let avg = average_reports(&[r(0.5, false), r(0.7, true)]);
        assert!((avg[0].value - 0.6).abs() < 1e-12);
        assert!(avg[0].degenerate);
    }
}
