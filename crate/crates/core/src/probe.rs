// SPDX-License-Identifier: MIT OR Apache-2.0

//! One-hidden-layer ReLU probes trained on single-layer activations.
//!
//! ```text
//! h   = relu(W1 x + b1)        W1: hidden x d
//! out = W2 h + b2              W2: out_dim x hidden
//! ```
//!
//! Regression probes minimise mean squared error on z-scored targets and
//! de-standardize their outputs. Classification probes minimise softmax
//! cross-entropy. Parameters are updated with Adam on shuffled mini-batches,
//! and the returned model is the checkpoint with the best validation metric
//! (Spearman for regression, macro-F1 for classification).
//!
//! Training runs in `f32` (reductions accumulate in `f64`); the same
//! forward/backward code is instantiated in `f64` for [`gradient_check`].

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, NdFloat, Zip};
use num_traits::NumCast;
use rand::distr::{Distribution, Uniform};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{self, MetricName};
use crate::HIDDEN_SIZES;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Regression,
    Classification { classes: usize },
}

impl TaskKind {
    pub fn out_dim(self) -> usize {
        match self {
            TaskKind::Regression => 1,
            TaskKind::Classification { classes } => classes,
        }
    }

    /// Metric used to pick checkpoints and grid cells.
    pub fn selection_metric(self) -> MetricName {
        match self {
            TaskKind::Regression => MetricName::Spearman,
            TaskKind::Classification { .. } => MetricName::MacroF1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub hidden_size: usize,
    pub layer: usize,
    pub kind: TaskKind,
    pub epochs: usize,
    pub seed: u64,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// z-score input features with train-split statistics.
    pub standardize: bool,
}

impl ProbeConfig {
    pub fn new(kind: TaskKind, layer: usize, hidden_size: usize, seed: u64) -> Self {
        Self {
            hidden_size,
            layer,
            kind,
            epochs: 400,
            seed,
            learning_rate: 1e-3,
            batch_size: 64,
            standardize: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !HIDDEN_SIZES.contains(&self.hidden_size) {
            return Err(Error::Config(format!(
                "hidden size {} is not one of W = {:?}",
                self.hidden_size, HIDDEN_SIZES
            )));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be a positive real, got {}",
                self.learning_rate
            )));
        }
        if let TaskKind::Classification { classes } = self.kind {
            if classes < 2 {
                return Err(Error::Config(format!("classification needs >= 2 classes, got {classes}")));
            }
        }
        Ok(())
    }
}

/// Probe targets for a set of examples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Targets {
    Regression(Vec<f64>),
    Classes(Vec<usize>),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Regression(v) => v.len(),
            Targets::Classes(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn select(&self, idx: &[usize]) -> Targets {
        match self {
            Targets::Regression(v) => Targets::Regression(idx.iter().map(|&i| v[i]).collect()),
            Targets::Classes(v) => Targets::Classes(idx.iter().map(|&i| v[i]).collect()),
        }
    }

    fn check(&self, kind: TaskKind) -> Result<()> {
        match (self, kind) {
            (Targets::Regression(v), TaskKind::Regression) => {
                if v.iter().any(|t| !t.is_finite()) {
                    return Err(Error::Data("non-finite regression target".into()));
                }
                Ok(())
            }
            (Targets::Classes(v), TaskKind::Classification { classes }) => {
                if let Some(bad) = v.iter().find(|&&c| c >= classes) {
                    return Err(Error::Data(format!("class label {bad} outside [0, {}]", classes - 1)));
                }
                Ok(())
            }
            _ => Err(Error::Data("targets do not match the task kind".into())),
        }
    }
}

/// Features and targets of one split.
#[derive(Debug, Clone, Copy)]
pub struct ProbeData<'a> {
    pub features: ArrayView2<'a, f32>,
    pub targets: &'a Targets,
}

impl<'a> ProbeData<'a> {
    pub fn new(features: ArrayView2<'a, f32>, targets: &'a Targets) -> Self {
        Self { features, targets }
    }
}

/// Per-epoch training loss and validation metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingCurve {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub val_metric: Vec<f64>,
    pub best_epoch: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Params<F> {
    pub w1: Array2<F>,
    pub b1: Array1<F>,
    pub w2: Array2<F>,
    pub b2: Array1<F>,
}

fn cast<F: NumCast, T: NumCast>(v: T) -> F {
    F::from(v).expect("numeric cast")
}

/// Borrowed targets of one batch, already in training units.
enum BatchTargets<'a, F> {
    Regression(&'a [F]),
    Classes(&'a [usize]),
}

/// Returns (hidden activations, outputs) for a batch `x` (batch x d).
/// A hidden unit is active exactly where its activation is positive.
fn mlp_forward<F: NdFloat>(
    w1: &Array2<F>,
    b1: &Array1<F>,
    w2: &Array2<F>,
    b2: &Array1<F>,
    x: ArrayView2<F>,
) -> (Array2<F>, Array2<F>) {
    let mut a = x.dot(&w1.t());
    a += b1;
    a.mapv_inplace(|v| if v > F::zero() { v } else { F::zero() });
    // out_dim is small (1..=K): column-wise mat-vec beats a packed GEMM.
    let mut out = Array2::zeros((a.nrows(), w2.nrows()));
    for (k, w) in w2.outer_iter().enumerate() {
        let col = a.dot(&w);
        out.column_mut(k).assign(&col);
    }
    out += b2;
    (a, out)
}

impl<F: NdFloat> Params<F> {
    fn zeros(d: usize, hidden: usize, out: usize) -> Self {
        Self {
            w1: Array2::zeros((hidden, d)),
            b1: Array1::zeros(hidden),
            w2: Array2::zeros((out, hidden)),
            b2: Array1::zeros(out),
        }
    }

    /// Weights uniform in ±sqrt(6 / (fan_in + fan_out)), biases zero.
    fn init(d: usize, hidden: usize, out: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut p = Self::zeros(d, hidden, out);
        let a1 = (6.0 / (d + hidden) as f64).sqrt();
        let a2 = (6.0 / (hidden + out) as f64).sqrt();
        let u1 = Uniform::new_inclusive(-a1, a1).unwrap();
        let u2 = Uniform::new_inclusive(-a2, a2).unwrap();
        p.w1.iter_mut().for_each(|w| *w = cast(u1.sample(rng)));
        p.w2.iter_mut().for_each(|w| *w = cast(u2.sample(rng)));
        p
    }

    fn slices_mut(&mut self) -> [&mut [F]; 4] {
        [
            self.w1.as_slice_mut().unwrap(),
            self.b1.as_slice_mut().unwrap(),
            self.w2.as_slice_mut().unwrap(),
            self.b2.as_slice_mut().unwrap(),
        ]
    }

    fn slices(&self) -> [&[F]; 4] {
        [
            self.w1.as_slice().unwrap(),
            self.b1.as_slice().unwrap(),
            self.w2.as_slice().unwrap(),
            self.b2.as_slice().unwrap(),
        ]
    }

    fn forward(&self, x: ArrayView2<F>) -> (Array2<F>, Array2<F>) {
        mlp_forward(&self.w1, &self.b1, &self.w2, &self.b2, x)
    }

    /// Mean batch loss (accumulated in f64) and, for each output, dLoss/dOut.
    fn loss_and_dout(out: &Array2<F>, targets: &BatchTargets<F>) -> (f64, Array2<F>) {
        let b = out.nrows();
        let inv_b: F = cast(1.0 / b as f64);
        let mut dout = Array2::zeros(out.raw_dim());
        let mut total = 0.0f64;
        match targets {
            BatchTargets::Regression(t) => {
                let two: F = cast(2.0);
                for (i, row) in out.outer_iter().enumerate() {
                    let diff = row[0] - t[i];
                    total += cast::<f64, _>(diff * diff);
                    dout[[i, 0]] = two * diff * inv_b;
                }
            }
            BatchTargets::Classes(t) => {
                for (i, row) in out.outer_iter().enumerate() {
                    let m = row.fold(F::neg_infinity(), |acc, &v| acc.max(v));
                    let sum = row.fold(F::zero(), |acc, &v| acc + (v - m).exp());
                    let lse = m + sum.ln();
                    total += cast::<f64, _>(lse - row[t[i]]);
                    for (k, &v) in row.iter().enumerate() {
                        let p = (v - lse).exp();
                        let g = if k == t[i] { p - F::one() } else { p };
                        dout[[i, k]] = g * inv_b;
                    }
                }
            }
        }
        (total / b as f64, dout)
    }

    fn loss(&self, x: ArrayView2<F>, targets: &BatchTargets<F>) -> f64 {
        let (_, out) = self.forward(x);
        Self::loss_and_dout(&out, targets).0
    }

    fn loss_and_grad(&self, x: ArrayView2<F>, targets: &BatchTargets<F>) -> (f64, Params<F>) {
        let (a, out) = self.forward(x);
        let (loss, dout) = Self::loss_and_dout(&out, targets);
        let mut w2 = Array2::zeros(self.w2.raw_dim());
        let mut dz = Array2::zeros(a.raw_dim());
        for ((a_row, g), mut dz_row) in a.outer_iter().zip(dout.outer_iter()).zip(dz.outer_iter_mut()) {
            for (k, (&gk, w)) in g.iter().zip(self.w2.outer_iter()).enumerate() {
                w2.row_mut(k).scaled_add(gk, &a_row);
                dz_row.scaled_add(gk, &w);
            }
            // ReLU derivative: no gradient through inactive units.
            Zip::from(&mut dz_row).and(&a_row).for_each(|d, &av| {
                if av <= F::zero() {
                    *d = F::zero();
                }
            });
        }
        let b2 = dout.sum_axis(Axis(0));
        let w1 = dz.t().dot(&x);
        let b1 = dz.sum_axis(Axis(0));
        (loss, Params { w1, b1, w2, b2 })
    }

    fn all_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|v| v.is_finite()))
    }
}

struct Adam {
    m: Params<f32>,
    v: Params<f32>,
    step: i32,
    lr: f64,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(shape: &Params<f32>, lr: f64) -> Self {
        let zeros = || Params::zeros(shape.w1.ncols(), shape.w1.nrows(), shape.w2.nrows());
        Self {
            m: zeros(),
            v: zeros(),
            step: 0,
            lr,
        }
    }

    fn update(&mut self, params: &mut Params<f32>, grads: &Params<f32>) {
        self.step += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.step);
        let c2 = 1.0 - Self::BETA2.powi(self.step);
        let (b1, b2, eps) = (Self::BETA1 as f32, Self::BETA2 as f32, Self::EPS as f32);
        let step_size = (self.lr / c1) as f32;
        let inv_sqrt_c2 = (1.0 / c2.sqrt()) as f32;
        let ps = params.slices_mut();
        let gs = grads.slices();
        let ms = self.m.slices_mut();
        let vs = self.v.slices_mut();
        for (((p, g), m), v) in ps.into_iter().zip(gs).zip(ms).zip(vs) {
            for k in 0..p.len() {
                let gk = g[k];
                m[k] = b1 * m[k] + (1.0 - b1) * gk;
                v[k] = b2 * v[k] + (1.0 - b2) * gk * gk;
                p[k] -= step_size * m[k] / (v[k].sqrt() * inv_sqrt_c2 + eps);
            }
        }
    }
}

/// A trained probe: input standardizer, parameters and target scaling.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeModel {
    pub kind: TaskKind,
    pub layer: usize,
    pub hidden_size: usize,
    pub feature_mean: Vec<f32>,
    pub feature_scale: Vec<f32>,
    /// Regression targets are predicted as `out * target_scale + target_mean`.
    pub target_mean: f64,
    pub target_scale: f64,
    pub w1: Array2<f32>,
    pub b1: Array1<f32>,
    pub w2: Array2<f32>,
    pub b2: Array1<f32>,
    pub best_epoch: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Predictions {
    Regression(Vec<f64>),
    /// Per-example class probabilities (rows sum to 1) and argmax classes.
    Classification { probs: Array2<f64>, classes: Vec<usize> },
}

impl Predictions {
    pub fn len(&self) -> usize {
        match self {
            Predictions::Regression(v) => v.len(),
            Predictions::Classification { classes, .. } => classes.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Per-feature mean and scale from the training split; zero-variance features
/// keep scale 1.
fn fit_standardizer(x: ArrayView2<f32>) -> (Vec<f32>, Vec<f32>) {
    let n = x.nrows() as f64;
    let mut mean = Vec::with_capacity(x.ncols());
    let mut scale = Vec::with_capacity(x.ncols());
    for col in x.axis_iter(Axis(1)) {
        let mu = col.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = col.iter().map(|&v| (v as f64 - mu).powi(2)).sum::<f64>() / n;
        let sd = var.sqrt();
        mean.push(mu as f32);
        scale.push(if sd > 0.0 { sd as f32 } else { 1.0 });
    }
    (mean, scale)
}

fn apply_standardizer(x: ArrayView2<f32>, mean: &[f32], scale: &[f32]) -> Array2<f32> {
    let mut out = x.to_owned();
    for mut row in out.outer_iter_mut() {
        Zip::from(&mut row)
            .and(mean)
            .and(scale)
            .for_each(|v, &m, &s| *v = (*v - m) / s);
    }
    out
}

fn selection_value(kind: TaskKind, out: &Array2<f32>, targets: &Targets) -> f64 {
    match (kind, targets) {
        (TaskKind::Regression, Targets::Regression(t)) if t.len() >= 2 => {
            let pred: Vec<f64> = out.column(0).iter().map(|&v| v as f64).collect();
            metrics::spearman(&pred, t).map_or(0.0, |r| r.value)
        }
        (TaskKind::Classification { classes }, Targets::Classes(t)) => {
            let pred: Vec<usize> = out
                .outer_iter()
                .map(|row| metrics::argmax(&row.iter().map(|&v| v as f64).collect::<Vec<_>>()))
                .collect();
            metrics::macro_f1(&pred, t, classes).map_or(0.0, |r| r.value)
        }
        _ => 0.0,
    }
}

/// Train a probe on `train`, choosing the epoch checkpoint by its metric on `val`.
pub fn train_probe(
    train: ProbeData<'_>,
    val: ProbeData<'_>,
    config: &ProbeConfig,
) -> Result<(ProbeModel, TrainingCurve)> {
    config.validate()?;
    let (n, d) = train.features.dim();
    if n == 0 || val.features.nrows() == 0 {
        return Err(Error::Data("train and validation splits must be nonempty".into()));
    }
    if val.features.ncols() != d {
        return Err(Error::Shape(format!(
            "train features have width {d}, validation {}",
            val.features.ncols()
        )));
    }
    if train.targets.len() != n || val.targets.len() != val.features.nrows() {
        return Err(Error::Shape("feature rows and targets differ in count".into()));
    }
    train.targets.check(config.kind)?;
    val.targets.check(config.kind)?;
    if let (TaskKind::Classification { classes }, Targets::Classes(t)) = (config.kind, train.targets) {
        let mut seen = vec![false; classes];
        t.iter().for_each(|&c| seen[c] = true);
        if let Some(empty) = seen.iter().position(|s| !s) {
            return Err(Error::Data(format!("class {empty} has no training examples")));
        }
    }

    let (feature_mean, feature_scale) = if config.standardize {
        fit_standardizer(train.features)
    } else {
        (vec![0.0; d], vec![1.0; d])
    };
    let x = apply_standardizer(train.features, &feature_mean, &feature_scale);
    let xv = apply_standardizer(val.features, &feature_mean, &feature_scale);

    let (target_mean, target_scale, reg_targets) = match train.targets {
        Targets::Regression(t) => {
            let mu = t.iter().sum::<f64>() / n as f64;
            let sd = (t.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n as f64).sqrt();
            let sd = if sd > 0.0 { sd } else { 1.0 };
            let z: Vec<f32> = t.iter().map(|v| ((v - mu) / sd) as f32).collect();
            (mu, sd, z)
        }
        Targets::Classes(_) => (0.0, 1.0, Vec::new()),
    };

    let out_dim = config.kind.out_dim();
    let mut init_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed);
    shuffle_rng.set_stream(1);
    let mut params = Params::<f32>::init(d, config.hidden_size, out_dim, &mut init_rng);
    let mut adam = Adam::new(&params, config.learning_rate);

    let mut order: Vec<usize> = (0..n).collect();
    let mut best = params.clone();
    let mut best_epoch = 0;
    let mut best_val = (f64::NEG_INFINITY, f64::INFINITY);
    let val_reg: Vec<f32> = match val.targets {
        Targets::Regression(t) => t.iter().map(|v| ((v - target_mean) / target_scale) as f32).collect(),
        Targets::Classes(_) => Vec::new(),
    };
    let val_batch = match val.targets {
        Targets::Regression(_) => BatchTargets::Regression(&val_reg[..]),
        Targets::Classes(t) => BatchTargets::Classes(&t[..]),
    };
    let mut curve = TrainingCurve {
        train_loss: Vec::with_capacity(config.epochs),
        val_loss: Vec::with_capacity(config.epochs),
        val_metric: Vec::with_capacity(config.epochs),
        best_epoch: 0,
    };
    let mut batch_reg = Vec::with_capacity(config.batch_size);
    let mut batch_cls = Vec::with_capacity(config.batch_size);

    for epoch in 0..config.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(config.batch_size) {
            let xb = x.select(Axis(0), batch);
            let targets = match train.targets {
                Targets::Regression(_) => {
                    batch_reg.clear();
                    batch_reg.extend(batch.iter().map(|&i| reg_targets[i]));
                    BatchTargets::Regression(&batch_reg[..])
                }
                Targets::Classes(t) => {
                    batch_cls.clear();
                    batch_cls.extend(batch.iter().map(|&i| t[i]));
                    BatchTargets::Classes(&batch_cls[..])
                }
            };
            let (loss, grads) = params.loss_and_grad(xb.view(), &targets);
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    learning_rate: config.learning_rate,
                    reason: format!("non-finite training loss {loss}"),
                });
            }
            adam.update(&mut params, &grads);
            epoch_loss += loss * batch.len() as f64;
        }
        if !params.all_finite() {
            return Err(Error::Divergence {
                epoch,
                learning_rate: config.learning_rate,
                reason: "non-finite parameters".into(),
            });
        }
        let (_, out) = params.forward(xv.view());
        let score = selection_value(config.kind, &out, val.targets);
        let val_loss = Params::<f32>::loss_and_dout(&out, &val_batch).0;
        curve.train_loss.push(epoch_loss / n as f64);
        curve.val_loss.push(val_loss);
        curve.val_metric.push(score);
        // Metric ties (e.g. degenerate correlations) fall back to validation loss.
        if score > best_val.0 || (score == best_val.0 && val_loss < best_val.1) {
            best_val = (score, val_loss);
            best_epoch = epoch;
            best.clone_from(&params);
        }
    }
    curve.best_epoch = best_epoch;

    let Params { w1, b1, w2, b2 } = best;
    Ok((
        ProbeModel {
            kind: config.kind,
            layer: config.layer,
            hidden_size: config.hidden_size,
            feature_mean,
            feature_scale,
            target_mean,
            target_scale,
            w1,
            b1,
            w2,
            b2,
            best_epoch,
        },
        curve,
    ))
}

impl ProbeModel {
    pub fn input_dim(&self) -> usize {
        self.w1.ncols()
    }

    /// Raw network outputs (standardized units for regression, logits for
    /// classification).
    pub fn raw_outputs(&self, features: ArrayView2<f32>) -> Result<Array2<f32>> {
        if features.ncols() != self.input_dim() {
            return Err(Error::Shape(format!(
                "probe expects {} features, got {}",
                self.input_dim(),
                features.ncols()
            )));
        }
        let x = apply_standardizer(features, &self.feature_mean, &self.feature_scale);
        Ok(mlp_forward(&self.w1, &self.b1, &self.w2, &self.b2, x.view()).1)
    }

    pub fn predict(&self, features: ArrayView2<f32>) -> Result<Predictions> {
        let out = self.raw_outputs(features)?;
        Ok(match self.kind {
            TaskKind::Regression => Predictions::Regression(
                out.column(0)
                    .iter()
                    .map(|&v| v as f64 * self.target_scale + self.target_mean)
                    .collect(),
            ),
            TaskKind::Classification { .. } => {
                let mut probs = out.mapv(|v| v as f64);
                let mut classes = Vec::with_capacity(probs.nrows());
                for mut row in probs.outer_iter_mut() {
                    classes.push(metrics::argmax(row.as_slice().unwrap()));
                    let m = row.fold(f64::NEG_INFINITY, |a, &v| a.max(v));
                    row.mapv_inplace(|v| (v - m).exp());
                    let sum = row.sum();
                    row /= sum;
                }
                Predictions::Classification { probs, classes }
            }
        })
    }

    pub fn predict_one(&self, features: ArrayView1<f32>) -> Result<Predictions> {
        let x = features.insert_axis(Axis(0));
        self.predict(x)
    }

    #[cfg(test)]
    pub(crate) fn zeroed(kind: TaskKind, d: usize, hidden: usize) -> Self {
        let p = Params::<f32>::zeros(d, hidden, kind.out_dim());
        Self {
            kind,
            layer: 0,
            hidden_size: hidden,
            feature_mean: vec![0.0; d],
            feature_scale: vec![1.0; d],
            target_mean: 0.0,
            target_scale: 1.0,
            w1: p.w1,
            b1: p.b1,
            w2: p.w2,
            b2: p.b2,
            best_epoch: 0,
        }
    }
}

/// Metadata written next to a serialized probe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeMetadata {
    pub config: ProbeConfig,
    pub best_epoch: usize,
    pub data_sha256: Option<String>,
    pub toolkit_version: String,
}

const MODEL_MAGIC: &[u8; 8] = b"PLNPRBMD";
const MODEL_VERSION: u16 = 1;

impl ProbeModel {
    pub fn metadata_path(bin: &Path) -> PathBuf {
        let mut name = bin.as_os_str().to_owned();
        name.push(".json");
        PathBuf::from(name)
    }

    /// Write the binary model to `path` and its JSON metadata to `<path>.json`.
    pub fn save(&self, path: &Path, meta: &ProbeMetadata) -> Result<()> {
        let io = |e| Error::io(path, e);
        let mut w = BufWriter::new(File::create(path).map_err(io)?);
        let (kind, classes) = match self.kind {
            TaskKind::Regression => (0u8, 1u32),
            TaskKind::Classification { classes } => (1u8, classes as u32),
        };
        let mut buf = Vec::new();
        buf.extend_from_slice(MODEL_MAGIC);
        buf.extend_from_slice(&MODEL_VERSION.to_le_bytes());
        buf.push(kind);
        for v in [
            classes,
            self.layer as u32,
            self.hidden_size as u32,
            self.input_dim() as u32,
            self.best_epoch as u32,
        ] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf.extend_from_slice(&self.target_mean.to_le_bytes());
        buf.extend_from_slice(&self.target_scale.to_le_bytes());
        let floats = self
            .feature_mean
            .iter()
            .chain(&self.feature_scale)
            .chain(self.w1.iter())
            .chain(self.b1.iter())
            .chain(self.w2.iter())
            .chain(self.b2.iter());
        for v in floats {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf).map_err(io)?;
        w.flush().map_err(io)?;
        let meta_path = Self::metadata_path(path);
        let text = serde_json::to_string_pretty(meta)? + "\n";
        std::fs::write(&meta_path, text).map_err(|e| Error::io(&meta_path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?)
            .read_to_end(&mut bytes)
            .map_err(|e| Error::io(path, e))?;
        let short = |at: usize| Error::Corruption {
            offset: at as u64,
            reason: "probe file ends early".into(),
        };
        if bytes.len() < 10 || &bytes[..8] != MODEL_MAGIC {
            return Err(Error::Format(format!("{} is not a probe model file", path.display())));
        }
        let version = u16::from_le_bytes([bytes[8], bytes[9]]);
        if version != MODEL_VERSION {
            return Err(Error::Format(format!("unsupported probe model version {version}")));
        }
        let mut pos = 10;
        let mut take = |n: usize| -> Result<&[u8]> {
            let s = bytes.get(pos..pos + n).ok_or_else(|| short(pos))?;
            pos += n;
            Ok(s)
        };
        let kind_byte = take(1)?[0];
        let mut u32s = [0u32; 5];
        for v in &mut u32s {
            *v = u32::from_le_bytes(take(4)?.try_into().unwrap());
        }
        let [classes, layer, hidden, d, best_epoch] = u32s.map(|v| v as usize);
        let target_mean = f64::from_le_bytes(take(8)?.try_into().unwrap());
        let target_scale = f64::from_le_bytes(take(8)?.try_into().unwrap());
        let kind = match kind_byte {
            0 => TaskKind::Regression,
            1 => TaskKind::Classification { classes },
            other => return Err(Error::Format(format!("unknown probe kind {other}"))),
        };
        let out = kind.out_dim();
        let mut floats = |n: usize| -> Result<Vec<f32>> {
            Ok(take(n * 4)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect())
        };
        let feature_mean = floats(d)?;
        let feature_scale = floats(d)?;
        let w1 = Array2::from_shape_vec((hidden, d), floats(hidden * d)?).map_err(|e| Error::Shape(e.to_string()))?;
        let b1 = Array1::from(floats(hidden)?);
        let w2 = Array2::from_shape_vec((out, hidden), floats(out * hidden)?).map_err(|e| Error::Shape(e.to_string()))?;
        let b2 = Array1::from(floats(out)?);
        Ok(Self {
            kind,
            layer,
            hidden_size: hidden,
            feature_mean,
            feature_scale,
            target_mean,
            target_scale,
            w1,
            b1,
            w2,
            b2,
            best_epoch,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// Parameters compared.
    pub checked: usize,
    /// Parameters skipped because a perturbation crossed a ReLU kink.
    pub skipped_kinks: usize,
}

/// Central-difference step used by [`gradient_check`].
pub const GRAD_CHECK_STEP: f64 = 1e-4;
/// Denominator floor for relative error, so near-zero gradients compare by
/// absolute difference.
pub const GRAD_CHECK_FLOOR: f64 = 1e-7;

/// Compare analytic gradients against central finite differences, in f64,
/// for every parameter of a freshly initialized probe.
///
/// Biases are drawn from ±0.1 instead of zero so their gradients are
/// exercised away from the initial point. A coordinate whose ±step
/// perturbation flips the sign of any hidden pre-activation straddles a ReLU
/// kink, where the loss is not differentiable; such coordinates are skipped
/// and counted.
pub fn gradient_check(config: &ProbeConfig, x: ArrayView2<f64>, targets: &Targets) -> Result<GradCheckReport> {
    config.validate()?;
    if x.nrows() == 0 || x.nrows() != targets.len() {
        return Err(Error::Shape("gradient check batch is empty or mismatched".into()));
    }
    targets.check(config.kind)?;
    let d = x.ncols();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = Params::<f64>::init(d, config.hidden_size, config.kind.out_dim(), &mut rng);
    let ub = Uniform::new_inclusive(-0.1, 0.1).unwrap();
    params.b1.iter_mut().for_each(|b| *b = ub.sample(&mut rng));
    params.b2.iter_mut().for_each(|b| *b = ub.sample(&mut rng));

    let batch = match targets {
        Targets::Regression(t) => BatchTargets::Regression(&t[..]),
        Targets::Classes(t) => BatchTargets::Classes(&t[..]),
    };
    let (_, grads) = params.loss_and_grad(x, &batch);
    // one forward pass gives both the loss and the ReLU activation pattern
    let probe = |p: &Params<f64>| -> (f64, Vec<bool>) {
        let (a, out) = p.forward(x);
        (Params::loss_and_dout(&out, &batch).0, a.iter().map(|&v| v > 0.0).collect())
    };
    let base_mask = probe(&params).1;

    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        checked: 0,
        skipped_kinks: 0,
    };
    let grad_slices: Vec<Vec<f64>> = grads.slices().iter().map(|s| s.to_vec()).collect();
    for (which, analytic) in grad_slices.iter().enumerate() {
        for k in 0..analytic.len() {
            let orig = params.slices()[which][k];
            params.slices_mut()[which][k] = orig + GRAD_CHECK_STEP;
            let (plus, mask_plus) = probe(&params);
            params.slices_mut()[which][k] = orig - GRAD_CHECK_STEP;
            let (minus, mask_minus) = probe(&params);
            params.slices_mut()[which][k] = orig;
            if mask_plus != base_mask || mask_minus != base_mask {
                report.skipped_kinks += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * GRAD_CHECK_STEP);
            let a = analytic[k];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
            report.max_relative_error = report.max_relative_error.max(rel);
            report.checked += 1;
        }
    }
    Ok(report)
}

/// Loss of a freshly initialized probe, in f64.
pub fn initial_loss(config: &ProbeConfig, x: ArrayView2<f64>, targets: &Targets) -> Result<f64> {
    targets.check(config.kind)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let params = Params::<f64>::init(x.ncols(), config.hidden_size, config.kind.out_dim(), &mut rng);
    let batch = match targets {
        Targets::Regression(t) => BatchTargets::Regression(&t[..]),
        Targets::Classes(t) => BatchTargets::Classes(&t[..]),
    };
    Ok(params.loss(x, &batch))
}

/// Gather rows `idx` of a feature matrix.
pub fn select_rows(features: ArrayView2<f32>, idx: &[usize]) -> Array2<f32> {
    features.select(Axis(0), idx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::StandardNormal;

    fn gaussian(n: usize, d: usize, seed: u64) -> Array2<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_simple_fn((n, d), || rand::Rng::sample::<f32, _>(&mut rng, StandardNormal))
    }

    fn linear_targets(x: &Array2<f32>) -> Targets {
        Targets::Regression(
            x.outer_iter()
                .map(|r| r.iter().enumerate().map(|(j, &v)| v as f64 * (j as f64 - 2.5)).sum())
                .collect(),
        )
    }

    #[test]
    fn linear_regression_is_recovered() {
        let x = gaussian(300, 6, 1);
        let xv = gaussian(100, 6, 2);
        let (t, tv) = (linear_targets(&x), linear_targets(&xv));
        let mut cfg = ProbeConfig::new(TaskKind::Regression, 0, 16, 0);
        cfg.epochs = 150;
        let (model, curve) = train_probe(ProbeData::new(x.view(), &t), ProbeData::new(xv.view(), &tv), &cfg).unwrap();
        assert_eq!(curve.train_loss.len(), 150);
        assert!(curve.best_epoch < 150);
        let Predictions::Regression(p) = model.predict(xv.view()).unwrap() else { panic!() };
        let Targets::Regression(truth) = &tv else { panic!() };
        let rho = metrics::spearman(&p, truth).unwrap().value;
        assert!(rho >= 0.99, "spearman {rho}");
    }

    #[test]
    fn training_is_deterministic() {
        let x = gaussian(80, 4, 3);
        let t = Targets::Classes((0..80).map(|i| i % 3).collect());
        let mut cfg = ProbeConfig::new(TaskKind::Classification { classes: 3 }, 0, 8, 11);
        cfg.epochs = 20;
        let data = ProbeData::new(x.view(), &t);
        let (a, ca) = train_probe(data, data, &cfg).unwrap();
        let (b, cb) = train_probe(data, data, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(ca, cb);
    }

    #[test]
    fn constant_targets_give_degenerate_pearson() {
        let x = gaussian(60, 3, 4);
        let t = Targets::Regression(vec![5.0; 60]);
        let mut cfg = ProbeConfig::new(TaskKind::Regression, 0, 4, 0);
        cfg.epochs = 300;
        let data = ProbeData::new(x.view(), &t);
        let (model, _) = train_probe(data, data, &cfg).unwrap();
        let Predictions::Regression(p) = model.predict(x.view()).unwrap() else { panic!() };
        assert!(p.iter().all(|v| (v - 5.0).abs() < 0.3), "{p:?}");
        assert!(metrics::pearson(&p, &[5.0; 60]).unwrap().degenerate);
    }

    #[test]
    fn standardizer_ignores_validation_data() {
        let x = gaussian(50, 3, 5);
        let t = Targets::Regression((0..50).map(|i| i as f64).collect());
        let xv1 = gaussian(20, 3, 6);
        let xv2 = xv1.mapv(|v| v * 100.0 + 7.0);
        let tv = Targets::Regression((0..20).map(|i| i as f64).collect());
        let mut cfg = ProbeConfig::new(TaskKind::Regression, 0, 2, 0);
        cfg.epochs = 3;
        let (a, _) = train_probe(ProbeData::new(x.view(), &t), ProbeData::new(xv1.view(), &tv), &cfg).unwrap();
        let (b, _) = train_probe(ProbeData::new(x.view(), &t), ProbeData::new(xv2.view(), &tv), &cfg).unwrap();
        assert_eq!(a.feature_mean, b.feature_mean);
        assert_eq!(a.feature_scale, b.feature_scale);
    }

    #[test]
    fn rejects_bad_hidden_size_and_empty_class() {
        let x = gaussian(10, 2, 7);
        let t = Targets::Classes(vec![0; 10]);
        let cfg = ProbeConfig::new(TaskKind::Classification { classes: 2 }, 0, 3, 0);
        let data = ProbeData::new(x.view(), &t);
        assert!(matches!(train_probe(data, data, &cfg), Err(Error::Config(_))));
        let cfg = ProbeConfig::new(TaskKind::Classification { classes: 2 }, 0, 4, 0);
        assert!(matches!(train_probe(data, data, &cfg), Err(Error::Data(_))));
    }

    #[test]
    fn huge_learning_rate_diverges() {
        let x = gaussian(64, 4, 8).mapv(|v| v * 1e18);
        let t = Targets::Regression((0..64).map(|i| i as f64 * 1e30).collect());
        let mut cfg = ProbeConfig::new(TaskKind::Regression, 0, 4, 0);
        cfg.learning_rate = 1e30;
        cfg.standardize = false;
        cfg.epochs = 50;
        let data = ProbeData::new(x.view(), &t);
        match train_probe(data, data, &cfg) {
            Err(Error::Divergence { learning_rate, .. }) => assert_eq!(learning_rate, 1e30),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn zero_model_predicts_zero() {
        let m = ProbeModel::zeroed(TaskKind::Regression, 4, 2);
        let x = gaussian(5, 4, 9);
        assert_eq!(m.predict(x.view()).unwrap(), Predictions::Regression(vec![0.0; 5]));
    }

    #[test]
    fn equal_scores_argmax_is_class_zero() {
        let m = ProbeModel::zeroed(TaskKind::Classification { classes: 5 }, 3, 2);
        let x = gaussian(4, 3, 10);
        let Predictions::Classification { probs, classes } = m.predict(x.view()).unwrap() else { panic!() };
        assert_eq!(classes, vec![0; 4]);
        for row in probs.outer_iter() {
            assert!((row.sum() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn batch_prediction_matches_single() {
        let x = gaussian(40, 5, 11);
        let t = Targets::Classes((0..40).map(|i| i % 4).collect());
        let mut cfg = ProbeConfig::new(TaskKind::Classification { classes: 4 }, 0, 16, 2);
        cfg.epochs = 5;
        let data = ProbeData::new(x.view(), &t);
        let (m, _) = train_probe(data, data, &cfg).unwrap();
        let Predictions::Classification { probs, classes } = m.predict(x.view()).unwrap() else { panic!() };
        for (i, row) in x.outer_iter().enumerate() {
            let Predictions::Classification { probs: p1, classes: c1 } = m.predict_one(row).unwrap() else { panic!() };
            assert_eq!(c1[0], classes[i]);
            assert_eq!(p1.row(0), probs.row(i));
        }
    }

    #[test]
    fn shape_mismatch_on_predict() {
        let m = ProbeModel::zeroed(TaskKind::Regression, 4, 2);
        assert!(matches!(m.predict(gaussian(2, 3, 0).view()), Err(Error::Shape(_))));
    }

    #[test]
    fn save_load_round_trip() {
        let x = gaussian(30, 3, 12);
        let t = Targets::Classes((0..30).map(|i| i % 2).collect());
        let mut cfg = ProbeConfig::new(TaskKind::Classification { classes: 2 }, 3, 4, 1);
        cfg.epochs = 4;
        let data = ProbeData::new(x.view(), &t);
        let (m, _) = train_probe(data, data, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("probe.bin");
        let meta = ProbeMetadata {
            config: cfg,
            best_epoch: m.best_epoch,
            data_sha256: None,
            toolkit_version: crate::VERSION.into(),
        };
        m.save(&path, &meta).unwrap();
        assert_eq!(ProbeModel::load(&path).unwrap(), m);
        assert!(ProbeModel::metadata_path(&path).exists());
    }

    #[test]
    fn gradient_check_small_configs() {
        let x = gaussian(6, 5, 13).mapv(|v| v as f64);
        for (kind, targets) in [
            (TaskKind::Regression, Targets::Regression(vec![0.5, -1.0, 2.0, 0.0, 1.5, -0.3])),
            (TaskKind::Classification { classes: 3 }, Targets::Classes(vec![0, 1, 2, 2, 1, 0])),
        ] {
            for hidden in [1, 8] {
                let cfg = ProbeConfig::new(kind, 0, hidden, 3);
                let r = gradient_check(&cfg, x.view(), &targets).unwrap();
                assert!(r.max_relative_error <= 1e-4, "{kind:?} h={hidden}: {r:?}");
                assert!(r.checked > 0);
            }
        }
    }

    #[test]
    fn unperturbed_loss_is_reproducible() {
        let x = gaussian(4, 3, 14).mapv(|v| v as f64);
        let t = Targets::Regression(vec![1.0, 2.0, 3.0, 4.0]);
        let cfg = ProbeConfig::new(TaskKind::Regression, 0, 4, 0);
        assert_eq!(initial_loss(&cfg, x.view(), &t).unwrap() - initial_loss(&cfg, x.view(), &t).unwrap(), 0.0);
    }

    #[test]
    fn affine_map_is_linear_in_inputs() {
        // With zero biases and positive weights on a positive input, the
        // ReLU is active everywhere and the network is linear.
        let mut m = ProbeModel::zeroed(TaskKind::Regression, 2, 1);
        m.w1.fill(0.5);
        m.w2.fill(2.0);
        let x = ndarray::array![[1.0f32, 3.0]];
        let y1 = m.raw_outputs(x.view()).unwrap()[[0, 0]];
        let y2 = m.raw_outputs((&x * 2.0).view()).unwrap()[[0, 0]];
        assert_eq!(y2, 2.0 * y1);
    }
}
