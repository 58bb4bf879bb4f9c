// SPDX-License-Identifier: MIT OR Apache-2.0

//! # planprobe
//!
//! Tests whether a language model's prompt-time hidden states already encode
//! global attributes of the response it has not generated yet.
//!
//! The pipeline:
//!
//! 1. [`store`] reads and writes indexed activation files produced by an
//!    external exporter (one record per prompt or truncation point).
//! 2. [`labeling`] turns each response into an attribute label (length,
//!    reasoning steps, character choice, multiple-choice answer, answer
//!    correctness, factual consistency) or an exclusion reason.
//! 3. [`dataset`] filters, balances and splits labeled examples by group.
//! 4. [`probe`] trains one-hidden-layer ReLU probes on single-layer features.
//! 5. [`sweep`] runs the layer x hidden-size x seed grid and derives the
//!    layer-wise, hidden-size, cross-dataset, dynamics and self-estimate
//!    analyses.
//! 6. [`report`] emits CSV/JSON tables, SVG heatmaps and run manifests.
//!
//! [`synth`] generates planted-signal datasets and hosts brute-force metric
//! oracles, so all of the above can be checked without a model.

pub mod config;
pub mod dataset;
pub mod error;
pub mod labeling;
pub mod metrics;
pub mod probe;
pub mod report;
pub mod selfcheck;
pub mod store;
pub mod sweep;
pub mod synth;

pub use error::{Error, Result};
pub use metrics::{MetricName, MetricReport};
pub use probe::{ProbeConfig, ProbeModel, TaskKind};
pub use store::{ActivationRecord, DatasetHeader, DatasetReader, Manifest};
pub use sweep::{SweepGrid, SweepResult};

/// Toolkit version embedded in every report and manifest.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Hidden sizes a probe may use.
pub const HIDDEN_SIZES: [usize; 11] = [1, 2, 4, 8, 16, 32, 64, 128, 256, 512, 1024];
