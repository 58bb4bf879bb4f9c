// SPDX-License-Identifier: MIT OR Apache-2.0

//! TOML run configuration.
//!
//! ```toml
//! [run]
//! task = "response_length"
//! output_dir = "out"
//!
//! [data]
//! activations = "gsm8k.plnp"
//! lexicon = "animals.txt"        # optional, bundled default otherwise
//!
//! [grid]
//! layers = [0, 4, 8]             # optional, all layers otherwise
//! hidden_sizes = [1, 16, 128]
//! seeds = [0, 1, 2]
//!
//! [training]
//! epochs = 400
//!
//! [split]
//! seed = 0
//! ```
//!
//! Every field has a default; the config hash is the SHA-256 of the fully
//! defaulted config serialized as JSON.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{BuildOptions, SplitSpec, DEFAULT_AUGMENTS, DEFAULT_MARGIN, DEFAULT_MIN_TOKENS};
use crate::error::{Error, Result};
use crate::labeling::{AnswerPatterns, LabelContext, Lexicon, StancePatterns, TaskDefinition, TaskId, TaskParams};
use crate::sweep::{SweepGrid, DEFAULT_SEGMENTS};
use crate::HIDDEN_SIZES;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub name: String,
    pub task: TaskId,
    pub output_dir: PathBuf,
    pub segments: usize,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            name: "run".into(),
            task: TaskId::ResponseLength,
            output_dir: PathBuf::from("out"),
            segments: DEFAULT_SEGMENTS,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub activations: Option<PathBuf>,
    /// Labels JSON written by `label`; computed on the fly when absent.
    pub labels: Option<PathBuf>,
    pub lexicon: Option<PathBuf>,
    pub answer_patterns: Option<PathBuf>,
    pub stance_patterns: Option<PathBuf>,
    /// Label truncated records with the full length instead of the remaining one.
    pub total_length: bool,
    pub length_cap: Option<u64>,
    pub step_cap: Option<u64>,
    pub top_k: Option<usize>,
    pub option_count: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSection {
    pub layers: Option<Vec<usize>>,
    pub hidden_sizes: Vec<usize>,
    pub seeds: Vec<u64>,
}

impl Default for GridSection {
    fn default() -> Self {
        Self {
            layers: None,
            hidden_sizes: HIDDEN_SIZES.to_vec(),
            seeds: vec![0, 1, 2],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingSection {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
}

impl Default for TrainingSection {
    fn default() -> Self {
        Self {
            epochs: 400,
            learning_rate: 1e-3,
            batch_size: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSection {
    pub train: f64,
    pub val: f64,
    pub test: f64,
    pub seed: u64,
    pub min_tokens: u64,
    pub balance: bool,
    pub target_groups: Option<usize>,
    pub margin: u64,
    pub augments: usize,
}

impl Default for SplitSection {
    fn default() -> Self {
        let s = SplitSpec::default();
        Self {
            train: s.train,
            val: s.val,
            test: s.test,
            seed: 0,
            min_tokens: DEFAULT_MIN_TOKENS,
            balance: true,
            target_groups: None,
            margin: DEFAULT_MARGIN,
            augments: DEFAULT_AUGMENTS,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub run: RunSection,
    pub data: DataSection,
    pub grid: GridSection,
    pub training: TrainingSection,
    pub split: SplitSection,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let config: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    /// Load a config file; relative data paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config = Self::parse(&text)?;
        if let Some(dir) = path.parent() {
            config.resolve_paths(dir);
        }
        Ok(config)
    }

    fn resolve_paths(&mut self, dir: &Path) {
        let d = &mut self.data;
        for p in [&mut d.activations, &mut d.labels, &mut d.lexicon, &mut d.answer_patterns, &mut d.stance_patterns]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        }
        if self.run.output_dir.is_relative() {
            self.run.output_dir = dir.join(&self.run.output_dir);
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.split_spec().validate()?;
        if self.run.segments == 0 {
            return Err(Error::Config("[run] segments must be positive".into()));
        }
        if self.training.epochs == 0 || self.training.batch_size == 0 {
            return Err(Error::Config("[training] epochs and batch_size must be positive".into()));
        }
        if !(self.training.learning_rate > 0.0 && self.training.learning_rate.is_finite()) {
            return Err(Error::Config("[training] learning_rate must be positive".into()));
        }
        if let Some(&h) = self.grid.hidden_sizes.iter().find(|h| !HIDDEN_SIZES.contains(h)) {
            return Err(Error::Config(format!("[grid] hidden size {h} is not one of W = {HIDDEN_SIZES:?}")));
        }
        if self.grid.hidden_sizes.is_empty() || self.grid.seeds.is_empty() {
            return Err(Error::Config("[grid] needs hidden sizes and seeds".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        config_hash(self)
    }

    pub fn split_spec(&self) -> SplitSpec {
        SplitSpec {
            train: self.split.train,
            val: self.split.val,
            test: self.split.test,
            seed: self.split.seed,
        }
    }

    pub fn grid(&self, layer_count: usize) -> SweepGrid {
        SweepGrid {
            layers: self.grid.layers.clone().unwrap_or_else(|| (0..layer_count).collect()),
            hidden_sizes: self.grid.hidden_sizes.clone(),
            seeds: self.grid.seeds.clone(),
            epochs: self.training.epochs,
            learning_rate: self.training.learning_rate,
            batch_size: self.training.batch_size,
        }
    }

    pub fn task_definition(&self) -> TaskDefinition {
        let d = TaskParams::default();
        let params = TaskParams {
            length_cap: self.data.length_cap.unwrap_or(d.length_cap),
            step_cap: self.data.step_cap.unwrap_or(d.step_cap),
            top_k: self.data.top_k.unwrap_or(d.top_k),
            option_count: self.data.option_count.unwrap_or(d.option_count),
        };
        let mut def = TaskDefinition::new(self.run.task);
        if self.run.task == TaskId::CharacterChoice {
            def.kind = crate::probe::TaskKind::Classification { classes: params.top_k };
        }
        if self.run.task == TaskId::MultipleChoice {
            def.kind = crate::probe::TaskKind::Classification { classes: params.option_count };
        }
        def.params = params;
        def
    }

    /// Labeling context with configured data files; character-choice classes
    /// are left empty for the caller to derive.
    pub fn label_context(&self) -> Result<LabelContext> {
        let mut ctx = LabelContext::new(self.task_definition());
        if let Some(p) = &self.data.lexicon {
            ctx.lexicon = Lexicon::load(p)?;
        }
        if let Some(p) = &self.data.answer_patterns {
            ctx.answers = AnswerPatterns::load(p)?;
        }
        if let Some(p) = &self.data.stance_patterns {
            ctx.stances = StancePatterns::load(p)?;
        }
        ctx.remaining_length = !self.data.total_length;
        Ok(ctx)
    }

    pub fn build_options(&self) -> BuildOptions {
        let kind = self.task_definition().kind;
        BuildOptions {
            min_tokens: self.split.min_tokens,
            balance: self.split.balance && matches!(kind, crate::probe::TaskKind::Classification { .. }),
            target_groups: self.split.target_groups,
            split: self.split_spec(),
            ..BuildOptions::new(kind, self.split.seed)
        }
    }
}

/// SHA-256 (hex) of a value's JSON serialization.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_vec(value).expect("config serializes");
    hex::encode(Sha256::digest(&json))
}
