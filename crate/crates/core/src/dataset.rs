// SPDX-License-Identifier: MIT OR Apache-2.0

//! Labeled records to balanced, group-aware train/val/test splits.
//!
//! Groups (a response and its truncation-augmented variants) are the unit of
//! balancing and splitting, so augmented copies never leak across splits or
//! skew class counts.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labeling::{
    derive_top_classes, label_record, ExclusionReason, LabelContext, LabelOutcome, LabelValue, TaskId, Tokenizer,
};
use crate::store::sha256_file;
use crate::probe::{TaskKind, Targets};
use crate::store::DatasetReader;

pub const DEFAULT_MIN_TOKENS: u64 = 8;
pub const DEFAULT_MARGIN: u64 = 3;
pub const DEFAULT_AUGMENTS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Label and provenance of one record; activations stay on disk and are
/// fetched per layer through `record_index`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub record_index: usize,
    pub example_id: u64,
    pub group_id: u64,
    pub truncation_offset: i64,
    /// Token count of the full response.
    pub response_tokens: u64,
    pub outcome: LabelOutcome,
    /// Token index where attribute-revealing text begins, if known.
    pub key_offset: Option<u64>,
    pub split: Option<Split>,
}

impl LabeledExample {
    pub fn is_canonical(&self) -> bool {
        self.truncation_offset < 0
    }

    pub fn value(&self) -> Option<LabelValue> {
        self.outcome.value()
    }

    pub fn class(&self) -> Option<usize> {
        match self.outcome {
            LabelOutcome::Value(LabelValue::Class(c)) => Some(c),
            _ => None,
        }
    }
}

/// Label every record of an activation file without reading activations.
pub fn label_file(path: &Path, ctx: &LabelContext, tok: &dyn Tokenizer) -> Result<Vec<LabeledExample>> {
    let mut reader = DatasetReader::open(path)?.with_layers(&[])?;
    let mut out = Vec::with_capacity(reader.len());
    for (i, rec) in reader.records().enumerate() {
        let rec = rec?;
        let keyed = label_record(&rec, ctx, tok)?;
        out.push(LabeledExample {
            record_index: i,
            example_id: rec.example_id,
            group_id: rec.group_id,
            truncation_offset: rec.truncation_offset,
            response_tokens: rec.response_tokens as u64,
            outcome: keyed.outcome,
            key_offset: keyed.key_offset,
            split: None,
        });
    }
    Ok(out)
}

/// Labels of one activation file, as written by the `label` command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelSet {
    pub task: String,
    pub kind: TaskKind,
    /// Class names for character choice; empty otherwise.
    pub classes: Vec<String>,
    pub activations_sha256: Option<String>,
    pub examples: Vec<LabeledExample>,
}

impl LabelSet {
    /// Label an activation file. Character-choice classes are derived from
    /// the canonical responses when `ctx.classes` is empty.
    pub fn from_activations(path: &Path, mut ctx: LabelContext, tok: &dyn Tokenizer) -> Result<Self> {
        if ctx.definition.task == TaskId::CharacterChoice && ctx.classes.is_empty() {
            let mut reader = DatasetReader::open(path)?.with_layers(&[])?;
            let mut corpus = Vec::new();
            for rec in reader.records() {
                let rec = rec?;
                if rec.is_canonical() {
                    corpus.push(rec.response_text);
                }
            }
            ctx.classes = derive_top_classes(&corpus, &ctx.lexicon, ctx.definition.params.top_k)?;
        }
        Ok(Self {
            task: ctx.definition.task.as_str().to_string(),
            kind: ctx.definition.kind,
            classes: ctx.classes.clone(),
            activations_sha256: Some(sha256_file(path)?),
            examples: label_file(path, &ctx, tok)?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Count of excluded examples per reason.
    pub fn exclusions(&self) -> BTreeMap<ExclusionReason, usize> {
        let mut out = BTreeMap::new();
        for e in &self.examples {
            if let Some(r) = e.outcome.exclusion() {
                *out.entry(r).or_default() += 1;
            }
        }
        out
    }
}

/// Drop examples whose full response is shorter than `min_tokens`.
/// Returns survivors and the number dropped.
pub fn filter_min_length(examples: Vec<LabeledExample>, min_tokens: u64) -> (Vec<LabeledExample>, usize) {
    let before = examples.len();
    let kept: Vec<_> = examples.into_iter().filter(|e| e.response_tokens >= min_tokens).collect();
    let dropped = before - kept.len();
    (kept, dropped)
}

/// Class of each group, read at its canonical member (or its earliest
/// member when the canonical one is absent).
fn group_classes(examples: &[LabeledExample]) -> Result<BTreeMap<u64, usize>> {
    let mut best: BTreeMap<u64, (i64, usize)> = BTreeMap::new();
    for e in examples {
        let c = e.class().ok_or_else(|| {
            Error::Data(format!("example {} has no class label", e.example_id))
        })?;
        let slot = best.entry(e.group_id).or_insert((e.truncation_offset, c));
        if e.truncation_offset < slot.0 {
            *slot = (e.truncation_offset, c);
        }
    }
    Ok(best.into_iter().map(|(g, (_, c))| (g, c)).collect())
}

/// Downsample whole groups so every class has as many groups as the
/// smallest one. Input order is preserved among survivors.
pub fn balance_classes(examples: Vec<LabeledExample>, classes: usize, seed: u64) -> Result<(Vec<LabeledExample>, usize)> {
    let by_group = group_classes(&examples)?;
    let mut per_class: Vec<Vec<u64>> = vec![Vec::new(); classes];
    for (&g, &c) in &by_group {
        per_class
            .get_mut(c)
            .ok_or_else(|| Error::Data(format!("class {c} outside [0, {}]", classes - 1)))?
            .push(g);
    }
    if let Some(empty) = per_class.iter().position(Vec::is_empty) {
        return Err(Error::Balance { class: empty });
    }
    let target = per_class.iter().map(Vec::len).min().unwrap_or(0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = BTreeSet::new();
    for groups in &mut per_class {
        // groups are already sorted (BTreeMap order), so shuffling is seed-stable
        groups.shuffle(&mut rng);
        keep.extend(groups.iter().take(target).copied());
    }
    let before = examples.len();
    let kept: Vec<_> = examples.into_iter().filter(|e| keep.contains(&e.group_id)).collect();
    let dropped = before - kept.len();
    Ok((kept, dropped))
}

/// Seeded downsample to at most `target_groups` groups, for equalizing
/// dataset sizes across models.
pub fn equalize_groups(examples: Vec<LabeledExample>, target_groups: usize, seed: u64) -> (Vec<LabeledExample>, usize) {
    let mut groups: Vec<u64> = examples.iter().map(|e| e.group_id).collect::<BTreeSet<_>>().into_iter().collect();
    if groups.len() <= target_groups {
        return (examples, 0);
    }
    groups.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let keep: BTreeSet<u64> = groups.into_iter().take(target_groups).collect();
    let before = examples.len();
    let kept: Vec<_> = examples.into_iter().filter(|e| keep.contains(&e.group_id)).collect();
    let dropped = before - kept.len();
    (kept, dropped)
}

/// Distinct truncation offsets drawn uniformly from `[1, key_offset - margin]`,
/// sorted ascending. Empty when that range is empty.
pub fn augment_by_truncation(key_offset: u64, n_augments: usize, margin: u64, seed: u64) -> Vec<u64> {
    let Some(upper) = key_offset.checked_sub(margin).filter(|&u| u >= 1) else {
        return Vec::new();
    };
    let amount = n_augments.min(upper as usize);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut offsets: Vec<u64> = sample(&mut rng, upper as usize, amount)
        .into_iter()
        .map(|i| i as u64 + 1)
        .collect();
    offsets.sort_unstable();
    offsets
}

/// Truncation plan for one exported response.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentPlan {
    pub example_id: u64,
    pub group_id: u64,
    pub offsets: Vec<u64>,
}

/// Truncation offsets for every canonical, labeled example with a key offset.
/// The per-example seed mixes the run seed with the example id.
pub fn plan_augmentation(examples: &[LabeledExample], n_augments: usize, margin: u64, seed: u64) -> Vec<AugmentPlan> {
    examples
        .iter()
        .filter(|e| e.is_canonical() && e.value().is_some())
        .filter_map(|e| {
            let key = e.key_offset?;
            let s = seed ^ e.example_id.wrapping_mul(0x9E37_79B9_7F4A_7C15);
            let offsets = augment_by_truncation(key, n_augments, margin, s);
            (!offsets.is_empty()).then(|| AugmentPlan {
                example_id: e.example_id,
                group_id: e.group_id,
                offsets,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train: 0.6,
            val: 0.2,
            test: 0.2,
            seed: 0,
        }
    }
}

impl SplitSpec {
    pub fn with_seed(seed: u64) -> Self {
        Self { seed, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let f = [self.train, self.val, self.test];
        if f.iter().any(|&x| !(x > 0.0) || !x.is_finite()) {
            return Err(Error::Config(format!("split fractions must be positive, got {f:?}")));
        }
        if (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split fractions must sum to 1, got {f:?}")));
        }
        Ok(())
    }

    /// Group counts per split by largest-remainder rounding; ties in the
    /// remainder go to the earlier split.
    pub fn counts(&self, groups: usize) -> [usize; 3] {
        let f = [self.train, self.val, self.test];
        let raw = f.map(|x| x * groups as f64);
        let mut counts = raw.map(|r| r.floor() as usize);
        let mut left = groups - counts.iter().sum::<usize>();
        let mut order = [0usize, 1, 2];
        order.sort_by(|&a, &b| (raw[b] - raw[b].floor()).total_cmp(&(raw[a] - raw[a].floor())).then(a.cmp(&b)));
        for &i in order.iter().cycle() {
            if left == 0 {
                break;
            }
            counts[i] += 1;
            left -= 1;
        }
        counts
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub train: Vec<u64>,
    pub val: Vec<u64>,
    pub test: Vec<u64>,
}

impl SplitAssignment {
    pub fn groups(&self, split: Split) -> &[u64] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn split_of(&self, group: u64) -> Option<Split> {
        Split::ALL.into_iter().find(|&s| self.groups(s).binary_search(&group).is_ok())
    }
}

/// Shuffle the distinct group ids and partition them by `spec`.
/// Each split's group list is returned sorted.
pub fn split_groups<I: IntoIterator<Item = u64>>(group_ids: I, spec: &SplitSpec) -> Result<SplitAssignment> {
    spec.validate()?;
    let mut groups: Vec<u64> = group_ids.into_iter().collect::<BTreeSet<_>>().into_iter().collect();
    if groups.len() < 5 {
        return Err(Error::Split(format!(
            "{} groups cannot fill three non-empty splits (need at least 5)",
            groups.len()
        )));
    }
    let counts = spec.counts(groups.len());
    if let Some(i) = counts.iter().position(|&c| c == 0) {
        return Err(Error::Split(format!(
            "{} groups leave the {} split empty",
            groups.len(),
            Split::ALL[i]
        )));
    }
    groups.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    let mut parts = [counts[0], counts[0] + counts[1]];
    parts.sort_unstable();
    let take = |r: std::ops::Range<usize>| {
        let mut v = groups[r].to_vec();
        v.sort_unstable();
        v
    };
    Ok(SplitAssignment {
        train: take(0..parts[0]),
        val: take(parts[0]..parts[1]),
        test: take(parts[1]..groups.len()),
    })
}

/// Assign every example the split of its group.
pub fn split_dataset(examples: &mut [LabeledExample], spec: &SplitSpec) -> Result<SplitAssignment> {
    let assignment = split_groups(examples.iter().map(|e| e.group_id), spec)?;
    for e in examples.iter_mut() {
        e.split = assignment.split_of(e.group_id);
    }
    Ok(assignment)
}

/// Where every input example went.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DropReport {
    pub input: usize,
    pub excluded: BTreeMap<ExclusionReason, usize>,
    pub too_short: usize,
    pub balanced_out: usize,
    pub equalized_out: usize,
    pub assigned: BTreeMap<Split, usize>,
}

impl DropReport {
    pub fn accounted(&self) -> usize {
        self.excluded.values().sum::<usize>()
            + self.too_short
            + self.balanced_out
            + self.equalized_out
            + self.assigned.values().sum::<usize>()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuildOptions {
    pub kind: TaskKind,
    pub min_tokens: u64,
    pub balance: bool,
    pub balance_seed: u64,
    /// Downsample to this many groups before splitting.
    pub target_groups: Option<usize>,
    pub split: SplitSpec,
}

impl BuildOptions {
    pub fn new(kind: TaskKind, seed: u64) -> Self {
        Self {
            kind,
            min_tokens: DEFAULT_MIN_TOKENS,
            balance: matches!(kind, TaskKind::Classification { .. }),
            balance_seed: seed,
            target_groups: None,
            split: SplitSpec::with_seed(seed),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuiltDataset {
    pub examples: Vec<LabeledExample>,
    pub assignment: SplitAssignment,
    pub report: DropReport,
}

impl BuiltDataset {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &LabeledExample> {
        self.examples.iter().filter(move |e| e.split == Some(split))
    }

    /// Record indices and targets of one split, in input order.
    pub fn split_targets(&self, split: Split) -> (Vec<usize>, Targets) {
        let members: Vec<&LabeledExample> = self.split(split).collect();
        let idx = members.iter().map(|e| e.record_index).collect();
        (idx, targets_of(&members))
    }

    pub fn manifest(&self, options: &BuildOptions, config_hash: Option<String>) -> SplitManifest {
        SplitManifest {
            assignment: self.assignment.clone(),
            report: self.report.clone(),
            split: options.split,
            balance_seed: options.balance_seed,
            config_hash,
            toolkit_version: crate::VERSION.to_string(),
        }
    }
}

fn targets_of(members: &[&LabeledExample]) -> Targets {
    match members.first().and_then(|e| e.value()) {
        Some(LabelValue::Class(_)) => Targets::Classes(members.iter().filter_map(|e| e.class()).collect()),
        _ => Targets::Regression(
            members
                .iter()
                .filter_map(|e| match e.value() {
                    Some(LabelValue::Real(v)) => Some(v),
                    Some(LabelValue::Class(c)) => Some(c as f64),
                    None => None,
                })
                .collect(),
        ),
    }
}

/// Exclusion filter, length filter, class balancing, optional equalization,
/// then the group split.
pub fn build_dataset(examples: Vec<LabeledExample>, options: &BuildOptions) -> Result<BuiltDataset> {
    let mut report = DropReport {
        input: examples.len(),
        ..DropReport::default()
    };
    let mut kept = Vec::with_capacity(examples.len());
    for e in examples {
        match e.outcome {
            LabelOutcome::Excluded(r) => *report.excluded.entry(r).or_default() += 1,
            LabelOutcome::Value(v) => {
                match (v, options.kind) {
                    (LabelValue::Real(_), TaskKind::Regression) => {}
                    (LabelValue::Class(c), TaskKind::Classification { classes }) if c < classes => {}
                    _ => {
                        return Err(Error::Data(format!(
                            "example {} label {v:?} does not fit task kind {:?}",
                            e.example_id, options.kind
                        )))
                    }
                }
                kept.push(e);
            }
        }
    }
    let (kept, short) = filter_min_length(kept, options.min_tokens);
    report.too_short = short;
    let kept = match (options.balance, options.kind) {
        (true, TaskKind::Classification { classes }) => {
            let (k, d) = balance_classes(kept, classes, options.balance_seed)?;
            report.balanced_out = d;
            k
        }
        _ => kept,
    };
    let mut kept = match options.target_groups {
        Some(t) => {
            let (k, d) = equalize_groups(kept, t, options.balance_seed.wrapping_add(1));
            report.equalized_out = d;
            k
        }
        None => kept,
    };
    let assignment = split_dataset(&mut kept, &options.split)?;
    for e in &kept {
        *report.assigned.entry(e.split.expect("assigned")).or_default() += 1;
    }
    assert_eq!(report.accounted(), report.input, "drop report does not account for every input");
    Ok(BuiltDataset {
        examples: kept,
        assignment,
        report,
    })
}

/// JSON record of a split: group ids per split, drop report and seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub assignment: SplitAssignment,
    pub report: DropReport,
    pub split: SplitSpec,
    pub balance_seed: u64,
    pub config_hash: Option<String>,
    pub toolkit_version: String,
}

impl SplitManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}
