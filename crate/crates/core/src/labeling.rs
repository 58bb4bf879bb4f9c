// SPDX-License-Identifier: MIT OR Apache-2.0

//! Attribute rules that turn a full response into a probing label.
//!
//! Six tasks in three families:
//!
//! | task                  | family    | label                             |
//! |-----------------------|-----------|-----------------------------------|
//! | `response_length`     | structure | token count (regression)          |
//! | `reasoning_steps`     | structure | distinct step markers (regression)|
//! | `character_choice`    | content   | top-k animal index (4 classes)    |
//! | `multiple_choice`     | content   | option letter A-E (5 classes)     |
//! | `answer_confidence`   | behavior  | answer matches gold (2 classes)   |
//! | `factual_consistency` | behavior  | stance matches truth (2 classes)  |
//!
//! Every rule either produces a value or an [`ExclusionReason`]. The
//! lexicon, answer patterns and stance phrases are line-oriented data files;
//! the defaults ship with the crate.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;
use std::str::FromStr;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::probe::TaskKind;

pub const DEFAULT_ANIMALS: &str = include_str!("../data/animals.txt");
pub const DEFAULT_ANSWER_PATTERNS: &str = include_str!("../data/answer_patterns.txt");
pub const DEFAULT_STANCE_PATTERNS: &str = include_str!("../data/stance_patterns.txt");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskId {
    ResponseLength,
    ReasoningSteps,
    CharacterChoice,
    MultipleChoice,
    AnswerConfidence,
    FactualConsistency,
}

impl TaskId {
    pub const ALL: [TaskId; 6] = [
        TaskId::ResponseLength,
        TaskId::ReasoningSteps,
        TaskId::CharacterChoice,
        TaskId::MultipleChoice,
        TaskId::AnswerConfidence,
        TaskId::FactualConsistency,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskId::ResponseLength => "response_length",
            TaskId::ReasoningSteps => "reasoning_steps",
            TaskId::CharacterChoice => "character_choice",
            TaskId::MultipleChoice => "multiple_choice",
            TaskId::AnswerConfidence => "answer_confidence",
            TaskId::FactualConsistency => "factual_consistency",
        }
    }

    pub fn kind(self) -> TaskKind {
        match self {
            TaskId::ResponseLength | TaskId::ReasoningSteps => TaskKind::Regression,
            TaskId::CharacterChoice => TaskKind::Classification { classes: 4 },
            TaskId::MultipleChoice => TaskKind::Classification { classes: 5 },
            TaskId::AnswerConfidence | TaskId::FactualConsistency => {
                TaskKind::Classification { classes: 2 }
            }
        }
    }
}

impl std::fmt::Display for TaskId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TaskId::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown task {s:?}; expected one of {}",
                    TaskId::ALL.map(|t| t.as_str()).join(", ")
                ))
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskParams {
    pub length_cap: u64,
    pub step_cap: u64,
    pub top_k: usize,
    pub option_count: usize,
}

impl Default for TaskParams {
    fn default() -> Self {
        Self {
            length_cap: 1000,
            step_cap: 8,
            top_k: 4,
            option_count: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskDefinition {
    pub task: TaskId,
    pub kind: TaskKind,
    pub params: TaskParams,
}

impl TaskDefinition {
    pub fn new(task: TaskId) -> Self {
        Self {
            task,
            kind: task.kind(),
            params: TaskParams::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExclusionReason {
    TooLong,
    Incomplete,
    TooManySteps,
    NoEntity,
    MultipleEntities,
    EntityTooEarly,
    NoAnswer,
    MultipleAnswers,
    AnswerAtStart,
    NoStance,
    TooShort,
}

impl ExclusionReason {
    pub const ALL: [ExclusionReason; 11] = [
        ExclusionReason::TooLong,
        ExclusionReason::Incomplete,
        ExclusionReason::TooManySteps,
        ExclusionReason::NoEntity,
        ExclusionReason::MultipleEntities,
        ExclusionReason::EntityTooEarly,
        ExclusionReason::NoAnswer,
        ExclusionReason::MultipleAnswers,
        ExclusionReason::AnswerAtStart,
        ExclusionReason::NoStance,
        ExclusionReason::TooShort,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelValue {
    Real(f64),
    Class(usize),
}

/// A label or the reason the response was excluded; never both.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelOutcome {
    Value(LabelValue),
    Excluded(ExclusionReason),
}

impl LabelOutcome {
    fn real(v: f64) -> Self {
        LabelOutcome::Value(LabelValue::Real(v))
    }

    fn class(c: usize) -> Self {
        LabelOutcome::Value(LabelValue::Class(c))
    }

    pub fn value(&self) -> Option<LabelValue> {
        match self {
            LabelOutcome::Value(v) => Some(*v),
            LabelOutcome::Excluded(_) => None,
        }
    }

    pub fn exclusion(&self) -> Option<ExclusionReason> {
        match self {
            LabelOutcome::Excluded(r) => Some(*r),
            LabelOutcome::Value(_) => None,
        }
    }
}

/// Token with its byte span in the source text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Token {
    pub text: String,
    pub start: usize,
    pub end: usize,
    pub special: bool,
}

pub trait Tokenizer: Send + Sync {
    fn tokenize(&self, text: &str) -> Vec<Token>;

    /// Token count excluding special tokens.
    fn count(&self, text: &str) -> usize {
        self.tokenize(text).iter().filter(|t| !t.special).count()
    }
}

/// Offline fallback tokenizer: one token per whitespace-separated word.
#[derive(Debug, Clone)]
pub struct WhitespaceTokenizer {
    pub special_tokens: Vec<String>,
}

impl Default for WhitespaceTokenizer {
    fn default() -> Self {
        Self {
            special_tokens: ["<s>", "</s>", "<|endoftext|>", "<|eot_id|>", "<|im_end|>"]
                .map(String::from)
                .to_vec(),
        }
    }
}

impl Tokenizer for WhitespaceTokenizer {
    fn tokenize(&self, text: &str) -> Vec<Token> {
        let mut out = Vec::new();
        let mut start = None;
        for (i, c) in text.char_indices().chain(std::iter::once((text.len(), ' '))) {
            match (start, c.is_whitespace()) {
                (None, false) => start = Some(i),
                (Some(s), true) => {
                    let word = &text[s..i];
                    out.push(Token {
                        text: word.to_string(),
                        start: s,
                        end: i,
                        special: self.special_tokens.iter().any(|t| t == word),
                    });
                    start = None;
                }
                _ => {}
            }
        }
        out
    }
}

/// Byte position where token `index` starts, or the text length past the end.
pub fn token_byte_offset(tok: &dyn Tokenizer, text: &str, index: usize) -> usize {
    tok.tokenize(text).get(index).map_or(text.len(), |t| t.start)
}

/// Index of the token containing byte `pos`.
pub fn token_index_at(tok: &dyn Tokenizer, text: &str, pos: usize) -> usize {
    let tokens = tok.tokenize(text);
    tokens
        .iter()
        .position(|t| t.end > pos)
        .unwrap_or(tokens.len())
}

// ---------------------------------------------------------------------------
// Structure attributes
// ---------------------------------------------------------------------------

pub fn label_response_length(
    response: &str,
    tok: &dyn Tokenizer,
    cap: u64,
    complete: bool,
) -> LabelOutcome {
    label_length_count(tok.count(response) as u64, cap, complete)
}

/// Length rule applied to an already-known token count.
pub fn label_length_count(count: u64, cap: u64, complete: bool) -> LabelOutcome {
    if count > cap {
        LabelOutcome::Excluded(ExclusionReason::TooLong)
    } else if !complete {
        LabelOutcome::Excluded(ExclusionReason::Incomplete)
    } else {
        LabelOutcome::real(count as f64)
    }
}

static STEP_MARKER: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?im)\bstep\s+(\d+)\s*:|^[ \t]*(\d+)\.(?:\s|$)").unwrap()
});

/// Step markers as (byte offset, step number).
pub fn step_markers(response: &str) -> Vec<(usize, u64)> {
    STEP_MARKER
        .captures_iter(response)
        .filter_map(|c| {
            let m = c.get(1).or_else(|| c.get(2))?;
            Some((c.get(0)?.start(), m.as_str().parse().ok()?))
        })
        .collect()
}

pub fn label_reasoning_steps(response: &str, cap: u64) -> LabelOutcome {
    label_reasoning_steps_from(response, 0, cap)
}

/// Count distinct step numbers among markers starting at or after byte `from`.
pub fn label_reasoning_steps_from(response: &str, from: usize, cap: u64) -> LabelOutcome {
    let distinct: BTreeSet<u64> = step_markers(response)
        .into_iter()
        .filter(|&(pos, _)| pos >= from)
        .map(|(_, n)| n)
        .collect();
    let count = distinct.len() as u64;
    if count > cap {
        LabelOutcome::Excluded(ExclusionReason::TooManySteps)
    } else {
        LabelOutcome::real(count as f64)
    }
}

// ---------------------------------------------------------------------------
// Content attributes: character choice
// ---------------------------------------------------------------------------

/// Entity lexicon: canonical names and their surface forms.
#[derive(Debug, Clone)]
pub struct Lexicon {
    forms: HashMap<String, String>,
    pattern: Regex,
}

impl Lexicon {
    /// Parse lines of `canonical [form ...]`; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut forms = HashMap::new();
        for line in data_lines(text) {
            let mut words = line.split_whitespace().map(str::to_lowercase);
            let canonical = words.next().unwrap();
            forms.insert(canonical.clone(), canonical.clone());
            for w in words {
                forms.insert(w, canonical.clone());
            }
        }
        if forms.is_empty() {
            return Err(Error::Config("entity lexicon is empty".into()));
        }
        let mut alts: Vec<&str> = forms.keys().map(String::as_str).collect();
        // longest first so "foxes" wins over "fox"
        alts.sort_by(|a, b| b.len().cmp(&a.len()).then(a.cmp(b)));
        let body = alts.iter().map(|a| regex::escape(a)).collect::<Vec<_>>().join("|");
        let pattern = Regex::new(&format!(r"(?i)\b(?:{body})\b"))
            .map_err(|e| Error::Config(format!("lexicon pattern: {e}")))?;
        Ok(Self { forms, pattern })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn default_animals() -> Self {
        Self::parse(DEFAULT_ANIMALS).expect("bundled lexicon parses")
    }

    pub fn canonical(&self, word: &str) -> Option<&str> {
        self.forms.get(&word.to_lowercase()).map(String::as_str)
    }

    /// Entity mentions as (byte offset, canonical name), in text order.
    pub fn mentions<'a>(&'a self, text: &str) -> Vec<(usize, &'a str)> {
        self.pattern
            .find_iter(text)
            .filter_map(|m| Some((m.start(), self.canonical(m.as_str())?)))
            .collect()
    }

    /// The single distinct entity of `text`, if exactly one occurs.
    pub fn unique_entity<'a>(&'a self, text: &str) -> Option<&'a str> {
        let distinct: BTreeSet<&str> = self.mentions(text).into_iter().map(|(_, e)| e).collect();
        (distinct.len() == 1).then(|| *distinct.iter().next().unwrap())
    }
}

/// The `k` entities that are most often a response's unique entity,
/// by descending count with lexicographic tie-break.
pub fn derive_top_classes<S: AsRef<str>>(corpus: &[S], lexicon: &Lexicon, k: usize) -> Result<Vec<String>> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for text in corpus {
        if let Some(e) = lexicon.unique_entity(text.as_ref()) {
            *counts.entry(e).or_default() += 1;
        }
    }
    if counts.len() < k {
        return Err(Error::Config(format!(
            "need {k} entity classes but the corpus only has {} ({} short)",
            counts.len(),
            k - counts.len()
        )));
    }
    let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    Ok(ranked.into_iter().take(k).map(|(e, _)| e.to_string()).collect())
}

fn first_two_words(text: &str) -> Vec<String> {
    text.split_whitespace()
        .take(2)
        .map(|w| w.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase())
        .collect()
}

pub fn label_character_choice(response: &str, classes: &[String], lexicon: &Lexicon) -> LabelOutcome {
    let mentions = lexicon.mentions(response);
    let distinct: BTreeSet<&str> = mentions.iter().map(|&(_, e)| e).collect();
    let entity = match distinct.len() {
        0 => return LabelOutcome::Excluded(ExclusionReason::NoEntity),
        1 => *distinct.iter().next().unwrap(),
        _ => return LabelOutcome::Excluded(ExclusionReason::MultipleEntities),
    };
    if first_two_words(response)
        .iter()
        .any(|w| lexicon.canonical(w) == Some(entity))
    {
        return LabelOutcome::Excluded(ExclusionReason::EntityTooEarly);
    }
    match classes.iter().position(|c| c == entity) {
        Some(i) => LabelOutcome::class(i),
        None => LabelOutcome::Excluded(ExclusionReason::NoEntity),
    }
}

// ---------------------------------------------------------------------------
// Content attributes: multiple choice
// ---------------------------------------------------------------------------

/// Ordered set of declared-answer patterns.
#[derive(Debug, Clone)]
pub struct AnswerPatterns {
    templates: Vec<String>,
}

/// A declared answer found in a response.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AnswerMatch {
    pub start: usize,
    pub end: usize,
    /// 0 for A, 1 for B, ...
    pub option: usize,
}

impl AnswerPatterns {
    pub fn parse(text: &str) -> Result<Self> {
        let templates: Vec<String> = data_lines(text).map(str::to_string).collect();
        for t in &templates {
            if !t.contains("<L>") {
                return Err(Error::Config(format!("answer pattern {t:?} has no <L> placeholder")));
            }
        }
        if templates.is_empty() {
            return Err(Error::Config("answer pattern set is empty".into()));
        }
        Ok(Self { templates })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn default_set() -> Self {
        Self::parse(DEFAULT_ANSWER_PATTERNS).expect("bundled answer patterns parse")
    }

    fn compile(&self, option_count: usize) -> Vec<Regex> {
        let last = (b'A' + option_count.clamp(1, 26) as u8 - 1) as char;
        let letter = format!("([A-{last}])");
        self.templates
            .iter()
            .map(|t| {
                let mut re = String::from("(?i)");
                if t.starts_with(|c: char| c.is_alphanumeric()) {
                    re.push_str(r"\b");
                }
                let mut rest = t.as_str();
                while !rest.is_empty() {
                    if let Some(r) = rest.strip_prefix("<L>") {
                        re.push_str(&letter);
                        if !r.starts_with(|c: char| c.is_alphanumeric()) {
                            re.push_str(r"\b");
                        }
                        rest = r;
                    } else if let Some(r) = rest.strip_prefix("<END>") {
                        re.push_str(r"\s*(?:[.!?]|$)");
                        rest = r;
                    } else {
                        let c = rest.chars().next().unwrap();
                        if c.is_whitespace() {
                            let after_colon = re.ends_with(':');
                            re.push_str(if after_colon { r"\s*" } else { r"\s+" });
                            rest = rest.trim_start();
                        } else {
                            re.push_str(&regex::escape(&c.to_string()));
                            rest = &rest[c.len_utf8()..];
                        }
                    }
                }
                Regex::new(&re).expect("answer template compiles")
            })
            .collect()
    }

    /// Every declared answer, sorted by position.
    pub fn find(&self, response: &str, option_count: usize) -> Vec<AnswerMatch> {
        let mut found = Vec::new();
        for re in self.compile(option_count) {
            for c in re.captures_iter(response) {
                let (Some(m), Some(l)) = (c.get(0), c.get(1)) else { continue };
                // Lowercase "a" is usually the article ("the answer is a bit...").
                if l.as_str() == "a" {
                    let next = response[l.end()..].trim_start().chars().next();
                    if !matches!(next, None | Some('.' | '!' | '?' | ')' | ',')) {
                        continue;
                    }
                }
                let option = (l.as_str().to_ascii_uppercase().as_bytes()[0] - b'A') as usize;
                found.push(AnswerMatch {
                    start: m.start(),
                    end: m.end(),
                    option,
                });
            }
        }
        found.sort_by_key(|m| (m.start, m.end));
        found.dedup_by_key(|m| m.start);
        found
    }
}

/// Classify the declared answer of a response.
pub fn extract_answer(response: &str, patterns: &AnswerPatterns, option_count: usize) -> std::result::Result<AnswerMatch, ExclusionReason> {
    let found = patterns.find(response, option_count);
    let Some(&first) = found.first() else {
        return Err(ExclusionReason::NoAnswer);
    };
    if found.iter().any(|m| m.option != first.option) {
        return Err(ExclusionReason::MultipleAnswers);
    }
    let text_start = response.len() - response.trim_start().len();
    if found.len() == 1 && first.start == text_start {
        return Err(ExclusionReason::AnswerAtStart);
    }
    Ok(first)
}

pub fn label_multiple_choice(response: &str, patterns: &AnswerPatterns, option_count: usize) -> LabelOutcome {
    match extract_answer(response, patterns, option_count) {
        Ok(m) => LabelOutcome::class(m.option),
        Err(r) => LabelOutcome::Excluded(r),
    }
}

/// Parse an option letter ("D", "d", " D ") into its index.
pub fn option_index(letter: &str, option_count: usize) -> Option<usize> {
    let t = letter.trim();
    let mut chars = t.chars();
    let c = chars.next()?.to_ascii_uppercase();
    if chars.next().is_some() || !c.is_ascii_uppercase() {
        return None;
    }
    let i = (c as u8 - b'A') as usize;
    (i < option_count).then_some(i)
}

// ---------------------------------------------------------------------------
// Behavior attributes
// ---------------------------------------------------------------------------

/// Correctness of the declared answer against the gold letter: 1 or 0.
pub fn label_answer_confidence(
    response: &str,
    gold_letter: &str,
    patterns: &AnswerPatterns,
    option_count: usize,
) -> Result<LabelOutcome> {
    let gold = option_index(gold_letter, option_count).ok_or_else(|| {
        Error::Data(format!("gold letter {gold_letter:?} is not one of the {option_count} options"))
    })?;
    Ok(match extract_answer(response, patterns, option_count) {
        Ok(m) => LabelOutcome::class(usize::from(m.option == gold)),
        Err(r) => LabelOutcome::Excluded(r),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stance {
    Agree,
    Disagree,
}

#[derive(Debug, Clone)]
pub struct StancePatterns {
    agree: Vec<Regex>,
    disagree: Vec<Regex>,
}

fn phrase_regex(phrase: &str) -> Result<Regex> {
    let body = phrase
        .split_whitespace()
        .map(regex::escape)
        .collect::<Vec<_>>()
        .join(r"\s+");
    Regex::new(&format!(r"(?i)\b{body}\b")).map_err(|e| Error::Config(format!("stance phrase {phrase:?}: {e}")))
}

impl StancePatterns {
    pub fn parse(text: &str) -> Result<Self> {
        let (mut agree, mut disagree) = (Vec::new(), Vec::new());
        for line in data_lines(text) {
            let (side, phrase) = line
                .split_once(':')
                .ok_or_else(|| Error::Config(format!("stance line {line:?} lacks a side prefix")))?;
            let re = phrase_regex(phrase.trim())?;
            match side.trim() {
                "agree" => agree.push(re),
                "disagree" => disagree.push(re),
                other => return Err(Error::Config(format!("unknown stance side {other:?}"))),
            }
        }
        if agree.is_empty() || disagree.is_empty() {
            return Err(Error::Config("stance patterns need both agree and disagree phrases".into()));
        }
        Ok(Self { agree, disagree })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn default_set() -> Self {
        Self::parse(DEFAULT_STANCE_PATTERNS).expect("bundled stance patterns parse")
    }

    /// The explicit stance and where it starts; `None` when absent or contradictory.
    pub fn detect(&self, response: &str) -> Option<(Stance, usize)> {
        let first = |set: &[Regex]| set.iter().filter_map(|r| r.find(response)).map(|m| m.start()).min();
        match (first(&self.agree), first(&self.disagree)) {
            (Some(p), None) => Some((Stance::Agree, p)),
            (None, Some(p)) => Some((Stance::Disagree, p)),
            _ => None,
        }
    }
}

pub fn label_factual_consistency(response: &str, statement_is_true: bool, stances: &StancePatterns) -> LabelOutcome {
    match stances.detect(response) {
        None => LabelOutcome::Excluded(ExclusionReason::NoStance),
        Some((stance, _)) => {
            let consistent = (stance == Stance::Agree) == statement_is_true;
            LabelOutcome::class(usize::from(consistent))
        }
    }
}

// ---------------------------------------------------------------------------
// Verbalized self-estimates
// ---------------------------------------------------------------------------

static TOKENS_SPAN: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?s)\[TOKENS\](.*?)\[/TOKENS\]").unwrap());

/// Integer inside the first well-formed `[TOKENS]n[/TOKENS]` span.
pub fn parse_verbalized_estimate(response: &str) -> Option<u64> {
    TOKENS_SPAN.captures_iter(response).find_map(|c| {
        let payload = c.get(1)?.as_str().trim();
        if payload.is_empty() || !payload.bytes().all(|b| b.is_ascii_digit()) {
            return None;
        }
        payload.parse().ok()
    })
}

/// One raw self-estimation output from the exporter.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerbalizedEntry {
    pub example_id: u64,
    pub text: String,
}

/// Read the exporter's self-estimate JSON (an array of entries) and parse
/// each text; unparseable outputs map to `None`.
pub fn load_verbalized(path: &Path) -> Result<BTreeMap<u64, Option<f64>>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let entries: Vec<VerbalizedEntry> = serde_json::from_str(&text)?;
    Ok(entries
        .into_iter()
        .map(|e| (e.example_id, parse_verbalized_estimate(&e.text).map(|v| v as f64)))
        .collect())
}

fn data_lines(text: &str) -> impl Iterator<Item = &str> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
}

/// Everything a record-level labeler needs besides the record.
#[derive(Debug, Clone)]
pub struct LabelContext {
    pub definition: TaskDefinition,
    pub lexicon: Lexicon,
    /// Class names for character choice, from [`derive_top_classes`].
    pub classes: Vec<String>,
    pub answers: AnswerPatterns,
    pub stances: StancePatterns,
    /// Length label for truncated records: tokens remaining after the
    /// truncation point (default) or the full response length.
    pub remaining_length: bool,
    /// Responses shorter than this many tokens are excluded as too short,
    /// after the task rule has produced a value.
    pub min_tokens: Option<u64>,
}

impl LabelContext {
    pub fn new(definition: TaskDefinition) -> Self {
        Self {
            definition,
            lexicon: Lexicon::default_animals(),
            classes: Vec::new(),
            answers: AnswerPatterns::default_set(),
            stances: StancePatterns::default_set(),
            remaining_length: true,
            min_tokens: Some(8),
        }
    }
}

/// The parts of an exported record that labeling reads.
#[derive(Debug, Clone, PartialEq)]
pub struct ResponseInput<'a> {
    pub example_id: u64,
    pub response: &'a str,
    /// Model token count; the tokenizer count is used when absent.
    pub response_tokens: Option<u64>,
    pub truncation_offset: i64,
    pub complete: bool,
    pub gold: Option<&'a str>,
}

impl<'a> ResponseInput<'a> {
    /// A complete, untruncated response.
    pub fn text(response: &'a str) -> Self {
        Self {
            example_id: 0,
            response,
            response_tokens: None,
            truncation_offset: -1,
            complete: true,
            gold: None,
        }
    }
}

/// A label together with the token index where the attribute-revealing
/// text begins (the augmentation and dynamics horizon).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KeyedLabel {
    pub outcome: LabelOutcome,
    pub key_offset: Option<u64>,
}

/// Label one exported record.
pub fn label_record(record: &crate::store::ActivationRecord, ctx: &LabelContext, tok: &dyn Tokenizer) -> Result<KeyedLabel> {
    label_response(
        &ResponseInput {
            example_id: record.example_id,
            response: &record.response_text,
            response_tokens: Some(record.response_tokens as u64),
            truncation_offset: record.truncation_offset,
            complete: record.complete,
            gold: record.gold_label.as_deref(),
        },
        ctx,
        tok,
    )
}

/// Label one response.
///
/// Response lengths come from the exporter's token count when present;
/// positions inside the text (step markers, entity and answer offsets) use `tok`.
pub fn label_response(record: &ResponseInput<'_>, ctx: &LabelContext, tok: &dyn Tokenizer) -> Result<KeyedLabel> {
    let text = record.response;
    let params = &ctx.definition.params;
    let total = record.response_tokens.unwrap_or_else(|| tok.count(text) as u64);
    let truncated = record.truncation_offset.max(0) as u64;
    let key_at = |byte: usize| Some(token_index_at(tok, text, byte) as u64);
    let mut labeled = match ctx.definition.task {
        TaskId::ResponseLength => {
            let outcome = match label_length_count(total, params.length_cap, record.complete) {
                LabelOutcome::Value(_) if ctx.remaining_length => {
                    LabelOutcome::real(total.saturating_sub(truncated) as f64)
                }
                other => other,
            };
            KeyedLabel {
                outcome,
                key_offset: Some(total),
            }
        }
        TaskId::ReasoningSteps => {
            let from = if record.truncation_offset >= 0 {
                token_byte_offset(tok, text, record.truncation_offset as usize)
            } else {
                0
            };
            let first = step_markers(text).first().map(|&(p, _)| p);
            KeyedLabel {
                outcome: label_reasoning_steps_from(text, from, params.step_cap),
                key_offset: first.map_or(Some(tok.count(text) as u64), key_at),
            }
        }
        TaskId::CharacterChoice => {
            if ctx.classes.is_empty() {
                return Err(Error::Config("character choice needs derived classes".into()));
            }
            let outcome = label_character_choice(text, &ctx.classes, &ctx.lexicon);
            let key = ctx.lexicon.mentions(text).first().and_then(|&(p, _)| key_at(p));
            KeyedLabel { outcome, key_offset: key }
        }
        TaskId::MultipleChoice => {
            let m = extract_answer(text, &ctx.answers, params.option_count);
            KeyedLabel {
                outcome: label_multiple_choice(text, &ctx.answers, params.option_count),
                key_offset: m.ok().and_then(|m| key_at(m.start)),
            }
        }
        TaskId::AnswerConfidence => {
            let gold = record.gold.ok_or_else(|| {
                Error::Data(format!("example {} has no gold label", record.example_id))
            })?;
            let m = extract_answer(text, &ctx.answers, params.option_count);
            KeyedLabel {
                outcome: label_answer_confidence(text, gold, &ctx.answers, params.option_count)?,
                key_offset: m.ok().and_then(|m| key_at(m.start)),
            }
        }
        TaskId::FactualConsistency => {
            let gold = record.gold.ok_or_else(|| {
                Error::Data(format!("example {} has no gold label", record.example_id))
            })?;
            let truth = parse_truth(gold).ok_or_else(|| {
                Error::Data(format!("example {}: gold label {gold:?} is not true/false", record.example_id))
            })?;
            KeyedLabel {
                outcome: label_factual_consistency(text, truth, &ctx.stances),
                key_offset: ctx.stances.detect(text).and_then(|(_, p)| key_at(p)),
            }
        }
    };
    if let (Some(min), LabelOutcome::Value(_)) = (ctx.min_tokens, labeled.outcome) {
        if total < min {
            labeled.outcome = LabelOutcome::Excluded(ExclusionReason::TooShort);
        }
    }
    Ok(labeled)
}

fn parse_truth(s: &str) -> Option<bool> {
    match s.trim().to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" => Some(true),
        "false" | "0" | "no" => Some(false),
        _ => None,
    }
}
