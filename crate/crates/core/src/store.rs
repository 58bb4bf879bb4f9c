// SPDX-License-Identifier: MIT OR Apache-2.0

//! Indexed binary container for activation datasets.
//!
//! # Layout (little-endian throughout)
//!
//! ```text
//! header   magic "PLNPROBE" | version u16 | model_name str | layer_count u16
//!          | hidden_dim u32 | record_count u64 | task_id str
//! index    record_count x u64 absolute byte offset of each record
//! record   example_id u64 | group_id u64 | truncation_offset i64
//!          | response_tokens u32 | flags u8 | prompt str | response str
//!          | [gold_label str, if flags & HAS_GOLD]
//!          | layer_count x hidden_dim x f32 (row-major, row = layer)
//! str      u32 byte length | UTF-8 bytes
//! ```
//!
//! `flags` bit 0 is set when the exporter saw the end-of-sequence token
//! (the response is complete); bit 1 marks the presence of a gold label.
//!
//! A JSON [`Manifest`] sidecar mirrors the header and records the SHA-256 of
//! the binary file.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"PLNPROBE";
pub const FORMAT_VERSION: u16 = 1;

const FLAG_COMPLETE: u8 = 0b01;
const FLAG_HAS_GOLD: u8 = 0b10;
/// example_id, group_id, truncation_offset, response_tokens, flags
const RECORD_FIXED_BYTES: u64 = 8 + 8 + 8 + 4 + 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub version: u16,
    pub model_name: String,
    pub layer_count: u16,
    pub hidden_dim: u32,
    pub record_count: u64,
    pub task_id: String,
}

impl DatasetHeader {
    pub fn new(model_name: impl Into<String>, task_id: impl Into<String>, layers: u16, dim: u32) -> Self {
        Self {
            version: FORMAT_VERSION,
            model_name: model_name.into(),
            layer_count: layers,
            hidden_dim: dim,
            record_count: 0,
            task_id: task_id.into(),
        }
    }

    fn encoded_len(&self) -> u64 {
        8 + 2 + str_len(&self.model_name) + 2 + 4 + 8 + str_len(&self.task_id)
    }

    fn row_bytes(&self) -> u64 {
        self.hidden_dim as u64 * 4
    }
}

/// One probing example: the hidden state of every stored layer at a single
/// capture position, plus the texts and provenance it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationRecord {
    pub example_id: u64,
    /// Shared by a response and all of its truncation-augmented variants.
    pub group_id: u64,
    pub prompt_text: String,
    pub response_text: String,
    /// Token index into the response at which activations were captured;
    /// -1 means at prompt end, before any response token.
    pub truncation_offset: i64,
    /// Model token count of `response_text`, special tokens excluded.
    pub response_tokens: u32,
    /// Generation stopped at end-of-sequence rather than at the token budget.
    pub complete: bool,
    pub gold_label: Option<String>,
    /// Stored-layer index of each activation row.
    pub layers: Vec<usize>,
    /// `layers.len() x hidden_dim`.
    pub activations: Array2<f32>,
}

impl ActivationRecord {
    /// Row for stored layer `layer`, if it was read.
    pub fn layer_row(&self, layer: usize) -> Option<ndarray::ArrayView1<'_, f32>> {
        self.layers
            .iter()
            .position(|&l| l == layer)
            .map(|i| self.activations.row(i))
    }

    /// Whether activations were captured at prompt end.
    pub fn is_canonical(&self) -> bool {
        self.truncation_offset < 0
    }

    fn encoded_len(&self) -> u64 {
        RECORD_FIXED_BYTES
            + str_len(&self.prompt_text)
            + str_len(&self.response_text)
            + self.gold_label.as_deref().map_or(0, str_len)
            + self.activations.len() as u64 * 4
    }

    fn check(&self, header: &DatasetHeader) -> Result<()> {
        let (rows, cols) = self.activations.dim();
        if rows != header.layer_count as usize || cols != header.hidden_dim as usize {
            return Err(Error::Shape(format!(
                "example {}: activations are {rows}x{cols}, header declares {}x{}",
                self.example_id, header.layer_count, header.hidden_dim
            )));
        }
        if self.layers.len() != rows || self.layers.iter().enumerate().any(|(i, &l)| i != l) {
            return Err(Error::Shape(format!(
                "example {}: records must carry every layer in order",
                self.example_id
            )));
        }
        if let Some(pos) = self.activations.iter().position(|v| !v.is_finite()) {
            return Err(Error::Validation(format!(
                "example {}: non-finite activation at layer {}, index {}",
                self.example_id,
                pos / cols,
                pos % cols
            )));
        }
        check_offset(self.truncation_offset, self.response_tokens).map_err(|msg| {
            Error::Validation(format!("example {}: {msg}", self.example_id))
        })
    }
}

fn check_offset(offset: i64, tokens: u32) -> std::result::Result<(), String> {
    if offset == -1 || (0..tokens as i64).contains(&offset) {
        Ok(())
    } else {
        Err(format!(
            "truncation offset {offset} outside [-1] or [0, {tokens})"
        ))
    }
}

fn str_len(s: &str) -> u64 {
    4 + s.len() as u64
}

/// JSON sidecar describing a dataset file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub model_name: String,
    pub task_id: String,
    pub layer_count: u16,
    pub hidden_dim: u32,
    pub record_count: u64,
    /// Seconds since the Unix epoch; honours `SOURCE_DATE_EPOCH`.
    pub created_unix: u64,
    pub exporter_version: String,
    /// Exporter's statement of what layer 0 is (e.g. "embeddings" or "block0").
    pub layer_convention: String,
    pub sha256: String,
}

impl Manifest {
    /// Conventional sidecar path: `<file>.manifest.json`.
    pub fn sidecar_path(data: &Path) -> PathBuf {
        let mut name = data.as_os_str().to_owned();
        name.push(".manifest.json");
        PathBuf::from(name)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn check_header(&self, header: &DatasetHeader) -> Result<()> {
        let same = self.model_name == header.model_name
            && self.task_id == header.task_id
            && self.layer_count == header.layer_count
            && self.hidden_dim == header.hidden_dim
            && self.record_count == header.record_count;
        if same {
            Ok(())
        } else {
            Err(Error::Integrity("manifest fields disagree with file header".into()))
        }
    }
}

/// Provenance strings copied into the manifest.
#[derive(Debug, Clone)]
pub struct WriteOptions {
    pub exporter_version: String,
    pub layer_convention: String,
}

impl Default for WriteOptions {
    fn default() -> Self {
        Self {
            exporter_version: format!("planprobe {}", crate::VERSION),
            layer_convention: "unspecified".into(),
        }
    }
}

pub(crate) fn now_unix() -> u64 {
    if let Some(epoch) = std::env::var("SOURCE_DATE_EPOCH")
        .ok()
        .and_then(|v| v.parse().ok())
    {
        return epoch;
    }
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

/// SHA-256 of a file, lowercase hex.
pub fn sha256_file(path: &Path) -> Result<String> {
    let mut file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = file.read(&mut buf).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}

struct HashingWriter<W> {
    inner: W,
    hasher: Sha256,
}

impl<W: Write> Write for HashingWriter<W> {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        let n = self.inner.write(buf)?;
        self.hasher.update(&buf[..n]);
        Ok(n)
    }

    fn flush(&mut self) -> std::io::Result<()> {
        self.inner.flush()
    }
}

fn put_str(w: &mut impl Write, s: &str) -> std::io::Result<()> {
    let len = u32::try_from(s.len())
        .map_err(|_| std::io::Error::new(std::io::ErrorKind::InvalidInput, "string over 4 GiB"))?;
    w.write_all(&len.to_le_bytes())?;
    w.write_all(s.as_bytes())
}

fn put_header(w: &mut impl Write, h: &DatasetHeader) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&h.version.to_le_bytes())?;
    put_str(w, &h.model_name)?;
    w.write_all(&h.layer_count.to_le_bytes())?;
    w.write_all(&h.hidden_dim.to_le_bytes())?;
    w.write_all(&h.record_count.to_le_bytes())?;
    put_str(w, &h.task_id)
}

fn put_record(w: &mut impl Write, r: &ActivationRecord) -> std::io::Result<()> {
    w.write_all(&r.example_id.to_le_bytes())?;
    w.write_all(&r.group_id.to_le_bytes())?;
    w.write_all(&r.truncation_offset.to_le_bytes())?;
    w.write_all(&r.response_tokens.to_le_bytes())?;
    let mut flags = 0u8;
    if r.complete {
        flags |= FLAG_COMPLETE;
    }
    if r.gold_label.is_some() {
        flags |= FLAG_HAS_GOLD;
    }
    w.write_all(&[flags])?;
    put_str(w, &r.prompt_text)?;
    put_str(w, &r.response_text)?;
    if let Some(gold) = &r.gold_label {
        put_str(w, gold)?;
    }
    let mut buf = Vec::with_capacity(r.activations.len() * 4);
    for v in r.activations.iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)
}

/// Serialize `header` and `records` to `path`. `header.record_count` is
/// taken from `records`.
pub fn write_dataset(
    header: &DatasetHeader,
    records: &[ActivationRecord],
    path: &Path,
) -> Result<Manifest> {
    write_dataset_with(header, records, path, &WriteOptions::default())
}

pub fn write_dataset_with(
    header: &DatasetHeader,
    records: &[ActivationRecord],
    path: &Path,
    options: &WriteOptions,
) -> Result<Manifest> {
    if header.version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "cannot write version {}, only {FORMAT_VERSION}",
            header.version
        )));
    }
    if header.layer_count == 0 || header.hidden_dim == 0 {
        return Err(Error::Validation("layer_count and hidden_dim must be at least 1".into()));
    }
    let mut header = header.clone();
    header.record_count = records.len() as u64;

    let mut seen = HashSet::with_capacity(records.len());
    for r in records {
        r.check(&header)?;
        if !seen.insert(r.example_id) {
            return Err(Error::Validation(format!(
                "duplicate example_id {}",
                r.example_id
            )));
        }
    }

    let mut offset = header.encoded_len() + 8 * records.len() as u64;
    let mut index = Vec::with_capacity(records.len());
    for r in records {
        index.push(offset);
        offset += r.encoded_len();
    }

    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = HashingWriter {
        inner: BufWriter::new(file),
        hasher: Sha256::new(),
    };
    let io = |e| Error::io(path, e);
    put_header(&mut w, &header).map_err(io)?;
    for off in &index {
        w.write_all(&off.to_le_bytes()).map_err(io)?;
    }
    for r in records {
        put_record(&mut w, r).map_err(io)?;
    }
    w.flush().map_err(io)?;
    let sha256 = hex::encode(w.hasher.finalize());

    Ok(Manifest {
        model_name: header.model_name,
        task_id: header.task_id,
        layer_count: header.layer_count,
        hidden_dim: header.hidden_dim,
        record_count: header.record_count,
        created_unix: now_unix(),
        exporter_version: options.exporter_version.clone(),
        layer_convention: options.layer_convention.clone(),
        sha256,
    })
}

/// Random-access reader over a dataset file.
///
/// Holds the header and the record index; records are decoded one at a time.
pub struct DatasetReader<R> {
    inner: R,
    header: DatasetHeader,
    index: Vec<u64>,
    data_start: u64,
    len: u64,
    layers: Option<Vec<usize>>,
}

fn eof_to_corruption(e: std::io::Error, offset: u64, what: &str) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::Corruption {
            offset,
            reason: format!("file ends inside {what}"),
        }
    } else {
        Error::Stream(e)
    }
}

struct Cursor<'a, R> {
    inner: &'a mut R,
    pos: u64,
    len: u64,
}

impl<R: Read> Cursor<'_, R> {
    fn bytes<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        let mut b = [0u8; N];
        self.inner
            .read_exact(&mut b)
            .map_err(|e| eof_to_corruption(e, self.pos, what))?;
        self.pos += N as u64;
        Ok(b)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.bytes::<1>(what)?[0])
    }
    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.bytes(what)?))
    }
    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(what)?))
    }
    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(what)?))
    }
    fn i64(&mut self, what: &str) -> Result<i64> {
        Ok(i64::from_le_bytes(self.bytes(what)?))
    }

    fn vec(&mut self, n: u64, what: &str) -> Result<Vec<u8>> {
        if n > self.len.saturating_sub(self.pos) {
            return Err(Error::Corruption {
                offset: self.pos,
                reason: format!("{what} of {n} bytes runs past end of file"),
            });
        }
        let mut b = vec![0u8; n as usize];
        self.inner
            .read_exact(&mut b)
            .map_err(|e| eof_to_corruption(e, self.pos, what))?;
        self.pos += n;
        Ok(b)
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let start = self.pos;
        let n = self.u32(what)?;
        let bytes = self.vec(n as u64, what)?;
        String::from_utf8(bytes).map_err(|_| Error::Corruption {
            offset: start,
            reason: format!("{what} is not valid UTF-8"),
        })
    }
}

impl DatasetReader<BufReader<File>> {
    pub fn open(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::new(BufReader::new(file))
    }
}

impl<R: Read + Seek> DatasetReader<R> {
    pub fn new(mut inner: R) -> Result<Self> {
        let len = inner.seek(SeekFrom::End(0))?;
        inner.seek(SeekFrom::Start(0))?;
        let mut cur = Cursor {
            inner: &mut inner,
            pos: 0,
            len,
        };
        let magic: [u8; 8] = cur.bytes("magic").map_err(|_| {
            Error::Format("file too short to hold the magic bytes".into())
        })?;
        if &magic != MAGIC {
            return Err(Error::Format(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(&magic),
                std::str::from_utf8(MAGIC).unwrap()
            )));
        }
        let version = cur.u16("header")?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported version {version}, expected {FORMAT_VERSION}"
            )));
        }
        let model_name = cur.string("model name")?;
        let layer_count = cur.u16("header")?;
        let hidden_dim = cur.u32("header")?;
        let record_count = cur.u64("header")?;
        let task_id = cur.string("task id")?;
        if layer_count == 0 || hidden_dim == 0 {
            return Err(Error::Format(format!(
                "header declares {layer_count} layers of width {hidden_dim}"
            )));
        }
        let index_bytes = record_count.checked_mul(8).ok_or_else(|| Error::Corruption {
            offset: cur.pos,
            reason: "record count overflows".into(),
        })?;
        let raw = cur.vec(index_bytes, "record index")?;
        let index: Vec<u64> = raw
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let data_start = cur.pos;
        Ok(Self {
            inner,
            header: DatasetHeader {
                version,
                model_name,
                layer_count,
                hidden_dim,
                record_count,
                task_id,
            },
            index,
            data_start,
            len,
            layers: None,
        })
    }

    pub fn header(&self) -> &DatasetHeader {
        &self.header
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn index(&self) -> &[u64] {
        &self.index
    }

    /// Restrict subsequent reads to the given stored layers (sorted, deduplicated).
    /// Rows of other layers are skipped with a seek, never read.
    pub fn with_layers(mut self, layers: &[usize]) -> Result<Self> {
        let mut layers = layers.to_vec();
        layers.sort_unstable();
        layers.dedup();
        if let Some(&bad) = layers.iter().find(|&&l| l >= self.header.layer_count as usize) {
            return Err(Error::Shape(format!(
                "layer {bad} out of range for a {}-layer file",
                self.header.layer_count
            )));
        }
        self.layers = Some(layers);
        Ok(self)
    }

    /// Decode record `i` using the record index.
    pub fn read_record(&mut self, i: usize) -> Result<ActivationRecord> {
        let offset = *self.index.get(i).ok_or_else(|| {
            Error::Data(format!("record {i} out of range (file has {})", self.index.len()))
        })?;
        if offset < self.data_start || offset >= self.len {
            return Err(Error::Corruption {
                offset: self.data_start + 8 * i as u64,
                reason: format!("index entry {i} points to byte {offset}, outside the record area"),
            });
        }
        self.inner.seek(SeekFrom::Start(offset))?;
        let header = &self.header;
        let mut cur = Cursor {
            inner: &mut self.inner,
            pos: offset,
            len: self.len,
        };
        let example_id = cur.u64("record")?;
        let group_id = cur.u64("record")?;
        let truncation_offset = cur.i64("record")?;
        let response_tokens = cur.u32("record")?;
        let flags = cur.u8("record")?;
        let prompt_text = cur.string("prompt text")?;
        let response_text = cur.string("response text")?;
        let gold_label = if flags & FLAG_HAS_GOLD != 0 {
            Some(cur.string("gold label")?)
        } else {
            None
        };

        let dim = header.hidden_dim as usize;
        let all: Vec<usize>;
        let layers = match &self.layers {
            Some(l) => l,
            None => {
                all = (0..header.layer_count as usize).collect();
                &all
            }
        };
        let rows_start = cur.pos;
        let row_bytes = header.row_bytes();
        let block_end = rows_start + header.layer_count as u64 * row_bytes;
        if block_end > self.len {
            return Err(Error::Corruption {
                offset: self.len,
                reason: format!("file ends inside activations of example {example_id}"),
            });
        }
        let mut data = Vec::with_capacity(layers.len() * dim);
        let contiguous = layers.len() == header.layer_count as usize;
        if contiguous {
            let raw = cur.vec(header.layer_count as u64 * row_bytes, "activations")?;
            data.extend(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())));
        } else {
            for &l in layers {
                let at = rows_start + l as u64 * row_bytes;
                cur.inner.seek(SeekFrom::Start(at))?;
                cur.pos = at;
                let raw = cur.vec(row_bytes, "activations")?;
                data.extend(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())));
            }
        }
        let activations = Array2::from_shape_vec((layers.len(), dim), data)
            .map_err(|e| Error::Shape(e.to_string()))?;
        Ok(ActivationRecord {
            example_id,
            group_id,
            prompt_text,
            response_text,
            truncation_offset,
            response_tokens,
            complete: flags & FLAG_COMPLETE != 0,
            gold_label,
            layers: layers.clone(),
            activations,
        })
    }

    /// Records in stored order, decoded lazily.
    pub fn records(&mut self) -> Records<'_, R> {
        Records { reader: self, next: 0 }
    }
}

pub struct Records<'a, R> {
    reader: &'a mut DatasetReader<R>,
    next: usize,
}

impl<R: Read + Seek> Iterator for Records<'_, R> {
    type Item = Result<ActivationRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.next >= self.reader.len() {
            return None;
        }
        let i = self.next;
        self.next += 1;
        Some(self.reader.read_record(i))
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let left = self.reader.len() - self.next;
        (left, Some(left))
    }
}

/// Open `path`, optionally checking it against a manifest first.
pub fn read_dataset(path: &Path, manifest: Option<&Manifest>) -> Result<DatasetReader<BufReader<File>>> {
    if let Some(m) = manifest {
        let actual = sha256_file(path)?;
        if actual != m.sha256 {
            return Err(Error::Integrity(format!(
                "{} hashes to {actual}, manifest says {}",
                path.display(),
                m.sha256
            )));
        }
    }
    let reader = DatasetReader::open(path)?;
    if let Some(m) = manifest {
        m.check_header(reader.header())?;
    }
    Ok(reader)
}

/// Read every record of a file into memory.
pub fn read_all(path: &Path) -> Result<(DatasetHeader, Vec<ActivationRecord>)> {
    let mut reader = DatasetReader::open(path)?;
    let records = reader.records().collect::<Result<Vec<_>>>()?;
    Ok((reader.header().clone(), records))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Severity {
    Warning,
    Error,
    Fatal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValidationStatus {
    Clean,
    Findings,
    Fatal,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Finding {
    pub severity: Severity,
    pub example_id: Option<u64>,
    pub offset: Option<u64>,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub status: ValidationStatus,
    pub records_checked: u64,
    pub findings: Vec<Finding>,
}

impl ValidationReport {
    fn from_findings(findings: Vec<Finding>, records_checked: u64) -> Self {
        let status = match findings.iter().map(|f| f.severity).max() {
            None => ValidationStatus::Clean,
            Some(Severity::Fatal) => ValidationStatus::Fatal,
            Some(_) => ValidationStatus::Findings,
        };
        Self {
            status,
            records_checked,
            findings,
        }
    }
}

/// Check a dataset file and describe every problem found. Never fails:
/// unreadable structure is reported as a fatal finding.
pub fn validate(path: &Path) -> ValidationReport {
    match File::open(path) {
        Ok(f) => validate_reader(BufReader::new(f)),
        Err(e) => ValidationReport::from_findings(
            vec![Finding {
                severity: Severity::Fatal,
                example_id: None,
                offset: None,
                message: format!("cannot open {}: {e}", path.display()),
            }],
            0,
        ),
    }
}

pub fn validate_reader<R: Read + Seek>(inner: R) -> ValidationReport {
    let mut findings = Vec::new();
    let fatal = |offset: Option<u64>, message: String| Finding {
        severity: Severity::Fatal,
        example_id: None,
        offset,
        message,
    };
    let mut reader = match DatasetReader::new(inner) {
        Ok(r) => r,
        Err(e) => {
            let offset = match &e {
                Error::Corruption { offset, .. } => Some(*offset),
                _ => None,
            };
            return ValidationReport::from_findings(vec![fatal(offset, e.to_string())], 0);
        }
    };

    let index = reader.index.clone();
    let index_start = reader.data_start - 8 * index.len() as u64;
    for (i, &off) in index.iter().enumerate() {
        let consistent = match i {
            0 => off == reader.data_start,
            _ => off > index[i - 1],
        };
        if !consistent || off >= reader.len {
            findings.push(fatal(
                Some(index_start + 8 * i as u64),
                format!("index entry {i} = {off} is not a valid record offset"),
            ));
            return ValidationReport::from_findings(findings, 0);
        }
    }

    let dim = reader.header.hidden_dim as usize;
    let mut seen = HashSet::new();
    let mut checked = 0u64;
    for i in 0..index.len() {
        let rec = match reader.read_record(i) {
            Ok(r) => r,
            Err(e) => {
                let offset = match &e {
                    Error::Corruption { offset, .. } => Some(*offset),
                    _ => Some(index[i]),
                };
                findings.push(fatal(offset, format!("record {i}: {e}")));
                return ValidationReport::from_findings(findings, checked);
            }
        };
        checked += 1;
        let end = index[i] + rec.encoded_len();
        let next = index.get(i + 1).copied().unwrap_or(reader.len);
        if end != next {
            findings.push(Finding {
                severity: if i + 1 == index.len() { Severity::Warning } else { Severity::Error },
                example_id: Some(rec.example_id),
                offset: Some(end),
                message: format!(
                    "record {i} ends at byte {end} but the next structure starts at {next}"
                ),
            });
        }
        if !seen.insert(rec.example_id) {
            findings.push(Finding {
                severity: Severity::Error,
                example_id: Some(rec.example_id),
                offset: Some(index[i]),
                message: "duplicate example_id".into(),
            });
        }
        let bad: Vec<usize> = rec
            .activations
            .iter()
            .enumerate()
            .filter(|(_, v)| !v.is_finite())
            .map(|(k, _)| k)
            .collect();
        if let Some(&first) = bad.first() {
            let act_start = index[i] + rec.encoded_len() - rec.activations.len() as u64 * 4;
            findings.push(Finding {
                severity: Severity::Error,
                example_id: Some(rec.example_id),
                offset: Some(act_start + 4 * first as u64),
                message: format!(
                    "{} non-finite activation value(s), first at layer {} index {}",
                    bad.len(),
                    first / dim,
                    first % dim
                ),
            });
        }
        if let Err(msg) = check_offset(rec.truncation_offset, rec.response_tokens) {
            findings.push(Finding {
                severity: Severity::Error,
                example_id: Some(rec.example_id),
                offset: Some(index[i] + 16),
                message: msg,
            });
        }
    }
    ValidationReport::from_findings(findings, checked)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor as IoCursor;

    pub(crate) fn record(id: u64, layers: usize, dim: usize) -> ActivationRecord {
        let data: Vec<f32> = (0..layers * dim).map(|k| id as f32 + k as f32 * 0.25 - 3.0).collect();
        ActivationRecord {
            example_id: id,
            group_id: id / 2,
            prompt_text: format!("prompt {id}"),
            response_text: "a b c d".into(),
            truncation_offset: if id % 2 == 0 { -1 } else { 2 },
            response_tokens: 4,
            complete: id % 3 != 0,
            gold_label: (id % 4 == 1).then(|| "C".to_string()),
            layers: (0..layers).collect(),
            activations: Array2::from_shape_vec((layers, dim), data).unwrap(),
        }
    }

    fn to_bytes(header: &DatasetHeader, records: &[ActivationRecord]) -> Vec<u8> {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.bin");
        write_dataset(header, records, &path).unwrap();
        std::fs::read(path).unwrap()
    }

    fn bits(a: &Array2<f32>) -> Vec<u32> {
        a.iter().map(|v| v.to_bits()).collect()
    }

    #[test]
    fn round_trip_three_records() {
        let header = DatasetHeader::new("toy", "response_length", 3, 5);
        let records: Vec<_> = (0..3).map(|i| record(i, 3, 5)).collect();
        let bytes = to_bytes(&header, &records);
        let mut reader = DatasetReader::new(IoCursor::new(bytes)).unwrap();
        assert_eq!(reader.header().record_count, 3);
        let back: Vec<_> = reader.records().map(Result::unwrap).collect();
        assert_eq!(back, records);
        for (a, b) in back.iter().zip(&records) {
            assert_eq!(bits(&a.activations), bits(&b.activations));
        }
    }

    #[test]
    fn empty_dataset() {
        let header = DatasetHeader::new("toy", "t", 2, 2);
        let bytes = to_bytes(&header, &[]);
        let mut reader = DatasetReader::new(IoCursor::new(bytes)).unwrap();
        assert_eq!(reader.header().record_count, 0);
        assert_eq!(reader.records().count(), 0);
    }

    #[test]
    fn short_row_is_a_shape_error() {
        let header = DatasetHeader::new("toy", "t", 2, 4);
        let mut r = record(7, 2, 4);
        r.activations = Array2::zeros((2, 3));
        let dir = tempfile::tempdir().unwrap();
        let err = write_dataset(&header, &[r], &dir.path().join("x")).unwrap_err();
        match err {
            Error::Shape(msg) => assert!(msg.contains("example 7"), "{msg}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn non_finite_write_is_rejected() {
        let header = DatasetHeader::new("toy", "t", 1, 2);
        let mut r = record(1, 1, 2);
        r.activations[[0, 1]] = f32::NAN;
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            write_dataset(&header, &[r], &dir.path().join("x")),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn bad_magic_is_a_format_error() {
        let header = DatasetHeader::new("toy", "t", 1, 2);
        let mut bytes = to_bytes(&header, &[record(0, 1, 2)]);
        bytes[..8].copy_from_slice(b"XXNOPE..");
        assert!(matches!(
            DatasetReader::new(IoCursor::new(bytes)),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn layer_filter_reads_single_row() {
        let header = DatasetHeader::new("toy", "t", 33, 4);
        let records: Vec<_> = (0..4).map(|i| record(i, 33, 4)).collect();
        let bytes = to_bytes(&header, &records);
        let mut reader = DatasetReader::new(IoCursor::new(bytes)).unwrap().with_layers(&[5]).unwrap();
        for (got, want) in reader.records().map(Result::unwrap).zip(&records) {
            assert_eq!(got.activations.nrows(), 1);
            assert_eq!(got.layers, vec![5]);
            assert_eq!(got.activations.row(0), want.activations.row(5));
        }
    }

    #[test]
    fn random_access_matches_scan() {
        let header = DatasetHeader::new("toy", "t", 2, 3);
        let records: Vec<_> = (0..10).map(|i| record(i, 2, 3)).collect();
        let bytes = to_bytes(&header, &records);
        let mut reader = DatasetReader::new(IoCursor::new(bytes)).unwrap();
        let j = reader.read_record(7).unwrap();
        let i = reader.read_record(2).unwrap();
        assert_eq!(i, records[2]);
        assert_eq!(j, records[7]);
    }

    #[test]
    fn truncated_file_reports_offset() {
        let header = DatasetHeader::new("toy", "t", 2, 3);
        let records: Vec<_> = (0..3).map(|i| record(i, 2, 3)).collect();
        let mut bytes = to_bytes(&header, &records);
        bytes.truncate(bytes.len() - 5);
        let report = validate_reader(IoCursor::new(bytes));
        assert_eq!(report.status, ValidationStatus::Fatal);
        assert!(report.findings[0].offset.is_some());
    }

    #[test]
    fn clean_file_validates() {
        let header = DatasetHeader::new("toy", "t", 2, 3);
        let records: Vec<_> = (0..5).map(|i| record(i, 2, 3)).collect();
        let report = validate_reader(IoCursor::new(to_bytes(&header, &records)));
        assert_eq!(report.status, ValidationStatus::Clean, "{:?}", report.findings);
        assert_eq!(report.records_checked, 5);
    }

    #[test]
    fn manifest_mirrors_header_and_hash() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.bin");
        let header = DatasetHeader::new("toy", "t", 2, 3);
        let records: Vec<_> = (0..4).map(|i| record(i, 2, 3)).collect();
        let m = write_dataset(&header, &records, &path).unwrap();
        assert_eq!(m.sha256, sha256_file(&path).unwrap());
        assert_eq!(m.record_count, 4);
        assert!(read_dataset(&path, Some(&m)).is_ok());
        let mut bad = m.clone();
        bad.sha256 = "00".repeat(32);
        assert!(matches!(read_dataset(&path, Some(&bad)), Err(Error::Integrity(_))));
    }
}
