// SPDX-License-Identifier: MIT OR Apache-2.0

//! Result tables, JSON reports, SVG heatmaps and run manifests.
//!
//! CSV values use Rust's shortest round-trip float formatting, so a table
//! read back parses to the exact `f64` that was written.

use std::fmt::Write as _;
use std::path::Path;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::MetricName;
use crate::store::sha256_file;
use crate::sweep::{row_normalize, HiddenSizeCurve, LayerwiseCurve, SweepResult};

pub const CSV_COLUMNS: [&str; 9] = ["task", "model", "layer", "hidden_size", "seed", "split", "metric", "value", "degenerate"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvRow {
    pub task: String,
    pub model: String,
    pub layer: usize,
    pub hidden_size: usize,
    pub seed: u64,
    pub split: String,
    pub metric: MetricName,
    pub value: f64,
    pub degenerate: bool,
}

/// One row per (cell, split, metric); failed cells have no rows.
pub fn result_rows(task: &str, model: &str, result: &SweepResult) -> Vec<CsvRow> {
    let mut rows = Vec::new();
    let row = |layer, hidden_size, seed, split: &str, r: &crate::MetricReport| CsvRow {
        task: task.to_string(),
        model: model.to_string(),
        layer,
        hidden_size,
        seed,
        split: split.to_string(),
        metric: r.name,
        value: r.value,
        degenerate: r.degenerate,
    };
    for c in result.cells.iter().filter(|c| !c.failed()) {
        rows.extend(c.val.iter().map(|r| row(c.layer, c.hidden_size, c.seed, "val", r)));
        if let Some(t) = result
            .tests
            .iter()
            .find(|t| t.layer == c.layer && t.hidden_size == c.hidden_size && t.seed == c.seed)
        {
            rows.extend(t.test.iter().map(|r| row(c.layer, c.hidden_size, c.seed, "test", r)));
        }
    }
    rows
}

pub fn write_csv(path: &Path, rows: &[CsvRow]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_csv_to(file, rows).map_err(|e| match e {
        Error::Stream(source) => Error::io(path, source),
        other => other,
    })
}

/// CSV with a header row, to any writer.
pub fn write_csv_to<W: std::io::Write>(writer: W, rows: &[CsvRow]) -> Result<()> {
    let csv_err = |e: csv::Error| Error::Format(format!("csv: {e}"));
    let mut w = csv::Writer::from_writer(writer);
    // header is written explicitly so empty tables still carry it
    w.write_record(CSV_COLUMNS).map_err(csv_err)?;
    for r in rows {
        w.write_record([
            r.task.clone(),
            r.model.clone(),
            r.layer.to_string(),
            r.hidden_size.to_string(),
            r.seed.to_string(),
            r.split.clone(),
            r.metric.to_string(),
            r.value.to_string(),
            r.degenerate.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv(path: &Path) -> Result<Vec<CsvRow>> {
    let csv_err = |e: csv::Error| Error::Format(format!("{}: {e}", path.display()));
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let headers = r.headers().map_err(csv_err)?.clone();
    if headers.iter().ne(CSV_COLUMNS) {
        return Err(Error::Format(format!("{}: unexpected columns {headers:?}", path.display())));
    }
    r.deserialize().map(|row| row.map_err(csv_err)).collect()
}

/// SHA-256 of one input file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataHash {
    pub path: String,
    pub sha256: String,
}

impl DataHash {
    pub fn of(path: &Path) -> Result<Self> {
        Ok(Self {
            path: path.display().to_string(),
            sha256: sha256_file(path)?,
        })
    }
}

/// Full JSON report of one sweep.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepReport {
    pub toolkit_version: String,
    pub config_hash: String,
    pub data: Vec<DataHash>,
    pub task: String,
    pub model: String,
    pub result: SweepResult,
    pub layerwise: LayerwiseCurve,
    pub hidden_sizes: Option<HiddenSizeCurve>,
    pub failed_cells: usize,
}

pub fn save_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// What a command read, how it was configured, and what it wrote.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub toolkit_version: String,
    pub command: String,
    pub config_hash: String,
    pub data: Vec<DataHash>,
    pub outputs: Vec<String>,
    pub created_unix: u64,
}

impl RunManifest {
    pub fn new(command: &str, config_hash: &str, data: Vec<DataHash>) -> Self {
        Self {
            toolkit_version: crate::VERSION.to_string(),
            command: command.to_string(),
            config_hash: config_hash.to_string(),
            data,
            outputs: Vec::new(),
            created_unix: crate::store::now_unix(),
        }
    }
}

/// Rows of per-layer values (one row per model, dataset or hidden size)
/// rendered as a heatmap.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub title: String,
    pub row_labels: Vec<String>,
    pub layers: Vec<usize>,
    pub values: Vec<Vec<Option<f64>>>,
    pub normalization: Normalization,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// Colors only.
    Raw,
    /// Colors plus a min-max normalized polyline per row.
    Row,
}

/// A cell recovered from a rendered heatmap.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeatCell {
    pub row: usize,
    pub layer: usize,
    pub value: f64,
}

const CELL: f64 = 28.0;
const LEFT: f64 = 140.0;
const TOP: f64 = 40.0;
const DARK: [f64; 3] = [8.0, 48.0, 107.0];
const LIGHT: [f64; 3] = [247.0, 251.0, 255.0];

/// Fill color on a fixed [0, 1] scale: dark at 0, light at 1.
pub fn ramp(v: f64) -> String {
    let t = if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 };
    let c: Vec<u8> = (0..3).map(|i| (DARK[i] + t * (LIGHT[i] - DARK[i])).round() as u8).collect();
    format!("#{:02x}{:02x}{:02x}", c[0], c[1], c[2])
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

impl Heatmap {
    /// One row per labeled layer-wise curve. All curves must share layers.
    pub fn layerwise(title: &str, rows: &[(String, &LayerwiseCurve)]) -> Result<Self> {
        let Some((_, first)) = rows.first() else {
            return Err(Error::Data("heatmap needs at least one row".into()));
        };
        if rows.iter().any(|(_, c)| c.layers != first.layers) {
            return Err(Error::Data("heatmap rows cover different layers".into()));
        }
        Ok(Self {
            title: title.to_string(),
            row_labels: rows.iter().map(|(l, _)| l.clone()).collect(),
            layers: first.layers.clone(),
            values: rows.iter().map(|(_, c)| c.values.clone()).collect(),
            normalization: Normalization::Row,
        })
    }

    /// Seed-averaged test selection metric, one row per hidden size.
    pub fn grid(title: &str, result: &SweepResult) -> Self {
        let mut hidden = result.grid.hidden_sizes.clone();
        hidden.sort_unstable();
        hidden.dedup();
        let mut layers = result.grid.layers.clone();
        layers.sort_unstable();
        layers.dedup();
        let values = hidden
            .iter()
            .map(|&h| {
                layers
                    .iter()
                    .map(|&l| {
                        let v: Vec<f64> = result
                            .tests
                            .iter()
                            .filter(|t| t.layer == l && t.hidden_size == h)
                            .filter_map(|t| t.test.iter().find(|r| r.name == result.selection_metric).map(|r| r.value))
                            .collect();
                        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
                    })
                    .collect()
            })
            .collect();
        Self {
            title: title.to_string(),
            row_labels: hidden.iter().map(|h| format!("hidden {h}")).collect(),
            layers,
            values,
            normalization: Normalization::Raw,
        }
    }

    pub fn to_svg(&self) -> String {
        let width = LEFT + CELL * self.layers.len() as f64 + 20.0;
        let height = TOP + CELL * self.row_labels.len() as f64 + 40.0;
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="10">"#
        );
        let _ = writeln!(s, "<!-- planprobe {} -->", crate::VERSION);
        let _ = writeln!(s, r#"<title>{}</title>"#, escape(&self.title));
        let _ = writeln!(s, r#"<text x="8" y="16" font-size="12">{}</text>"#, escape(&self.title));
        for (i, label) in self.row_labels.iter().enumerate() {
            let y = TOP + CELL * i as f64;
            let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#, LEFT - 4.0, y + CELL * 0.65, escape(label));
            for (j, &l) in self.layers.iter().enumerate() {
                let x = LEFT + CELL * j as f64;
                match self.values[i][j] {
                    Some(v) => {
                        let _ = writeln!(
                            s,
                            r#"<rect class="cell" x="{x}" y="{y}" width="{CELL}" height="{CELL}" fill="{}" data-row="{i}" data-layer="{l}" data-value="{v}"/>"#,
                            ramp(v)
                        );
                    }
                    None => {
                        let _ = writeln!(
                            s,
                            r##"<rect class="missing" x="{x}" y="{y}" width="{CELL}" height="{CELL}" fill="#cccccc" data-row="{i}" data-layer="{l}"/>"##
                        );
                    }
                }
            }
            if self.normalization == Normalization::Row {
                let (norm, degenerate) = row_normalize(&self.values[i]);
                if !degenerate {
                    let pts: Vec<String> = norm
                        .iter()
                        .enumerate()
                        .filter_map(|(j, v)| {
                            let v = (*v)?;
                            let px = LEFT + CELL * (j as f64 + 0.5);
                            let py = y + CELL * (0.9 - 0.8 * v);
                            Some(format!("{px},{py}"))
                        })
                        .collect();
                    let _ = writeln!(
                        s,
                        r#"<polyline class="curve" data-row="{i}" fill="none" stroke="black" stroke-width="1.5" points="{}"/>"#,
                        pts.join(" ")
                    );
                }
            }
        }
        let base = TOP + CELL * self.row_labels.len() as f64;
        for (j, &l) in self.layers.iter().enumerate() {
            let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{l}</text>"#, LEFT + CELL * (j as f64 + 0.5), base + 14.0);
        }
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle">layer</text>"#,
            LEFT + CELL * self.layers.len() as f64 / 2.0,
            base + 30.0
        );
        s.push_str("</svg>\n");
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_svg()).map_err(|e| Error::io(path, e))
    }
}

static CELL_RE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r#"<rect class="cell"[^>]*fill="(#[0-9a-f]{6})" data-row="(\d+)" data-layer="(\d+)" data-value="([^"]+)""#).unwrap()
});
static POLY_RE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r#"<polyline class="curve" data-row="(\d+)"[^>]*points="([^"]*)""#).unwrap());

/// Cells of a heatmap written by [`Heatmap::to_svg`], in document order.
pub fn parse_svg_cells(svg: &str) -> Result<Vec<HeatCell>> {
    CELL_RE
        .captures_iter(svg)
        .map(|c| {
            let bad = |what: &str| Error::Format(format!("heatmap cell has a bad {what}"));
            Ok(HeatCell {
                row: c[2].parse().map_err(|_| bad("row"))?,
                layer: c[3].parse().map_err(|_| bad("layer"))?,
                value: c[4].parse().map_err(|_| bad("value"))?,
            })
        })
        .collect()
}

/// Fill colors of the heatmap cells, in document order.
pub fn parse_svg_fills(svg: &str) -> Vec<String> {
    CELL_RE.captures_iter(svg).map(|c| c[1].to_string()).collect()
}

/// Polyline points per row; y grows downward in SVG.
pub fn parse_svg_curves(svg: &str) -> Vec<(usize, Vec<(f64, f64)>)> {
    POLY_RE
        .captures_iter(svg)
        .map(|c| {
            let pts = c[2]
                .split_whitespace()
                .filter_map(|p| {
                    let (x, y) = p.split_once(',')?;
                    Some((x.parse().ok()?, y.parse().ok()?))
                })
                .collect();
            (c[1].parse().unwrap_or(0), pts)
        })
        .collect()
}

/// Perceived lightness of a `#rrggbb` color.
pub fn lightness(hex_color: &str) -> f64 {
    let v = u32::from_str_radix(hex_color.trim_start_matches('#'), 16).unwrap_or(0);
    let (r, g, b) = ((v >> 16) & 0xff, (v >> 8) & 0xff, v & 0xff);
    0.2126 * r as f64 + 0.7152 * g as f64 + 0.0722 * b as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map() -> Heatmap {
        Heatmap {
            title: "spearman <test>".into(),
            row_labels: vec!["a".into(), "b".into()],
            layers: vec![0, 1, 2],
            values: vec![vec![Some(0.1), Some(0.9), None], vec![Some(0.5), Some(0.123456789012345), Some(-0.2)]],
            normalization: Normalization::Row,
        }
    }

    #[test]
    fn svg_round_trip() {
        let svg = map().to_svg();
        let cells = parse_svg_cells(&svg).unwrap();
        assert_eq!(cells.len(), 5);
        assert_eq!(cells[3], HeatCell { row: 1, layer: 1, value: 0.123456789012345 });
        assert!(svg.contains("&lt;test&gt;"));
        assert_eq!(parse_svg_curves(&svg).len(), 2);
    }

    #[test]
    fn lighter_is_higher() {
        let svg = map().to_svg();
        let cells = parse_svg_cells(&svg).unwrap();
        let fills = parse_svg_fills(&svg);
        assert_eq!(cells.len(), fills.len());
        for (a, fa) in cells.iter().zip(&fills) {
            for (b, fb) in cells.iter().zip(&fills) {
                if a.value > b.value && b.value >= 0.0 {
                    assert!(lightness(fa) > lightness(fb));
                }
            }
        }
        assert_eq!(ramp(1.0), "#f7fbff");
        assert_eq!(ramp(0.0), "#08306b");
        assert_eq!(ramp(-0.3), ramp(0.0));
    }

    #[test]
    fn single_cell_is_mid_scale_without_curve() {
        let h = Heatmap {
            title: "one".into(),
            row_labels: vec!["m".into()],
            layers: vec![4],
            values: vec![vec![Some(0.5)]],
            normalization: Normalization::Row,
        };
        let svg = h.to_svg();
        assert_eq!(parse_svg_fills(&svg), [ramp(0.5)]);
        assert!(parse_svg_curves(&svg).is_empty());
    }

    #[test]
    fn monotone_row_gives_rising_curve() {
        let h = Heatmap {
            title: "m".into(),
            row_labels: vec!["m".into()],
            layers: (0..9).collect(),
            values: vec![(1..=9).map(|i| Some(i as f64 / 10.0)).collect()],
            normalization: Normalization::Row,
        };
        let curves = parse_svg_curves(&h.to_svg());
        let pts = &curves[0].1;
        assert_eq!(pts.len(), 9);
        // rising value = decreasing SVG y
        assert!(pts.windows(2).all(|w| w[1].1 < w[0].1 && w[1].0 > w[0].0));
    }

    #[test]
    fn csv_round_trip() {
        let rows = vec![CsvRow {
            task: "response_length".into(),
            model: "m, quoted".into(),
            layer: 3,
            hidden_size: 16,
            seed: 2,
            split: "test".into(),
            metric: MetricName::Spearman,
            value: 0.1 + 0.2,
            degenerate: false,
        }];
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.csv");
        write_csv(&p, &rows).unwrap();
        assert_eq!(read_csv(&p).unwrap(), rows);
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("task,model,layer,hidden_size,seed,split,metric,value,degenerate"));
        write_csv(&p, &[]).unwrap();
        assert!(read_csv(&p).unwrap().is_empty());
    }
}
