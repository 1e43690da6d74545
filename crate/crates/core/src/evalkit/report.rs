use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::GroupScore;
use crate::tokenizer::TokenId;

use super::msedist::MseDistribution;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Cell {
    Num(f64),
    Int(u64),
    Text(String),
    /// Written as `undefined` in CSV and `null` in JSON.
    Missing,
}

impl Cell {
    fn csv(&self) -> String {
        match self {
            Cell::Num(v) => format!("{v}"),
            Cell::Int(v) => v.to_string(),
            Cell::Text(s) if s.contains([',', '"', '\n']) => format!("\"{}\"", s.replace('"', "\"\"")),
            Cell::Text(s) => s.clone(),
            Cell::Missing => "undefined".into(),
        }
    }

    fn json(&self) -> serde_json::Value {
        match self {
            Cell::Num(v) => serde_json::Number::from_f64(*v).map_or(serde_json::Value::Null, serde_json::Value::Number),
            Cell::Int(v) => (*v).into(),
            Cell::Text(s) => s.clone().into(),
            Cell::Missing => serde_json::Value::Null,
        }
    }
}

impl From<Option<f64>> for Cell {
    fn from(v: Option<f64>) -> Self {
        v.map_or(Cell::Missing, Cell::Num)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
}

impl Table {
    pub fn new(columns: &[&str]) -> Self {
        Table {
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    /// `group,score`: frequent, medium, rare, all.
    pub fn isotropy(scores: &[GroupScore]) -> Self {
        let mut t = Table::new(&["group", "score"]);
        for s in scores {
            t.push(vec![Cell::Text(s.group.into()), s.score.into()]);
        }
        t
    }

    /// `lo,hi,count,cumulative` with one row per bin.
    pub fn mse_bins(d: &MseDistribution) -> Self {
        let mut t = Table::new(&["lo", "hi", "count", "cumulative"]);
        for b in &d.bins {
            t.push(vec![Cell::Num(b.lo), b.hi.into(), Cell::Int(b.count as u64), Cell::Num(b.cumulative)]);
        }
        t
    }

    /// `band_lo,bin_lo,count`, the per-band stack.
    pub fn mse_bands(d: &MseDistribution) -> Self {
        let mut t = Table::new(&["band_lo", "bin_lo", "count"]);
        for (band, counts) in d.bands.iter().zip(&d.band_counts) {
            for (bin, &c) in d.bins.iter().zip(counts) {
                t.push(vec![Cell::Int(*band as u64), Cell::Num(bin.lo), Cell::Int(c as u64)]);
            }
        }
        t
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScatterPoint {
    pub id: TokenId,
    pub group: String,
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Report {
    Table(Table),
    /// CSV columns `id,group,x,y`.
    Scatter(Vec<ScatterPoint>),
}

impl Report {
    /// One point per row of a projection, labelled by `group_of(id)`.
    pub fn projection(coords: &[[f64; 2]], group_of: impl Fn(TokenId) -> String) -> Self {
        Report::Scatter(
            coords
                .iter()
                .enumerate()
                .map(|(i, &[x, y])| ScatterPoint {
                    id: i as TokenId,
                    group: group_of(i as TokenId),
                    x,
                    y,
                })
                .collect(),
        )
    }

    fn is_empty(&self) -> bool {
        match self {
            Report::Table(t) => t.rows.is_empty(),
            Report::Scatter(p) => p.is_empty(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReportFormat {
    Csv,
    Json,
    SvgScatter,
}

impl ReportFormat {
    pub fn extension(self) -> &'static str {
        match self {
            ReportFormat::Csv => "csv",
            ReportFormat::Json => "json",
            ReportFormat::SvgScatter => "svg",
        }
    }
}

fn as_table(r: &Report) -> Table {
    match r {
        Report::Table(t) => t.clone(),
        Report::Scatter(points) => {
            let mut t = Table::new(&["id", "group", "x", "y"]);
            for p in points {
                t.push(vec![Cell::Int(p.id as u64), Cell::Text(p.group.clone()), Cell::Num(p.x), Cell::Num(p.y)]);
            }
            t
        }
    }
}

fn csv(t: &Table) -> String {
    let mut s = t.columns.join(",");
    s.push('\n');
    for row in &t.rows {
        s.push_str(&row.iter().map(Cell::csv).collect::<Vec<_>>().join(","));
        s.push('\n');
    }
    s
}

fn json(t: &Table) -> String {
    let rows: Vec<serde_json::Value> = t
        .rows
        .iter()
        .map(|row| {
            let obj: serde_json::Map<String, serde_json::Value> =
                t.columns.iter().cloned().zip(row.iter().map(Cell::json)).collect();
            serde_json::Value::Object(obj)
        })
        .collect();
    let mut s = serde_json::to_string_pretty(&rows).expect("json values serialize");
    s.push('\n');
    s
}

const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"];

fn svg(points: &[ScatterPoint]) -> String {
    let (w, h, pad) = (640.0, 480.0, 40.0);
    let lo_x = points.iter().map(|p| p.x).fold(f64::INFINITY, f64::min);
    let hi_x = points.iter().map(|p| p.x).fold(f64::NEG_INFINITY, f64::max);
    let lo_y = points.iter().map(|p| p.y).fold(f64::INFINITY, f64::min);
    let hi_y = points.iter().map(|p| p.y).fold(f64::NEG_INFINITY, f64::max);
    let sx = if hi_x > lo_x { (w - 2.0 * pad) / (hi_x - lo_x) } else { 0.0 };
    let sy = if hi_y > lo_y { (h - 2.0 * pad) / (hi_y - lo_y) } else { 0.0 };
    let groups: Vec<&str> = points
        .iter()
        .map(|p| p.group.as_str())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let color = |g: &str| PALETTE[groups.iter().position(|&x| x == g).unwrap_or(0) % PALETTE.len()];
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    for p in points {
        let cx = pad + (p.x - lo_x) * sx;
        let cy = h - pad - (p.y - lo_y) * sy;
        let _ = writeln!(
            s,
            r#"<circle cx="{cx:.2}" cy="{cy:.2}" r="2.5" fill="{}" fill-opacity="0.7"><title>{} {}</title></circle>"#,
            color(&p.group),
            p.id,
            p.group
        );
    }
    for (i, g) in groups.iter().enumerate() {
        let y = 16.0 + 16.0 * i as f64;
        let _ = writeln!(s, r#"<circle cx="12" cy="{y}" r="5" fill="{}"/>"#, color(g));
        let _ = writeln!(s, r#"<text x="22" y="{}" font-size="12" font-family="sans-serif">{g}</text>"#, y + 4.0);
    }
    s.push_str("</svg>\n");
    s
}

/// Renders a report; identical inputs give identical bytes.
pub fn render_report(report: &Report, format: ReportFormat) -> Result<String> {
    if report.is_empty() {
        return Err(Error::InvalidArgument("empty report".into()));
    }
    match (format, report) {
        (ReportFormat::Csv, r) => Ok(csv(&as_table(r))),
        (ReportFormat::Json, r) => Ok(json(&as_table(r))),
        (ReportFormat::SvgScatter, Report::Scatter(p)) => Ok(svg(p)),
        (ReportFormat::SvgScatter, Report::Table(_)) => Err(Error::InvalidArgument("an svg scatter needs point data".into())),
    }
}

pub fn emit_report(report: &Report, path: &Path, format: ReportFormat) -> Result<()> {
    let text = render_report(report, format)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
