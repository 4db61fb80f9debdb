//! Table and plot-data emission: CSV (RFC 4180), JSON, long-format plot CSV,
//! and a minimal SVG line chart.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    Csv,
    Json,
}

impl OutputFormat {
    pub fn extension(self) -> &'static str {
        match self {
            OutputFormat::Csv => "csv",
            OutputFormat::Json => "json",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    Num(f64),
    Int(i64),
    Text(String),
}

impl From<f64> for Value {
    fn from(v: f64) -> Self {
        Value::Num(v)
    }
}

impl From<i64> for Value {
    fn from(v: i64) -> Self {
        Value::Int(v)
    }
}

impl From<usize> for Value {
    fn from(v: usize) -> Self {
        Value::Int(v as i64)
    }
}

impl From<&str> for Value {
    fn from(v: &str) -> Self {
        Value::Text(v.to_string())
    }
}

impl From<String> for Value {
    fn from(v: String) -> Self {
        Value::Text(v)
    }
}

/// Column-ordered table; the order of `columns` is preserved in every format.
#[derive(Debug, Clone)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Value>>,
}

impl Table {
    pub fn new(columns: &[&str]) -> Self {
        Table {
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<Value>) -> Result<()> {
        if row.len() != self.columns.len() {
            return Err(Error::Shape(format!(
                "row has {} fields but table has {} columns",
                row.len(),
                self.columns.len()
            )));
        }
        self.rows.push(row);
        Ok(())
    }
}

/// 17 significant digits, locale-independent, stable across reruns.
pub fn format_float(v: f64) -> String {
    format!("{v:.16e}")
}

fn csv_quote(s: &str) -> String {
    if s.contains(',') || s.contains('"') || s.contains('\n') || s.contains('\r') {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn csv_field(v: &Value) -> String {
    match v {
        Value::Num(x) if x.is_nan() => String::new(),
        Value::Num(x) => format_float(*x),
        Value::Int(i) => i.to_string(),
        Value::Text(s) => csv_quote(s),
    }
}

fn json_string(s: &str) -> String {
    let mut out = String::with_capacity(s.len() + 2);
    out.push('"');
    for ch in s.chars() {
        match ch {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            '\t' => out.push_str("\\t"),
            c if (c as u32) < 0x20 => {
                let _ = write!(out, "\\u{:04x}", c as u32);
            }
            c => out.push(c),
        }
    }
    out.push('"');
    out
}

fn json_field(v: &Value) -> String {
    match v {
        Value::Num(x) if x.is_nan() => "null".to_string(),
        Value::Num(x) => format_float(*x),
        Value::Int(i) => i.to_string(),
        Value::Text(s) => json_string(s),
    }
}

pub fn render_table(table: &Table, format: OutputFormat) -> String {
    match format {
        OutputFormat::Csv => {
            let mut out = String::new();
            out.push_str(
                &table
                    .columns
                    .iter()
                    .map(|c| csv_quote(c))
                    .collect::<Vec<_>>()
                    .join(","),
            );
            out.push_str("\r\n");
            for row in &table.rows {
                out.push_str(&row.iter().map(csv_field).collect::<Vec<_>>().join(","));
                out.push_str("\r\n");
            }
            out
        }
        OutputFormat::Json => {
            let mut out = String::from("[");
            for (i, row) in table.rows.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                out.push_str("\n  {");
                for (j, (col, v)) in table.columns.iter().zip(row).enumerate() {
                    if j > 0 {
                        out.push_str(", ");
                    }
                    let _ = write!(out, "{}: {}", json_string(col), json_field(v));
                }
                out.push('}');
            }
            out.push_str("\n]\n");
            out
        }
    }
}

pub fn write_text(path: &Path, content: &str) -> Result<()> {
    std::fs::write(path, content).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })
}

pub fn write_table(path: &Path, table: &Table, format: OutputFormat) -> Result<()> {
    write_text(path, &render_table(table, format))
}

/// A set of per-step series sharing a common step axis; legend order follows
/// `names`.
#[derive(Debug, Clone)]
pub struct Track {
    pub steps: Vec<f64>,
    pub names: Vec<String>,
    pub values: Vec<Vec<f64>>,
}

impl Track {
    pub fn new(steps: Vec<f64>, names: &[&str], values: Vec<Vec<f64>>) -> Result<Self> {
        if steps.is_empty() {
            return Err(Error::InvalidInput("track must be nonempty".into()));
        }
        if names.len() != values.len() {
            return Err(Error::Shape(format!(
                "{} names for {} series",
                names.len(),
                values.len()
            )));
        }
        for v in &values {
            if v.len() != steps.len() {
                return Err(Error::Shape(format!(
                    "series of length {} on a {}-step axis",
                    v.len(),
                    steps.len()
                )));
            }
        }
        Ok(Track {
            steps,
            names: names.iter().map(|n| n.to_string()).collect(),
            values,
        })
    }
}

/// Long-format CSV (step, series_name, value), one row per sample.
pub fn render_plotdata(track: &Track) -> String {
    let mut out = String::from("step,series_name,value\r\n");
    for (name, series) in track.names.iter().zip(&track.values) {
        for (s, v) in track.steps.iter().zip(series) {
            let field = if v.is_nan() {
                String::new()
            } else {
                format_float(*v)
            };
            let _ = write!(out, "{},{},{}\r\n", format_float(*s), csv_quote(name), field);
        }
    }
    out
}

/// Tick positions at "nice" round numbers covering [lo, hi].
fn nice_ticks(lo: f64, hi: f64, target: usize) -> Vec<f64> {
    let span = (hi - lo).abs().max(1e-300);
    let raw = span / target.max(1) as f64;
    let mag = 10f64.powf(raw.log10().floor());
    let norm = raw / mag;
    let step = if norm <= 1.0 {
        1.0
    } else if norm <= 2.0 {
        2.0
    } else if norm <= 5.0 {
        5.0
    } else {
        10.0
    } * mag;
    let first = (lo / step).ceil() * step;
    let mut ticks = Vec::new();
    let mut t = first;
    while t <= hi + step * 1e-9 {
        ticks.push(if t.abs() < step * 1e-9 { 0.0 } else { t });
        t += step;
    }
    ticks
}

const SVG_W: f64 = 800.0;
const SVG_H: f64 = 500.0;
const MARGIN_L: f64 = 70.0;
const MARGIN_R: f64 = 140.0;
const MARGIN_T: f64 = 30.0;
const MARGIN_B: f64 = 50.0;

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

/// Minimal fixed-viewport line chart: one polyline per series, ticks at round
/// numbers, legend in input order.
pub fn render_svg(track: &Track) -> String {
    let finite: Vec<f64> = track
        .values
        .iter()
        .flatten()
        .copied()
        .filter(|v| v.is_finite())
        .collect();
    let (mut vmin, mut vmax) = finite
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    if !vmin.is_finite() {
        vmin = 0.0;
        vmax = 1.0;
    }
    if (vmax - vmin).abs() < 1e-300 {
        vmin -= 0.5;
        vmax += 0.5;
    }
    let smin = track.steps.iter().cloned().fold(f64::INFINITY, f64::min);
    let smax = track.steps.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sspan = (smax - smin).max(1e-300);
    let vspan = vmax - vmin;

    let px = |s: f64| MARGIN_L + (s - smin) / sspan * (SVG_W - MARGIN_L - MARGIN_R);
    let py = |v: f64| SVG_H - MARGIN_B - (v - vmin) / vspan * (SVG_H - MARGIN_T - MARGIN_B);

    let mut out = String::new();
    let _ = write!(
        out,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{SVG_W}\" height=\"{SVG_H}\" viewBox=\"0 0 {SVG_W} {SVG_H}\">\n"
    );
    let _ = write!(
        out,
        "<rect x=\"{MARGIN_L}\" y=\"{MARGIN_T}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"#333\"/>\n",
        SVG_W - MARGIN_L - MARGIN_R,
        SVG_H - MARGIN_T - MARGIN_B
    );
    for t in nice_ticks(smin, smax, 8) {
        let x = px(t);
        let _ = write!(
            out,
            "<line x1=\"{x:.1}\" y1=\"{}\" x2=\"{x:.1}\" y2=\"{}\" stroke=\"#999\"/>\n<text x=\"{x:.1}\" y=\"{}\" font-size=\"11\" text-anchor=\"middle\">{t}</text>\n",
            SVG_H - MARGIN_B,
            SVG_H - MARGIN_B + 5.0,
            SVG_H - MARGIN_B + 18.0
        );
    }
    for t in nice_ticks(vmin, vmax, 6) {
        let y = py(t);
        let _ = write!(
            out,
            "<line x1=\"{}\" y1=\"{y:.1}\" x2=\"{}\" y2=\"{y:.1}\" stroke=\"#999\"/>\n<text x=\"{}\" y=\"{:.1}\" font-size=\"11\" text-anchor=\"end\">{t}</text>\n",
            MARGIN_L - 5.0,
            MARGIN_L,
            MARGIN_L - 8.0,
            y + 4.0
        );
    }
    for (i, (name, series)) in track.names.iter().zip(&track.values).enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let mut points = String::new();
        for (s, v) in track.steps.iter().zip(series) {
            if v.is_finite() {
                let _ = write!(points, "{:.2},{:.2} ", px(*s), py(*v));
            }
        }
        let _ = write!(
            out,
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"/>\n",
            points.trim_end()
        );
        let ly = MARGIN_T + 15.0 + 18.0 * i as f64;
        let _ = write!(
            out,
            "<line x1=\"{}\" y1=\"{ly}\" x2=\"{}\" y2=\"{ly}\" stroke=\"{color}\" stroke-width=\"2\"/>\n<text x=\"{}\" y=\"{}\" font-size=\"12\">{}</text>\n",
            SVG_W - MARGIN_R + 10.0,
            SVG_W - MARGIN_R + 35.0,
            SVG_W - MARGIN_R + 40.0,
            ly + 4.0,
            name
        );
    }
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_table() -> Table {
        let mut t = Table::new(&["name", "value", "count"]);
        t.push(vec!["plain".into(), Value::Num(1.5), 3usize.into()])
            .unwrap();
        t.push(vec![
            "needs,\"quoting\"".into(),
            Value::Num(f64::NAN),
            (-2i64).into(),
        ])
        .unwrap();
        t
    }

    #[test]
    fn empty_table_is_header_only() {
        let t = Table::new(&["a", "b"]);
        assert_eq!(render_table(&t, OutputFormat::Csv), "a,b\r\n");
        assert_eq!(render_table(&t, OutputFormat::Json), "[\n]\n");
    }

    #[test]
    fn csv_round_trips_values() {
        let t = sample_table();
        let csv = render_table(&t, OutputFormat::Csv);
        let mut lines = csv.split("\r\n");
        assert_eq!(lines.next().unwrap(), "name,value,count");
        let row = lines.next().unwrap();
        let fields: Vec<&str> = row.split(',').collect();
        assert_eq!(fields[0], "plain");
        assert_eq!(fields[1].parse::<f64>().unwrap(), 1.5);
        assert_eq!(fields[2], "3");
    }

    #[test]
    fn csv_quotes_and_nan_policy() {
        let t = sample_table();
        let csv = render_table(&t, OutputFormat::Csv);
        let row2 = csv.split("\r\n").nth(2).unwrap();
        assert_eq!(row2, "\"needs,\"\"quoting\"\"\",,-2");
    }

    #[test]
    fn json_nan_is_null_and_order_preserved() {
        let t = sample_table();
        let json = render_table(&t, OutputFormat::Json);
        let parsed: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert_eq!(parsed[1]["value"], serde_json::Value::Null);
        assert_eq!(parsed[0]["count"], serde_json::json!(3));
        let name_pos = json.find("\"name\"").unwrap();
        let value_pos = json.find("\"value\"").unwrap();
        assert!(name_pos < value_pos);
    }

    #[test]
    fn float_format_round_trips_exactly() {
        for v in [1.0 / 3.0, -2.5e-17, 1.23456789012345e300, 0.1 + 0.2] {
            assert_eq!(format_float(v).parse::<f64>().unwrap(), v);
        }
    }

    #[test]
    fn plotdata_long_format() {
        let track = Track::new(
            vec![0.0, 1.0],
            &["a", "b"],
            vec![vec![1.0, 2.0], vec![3.0, f64::NAN]],
        )
        .unwrap();
        let csv = render_plotdata(&track);
        let lines: Vec<&str> = csv.trim_end().split("\r\n").collect();
        assert_eq!(lines[0], "step,series_name,value");
        assert_eq!(lines.len(), 5);
        assert!(lines[1].contains(",a,"));
        assert!(lines[4].ends_with(",b,"));
    }

    #[test]
    fn constant_track_svg_is_horizontal() {
        let track = Track::new(vec![0.0, 1.0, 2.0], &["c"], vec![vec![4.0; 3]]).unwrap();
        let svg = render_svg(&track);
        let poly = svg
            .lines()
            .find(|l| l.starts_with("<polyline"))
            .unwrap();
        let points: Vec<&str> = poly
            .split('"')
            .nth(1)
            .unwrap()
            .split_whitespace()
            .collect();
        let ys: Vec<&str> = points.iter().map(|p| p.split(',').nth(1).unwrap()).collect();
        assert!(ys.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn svg_legend_order_matches_input() {
        let track = Track::new(
            vec![0.0, 1.0],
            &["first", "second"],
            vec![vec![0.0, 1.0], vec![1.0, 0.0]],
        )
        .unwrap();
        let svg = render_svg(&track);
        assert!(svg.find(">first<").unwrap() < svg.find(">second<").unwrap());
        assert_eq!(svg.matches("<polyline").count(), 2);
    }

    #[test]
    fn ticks_are_round() {
        let ticks = nice_ticks(0.03, 9.7, 8);
        assert!(ticks.iter().all(|t| (t / 1.0 - (t / 1.0).round()).abs() < 1e-9));
        assert!(ticks.len() >= 4);
    }

    #[test]
    fn table_rejects_ragged_row() {
        let mut t = Table::new(&["a"]);
        assert!(t.push(vec![Value::Num(1.0), Value::Num(2.0)]).is_err());
    }
}
