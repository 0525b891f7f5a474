use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One trained-and-evaluated grid cell. Field order is the CSV header.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub cell: String,
    pub objective: String,
    pub demos: usize,
    pub annotation_fraction: f64,
    pub mask_mode: String,
    pub seed: u64,
    pub episodes: usize,
    pub success_rate: f64,
    pub token_accuracy: Option<f64>,
    pub bleu: Option<f64>,
    pub lang_nll: Option<f64>,
    pub success_d1: Option<f64>,
    pub success_d2: Option<f64>,
    pub success_d3: Option<f64>,
    pub success_d4: Option<f64>,
    pub success_d5: Option<f64>,
    pub config_hash: String,
}

pub const REPORT_HEADER: [&str; 17] = [
    "cell",
    "objective",
    "demos",
    "annotation_fraction",
    "mask_mode",
    "seed",
    "episodes",
    "success_rate",
    "token_accuracy",
    "bleu",
    "lang_nll",
    "success_d1",
    "success_d2",
    "success_d3",
    "success_d4",
    "success_d5",
    "config_hash",
];

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<ReportRow>,
}

impl EvalReport {
    pub fn to_csv_string(&self) -> Result<String> {
        if self.rows.is_empty() {
            return Err(Error::Empty("report"));
        }
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(r)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let text = self.to_csv_string()?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn from_csv_str(text: &str) -> Result<Self> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
        if header != REPORT_HEADER {
            return Err(Error::Config(format!("unexpected report header {header:?}")));
        }
        let rows = r.deserialize().collect::<std::result::Result<Vec<ReportRow>, _>>()?;
        Ok(Self { rows })
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        Self::from_csv_str(&std::fs::read_to_string(path)?)
    }
}

fn field(row: &ReportRow, key: &str) -> Result<serde_json::Value> {
    let v = serde_json::to_value(row)?;
    v.get(key)
        .cloned()
        .ok_or_else(|| Error::Config(format!("report has no column `{key}`")))
}

fn label(v: &serde_json::Value) -> String {
    match v {
        serde_json::Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (m, var.sqrt())
}

const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

/// Mean of `y_key` against `x_key`, one line per `series_key` value, with
/// error bars of one sample standard deviation across rows sharing a point.
/// Rows whose `y_key` is empty are skipped.
pub fn render_svg(report: &EvalReport, x_key: &str, y_key: &str, series_key: &str) -> Result<String> {
    if report.rows.is_empty() {
        return Err(Error::Empty("report"));
    }
    let mut series: BTreeMap<String, BTreeMap<u64, (f64, Vec<f64>)>> = BTreeMap::new();
    let mut xs_all: Vec<f64> = Vec::new();
    for row in &report.rows {
        let x = field(row, x_key)?
            .as_f64()
            .ok_or_else(|| Error::Config(format!("column `{x_key}` is not numeric")))?;
        let y = field(row, y_key)?;
        let s = label(&field(row, series_key)?);
        if y.is_null() {
            continue;
        }
        let y = y
            .as_f64()
            .ok_or_else(|| Error::Config(format!("column `{y_key}` is not numeric")))?;
        series
            .entry(s)
            .or_default()
            .entry(x.to_bits())
            .or_insert((x, Vec::new()))
            .1
            .push(y);
        if !xs_all.contains(&x) {
            xs_all.push(x);
        }
    }
    if xs_all.len() < 2 {
        return Err(Error::DegeneratePlot(xs_all.len()));
    }
    let (x0, x1) = xs_all
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    let unit = matches!(y_key, "success_rate" | "token_accuracy" | "bleu") || y_key.starts_with("success_d");
    let (y0, y1) = if unit {
        (0.0, 1.0)
    } else {
        let vals = series
            .values()
            .flat_map(|m| m.values().flat_map(|(_, v)| v.iter().copied()));
        let (a, b) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), y| (a.min(y), b.max(y)));
        if a == b {
            (a - 0.5, b + 0.5)
        } else {
            (a, b)
        }
    };
    let (w, h, l, r, t, b) = (640.0, 420.0, 70.0, 160.0, 30.0, 60.0);
    let px = |x: f64| l + (x - x0) / (x1 - x0) * (w - l - r);
    let py = |y: f64| h - b - (y - y0) / (y1 - y0) * (h - t - b);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<line x1="{l}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#,
        h - b,
        w - r,
        h - b
    );
    let _ = writeln!(s, r#"<line x1="{l}" y1="{t}" x2="{l}" y2="{}" stroke="black"/>"#, h - b);
    let mut ticks = xs_all.clone();
    ticks.sort_by(f64::total_cmp);
    for x in &ticks {
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{}" text-anchor="middle">{}</text>"#,
            px(*x),
            h - b + 16.0,
            x
        );
    }
    for k in 0..=4 {
        let y = y0 + (y1 - y0) * k as f64 / 4.0;
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{:.2}" text-anchor="end">{:.3}</text>"#,
            l - 6.0,
            py(y) + 4.0,
            y
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{}" text-anchor="middle">{x_key}</text>"#,
        (l + w - r) / 2.0,
        h - 20.0
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{:.2}" text-anchor="middle" transform="rotate(-90 16 {:.2})">{y_key}</text>"#,
        (t + h - b) / 2.0,
        (t + h - b) / 2.0
    );
    for (i, (name, points)) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let mut pts: Vec<(f64, f64, f64)> = points
            .values()
            .map(|(x, ys)| {
                let (m, sd) = mean_std(ys);
                (*x, m, sd)
            })
            .collect();
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        let line: Vec<String> = pts
            .iter()
            .map(|&(x, m, _)| format!("{:.2},{:.2}", px(x), py(m)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            line.join(" ")
        );
        for &(x, m, sd) in &pts {
            let _ = writeln!(
                s,
                r#"<line x1="{0:.2}" y1="{1:.2}" x2="{0:.2}" y2="{2:.2}" stroke="{color}"/>"#,
                px(x),
                py(m - sd),
                py(m + sd)
            );
            let _ = writeln!(
                s,
                r#"<circle cx="{:.2}" cy="{:.2}" r="3.5" fill="{color}"/>"#,
                px(x),
                py(m)
            );
        }
        let ly = t + 10.0 + 18.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<rect x="{}" y="{:.2}" width="12" height="12" fill="{color}"/>"#,
            w - r + 16.0,
            ly - 10.0
        );
        let _ = writeln!(s, r#"<text x="{}" y="{:.2}">{}</text>"#, w - r + 34.0, ly, escape(name));
    }
    s.push_str("</svg>\n");
    Ok(s)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

pub fn write_svg(report: &EvalReport, x_key: &str, y_key: &str, series_key: &str, path: &Path) -> Result<()> {
    let svg = render_svg(report, x_key, y_key, series_key)?;
    std::fs::write(path, svg)?;
    Ok(())
}
