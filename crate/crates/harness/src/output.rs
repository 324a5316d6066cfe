//! Run artifacts: metrics CSV, label-indexed matrix CSV, SVG charts and the
//! per-run output directory.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use trady_core::network::Parameters;

use crate::checkpoint;
use crate::error::{HarnessError, Result};
use crate::experiment::{EpochRow, RunRecord};

pub const METRICS_HEADER: &str = "epoch,lr,train_loss,train_acc,test_acc,slots_used,budget,weight_sparsity,activation_sparsity,wgrad_macs,macs_saved_fraction,alpha_hat";

fn csv_err(path: &Path, e: impl std::fmt::Display) -> HarnessError {
    HarnessError::Csv {
        path: path.to_path_buf(),
        reason: e.to_string(),
    }
}

pub fn metrics_csv_bytes(rows: &[EpochRow]) -> Vec<u8> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    for r in rows {
        w.serialize(r).expect("serializing into memory cannot fail");
    }
    let body = w.into_inner().expect("in-memory writer");
    let mut out = Vec::with_capacity(METRICS_HEADER.len() + 1 + body.len());
    out.extend_from_slice(METRICS_HEADER.as_bytes());
    out.push(b'\n');
    out.extend_from_slice(&body);
    out
}

pub fn write_metrics_csv(rows: &[EpochRow], path: &Path) -> Result<()> {
    std::fs::write(path, metrics_csv_bytes(rows)).map_err(|e| HarnessError::io(path, e))
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<EpochRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let header = r.headers().map_err(|e| csv_err(path, e))?;
    let header: Vec<&str> = header.iter().collect();
    if header.join(",") != METRICS_HEADER {
        return Err(csv_err(path, format!("unexpected header {:?}", header.join(","))));
    }
    r.deserialize().map(|row| row.map_err(|e| csv_err(path, e))).collect()
}

/// Square matrix with a header row and a first column of run labels.
pub fn write_matrix_csv(labels: &[String], matrix: &[Vec<f64>], path: &Path) -> Result<()> {
    if matrix.len() != labels.len() || matrix.iter().any(|row| row.len() != labels.len()) {
        return Err(csv_err(path, format!("matrix is not {0}x{0}", labels.len())));
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut header = vec![String::new()];
    header.extend(labels.iter().cloned());
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    for (label, row) in labels.iter().zip(matrix) {
        let mut rec = vec![label.clone()];
        rec.extend(row.iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| HarnessError::io(path, e))
}

pub fn read_matrix_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| csv_err(path, e))?;
    let mut records = r.records();
    let header = records
        .next()
        .ok_or_else(|| csv_err(path, "empty file"))?
        .map_err(|e| csv_err(path, e))?;
    let labels: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
    let mut matrix = Vec::new();
    for (i, rec) in records.enumerate() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        if rec.get(0) != labels.get(i).map(String::as_str) {
            return Err(csv_err(path, format!("row {i} label does not match the header")));
        }
        let row = rec
            .iter()
            .skip(1)
            .map(|v| v.parse::<f64>().map_err(|e| csv_err(path, format!("row {i}: {e}"))))
            .collect::<Result<Vec<f64>>>()?;
        matrix.push(row);
    }
    if matrix.len() != labels.len() {
        return Err(csv_err(path, "matrix is not square"));
    }
    Ok((labels, matrix))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        (0.0, 1.0)
    } else if lo == hi {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

/// Line chart as a standalone SVG document.
pub fn render_svg_curves(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let (w, h) = (640.0, 420.0);
    let (left, right, top, bottom) = (64.0, 160.0, 40.0, 48.0);
    let (pw, ph) = (w - left - right, h - top - bottom);
    let (x0, x1) = bounds(series.iter().flat_map(|s| s.points.iter().map(|p| p.0)));
    let (y0, y1) = bounds(series.iter().flat_map(|s| s.points.iter().map(|p| p.1)));
    let sx = |x: f64| left + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| top + ph - (y - y0) / (y1 - y0) * ph;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="24" text-anchor="middle" font-size="15">{}</text>"#, left + pw / 2.0, escape(title));
    let _ = writeln!(
        s,
        r#"<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
    );
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let (xv, yv) = (x0 + f * (x1 - x0), y0 + f * (y1 - y0));
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            sx(xv),
            top + ph + 16.0,
            tick(xv)
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#,
            left - 6.0,
            sy(yv) + 4.0,
            tick(yv)
        );
        let _ = writeln!(
            s,
            r##"<line x1="{left}" x2="{:.1}" y1="{:.1}" y2="{:.1}" stroke="#ddd"/>"##,
            left + pw,
            sy(yv),
            sy(yv)
        );
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, left + pw / 2.0, h - 10.0, escape(x_label));
    let _ = writeln!(
        s,
        r#"<text x="16" y="{0}" text-anchor="middle" transform="rotate(-90 16 {0})">{1}</text>"#,
        top + ph / 2.0,
        escape(y_label)
    );
    for (i, series) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = series
            .points
            .iter()
            .filter(|p| p.0.is_finite() && p.1.is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            pts.join(" ")
        );
        let ly = top + 12.0 + 18.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<line x1="{0}" x2="{1}" y1="{ly}" y2="{ly}" stroke="{color}" stroke-width="2"/><text x="{2}" y="{3}">{4}</text>"#,
            left + pw + 10.0,
            left + pw + 30.0,
            left + pw + 36.0,
            ly + 4.0,
            escape(&series.name)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Heat map of a square matrix with run labels, values mapped onto [lo, hi].
pub fn render_svg_matrix(title: &str, labels: &[String], matrix: &[Vec<f64>], lo: f64, hi: f64) -> String {
    let n = labels.len();
    let cell = 28.0;
    let margin = 140.0;
    let size = margin + cell * n as f64 + 20.0;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" font-family="sans-serif" font-size="10">"#
    );
    let _ = writeln!(s, r#"<rect width="{size}" height="{size}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="16" text-anchor="middle" font-size="13">{}</text>"#, size / 2.0, escape(title));
    for (i, row) in matrix.iter().enumerate() {
        let y = margin + cell * i as f64;
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#, margin - 4.0, y + cell / 2.0 + 3.0, escape(&labels[i]));
        for (j, &v) in row.iter().enumerate() {
            let x = margin + cell * j as f64;
            let t = if hi > lo { ((v - lo) / (hi - lo)).clamp(0.0, 1.0) } else { 0.5 };
            let shade = (255.0 * (1.0 - t)).round() as u8;
            let _ = writeln!(
                s,
                r#"<rect x="{x}" y="{y}" width="{cell}" height="{cell}" fill="rgb({shade},{shade},255)"><title>{:.3}</title></rect>"#,
                v
            );
        }
    }
    for (j, label) in labels.iter().enumerate() {
        let x = margin + cell * j as f64 + cell / 2.0;
        let _ = writeln!(
            s,
            r#"<text x="{x}" y="{0}" text-anchor="start" transform="rotate(-60 {x} {0})">{1}</text>"#,
            margin - 4.0,
            escape(label)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn tick(v: f64) -> String {
    if v == 0.0 || (v.abs() >= 0.01 && v.abs() < 1e5) {
        format!("{v:.3}").trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        format!("{v:.2e}")
    }
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| HarnessError::io(path, e))
}

/// One JSON object per epoch: `{"epoch": e, "mask": {...}}`.
pub fn write_mask_audit(record: &RunRecord, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    for (epoch, mask) in record.masks.iter().enumerate() {
        let line = serde_json::json!({ "epoch": epoch, "mask": mask.to_audit_json() });
        writeln!(buf, "{line}").map_err(|e| HarnessError::io(path, e))?;
    }
    std::fs::write(path, buf).map_err(|e| HarnessError::io(path, e))
}

pub fn read_mask_audit(path: &Path, channels: &[usize]) -> Result<Vec<trady_core::SelectionMask>> {
    let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let v: serde_json::Value = serde_json::from_str(l).map_err(|e| HarnessError::json(path, e))?;
            Ok(trady_core::SelectionMask::from_audit_json(&v["mask"], channels)?)
        })
        .collect()
}

pub fn write_json<T: serde::Serialize>(value: &T, path: &Path) -> Result<()> {
    let bytes = serde_json::to_vec_pretty(value).map_err(|e| HarnessError::json(path, e))?;
    std::fs::write(path, bytes).map_err(|e| HarnessError::io(path, e))
}

pub fn read_record(path: &Path) -> Result<RunRecord> {
    let bytes = std::fs::read(path).map_err(|e| HarnessError::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| HarnessError::json(path, e))
}

/// Writes `metrics.csv`, `record.json`, `masks.jsonl`, `model.json`/`model.bin`
/// and `curves.svg` into `dir`.
pub fn write_run(dir: &Path, record: &RunRecord, params: &Parameters) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    write_metrics_csv(&record.rows, &dir.join("metrics.csv"))?;
    write_json(record, &dir.join("record.json"))?;
    write_mask_audit(record, &dir.join("masks.jsonl"))?;
    checkpoint::save(params, &dir.join("model.json"))?;
    let curve = |name: &str, f: fn(&EpochRow) -> f64| Series {
        name: name.into(),
        points: record.rows.iter().map(|r| (r.epoch as f64, f(r))).collect(),
    };
    let svg = render_svg_curves(
        &format!("{} ({}, seed {})", record.label, record.strategy, record.seed),
        "epoch",
        "accuracy",
        &[curve("train", |r| r.train_acc), curve("test", |r| r.test_acc)],
    );
    write_text(&dir.join("curves.svg"), &svg)
}
