//! Summary tables and SVG accuracy charts for a results directory.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use datacl_core::metrics::MetricsRecord;
use serde::{Deserialize, Serialize};

/// Per-run accuracy history written next to `metrics.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyFile {
    pub order: Vec<usize>,
    /// `a[q][m]` in percent; `null` where not evaluated.
    pub dynamic: Vec<Vec<Option<f64>>>,
    #[serde(rename = "static")]
    pub static_mode: Vec<Vec<Option<f64>>>,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub name: String,
    pub record: MetricsRecord,
    pub accuracy: AccuracyFile,
}

pub fn load_runs(dir: &Path) -> Result<Vec<RunResult>> {
    let entries = std::fs::read_dir(dir).with_context(|| format!("cannot read results directory {}", dir.display()))?;
    let mut dirs: Vec<PathBuf> = entries.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.is_dir()).collect();
    dirs.sort();
    let mut runs = Vec::new();
    for d in dirs {
        let (m, a) = (d.join("metrics.json"), d.join("accuracy.json"));
        if !(m.is_file() && a.is_file()) {
            continue;
        }
        let record: MetricsRecord = serde_json::from_str(&std::fs::read_to_string(&m)?).with_context(|| format!("parsing {}", m.display()))?;
        let accuracy: AccuracyFile = serde_json::from_str(&std::fs::read_to_string(&a)?).with_context(|| format!("parsing {}", a.display()))?;
        let name = d.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        runs.push(RunResult { name, record, accuracy });
    }
    Ok(runs)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

pub fn summary_table(runs: &[RunResult]) -> (String, String) {
    let mut sorted: Vec<&RunResult> = runs.iter().collect();
    sorted.sort_by(|a, b| (&a.record.method, a.record.seed, &a.name).cmp(&(&b.record.method, b.record.seed, &b.name)));

    let mut csv = format!("run,{}\n", MetricsRecord::CSV_HEADER);
    let mut text = format!("{:<28} {:<12} {:>6} {:>8} {:>8} {:>8}\n", "run", "method", "seed", "FP", "AP", "Forget");
    for r in &sorted {
        let m = &r.record;
        let _ = writeln!(csv, "{},{}", r.name, m.csv_row());
        let _ = writeln!(text, "{:<28} {:<12} {:>6} {:>8.2} {:>8.2} {:>8.2}", r.name, m.method, m.seed, m.fp, m.ap, m.forget);
    }
    let mut methods: Vec<&str> = sorted.iter().map(|r| r.record.method.as_str()).collect();
    methods.dedup();
    text.push('\n');
    let _ = writeln!(text, "{:<12} {:>6} {:>8} {:>8} {:>8}", "method", "runs", "FP", "AP", "Forget");
    for method in methods {
        let rs: Vec<&MetricsRecord> = sorted.iter().map(|r| &r.record).filter(|m| m.method == method).collect();
        let col = |f: fn(&MetricsRecord) -> f64| mean(&rs.iter().map(|m| f(m)).collect::<Vec<_>>());
        let _ = writeln!(
            text,
            "{:<12} {:>6} {:>8.2} {:>8.2} {:>8.2}",
            method,
            rs.len(),
            col(|m| m.fp),
            col(|m| m.ap),
            col(|m| m.forget)
        );
    }
    (text, csv)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

const PALETTE: [&str; 8] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"];

/// Accuracy of every seen task against the number of tasks completed.
pub fn chart_svg(run: &RunResult) -> String {
    let (w, h) = (640.0, 400.0);
    let (left, right, top, bottom) = (60.0, 150.0, 40.0, 50.0);
    let pw = w - left - right;
    let ph = h - top - bottom;
    let n = run.accuracy.dynamic.len().max(1);
    let x_of = |m: usize| left + if n > 1 { pw * m as f64 / (n - 1) as f64 } else { pw / 2.0 };
    let y_of = |acc: f64| top + ph * (1.0 - acc.clamp(0.0, 100.0) / 100.0);

    let mut s = String::new();
    let _ = writeln!(s, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    let _ = writeln!(s, r#"<rect x="0" y="0" width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="22" font-family="sans-serif" font-size="14" text-anchor="middle">{}</text>"#,
        left + pw / 2.0,
        escape(&format!("{} (seed {})", run.name, run.record.seed))
    );
    for tick in [0.0, 25.0, 50.0, 75.0, 100.0] {
        let y = y_of(tick);
        let _ = writeln!(s, r##"<line x1="{left}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="#dddddd"/>"##, left + pw);
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="11" text-anchor="end">{tick}</text>"#,
            left - 6.0,
            y + 4.0
        );
    }
    for m in 0..n {
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="11" text-anchor="middle">{}</text>"#,
            x_of(m),
            top + ph + 16.0,
            m + 1
        );
    }
    let _ = writeln!(
        s,
        r##"<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="#333333"/>"##
    );
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="12" text-anchor="middle">tasks completed</text>"#,
        left + pw / 2.0,
        h - 12.0
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{:.2}" font-family="sans-serif" font-size="12" text-anchor="middle" transform="rotate(-90 16 {:.2})">accuracy (%)</text>"#,
        top + ph / 2.0,
        top + ph / 2.0
    );

    for (q, row) in run.accuracy.dynamic.iter().enumerate() {
        let color = PALETTE[q % PALETTE.len()];
        let pts: Vec<String> = (q..n)
            .filter_map(|m| row.get(m).copied().flatten().map(|a| format!("{:.2},{:.2}", x_of(m), y_of(a))))
            .collect();
        if pts.is_empty() {
            continue;
        }
        let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#, pts.join(" "));
        for p in &pts {
            let (x, y) = p.split_once(',').expect("formatted pair");
            let _ = writeln!(s, r#"<circle cx="{x}" cy="{y}" r="3" fill="{color}"/>"#);
        }
        let task = run.accuracy.order.get(q).copied().unwrap_or(q);
        let ly = top + 14.0 + 16.0 * q as f64;
        let _ = writeln!(
            s,
            r#"<line x1="{:.2}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{color}" stroke-width="2"/>"#,
            left + pw + 12.0,
            left + pw + 30.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="11">task {task}</text>"#,
            left + pw + 36.0,
            ly + 4.0
        );
    }
    let r = &run.record;
    let oy = top + 14.0 + 16.0 * (n as f64 + 1.0);
    for (i, line) in [
        format!("FP {:.1}", r.fp),
        format!("AP {:.1}", r.ap),
        format!("Forget {:.1}", r.forget),
    ]
    .iter()
    .enumerate()
    {
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="12" font-weight="bold">{}</text>"#,
            left + pw + 12.0,
            oy + 16.0 * i as f64,
            escape(line)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Writes `summary.txt`, `summary.csv` and `charts/<run>.svg` into `dir`.
pub fn write_report(dir: &Path) -> Result<usize> {
    let runs = load_runs(dir)?;
    if runs.is_empty() {
        bail!("no completed runs (metrics.json + accuracy.json) under {}", dir.display());
    }
    let (text, csv) = summary_table(&runs);
    std::fs::write(dir.join("summary.txt"), &text)?;
    std::fs::write(dir.join("summary.csv"), csv)?;
    let charts = dir.join("charts");
    std::fs::create_dir_all(&charts)?;
    for run in &runs {
        std::fs::write(charts.join(format!("{}.svg", run.name)), chart_svg(run))?;
    }
    print!("{text}");
    Ok(runs.len())
}
