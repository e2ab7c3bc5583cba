//! Dependency-free SVG figures. Every plotted point carries its source
//! values verbatim in `data-x`/`data-y` attributes.

use std::fmt::Write as _;

use ndarray::Array2;

use crate::conflict::ConflictCurve;
use crate::error::{Error, Result};
use crate::harness::{EpochRecord, TrainLog};

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 170.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 50.0;
const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];

#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if lo == hi {
        (lo - 1.0, hi + 1.0)
    } else {
        (lo, hi)
    }
}

/// Line plot of finite points; non-finite points are left out.
pub fn line_plot_svg(title: &str, x_label: &str, y_label: &str, series: &[Series], meta: &[String]) -> Result<String> {
    let series: Vec<Series> = series
        .iter()
        .map(|s| Series {
            label: s.label.clone(),
            points: s.points.iter().copied().filter(|(x, y)| x.is_finite() && y.is_finite()).collect(),
        })
        .filter(|s| !s.points.is_empty())
        .collect();
    if series.is_empty() {
        return Err(Error::config(format!("empty figure `{title}`: no finite points")));
    }
    let (x0, x1) = range(series.iter().flat_map(|s| s.points.iter().map(|p| p.0)));
    let (y0, y1) = range(series.iter().flat_map(|s| s.points.iter().map(|p| p.1)));
    let pw = WIDTH - LEFT - RIGHT;
    let ph = HEIGHT - TOP - BOTTOM;
    let sx = |x: f64| LEFT + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| TOP + (1.0 - (y - y0) / (y1 - y0)) * ph;

    let mut svg = header(title, meta);
    let _ = writeln!(
        svg,
        r##"<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="#444"/>"##
    );
    for (k, v) in [(0.0, y0), (1.0, y1)] {
        let y = TOP + (1.0 - k) * ph;
        let _ = writeln!(svg, r#"<text x="{}" y="{y}" font-size="11" text-anchor="end">{:.4}</text>"#, LEFT - 6.0, v);
    }
    for (k, v) in [(0.0, x0), (1.0, x1)] {
        let x = LEFT + k * pw;
        let _ = writeln!(svg, r#"<text x="{x}" y="{}" font-size="11" text-anchor="middle">{v}</text>"#, TOP + ph + 16.0);
    }
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" font-size="12" text-anchor="middle">{}</text>"#,
        LEFT + pw / 2.0,
        HEIGHT - 10.0,
        escape(x_label)
    );
    let _ = writeln!(
        svg,
        r#"<text x="16" y="{}" font-size="12" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"#,
        TOP + ph / 2.0,
        TOP + ph / 2.0,
        escape(y_label)
    );
    for (k, s) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let label = escape(&s.label);
        let path: Vec<String> = s.points.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
        let _ = writeln!(svg, r#"<g class="series" data-label="{label}">"#);
        let _ = writeln!(
            svg,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            path.join(" ")
        );
        for &(x, y) in &s.points {
            let _ = writeln!(
                svg,
                r#"<circle cx="{:.2}" cy="{:.2}" r="2.5" fill="{color}" data-x="{x}" data-y="{y}"/>"#,
                sx(x),
                sy(y)
            );
        }
        let _ = writeln!(svg, "</g>");
        let ly = TOP + 12.0 + 18.0 * k as f64;
        let lx = WIDTH - RIGHT + 12.0;
        let _ = writeln!(
            svg,
            r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/>"#,
            lx + 18.0
        );
        let _ = writeln!(svg, r#"<text x="{}" y="{}" font-size="11">{label}</text>"#, lx + 24.0, ly + 4.0);
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

/// Per-level grids of cells shaded by value relative to the global maximum.
pub fn heatmap_svg(title: &str, maps: &[Array2<f64>], meta: &[String]) -> Result<String> {
    if maps.iter().all(|m| m.is_empty()) {
        return Err(Error::config(format!("empty figure `{title}`: no heatmap cells")));
    }
    let peak = maps.iter().flat_map(|m| m.iter()).fold(0.0f64, |a, &b| a.max(b));
    let cell = 16.0;
    let mut svg = header(title, meta);
    let mut x_off = 20.0;
    for (level, m) in maps.iter().enumerate() {
        let _ = writeln!(svg, r#"<g class="level" data-level="{level}">"#);
        let _ = writeln!(svg, r#"<text x="{x_off}" y="{}" font-size="11">level {level}</text>"#, TOP - 6.0);
        for ((r, c), &v) in m.indexed_iter() {
            let shade = if peak > 0.0 { v / peak } else { 0.0 };
            let red = (255.0 * shade).round() as u8;
            let _ = writeln!(
                svg,
                r#"<rect x="{}" y="{}" width="{cell}" height="{cell}" fill="rgb({red},0,{})" data-row="{r}" data-col="{c}" data-value="{v}"/>"#,
                x_off + c as f64 * cell,
                TOP + r as f64 * cell,
                255 - red
            );
        }
        let _ = writeln!(svg, "</g>");
        x_off += m.ncols() as f64 * cell + 30.0;
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

fn header(title: &str, meta: &[String]) -> String {
    let mut svg = format!(
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    );
    svg.push('\n');
    let _ = writeln!(svg, "<metadata>{}</metadata>", escape(&meta.join("; ")));
    let _ = writeln!(svg, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(svg, r#"<text x="{}" y="22" font-size="14" text-anchor="middle">{}</text>"#, WIDTH / 2.0, escape(title));
    svg
}

/// Metrics plotted from training logs: `(file stem, axis label, field)`.
pub const LOG_FIGURES: [(&str, &str, fn(&EpochRecord) -> f64); 4] = [
    ("ap", "AP@0.5", |r| r.ap),
    ("l1_pred_teacher", "L1 to teacher predictions", |r| r.l1_pred_teacher),
    ("l1_cls_gt", "L1 to classification targets", |r| r.l1_cls_gt),
    ("l1_box_gt", "L1 to box targets (px)", |r| r.l1_box_gt),
];

pub fn log_label(log: &TrainLog) -> String {
    format!("{} seed {}", log.config_hash, log.seed)
}

/// One figure per tracked metric with one curve per log. Figures without
/// any finite value are left out; a log without epochs is an error.
pub fn train_log_figures(logs: &[TrainLog]) -> Result<Vec<(String, String)>> {
    if logs.is_empty() {
        return Err(Error::config("empty figure: no training logs"));
    }
    if let Some(empty) = logs.iter().find(|l| l.records.is_empty()) {
        return Err(Error::config(format!("empty figure: log `{}` has no epochs", log_label(empty))));
    }
    let meta: Vec<String> = logs.iter().map(|l| format!("config_hash={} seed={}", l.config_hash, l.seed)).collect();
    let mut out = Vec::new();
    for (stem, label, field) in LOG_FIGURES {
        let series: Vec<Series> = logs
            .iter()
            .map(|l| Series {
                label: log_label(l),
                points: l.records.iter().map(|r| (r.epoch as f64, field(r))).collect(),
            })
            .collect();
        if series.iter().all(|s| s.points.iter().all(|p| !p.1.is_finite())) {
            continue;
        }
        out.push((stem.to_string(), line_plot_svg(label, "epoch", label, &series, &meta)?));
    }
    Ok(out)
}

/// Conflict ratio against threshold, one curve per teacher; undefined
/// ratios are left out.
pub fn conflict_svg(report: &[(String, ConflictCurve)], meta: &[String]) -> Result<String> {
    let series: Vec<Series> = report
        .iter()
        .map(|(name, c)| Series {
            label: name.clone(),
            points: c
                .thresholds
                .iter()
                .zip(&c.ratios)
                .filter_map(|(&t, r)| r.map(|r| (t, r)))
                .collect(),
        })
        .collect();
    line_plot_svg("Target conflict ratio", "threshold", "conflict ratio", &series, meta)
}

/// `(series label, x, y)` of every plotted point, read back from an SVG
/// produced by [`line_plot_svg`].
pub fn read_plotted_points(svg: &str) -> Vec<(String, f64, f64)> {
    let attr = |line: &str, key: &str| -> Option<String> {
        let start = line.find(&format!(r#"{key}=""#))? + key.len() + 2;
        let end = line[start..].find('"')? + start;
        Some(line[start..end].to_string())
    };
    let mut label = String::new();
    let mut out = Vec::new();
    for line in svg.lines() {
        if line.starts_with(r#"<g class="series""#) {
            label = attr(line, "data-label").unwrap_or_default();
        } else if line.starts_with("<circle") {
            if let (Some(x), Some(y)) = (attr(line, "data-x"), attr(line, "data-y")) {
                if let (Ok(x), Ok(y)) = (x.parse(), y.parse()) {
                    out.push((label.clone(), x, y));
                }
            }
        }
    }
    out
}
