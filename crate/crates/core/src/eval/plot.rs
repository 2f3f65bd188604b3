//! Minimal SVG rendering for scatter and line plots.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{CsfError, Result};

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 440.0;
const MARGIN: f64 = 60.0;
const PALETTE: [&str; 12] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22",
    "#17becf", "#393b79", "#ad494a",
];

pub fn class_color(class: usize) -> &'static str {
    PALETTE[class % PALETTE.len()]
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn fit(xs: impl Iterator<Item = f64> + Clone, ys: impl Iterator<Item = f64> + Clone) -> Self {
        let span = |v: &mut dyn Iterator<Item = f64>| {
            let (lo, hi) = v.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x), b.max(x)));
            if !lo.is_finite() {
                (0.0, 1.0)
            } else if hi - lo < 1e-12 {
                (lo - 0.5, hi + 0.5)
            } else {
                let pad = 0.05 * (hi - lo);
                (lo - pad, hi + pad)
            }
        };
        let (x0, x1) = span(&mut xs.clone());
        let (y0, y1) = span(&mut ys.clone());
        Self { x0, x1, y0, y1 }
    }

    fn px(&self, x: f64) -> f64 {
        MARGIN + (x - self.x0) / (self.x1 - self.x0) * (WIDTH - 2.0 * MARGIN)
    }

    fn py(&self, y: f64) -> f64 {
        HEIGHT - MARGIN - (y - self.y0) / (self.y1 - self.y0) * (HEIGHT - 2.0 * MARGIN)
    }
}

fn open_svg(title: &str) -> String {
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" font-family=\"sans-serif\" font-size=\"12\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    );
    let _ = writeln!(s, "<text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-size=\"15\">{}</text>", WIDTH / 2.0, escape(title));
    let _ = writeln!(
        s,
        "<rect x=\"{MARGIN}\" y=\"{MARGIN}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"black\"/>",
        WIDTH - 2.0 * MARGIN,
        HEIGHT - 2.0 * MARGIN
    );
    s
}

fn write_svg(path: &Path, mut svg: String) -> Result<()> {
    svg.push_str("</svg>\n");
    std::fs::write(path, svg).map_err(|e| CsfError::io(path, e))
}

/// Scatter of 2-D points coloured by class.
pub fn scatter_svg(path: &Path, title: &str, points: &[(f64, f64)], classes: &[usize]) -> Result<()> {
    let frame = Frame::fit(points.iter().map(|p| p.0), points.iter().map(|p| p.1));
    let mut svg = open_svg(title);
    for (&(x, y), &c) in points.iter().zip(classes) {
        let _ = writeln!(
            svg,
            "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"2.5\" fill=\"{}\" fill-opacity=\"0.8\"/>",
            frame.px(x),
            frame.py(y),
            class_color(c)
        );
    }
    let mut seen: Vec<usize> = classes.to_vec();
    seen.sort_unstable();
    seen.dedup();
    for (row, c) in seen.iter().enumerate() {
        let y = MARGIN + 14.0 * row as f64;
        let _ = writeln!(
            svg,
            "<circle cx=\"{}\" cy=\"{y}\" r=\"4\" fill=\"{}\"/><text x=\"{}\" y=\"{}\">{c}</text>",
            WIDTH - MARGIN + 12.0,
            class_color(*c),
            WIDTH - MARGIN + 20.0,
            y + 4.0
        );
    }
    write_svg(path, svg)
}

/// One named polyline per series over shared categorical x positions.
pub struct LineSeries {
    pub name: String,
    pub values: Vec<f64>,
}

/// Line plot with one tick per entry of `x_labels`.
pub fn line_svg(path: &Path, title: &str, x_labels: &[String], y_label: &str, series: &[LineSeries]) -> Result<()> {
    let n = x_labels.len();
    let frame = Frame::fit(
        (0..n).map(|i| i as f64),
        series.iter().flat_map(|s| s.values.iter().copied()).chain([0.0, 1.0]),
    );
    let mut svg = open_svg(title);
    for (i, label) in x_labels.iter().enumerate() {
        let x = frame.px(i as f64);
        let _ = writeln!(
            svg,
            "<line class=\"xtick\" x1=\"{x:.2}\" y1=\"{}\" x2=\"{x:.2}\" y2=\"{}\" stroke=\"black\"/><text x=\"{x:.2}\" y=\"{}\" text-anchor=\"middle\">{}</text>",
            HEIGHT - MARGIN,
            HEIGHT - MARGIN + 5.0,
            HEIGHT - MARGIN + 18.0,
            escape(label)
        );
    }
    for t in 0..=4 {
        let v = frame.y0 + (frame.y1 - frame.y0) * t as f64 / 4.0;
        let y = frame.py(v);
        let _ = writeln!(
            svg,
            "<text x=\"{}\" y=\"{:.2}\" text-anchor=\"end\">{v:.2}</text>",
            MARGIN - 6.0,
            y + 4.0
        );
    }
    let _ = writeln!(
        svg,
        "<text x=\"16\" y=\"{}\" transform=\"rotate(-90 16 {})\" text-anchor=\"middle\">{}</text>",
        HEIGHT / 2.0,
        HEIGHT / 2.0,
        escape(y_label)
    );
    for (si, s) in series.iter().enumerate() {
        let pts: Vec<String> = s
            .values
            .iter()
            .enumerate()
            .map(|(i, v)| format!("{:.2},{:.2}", frame.px(i as f64), frame.py(*v)))
            .collect();
        let color = class_color(si);
        let _ = writeln!(
            svg,
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"2\"/>",
            pts.join(" ")
        );
        let y = MARGIN + 10.0 + 16.0 * si as f64;
        let _ = writeln!(
            svg,
            "<line x1=\"{}\" y1=\"{y}\" x2=\"{}\" y2=\"{y}\" stroke=\"{color}\" stroke-width=\"2\"/><text x=\"{}\" y=\"{}\">{}</text>",
            MARGIN + 8.0,
            MARGIN + 28.0,
            MARGIN + 32.0,
            y + 4.0,
            escape(&s.name)
        );
    }
    write_svg(path, svg)
}
