//! Self-contained SVG scatter and line plots with byte-stable output.

use std::fmt::Write as _;

use crate::error::{Error, Result};

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 480.0;
const MARGIN_L: f64 = 64.0;
const MARGIN_R: f64 = 150.0;
const MARGIN_T: f64 = 40.0;
const MARGIN_B: f64 = 56.0;
const TICKS: usize = 5;

pub const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

pub fn color(i: usize) -> &'static str {
    PALETTE[i % PALETTE.len()]
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScatterPlot {
    pub title: String,
    /// `(x, y, group)`; groups index `groups`.
    pub points: Vec<(f64, f64, usize)>,
    pub groups: Vec<String>,
    /// Highlighted reference positions (for example mode means), one per group.
    pub markers: Vec<(f64, f64, usize)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinePlot {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<Series>,
}

struct Frame {
    x: (f64, f64),
    y: (f64, f64),
}

impl Frame {
    fn new(xs: impl Iterator<Item = f64> + Clone, ys: impl Iterator<Item = f64> + Clone) -> Self {
        let range = |it: &mut dyn Iterator<Item = f64>| {
            let (lo, hi) = it.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
            let pad = if hi > lo { 0.05 * (hi - lo) } else { 0.5 };
            (lo - pad, hi + pad)
        };
        Self {
            x: range(&mut xs.clone()),
            y: range(&mut ys.clone()),
        }
    }

    fn px(&self, x: f64) -> f64 {
        MARGIN_L + (x - self.x.0) / (self.x.1 - self.x.0) * (WIDTH - MARGIN_L - MARGIN_R)
    }

    fn py(&self, y: f64) -> f64 {
        HEIGHT - MARGIN_B - (y - self.y.0) / (self.y.1 - self.y.0) * (HEIGHT - MARGIN_T - MARGIN_B)
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn check_finite<'a>(values: impl Iterator<Item = &'a f64>) -> Result<()> {
    for v in values {
        if !v.is_finite() {
            return Err(Error::contract("plot coordinates must be finite"));
        }
    }
    Ok(())
}

fn header(out: &mut String, title: &str) {
    let _ = writeln!(
        out,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" viewBox=\"0 0 {WIDTH} {HEIGHT}\" font-family=\"sans-serif\" font-size=\"12\">"
    );
    let _ = writeln!(out, "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>");
    let _ = writeln!(
        out,
        "<text x=\"{:.1}\" y=\"24\" text-anchor=\"middle\" font-size=\"15\">{}</text>",
        (WIDTH - MARGIN_R + MARGIN_L) / 2.0,
        escape(title)
    );
}

fn axes(out: &mut String, f: &Frame, x_label: &str, y_label: &str) {
    let (x0, x1) = (MARGIN_L, WIDTH - MARGIN_R);
    let (y0, y1) = (HEIGHT - MARGIN_B, MARGIN_T);
    let _ = writeln!(
        out,
        "<rect x=\"{x0:.1}\" y=\"{y1:.1}\" width=\"{:.1}\" height=\"{:.1}\" fill=\"none\" stroke=\"#333\"/>",
        x1 - x0,
        y0 - y1
    );
    for i in 0..=TICKS {
        let u = i as f64 / TICKS as f64;
        let xv = f.x.0 + u * (f.x.1 - f.x.0);
        let yv = f.y.0 + u * (f.y.1 - f.y.0);
        let (px, py) = (f.px(xv), f.py(yv));
        let _ = writeln!(
            out,
            "<line x1=\"{px:.1}\" y1=\"{y0:.1}\" x2=\"{px:.1}\" y2=\"{:.1}\" stroke=\"#333\"/><text x=\"{px:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{xv:.2}</text>",
            y0 + 5.0,
            y0 + 18.0
        );
        let _ = writeln!(
            out,
            "<line x1=\"{:.1}\" y1=\"{py:.1}\" x2=\"{x0:.1}\" y2=\"{py:.1}\" stroke=\"#333\"/><text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{yv:.2}</text>",
            x0 - 5.0,
            x0 - 8.0,
            py + 4.0
        );
    }
    let _ = writeln!(
        out,
        "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>",
        (x0 + x1) / 2.0,
        HEIGHT - 14.0,
        escape(x_label)
    );
    let _ = writeln!(
        out,
        "<text x=\"16\" y=\"{:.1}\" text-anchor=\"middle\" transform=\"rotate(-90 16 {:.1})\">{}</text>",
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0,
        escape(y_label)
    );
}

fn legend(out: &mut String, labels: &[String]) {
    let x = WIDTH - MARGIN_R + 16.0;
    for (i, l) in labels.iter().enumerate() {
        let y = MARGIN_T + 10.0 + 20.0 * i as f64;
        let _ = writeln!(
            out,
            "<rect x=\"{x:.1}\" y=\"{:.1}\" width=\"12\" height=\"12\" fill=\"{}\"/><text x=\"{:.1}\" y=\"{:.1}\">{}</text>",
            y - 10.0,
            color(i),
            x + 18.0,
            y,
            escape(l)
        );
    }
}

/// Points coloured by group, crosses at the markers, and a legend.
pub fn scatter_svg(plot: &ScatterPlot) -> Result<String> {
    if plot.points.is_empty() {
        return Err(Error::contract("scatter plot needs at least one point"));
    }
    check_finite(plot.points.iter().chain(&plot.markers).flat_map(|(x, y, _)| [x, y]))?;
    if plot.points.iter().chain(&plot.markers).any(|p| p.2 >= plot.groups.len()) {
        return Err(Error::contract("scatter point refers to an unknown group"));
    }
    let all = plot.points.iter().chain(&plot.markers);
    let f = Frame::new(all.clone().map(|p| p.0), all.map(|p| p.1));
    let mut out = String::new();
    header(&mut out, &plot.title);
    axes(&mut out, &f, "dim_0", "dim_1");
    for &(x, y, g) in &plot.points {
        let _ = writeln!(
            out,
            "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"2\" fill=\"{}\" fill-opacity=\"0.6\"/>",
            f.px(x),
            f.py(y),
            color(g)
        );
    }
    for &(x, y, g) in &plot.markers {
        let (px, py) = (f.px(x), f.py(y));
        let _ = writeln!(
            out,
            "<path d=\"M{:.2} {:.2}L{:.2} {:.2}M{:.2} {:.2}L{:.2} {:.2}\" stroke=\"black\" stroke-width=\"3\"/><path d=\"M{:.2} {:.2}L{:.2} {:.2}M{:.2} {:.2}L{:.2} {:.2}\" stroke=\"{}\" stroke-width=\"1.5\"/>",
            px - 6.0, py - 6.0, px + 6.0, py + 6.0, px - 6.0, py + 6.0, px + 6.0, py - 6.0,
            px - 6.0, py - 6.0, px + 6.0, py + 6.0, px - 6.0, py + 6.0, px + 6.0, py - 6.0,
            color(g)
        );
    }
    legend(&mut out, &plot.groups);
    out.push_str("</svg>\n");
    Ok(out)
}

/// One polyline with point markers per series, axis labels and a legend.
pub fn line_svg(plot: &LinePlot) -> Result<String> {
    if plot.series.is_empty() || plot.series.iter().any(|s| s.points.is_empty()) {
        return Err(Error::contract("line plot needs non-empty series"));
    }
    check_finite(plot.series.iter().flat_map(|s| s.points.iter().flat_map(|(x, y)| [x, y])))?;
    let all = plot.series.iter().flat_map(|s| s.points.iter());
    let f = Frame::new(all.clone().map(|p| p.0), all.map(|p| p.1));
    let mut out = String::new();
    header(&mut out, &plot.title);
    axes(&mut out, &f, &plot.x_label, &plot.y_label);
    for (i, s) in plot.series.iter().enumerate() {
        let path: Vec<String> = s.points.iter().map(|&(x, y)| format!("{:.2},{:.2}", f.px(x), f.py(y))).collect();
        let _ = writeln!(
            out,
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{}\" stroke-width=\"2\"/>",
            path.join(" "),
            color(i)
        );
        for &(x, y) in &s.points {
            let _ = writeln!(
                out,
                "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3.5\" fill=\"{}\"/>",
                f.px(x),
                f.py(y),
                color(i)
            );
        }
    }
    let labels: Vec<String> = plot.series.iter().map(|s| s.label.clone()).collect();
    legend(&mut out, &labels);
    out.push_str("</svg>\n");
    Ok(out)
}
