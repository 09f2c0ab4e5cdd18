//! Plain SVG charts with fixed coordinate formatting, so identical inputs
//! give identical bytes.

use std::fmt::Write;
use std::path::Path;

use super::{write_atomic, ReportError};
use crate::moments::{summary, Summary};
use crate::reliability::{ConvergenceCurve, ReliabilityError};

/// Canvas size, margins and the value range mapped onto the plot area.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChartLayout {
    pub width: f64,
    pub height: f64,
    pub margin_left: f64,
    pub margin_right: f64,
    pub margin_top: f64,
    pub margin_bottom: f64,
    pub x_range: (f64, f64),
    pub y_range: (f64, f64),
}

impl Default for ChartLayout {
    fn default() -> Self {
        ChartLayout {
            width: 640.0,
            height: 400.0,
            margin_left: 60.0,
            margin_right: 20.0,
            margin_top: 20.0,
            margin_bottom: 60.0,
            x_range: (0.0, 1.0),
            y_range: (0.0, 1.0),
        }
    }
}

impl ChartLayout {
    pub fn plot_width(&self) -> f64 {
        self.width - self.margin_left - self.margin_right
    }

    pub fn plot_height(&self) -> f64 {
        self.height - self.margin_top - self.margin_bottom
    }

    pub fn x(&self, value: f64) -> f64 {
        let (lo, hi) = self.x_range;
        let t = if hi > lo {
            (value - lo) / (hi - lo)
        } else {
            0.5
        };
        self.margin_left + t * self.plot_width()
    }

    pub fn y(&self, value: f64) -> f64 {
        let (lo, hi) = self.y_range;
        let t = if hi > lo {
            (value - lo) / (hi - lo)
        } else {
            0.5
        };
        self.margin_top + (1.0 - t) * self.plot_height()
    }

    /// Inverse of [`y`](Self::y).
    pub fn value_at_y(&self, y: f64) -> f64 {
        let (lo, hi) = self.y_range;
        lo + (1.0 - (y - self.margin_top) / self.plot_height()) * (hi - lo)
    }

    pub fn value_at_x(&self, x: f64) -> f64 {
        let (lo, hi) = self.x_range;
        lo + (x - self.margin_left) / self.plot_width() * (hi - lo)
    }
}

fn num(v: f64) -> String {
    let s = format!("{v:.3}");
    if s == "-0.000" {
        "0.000".into()
    } else {
        s
    }
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn open_svg(out: &mut String, layout: &ChartLayout) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#,
        w = num(layout.width),
        h = num(layout.height)
    );
    out.push_str(
        "<style>text { font-family: sans-serif; } .tick, .label { fill: #333; }</style>\n",
    );
    let _ = writeln!(
        out,
        r#"<rect class="background" x="0" y="0" width="{}" height="{}" fill="white"/>"#,
        num(layout.width),
        num(layout.height)
    );
}

fn y_axis(out: &mut String, layout: &ChartLayout, ticks: usize) {
    let x0 = layout.margin_left;
    let _ = writeln!(
        out,
        r#"<line class="axis" x1="{x}" y1="{t}" x2="{x}" y2="{b}" stroke="black"/>"#,
        x = num(x0),
        t = num(layout.margin_top),
        b = num(layout.margin_top + layout.plot_height())
    );
    let (lo, hi) = layout.y_range;
    for i in 0..=ticks {
        let v = lo + (hi - lo) * i as f64 / ticks as f64;
        let y = layout.y(v);
        let _ = writeln!(
            out,
            r#"<text class="tick" x="{x}" y="{y}" font-size="10" text-anchor="end">{label}</text>"#,
            x = num(x0 - 6.0),
            y = num(y + 3.0),
            label = format_tick(v)
        );
    }
}

fn format_tick(v: f64) -> String {
    let s = format!("{v:.4}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" {
        "0".into()
    } else {
        s.to_string()
    }
}

/// Five-number summary plus Tukey whiskers (most extreme points within
/// 1.5 IQR of the quartiles) and the points beyond them.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxStats {
    pub label: String,
    pub summary: Summary,
    pub whisker_low: f64,
    pub whisker_high: f64,
    pub outliers: Vec<f64>,
}

pub fn box_stats(label: &str, values: &[f64]) -> Result<BoxStats, ReportError> {
    let s = summary(values).map_err(|_| ReportError::EmptyScores(label.to_string()))?;
    let lo_fence = s.q1 - 1.5 * s.iqr();
    let hi_fence = s.q3 + 1.5 * s.iqr();
    let inside = values
        .iter()
        .copied()
        .filter(|v| (lo_fence..=hi_fence).contains(v));
    let whisker_low = inside.clone().fold(f64::INFINITY, f64::min);
    let whisker_high = inside.fold(f64::NEG_INFINITY, f64::max);
    let mut outliers: Vec<f64> = values
        .iter()
        .copied()
        .filter(|v| !(lo_fence..=hi_fence).contains(v))
        .collect();
    outliers.sort_by(f64::total_cmp);
    Ok(BoxStats {
        label: label.to_string(),
        summary: s,
        whisker_low,
        whisker_high,
        outliers,
    })
}

/// One box per series on a shared `[0, 1]` (or `layout.y_range`) axis.
pub fn box_plot_svg(
    series: &[(String, Vec<f64>)],
    layout: &ChartLayout,
) -> Result<String, ReportError> {
    if series.is_empty() {
        return Err(ReportError::EmptyPlot);
    }
    let stats = series
        .iter()
        .map(|(label, values)| box_stats(label, values))
        .collect::<Result<Vec<_>, _>>()?;
    let mut out = String::new();
    open_svg(&mut out, layout);
    y_axis(&mut out, layout, 5);
    let slot = layout.plot_width() / stats.len() as f64;
    let half = (slot * 0.3).min(40.0);
    for (i, b) in stats.iter().enumerate() {
        let cx = layout.margin_left + slot * (i as f64 + 0.5);
        let s = &b.summary;
        let _ = writeln!(out, r#"<g class="box" data-label="{}">"#, escape(&b.label));
        for (from, to) in [(s.q3, b.whisker_high), (s.q1, b.whisker_low)] {
            let _ = writeln!(
                out,
                r#"<line class="whisker" x1="{x}" y1="{a}" x2="{x}" y2="{b}" stroke="black"/>"#,
                x = num(cx),
                a = num(layout.y(from)),
                b = num(layout.y(to))
            );
        }
        let _ = writeln!(
            out,
            r#"<rect class="iqr" x="{x}" y="{y}" width="{w}" height="{h}" fill="lightsteelblue" stroke="black"/>"#,
            x = num(cx - half),
            y = num(layout.y(s.q3)),
            w = num(2.0 * half),
            h = num(layout.y(s.q1) - layout.y(s.q3))
        );
        let _ = writeln!(
            out,
            r#"<line class="median" x1="{a}" y1="{y}" x2="{b}" y2="{y}" stroke="black" stroke-width="2"/>"#,
            a = num(cx - half),
            b = num(cx + half),
            y = num(layout.y(s.median))
        );
        for &o in &b.outliers {
            let _ = writeln!(
                out,
                r#"<circle class="outlier" cx="{x}" cy="{y}" r="3" fill="none" stroke="black"/>"#,
                x = num(cx),
                y = num(layout.y(o))
            );
        }
        let _ = writeln!(
            out,
            r#"<text class="label" x="{x}" y="{y}" font-size="11" text-anchor="middle">{t}</text>"#,
            x = num(cx),
            y = num(layout.margin_top + layout.plot_height() + 18.0),
            t = escape(&b.label)
        );
        out.push_str("</g>\n");
    }
    out.push_str("</svg>\n");
    Ok(out)
}

/// Upper CI bound against n for each curve, with the tolerance as a dashed
/// line and each curve's stable n* circled. All curves must share one n grid.
pub fn convergence_svg(
    curves: &[(String, ConvergenceCurve)],
    epsilon: f64,
    base: &ChartLayout,
) -> Result<String, ReportError> {
    let Some((_, first)) = curves.first() else {
        return Err(ReportError::EmptyPlot);
    };
    let grid: Vec<usize> = first.points.iter().map(|(n, _)| *n).collect();
    if grid.is_empty() {
        return Err(ReportError::EmptyPlot);
    }
    for (_, c) in curves {
        if c.points.iter().map(|(n, _)| *n).ne(grid.iter().copied()) {
            return Err(ReliabilityError::GridMismatch.into());
        }
    }
    let y_max = curves
        .iter()
        .flat_map(|(_, c)| c.points.iter().map(|(_, u)| *u))
        .fold(epsilon, f64::max)
        * 1.05;
    let layout = ChartLayout {
        x_range: (grid[0] as f64, *grid.last().expect("non-empty") as f64),
        y_range: (0.0, y_max),
        ..*base
    };
    let mut out = String::new();
    open_svg(&mut out, &layout);
    y_axis(&mut out, &layout, 5);
    let bottom = layout.margin_top + layout.plot_height();
    let _ = writeln!(
        out,
        r#"<line class="axis" x1="{a}" y1="{y}" x2="{b}" y2="{y}" stroke="black"/>"#,
        a = num(layout.margin_left),
        b = num(layout.margin_left + layout.plot_width()),
        y = num(bottom)
    );
    for n in [grid[0], grid[grid.len() / 2], grid[grid.len() - 1]] {
        let _ = writeln!(
            out,
            r#"<text class="tick" x="{x}" y="{y}" font-size="10" text-anchor="middle">{n}</text>"#,
            x = num(layout.x(n as f64)),
            y = num(bottom + 14.0)
        );
    }
    let _ = writeln!(
        out,
        r#"<line class="epsilon" x1="{a}" y1="{y}" x2="{b}" y2="{y}" stroke="gray" stroke-dasharray="4 3"/>"#,
        a = num(layout.margin_left),
        b = num(layout.margin_left + layout.plot_width()),
        y = num(layout.y(epsilon))
    );
    const COLORS: [&str; 6] = [
        "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b",
    ];
    for (i, (label, c)) in curves.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let points = c
            .points
            .iter()
            .map(|(n, u)| format!("{},{}", num(layout.x(*n as f64)), num(layout.y(*u))))
            .collect::<Vec<_>>()
            .join(" ");
        let _ = writeln!(
            out,
            r#"<polyline class="curve" data-label="{l}" data-moment="{m}" points="{points}" fill="none" stroke="{color}"/>"#,
            l = escape(label),
            m = c.moment.label()
        );
        if let Some(n) = c.stable_n_star {
            let u = c.upper_at(n).expect("n* lies on the grid");
            let _ = writeln!(
                out,
                r#"<circle class="n-star" data-label="{l}" data-n="{n}" cx="{x}" cy="{y}" r="4" fill="{color}"/>"#,
                l = escape(label),
                x = num(layout.x(n as f64)),
                y = num(layout.y(u))
            );
        }
    }
    out.push_str("</svg>\n");
    Ok(out)
}

/// Writes [`box_plot_svg`] to `path`.
pub fn emit_boxplot(
    per_model_scores: &[(String, Vec<f64>)],
    path: &Path,
    layout: &ChartLayout,
) -> Result<(), ReportError> {
    write_atomic(path, box_plot_svg(per_model_scores, layout)?.as_bytes())
}

/// Writes [`convergence_svg`] to `path`.
pub fn emit_convergence(
    curves: &[(String, ConvergenceCurve)],
    epsilon: f64,
    path: &Path,
    layout: &ChartLayout,
) -> Result<(), ReportError> {
    write_atomic(path, convergence_svg(curves, epsilon, layout)?.as_bytes())
}
