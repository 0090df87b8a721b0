//! Minimal deterministic SVG plots. Coordinates are printed with fixed
//! precision so identical input gives identical bytes.

use std::fmt::Write;

const W: f64 = 640.0;
const H: f64 = 400.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 50.0;

const PALETTE: &[&str] = &["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf", "#8c564b", "#e377c2"];

pub struct Series {
    pub label: Option<String>,
    pub points: Vec<(f64, f64)>,
}

impl Series {
    pub fn new(points: Vec<(f64, f64)>) -> Self {
        Self { label: None, points }
    }

    pub fn labelled(label: impl Into<String>, points: Vec<(f64, f64)>) -> Self {
        Self {
            label: Some(label.into()),
            points,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Range {
    lo: f64,
    hi: f64,
}

impl Range {
    fn of(values: impl Iterator<Item = f64>) -> Option<Self> {
        let (lo, hi) = values
            .filter(|v| v.is_finite())
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
        if lo > hi {
            return None;
        }
        if hi - lo < 1e-12 {
            let pad = if lo.abs() > 0.0 { 0.05 * lo.abs() } else { 0.5 };
            return Some(Self { lo: lo - pad, hi: hi + pad });
        }
        let pad = 0.04 * (hi - lo);
        Some(Self { lo: lo - pad, hi: hi + pad })
    }

    fn map(&self, v: f64, a: f64, b: f64) -> f64 {
        a + (v - self.lo) / (self.hi - self.lo) * (b - a)
    }

    /// Five evenly spaced tick values.
    fn ticks(&self) -> impl Iterator<Item = f64> + '_ {
        (0..5).map(move |i| self.lo + (self.hi - self.lo) * i as f64 / 4.0)
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn header(out: &mut String, title: &str) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(out, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(out, r#"<text x="{:.1}" y="22" text-anchor="middle" font-size="15">{}</text>"#, W / 2.0, escape(title));
}

fn axes(out: &mut String, xr: Range, yr: Range, xlabel: &str, ylabel: &str) {
    let (x0, x1, y0, y1) = (LEFT, W - RIGHT, H - BOTTOM, TOP);
    let _ = writeln!(out, r#"<rect x="{x0}" y="{y1}" width="{:.1}" height="{:.1}" fill="none" stroke="black"/>"#, x1 - x0, y0 - y1);
    for v in xr.ticks() {
        let x = xr.map(v, x0, x1);
        let _ = writeln!(out, r#"<line x1="{x:.2}" y1="{y0}" x2="{x:.2}" y2="{:.1}" stroke="black"/>"#, y0 + 5.0);
        let _ = writeln!(out, r#"<text x="{x:.2}" y="{:.1}" text-anchor="middle">{}</text>"#, y0 + 18.0, fmt_tick(v));
    }
    for v in yr.ticks() {
        let y = yr.map(v, y0, y1);
        let _ = writeln!(out, r#"<line x1="{:.1}" y1="{y:.2}" x2="{x0}" y2="{y:.2}" stroke="black"/>"#, x0 - 5.0);
        let _ = writeln!(out, r#"<text x="{:.1}" y="{:.2}" text-anchor="end">{}</text>"#, x0 - 8.0, y + 4.0, fmt_tick(v));
    }
    let _ = writeln!(out, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, (x0 + x1) / 2.0, H - 10.0, escape(xlabel));
    let _ = writeln!(
        out,
        r#"<text x="16" y="{:.1}" text-anchor="middle" transform="rotate(-90 16 {:.1})">{}</text>"#,
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0,
        escape(ylabel)
    );
}

fn fmt_tick(v: f64) -> String {
    let v = if v.abs() < 1e-12 { 0.0 } else { v };
    if v != 0.0 && (v.abs() < 1e-3 || v.abs() >= 1e4) {
        format!("{v:.2e}")
    } else {
        format!("{v:.3}")
    }
}

fn annotation(out: &mut String, text: &str) {
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" font-size="16" fill="gray">{}</text>"#,
        (LEFT + W - RIGHT) / 2.0,
        (TOP + H - BOTTOM) / 2.0,
        escape(text)
    );
}

/// Line plot of one or more series. Non-finite points break a polyline.
pub fn line_plot(title: &str, xlabel: &str, ylabel: &str, series: &[Series]) -> String {
    let mut out = String::new();
    header(&mut out, title);
    let all = || series.iter().flat_map(|s| s.points.iter());
    let (Some(xr), Some(yr)) = (Range::of(all().map(|p| p.0)), Range::of(all().map(|p| p.1))) else {
        axes(&mut out, Range { lo: 0.0, hi: 1.0 }, Range { lo: 0.0, hi: 1.0 }, xlabel, ylabel);
        annotation(&mut out, "no samples");
        out.push_str("</svg>\n");
        return out;
    };
    axes(&mut out, xr, yr, xlabel, ylabel);
    for (i, s) in series.iter().enumerate() {
        let colour = PALETTE[i % PALETTE.len()];
        for run in s.points.split(|p| !(p.0.is_finite() && p.1.is_finite())) {
            if run.is_empty() {
                continue;
            }
            let pts: Vec<String> = run
                .iter()
                .map(|&(x, y)| format!("{:.2},{:.2}", xr.map(x, LEFT, W - RIGHT), yr.map(y, H - BOTTOM, TOP)))
                .collect();
            let _ = writeln!(
                out,
                r#"<polyline points="{}" fill="none" stroke="{colour}" stroke-width="1.5"/>"#,
                pts.join(" ")
            );
        }
        if let Some(label) = &s.label {
            let y = TOP + 16.0 + 16.0 * i as f64;
            let _ = writeln!(
                out,
                r#"<text x="{:.1}" y="{y:.1}" text-anchor="end" fill="{colour}">{}</text>"#,
                W - RIGHT - 8.0,
                escape(label)
            );
        }
    }
    out.push_str("</svg>\n");
    out
}

/// Histogram with `bins` equal-width bins. An empty sample set yields an
/// annotated empty frame.
pub fn histogram(title: &str, xlabel: &str, values: &[f64], bins: usize) -> String {
    let mut out = String::new();
    header(&mut out, title);
    let finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    let Some(xr) = Range::of(finite.iter().copied()) else {
        axes(&mut out, Range { lo: 0.0, hi: 1.0 }, Range { lo: 0.0, hi: 1.0 }, xlabel, "count");
        annotation(&mut out, "no samples");
        out.push_str("</svg>\n");
        return out;
    };
    let bins = bins.max(1);
    let width = (xr.hi - xr.lo) / bins as f64;
    let mut counts = vec![0usize; bins];
    for v in &finite {
        let k = (((v - xr.lo) / width) as usize).min(bins - 1);
        counts[k] += 1;
    }
    let top = *counts.iter().max().expect("bins ≥ 1") as f64;
    let yr = Range { lo: 0.0, hi: top * 1.05 };
    axes(&mut out, xr, yr, xlabel, "count");
    for (k, &c) in counts.iter().enumerate() {
        if c == 0 {
            continue;
        }
        let a = xr.lo + width * k as f64;
        let x0 = xr.map(a, LEFT, W - RIGHT);
        let x1 = xr.map(a + width, LEFT, W - RIGHT);
        let y = yr.map(c as f64, H - BOTTOM, TOP);
        let _ = writeln!(
            out,
            r##"<rect x="{x0:.2}" y="{y:.2}" width="{:.2}" height="{:.2}" fill="#1f77b4" stroke="white"/>"##,
            x1 - x0,
            H - BOTTOM - y
        );
    }
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_inputs_are_annotated() {
        assert!(histogram("m", "x", &[], 10).contains("no samples"));
        assert!(line_plot("m", "x", "y", &[Series::new(vec![])]).contains("no samples"));
    }

    #[test]
    fn output_is_deterministic() {
        let s = || vec![Series::labelled("a", vec![(0.0, 1.0), (1.0, 2.0), (2.0, f64::NAN), (3.0, 0.5)])];
        let a = line_plot("t", "x", "y", &s());
        assert_eq!(a, line_plot("t", "x", "y", &s()));
        // the NaN splits the series into two polylines
        assert_eq!(a.matches("<polyline").count(), 2);
        let h = histogram("h", "x", &[0.0, 0.1, 0.1, 1.0], 4);
        assert_eq!(h.matches("<rect x=").count(), 1 + 2);
    }
}
