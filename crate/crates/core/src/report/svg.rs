//! Minimal deterministic SVG 1.1 line charts over monthly series.

use std::fmt::Write;

use crate::month::MonthKey;

const WIDTH: f64 = 860.0;
const HEIGHT: f64 = 480.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 190.0;
const TOP: f64 = 50.0;
const BOTTOM: f64 = 70.0;

#[derive(Clone, Debug)]
pub struct Line {
    pub name: String,
    /// Aligned with the chart's months; `None` leaves a hole.
    pub values: Vec<Option<f64>>,
    pub color: &'static str,
    pub dash: Option<&'static str>,
    pub width: f64,
    /// Thin unlabeled lines (placebo/LOO paths) stay out of the legend.
    pub in_legend: bool,
}

impl Line {
    pub fn new(name: impl Into<String>, values: Vec<Option<f64>>, color: &'static str) -> Self {
        Line {
            name: name.into(),
            values,
            color,
            dash: None,
            width: 2.0,
            in_legend: true,
        }
    }

    pub fn dashed(mut self, pattern: &'static str) -> Self {
        self.dash = Some(pattern);
        self
    }

    pub fn thin(mut self) -> Self {
        self.width = 0.8;
        self.in_legend = false;
        self
    }
}

#[derive(Clone, Debug)]
pub struct Band {
    pub name: String,
    pub lower: Vec<Option<f64>>,
    pub upper: Vec<Option<f64>>,
    pub color: &'static str,
}

#[derive(Clone, Debug, Default)]
pub struct LineChart {
    pub title: String,
    pub y_label: String,
    pub months: Vec<MonthKey>,
    pub lines: Vec<Line>,
    pub bands: Vec<Band>,
    /// Vertical marker drawn at this month.
    pub marker: Option<MonthKey>,
    /// Shaded, labeled month window.
    pub highlight: Option<(MonthKey, MonthKey, String)>,
    /// Text placed at (month, value).
    pub labels: Vec<(MonthKey, f64, String)>,
    pub zero_line: bool,
}

impl LineChart {
    fn x(&self, i: usize) -> f64 {
        let n = self.months.len().max(2) - 1;
        LEFT + (WIDTH - LEFT - RIGHT) * i as f64 / n as f64
    }

    fn index_of(&self, m: MonthKey) -> Option<usize> {
        self.months.iter().position(|x| *x == m)
    }

    fn y_range(&self) -> (f64, f64) {
        let values = self
            .lines
            .iter()
            .flat_map(|l| l.values.iter())
            .chain(self.bands.iter().flat_map(|b| b.lower.iter().chain(&b.upper)))
            .flatten()
            .copied()
            .filter(|v| v.is_finite())
            .chain(self.zero_line.then_some(0.0));
        let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| {
            (a.min(v), b.max(v))
        });
        if !lo.is_finite() {
            return (0.0, 1.0);
        }
        let pad = ((hi - lo) * 0.06).max(1e-6);
        (lo - pad, hi + pad)
    }

    pub fn render(&self) -> String {
        let (lo, hi) = self.y_range();
        let plot_h = HEIGHT - TOP - BOTTOM;
        let y = |v: f64| TOP + plot_h * (hi - v) / (hi - lo);
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<?xml version="1.0" encoding="UTF-8"?>
<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="Helvetica, Arial, sans-serif" font-size="11">
<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>
<text x="{:.1}" y="24" font-size="15" text-anchor="middle">{}</text>"#,
            WIDTH / 2.0,
            escape(&self.title)
        );

        if let Some((from, to, label)) = &self.highlight {
            if let (Some(a), Some(b)) = (self.index_of(*from), self.index_of(*to)) {
                let (x0, x1) = (self.x(a) - 6.0, self.x(b) + 6.0);
                let _ = writeln!(
                    s,
                    r##"<rect x="{x0:.2}" y="{TOP:.2}" width="{:.2}" height="{plot_h:.2}" fill="#f3e6a8" fill-opacity="0.5"/>
<text x="{:.2}" y="{:.2}" text-anchor="middle" fill="#7a6400">{}</text>"##,
                    x1 - x0,
                    (x0 + x1) / 2.0,
                    TOP + 12.0,
                    escape(label)
                );
            }
        }

        // Axes, y ticks and grid.
        let _ = writeln!(
            s,
            r##"<line x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{:.2}" stroke="#333"/>
<line x1="{LEFT}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="#333"/>"##,
            HEIGHT - BOTTOM,
            HEIGHT - BOTTOM,
            WIDTH - RIGHT,
            HEIGHT - BOTTOM
        );
        for tick in nice_ticks(lo, hi, 6) {
            let ty = y(tick);
            let _ = writeln!(
                s,
                r##"<line x1="{LEFT}" y1="{ty:.2}" x2="{:.2}" y2="{ty:.2}" stroke="#ddd"/>
<text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"##,
                WIDTH - RIGHT,
                LEFT - 6.0,
                ty + 4.0,
                fmt_tick(tick)
            );
        }
        for (i, m) in self.months.iter().enumerate() {
            let tx = self.x(i);
            let ty = HEIGHT - BOTTOM + 14.0;
            let _ = writeln!(
                s,
                r#"<text x="{tx:.2}" y="{ty:.2}" text-anchor="end" transform="rotate(-45 {tx:.2} {ty:.2})">{:02}/{:04}</text>"#,
                m.month(),
                m.year()
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="16" y="{:.2}" text-anchor="middle" transform="rotate(-90 16 {:.2})">{}</text>"#,
            TOP + plot_h / 2.0,
            TOP + plot_h / 2.0,
            escape(&self.y_label)
        );
        if self.zero_line && lo < 0.0 && hi > 0.0 {
            let _ = writeln!(
                s,
                r##"<line x1="{LEFT}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="#666" stroke-width="0.8"/>"##,
                y(0.0),
                WIDTH - RIGHT,
                y(0.0)
            );
        }
        if let Some(i) = self.marker.and_then(|m| self.index_of(m)) {
            let _ = writeln!(
                s,
                r##"<line x1="{:.2}" y1="{TOP}" x2="{:.2}" y2="{:.2}" stroke="#555" stroke-dasharray="2,3"/>"##,
                self.x(i),
                self.x(i),
                HEIGHT - BOTTOM
            );
        }

        for band in &self.bands {
            let mut upper = Vec::new();
            let mut lower = Vec::new();
            for (i, (l, u)) in band.lower.iter().zip(&band.upper).enumerate() {
                if let (Some(l), Some(u)) = (l, u) {
                    if l.is_finite() && u.is_finite() {
                        upper.push(format!("{:.2},{:.2}", self.x(i), y(*u)));
                        lower.push(format!("{:.2},{:.2}", self.x(i), y(*l)));
                    }
                }
            }
            lower.reverse();
            upper.extend(lower);
            if !upper.is_empty() {
                let _ = writeln!(
                    s,
                    r#"<polygon points="{}" fill="{}" fill-opacity="0.25" stroke="none"/>"#,
                    upper.join(" "),
                    band.color
                );
            }
        }

        for line in &self.lines {
            for segment in segments(&line.values) {
                let pts: Vec<String> = segment
                    .iter()
                    .map(|(i, v)| format!("{:.2},{:.2}", self.x(*i), y(*v)))
                    .collect();
                let dash = line
                    .dash
                    .map(|d| format!(r#" stroke-dasharray="{d}""#))
                    .unwrap_or_default();
                let _ = writeln!(
                    s,
                    r#"<polyline points="{}" fill="none" stroke="{}" stroke-width="{}"{dash}/>"#,
                    pts.join(" "),
                    line.color,
                    line.width
                );
            }
        }

        for (m, v, text) in &self.labels {
            if let Some(i) = self.index_of(*m) {
                let _ = writeln!(
                    s,
                    r##"<text x="{:.2}" y="{:.2}" text-anchor="middle" font-size="10" fill="#222">{}</text>"##,
                    self.x(i),
                    y(*v) - 8.0,
                    escape(text)
                );
            }
        }

        let mut ly = TOP + 10.0;
        let lx = WIDTH - RIGHT + 14.0;
        for band in &self.bands {
            let _ = writeln!(
                s,
                r#"<rect x="{lx:.2}" y="{:.2}" width="22" height="8" fill="{}" fill-opacity="0.25"/>
<text x="{:.2}" y="{:.2}">{}</text>"#,
                ly - 6.0,
                band.color,
                lx + 28.0,
                ly + 2.0,
                escape(&band.name)
            );
            ly += 18.0;
        }
        for line in self.lines.iter().filter(|l| l.in_legend) {
            let dash = line
                .dash
                .map(|d| format!(r#" stroke-dasharray="{d}""#))
                .unwrap_or_default();
            let _ = writeln!(
                s,
                r#"<line x1="{lx:.2}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{}" stroke-width="{}"{dash}/>
<text x="{:.2}" y="{:.2}">{}</text>"#,
                lx + 22.0,
                line.color,
                line.width,
                lx + 28.0,
                ly + 4.0,
                escape(&line.name)
            );
            ly += 18.0;
        }
        s.push_str("</svg>\n");
        s
    }
}

fn segments(values: &[Option<f64>]) -> Vec<Vec<(usize, f64)>> {
    let mut out = Vec::new();
    let mut cur = Vec::new();
    for (i, v) in values.iter().enumerate() {
        match v {
            Some(v) if v.is_finite() => cur.push((i, *v)),
            _ => {
                if !cur.is_empty() {
                    out.push(std::mem::take(&mut cur));
                }
            }
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

fn nice_ticks(lo: f64, hi: f64, target: usize) -> Vec<f64> {
    let raw = (hi - lo) / target as f64;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 2.5, 5.0, 10.0]
        .iter()
        .map(|m| m * mag)
        .find(|s| *s >= raw)
        .unwrap_or(10.0 * mag);
    let first = (lo / step).ceil() as i64;
    let last = (hi / step).floor() as i64;
    (first..=last).map(|k| k as f64 * step).collect()
}

fn fmt_tick(v: f64) -> String {
    let s = format!("{v:.2}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" {
        "0".into()
    } else {
        s.to_string()
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
