//! SVG rendering of modal maps and feature-space partitions.

use std::fmt::Write as _;

use crate::cart::Region;
use crate::sysmodel::{
    GROUP_NETWORK, GROUP_SG_CURRENTS, GROUP_SG_EXCITER, GROUP_SG_MECHANICS, GROUP_VSC_CONTROLLERS,
    GROUP_VSC_CURRENTS,
};

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 520.0;
const LEFT: f64 = 80.0;
const RIGHT: f64 = 190.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 60.0;
const UNKNOWN_COLOR: &str = "#7f7f7f";

/// Fixed group colours. The five 3-bus groups come first; the network group only occurs
/// in the larger system.
pub const PALETTE: [(&str, &str); 6] = [
    (GROUP_VSC_CURRENTS, "#1f77b4"),
    (GROUP_VSC_CONTROLLERS, "#d62728"),
    (GROUP_SG_MECHANICS, "#2ca02c"),
    (GROUP_SG_EXCITER, "#ff7f0e"),
    (GROUP_SG_CURRENTS, "#9467bd"),
    (GROUP_NETWORK, "#8c564b"),
];

pub fn group_color(group: Option<&str>) -> &'static str {
    group
        .and_then(|g| PALETTE.iter().find(|(name, _)| *name == g))
        .map_or(UNKNOWN_COLOR, |(_, c)| c)
}

pub fn escape(text: &str) -> String {
    text.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MarkerShape {
    /// Exact poles.
    Cross,
    /// Predicted poles.
    Circle,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PoleMarker {
    pub re: f64,
    pub im: f64,
    /// Group from the exact participation factors (cross colour, circle edge).
    pub exact_group: Option<String>,
    /// Group from the predicted participation factors (circle fill).
    pub predicted_group: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MarkerSeries {
    pub label: String,
    pub shape: MarkerShape,
    pub markers: Vec<PoleMarker>,
}

/// Tick positions with a 1-2-5 step covering `[lo, hi]`.
pub fn nice_ticks(lo: f64, hi: f64, target: usize) -> Vec<f64> {
    if !(hi > lo) || !lo.is_finite() || !hi.is_finite() {
        return vec![lo];
    }
    let raw = (hi - lo) / target.max(1) as f64;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 5.0, 10.0]
        .iter()
        .map(|m| m * mag)
        .find(|&s| s >= raw)
        .unwrap_or(10.0 * mag);
    let first = (lo / step).ceil() as i64;
    let last = (hi / step).floor() as i64;
    (first..=last).map(|i| i as f64 * step).collect()
}

fn fmt_tick(v: f64) -> String {
    let s = format!("{v:.6}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" { "0".into() } else { s.into() }
}

struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn padded(x0: f64, x1: f64, y0: f64, y1: f64, pad: f64) -> Self {
        let widen = |a: f64, b: f64| {
            if b > a {
                let d = (b - a) * pad;
                (a - d, b + d)
            } else {
                let d = a.abs().max(1.0) * 0.1;
                (a - d, b + d)
            }
        };
        let (x0, x1) = widen(x0, x1);
        let (y0, y1) = widen(y0, y1);
        Frame { x0, x1, y0, y1 }
    }

    fn px(&self, x: f64) -> f64 {
        LEFT + (x - self.x0) / (self.x1 - self.x0) * (WIDTH - LEFT - RIGHT)
    }

    fn py(&self, y: f64) -> f64 {
        HEIGHT - BOTTOM - (y - self.y0) / (self.y1 - self.y0) * (HEIGHT - TOP - BOTTOM)
    }
}

fn header(out: &mut String, title: &str) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(out, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#,
        (LEFT + WIDTH - RIGHT) / 2.0,
        escape(title)
    );
}

fn axes(out: &mut String, f: &Frame, x_label: &str, y_label: &str) {
    let (l, r) = (LEFT, WIDTH - RIGHT);
    let (t, b) = (TOP, HEIGHT - BOTTOM);
    let _ = writeln!(
        out,
        r##"<rect class="frame" x="{l}" y="{t}" width="{}" height="{}" fill="none" stroke="#333"/>"##,
        r - l,
        b - t
    );
    let _ = writeln!(out, r##"<g class="ticks" stroke="#333">"##);
    for v in nice_ticks(f.x0, f.x1, 6) {
        let x = f.px(v);
        let _ = writeln!(out, r#"<line x1="{x:.2}" y1="{b}" x2="{x:.2}" y2="{}"/>"#, b + 5.0);
    }
    for v in nice_ticks(f.y0, f.y1, 6) {
        let y = f.py(v);
        let _ = writeln!(out, r#"<line x1="{}" y1="{y:.2}" x2="{l}" y2="{y:.2}"/>"#, l - 5.0);
    }
    let _ = writeln!(out, "</g>");
    let _ = writeln!(out, r#"<g class="tick-labels">"#);
    for v in nice_ticks(f.x0, f.x1, 6) {
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{}" text-anchor="middle">{}</text>"#,
            f.px(v),
            b + 18.0,
            fmt_tick(v)
        );
    }
    for v in nice_ticks(f.y0, f.y1, 6) {
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{:.2}" text-anchor="end" dominant-baseline="middle">{}</text>"#,
            l - 8.0,
            f.py(v),
            fmt_tick(v)
        );
    }
    let _ = writeln!(out, "</g>");
    let _ = writeln!(
        out,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        (l + r) / 2.0,
        HEIGHT - 15.0,
        escape(x_label)
    );
    let _ = writeln!(
        out,
        r#"<text transform="translate(18 {}) rotate(-90)" text-anchor="middle">{}</text>"#,
        (t + b) / 2.0,
        escape(y_label)
    );
}

fn cross(out: &mut String, x: f64, y: f64, color: &str, label: &str) {
    let s = 4.5;
    let _ = writeln!(
        out,
        r#"<path class="marker exact" d="M{:.2} {:.2}L{:.2} {:.2}M{:.2} {:.2}L{:.2} {:.2}" stroke="{color}" stroke-width="1.6" fill="none"><title>{}</title></path>"#,
        x - s,
        y - s,
        x + s,
        y + s,
        x - s,
        y + s,
        x + s,
        y - s,
        escape(label)
    );
}

fn circle(out: &mut String, x: f64, y: f64, fill: &str, edge: &str, label: &str) {
    let _ = writeln!(
        out,
        r#"<circle class="marker predicted" cx="{x:.2}" cy="{y:.2}" r="4.5" fill="{fill}" fill-opacity="0.75" stroke="{edge}" stroke-width="1.6"><title>{}</title></circle>"#,
        escape(label)
    );
}

/// Modal map in the complex plane: exact poles as crosses, predicted poles as circles
/// (fill from the predicted group, edge from the exact group).
pub fn modal_map(title: &str, series: &[MarkerSeries]) -> String {
    let all = series.iter().flat_map(|s| &s.markers).filter(|m| m.re.is_finite() && m.im.is_finite());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for m in all {
        x0 = x0.min(m.re);
        x1 = x1.max(m.re);
        y0 = y0.min(m.im);
        y1 = y1.max(m.im);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (-1.0, 0.0, -1.0, 1.0);
    }
    let f = Frame::padded(x0, x1.max(0.0), y0, y1, 0.05);
    let mut out = String::new();
    header(&mut out, title);
    axes(&mut out, &f, "Real part [1/s]", "Imaginary part [rad/s]");
    if f.x0 < 0.0 && f.x1 > 0.0 {
        let x = f.px(0.0);
        let _ = writeln!(
            out,
            r##"<line class="stability-axis" x1="{x:.2}" y1="{TOP}" x2="{x:.2}" y2="{}" stroke="#999" stroke-dasharray="4 3"/>"##,
            HEIGHT - BOTTOM
        );
    }
    for s in series {
        let _ = writeln!(out, r#"<g class="series" data-label="{}">"#, escape(&s.label));
        for (k, m) in s.markers.iter().enumerate() {
            if !(m.re.is_finite() && m.im.is_finite()) {
                continue;
            }
            let (x, y) = (f.px(m.re), f.py(m.im));
            let label = format!("{} pole {}: {:.4} {:+.4}j", s.label, k + 1, m.re, m.im);
            match s.shape {
                MarkerShape::Cross => cross(&mut out, x, y, group_color(m.exact_group.as_deref()), &label),
                MarkerShape::Circle => circle(
                    &mut out,
                    x,
                    y,
                    group_color(m.predicted_group.as_deref().or(m.exact_group.as_deref())),
                    group_color(m.exact_group.as_deref()),
                    &label,
                ),
            }
        }
        let _ = writeln!(out, "</g>");
    }
    legend(&mut out, series);
    out.push_str("</svg>\n");
    out
}

fn legend(out: &mut String, series: &[MarkerSeries]) {
    let x = WIDTH - RIGHT + 20.0;
    let mut y = TOP + 10.0;
    let _ = writeln!(out, r#"<g class="legend">"#);
    let mut seen: Vec<&str> = Vec::new();
    for s in series {
        for m in &s.markers {
            for g in [m.exact_group.as_deref(), m.predicted_group.as_deref()].into_iter().flatten() {
                if !seen.contains(&g) {
                    seen.push(g);
                }
            }
        }
    }
    seen.sort_by_key(|g| PALETTE.iter().position(|(n, _)| n == g).unwrap_or(usize::MAX));
    for g in seen {
        let _ = writeln!(
            out,
            r#"<rect x="{x}" y="{}" width="10" height="10" fill="{}"/><text x="{}" y="{}">{}</text>"#,
            y - 9.0,
            group_color(Some(g)),
            x + 16.0,
            y,
            escape(g)
        );
        y += 18.0;
    }
    y += 8.0;
    let _ = writeln!(
        out,
        r##"<path d="M{:.1} {:.1}L{:.1} {:.1}M{:.1} {:.1}L{:.1} {:.1}" stroke="#333" stroke-width="1.6"/><text x="{}" y="{}">exact</text>"##,
        x,
        y - 9.0,
        x + 9.0,
        y,
        x,
        y,
        x + 9.0,
        y - 9.0,
        x + 16.0,
        y
    );
    y += 18.0;
    let _ = writeln!(
        out,
        r##"<circle cx="{}" cy="{}" r="4.5" fill="none" stroke="#333" stroke-width="1.6"/><text x="{}" y="{}">predicted</text>"##,
        x + 4.5,
        y - 4.5,
        x + 16.0,
        y
    );
    let _ = writeln!(out, "</g>");
}

const RAMP: [(f64, [f64; 3]); 5] = [
    (0.0, [68.0, 1.0, 84.0]),
    (0.25, [59.0, 82.0, 139.0]),
    (0.5, [33.0, 145.0, 140.0]),
    (0.75, [94.0, 201.0, 98.0]),
    (1.0, [253.0, 231.0, 37.0]),
];

/// Colour of `t` in [0, 1] on a perceptually ordered ramp.
pub fn ramp_color(t: f64) -> String {
    let t = if t.is_finite() { t.clamp(0.0, 1.0) } else { 0.0 };
    let k = RAMP.iter().rposition(|(s, _)| *s <= t).unwrap_or(0).min(RAMP.len() - 2);
    let (s0, c0) = RAMP[k];
    let (s1, c1) = RAMP[k + 1];
    let w = (t - s0) / (s1 - s0);
    let c: Vec<u8> = (0..3).map(|i| (c0[i] + w * (c1[i] - c0[i])).round() as u8).collect();
    format!("#{:02x}{:02x}{:02x}", c[0], c[1], c[2])
}

/// Feature-space partition: one rectangle per region, coloured by value.
pub fn partition_map(title: &str, x_label: &str, y_label: &str, value_label: &str, regions: &[Region]) -> String {
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    let (mut v0, mut v1) = (f64::INFINITY, f64::NEG_INFINITY);
    for r in regions {
        x0 = x0.min(r.rect.x0);
        x1 = x1.max(r.rect.x1);
        y0 = y0.min(r.rect.y0);
        y1 = y1.max(r.rect.y1);
        if r.value.is_finite() {
            v0 = v0.min(r.value);
            v1 = v1.max(r.value);
        }
    }
    if regions.is_empty() {
        (x0, x1, y0, y1, v0, v1) = (0.0, 1.0, 0.0, 1.0, 0.0, 1.0);
    }
    let f = Frame::padded(x0, x1, y0, y1, 0.0);
    let span = if v1 > v0 { v1 - v0 } else { 1.0 };
    let mut out = String::new();
    header(&mut out, title);
    let _ = writeln!(out, r#"<g class="regions">"#);
    for r in regions {
        let (px0, px1) = (f.px(r.rect.x0), f.px(r.rect.x1));
        let (py0, py1) = (f.py(r.rect.y1), f.py(r.rect.y0));
        let _ = writeln!(
            out,
            r#"<rect class="region" x="{px0:.2}" y="{py0:.2}" width="{:.2}" height="{:.2}" fill="{}" stroke="white" stroke-width="0.4"><title>{}</title></rect>"#,
            (px1 - px0).max(0.0),
            (py1 - py0).max(0.0),
            ramp_color((r.value - v0) / span),
            fmt_tick(r.value)
        );
    }
    let _ = writeln!(out, "</g>");
    axes(&mut out, &f, x_label, y_label);
    // colour bar
    let bx = WIDTH - RIGHT + 30.0;
    let (bt, bb) = (TOP, HEIGHT - BOTTOM);
    let steps = 40;
    let _ = writeln!(out, r#"<g class="colorbar">"#);
    for i in 0..steps {
        let t0 = i as f64 / steps as f64;
        let h = (bb - bt) / steps as f64;
        let _ = writeln!(
            out,
            r#"<rect x="{bx}" y="{:.2}" width="18" height="{:.2}" fill="{}"/>"#,
            bb - (i + 1) as f64 * h,
            h + 0.3,
            ramp_color(t0 + 0.5 / steps as f64)
        );
    }
    for (v, y) in [(v1, bt), (v0, bb)] {
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{y}" dominant-baseline="middle">{}</text>"#,
            bx + 24.0,
            fmt_tick(if v.is_finite() { v } else { 0.0 })
        );
    }
    let _ = writeln!(
        out,
        r#"<text transform="translate({} {}) rotate(-90)" text-anchor="middle">{}</text>"#,
        bx + 100.0,
        (bt + bb) / 2.0,
        escape(value_label)
    );
    let _ = writeln!(out, "</g>");
    out.push_str("</svg>\n");
    out
}
