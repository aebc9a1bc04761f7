//! File output helpers: atomic writes, CSV and SVG rendering.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::Result;
use crate::numerics::Vec2;

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Shortest round-trip decimal form, so CSVs are byte-stable.
pub fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

/// Builds a CSV document (LF endings, header row).
pub struct CsvTable {
    out: String,
    width: usize,
}

impl CsvTable {
    pub fn new(header: &[&str]) -> Self {
        let mut out = header.join(",");
        out.push('\n');
        Self {
            out,
            width: header.len(),
        }
    }

    pub fn row<S: AsRef<str>>(&mut self, cells: &[S]) {
        debug_assert_eq!(cells.len(), self.width);
        let line: Vec<&str> = cells.iter().map(|c| c.as_ref()).collect();
        self.out.push_str(&line.join(","));
        self.out.push('\n');
    }

    pub fn finish(self) -> String {
        self.out
    }
}

pub const SVG_SIZE: f64 = 640.0;
pub const SVG_RANGE: f64 = 6.0;

/// Fixed palette, one color per series.
pub const PALETTE: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#7f7f7f",
];

fn to_px(p: Vec2) -> (f64, f64) {
    let s = SVG_SIZE / (2.0 * SVG_RANGE);
    ((p.x + SVG_RANGE) * s, (SVG_RANGE - p.y) * s)
}

pub struct ScatterSeries<'a> {
    pub label: &'a str,
    pub color: &'a str,
    pub points: &'a [Vec2],
}

pub struct PathSeries<'a> {
    pub color: &'a str,
    pub points: &'a [Vec2],
    pub dashed: bool,
}

/// 640×640 scatter/trajectory plot over the data square [-6, 6]².
pub fn render_svg(title: &str, scatter: &[ScatterSeries<'_>], paths: &[PathSeries<'_>]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="640" height="640" viewBox="0 0 640 640">"#
    );
    let _ = writeln!(s, r##"<rect width="640" height="640" fill="#ffffff"/>"##);
    let _ = writeln!(
        s,
        r##"<line x1="0" y1="320" x2="640" y2="320" stroke="#dddddd"/><line x1="320" y1="0" x2="320" y2="640" stroke="#dddddd"/>"##
    );
    for p in paths {
        let pts: Vec<String> = p
            .points
            .iter()
            .map(|v| {
                let (x, y) = to_px(*v);
                format!("{x:.2},{y:.2}")
            })
            .collect();
        let dash = if p.dashed {
            r#" stroke-dasharray="4,3""#
        } else {
            ""
        };
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{}" stroke-width="1.2"{dash}/>"#,
            pts.join(" "),
            p.color
        );
    }
    for series in scatter {
        let _ = writeln!(s, r#"<g fill="{}" fill-opacity="0.45">"#, series.color);
        for v in series.points {
            if !v.is_finite() {
                continue;
            }
            let (x, y) = to_px(*v);
            if (-5.0..=645.0).contains(&x) && (-5.0..=645.0).contains(&y) {
                let _ = writeln!(s, r#"<circle cx="{x:.2}" cy="{y:.2}" r="1.6"/>"#);
            }
        }
        let _ = writeln!(s, "</g>");
    }
    let _ = writeln!(
        s,
        r#"<text x="10" y="20" font-family="monospace" font-size="14">{}</text>"#,
        xml_escape(title)
    );
    for (i, series) in scatter.iter().enumerate() {
        let y = 40 + 16 * i;
        let _ = writeln!(
            s,
            r#"<text x="10" y="{y}" font-family="monospace" font-size="12" fill="{}">{}</text>"#,
            series.color,
            xml_escape(series.label)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Line plot of one or more `(x, y)` series with auto-scaled axes.
pub fn render_line_svg(title: &str, x_label: &str, series: &[(&str, &[(f64, f64)])]) -> String {
    let all: Vec<(f64, f64)> = series.iter().flat_map(|(_, p)| p.iter().copied()).collect();
    let (mut x0, mut x1, mut y0, mut y1) = (
        f64::INFINITY,
        f64::NEG_INFINITY,
        f64::INFINITY,
        f64::NEG_INFINITY,
    );
    for (x, y) in all.iter().filter(|(x, y)| x.is_finite() && y.is_finite()) {
        x0 = x0.min(*x);
        x1 = x1.max(*x);
        y0 = y0.min(*y);
        y1 = y1.max(*y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 - x0 < 1e-12 {
        x1 = x0 + 1.0;
    }
    if y1 - y0 < 1e-12 {
        y1 = y0 + 1.0;
    }
    let (left, right, top, bottom) = (60.0, 620.0, 40.0, 580.0);
    let px = |x: f64| left + (x - x0) / (x1 - x0) * (right - left);
    let py = |y: f64| bottom - (y - y0) / (y1 - y0) * (bottom - top);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="640" height="640" viewBox="0 0 640 640">"#
    );
    let _ = writeln!(s, r##"<rect width="640" height="640" fill="#ffffff"/>"##);
    let _ = writeln!(
        s,
        r##"<rect x="{left}" y="{top}" width="{}" height="{}" fill="none" stroke="#999999"/>"##,
        right - left,
        bottom - top
    );
    let _ = writeln!(
        s,
        r#"<text x="{left}" y="600" font-family="monospace" font-size="11">{x0:.3}</text><text x="{}" y="600" font-family="monospace" font-size="11">{x1:.3}</text>"#,
        right - 40.0
    );
    let _ = writeln!(
        s,
        r#"<text x="4" y="{bottom}" font-family="monospace" font-size="11">{y0:.3}</text><text x="4" y="{}" font-family="monospace" font-size="11">{y1:.3}</text>"#,
        top + 10.0
    );
    let _ = writeln!(
        s,
        r#"<text x="300" y="625" font-family="monospace" font-size="12">{}</text>"#,
        xml_escape(x_label)
    );
    for (i, (label, pts)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let coords: Vec<String> = pts
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|(x, y)| format!("{:.2},{:.2}", px(*x), py(*y)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            coords.join(" ")
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" font-family="monospace" font-size="12" fill="{color}">{}</text>"#,
            left + 10.0,
            top + 16.0 * (i as f64 + 1.0),
            xml_escape(label)
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="10" y="20" font-family="monospace" font-size="14">{}</text>"#,
        xml_escape(title)
    );
    s.push_str("</svg>\n");
    s
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}
