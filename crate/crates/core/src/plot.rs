//! Self-contained SVG line and bar charts.
//!
//! Each data series is written twice: as drawable geometry and as a
//! `data-values` attribute holding the exact numbers, so charts can be
//! parsed back without a renderer.

use std::fmt::Write as _;

const W: f64 = 720.0;
const H: f64 = 400.0;
const PAD_L: f64 = 70.0;
const PAD_R: f64 = 160.0;
const PAD_T: f64 = 40.0;
const PAD_B: f64 = 50.0;
const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

#[derive(Clone, Debug)]
pub struct LineChart {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<Series>,
}

#[derive(Clone, Debug)]
pub struct BarChart {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    /// One group per category, one bar per series inside each group.
    pub series: Vec<(String, Vec<f64>)>,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn num(v: f64) -> String {
    format!("{:.8e}", v)
}

fn bounds(vals: impl Iterator<Item = f64>) -> (f64, f64) {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in vals.filter(|v| v.is_finite()) {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if (hi - lo).abs() < 1e-300 {
        return (lo - 0.5, hi + 0.5);
    }
    (lo, hi)
}

fn header(out: &mut String, title: &str, x_label: &str, y_label: &str) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(out, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{}" y="22" text-anchor="middle" font-size="15">{}</text>"#,
        (PAD_L + W - PAD_R) / 2.0,
        escape(title)
    );
    let _ = writeln!(
        out,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        (PAD_L + W - PAD_R) / 2.0,
        H - 12.0,
        escape(x_label)
    );
    let _ = writeln!(
        out,
        r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"#,
        H / 2.0,
        H / 2.0,
        escape(y_label)
    );
    let _ = writeln!(
        out,
        r#"<rect x="{PAD_L}" y="{PAD_T}" width="{}" height="{}" fill="none" stroke="black"/>"#,
        W - PAD_L - PAD_R,
        H - PAD_T - PAD_B
    );
}

fn axis_ticks(out: &mut String, (x0, x1): (f64, f64), (y0, y1): (f64, f64)) {
    let pw = W - PAD_L - PAD_R;
    let ph = H - PAD_T - PAD_B;
    for i in 0..=4 {
        let t = i as f64 / 4.0;
        let x = PAD_L + t * pw;
        let y = PAD_T + ph - t * ph;
        let _ = writeln!(
            out,
            r#"<text x="{x:.1}" y="{:.1}" text-anchor="middle">{:.4}</text>"#,
            PAD_T + ph + 16.0,
            x0 + t * (x1 - x0)
        );
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{:.4}</text>"#,
            PAD_L - 6.0,
            y + 4.0,
            y0 + t * (y1 - y0)
        );
    }
}

impl LineChart {
    pub fn to_svg(&self) -> String {
        let (x0, x1) = bounds(
            self.series
                .iter()
                .flat_map(|s| s.points.iter().map(|p| p.0)),
        );
        let (y0, y1) = bounds(
            self.series
                .iter()
                .flat_map(|s| s.points.iter().map(|p| p.1)),
        );
        let pw = W - PAD_L - PAD_R;
        let ph = H - PAD_T - PAD_B;
        let sx = |x: f64| PAD_L + (x - x0) / (x1 - x0) * pw;
        let sy = |y: f64| PAD_T + ph - (y - y0) / (y1 - y0) * ph;

        let mut out = String::new();
        header(&mut out, &self.title, &self.x_label, &self.y_label);
        axis_ticks(&mut out, (x0, x1), (y0, y1));
        for (i, s) in self.series.iter().enumerate() {
            let color = PALETTE[i % PALETTE.len()];
            let pts: Vec<String> = s
                .points
                .iter()
                .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
                .collect();
            let data: Vec<String> = s
                .points
                .iter()
                .map(|&(x, y)| format!("{},{}", num(x), num(y)))
                .collect();
            let _ = writeln!(
                out,
                r#"<g class="series" data-name="{}" data-values="{}">"#,
                escape(&s.name),
                data.join(" ")
            );
            let _ = writeln!(
                out,
                r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
                pts.join(" ")
            );
            let _ = writeln!(out, "</g>");
            let ly = PAD_T + 14.0 + 18.0 * i as f64;
            let _ = writeln!(
                out,
                r#"<line x1="{:.1}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{color}" stroke-width="3"/><text x="{:.1}" y="{:.1}">{}</text>"#,
                W - PAD_R + 10.0,
                W - PAD_R + 30.0,
                W - PAD_R + 36.0,
                ly + 4.0,
                escape(&s.name)
            );
        }
        out.push_str("</svg>\n");
        out
    }
}

impl BarChart {
    pub fn to_svg(&self) -> String {
        let cats = self.series.iter().map(|s| s.1.len()).max().unwrap_or(0);
        let (_, y1) = bounds(
            self.series
                .iter()
                .flat_map(|s| s.1.iter().copied())
                .chain([0.0]),
        );
        let y0 = 0.0;
        let pw = W - PAD_L - PAD_R;
        let ph = H - PAD_T - PAD_B;
        let group_w = pw / cats.max(1) as f64;
        let bar_w = group_w * 0.8 / self.series.len().max(1) as f64;

        let mut out = String::new();
        header(&mut out, &self.title, &self.x_label, &self.y_label);
        axis_ticks(&mut out, (0.0, cats as f64), (y0, y1));
        for (i, (name, vals)) in self.series.iter().enumerate() {
            let color = PALETTE[i % PALETTE.len()];
            let data: Vec<String> = vals
                .iter()
                .enumerate()
                .map(|(c, &v)| format!("{},{}", num(c as f64), num(v)))
                .collect();
            let _ = writeln!(
                out,
                r#"<g class="series" data-name="{}" data-values="{}" fill="{color}">"#,
                escape(name),
                data.join(" ")
            );
            for (c, &v) in vals.iter().enumerate() {
                let h = (v - y0) / (y1 - y0) * ph;
                let x = PAD_L + c as f64 * group_w + group_w * 0.1 + i as f64 * bar_w;
                let _ = writeln!(
                    out,
                    r#"<rect x="{x:.2}" y="{:.2}" width="{bar_w:.2}" height="{:.2}"/>"#,
                    PAD_T + ph - h,
                    h.max(0.0)
                );
            }
            let _ = writeln!(out, "</g>");
            let ly = PAD_T + 14.0 + 18.0 * i as f64;
            let _ = writeln!(
                out,
                r#"<rect x="{:.1}" y="{:.1}" width="20" height="8" fill="{color}"/><text x="{:.1}" y="{:.1}">{}</text>"#,
                W - PAD_R + 10.0,
                ly - 4.0,
                W - PAD_R + 36.0,
                ly + 4.0,
                escape(name)
            );
        }
        out.push_str("</svg>\n");
        out
    }
}

/// Recovers `(name, points)` from the `data-values` attributes of a chart
/// written by this module.
pub fn parse_series(svg: &str) -> Vec<Series> {
    let mut out = Vec::new();
    for line in svg.lines() {
        let Some(rest) = line.strip_prefix(r#"<g class="series" data-name=""#) else {
            continue;
        };
        let Some((name, rest)) = rest.split_once('"') else {
            continue;
        };
        let Some(vals) = rest
            .split_once(r#"data-values=""#)
            .and_then(|(_, v)| v.split_once('"'))
            .map(|(v, _)| v)
        else {
            continue;
        };
        let points = vals
            .split_whitespace()
            .filter_map(|p| {
                let (x, y) = p.split_once(',')?;
                Some((x.parse().ok()?, y.parse().ok()?))
            })
            .collect();
        out.push(Series {
            name: name
                .replace("&quot;", "\"")
                .replace("&lt;", "<")
                .replace("&gt;", ">")
                .replace("&amp;", "&"),
            points,
        });
    }
    out
}
