//! Minimal SVG quick-looks: line/marker plots and heatmaps. Meant for eyeballing
//! a run, not for publication.

use std::fmt::Write as _;

const W: f64 = 480.0;
const H: f64 = 320.0;
const MARGIN: f64 = 48.0;
const COLORS: &[&str] = &[
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b",
];

pub struct Series<'a> {
    pub label: &'a str,
    pub x: &'a [f64],
    pub y: &'a [f64],
}

#[derive(Clone, Copy)]
pub enum Axis {
    Linear,
    Log,
}

fn tf(v: f64, axis: Axis) -> Option<f64> {
    match axis {
        Axis::Linear => v.is_finite().then_some(v),
        Axis::Log => (v > 0.0 && v.is_finite()).then(|| v.log10()),
    }
}

fn range(vals: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| {
        (a.min(v), b.max(v))
    });
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-300 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

fn header(title: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="16" text-anchor="middle" font-size="13">{}</text>"#,
        W / 2.0,
        escape(title)
    );
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

fn frame(s: &mut String, xl: &str, yl: &str, xr: (f64, f64), yr: (f64, f64), axes: (Axis, Axis)) {
    let (x0, y0, x1, y1) = (MARGIN, H - MARGIN, W - 12.0, 28.0);
    let _ = writeln!(
        s,
        r#"<rect x="{x0}" y="{y1}" width="{}" height="{}" fill="none" stroke="black"/>"#,
        x1 - x0,
        y0 - y1
    );
    let fmt = |v: f64, a: Axis| match a {
        Axis::Linear => format!("{v:.3}"),
        Axis::Log => format!("1e{v:.1}"),
    };
    let _ = writeln!(
        s,
        r#"<text x="{x0}" y="{}">{}</text>"#,
        y0 + 14.0,
        fmt(xr.0, axes.0)
    );
    let _ = writeln!(
        s,
        r#"<text x="{x1}" y="{}" text-anchor="end">{}</text>"#,
        y0 + 14.0,
        fmt(xr.1, axes.0)
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{y0}" text-anchor="end">{}</text>"#,
        x0 - 4.0,
        fmt(yr.0, axes.1)
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#,
        x0 - 4.0,
        y1 + 10.0,
        fmt(yr.1, axes.1)
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        (x0 + x1) / 2.0,
        H - 12.0,
        escape(xl)
    );
    let _ = writeln!(
        s,
        r#"<text x="12" y="{}" text-anchor="middle" transform="rotate(-90 12 {})">{}</text>"#,
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0,
        escape(yl)
    );
}

/// Markers joined by lines, one colour per series.
pub fn line_plot(title: &str, xl: &str, yl: &str, series: &[Series], axes: (Axis, Axis)) -> String {
    let pts: Vec<Vec<(f64, f64)>> = series
        .iter()
        .map(|s| {
            s.x.iter()
                .zip(s.y)
                .filter_map(|(&x, &y)| Some((tf(x, axes.0)?, tf(y, axes.1)?)))
                .collect()
        })
        .collect();
    let xr = range(pts.iter().flatten().map(|p| p.0));
    let yr = range(pts.iter().flatten().map(|p| p.1));
    let mut s = header(title);
    frame(&mut s, xl, yl, xr, yr, axes);
    let (x0, y0, x1, y1) = (MARGIN, H - MARGIN, W - 12.0, 28.0);
    let px = |x: f64| x0 + (x - xr.0) / (xr.1 - xr.0) * (x1 - x0);
    let py = |y: f64| y0 - (y - yr.0) / (yr.1 - yr.0) * (y0 - y1);
    for (k, (p, ser)) in pts.iter().zip(series).enumerate() {
        let c = COLORS[k % COLORS.len()];
        let path: Vec<String> = p
            .iter()
            .map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y)))
            .collect();
        if path.len() > 1 {
            let _ = writeln!(
                s,
                r#"<polyline fill="none" stroke="{c}" stroke-width="1.2" points="{}"/>"#,
                path.join(" ")
            );
        }
        for &(x, y) in p {
            let _ = writeln!(
                s,
                r#"<circle cx="{:.2}" cy="{:.2}" r="2" fill="{c}"/>"#,
                px(x),
                py(y)
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" fill="{c}" text-anchor="end">{}</text>"#,
            x1 - 6.0,
            y1 + 14.0 + 13.0 * k as f64,
            escape(ser.label)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Row-major `values[iy][ix]` on a diverging blue/white/red scale.
pub fn heatmap(
    title: &str,
    xl: &str,
    yl: &str,
    x: &[f64],
    y: &[f64],
    values: &[Vec<f64>],
) -> String {
    let xr = range(x.iter().copied());
    let yr = range(y.iter().copied());
    let vmax = values
        .iter()
        .flatten()
        .filter(|v| v.is_finite())
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(1e-300);
    let mut s = header(title);
    frame(&mut s, xl, yl, xr, yr, (Axis::Linear, Axis::Linear));
    let (x0, y0, x1, y1) = (MARGIN, H - MARGIN, W - 12.0, 28.0);
    let cw = (x1 - x0) / x.len().max(1) as f64;
    let ch = (y0 - y1) / y.len().max(1) as f64;
    for (iy, row) in values.iter().enumerate() {
        for (ix, &v) in row.iter().enumerate() {
            if !v.is_finite() {
                continue;
            }
            let t = (v / vmax).clamp(-1.0, 1.0);
            let (r, g, b) = if t >= 0.0 {
                (255.0, 255.0 * (1.0 - t), 255.0 * (1.0 - t))
            } else {
                (255.0 * (1.0 + t), 255.0 * (1.0 + t), 255.0)
            };
            let _ = writeln!(
                s,
                r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="rgb({},{},{})"/>"#,
                x0 + ix as f64 * cw,
                y0 - (iy + 1) as f64 * ch,
                cw + 0.1,
                ch + 0.1,
                r as u8,
                g as u8,
                b as u8
            );
        }
    }
    s.push_str("</svg>\n");
    s
}
