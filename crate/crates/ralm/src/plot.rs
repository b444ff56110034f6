//! Self-contained SVG line charts of benchmark results.
//!
//! Plots are derived from the rows of a bench CSV only, so they can be
//! regenerated without re-running anything.

use std::fmt::Write;

use crate::bench::{summarize, BenchRow};

const W: f64 = 720.0;
const H: f64 = 440.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 180.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 60.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

/// A "nice" tick step covering `span` in roughly five intervals.
fn tick_step(span: f64) -> f64 {
    if span <= 0.0 || !span.is_finite() {
        return 1.0;
    }
    let raw = span / 5.0;
    let mag = 10f64.powf(raw.log10().floor());
    let norm = raw / mag;
    let nice = if norm <= 1.0 {
        1.0
    } else if norm <= 2.0 {
        2.0
    } else if norm <= 5.0 {
        5.0
    } else {
        10.0
    };
    nice * mag
}

fn fmt_tick(v: f64) -> String {
    if v == v.trunc() && v.abs() < 1e9 {
        format!("{}", v as i64)
    } else {
        let s = format!("{v:.3}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    }
}

/// `(target length, mean, min, max)` seconds.
type Point = (f64, f64, f64, f64);

/// Mean wall time against target length, one series per pattern and
/// stride, with min/max whiskers.
pub fn render_svg(rows: &[BenchRow], title: &str) -> String {
    let summary = summarize(rows);
    let mut series: Vec<(String, Vec<Point>)> = Vec::new();
    let many_strides = summary.iter().any(|s| s.stride != summary[0].stride);
    for s in &summary {
        let name = if many_strides { format!("{} s={}", s.pattern, s.stride) } else { s.pattern.clone() };
        let point = (s.target_len as f64, s.mean_s, s.min_s, s.max_s);
        match series.iter_mut().find(|(n, _)| *n == name) {
            Some((_, pts)) => pts.push(point),
            None => series.push((name, vec![point])),
        }
    }
    for (_, pts) in &mut series {
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    }
    let xs = summary.iter().map(|s| s.target_len as f64);
    let (x_min, x_max) = xs.clone().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x), b.max(x)));
    let y_max = summary.iter().map(|s| s.max_s).fold(0.0, f64::max);
    let (x_min, x_max) = if x_min.is_finite() && x_max > x_min { (x_min, x_max) } else { (0.0, x_max.max(1.0)) };
    let y_step = tick_step(y_max.max(1e-9));
    let y_top = (y_max / y_step).ceil().max(1.0) * y_step;
    let pw = W - LEFT - RIGHT;
    let ph = H - TOP - BOTTOM;
    let sx = |x: f64| LEFT + (x - x_min) / (x_max - x_min) * pw;
    let sy = |y: f64| TOP + ph - y / y_top * ph;

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(svg, r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#, LEFT + pw / 2.0, escape(title));
    // Axes and grid.
    let _ = writeln!(
        svg,
        r#"<path d="M{LEFT} {TOP} V{} H{}" fill="none" stroke="black"/>"#,
        TOP + ph,
        LEFT + pw
    );
    let mut y = 0.0;
    while y <= y_top + y_step * 1e-9 {
        let py = sy(y);
        let _ = writeln!(svg, r##"<line x1="{LEFT}" y1="{py:.2}" x2="{:.2}" y2="{py:.2}" stroke="#ddd"/>"##, LEFT + pw);
        let _ = writeln!(svg, r#"<text x="{}" y="{:.2}" text-anchor="end">{}</text>"#, LEFT - 6.0, py + 4.0, fmt_tick(y));
        y += y_step;
    }
    let mut lens: Vec<f64> = summary.iter().map(|s| s.target_len as f64).collect();
    lens.sort_by(f64::total_cmp);
    lens.dedup();
    for x in &lens {
        let px = sx(*x);
        let _ = writeln!(svg, r#"<line x1="{px:.2}" y1="{}" x2="{px:.2}" y2="{}" stroke="black"/>"#, TOP + ph, TOP + ph + 5.0);
        let _ = writeln!(svg, r#"<text x="{px:.2}" y="{}" text-anchor="middle">{}</text>"#, TOP + ph + 18.0, fmt_tick(*x));
    }
    let _ = writeln!(svg, r#"<text x="{}" y="{}" text-anchor="middle">target length (tokens)</text>"#, LEFT + pw / 2.0, H - 14.0);
    let _ = writeln!(
        svg,
        r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">wall time (s)</text>"#,
        TOP + ph / 2.0,
        TOP + ph / 2.0
    );
    // Series.
    for (i, (name, pts)) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let path: Vec<String> = pts
            .iter()
            .enumerate()
            .map(|(j, p)| format!("{}{:.2} {:.2}", if j == 0 { "M" } else { "L" }, sx(p.0), sy(p.1)))
            .collect();
        let _ = writeln!(svg, r#"<path d="{}" fill="none" stroke="{color}" stroke-width="2"/>"#, path.join(" "));
        for p in pts {
            let (px, lo, hi) = (sx(p.0), sy(p.2), sy(p.3));
            let _ = writeln!(svg, r#"<line x1="{px:.2}" y1="{lo:.2}" x2="{px:.2}" y2="{hi:.2}" stroke="{color}"/>"#);
            let _ = writeln!(svg, r#"<circle cx="{px:.2}" cy="{:.2}" r="3" fill="{color}"/>"#, sy(p.1));
        }
        let ly = TOP + 10.0 + i as f64 * 20.0;
        let lx = LEFT + pw + 16.0;
        let _ = writeln!(svg, r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/>"#, lx + 20.0);
        let _ = writeln!(svg, r#"<text x="{}" y="{}">{}</text>"#, lx + 26.0, ly + 4.0, escape(name));
    }
    svg.push_str("</svg>\n");
    svg
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
