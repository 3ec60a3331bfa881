//! Raw float arrays, PGM previews and the cost-vs-work plot.

use std::fmt::Write as _;
use std::io;
use std::path::Path;

pub fn write_f32(path: &Path, values: &[f64]) -> io::Result<()> {
    let bytes: Vec<u8> = values.iter().flat_map(|&v| (v as f32).to_le_bytes()).collect();
    std::fs::write(path, bytes)
}

pub fn read_f32(path: &Path) -> io::Result<Vec<f64>> {
    let bytes = std::fs::read(path)?;
    if bytes.len() % 4 != 0 {
        return Err(io::Error::new(
            io::ErrorKind::InvalidData,
            format!("{}: length {} is not a multiple of 4", path.display(), bytes.len()),
        ));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

/// 8-bit binary PGM of a `side × side` image mapped linearly from `[lo, hi]`.
pub fn write_pgm(path: &Path, image: &[f64], side: usize, lo: f64, hi: f64) -> io::Result<()> {
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut bytes = format!("P5\n{side} {side}\n255\n").into_bytes();
    bytes.extend(
        image
            .iter()
            .map(|v| (((v - lo) / span).clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    std::fs::write(path, bytes)
}

pub struct Series {
    pub label: String,
    /// `(row accesses, cost)` pairs.
    pub points: Vec<(f64, f64)>,
}

const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

/// Line plot of cost (log scale) against cumulative row accesses.
pub fn cost_vs_work_svg(series: &[Series]) -> String {
    let (w, h, left, right, top, bottom) = (640.0, 420.0, 80.0, 20.0, 20.0, 60.0);
    let pts = series.iter().flat_map(|s| s.points.iter()).filter(|p| p.1 > 0.0);
    let (mut x_max, mut y_lo, mut y_hi) = (1.0_f64, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts {
        x_max = x_max.max(x);
        y_lo = y_lo.min(y.log10());
        y_hi = y_hi.max(y.log10());
    }
    if !y_lo.is_finite() {
        (y_lo, y_hi) = (0.0, 1.0);
    }
    if y_hi - y_lo < 1e-6 {
        y_hi = y_lo + 1.0;
    }
    let px = |x: f64| left + x / x_max * (w - left - right);
    let py = |y: f64| top + (y_hi - y.log10()) / (y_hi - y_lo) * (h - top - bottom);

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<polyline points="{left},{top} {left},{} {},{}" fill="none" stroke="black"/>"#,
        h - bottom,
        w - right,
        h - bottom
    );
    for k in 0..=4 {
        let x = x_max * k as f64 / 4.0;
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{}" text-anchor="middle">{x:.3e}</text>"#,
            px(x),
            h - bottom + 18.0
        );
        let y = 10f64.powf(y_lo + (y_hi - y_lo) * k as f64 / 4.0);
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{:.1}" text-anchor="end">{y:.4e}</text>"#,
            left - 6.0,
            py(y) + 4.0
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" text-anchor="middle">projector row accesses</text>"#,
        (left + w - right) / 2.0,
        h - 12.0
    );
    let _ = writeln!(
        svg,
        r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">cost (log scale)</text>"#,
        (top + h - bottom) / 2.0,
        (top + h - bottom) / 2.0
    );
    for (i, s) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let line: Vec<String> = s
            .points
            .iter()
            .filter(|p| p.1 > 0.0)
            .map(|&(x, y)| format!("{:.1},{:.1}", px(x), py(y)))
            .collect();
        let _ = writeln!(
            svg,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            line.join(" ")
        );
        let ly = top + 16.0 * (i as f64 + 1.0);
        let _ = writeln!(
            svg,
            r#"<line x1="{}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/><text x="{}" y="{}">{}</text>"#,
            w - right - 170.0,
            w - right - 150.0,
            w - right - 144.0,
            ly + 4.0,
            escape(&s.label)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
