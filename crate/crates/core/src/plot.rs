//! Hand-written SVG: heatmaps and bar charts.

use std::fmt::Write as _;

/// A dense grid of values, row-major.
#[derive(Debug, Clone)]
pub struct Grid {
    pub title: String,
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
    pub row_label: String,
    pub col_label: String,
}

/// Diverging blue-white-red scale for `x` in `[-1, 1]`.
fn diverging(x: f64) -> String {
    let x = x.clamp(-1.0, 1.0);
    let (r, g, b) = if x >= 0.0 {
        (255.0, 255.0 * (1.0 - x), 255.0 * (1.0 - x))
    } else {
        (255.0 * (1.0 + x), 255.0 * (1.0 + x), 255.0)
    };
    format!("rgb({},{},{})", r.round() as u8, g.round() as u8, b.round() as u8)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Side-by-side heatmap panels sharing one symmetric color scale.
pub fn heatmaps(title: &str, panels: &[Grid]) -> String {
    let cell = 12.0_f64.min(
        panels
            .iter()
            .map(|p| 600.0 / p.cols.max(1) as f64)
            .fold(f64::INFINITY, f64::min),
    )
    .max(2.0);
    let scale = panels
        .iter()
        .flat_map(|p| p.values.iter())
        .fold(0.0_f64, |m, v| m.max(v.abs()))
        .max(1e-12);
    let pad = 40.0;
    let widths: Vec<f64> = panels.iter().map(|p| p.cols as f64 * cell).collect();
    let height = panels.iter().map(|p| p.rows).max().unwrap_or(0) as f64 * cell;
    let total_w = widths.iter().sum::<f64>() + pad * (panels.len() as f64 + 1.0);
    let total_h = height + 3.0 * pad;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{total_w:.0}" height="{total_h:.0}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<text x="{pad}" y="18" font-size="14">{} (|max| = {scale:.4})</text>"#, escape(title));
    let mut x0 = pad;
    for (p, w) in panels.iter().zip(&widths) {
        let y0 = 2.0 * pad;
        let _ = writeln!(s, r#"<text x="{x0:.1}" y="{:.1}">{}</text>"#, y0 - 6.0, escape(&p.title));
        for r in 0..p.rows {
            for c in 0..p.cols {
                let v = p.values[r * p.cols + c];
                let _ = writeln!(
                    s,
                    r#"<rect x="{:.2}" y="{:.2}" width="{cell:.2}" height="{cell:.2}" fill="{}"><title>{} {r}, {} {c}: {v:.6}</title></rect>"#,
                    x0 + c as f64 * cell,
                    y0 + r as f64 * cell,
                    diverging(v / scale),
                    escape(&p.row_label),
                    escape(&p.col_label),
                );
            }
        }
        let _ = writeln!(
            s,
            r#"<text x="{x0:.1}" y="{:.1}">{} →, {} ↓</text>"#,
            y0 + p.rows as f64 * cell + 14.0,
            escape(&p.col_label),
            escape(&p.row_label)
        );
        x0 += w + pad;
    }
    s.push_str("</svg>\n");
    s
}

/// Vertical bars with value labels.
pub fn bar_chart(title: &str, labels: &[String], values: &[f64], max: f64) -> String {
    let bar = 48.0;
    let gap = 16.0;
    let h = 240.0;
    let pad = 40.0;
    let w = pad * 2.0 + labels.len() as f64 * (bar + gap);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w:.0}" height="{:.0}" font-family="sans-serif" font-size="11">"#,
        h + 3.0 * pad
    );
    let _ = writeln!(s, r#"<text x="{pad}" y="18" font-size="14">{}</text>"#, escape(title));
    let base = pad + h;
    let _ = writeln!(s, r#"<line x1="{pad}" y1="{base}" x2="{:.0}" y2="{base}" stroke="black"/>"#, w - pad);
    for (k, (l, &v)) in labels.iter().zip(values).enumerate() {
        let x = pad + k as f64 * (bar + gap) + gap / 2.0;
        let bh = if max > 0.0 { (v / max).clamp(0.0, 1.0) * h } else { 0.0 };
        let _ = writeln!(s, r#"<rect x="{x:.1}" y="{:.1}" width="{bar}" height="{bh:.1}" fill="steelblue"/>"#, base - bh);
        let _ = writeln!(s, r#"<text x="{x:.1}" y="{:.1}">{v:.2}</text>"#, base - bh - 4.0);
        let _ = writeln!(s, r#"<text x="{x:.1}" y="{:.1}">{}</text>"#, base + 14.0, escape(l));
    }
    s.push_str("</svg>\n");
    s
}
