//! Minimal deterministic SVG charts: violin-style distribution comparisons
//! and line plots of curve statistics.

use std::fmt::Write;

const W: f64 = 640.0;
const H: f64 = 400.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 60.0;
const COLOURS: [&str; 8] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"];

/// One column of a distribution chart.
#[derive(Clone, Debug)]
pub enum Column<'a> {
    /// Sampled values, drawn as a mirrored kernel density.
    Samples { label: &'a str, values: &'a [f64] },
    /// A single value, drawn as a black plus.
    Point { label: &'a str, value: f64 },
}

impl Column<'_> {
    fn label(&self) -> &str {
        match self {
            Column::Samples { label, .. } | Column::Point { label, .. } => label,
        }
    }

    fn values(&self) -> Vec<f64> {
        match self {
            Column::Samples { values, .. } => values.to_vec(),
            Column::Point { value, .. } => vec![*value],
        }
    }
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn header(title: &str) -> String {
    let mut s = String::new();
    writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#).unwrap();
    writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#).unwrap();
    writeln!(s, r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#, W / 2.0, esc(title)).unwrap();
    s
}

/// Value range padded by 5%, never degenerate.
fn range(vals: impl Iterator<Item = f64>) -> (f64, f64) {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in vals.filter(|v| v.is_finite()) {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    let pad = if hi > lo { 0.05 * (hi - lo) } else { 0.05 * lo.abs().max(1e-3) };
    (lo - pad, hi + pad)
}

fn y_axis(s: &mut String, lo: f64, hi: f64, label: &str) {
    let y = |v: f64| TOP + (H - TOP - BOTTOM) * (1.0 - (v - lo) / (hi - lo));
    writeln!(s, r#"<line x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{}" stroke="black"/>"#, H - BOTTOM).unwrap();
    for i in 0..=4 {
        let v = lo + (hi - lo) * i as f64 / 4.0;
        let yy = y(v);
        writeln!(s, r#"<line x1="{}" y1="{yy:.2}" x2="{LEFT}" y2="{yy:.2}" stroke="black"/>"#, LEFT - 4.0).unwrap();
        writeln!(s, r#"<text x="{}" y="{:.2}" text-anchor="end">{}</text>"#, LEFT - 6.0, yy + 4.0, fmt_tick(v)).unwrap();
    }
    writeln!(s, r#"<text x="16" y="{:.2}" text-anchor="middle" transform="rotate(-90 16 {:.2})">{}</text>"#, H / 2.0, H / 2.0, esc(label)).unwrap();
}

fn fmt_tick(v: f64) -> String {
    if v != 0.0 && (v.abs() < 1e-2 || v.abs() >= 1e4) { format!("{v:.2e}") } else { format!("{v:.3}") }
}

/// Gaussian kernel density on `grid`, Silverman bandwidth.
fn density(values: &[f64], grid: &[f64]) -> Vec<f64> {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let sd = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    let spread = grid.last().unwrap() - grid[0];
    let bw = (1.06 * sd * n.powf(-0.2)).max(spread * 1e-3).max(1e-12);
    grid.iter().map(|&g| values.iter().map(|&v| (-0.5 * ((g - v) / bw).powi(2)).exp()).sum::<f64>()).collect()
}

/// Violins for sampled columns and plus markers for single values.
pub fn distribution_chart(title: &str, y_label: &str, columns: &[Column]) -> String {
    let mut s = header(title);
    let (lo, hi) = range(columns.iter().flat_map(|c| c.values()));
    y_axis(&mut s, lo, hi, y_label);
    let y = |v: f64| TOP + (H - TOP - BOTTOM) * (1.0 - (v - lo) / (hi - lo));
    let slot = (W - LEFT - RIGHT) / columns.len().max(1) as f64;
    writeln!(s, r#"<line x1="{LEFT}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#, H - BOTTOM, W - RIGHT, H - BOTTOM).unwrap();
    for (i, c) in columns.iter().enumerate() {
        let cx = LEFT + slot * (i as f64 + 0.5);
        let colour = COLOURS[i % COLOURS.len()];
        match c {
            Column::Samples { values, .. } if !values.is_empty() => {
                let grid: Vec<f64> = (0..=60).map(|k| lo + (hi - lo) * k as f64 / 60.0).collect();
                let d = density(values, &grid);
                let peak = d.iter().cloned().fold(0.0, f64::max).max(1e-300);
                let half = 0.4 * slot;
                let mut pts = Vec::new();
                for (g, v) in grid.iter().zip(&d) {
                    pts.push(format!("{:.2},{:.2}", cx + half * v / peak, y(*g)));
                }
                for (g, v) in grid.iter().zip(&d).rev() {
                    pts.push(format!("{:.2},{:.2}", cx - half * v / peak, y(*g)));
                }
                writeln!(s, r#"<polygon points="{}" fill="{colour}" fill-opacity="0.45" stroke="{colour}"/>"#, pts.join(" ")).unwrap();
                let mean = values.iter().sum::<f64>() / values.len() as f64;
                writeln!(s, r#"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="black"/>"#, cx - half * 0.5, y(mean), cx + half * 0.5, y(mean)).unwrap();
            }
            Column::Samples { .. } => {}
            Column::Point { value, .. } => {
                let (px, py) = (cx, y(*value));
                writeln!(s, r#"<path d="M{:.2},{py:.2}H{:.2}M{px:.2},{:.2}V{:.2}" stroke="black" stroke-width="2"/>"#, px - 7.0, px + 7.0, py - 7.0, py + 7.0).unwrap();
            }
        }
        writeln!(s, r#"<text x="{cx:.2}" y="{}" text-anchor="middle">{}</text>"#, H - BOTTOM + 18.0, esc(c.label())).unwrap();
    }
    s.push_str("</svg>\n");
    s
}

/// One line per series over an implicit integer x axis.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[(&str, &[f64])]) -> String {
    let mut s = header(title);
    let (lo, hi) = range(series.iter().flat_map(|(_, v)| v.iter().copied()));
    y_axis(&mut s, lo, hi, y_label);
    let n = series.iter().map(|(_, v)| v.len()).max().unwrap_or(1).max(2);
    let x = |i: usize| LEFT + (W - LEFT - RIGHT) * i as f64 / (n - 1) as f64;
    let y = |v: f64| TOP + (H - TOP - BOTTOM) * (1.0 - (v - lo) / (hi - lo));
    writeln!(s, r#"<line x1="{LEFT}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#, H - BOTTOM, W - RIGHT, H - BOTTOM).unwrap();
    for i in 0..=4 {
        let k = (n - 1) * i / 4;
        writeln!(s, r#"<text x="{:.2}" y="{}" text-anchor="middle">{k}</text>"#, x(k), H - BOTTOM + 16.0).unwrap();
    }
    writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, (LEFT + W - RIGHT) / 2.0, H - 18.0, esc(x_label)).unwrap();
    for (j, (name, v)) in series.iter().enumerate() {
        let colour = COLOURS[j % COLOURS.len()];
        let pts: Vec<String> = v.iter().enumerate().filter(|(_, y)| y.is_finite()).map(|(i, &val)| format!("{:.2},{:.2}", x(i), y(val))).collect();
        writeln!(s, r#"<polyline points="{}" fill="none" stroke="{colour}" stroke-width="1.5"/>"#, pts.join(" ")).unwrap();
        let ly = TOP + 14.0 * j as f64;
        writeln!(s, r#"<line x1="{}" y1="{ly:.2}" x2="{}" y2="{ly:.2}" stroke="{colour}" stroke-width="2"/>"#, W - RIGHT - 150.0, W - RIGHT - 130.0).unwrap();
        writeln!(s, r#"<text x="{}" y="{:.2}">{}</text>"#, W - RIGHT - 125.0, ly + 4.0, esc(name)).unwrap();
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn charts_are_well_formed_and_deterministic() {
        let a = [0.1, 0.2, 0.25, 0.3];
        let cols = [Column::Samples { label: "sr", values: &a }, Column::Point { label: "2d", value: 0.22 }];
        let svg = distribution_chart("vf:am", "value", &cols);
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert_eq!(svg.matches("<polygon").count(), 1);
        assert_eq!(svg.matches("<path").count(), 1);
        assert_eq!(svg, distribution_chart("vf:am", "value", &cols));
        let l = line_chart("2pc", "distance", "p", &[("a", &a), ("b<c", &[1.0, f64::NAN])]);
        assert_eq!(l.matches("<polyline").count(), 2);
        assert!(l.contains("b&lt;c"));
    }

    #[test]
    fn constant_samples_do_not_break_the_density() {
        let a = [0.5; 8];
        let svg = distribution_chart("c", "v", &[Column::Samples { label: "x", values: &a }]);
        assert!(!svg.contains("NaN"));
    }
}
