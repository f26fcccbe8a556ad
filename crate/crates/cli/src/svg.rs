//! Standalone SVG views over CSV tables. Each figure embeds the table it
//! was drawn from in a leading comment.

use std::fmt::Write;

const W: f64 = 480.0;
const H: f64 = 360.0;
const MARGIN: f64 = 56.0;

/// Parsed CSV: header plus rows of raw cells.
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn parse(csv: &str) -> Table {
        let mut lines = csv.lines().filter(|l| !l.is_empty());
        let split = |l: &str| l.split(',').map(str::to_string).collect::<Vec<_>>();
        Table {
            header: lines.next().map(split).unwrap_or_default(),
            rows: lines.map(split).collect(),
        }
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }

    pub fn num(&self, row: usize, col: usize) -> Option<f64> {
        self.rows.get(row)?.get(col)?.parse().ok()
    }
}

fn open(title: &str, csv: &str, w: f64, h: f64) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "<!-- data\n{}-->", csv.replace("--", "- -"));
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="11">"#);
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="18" text-anchor="middle" font-size="13">{}</text>"#, w / 2.0, escape(title));
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn span(v: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = v.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x), b.max(x)));
    if !lo.is_finite() {
        (0.0, 1.0)
    } else if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        let pad = 0.05 * (hi - lo);
        (lo - pad, hi + pad)
    }
}

fn axes(s: &mut String, xlabel: &str, ylabel: &str, (x0, x1): (f64, f64), (y0, y1): (f64, f64)) {
    let (l, r, t, b) = (MARGIN, W - 20.0, 30.0, H - MARGIN);
    let _ = writeln!(s, r#"<path d="M{l} {t} L{l} {b} L{r} {b}" stroke="black" fill="none"/>"#);
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let x = l + f * (r - l);
        let y = b - f * (b - t);
        let _ = writeln!(s, r#"<text x="{x}" y="{}" text-anchor="middle">{:.3}</text>"#, b + 14.0, x0 + f * (x1 - x0));
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{:.3}</text>"#, l - 4.0, y + 4.0, y0 + f * (y1 - y0));
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, (l + r) / 2.0, H - 16.0, escape(xlabel));
    let _ = writeln!(
        s,
        r#"<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">{}</text>"#,
        (t + b) / 2.0,
        (t + b) / 2.0,
        escape(ylabel)
    );
}

/// Scatter of column `x` against column `y`, labelled by column `label`.
pub fn scatter(title: &str, csv: &str, x: &str, y: &str, label: &str) -> String {
    let t = Table::parse(csv);
    let (cx, cy, cl) = (t.column(x), t.column(y), t.column(label));
    let pts: Vec<(f64, f64, String)> = match (cx, cy) {
        (Some(cx), Some(cy)) => (0..t.rows.len())
            .filter_map(|r| Some((t.num(r, cx)?, t.num(r, cy)?, cl.and_then(|c| t.rows[r].get(c).cloned()).unwrap_or_default())))
            .collect(),
        _ => Vec::new(),
    };
    let xs = span(pts.iter().map(|p| p.0));
    let ys = span(pts.iter().map(|p| p.1));
    let mut s = open(title, csv, W, H);
    axes(&mut s, x, y, xs, ys);
    let (l, r, top, b) = (MARGIN, W - 20.0, 30.0, H - MARGIN);
    for (px, py, name) in &pts {
        let sx = l + (px - xs.0) / (xs.1 - xs.0) * (r - l);
        let sy = b - (py - ys.0) / (ys.1 - ys.0) * (b - top);
        let _ = writeln!(s, "<circle cx=\"{sx:.1}\" cy=\"{sy:.1}\" r=\"4\" fill=\"#1f77b4\"/>");
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}">{}</text>"#, sx + 6.0, sy - 6.0, escape(name));
    }
    s.push_str("</svg>\n");
    s
}

fn color(v: f64) -> String {
    let v = v.clamp(0.0, 1.0);
    let c = |a: f64, b: f64| (a + (b - a) * v).round() as u8;
    format!("#{:02x}{:02x}{:02x}", c(247.0, 8.0), c(251.0, 48.0), c(255.0, 107.0))
}

/// Heatmap of a CSV whose first column holds row labels and whose other
/// columns hold values in `[0, 1]`. Empty cells are left blank.
pub fn heatmap(title: &str, csv: &str) -> String {
    let t = Table::parse(csv);
    let rows = t.rows.len();
    let cols = t.header.len().saturating_sub(1);
    let cell = 36.0;
    let (left, top) = (110.0, 40.0);
    let w = left + cell * cols as f64 + 20.0;
    let h = top + cell * rows as f64 + 30.0;
    let mut s = open(title, csv, w.max(240.0), h);
    for (c, name) in t.header.iter().skip(1).enumerate() {
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, left + cell * (c as f64 + 0.5), top - 6.0, escape(name));
    }
    for r in 0..rows {
        let y = top + cell * r as f64;
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#, left - 6.0, y + cell / 2.0 + 4.0, escape(&t.rows[r][0]));
        for c in 0..cols {
            let Some(v) = t.num(r, c + 1) else { continue };
            let x = left + cell * c as f64;
            let _ = writeln!(s, r#"<rect x="{x}" y="{y}" width="{cell}" height="{cell}" fill="{}" stroke="white"/>"#, color(v));
            let ink = if v > 0.55 { "white" } else { "black" };
            let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle" fill="{ink}">{:.2}</text>"#, x + cell / 2.0, y + cell / 2.0 + 4.0, v);
        }
    }
    s.push_str("</svg>\n");
    s
}

/// Grouped bars: one group per row, one bar per numeric column after the
/// first (label) column.
pub fn bars(title: &str, csv: &str, label: &str, series: &[&str]) -> String {
    let t = Table::parse(csv);
    let cl = t.column(label);
    let cols: Vec<usize> = series.iter().filter_map(|s| t.column(s)).collect();
    let groups = t.rows.len().max(1);
    let mut s = open(title, csv, W, H);
    axes(&mut s, label, "accuracy", (0.0, groups as f64), (0.0, 1.0));
    let (l, r, top, b) = (MARGIN, W - 20.0, 30.0, H - MARGIN);
    let gw = (r - l) / groups as f64;
    let bw = gw * 0.8 / cols.len().max(1) as f64;
    let palette = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728"];
    for row in 0..t.rows.len() {
        for (k, &c) in cols.iter().enumerate() {
            let v = t.num(row, c).unwrap_or(0.0).clamp(0.0, 1.0);
            let x = l + gw * row as f64 + gw * 0.1 + bw * k as f64;
            let hgt = v * (b - top);
            let _ = writeln!(s, r#"<rect x="{x:.1}" y="{:.1}" width="{bw:.1}" height="{hgt:.1}" fill="{}"/>"#, b - hgt, palette[k % palette.len()]);
        }
        if let Some(cl) = cl {
            let _ = writeln!(s, r#"<text x="{:.1}" y="{}" text-anchor="middle" font-size="9">{}</text>"#, l + gw * (row as f64 + 0.5), b + 26.0, escape(&t.rows[row][cl]));
        }
    }
    for (k, name) in series.iter().enumerate() {
        let _ = writeln!(s, r#"<rect x="{}" y="{}" width="10" height="10" fill="{}"/>"#, r - 90.0, 34.0 + 14.0 * k as f64, palette[k % palette.len()]);
        let _ = writeln!(s, r#"<text x="{}" y="{}">{}</text>"#, r - 76.0, 43.0 + 14.0 * k as f64, escape(name));
    }
    s.push_str("</svg>\n");
    s
}

/// Recovers the table embedded by any of the figure functions.
pub fn embedded_data(svg: &str) -> Option<String> {
    let start = svg.find("<!-- data\n")? + "<!-- data\n".len();
    let end = svg[start..].find("-->")? + start;
    Some(svg[start..end].to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn figures_carry_their_table() {
        let csv = "value,A,M\n1,0.5,10\n2,0.6,8\n";
        for svg in [scatter("s", csv, "M", "A", "value"), bars("b", csv, "value", &["A"])] {
            assert_eq!(embedded_data(&svg).as_deref(), Some(csv));
            assert!(svg.trim_end().ends_with("</svg>"));
        }
        let grid = "pair,c0,c1\np0,0.9,0.1\np1,,0.8\n";
        let h = heatmap("h", grid);
        assert_eq!(embedded_data(&h).as_deref(), Some(grid));
        assert_eq!(h.matches("<rect x=").count(), 3);
    }

    #[test]
    fn comment_terminators_are_defused() {
        let svg = scatter("s", "a,b\n--1,2\n", "a", "b", "a");
        assert!(!embedded_data(&svg).unwrap().contains("--"));
    }
}
