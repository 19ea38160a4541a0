//! Report CSV writers and minimal SVG line/bar charts.
//!
//! Floats are printed with Rust's shortest round-trip formatting, so
//! re-running a stage with identical seeds reproduces byte-identical CSV
//! bodies.

use std::fmt::Write as _;

/// One aggregated value with seed/scenario spread.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

pub fn mean_std(values: &[f64]) -> MeanStd {
    let n = values.len();
    if n == 0 {
        return MeanStd {
            mean: f64::NAN,
            std: f64::NAN,
            n,
        };
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let std = if n > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    MeanStd { mean, std, n }
}

pub struct CsvWriter {
    out: String,
    columns: usize,
}

impl CsvWriter {
    pub fn new(header: &[&str]) -> Self {
        let mut out = String::new();
        out.push_str(&header.join(","));
        out.push('\n');
        CsvWriter {
            out,
            columns: header.len(),
        }
    }

    pub fn row(&mut self, cells: &[String]) {
        assert_eq!(cells.len(), self.columns, "csv row arity");
        self.out.push_str(&cells.join(","));
        self.out.push('\n');
    }

    pub fn finish(self) -> String {
        self.out
    }
}

/// Formats a float the way every CSV in the pipeline does.
pub fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

const CHART_W: f64 = 640.0;
const CHART_H: f64 = 400.0;
const MARGIN: f64 = 56.0;
const PALETTE: [&str; 6] = [
    "#1b6ca8", "#d1495b", "#66a182", "#edae49", "#8d6a9f", "#3c3c3b",
];

fn axis_frame(title: &str, x_label: &str, y_label: &str) -> String {
    let mut s = String::new();
    let _ = write!(
        s,
        r#"<rect width="{CHART_W}" height="{CHART_H}" fill="white"/>
<text x="{:.1}" y="24" text-anchor="middle" font-size="15" font-family="sans-serif">{title}</text>
<line x1="{MARGIN}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="black"/>
<line x1="{MARGIN}" y1="{MARGIN}" x2="{MARGIN}" y2="{:.1}" stroke="black"/>
<text x="{:.1}" y="{:.1}" text-anchor="middle" font-size="12" font-family="sans-serif">{x_label}</text>
<text x="16" y="{:.1}" text-anchor="middle" font-size="12" font-family="sans-serif" transform="rotate(-90 16 {:.1})">{y_label}</text>
"#,
        CHART_W / 2.0,
        CHART_H - MARGIN,
        CHART_W - MARGIN / 2.0,
        CHART_H - MARGIN,
        CHART_H - MARGIN,
        CHART_W / 2.0,
        CHART_H - 16.0,
        CHART_H / 2.0,
        CHART_H / 2.0,
    );
    s
}

/// Multi-series line chart; each series is (label, [(x, y)]).
pub fn line_chart_svg(
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[(String, Vec<(f64, f64)>)],
) -> String {
    let points: Vec<(f64, f64)> = series.iter().flat_map(|(_, p)| p.iter().copied()).collect();
    let (x_min, x_max) = bounds(points.iter().map(|p| p.0));
    let (y_min, y_max) = bounds(points.iter().map(|p| p.1));
    let y_min = y_min.min(0.0);
    let sx = |x: f64| MARGIN + (x - x_min) / (x_max - x_min).max(1e-12) * (CHART_W - 1.5 * MARGIN);
    let sy = |y: f64| {
        CHART_H - MARGIN - (y - y_min) / (y_max - y_min).max(1e-12) * (CHART_H - 2.0 * MARGIN)
    };

    let mut svg = format!(
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{CHART_W}" height="{CHART_H}" viewBox="0 0 {CHART_W} {CHART_H}">"#
    );
    svg.push_str(&axis_frame(title, x_label, y_label));
    for (si, (label, pts)) in series.iter().enumerate() {
        let color = PALETTE[si % PALETTE.len()];
        let path: Vec<String> = pts
            .iter()
            .enumerate()
            .map(|(i, (x, y))| {
                format!("{}{:.2},{:.2}", if i == 0 { "M" } else { "L" }, sx(*x), sy(*y))
            })
            .collect();
        let _ = write!(
            svg,
            r#"<path d="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            path.join(" ")
        );
        for (x, y) in pts {
            let _ = write!(
                svg,
                r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{color}"/>"#,
                sx(*x),
                sy(*y)
            );
        }
        let _ = write!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" font-size="12" font-family="sans-serif" fill="{color}">{label}</text>"#,
            CHART_W - MARGIN + 4.0,
            MARGIN + 16.0 * si as f64,
        );
    }
    // Axis extremes.
    let _ = write!(
        svg,
        r#"<text x="{MARGIN}" y="{:.1}" font-size="10" font-family="sans-serif">{x_min}</text><text x="{:.1}" y="{:.1}" font-size="10" font-family="sans-serif">{x_max}</text><text x="{:.1}" y="{:.1}" font-size="10" font-family="sans-serif" text-anchor="end">{}</text><text x="{:.1}" y="{MARGIN}" font-size="10" font-family="sans-serif" text-anchor="end">{}</text>"#,
        CHART_H - MARGIN + 14.0,
        CHART_W - 1.5 * MARGIN,
        CHART_H - MARGIN + 14.0,
        MARGIN - 4.0,
        CHART_H - MARGIN,
        trim_sig(y_min),
        MARGIN - 4.0,
        trim_sig(y_max),
    );
    svg.push_str("</svg>\n");
    svg
}

/// Simple labeled bar chart.
pub fn bar_chart_svg(title: &str, y_label: &str, bars: &[(String, f64)]) -> String {
    let y_max = bars.iter().map(|(_, v)| *v).fold(0.0f64, f64::max).max(1e-12);
    let n = bars.len().max(1) as f64;
    let band = (CHART_W - 1.5 * MARGIN) / n;
    let mut svg = format!(
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{CHART_W}" height="{CHART_H}" viewBox="0 0 {CHART_W} {CHART_H}">"#
    );
    svg.push_str(&axis_frame(title, "", y_label));
    for (i, (label, value)) in bars.iter().enumerate() {
        let h = value / y_max * (CHART_H - 2.0 * MARGIN);
        let x = MARGIN + i as f64 * band + band * 0.15;
        let y = CHART_H - MARGIN - h;
        let color = PALETTE[i % PALETTE.len()];
        let _ = write!(
            svg,
            r#"<rect x="{x:.1}" y="{y:.1}" width="{:.1}" height="{h:.1}" fill="{color}"/>
<text x="{:.1}" y="{:.1}" font-size="10" font-family="sans-serif" text-anchor="middle">{label}</text>
<text x="{:.1}" y="{:.1}" font-size="10" font-family="sans-serif" text-anchor="middle">{}</text>"#,
            band * 0.7,
            x + band * 0.35,
            CHART_H - MARGIN + 14.0,
            x + band * 0.35,
            y - 4.0,
            trim_sig(*value),
        );
    }
    svg.push_str("</svg>\n");
    svg
}

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    for v in values {
        min = min.min(v);
        max = max.max(v);
    }
    if !min.is_finite() || !max.is_finite() {
        (0.0, 1.0)
    } else if min == max {
        (min - 0.5, max + 0.5)
    } else {
        (min, max)
    }
}

fn trim_sig(v: f64) -> String {
    format!("{v:.4}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_rows_join_with_commas() {
        let mut w = CsvWriter::new(&["a", "b"]);
        w.row(&["1".into(), "2.5".into()]);
        assert_eq!(w.finish(), "a,b\n1,2.5\n");
    }

    #[test]
    fn mean_std_of_singleton_has_zero_spread() {
        let ms = mean_std(&[4.0]);
        assert_eq!(ms.mean, 4.0);
        assert_eq!(ms.std, 0.0);
    }

    #[test]
    fn mean_std_matches_hand_values() {
        let ms = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(ms.mean, 2.0);
        assert!((ms.std - 1.0).abs() < 1e-12);
    }

    #[test]
    fn float_formatting_round_trips() {
        for v in [0.1, 1.0 / 3.0, 123456.789, 1e-12] {
            assert_eq!(fmt_f64(v).parse::<f64>().unwrap(), v);
        }
    }

    #[test]
    fn charts_emit_svg() {
        let svg = line_chart_svg(
            "demo",
            "x",
            "y",
            &[("s".into(), vec![(0.0, 1.0), (1.0, 2.0)])],
        );
        assert!(svg.starts_with("<svg"));
        assert!(svg.ends_with("</svg>\n"));
        let bars = bar_chart_svg("demo", "y", &[("a".into(), 1.0), ("b".into(), 0.5)]);
        assert!(bars.contains("<rect"));
    }
}
