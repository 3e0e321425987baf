//! Minimal bar-chart rendering to standalone SVG.

use std::fmt::Write;

const PANEL_W: f64 = 640.0;
const PANEL_H: f64 = 260.0;
const MARGIN: f64 = 48.0;

#[derive(Clone, Debug, PartialEq)]
pub struct BarChart {
    pub title: String,
    pub bars: Vec<(String, f64)>,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn panel(out: &mut String, chart: &BarChart, top: f64) {
    let plot_h = PANEL_H - 2.0 * MARGIN;
    let plot_w = PANEL_W - 2.0 * MARGIN;
    let hi = chart.bars.iter().map(|b| b.1).fold(0.0, f64::max);
    let lo = chart.bars.iter().map(|b| b.1).fold(0.0, f64::min);
    let span = if hi - lo > 0.0 { hi - lo } else { 1.0 };
    let y_of = |v: f64| top + MARGIN + plot_h * (hi - v) / span;
    let zero = y_of(0.0);

    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="{:.1}" font-size="14" text-anchor="middle">{}</text>"#,
        PANEL_W / 2.0,
        top + MARGIN / 2.0,
        escape(&chart.title)
    );
    let _ = writeln!(
        out,
        r##"<line x1="{m:.1}" y1="{z:.1}" x2="{r:.1}" y2="{z:.1}" stroke="#444"/>"##,
        m = MARGIN,
        z = zero,
        r = PANEL_W - MARGIN
    );
    let n = chart.bars.len().max(1) as f64;
    let slot = plot_w / n;
    for (i, (name, v)) in chart.bars.iter().enumerate() {
        let x = MARGIN + slot * i as f64 + slot * 0.15;
        let (y, h) = if *v >= 0.0 { (y_of(*v), zero - y_of(*v)) } else { (zero, y_of(*v) - zero) };
        let _ = writeln!(
            out,
            r##"<rect x="{x:.1}" y="{y:.1}" width="{w:.1}" height="{h:.1}" fill="#4a78b0"><title>{t}: {v}</title></rect>"##,
            w = slot * 0.7,
            t = escape(name)
        );
        if chart.bars.len() <= 24 {
            let _ = writeln!(
                out,
                r#"<text x="{:.1}" y="{:.1}" font-size="10" text-anchor="middle">{}</text>"#,
                x + slot * 0.35,
                top + PANEL_H - MARGIN / 2.0,
                escape(name)
            );
        }
    }
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="{:.1}" font-size="10" text-anchor="end">{hi:.4}</text>"#,
        MARGIN - 4.0,
        y_of(hi) + 4.0
    );
    if lo < 0.0 {
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" font-size="10" text-anchor="end">{lo:.4}</text>"#,
            MARGIN - 4.0,
            y_of(lo) + 4.0
        );
    }
}

/// Stacks the charts vertically in one document.
pub fn render(charts: &[BarChart]) -> String {
    let height = PANEL_H * charts.len().max(1) as f64;
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{PANEL_W}" height="{height}" viewBox="0 0 {PANEL_W} {height}" font-family="sans-serif">"#
    );
    for (i, c) in charts.iter().enumerate() {
        panel(&mut out, c, PANEL_H * i as f64);
    }
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_rect_per_bar_and_escaped_labels() {
        let c = BarChart {
            title: "a < b".into(),
            bars: vec![("x".into(), 1.0), ("y&z".into(), -0.5), ("w".into(), 0.0)],
        };
        let s = render(&[c.clone(), c]);
        assert!(s.starts_with("<svg"));
        assert!(s.trim_end().ends_with("</svg>"));
        assert_eq!(s.matches("<rect").count(), 6);
        assert!(s.contains("a &lt; b"));
        assert!(s.contains("y&amp;z"));
        assert!(!s.contains("NaN"));
    }

    #[test]
    fn empty_chart_renders() {
        let s = render(&[BarChart {
            title: String::new(),
            bars: vec![],
        }]);
        assert!(s.contains("</svg>"));
    }
}
