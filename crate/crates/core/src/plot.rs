//! Minimal SVG 1.1 rendering of segmentation output: the data trace colored
//! by per-timestep kernel labels on top, the posterior split-probability
//! curve underneath.

use crate::error::{Error, Result};
use crate::model::Sequence;

const WIDTH: f64 = 900.0;
const HEIGHT: f64 = 420.0;
const MARGIN: f64 = 40.0;
const TRACE_BAND: f64 = 230.0;
const GAP: f64 = 30.0;

const PALETTE: [&str; 10] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
    "#bcbd22", "#17becf",
];

fn color(label: usize) -> &'static str {
    PALETTE[label % PALETTE.len()]
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

struct Scale {
    lo: f64,
    hi: f64,
    out_lo: f64,
    out_hi: f64,
}

impl Scale {
    fn new(lo: f64, hi: f64, out_lo: f64, out_hi: f64) -> Self {
        // Degenerate ranges still need a usable mapping.
        let (lo, hi) = if hi > lo { (lo, hi) } else { (lo - 1.0, lo + 1.0) };
        Scale { lo, hi, out_lo, out_hi }
    }

    fn map(&self, v: f64) -> f64 {
        self.out_lo + (v - self.lo) / (self.hi - self.lo) * (self.out_hi - self.out_lo)
    }
}

fn polyline(points: &[(f64, f64)], stroke: &str, width: f64) -> String {
    if points.len() == 1 {
        let (x, y) = points[0];
        return format!(r#"<circle cx="{x:.2}" cy="{y:.2}" r="2.5" fill="{stroke}"/>"#);
    }
    let coords: Vec<String> =
        points.iter().map(|(x, y)| format!("{x:.2},{y:.2}")).collect();
    format!(
        r#"<polyline points="{}" fill="none" stroke="{stroke}" stroke-width="{width}"/>"#,
        coords.join(" ")
    )
}

/// Renders one sequence. `marginal` and `labels` are per timestep (length N,
/// marginal[0] = 1).
pub fn render_svg(seq: &Sequence, marginal: &[f64], labels: &[usize]) -> Result<String> {
    let n = seq.len();
    if n == 0 {
        return Err(Error::invalid("cannot plot an empty sequence"));
    }
    if marginal.len() != n || labels.len() != n {
        return Err(Error::shape(format!(
            "sequence '{}' has {n} points but {} marginals and {} labels",
            seq.id,
            marginal.len(),
            labels.len()
        )));
    }

    let sx = Scale::new(seq.x[0], seq.x[n - 1], MARGIN, WIDTH - MARGIN);
    let (ymin, ymax) = seq
        .y
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let pad = 0.05 * (ymax - ymin);
    let trace_top = MARGIN;
    let trace_bottom = MARGIN + TRACE_BAND;
    let sy = Scale::new(ymin - pad, ymax + pad, trace_bottom, trace_top);
    let prob_top = trace_bottom + GAP;
    let prob_bottom = HEIGHT - MARGIN;
    let sp = Scale::new(0.0, 1.0, prob_bottom, prob_top);

    let mut body = String::new();
    body.push_str(&format!(
        r#"<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#
    ));
    body.push('\n');
    body.push_str(&format!(
        r#"<text x="{MARGIN}" y="25" font-family="sans-serif" font-size="14">{}</text>"#,
        escape(&seq.id)
    ));
    body.push('\n');

    // One polyline per run of equal labels; runs share their boundary point
    // so the trace stays visually connected.
    let mut start = 0;
    while start < n {
        let mut end = start + 1;
        while end < n && labels[end] == labels[start] {
            end += 1;
        }
        let upto = (end + 1).min(n);
        let points: Vec<(f64, f64)> =
            (start..upto).map(|i| (sx.map(seq.x[i]), sy.map(seq.y[i]))).collect();
        body.push_str(&polyline(&points, color(labels[start]), 1.5));
        body.push('\n');
        start = end;
    }

    // Probability panel: frame, then the marginal curve.
    body.push_str(&format!(
        r##"<rect x="{MARGIN}" y="{prob_top}" width="{:.2}" height="{:.2}" fill="none" stroke="#cccccc"/>"##,
        WIDTH - 2.0 * MARGIN,
        prob_bottom - prob_top
    ));
    body.push('\n');
    let prob_points: Vec<(f64, f64)> =
        (0..n).map(|i| (sx.map(seq.x[i]), sp.map(marginal[i]))).collect();
    body.push_str(&polyline(&prob_points, "#333333", 1.0));
    body.push('\n');
    body.push_str(&format!(
        r#"<text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="11">split probability</text>"#,
        MARGIN,
        prob_top - 8.0
    ));
    body.push('\n');

    Ok(format!(
        "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n<svg xmlns=\"http://www.w3.org/2000/svg\" \
         version=\"1.1\" width=\"{WIDTH}\" height=\"{HEIGHT}\" viewBox=\"0 0 {WIDTH} {HEIGHT}\">\n{body}</svg>\n"
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(n: usize) -> Sequence {
        Sequence {
            id: "plot<&>test".into(),
            x: (0..n).map(|i| i as f64 * 0.1).collect(),
            y: (0..n).map(|i| (i as f64 * 0.7).sin()).collect(),
        }
    }

    #[test]
    fn svg_has_valid_structure() {
        let s = seq(40);
        let marginal: Vec<f64> =
            (0..40).map(|i| if i == 0 { 1.0 } else { (i as f64 / 40.0) * 0.5 }).collect();
        let labels: Vec<usize> = (0..40).map(|i| usize::from(i >= 20)).collect();
        let svg = render_svg(&s, &marginal, &labels).unwrap();

        assert!(svg.starts_with("<?xml version=\"1.0\""));
        assert!(svg.contains(r#"xmlns="http://www.w3.org/2000/svg""#));
        assert!(svg.contains(r#"version="1.1""#));
        assert_eq!(svg.matches("<svg").count(), 1);
        assert_eq!(svg.matches("</svg>").count(), 1);
        assert!(svg.trim_end().ends_with("</svg>"));
        // Two label runs plus the probability curve.
        assert_eq!(svg.matches("<polyline").count(), 3);
        // The raw id must not leak markup.
        assert!(svg.contains("plot&lt;&amp;&gt;test"));
        assert!(!svg.contains("plot<&>"));
        // No unfinished coordinates.
        assert!(!svg.contains("NaN") && !svg.contains("inf"));
    }

    #[test]
    fn single_point_sequences_render_markers() {
        let s = Sequence { id: "p".into(), x: vec![0.0], y: vec![0.5] };
        let svg = render_svg(&s, &[1.0], &[0]).unwrap();
        assert!(svg.contains("<circle"));
        assert!(svg.matches("<svg").count() == 1);
    }

    #[test]
    fn constant_sequences_do_not_divide_by_zero() {
        let s = Sequence { id: "c".into(), x: vec![0.0, 0.1, 0.2], y: vec![1.0; 3] };
        let svg = render_svg(&s, &[1.0, 0.0, 0.0], &[0, 0, 0]).unwrap();
        assert!(!svg.contains("NaN"));
    }

    #[test]
    fn mismatched_lengths_are_rejected() {
        let s = seq(5);
        assert!(render_svg(&s, &[1.0], &[0; 5]).is_err());
        assert!(render_svg(&s, &[1.0, 0.0, 0.0, 0.0, 0.0], &[0; 4]).is_err());
    }
}
