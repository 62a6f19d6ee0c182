//! Static SVG emission for rank curves, CPA correlation traces, and
//! saliency overlays. Output is deterministic text: identical inputs give
//! identical bytes.

use crate::analysis::{CpaResult, WeightMap};
use crate::attack::RankCurve;

const WIDTH: f64 = 860.0;
const HEIGHT: f64 = 460.0;
const MARGIN_L: f64 = 64.0;
const MARGIN_R: f64 = 18.0;
const MARGIN_T: f64 = 34.0;
const MARGIN_B: f64 = 46.0;

struct Frame {
    x_min: f64,
    x_max: f64,
    y_min: f64,
    y_max: f64,
}

impl Frame {
    fn around(x_min: f64, x_max: f64, ys: &[&[f64]]) -> Frame {
        let mut y_min = f64::INFINITY;
        let mut y_max = f64::NEG_INFINITY;
        for s in ys {
            for &v in *s {
                if v.is_finite() {
                    y_min = y_min.min(v);
                    y_max = y_max.max(v);
                }
            }
        }
        if !y_min.is_finite() {
            y_min = 0.0;
            y_max = 1.0;
        }
        if y_max - y_min < 1e-12 {
            // Flat data still needs a nonzero span to map onto pixels.
            y_min -= 0.5;
            y_max += 0.5;
        }
        Frame { x_min, x_max: x_max.max(x_min + 1e-9), y_min, y_max }
    }

    fn px(&self, x: f64) -> f64 {
        MARGIN_L + (x - self.x_min) / (self.x_max - self.x_min) * (WIDTH - MARGIN_L - MARGIN_R)
    }

    fn py(&self, y: f64) -> f64 {
        HEIGHT - MARGIN_B
            - (y - self.y_min) / (self.y_max - self.y_min) * (HEIGHT - MARGIN_T - MARGIN_B)
    }
}

fn fmt(v: f64) -> String {
    if v == v.trunc() && v.abs() < 1e7 {
        format!("{}", v as i64)
    } else {
        format!("{v:.3}")
    }
}

fn polyline(frame: &Frame, xs: impl Iterator<Item = f64>, ys: &[f64], style: &str) -> String {
    let pts: Vec<String> = xs
        .zip(ys)
        .map(|(x, &y)| format!("{:.2},{:.2}", frame.px(x), frame.py(y)))
        .collect();
    format!("<polyline fill=\"none\" {} points=\"{}\"/>\n", style, pts.join(" "))
}

/// Axis ticks at round-ish intervals; 5 divisions.
fn ticks(lo: f64, hi: f64) -> Vec<f64> {
    (0..=5).map(|i| lo + (hi - lo) * f64::from(i) / 5.0).collect()
}

fn chrome(frame: &Frame, title: &str, x_label: &str, y_label: &str) -> String {
    let mut s = String::new();
    s.push_str(&format!(
        "<rect x=\"{MARGIN_L}\" y=\"{MARGIN_T}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"#888\"/>\n",
        WIDTH - MARGIN_L - MARGIN_R,
        HEIGHT - MARGIN_T - MARGIN_B
    ));
    for t in ticks(frame.x_min, frame.x_max) {
        let x = frame.px(t);
        s.push_str(&format!(
            "<line x1=\"{x:.2}\" y1=\"{}\" x2=\"{x:.2}\" y2=\"{}\" stroke=\"#888\"/>\n",
            HEIGHT - MARGIN_B,
            HEIGHT - MARGIN_B + 5.0
        ));
        s.push_str(&format!(
            "<text x=\"{x:.2}\" y=\"{}\" font-size=\"12\" text-anchor=\"middle\" fill=\"#333\">{}</text>\n",
            HEIGHT - MARGIN_B + 19.0,
            fmt(t)
        ));
    }
    for t in ticks(frame.y_min, frame.y_max) {
        let y = frame.py(t);
        s.push_str(&format!(
            "<line x1=\"{}\" y1=\"{y:.2}\" x2=\"{MARGIN_L}\" y2=\"{y:.2}\" stroke=\"#888\"/>\n",
            MARGIN_L - 5.0
        ));
        s.push_str(&format!(
            "<text x=\"{}\" y=\"{:.2}\" font-size=\"12\" text-anchor=\"end\" fill=\"#333\">{}</text>\n",
            MARGIN_L - 9.0,
            y + 4.0,
            fmt(t)
        ));
    }
    s.push_str(&format!(
        "<text x=\"{:.2}\" y=\"20\" font-size=\"15\" text-anchor=\"middle\" fill=\"#111\">{}</text>\n",
        (MARGIN_L + WIDTH - MARGIN_R) / 2.0,
        title
    ));
    s.push_str(&format!(
        "<text x=\"{:.2}\" y=\"{}\" font-size=\"13\" text-anchor=\"middle\" fill=\"#333\">{}</text>\n",
        (MARGIN_L + WIDTH - MARGIN_R) / 2.0,
        HEIGHT - 10.0,
        x_label
    ));
    s.push_str(&format!(
        "<text x=\"16\" y=\"{:.2}\" font-size=\"13\" text-anchor=\"middle\" fill=\"#333\" transform=\"rotate(-90 16 {:.2})\">{}</text>\n",
        (MARGIN_T + HEIGHT - MARGIN_B) / 2.0,
        (MARGIN_T + HEIGHT - MARGIN_B) / 2.0,
        y_label
    ));
    s
}

fn svg_open() -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" viewBox=\"0 0 {WIDTH} {HEIGHT}\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    )
}

/// Average rank vs. number of attack traces, with a 10th–90th percentile
/// band behind the mean.
pub fn rank_curve_svg(curve: &RankCurve, title: &str) -> String {
    let n = curve.n_max();
    let frame = Frame::around(
        1.0,
        n as f64,
        &[&curve.mean, &curve.p10, &curve.p90],
    );
    let mut s = svg_open();
    // Percentile band as a closed polygon: p90 forward, p10 backward.
    let mut pts = Vec::with_capacity(2 * n);
    for i in 0..n {
        pts.push(format!(
            "{:.2},{:.2}",
            frame.px((i + 1) as f64),
            frame.py(curve.p90[i])
        ));
    }
    for i in (0..n).rev() {
        pts.push(format!(
            "{:.2},{:.2}",
            frame.px((i + 1) as f64),
            frame.py(curve.p10[i])
        ));
    }
    s.push_str(&format!(
        "<polygon fill=\"#4a90d9\" fill-opacity=\"0.18\" stroke=\"none\" points=\"{}\"/>\n",
        pts.join(" ")
    ));
    s.push_str(&polyline(
        &frame,
        (1..=n).map(|i| i as f64),
        &curve.mean,
        "stroke=\"#1f4f8f\" stroke-width=\"1.8\"",
    ));
    s.push_str(&chrome(&frame, title, "number of attack traces", "average rank"));
    s.push_str("</svg>\n");
    s
}

/// One hypothesis row of a CPA result against the sample axis.
pub fn cpa_svg(res: &CpaResult, row: usize, title: &str) -> String {
    let y: Vec<f64> = res.corr.row(row).to_vec();
    let frame = Frame::around(0.0, (y.len().max(2) - 1) as f64, &[&y]);
    let mut s = svg_open();
    if frame.y_min < 0.0 && frame.y_max > 0.0 {
        let zy = frame.py(0.0);
        s.push_str(&format!(
            "<line x1=\"{MARGIN_L}\" y1=\"{zy:.2}\" x2=\"{:.2}\" y2=\"{zy:.2}\" stroke=\"#bbb\" stroke-dasharray=\"4 3\"/>\n",
            WIDTH - MARGIN_R
        ));
    }
    s.push_str(&polyline(
        &frame,
        (0..y.len()).map(|i| i as f64),
        &y,
        "stroke=\"#b03030\" stroke-width=\"1.2\"",
    ));
    s.push_str(&chrome(&frame, title, "sample index", "correlation"));
    s.push_str("</svg>\n");
    s
}

/// Saliency overlay: the normalized weight map as a filled area over the
/// trace extent, with an optional CPA row underneath for ground truth.
pub fn cgv_overlay_svg(
    map: &WeightMap,
    trace: &[f64],
    cpa_row: Option<&[f64]>,
    title: &str,
) -> String {
    let d = map.expanded.len();
    let weights = map.normalized_expanded();
    let frame = Frame::around(0.0, (d.max(2) - 1) as f64, &[&[0.0, 1.0]]);
    let mut s = svg_open();

    // Weight map as an area from the baseline.
    let base = frame.py(0.0);
    let mut pts = vec![format!("{:.2},{base:.2}", frame.px(0.0))];
    for (t, &w) in weights.iter().enumerate() {
        pts.push(format!("{:.2},{:.2}", frame.px(t as f64), frame.py(w)));
    }
    pts.push(format!("{:.2},{base:.2}", frame.px((d - 1) as f64)));
    s.push_str(&format!(
        "<polygon fill=\"#2e8b57\" fill-opacity=\"0.35\" stroke=\"#2e8b57\" stroke-width=\"0.8\" points=\"{}\"/>\n",
        pts.join(" ")
    ));

    // Trace rescaled into the same [0, 1] panel behind the map.
    if !trace.is_empty() {
        let t_min = trace.iter().cloned().fold(f64::INFINITY, f64::min);
        let t_max = trace.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let span = if t_max - t_min < 1e-12 { 1.0 } else { t_max - t_min };
        let scaled: Vec<f64> = trace.iter().map(|v| (v - t_min) / span).collect();
        s.push_str(&polyline(
            &frame,
            (0..trace.len()).map(|i| i as f64),
            &scaled,
            "stroke=\"#777\" stroke-width=\"0.7\" stroke-opacity=\"0.8\"",
        ));
    }

    // CPA ground truth as |corr| rescaled to the panel.
    if let Some(row) = cpa_row {
        let abs: Vec<f64> = row.iter().map(|v| v.abs()).collect();
        let m = abs.iter().cloned().fold(0.0f64, f64::max);
        if m > 0.0 {
            let scaled: Vec<f64> = abs.iter().map(|v| v / m).collect();
            s.push_str(&polyline(
                &frame,
                (0..scaled.len()).map(|i| i as f64),
                &scaled,
                "stroke=\"#b03030\" stroke-width=\"0.9\" stroke-dasharray=\"5 3\"",
            ));
        }
    }

    s.push_str(&chrome(&frame, title, "sample index", "normalized weight"));
    s.push_str("</svg>\n");
    s
}
