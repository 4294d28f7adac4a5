//! Static SVG rendering for report figures: line charts (λ sweeps, training
//! curves), heatmaps (similarity matrices), and radar charts (per-tag
//! relative performance).
//!
//! Everything is plain string assembly with fixed layout constants and
//! two-decimal pixel coordinates, so identical inputs render byte-identical
//! SVG documents.

use crate::error::{Error, Result};

/// One named polyline on a line chart.
#[derive(Debug, Clone)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

const PALETTE: [&str; 8] = [
    "#1b6ca8", "#d1495b", "#66a182", "#edae49", "#8d5a97", "#00798c", "#d1905a", "#3d5a80",
];

fn esc(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Compact tick label: plain decimal in a mid range, scientific outside it.
fn tick_label(v: f64) -> String {
    if v == 0.0 {
        return "0".to_string();
    }
    let a = v.abs();
    if (0.001..10_000.0).contains(&a) {
        let mut s = format!("{v:.4}");
        while s.contains('.') && s.ends_with('0') {
            s.pop();
        }
        if s.ends_with('.') {
            s.pop();
        }
        s
    } else {
        format!("{v:.2e}")
    }
}

/// Data range, widened to a unit span when degenerate so division by the
/// span is always safe.
fn span(values: impl Iterator<Item = f64>) -> Result<(f64, f64)> {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for v in values {
        if !v.is_finite() {
            return Err(Error::InvalidInput("plot data must be finite".into()));
        }
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if lo > hi {
        return Err(Error::InvalidInput("plot data is empty".into()));
    }
    if lo == hi {
        lo -= 0.5;
        hi += 0.5;
    }
    Ok((lo, hi))
}

/// Render named series as an SVG line chart. Axis ranges hug the data
/// exactly; each series gets a palette color and a legend entry.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> Result<String> {
    const W: f64 = 640.0;
    const H: f64 = 420.0;
    const ML: f64 = 70.0;
    const MR: f64 = 20.0;
    const MT: f64 = 40.0;
    const MB: f64 = 50.0;
    if series.is_empty() || series.iter().any(|s| s.points.is_empty()) {
        return Err(Error::InvalidInput("line chart needs nonempty series".into()));
    }
    let (x_lo, x_hi) = span(series.iter().flat_map(|s| s.points.iter().map(|p| p.0)))?;
    let (y_lo, y_hi) = span(series.iter().flat_map(|s| s.points.iter().map(|p| p.1)))?;
    let px = |x: f64| ML + (x - x_lo) / (x_hi - x_lo) * (W - ML - MR);
    let py = |y: f64| H - MB - (y - y_lo) / (y_hi - y_lo) * (H - MT - MB);

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" \
         viewBox=\"0 0 {W} {H}\" font-family=\"sans-serif\">\n"
    ));
    svg.push_str(&format!(
        "<text x=\"{:.2}\" y=\"24\" font-size=\"15\" text-anchor=\"middle\">{}</text>\n",
        W / 2.0,
        esc(title)
    ));

    // Grid and tick labels: five evenly spaced ticks per axis.
    for i in 0..5 {
        let f = i as f64 / 4.0;
        let xv = x_lo + f * (x_hi - x_lo);
        let yv = y_lo + f * (y_hi - y_lo);
        let (gx, gy) = (px(xv), py(yv));
        svg.push_str(&format!(
            "<line x1=\"{gx:.2}\" y1=\"{MT}\" x2=\"{gx:.2}\" y2=\"{:.2}\" \
             stroke=\"#dddddd\" stroke-width=\"1\"/>\n",
            H - MB
        ));
        svg.push_str(&format!(
            "<line x1=\"{ML}\" y1=\"{gy:.2}\" x2=\"{:.2}\" y2=\"{gy:.2}\" \
             stroke=\"#dddddd\" stroke-width=\"1\"/>\n",
            W - MR
        ));
        svg.push_str(&format!(
            "<text x=\"{gx:.2}\" y=\"{:.2}\" font-size=\"11\" text-anchor=\"middle\">{}</text>\n",
            H - MB + 16.0,
            tick_label(xv)
        ));
        svg.push_str(&format!(
            "<text x=\"{:.2}\" y=\"{:.2}\" font-size=\"11\" text-anchor=\"end\">{}</text>\n",
            ML - 6.0,
            gy + 4.0,
            tick_label(yv)
        ));
    }
    svg.push_str(&format!(
        "<rect x=\"{ML}\" y=\"{MT}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"none\" \
         stroke=\"#333333\"/>\n",
        W - ML - MR,
        H - MT - MB
    ));
    svg.push_str(&format!(
        "<text x=\"{:.2}\" y=\"{:.2}\" font-size=\"12\" text-anchor=\"middle\">{}</text>\n",
        ML + (W - ML - MR) / 2.0,
        H - 12.0,
        esc(x_label)
    ));
    svg.push_str(&format!(
        "<text x=\"16\" y=\"{:.2}\" font-size=\"12\" text-anchor=\"middle\" \
         transform=\"rotate(-90 16 {:.2})\">{}</text>\n",
        MT + (H - MT - MB) / 2.0,
        MT + (H - MT - MB) / 2.0,
        esc(y_label)
    ));

    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> =
            s.points.iter().map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y))).collect();
        svg.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>\n",
            pts.join(" ")
        ));
        for &(x, y) in &s.points {
            svg.push_str(&format!(
                "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"2.5\" fill=\"{color}\"/>\n",
                px(x),
                py(y)
            ));
        }
        let ly = MT + 14.0 + 16.0 * i as f64;
        svg.push_str(&format!(
            "<line x1=\"{:.2}\" y1=\"{ly:.2}\" x2=\"{:.2}\" y2=\"{ly:.2}\" \
             stroke=\"{color}\" stroke-width=\"3\"/>\n",
            W - MR - 130.0,
            W - MR - 106.0
        ));
        svg.push_str(&format!(
            "<text x=\"{:.2}\" y=\"{:.2}\" font-size=\"11\">{}</text>\n",
            W - MR - 100.0,
            ly + 4.0,
            esc(&s.name)
        ));
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

/// White → blue color for a fraction in [0, 1].
fn heat_color(frac: f64) -> String {
    let f = frac.clamp(0.0, 1.0);
    let lerp = |a: f64, b: f64| (a + (b - a) * f).round() as u8;
    format!("#{:02x}{:02x}{:02x}", lerp(255.0, 33.0), lerp(255.0, 102.0), lerp(255.0, 172.0))
}

/// Render a labelled square matrix as an SVG heatmap. Cells are shaded from
/// white (0) to blue (the matrix maximum) and annotated with their values.
pub fn heatmap(title: &str, labels: &[String], values: &[f64]) -> Result<String> {
    let n = labels.len();
    if n == 0 {
        return Err(Error::InvalidInput("heatmap needs at least one label".into()));
    }
    if values.len() != n * n {
        return Err(Error::ShapeMismatch(format!(
            "heatmap got {} values for a {n}x{n} matrix",
            values.len()
        )));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("plot data must be finite".into()));
    }
    const CELL: f64 = 48.0;
    const LEFT: f64 = 110.0;
    const TOP: f64 = 90.0;
    let w = LEFT + CELL * n as f64 + 30.0;
    let h = TOP + CELL * n as f64 + 30.0;
    let vmax = values.iter().cloned().fold(0.0f64, f64::max).max(1e-12);

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w:.0}\" height=\"{h:.0}\" \
         viewBox=\"0 0 {w:.0} {h:.0}\" font-family=\"sans-serif\">\n"
    ));
    svg.push_str(&format!(
        "<text x=\"{:.2}\" y=\"24\" font-size=\"15\" text-anchor=\"middle\">{}</text>\n",
        w / 2.0,
        esc(title)
    ));
    for (j, label) in labels.iter().enumerate() {
        let x = LEFT + CELL * (j as f64 + 0.5);
        svg.push_str(&format!(
            "<text x=\"{x:.2}\" y=\"{:.2}\" font-size=\"12\" text-anchor=\"start\" \
             transform=\"rotate(-40 {x:.2} {:.2})\">{}</text>\n",
            TOP - 8.0,
            TOP - 8.0,
            esc(label)
        ));
    }
    for (i, label) in labels.iter().enumerate() {
        svg.push_str(&format!(
            "<text x=\"{:.2}\" y=\"{:.2}\" font-size=\"12\" text-anchor=\"end\">{}</text>\n",
            LEFT - 8.0,
            TOP + CELL * (i as f64 + 0.5) + 4.0,
            esc(label)
        ));
    }
    for i in 0..n {
        for j in 0..n {
            let v = values[i * n + j];
            let frac = v / vmax;
            let (x, y) = (LEFT + CELL * j as f64, TOP + CELL * i as f64);
            svg.push_str(&format!(
                "<rect x=\"{x:.2}\" y=\"{y:.2}\" width=\"{CELL}\" height=\"{CELL}\" \
                 fill=\"{}\" stroke=\"#888888\"/>\n",
                heat_color(frac)
            ));
            let text_fill = if frac > 0.55 { "#ffffff" } else { "#000000" };
            svg.push_str(&format!(
                "<text x=\"{:.2}\" y=\"{:.2}\" font-size=\"11\" text-anchor=\"middle\" \
                 fill=\"{text_fill}\">{v:.3}</text>\n",
                x + CELL / 2.0,
                y + CELL / 2.0 + 4.0
            ));
        }
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

/// Render one polygon per series on a radar chart with the given axis order.
/// Values are drawn relative to `max(1, data max)`, so proportions above 1
/// (e.g. "better than baseline") stay on the canvas.
pub fn radar_chart(title: &str, axes: &[String], series: &[(String, Vec<f64>)]) -> Result<String> {
    const W: f64 = 520.0;
    const H: f64 = 470.0;
    const CX: f64 = 260.0;
    const CY: f64 = 240.0;
    const R: f64 = 150.0;
    let n = axes.len();
    if n < 3 {
        return Err(Error::InvalidInput("radar chart needs at least three axes".into()));
    }
    if series.is_empty() {
        return Err(Error::InvalidInput("radar chart needs at least one series".into()));
    }
    for (name, vals) in series {
        if vals.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "series {name:?} has {} values for {n} axes",
                vals.len()
            )));
        }
        if vals.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidInput(format!(
                "series {name:?} must be finite and non-negative"
            )));
        }
    }
    let vmax = series
        .iter()
        .flat_map(|(_, v)| v.iter().cloned())
        .fold(1.0f64, f64::max);
    let angle = |i: usize| -std::f64::consts::FRAC_PI_2 + std::f64::consts::TAU * i as f64 / n as f64;
    let point = |i: usize, value: f64| {
        let r = R * value / vmax;
        (CX + r * angle(i).cos(), CY + r * angle(i).sin())
    };

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" \
         viewBox=\"0 0 {W} {H}\" font-family=\"sans-serif\">\n"
    ));
    svg.push_str(&format!(
        "<text x=\"{CX}\" y=\"24\" font-size=\"15\" text-anchor=\"middle\">{}</text>\n",
        esc(title)
    ));
    for ring in [0.25, 0.5, 0.75, 1.0] {
        let pts: Vec<String> = (0..n)
            .map(|i| {
                let (x, y) = point(i, ring * vmax);
                format!("{x:.2},{y:.2}")
            })
            .collect();
        svg.push_str(&format!(
            "<polygon fill=\"none\" stroke=\"#cccccc\" points=\"{}\"/>\n",
            pts.join(" ")
        ));
        svg.push_str(&format!(
            "<text x=\"{:.2}\" y=\"{:.2}\" font-size=\"9\" fill=\"#888888\">{}</text>\n",
            CX + 4.0,
            CY - R * ring - 2.0,
            tick_label(ring * vmax)
        ));
    }
    for (i, label) in axes.iter().enumerate() {
        let (x, y) = point(i, vmax);
        svg.push_str(&format!(
            "<line x1=\"{CX}\" y1=\"{CY}\" x2=\"{x:.2}\" y2=\"{y:.2}\" stroke=\"#cccccc\"/>\n"
        ));
        let (lx, ly) = (CX + 1.13 * R * angle(i).cos(), CY + 1.13 * R * angle(i).sin());
        svg.push_str(&format!(
            "<text x=\"{lx:.2}\" y=\"{:.2}\" font-size=\"12\" text-anchor=\"middle\">{}</text>\n",
            ly + 4.0,
            esc(label)
        ));
    }
    for (s, (name, vals)) in series.iter().enumerate() {
        let color = PALETTE[s % PALETTE.len()];
        let pts: Vec<String> = (0..n)
            .map(|i| {
                let (x, y) = point(i, vals[i]);
                format!("{x:.2},{y:.2}")
            })
            .collect();
        svg.push_str(&format!(
            "<polygon fill=\"{color}\" fill-opacity=\"0.15\" stroke=\"{color}\" \
             stroke-width=\"2\" points=\"{}\"/>\n",
            pts.join(" ")
        ));
        let ly = 40.0 + 16.0 * s as f64;
        svg.push_str(&format!(
            "<rect x=\"16\" y=\"{:.2}\" width=\"18\" height=\"6\" fill=\"{color}\"/>\n",
            ly - 5.0
        ));
        svg.push_str(&format!(
            "<text x=\"40\" y=\"{ly:.2}\" font-size=\"11\">{}</text>\n",
            esc(name)
        ));
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}
