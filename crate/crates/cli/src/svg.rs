//! Minimal SVG figures: scatter plots, heatmaps and line plots.

use std::fmt::Write as _;
use std::path::Path;

use ew_core::Error;
use ndarray::Array2;

const W: f64 = 480.0;
const H: f64 = 400.0;
const MARGIN: f64 = 48.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

fn save(path: &Path, body: &str) -> Result<(), Error> {
    std::fs::write(path, body).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })
}

fn header(title: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"24\" font-family=\"sans-serif\" font-size=\"14\" text-anchor=\"middle\">{}</text>\n",
        W / 2.0,
        escape(title)
    )
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Grey level for `t` in [0, 1]; 0 is black.
fn grey(t: f64) -> String {
    let v = (255.0 * t.clamp(0.0, 1.0)).round() as u8;
    format!("#{v:02x}{v:02x}{v:02x}")
}

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(v), h.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

struct Frame {
    x: (f64, f64),
    y: (f64, f64),
}

impl Frame {
    fn px(&self, x: f64) -> f64 {
        MARGIN + (x - self.x.0) / (self.x.1 - self.x.0) * (W - 2.0 * MARGIN)
    }
    fn py(&self, y: f64) -> f64 {
        H - MARGIN - (y - self.y.0) / (self.y.1 - self.y.0) * (H - 2.0 * MARGIN)
    }
    fn axes(&self, out: &mut String, xlabel: &str, ylabel: &str) {
        let _ = writeln!(
            out,
            "<rect x=\"{MARGIN}\" y=\"{MARGIN}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"#444\"/>",
            W - 2.0 * MARGIN,
            H - 2.0 * MARGIN
        );
        let _ = writeln!(
            out,
            "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"middle\">{}</text>",
            W / 2.0,
            H - 12.0,
            escape(xlabel)
        );
        let _ = writeln!(
            out,
            "<text x=\"14\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"middle\" transform=\"rotate(-90 14 {})\">{}</text>",
            H / 2.0,
            H / 2.0,
            escape(ylabel)
        );
        for (v, anchor, x, y) in [
            (self.x.0, "start", MARGIN, H - MARGIN + 14.0),
            (self.x.1, "end", W - MARGIN, H - MARGIN + 14.0),
        ]
        .into_iter()
        .chain([
            (self.y.0, "end", MARGIN - 4.0, H - MARGIN),
            (self.y.1, "end", MARGIN - 4.0, MARGIN + 10.0),
        ]) {
            let _ = writeln!(
                out,
                "<text x=\"{x}\" y=\"{y}\" font-family=\"sans-serif\" font-size=\"10\" text-anchor=\"{anchor}\">{v:.3}</text>"
            );
        }
    }
}

/// One scatter series: name, points and per-point mass.
pub type Series<'a> = (&'a str, &'a [(f64, f64)], &'a [f64]);

/// Scatter plot of named series; marker area grows with mass.
pub fn scatter(path: &Path, title: &str, series: &[Series<'_>]) -> Result<(), Error> {
    let frame = Frame {
        x: bounds(series.iter().flat_map(|s| s.1.iter().map(|p| p.0))),
        y: bounds(series.iter().flat_map(|s| s.1.iter().map(|p| p.1))),
    };
    let mut out = header(title);
    frame.axes(&mut out, "z1", "z2");
    for (si, (name, pts, mass)) in series.iter().enumerate() {
        let colour = PALETTE[si % PALETTE.len()];
        let peak = mass.iter().copied().fold(0.0, f64::max).max(1e-300);
        for (p, m) in pts.iter().zip(mass.iter()) {
            if !(p.0.is_finite() && p.1.is_finite()) || *m <= 0.0 {
                continue;
            }
            let r = 1.5 + 4.0 * (m / peak).sqrt();
            let _ = writeln!(
                out,
                "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"{r:.2}\" fill=\"{colour}\" fill-opacity=\"0.55\"/>",
                frame.px(p.0),
                frame.py(p.1)
            );
        }
        let _ = writeln!(
            out,
            "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\" fill=\"{colour}\">{}</text>",
            W - MARGIN - 90.0,
            MARGIN + 14.0 + 14.0 * si as f64,
            escape(name)
        );
    }
    out.push_str("</svg>\n");
    save(path, &out)
}

/// Heatmap of a matrix; darker cells are smaller values.
pub fn heatmap(path: &Path, title: &str, m: &Array2<f64>) -> Result<(), Error> {
    let (lo, hi) = bounds(m.iter().copied());
    let (rows, cols) = m.dim();
    let cw = (W - 2.0 * MARGIN) / cols.max(1) as f64;
    let ch = (H - 2.0 * MARGIN) / rows.max(1) as f64;
    let mut out = header(title);
    for ((i, j), &v) in m.indexed_iter() {
        let fill = if v.is_finite() {
            grey((v - lo) / (hi - lo))
        } else {
            "#ff00ff".into()
        };
        let _ = writeln!(
            out,
            "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"{fill}\"/>",
            MARGIN + j as f64 * cw,
            MARGIN + i as f64 * ch,
            cw + 0.05,
            ch + 0.05
        );
    }
    let _ = writeln!(
        out,
        "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"10\" text-anchor=\"middle\">black = {lo:.3e}, white = {hi:.3e}</text>",
        W / 2.0,
        H - 16.0
    );
    out.push_str("</svg>\n");
    save(path, &out)
}

/// Line plot of several named series.
pub fn line_plot(
    path: &Path,
    title: &str,
    xlabel: &str,
    ylabel: &str,
    series: &[(&str, Vec<(f64, f64)>)],
) -> Result<(), Error> {
    let frame = Frame {
        x: bounds(series.iter().flat_map(|s| s.1.iter().map(|p| p.0))),
        y: bounds(series.iter().flat_map(|s| s.1.iter().map(|p| p.1))),
    };
    let mut out = header(title);
    frame.axes(&mut out, xlabel, ylabel);
    for (si, (name, pts)) in series.iter().enumerate() {
        let colour = PALETTE[si % PALETTE.len()];
        let coords: Vec<String> = pts
            .iter()
            .filter(|p| p.0.is_finite() && p.1.is_finite())
            .map(|p| format!("{:.2},{:.2}", frame.px(p.0), frame.py(p.1)))
            .collect();
        let _ = writeln!(
            out,
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{colour}\" stroke-width=\"1.8\"/>",
            coords.join(" ")
        );
        let _ = writeln!(
            out,
            "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\" fill=\"{colour}\">{}</text>",
            W - MARGIN - 110.0,
            MARGIN + 14.0 + 14.0 * si as f64,
            escape(name)
        );
    }
    out.push_str("</svg>\n");
    save(path, &out)
}

/// Dark purple at 0 through teal to yellow at 1.
fn ramp(t: f64) -> String {
    const STOPS: [(f64, [f64; 3]); 3] = [
        (0.0, [68.0, 1.0, 84.0]),
        (0.5, [33.0, 145.0, 140.0]),
        (1.0, [253.0, 231.0, 37.0]),
    ];
    let t = t.clamp(0.0, 1.0);
    let (a, b) = if t <= 0.5 {
        (STOPS[0], STOPS[1])
    } else {
        (STOPS[1], STOPS[2])
    };
    let u = (t - a.0) / (b.0 - a.0);
    let c: Vec<u8> = (0..3).map(|k| (a.1[k] + u * (b.1[k] - a.1[k])).round() as u8).collect();
    format!("#{:02x}{:02x}{:02x}", c[0], c[1], c[2])
}

/// Mass on a 2d reference grid; colour and marker size grow with mass
/// (yellow is the most).
pub fn mass_grid(path: &Path, title: &str, points: &Array2<f64>, mass: &[f64]) -> Result<(), Error> {
    let frame = Frame {
        x: bounds(points.column(0).iter().copied()),
        y: bounds(points.column(1).iter().copied()),
    };
    let peak = mass.iter().copied().fold(0.0, f64::max).max(1e-300);
    let mut out = header(title);
    frame.axes(&mut out, "z1", "z2");
    for (p, m) in points.rows().into_iter().zip(mass) {
        let _ = writeln!(
            out,
            "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"{:.2}\" fill=\"{}\"/>",
            frame.px(p[0]),
            frame.py(p[1]),
            2.0 + 3.0 * (m / peak).sqrt(),
            ramp(m / peak)
        );
    }
    out.push_str("</svg>\n");
    save(path, &out)
}
