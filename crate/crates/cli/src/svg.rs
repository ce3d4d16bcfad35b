//! Static SVG line charts: one mean curve per series with a ±1 std band.

use std::fmt::Write;

pub struct Series {
    pub label: String,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

pub struct Chart {
    pub title: String,
    pub y_label: String,
    /// Fixed y range; fitted to the bands when `None`.
    pub y_range: Option<(f64, f64)>,
    pub series: Vec<Series>,
}

const WIDTH: f64 = 760.0;
const HEIGHT: f64 = 440.0;
const LEFT: f64 = 72.0;
const RIGHT: f64 = 24.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 56.0;
const MAX_POINTS: usize = 800;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

/// Trailing moving average over `window` points (shorter at the start).
pub fn smooth(values: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    let mut out = Vec::with_capacity(values.len());
    let mut sum = 0.0;
    for (i, v) in values.iter().enumerate() {
        sum += v;
        if i >= window {
            sum -= values[i - window];
        }
        out.push(sum / (i + 1).min(window) as f64);
    }
    out
}

fn nice_step(span: f64, target: usize) -> f64 {
    let raw = span / target.max(1) as f64;
    let mag = 10f64.powf(raw.log10().floor());
    let norm = raw / mag;
    let nice = if norm <= 1.0 {
        1.0
    } else if norm <= 2.0 {
        2.0
    } else if norm <= 5.0 {
        5.0
    } else {
        10.0
    };
    nice * mag
}

fn format_tick(v: f64, step: f64) -> String {
    if step >= 1.0 {
        format!("{v:.0}")
    } else {
        let digits = (-step.log10().floor()) as usize;
        format!("{v:.digits$}")
    }
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

impl Chart {
    pub fn render(&self) -> String {
        let episodes = self.series.iter().map(|s| s.mean.len()).max().unwrap_or(0).max(1);
        let (y_lo, y_hi) = self.y_range.unwrap_or_else(|| {
            let lo = self
                .series
                .iter()
                .flat_map(|s| s.mean.iter().zip(&s.std).map(|(m, d)| m - d))
                .fold(f64::INFINITY, f64::min);
            let hi = self
                .series
                .iter()
                .flat_map(|s| s.mean.iter().zip(&s.std).map(|(m, d)| m + d))
                .fold(f64::NEG_INFINITY, f64::max);
            if !lo.is_finite() || !hi.is_finite() {
                (0.0, 1.0)
            } else if hi - lo < 1e-9 {
                (lo - 0.5, hi + 0.5)
            } else {
                let pad = 0.05 * (hi - lo);
                (lo - pad, hi + pad)
            }
        });
        let plot_w = WIDTH - LEFT - RIGHT;
        let plot_h = HEIGHT - TOP - BOTTOM;
        let x_of = |e: f64| LEFT + plot_w * (e - 1.0) / (episodes.max(2) - 1) as f64;
        let y_of = |v: f64| TOP + plot_h * (1.0 - (v.clamp(y_lo, y_hi) - y_lo) / (y_hi - y_lo));

        let mut svg = String::new();
        let _ = writeln!(
            svg,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
        );
        let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="22" text-anchor="middle" font-size="15">{}</text>"#,
            WIDTH / 2.0,
            escape(&self.title)
        );

        // grid and ticks
        let y_step = nice_step(y_hi - y_lo, 5);
        let mut v = (y_lo / y_step).ceil() * y_step;
        while v <= y_hi + 1e-9 * y_step {
            let y = y_of(v);
            let _ = writeln!(
                svg,
                "<line x1=\"{LEFT}\" y1=\"{y:.1}\" x2=\"{:.1}\" y2=\"{y:.1}\" stroke=\"#e5e5e5\"/>",
                LEFT + plot_w
            );
            let _ = writeln!(
                svg,
                r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#,
                LEFT - 6.0,
                y + 4.0,
                format_tick(v, y_step)
            );
            v += y_step;
        }
        let x_step = nice_step(episodes as f64, 6).max(1.0);
        let mut e = x_step;
        while e <= episodes as f64 + 1e-9 {
            let x = x_of(e);
            let _ = writeln!(
                svg,
                r#"<line x1="{x:.1}" y1="{:.1}" x2="{x:.1}" y2="{:.1}" stroke="black"/>"#,
                TOP + plot_h,
                TOP + plot_h + 5.0
            );
            let _ = writeln!(
                svg,
                r#"<text x="{x:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
                TOP + plot_h + 19.0,
                format_tick(e, x_step)
            );
            e += x_step;
        }
        let _ = writeln!(
            svg,
            r#"<rect x="{LEFT}" y="{TOP}" width="{plot_w}" height="{plot_h}" fill="none" stroke="black"/>"#
        );
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">episode</text>"#,
            LEFT + plot_w / 2.0,
            HEIGHT - 14.0
        );
        let _ = writeln!(
            svg,
            r#"<text x="18" y="{:.1}" text-anchor="middle" transform="rotate(-90 18 {:.1})">{}</text>"#,
            TOP + plot_h / 2.0,
            TOP + plot_h / 2.0,
            escape(&self.y_label)
        );

        for (k, s) in self.series.iter().enumerate() {
            let color = COLORS[k % COLORS.len()];
            let n = s.mean.len();
            let stride = n.div_ceil(MAX_POINTS).max(1);
            let idx: Vec<usize> = (0..n)
                .step_by(stride)
                .chain((n > 0 && (n - 1) % stride != 0).then_some(n - 1))
                .collect();
            let upper: Vec<String> = idx
                .iter()
                .map(|&i| format!("{:.1},{:.1}", x_of((i + 1) as f64), y_of(s.mean[i] + s.std[i])))
                .collect();
            let lower: Vec<String> = idx
                .iter()
                .rev()
                .map(|&i| format!("{:.1},{:.1}", x_of((i + 1) as f64), y_of(s.mean[i] - s.std[i])))
                .collect();
            let _ = writeln!(
                svg,
                r#"<polygon points="{} {}" fill="{color}" fill-opacity="0.18" stroke="none"/>"#,
                upper.join(" "),
                lower.join(" ")
            );
            let line: Vec<String> = idx
                .iter()
                .map(|&i| format!("{:.1},{:.1}", x_of((i + 1) as f64), y_of(s.mean[i])))
                .collect();
            let _ = writeln!(
                svg,
                r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.6"/>"#,
                line.join(" ")
            );
            let ly = TOP + 14.0 + 16.0 * k as f64;
            let lx = LEFT + plot_w - 150.0;
            let _ = writeln!(
                svg,
                r#"<line x1="{lx:.1}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="{color}" stroke-width="3"/>"#,
                ly - 4.0,
                lx + 18.0,
                ly - 4.0
            );
            let _ = writeln!(
                svg,
                r#"<text x="{:.1}" y="{ly:.1}">{}</text>"#,
                lx + 24.0,
                escape(&s.label)
            );
        }
        svg.push_str("</svg>\n");
        svg
    }
}
