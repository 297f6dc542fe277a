//! Small static SVG charts with a fixed layout. Output depends only on
//! the input numbers.

use std::fmt::Write;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const LEFT: f64 = 64.0;
const RIGHT: f64 = 160.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 56.0;

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];

pub fn color(i: usize) -> &'static str {
    PALETTE[i % PALETTE.len()]
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

struct Frame {
    body: String,
    y_min: f64,
    y_max: f64,
}

impl Frame {
    fn new(title: &str, y_label: &str, y_min: f64, y_max: f64) -> Self {
        let (y_min, y_max) = if y_max - y_min < 1e-9 {
            (y_min - 0.5, y_max + 0.5)
        } else {
            (y_min, y_max)
        };
        let mut body = String::new();
        let _ = write!(
            body,
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" viewBox=\"0 0 {WIDTH} {HEIGHT}\" font-family=\"sans-serif\" font-size=\"12\">\n\
             <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
             <text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-size=\"15\">{}</text>\n",
            WIDTH / 2.0,
            escape(title)
        );
        let mut f = Self { body, y_min, y_max };
        for k in 0..=4 {
            let v = y_min + (y_max - y_min) * k as f64 / 4.0;
            let y = f.y(v);
            let _ = writeln!(
                f.body,
                "<line x1=\"{LEFT}\" y1=\"{y:.2}\" x2=\"{:.2}\" y2=\"{y:.2}\" stroke=\"#ddd\"/>\
                 <text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"end\">{v:.3}</text>",
                WIDTH - RIGHT,
                LEFT - 6.0,
                y + 4.0
            );
        }
        let _ = writeln!(
            f.body,
            "<text transform=\"translate(16 {:.2}) rotate(-90)\" text-anchor=\"middle\">{}</text>",
            TOP + (HEIGHT - TOP - BOTTOM) / 2.0,
            escape(y_label)
        );
        f
    }

    fn y(&self, v: f64) -> f64 {
        let t = (v - self.y_min) / (self.y_max - self.y_min);
        HEIGHT - BOTTOM - t * (HEIGHT - TOP - BOTTOM)
    }

    fn legend(&mut self, names: &[String]) {
        for (i, n) in names.iter().enumerate() {
            let y = TOP + 18.0 * i as f64;
            let x = WIDTH - RIGHT + 12.0;
            let _ = writeln!(
                self.body,
                "<rect x=\"{x:.2}\" y=\"{:.2}\" width=\"10\" height=\"10\" fill=\"{}\"/>\
                 <text x=\"{:.2}\" y=\"{:.2}\">{}</text>",
                y,
                color(i),
                x + 16.0,
                y + 9.0,
                escape(n)
            );
        }
    }

    fn x_label(&mut self, x: f64, text: &str) {
        let _ = writeln!(
            self.body,
            "<text x=\"{x:.2}\" y=\"{:.2}\" text-anchor=\"middle\">{}</text>",
            HEIGHT - BOTTOM + 18.0,
            escape(text)
        );
    }

    fn finish(mut self, x_title: &str) -> String {
        let _ = writeln!(
            self.body,
            "<line x1=\"{LEFT}\" y1=\"{b:.2}\" x2=\"{:.2}\" y2=\"{b:.2}\" stroke=\"black\"/>\
             <line x1=\"{LEFT}\" y1=\"{TOP}\" x2=\"{LEFT}\" y2=\"{b:.2}\" stroke=\"black\"/>\
             <text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\">{}</text>\n</svg>",
            WIDTH - RIGHT,
            LEFT + (WIDTH - LEFT - RIGHT) / 2.0,
            HEIGHT - 12.0,
            escape(x_title),
            b = HEIGHT - BOTTOM,
        );
        self.body
    }
}

fn bounds<'a>(values: impl Iterator<Item = &'a f64>) -> (f64, f64) {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if lo.is_finite() {
        let pad = ((hi - lo) * 0.1).max(0.01);
        (lo - pad, hi + pad)
    } else {
        (0.0, 1.0)
    }
}

/// One polyline per series over shared categorical x positions.
pub fn line_chart(title: &str, x_title: &str, y_title: &str, x_labels: &[String], series: &[(String, Vec<f64>)]) -> String {
    let (lo, hi) = bounds(series.iter().flat_map(|s| s.1.iter()));
    let mut f = Frame::new(title, y_title, lo, hi);
    let n = x_labels.len().max(1);
    let step = (WIDTH - LEFT - RIGHT) / n as f64;
    let x = |i: usize| LEFT + step * (i as f64 + 0.5);
    for (i, l) in x_labels.iter().enumerate() {
        f.x_label(x(i), l);
    }
    for (k, (_, values)) in series.iter().enumerate() {
        let pts: Vec<String> = values
            .iter()
            .enumerate()
            .filter(|(_, v)| v.is_finite())
            .map(|(i, &v)| format!("{:.2},{:.2}", x(i), f.y(v)))
            .collect();
        let _ = writeln!(
            f.body,
            "<polyline fill=\"none\" stroke=\"{}\" stroke-width=\"2\" points=\"{}\"/>",
            color(k),
            pts.join(" ")
        );
        for p in &pts {
            let (px, py) = p.split_once(',').expect("formatted above");
            let _ = writeln!(f.body, "<circle cx=\"{px}\" cy=\"{py}\" r=\"3\" fill=\"{}\"/>", color(k));
        }
    }
    let names: Vec<String> = series.iter().map(|s| s.0.clone()).collect();
    f.legend(&names);
    f.finish(x_title)
}

/// Grouped bars: one group per category, one bar per series.
pub fn bar_chart(title: &str, y_title: &str, categories: &[String], series: &[(String, Vec<f64>)]) -> String {
    let hi = series
        .iter()
        .flat_map(|s| s.1.iter())
        .filter(|v| v.is_finite())
        .fold(0.0f64, |a, &b| a.max(b));
    let mut f = Frame::new(title, y_title, 0.0, if hi > 0.0 { hi * 1.05 } else { 1.0 });
    let groups = categories.len().max(1);
    let group_w = (WIDTH - LEFT - RIGHT) / groups as f64;
    let bar_w = group_w * 0.8 / series.len().max(1) as f64;
    for (g, c) in categories.iter().enumerate() {
        f.x_label(LEFT + group_w * (g as f64 + 0.5), c);
    }
    let base = f.y(0.0);
    for (k, (_, values)) in series.iter().enumerate() {
        for (g, &v) in values.iter().enumerate().filter(|(_, v)| v.is_finite()) {
            let x = LEFT + group_w * g as f64 + group_w * 0.1 + bar_w * k as f64;
            let y = f.y(v);
            let _ = writeln!(
                f.body,
                "<rect x=\"{x:.2}\" y=\"{y:.2}\" width=\"{bar_w:.2}\" height=\"{:.2}\" fill=\"{}\"/>",
                (base - y).max(0.0),
                color(k)
            );
        }
    }
    let names: Vec<String> = series.iter().map(|s| s.0.clone()).collect();
    f.legend(&names);
    f.finish("")
}

/// Labelled points, one colour per group.
pub fn scatter(title: &str, x_title: &str, y_title: &str, groups: &[(String, Vec<(f64, f64, String)>)]) -> String {
    let (ylo, yhi) = bounds(groups.iter().flat_map(|g| g.1.iter().map(|p| &p.1)));
    let (xlo, xhi) = bounds(groups.iter().flat_map(|g| g.1.iter().map(|p| &p.0)));
    let mut f = Frame::new(title, y_title, ylo, yhi);
    let x = |v: f64| LEFT + (v - xlo) / (xhi - xlo) * (WIDTH - LEFT - RIGHT);
    for k in 0..=4 {
        let v = xlo + (xhi - xlo) * k as f64 / 4.0;
        f.x_label(x(v), &format!("{v:.4}"));
    }
    for (k, (_, pts)) in groups.iter().enumerate() {
        for (px, py, label) in pts.iter().filter(|p| p.0.is_finite() && p.1.is_finite()) {
            let _ = writeln!(
                f.body,
                "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"4\" fill=\"{}\"/><text x=\"{:.2}\" y=\"{:.2}\" font-size=\"10\">{}</text>",
                x(*px),
                f.y(*py),
                color(k),
                x(*px) + 5.0,
                f.y(*py) - 5.0,
                escape(label)
            );
        }
    }
    let names: Vec<String> = groups.iter().map(|g| g.0.clone()).collect();
    f.legend(&names);
    f.finish(x_title)
}
