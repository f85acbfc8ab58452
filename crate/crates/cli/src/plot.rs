//! Dependency-free SVG rendering of run artifacts.

use crate::eval::quantile;
use aerobatch::environment::{Obstacle, ObstacleScene};
use aerobatch::kinematics::Vec3;
use std::fmt::Write;

const PANEL_W: f64 = 640.0;
const PANEL_H: f64 = 220.0;
const MARGIN: f64 = 48.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

pub struct Panel {
    pub title: String,
    pub x_label: String,
    pub series: Vec<Series>,
}

fn fmt_num(v: f64) -> String {
    if v == 0.0 || (v.abs() >= 1e-2 && v.abs() < 1e4) {
        format!("{}", (v * 1000.0).round() / 1000.0)
    } else {
        format!("{v:.2e}")
    }
}

fn extent(vals: impl Iterator<Item = f64>) -> (f64, f64) {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in vals.filter(|v| v.is_finite()) {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

fn header(w: f64, h: f64) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\" font-family=\"sans-serif\" font-size=\"11\">\n<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n"
    )
}

fn panel_svg(out: &mut String, p: &Panel, y0: f64) {
    let (x_lo, x_hi) = extent(p.series.iter().flat_map(|s| s.points.iter().map(|q| q.0)));
    let (y_lo, y_hi) = extent(p.series.iter().flat_map(|s| s.points.iter().map(|q| q.1)));
    let (pw, ph) = (PANEL_W - 2.0 * MARGIN, PANEL_H - 2.0 * MARGIN);
    let sx = |x: f64| MARGIN + (x - x_lo) / (x_hi - x_lo) * pw;
    let sy = |y: f64| y0 + MARGIN + ph - (y - y_lo) / (y_hi - y_lo) * ph;
    let _ = writeln!(
        out,
        "<text x=\"{}\" y=\"{}\" font-size=\"13\">{}</text>",
        MARGIN,
        y0 + MARGIN - 10.0,
        p.title
    );
    let _ = writeln!(
        out,
        "<rect x=\"{MARGIN}\" y=\"{}\" width=\"{pw}\" height=\"{ph}\" fill=\"none\" stroke=\"#444\"/>",
        y0 + MARGIN
    );
    for k in 0..=4 {
        let fx = x_lo + (x_hi - x_lo) * k as f64 / 4.0;
        let fy = y_lo + (y_hi - y_lo) * k as f64 / 4.0;
        let _ = writeln!(
            out,
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>",
            sx(fx),
            y0 + PANEL_H - MARGIN + 14.0,
            fmt_num(fx)
        );
        let _ = writeln!(
            out,
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{}</text>",
            MARGIN - 4.0,
            sy(fy) + 4.0,
            fmt_num(fy)
        );
    }
    let _ = writeln!(
        out,
        "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>",
        MARGIN + pw / 2.0,
        y0 + PANEL_H - 8.0,
        p.x_label
    );
    for (i, s) in p.series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let pts: Vec<String> = s
            .points
            .iter()
            .filter(|q| q.0.is_finite() && q.1.is_finite())
            .map(|q| format!("{:.2},{:.2}", sx(q.0), sy(q.1)))
            .collect();
        let _ = writeln!(
            out,
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.3\" points=\"{}\"/>",
            pts.join(" ")
        );
        let _ = writeln!(
            out,
            "<text x=\"{:.1}\" y=\"{:.1}\" fill=\"{color}\">{}</text>",
            PANEL_W - MARGIN - 90.0,
            y0 + MARGIN + 14.0 * (i + 1) as f64,
            s.name
        );
    }
}

/// Vertically stacked line panels sharing one document.
pub fn panels_svg(panels: &[Panel]) -> String {
    let mut out = header(PANEL_W, PANEL_H * panels.len() as f64);
    for (i, p) in panels.iter().enumerate() {
        panel_svg(&mut out, p, i as f64 * PANEL_H);
    }
    out.push_str("</svg>\n");
    out
}

/// Columns of a CSV with a header row.
pub fn csv_columns(text: &str, names: &[&str]) -> Result<Vec<Vec<f64>>, String> {
    let mut lines = text.lines();
    let head: Vec<&str> = lines.next().ok_or("empty csv")?.split(',').collect();
    let idx: Vec<usize> = names
        .iter()
        .map(|n| head.iter().position(|h| h == n).ok_or(format!("csv has no column {n}")))
        .collect::<Result<_, _>>()?;
    let mut cols = vec![Vec::new(); names.len()];
    for (ln, line) in lines.enumerate() {
        let cells: Vec<&str> = line.split(',').collect();
        for (c, &i) in cols.iter_mut().zip(&idx) {
            let v = cells
                .get(i)
                .and_then(|s| s.parse::<f64>().ok())
                .ok_or(format!("row {}: bad value in column {}", ln + 2, head[i]))?;
            c.push(v);
        }
    }
    Ok(cols)
}

/// Thrust magnitude and body-rate panels from a trajectory CSV.
pub fn profile_svg(csv: &str) -> Result<String, String> {
    let c = csv_columns(csv, &["t", "fx", "fy", "fz", "wx", "wy", "wz"])?;
    let t = &c[0];
    let thrust: Vec<(f64, f64)> = (0..t.len())
        .map(|i| (t[i], Vec3::new(c[1][i], c[2][i], c[3][i]).norm()))
        .collect();
    let rate = |k: usize, name: &str| Series {
        name: name.into(),
        points: t.iter().zip(&c[k]).map(|(a, b)| (*a, *b)).collect(),
    };
    Ok(panels_svg(&[
        Panel {
            title: "collective thrust |f| (N)".into(),
            x_label: "t (s)".into(),
            series: vec![Series {
                name: "|f|".into(),
                points: thrust,
            }],
        },
        Panel {
            title: "body rates (rad/s)".into(),
            x_label: "t (s)".into(),
            series: vec![rate(4, "wx"), rate(5, "wy"), rate(6, "wz")],
        },
    ]))
}

/// Loss curve panel from the training CSV.
pub fn loss_svg(csv: &str) -> Result<String, String> {
    let c = csv_columns(csv, &["step", "recon", "vel", "total"])?;
    let s = |k: usize, name: &str| Series {
        name: name.into(),
        points: c[0].iter().zip(&c[k]).map(|(a, b)| (*a, b.max(1e-12).log10())).collect(),
    };
    Ok(panels_svg(&[Panel {
        title: "training loss (log10)".into(),
        x_label: "step".into(),
        series: vec![s(1, "recon"), s(2, "vel"), s(3, "total")],
    }]))
}

/// Top-down view of a path with obstacle footprints.
pub fn top_down_svg(scene: &ObstacleScene, paths: &[Vec<Vec3>], targets: &[Vec3]) -> String {
    let b = &scene.bounds;
    let scale = (PANEL_W - 2.0 * MARGIN) / (b.max.x - b.min.x).max(b.max.y - b.min.y).max(1e-9);
    let w = 2.0 * MARGIN + (b.max.x - b.min.x) * scale;
    let h = 2.0 * MARGIN + (b.max.y - b.min.y) * scale;
    let sx = |x: f64| MARGIN + (x - b.min.x) * scale;
    let sy = |y: f64| h - MARGIN - (y - b.min.y) * scale;
    let mut out = header(w, h);
    let _ = writeln!(
        out,
        "<rect x=\"{MARGIN}\" y=\"{MARGIN}\" width=\"{:.1}\" height=\"{:.1}\" fill=\"none\" stroke=\"#444\"/>",
        w - 2.0 * MARGIN,
        h - 2.0 * MARGIN
    );
    for o in &scene.obstacles {
        match o {
            Obstacle::Cylinder { center, radius, .. } => {
                let _ = writeln!(
                    out,
                    "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"{:.2}\" fill=\"#999\"/>",
                    sx(center.x),
                    sy(center.y),
                    radius * scale
                );
            }
            Obstacle::Box { center, half } => {
                let _ = writeln!(
                    out,
                    "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"#999\"/>",
                    sx(center.x - half.x),
                    sy(center.y + half.y),
                    2.0 * half.x * scale,
                    2.0 * half.y * scale
                );
            }
            Obstacle::Wall { point, normal } => {
                // only vertical walls have a footprint line
                if normal.z.abs() < 0.99 {
                    let dir = Vec3::new(-normal.y, normal.x, 0.0).normalize() * 1e3;
                    let _ = writeln!(
                        out,
                        "<line x1=\"{:.2}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\" stroke=\"#666\" stroke-width=\"3\"/>",
                        sx(point.x - dir.x),
                        sy(point.y - dir.y),
                        sx(point.x + dir.x),
                        sy(point.y + dir.y)
                    );
                }
            }
        }
    }
    for (i, p) in paths.iter().enumerate() {
        let pts: Vec<String> = p.iter().map(|q| format!("{:.2},{:.2}", sx(q.x), sy(q.y))).collect();
        let _ = writeln!(
            out,
            "<polyline fill=\"none\" stroke=\"{}\" stroke-width=\"1.5\" points=\"{}\"/>",
            COLORS[i % COLORS.len()],
            pts.join(" ")
        );
    }
    for t in targets {
        let _ = writeln!(
            out,
            "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"4\" fill=\"none\" stroke=\"#d62728\" stroke-width=\"1.5\"/>",
            sx(t.x),
            sy(t.y)
        );
    }
    out.push_str("</svg>\n");
    out
}

/// Five-number summary with linear-interpolation quantiles; whiskers at the
/// 0 and 1 quantiles.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxStats {
    pub whisker_lo: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub whisker_hi: f64,
}

impl BoxStats {
    pub fn of(data: &[f64]) -> Self {
        Self {
            whisker_lo: quantile(data, 0.0),
            q1: quantile(data, 0.25),
            median: quantile(data, 0.5),
            q3: quantile(data, 0.75),
            whisker_hi: quantile(data, 1.0),
        }
    }
}

/// Box plots of named groups; each box carries its statistics as data attributes.
pub fn boxplot_svg(title: &str, groups: &[(String, Vec<f64>)]) -> String {
    let stats: Vec<BoxStats> = groups.iter().map(|g| BoxStats::of(&g.1)).collect();
    let (lo, hi) = extent(stats.iter().flat_map(|s| [s.whisker_lo, s.whisker_hi]));
    let ph = PANEL_H * 1.5 - 2.0 * MARGIN;
    let sy = |y: f64| MARGIN + ph - (y - lo) / (hi - lo) * ph;
    let mut out = header(PANEL_W, PANEL_H * 1.5);
    let _ = writeln!(out, "<text x=\"{MARGIN}\" y=\"{}\" font-size=\"13\">{title}</text>", MARGIN - 10.0);
    let slot = (PANEL_W - 2.0 * MARGIN) / groups.len().max(1) as f64;
    for k in 0..=4 {
        let v = lo + (hi - lo) * k as f64 / 4.0;
        let _ = writeln!(
            out,
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{}</text>",
            MARGIN - 4.0,
            sy(v) + 4.0,
            fmt_num(v)
        );
    }
    for (i, ((name, _), s)) in groups.iter().zip(&stats).enumerate() {
        let cx = MARGIN + slot * (i as f64 + 0.5);
        let bw = slot * 0.4;
        let _ = writeln!(
            out,
            "<g class=\"box\" data-name=\"{name}\" data-whisker-lo=\"{}\" data-q1=\"{}\" data-median=\"{}\" data-q3=\"{}\" data-whisker-hi=\"{}\">",
            s.whisker_lo, s.q1, s.median, s.q3, s.whisker_hi
        );
        let _ = writeln!(
            out,
            "<line x1=\"{cx:.2}\" y1=\"{:.2}\" x2=\"{cx:.2}\" y2=\"{:.2}\" stroke=\"#333\"/>",
            sy(s.whisker_lo),
            sy(s.whisker_hi)
        );
        let _ = writeln!(
            out,
            "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"{bw:.2}\" height=\"{:.2}\" fill=\"#cfe2f3\" stroke=\"#333\"/>",
            cx - bw / 2.0,
            sy(s.q3),
            (sy(s.q1) - sy(s.q3)).max(0.0)
        );
        let _ = writeln!(
            out,
            "<line x1=\"{:.2}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\" stroke=\"#d62728\" stroke-width=\"2\"/>",
            cx - bw / 2.0,
            sy(s.median),
            cx + bw / 2.0,
            sy(s.median)
        );
        let _ = writeln!(
            out,
            "<text x=\"{cx:.2}\" y=\"{:.2}\" text-anchor=\"middle\">{name}</text>\n</g>",
            MARGIN + ph + 16.0
        );
    }
    out.push_str("</svg>\n");
    out
}
