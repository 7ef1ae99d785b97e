use std::fmt::Write;

use crate::matrix::Matrix;
use crate::metrics::histogram;
use crate::trainers::{EvalTarget, EVAL_BINS};

const PANEL_W: f64 = 420.0;
const PANEL_H: f64 = 260.0;
const MARGIN: f64 = 40.0;

/// One panel per data dimension: generated histogram as bars, the reference
/// histogram as an outline, both on the evaluation layout.
pub fn histogram_svg(target: &EvalTarget, generated: &Matrix, title: &str) -> String {
    let d = target.reference.cols;
    let width = PANEL_W * d as f64;
    let height = PANEL_H + 30.0;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{MARGIN}" y="18" font-size="14">{}</text>"#,
        escape(title)
    );
    for j in 0..d {
        let (lo, hi) = (target.lo[j], target.hi[j]);
        let (Ok(real), Ok(fake)) = (
            histogram(&target.reference.column(j), EVAL_BINS, lo, hi),
            histogram(&generated.column(j), EVAL_BINS, lo, hi),
        ) else {
            continue;
        };
        let x0 = PANEL_W * j as f64 + MARGIN;
        let (plot_w, plot_h, top) = (
            PANEL_W - 2.0 * MARGIN,
            PANEL_H - 2.0 * MARGIN,
            30.0 + MARGIN / 2.0,
        );
        let base = top + plot_h;
        let peak = real
            .probs
            .iter()
            .chain(&fake.probs)
            .cloned()
            .fold(1e-12, f64::max);
        let bw = plot_w / EVAL_BINS as f64;

        for (i, p) in fake.probs.iter().enumerate() {
            let h = plot_h * p / peak;
            let _ = writeln!(
                s,
                r##"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="#4a7bd0" fill-opacity="0.6"/>"##,
                x0 + i as f64 * bw,
                base - h,
                bw,
                h
            );
        }
        let mut path = format!("M {x0:.2} {base:.2}");
        for (i, p) in real.probs.iter().enumerate() {
            let y = base - plot_h * p / peak;
            let _ = write!(
                path,
                " L {:.2} {y:.2} L {:.2} {y:.2}",
                x0 + i as f64 * bw,
                x0 + (i + 1) as f64 * bw
            );
        }
        let _ = write!(path, " L {:.2} {base:.2}", x0 + plot_w);
        let _ = writeln!(
            s,
            r##"<path d="{path}" fill="none" stroke="#d04a4a" stroke-width="1.5"/>"##
        );

        // Axis with end and middle ticks.
        let _ = writeln!(
            s,
            r#"<line x1="{x0:.2}" y1="{base:.2}" x2="{:.2}" y2="{base:.2}" stroke="black"/>"#,
            x0 + plot_w
        );
        for (frac, v) in [(0.0, lo), (0.5, 0.5 * (lo + hi)), (1.0, hi)] {
            let x = x0 + frac * plot_w;
            let _ = writeln!(
                s,
                r#"<line x1="{x:.2}" y1="{base:.2}" x2="{x:.2}" y2="{:.2}" stroke="black"/><text x="{x:.2}" y="{:.2}" text-anchor="middle">{v:.2}</text>"#,
                base + 4.0,
                base + 16.0
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{x0:.2}" y="{:.2}">x{j}: bars generated, line target</text>"#,
            top - 6.0
        );
    }
    s.push_str("</svg>\n");
    s
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}
