//! Static SVG renderings: skeleton overlays and error curves.

use std::fmt::Write;

const WIDTH: f64 = 480.0;
const HEIGHT: f64 = 480.0;
const MARGIN: f64 = 24.0;
const TRUTH_COLOR: &str = "#1f77b4";
const PRED_COLOR: &str = "#d62728";

/// Orthographic x/y projection of a fixed world box onto the canvas (y up).
pub struct View {
    min: [f64; 2],
    scale: f64,
}

impl View {
    pub fn fit<'a>(points: impl Iterator<Item = &'a [f64; 3]>) -> Self {
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        for p in points {
            for k in 0..2 {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        }
        if !lo[0].is_finite() {
            lo = [0.0; 2];
            hi = [1.0; 2];
        }
        let span = (hi[0] - lo[0]).max(hi[1] - lo[1]).max(1e-9);
        Self {
            min: lo,
            scale: (WIDTH.min(HEIGHT) - 2.0 * MARGIN) / span,
        }
    }

    fn project(&self, p: &[f64; 3]) -> (f64, f64) {
        let x = MARGIN + (p[0] - self.min[0]) * self.scale;
        let y = HEIGHT - MARGIN - (p[1] - self.min[1]) * self.scale;
        (x, y)
    }
}

fn header(out: &mut String, title: &str) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    );
    let _ = writeln!(out, r#"<title>{}</title>"#, escape(title));
    let _ = writeln!(out, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn skeleton(out: &mut String, view: &View, bones: &[(usize, usize)], joints: &[[f64; 3]], class: &str, color: &str) {
    let _ = writeln!(out, r#"<g class="{class}" stroke="{color}" stroke-width="2" fill="{color}">"#);
    for &(a, b) in bones {
        let (x1, y1) = view.project(&joints[a]);
        let (x2, y2) = view.project(&joints[b]);
        let _ = writeln!(out, r#"<line x1="{x1:.3}" y1="{y1:.3}" x2="{x2:.3}" y2="{y2:.3}"/>"#);
    }
    for p in joints {
        let (cx, cy) = view.project(p);
        let _ = writeln!(out, r#"<circle cx="{cx:.3}" cy="{cy:.3}" r="2.5"/>"#);
    }
    out.push_str("</g>\n");
}

/// Ground truth and prediction of one frame drawn over each other.
pub fn skeleton_overlay(view: &View, bones: &[(usize, usize)], truth: &[[f64; 3]], pred: &[[f64; 3]], title: &str) -> String {
    let mut out = String::new();
    header(&mut out, title);
    skeleton(&mut out, view, bones, truth, "ground-truth", TRUTH_COLOR);
    skeleton(&mut out, view, bones, pred, "prediction", PRED_COLOR);
    out.push_str("</svg>\n");
    out
}

/// Error curves (mm) against prediction time (s), one line segment per step.
pub fn error_curves(curves: &[(&str, &[f64])], fps: f64) -> String {
    let mut out = String::new();
    header(&mut out, "MPJPE over the prediction horizon");
    let steps = curves.iter().map(|(_, c)| c.len()).max().unwrap_or(0);
    let top = curves.iter().flat_map(|(_, c)| c.iter().copied()).fold(0.0, f64::max).max(1e-9);
    let x_of = |i: usize| MARGIN + (WIDTH - 2.0 * MARGIN) * i as f64 / (steps.max(2) - 1) as f64;
    let y_of = |v: f64| HEIGHT - MARGIN - (HEIGHT - 2.0 * MARGIN) * v / top;
    let _ = writeln!(
        out,
        r#"<g class="axes" stroke="black"><line x1="{m}" y1="{b}" x2="{r}" y2="{b}"/><line x1="{m}" y1="{t}" x2="{m}" y2="{b}"/></g>"#,
        m = MARGIN,
        b = HEIGHT - MARGIN,
        r = WIDTH - MARGIN,
        t = MARGIN
    );
    let _ = writeln!(
        out,
        r#"<text x="{}" y="{}" font-size="11">{:.2} s, max {:.1} mm</text>"#,
        MARGIN,
        MARGIN - 8.0,
        steps as f64 / fps,
        top
    );
    for (k, (name, curve)) in curves.iter().enumerate() {
        let color = if k == 0 { TRUTH_COLOR } else { PRED_COLOR };
        let _ = writeln!(out, r#"<g class="curve-{}" stroke="{color}" stroke-width="2">"#, escape(name));
        for i in 1..curve.len() {
            let _ = writeln!(
                out,
                r#"<line x1="{:.3}" y1="{:.3}" x2="{:.3}" y2="{:.3}"/>"#,
                x_of(i - 1),
                y_of(curve[i - 1]),
                x_of(i),
                y_of(curve[i])
            );
        }
        out.push_str("</g>\n");
    }
    out.push_str("</svg>\n");
    out
}
