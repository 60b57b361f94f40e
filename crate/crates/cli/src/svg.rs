//! Contour overlay plots: reference as lines, estimate as one point per frame.

use std::fmt::Write as _;

use tonet_core::labels::PitchContour;

const WIDTH: f64 = 900.0;
const HEIGHT: f64 = 420.0;
const LEFT: f64 = 60.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 30.0;
const BOTTOM: f64 = 45.0;
const F_LO: f64 = 32.5;
const F_HI: f64 = 2050.0;

struct Axes {
    t_max: f64,
}

impl Axes {
    fn x(&self, t: f64) -> f64 {
        LEFT + (WIDTH - LEFT - RIGHT) * t / self.t_max
    }

    fn y(&self, f: f64) -> f64 {
        let span = (F_HI / F_LO).log2();
        let u = (f.clamp(F_LO, F_HI) / F_LO).log2() / span;
        HEIGHT - BOTTOM - (HEIGHT - TOP - BOTTOM) * u
    }
}

/// Renders `estimate` (points) over `reference` (line segments across voiced
/// runs). Unvoiced estimate frames sit on the bottom axis with class
/// `unvoiced`, so the point count always equals the estimate's frame count.
pub fn render(estimate: &PitchContour, reference: &PitchContour, title: &str) -> String {
    let last = |c: &PitchContour| c.times().last().copied().unwrap_or(0.0);
    let axes = Axes {
        t_max: last(estimate).max(last(reference)).max(0.01),
    };
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    );
    let _ = writeln!(s, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="18" font-family="sans-serif" font-size="13" text-anchor="middle">{}</text>"#,
        WIDTH / 2.0,
        escape(title)
    );
    let (x0, x1, y0, y1) = (LEFT, WIDTH - RIGHT, TOP, HEIGHT - BOTTOM);
    let _ = writeln!(
        s,
        r##"<g class="axes" stroke="#444" fill="none"><line x1="{x0}" y1="{y1}" x2="{x1}" y2="{y1}"/><line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}"/></g>"##
    );
    let _ = writeln!(s, r#"<g class="yticks" font-family="sans-serif" font-size="10" text-anchor="end">"#);
    for f in [50.0, 100.0, 200.0, 500.0, 1000.0, 2000.0] {
        let y = axes.y(f);
        let _ = writeln!(
            s,
            r##"<line x1="{x0}" y1="{y:.2}" x2="{x1}" y2="{y:.2}" stroke="#ddd"/><text x="{:.2}" y="{:.2}">{f}</text>"##,
            x0 - 4.0,
            y + 3.0
        );
    }
    let _ = writeln!(s, "</g>");
    let _ = writeln!(s, r#"<g class="xticks" font-family="sans-serif" font-size="10" text-anchor="middle">"#);
    let step = tick_step(axes.t_max);
    let mut t = 0.0;
    while t <= axes.t_max + 1e-9 {
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}">{:.2}</text>"#, axes.x(t), y1 + 14.0, t);
        t += step;
    }
    let _ = writeln!(s, "</g>");
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="11" text-anchor="middle">time (s)</text>"#,
        (x0 + x1) / 2.0,
        HEIGHT - 8.0
    );
    let _ = writeln!(
        s,
        r#"<text x="14" y="{:.2}" font-family="sans-serif" font-size="11" text-anchor="middle" transform="rotate(-90 14 {:.2})">frequency (Hz)</text>"#,
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0
    );

    let _ = writeln!(s, r##"<g class="reference" stroke="#1f77b4" stroke-width="2" fill="none">"##);
    let mut run: Vec<String> = Vec::new();
    let flush = |run: &mut Vec<String>, s: &mut String| {
        if !run.is_empty() {
            let _ = writeln!(s, r#"<polyline points="{}"/>"#, run.join(" "));
            run.clear();
        }
    };
    for (&t, &f) in reference.times().iter().zip(reference.freqs()) {
        if f > 0.0 {
            run.push(format!("{:.2},{:.2}", axes.x(t), axes.y(f)));
        } else {
            flush(&mut run, &mut s);
        }
    }
    flush(&mut run, &mut s);
    let _ = writeln!(s, "</g>");

    let _ = writeln!(s, r##"<g class="estimate" fill="#d62728">"##);
    for (&t, &f) in estimate.times().iter().zip(estimate.freqs()) {
        if f > 0.0 {
            let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="1.6"/>"#, axes.x(t), axes.y(f));
        } else {
            let _ = writeln!(
                s,
                r#"<circle class="unvoiced" cx="{:.2}" cy="{:.2}" r="1" fill-opacity="0.3"/>"#,
                axes.x(t),
                y1
            );
        }
    }
    let _ = writeln!(s, "</g>");
    let _ = writeln!(s, "</svg>");
    s
}

fn tick_step(span: f64) -> f64 {
    [0.1, 0.2, 0.5, 1.0, 2.0, 5.0, 10.0, 30.0, 60.0]
        .into_iter()
        .find(|&st| span / st <= 10.0)
        .unwrap_or(120.0)
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
