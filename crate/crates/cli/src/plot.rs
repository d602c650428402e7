//! Minimal SVG chart of a sweep: coverage and inefficiency against alpha.

use std::fmt::Write as _;

use rankcp::pipeline::SummaryRow;

const PANEL_W: f64 = 360.0;
const PANEL_H: f64 = 260.0;
const MARGIN: f64 = 50.0;

struct Axis {
    lo: f64,
    hi: f64,
}

impl Axis {
    fn fit(values: impl Iterator<Item = f64>) -> Axis {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for v in values.filter(|v| v.is_finite()) {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if !lo.is_finite() {
            return Axis { lo: 0.0, hi: 1.0 };
        }
        let pad = ((hi - lo) * 0.1).max(1e-3);
        Axis { lo: lo - pad, hi: hi + pad }
    }

    fn map(&self, v: f64, len: f64) -> f64 {
        (v - self.lo) / (self.hi - self.lo) * len
    }
}

fn panel(
    out: &mut String,
    x0: f64,
    title: &str,
    xs: &[f64],
    ys: &[(f64, f64)],
    reference: Option<&dyn Fn(f64) -> f64>,
) {
    let xa = Axis::fit(xs.iter().copied());
    let mut bounds: Vec<f64> = ys.iter().flat_map(|&(m, s)| [m - s, m + s]).collect();
    if let Some(f) = reference {
        bounds.extend(xs.iter().map(|&x| f(x)));
    }
    let ya = Axis::fit(bounds.into_iter());
    let px = |x: f64| x0 + MARGIN + xa.map(x, PANEL_W - 2.0 * MARGIN);
    let py = |y: f64| PANEL_H - MARGIN - ya.map(y, PANEL_H - 2.0 * MARGIN);
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="20" text-anchor="middle" font-size="14">{title}</text>"#,
        x0 + PANEL_W / 2.0
    );
    let _ = writeln!(
        out,
        r#"<rect x="{:.1}" y="{MARGIN}" width="{:.1}" height="{:.1}" fill="none" stroke="black"/>"#,
        x0 + MARGIN,
        PANEL_W - 2.0 * MARGIN,
        PANEL_H - 2.0 * MARGIN
    );
    for (v, label) in [(ya.lo, ya.lo), (ya.hi, ya.hi)] {
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end" font-size="10">{label:.3}</text>"#,
            x0 + MARGIN - 4.0,
            py(v) + 3.0
        );
    }
    for &x in xs {
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" font-size="10">{x:.2}</text>"#,
            px(x),
            PANEL_H - MARGIN + 14.0
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" font-size="12">alpha</text>"#,
        x0 + PANEL_W / 2.0,
        PANEL_H - 10.0
    );
    if let Some(f) = reference {
        let pts: Vec<String> = xs.iter().map(|&x| format!("{:.1},{:.1}", px(x), py(f(x)))).collect();
        let _ = writeln!(
            out,
            r#"<polyline points="{}" fill="none" stroke="gray" stroke-dasharray="4 3"/>"#,
            pts.join(" ")
        );
    }
    let pts: Vec<String> = xs
        .iter()
        .zip(ys)
        .map(|(&x, &(m, _))| format!("{:.1},{:.1}", px(x), py(m)))
        .collect();
    let _ = writeln!(
        out,
        r#"<polyline points="{}" fill="none" stroke="steelblue" stroke-width="2"/>"#,
        pts.join(" ")
    );
    for (&x, &(m, s)) in xs.iter().zip(ys) {
        let _ = writeln!(
            out,
            r#"<line x1="{0:.1}" y1="{1:.1}" x2="{0:.1}" y2="{2:.1}" stroke="steelblue"/>"#,
            px(x),
            py(m - s),
            py(m + s)
        );
        let _ = writeln!(
            out,
            r#"<circle cx="{:.1}" cy="{:.1}" r="3" fill="steelblue"/>"#,
            px(x),
            py(m)
        );
    }
}

/// Two panels: coverage with the `1 - alpha` target dashed, and inefficiency.
/// Error bars span one standard deviation across runs.
pub fn sweep_svg(rows: &[SummaryRow]) -> String {
    let mut rows: Vec<&SummaryRow> = rows.iter().collect();
    rows.sort_by(|a, b| a.alpha.total_cmp(&b.alpha));
    let xs: Vec<f64> = rows.iter().map(|r| r.alpha).collect();
    let cov: Vec<(f64, f64)> = rows.iter().map(|r| (r.coverage_mean, r.coverage_sd)).collect();
    let ineff: Vec<(f64, f64)> = rows.iter().map(|r| (r.ineff_mean, r.ineff_sd)).collect();
    let mut out = format!(
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{PANEL_H}" font-family="sans-serif">"#,
        2.0 * PANEL_W
    );
    out.push('\n');
    let target = |a: f64| 1.0 - a;
    panel(&mut out, 0.0, "coverage", &xs, &cov, Some(&target));
    panel(&mut out, PANEL_W, "inefficiency", &xs, &ineff, None);
    out.push_str("</svg>\n");
    out
}
