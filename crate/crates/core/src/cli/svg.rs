//! Minimal static line charts.

use std::fmt::Write;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN: f64 = 48.0;
const PALETTE: [&str; 8] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];

/// Renders every series against the shared `x` values. Non-finite points are skipped.
pub fn line_chart(title: &str, x_label: &str, x: &[f64], series: &[(String, Vec<f64>)]) -> String {
    let finite = |v: &&f64| v.is_finite();
    let (x_lo, x_hi) = bounds(x.iter().filter(finite).copied());
    let (y_lo, y_hi) = bounds(series.iter().flat_map(|s| s.1.iter().filter(finite).copied()));
    let px = |v: f64| MARGIN + (v - x_lo) / (x_hi - x_lo) * (WIDTH - 2.0 * MARGIN);
    let py = |v: f64| HEIGHT - MARGIN - (v - y_lo) / (y_hi - y_lo) * (HEIGHT - 2.0 * MARGIN);

    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    );
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{}" y="20" text-anchor="middle" font-family="sans-serif" font-size="14">{}</text>"#,
        WIDTH / 2.0,
        escape(title)
    );
    let _ = writeln!(
        out,
        r#"<path d="M{m} {b} H{r} M{m} {b} V{m}" stroke="black" fill="none"/>"#,
        m = MARGIN,
        b = HEIGHT - MARGIN,
        r = WIDTH - MARGIN
    );
    let _ = writeln!(
        out,
        r#"<text x="{}" y="{}" text-anchor="middle" font-family="sans-serif" font-size="12">{}</text>"#,
        WIDTH / 2.0,
        HEIGHT - 12.0,
        escape(x_label)
    );
    for (v, anchor, xpos) in [(x_lo, "start", MARGIN), (x_hi, "end", WIDTH - MARGIN)] {
        let _ = writeln!(
            out,
            r#"<text x="{xpos}" y="{}" text-anchor="{anchor}" font-family="sans-serif" font-size="10">{}</text>"#,
            HEIGHT - MARGIN + 14.0,
            tick(v)
        );
    }
    for (v, ypos) in [(y_lo, HEIGHT - MARGIN), (y_hi, MARGIN)] {
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{ypos}" text-anchor="end" font-family="sans-serif" font-size="10">{}</text>"#,
            MARGIN - 4.0,
            tick(v)
        );
    }
    for (i, (name, ys)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let mut d = String::new();
        let mut pen_down = false;
        for (&xv, &yv) in x.iter().zip(ys) {
            if !(xv.is_finite() && yv.is_finite()) {
                pen_down = false;
                continue;
            }
            let _ = write!(d, "{}{:.2} {:.2} ", if pen_down { "L" } else { "M" }, px(xv), py(yv));
            pen_down = true;
        }
        let _ = writeln!(
            out,
            r#"<path d="{}" stroke="{color}" stroke-width="1.5" fill="none"/>"#,
            d.trim_end()
        );
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" font-family="sans-serif" font-size="11" fill="{color}">{}</text>"#,
            WIDTH - MARGIN + 4.0 - 90.0,
            MARGIN + 14.0 * i as f64,
            escape(name)
        );
    }
    out.push_str("</svg>\n");
    out
}

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi > lo {
        (lo, hi)
    } else {
        (lo - 0.5, hi + 0.5)
    }
}

fn tick(v: f64) -> String {
    format!("{v:.3}").trim_end_matches('0').trim_end_matches('.').to_string()
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_path_per_series() {
        let x = vec![0.0, 1.0, 2.0];
        let svg = line_chart("t", "x", &x, &[("a".into(), vec![0.0, 1.0, 4.0]), ("b<c".into(), vec![1.0, f64::NAN, 2.0])]);
        assert!(svg.starts_with("<svg"));
        assert_eq!(svg.matches("stroke-width").count(), 2);
        assert!(svg.contains("b&lt;c"));
        assert!(svg.contains("M48.00 352.00"));
    }
}
