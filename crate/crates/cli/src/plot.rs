//! Static cumulative-error plots.

use std::fmt::Write as _;

pub fn csv(curve: &[(f64, f64)]) -> String {
    let mut out = String::from("error_deg,recall\n");
    for (e, r) in curve {
        let _ = writeln!(out, "{e},{r}");
    }
    out
}

const W: f64 = 480.0;
const H: f64 = 320.0;
const MARGIN: f64 = 48.0;

/// Step plot of recall against error. The x range covers at least 30° and
/// at most 180°.
pub fn svg(curve: &[(f64, f64)]) -> String {
    let x_max = curve.iter().map(|c| c.0).fold(30.0, f64::max).min(180.0);
    let sx = |e: f64| MARGIN + (e.min(x_max) / x_max) * (W - 2.0 * MARGIN);
    let sy = |r: f64| H - MARGIN - r * (H - 2.0 * MARGIN);

    let mut points = Vec::new();
    let mut last = 0.0;
    for &(e, r) in curve {
        points.push((sx(e), sy(last)));
        points.push((sx(e), sy(r)));
        last = r;
    }
    points.push((sx(x_max), sy(last)));

    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(out, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let (x0, y0, x1, y1) = (sx(0.0), sy(0.0), sx(x_max), sy(1.0));
    let _ = writeln!(
        out,
        r#"<path d="M{x0} {y1} L{x0} {y0} L{x1} {y0}" fill="none" stroke="black"/>"#
    );
    for k in 0..=6 {
        let e = x_max * k as f64 / 6.0;
        let x = sx(e);
        let _ = writeln!(
            out,
            r#"<line x1="{x}" y1="{y0}" x2="{x}" y2="{}" stroke="black"/><text x="{x}" y="{}" text-anchor="middle">{}</text>"#,
            y0 + 4.0,
            y0 + 16.0,
            (e * 10.0).round() / 10.0
        );
    }
    for k in 0..=4 {
        let r = k as f64 / 4.0;
        let y = sy(r);
        let _ = writeln!(
            out,
            r#"<line x1="{}" y1="{y}" x2="{x0}" y2="{y}" stroke="black"/><text x="{}" y="{}" text-anchor="end">{r}</text>"#,
            x0 - 4.0,
            x0 - 6.0,
            y + 4.0
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="{}" y="{}" text-anchor="middle">pose error (deg)</text>"#,
        (x0 + x1) / 2.0,
        H - 10.0
    );
    let _ = writeln!(
        out,
        r#"<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">recall</text>"#,
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0
    );
    let path: Vec<String> = points.iter().map(|(x, y)| format!("{x:.2},{y:.2}")).collect();
    let _ = writeln!(
        out,
        r#"<polyline points="{}" fill="none" stroke="steelblue" stroke-width="2"/>"#,
        path.join(" ")
    );
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_lists_every_corner() {
        assert_eq!(csv(&[(0.0, 0.0), (2.5, 0.5), (4.0, 1.0)]), "error_deg,recall\n0,0\n2.5,0.5\n4,1\n");
    }

    #[test]
    fn svg_is_a_closed_document() {
        let s = svg(&[(0.0, 0.0), (10.0, 0.5), (200.0, 1.0)]);
        assert!(s.starts_with("<svg"));
        assert!(s.ends_with("</svg>\n"));
        assert_eq!(s.matches("<polyline").count(), 1);
        // Errors past the axis are clamped to its end.
        assert!(s.contains(&format!("{:.2},{:.2}", W - MARGIN, MARGIN)));
    }
}
