//! Minimal SVG scatter plots with a fixed viewport, so plots of different runs line up.

use std::fmt::Write as _;

use ndarray::ArrayView2;

/// Data-space half-width of the square viewport centred at the origin.
pub const EXTENT: f64 = 6.0;
const SIZE: f64 = 512.0;

pub struct Layer<'a> {
    pub points: ArrayView2<'a, f64>,
    pub color: &'a str,
}

pub fn scatter(title: &str, layers: &[Layer<'_>]) -> String {
    let scale = SIZE / (2.0 * EXTENT);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{SIZE}" viewBox="0 0 {SIZE} {SIZE}">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="8" y="20" font-family="monospace" font-size="14">{}</text>"#, escape(title));
    for layer in layers {
        let _ = writeln!(s, r#"<g fill="{}" fill-opacity="0.6">"#, escape(layer.color));
        for p in layer.points.rows() {
            let (x, y) = (p[0], if p.len() > 1 { p[1] } else { 0.0 });
            if x.abs() > EXTENT || y.abs() > EXTENT || !x.is_finite() || !y.is_finite() {
                continue;
            }
            let _ = writeln!(
                s,
                r#"<circle cx="{:.2}" cy="{:.2}" r="1.5"/>"#,
                (x + EXTENT) * scale,
                (EXTENT - y) * scale
            );
        }
        let _ = writeln!(s, "</g>");
    }
    s.push_str("</svg>\n");
    s
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn clips_points_outside_the_viewport() {
        let pts = array![[0.0, 0.0], [100.0, 0.0], [f64::NAN, 1.0]];
        let svg = scatter("a<b", &[Layer { points: pts.view(), color: "red" }]);
        assert_eq!(svg.matches("<circle").count(), 1);
        assert!(svg.contains(r#"cx="256.00" cy="256.00""#));
        assert!(svg.contains("a&lt;b"));
    }
}
