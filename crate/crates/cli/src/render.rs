use std::fmt::Write;

use nask::data::Sample;
use nask::geometry::{Point, Polygon};

pub const GT_COLOR: &str = "#22c55e";
pub const DET_COLOR: &str = "#ef4444";

fn points_attr(v: &[Point]) -> String {
    v.iter().map(|p| format!("{:.2},{:.2}", p.x, p.y)).collect::<Vec<_>>().join(" ")
}

/// Image backdrop, ground-truth polygons and detections with their
/// fiducial points. Pixel centres sit at integer coordinates.
pub fn svg(s: &Sample, image_href: &str, dets: &[(Polygon, Vec<Point>)]) -> String {
    let (h, w) = (s.height(), s.width());
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="-0.5 -0.5 {w} {h}">"#
    );
    let _ = writeln!(
        out,
        r#"  <image href="{image_href}" x="-0.5" y="-0.5" width="{w}" height="{h}"/>"#
    );
    let _ = writeln!(out, r#"  <g class="ground-truth" fill="none" stroke="{GT_COLOR}" stroke-width="1">"#);
    for a in &s.annotations {
        let dash = if a.ignore { r#" stroke-dasharray="2 2""# } else { "" };
        let _ = writeln!(out, r#"    <polygon points="{}"{dash}/>"#, points_attr(&a.boundary.vertices));
    }
    let _ = writeln!(out, "  </g>");
    let _ = writeln!(out, r#"  <g class="detections" fill="none" stroke="{DET_COLOR}" stroke-width="1">"#);
    for (poly, fiducials) in dets {
        let _ = writeln!(out, r#"    <polygon points="{}"/>"#, points_attr(&poly.vertices));
        for p in fiducials {
            let _ = writeln!(
                out,
                r#"    <circle cx="{:.2}" cy="{:.2}" r="1.2" fill="{DET_COLOR}" stroke="none"/>"#,
                p.x, p.y
            );
        }
    }
    let _ = writeln!(out, "  </g>");
    out.push_str("</svg>\n");
    out
}
