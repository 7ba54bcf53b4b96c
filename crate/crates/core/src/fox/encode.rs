use serde::{Deserialize, Serialize};

use super::{slices_at, AttributeFrame, GeometryMaps, TextAnnotation};
use crate::error::Result;
use crate::geometry::{for_each_inside, point_segment_distance, polyline_length, Affine, Point};

/// Label-generation parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncodeConfig {
    /// Minimum number of slices per instance.
    pub n: usize,
    /// TCL band half-width as a fraction of the local scale.
    pub shrink_ratio: f64,
    /// Length trimmed from each end of the band, as a fraction of the end scale.
    pub end_ratio: f64,
    /// Lower bound on the band half-width in pixels, so thin instances keep
    /// a connected band.
    pub min_half_width: f64,
    /// Target spacing between supervision slices along the centre line.
    pub node_spacing: f64,
}

impl Default for EncodeConfig {
    fn default() -> Self {
        Self {
            n: 8,
            shrink_ratio: 0.3,
            end_ratio: 0.5,
            min_half_width: 0.75,
            node_spacing: 2.0,
        }
    }
}

impl EncodeConfig {
    pub fn with_n(n: usize) -> Self {
        Self { n, ..Self::default() }
    }
}

/// Rasterizes ground-truth maps on an `h×w` canvas.
///
/// `tr` covers every instance polygon. The TCL band and the attribute
/// channels are written for non-ignored instances only; a pixel claimed by
/// several bands goes to the nearest centre line.
pub fn encode_geometry(anns: &[TextAnnotation], h: usize, w: usize, cfg: &EncodeConfig) -> Result<GeometryMaps> {
    let mut maps = encode_geometry_framed(anns, h, w, Affine::IDENTITY, cfg)?;
    maps.frame = AttributeFrame::Map;
    Ok(maps)
}

/// Rasterizes image-space annotations onto an `h×w` canvas whose pixel
/// `(r, c)` sits at `to_image(c, r)`. Distances, scales and angles are
/// measured in the image, so the attribute channels are in
/// [`AttributeFrame::Image`].
pub fn encode_geometry_framed(
    anns: &[TextAnnotation],
    h: usize,
    w: usize,
    to_image: Affine,
    cfg: &EncodeConfig,
) -> Result<GeometryMaps> {
    let mut maps = GeometryMaps::zeros(h, w);
    maps.to_image = to_image;
    maps.frame = AttributeFrame::Image;
    let to_canvas = to_image.inverse();
    // the band never gets thinner than `min_half_width` canvas pixels
    let min_half = cfg.min_half_width * to_image.sx.abs().max(to_image.sy.abs());
    let mut best = vec![f64::INFINITY; h * w];
    for ann in anns {
        let outline: Vec<Point> = ann.boundary.vertices.iter().map(|&p| to_canvas.apply(p)).collect();
        for_each_inside(&outline, h, w, |r, c| maps.tr[r * w + c] = 1.0);
        if ann.ignore {
            continue;
        }
        let spine = (polyline_length(&ann.top_line) + polyline_length(&ann.bottom_line)) / 2.0;
        let m = cfg.n.max((spine / cfg.node_spacing).ceil() as usize + 1).max(2);
        let fractions: Vec<f64> = (0..m).map(|k| k as f64 / (m - 1) as f64).collect();
        let nodes = slices_at(&ann.top_line, &ann.bottom_line, &fractions)?;
        let centers: Vec<Point> = nodes.iter().map(|n| n.c).collect();
        let mut cum = vec![0.0];
        for k in 1..m {
            cum.push(cum[k - 1] + centers[k].dist(centers[k - 1]));
        }
        let total = cum[m - 1];
        let lo = (cfg.end_ratio * nodes[0].s).min(total / 2.0);
        let hi = (total - cfg.end_ratio * nodes[m - 1].s).max(total / 2.0);

        for_each_inside(&outline, h, w, |r, c| {
            let p = to_image.apply(Point::new(c as f64, r as f64));
            let (mut d, mut k, mut t) = (f64::INFINITY, 0, 0.0);
            for j in 0..m - 1 {
                let (dj, tj) = point_segment_distance(p, centers[j], centers[j + 1]);
                if dj < d {
                    (d, k, t) = (dj, j, tj);
                }
            }
            let (a, b) = (&nodes[k], &nodes[k + 1]);
            let s = a.s + (b.s - a.s) * t;
            let along = cum[k] + t * (cum[k + 1] - cum[k]);
            let idx = r * w + c;
            if d > (cfg.shrink_ratio * s).max(min_half) || along < lo || along > hi || d >= best[idx] {
                return;
            }
            best[idx] = d;
            let cp = a.phi.cos() + (b.phi.cos() - a.phi.cos()) * t;
            let sp = a.phi.sin() + (b.phi.sin() - a.phi.sin()) * t;
            let np = cp.hypot(sp);
            maps.tcl[idx] = 1.0;
            maps.scale[idx] = s;
            maps.cos_t[idx] = a.theta.cos();
            maps.sin_t[idx] = a.theta.sin();
            maps.cos_p[idx] = cp / np;
            maps.sin_p[idx] = sp / np;
        });
    }
    Ok(maps)
}
