use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Affine;
use crate::mask::components8;
use crate::tensor::{Tape, Var};

/// Feature-map pixel rectangle `[x0, x1) × [y0, y1)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoiBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
    pub score: f64,
}

impl RoiBox {
    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    /// Bounding box of `pixels` (row-major indices into a `w`-wide map),
    /// grown by `ceil(margin_ratio·side)` on each side and clamped to `h×w`.
    pub fn around(pixels: &[usize], h: usize, w: usize, margin_ratio: f64, score: f64) -> Option<RoiBox> {
        let (mut r0, mut r1, mut c0, mut c1) = (usize::MAX, 0, usize::MAX, 0);
        for &p in pixels {
            let (r, c) = (p / w, p % w);
            r0 = r0.min(r);
            r1 = r1.max(r);
            c0 = c0.min(c);
            c1 = c1.max(c);
        }
        if pixels.is_empty() {
            return None;
        }
        // the epsilon keeps exact products such as 0.1·30 from rounding up
        let grow = |side: usize| (margin_ratio * side as f64 - 1e-9).ceil().max(0.0);
        let (my, mx) = (grow(r1 - r0 + 1), grow(c1 - c0 + 1));
        Some(RoiBox {
            x0: (c0 as f64 - mx).max(0.0),
            y0: (r0 as f64 - my).max(0.0),
            x1: (c1 as f64 + 1.0 + mx).min(w as f64),
            y1: (r1 as f64 + 1.0 + my).min(h as f64),
            score,
        })
    }

    /// Maps pixel coordinates of a `stride·out_h × stride·out_w` patch
    /// resampled from this box back to image coordinates, for features at
    /// `1/stride` of the image resolution.
    pub fn patch_to_image(&self, out_h: usize, out_w: usize, stride: usize) -> Affine {
        let st = stride as f64;
        let sx = self.width() / out_w as f64;
        let sy = self.height() / out_h as f64;
        Affine {
            sx,
            tx: st * self.x0 - 0.5 + 0.5 * sx,
            sy,
            ty: st * self.y0 - 0.5 + 0.5 * sy,
        }
    }
}

/// Boxes around the 8-connected components of `tr ≥ t_tr` with at least
/// `min_area` pixels, ordered by `(y0, x0)`. The score is the component's
/// mean `tr`.
pub fn extract_proposals(
    tr: &[f64],
    h: usize,
    w: usize,
    t_tr: f64,
    min_area: usize,
    margin_ratio: f64,
) -> Result<Vec<RoiBox>> {
    if tr.len() != h * w {
        return Err(Error::Dimension(format!("tr has {} values for a {h}×{w} map", tr.len())));
    }
    if !(t_tr > 0.0 && t_tr < 1.0) {
        return Err(Error::Config(format!("text-region threshold {t_tr} outside (0, 1)")));
    }
    let mask: Vec<bool> = tr.iter().map(|&v| v >= t_tr).collect();
    let mut boxes: Vec<RoiBox> = components8(&mask, h, w)
        .into_iter()
        .filter(|c| c.len() >= min_area)
        .filter_map(|c| {
            let score = c.iter().map(|&p| tr[p]).sum::<f64>() / c.len() as f64;
            RoiBox::around(&c, h, w, margin_ratio, score)
        })
        .collect();
    boxes.sort_by(|a, b| a.y0.total_cmp(&b.y0).then(a.x0.total_cmp(&b.x0)));
    Ok(boxes)
}

/// Sampling positions `(row, col)` of an `out_h×out_w` grid of cell centres
/// spanning the box.
pub fn roi_grid(b: &RoiBox, out_h: usize, out_w: usize) -> Vec<(f64, f64)> {
    let (sy, sx) = (b.height() / out_h as f64, b.width() / out_w as f64);
    let mut pts = Vec::with_capacity(out_h * out_w);
    for r in 0..out_h {
        for c in 0..out_w {
            pts.push((b.y0 - 0.5 + (r as f64 + 0.5) * sy, b.x0 - 0.5 + (c as f64 + 0.5) * sx));
        }
    }
    pts
}

/// Bilinear resampling of `features: [C, h, w]` over the box to
/// `[C, out_h, out_w]`.
pub fn text_roi_pool(tape: &mut Tape, features: Var, b: &RoiBox, out_h: usize, out_w: usize) -> Result<Var> {
    let s = tape.shape(features).to_vec();
    if s.len() != 3 {
        return Err(Error::Dimension(format!("features must be [c,h,w], got {s:?}")));
    }
    let clamped = RoiBox {
        x0: b.x0.max(0.0),
        y0: b.y0.max(0.0),
        x1: b.x1.min(s[2] as f64),
        y1: b.y1.min(s[1] as f64),
        score: b.score,
    };
    if !(clamped.width() > 0.0 && clamped.height() > 0.0) || out_h == 0 || out_w == 0 {
        return Err(Error::Contract(format!("degenerate RoI {b:?} on a {}×{} map", s[1], s[2])));
    }
    tape.bilinear_sample(features, &roi_grid(&clamped, out_h, out_w), out_h, out_w)
}
