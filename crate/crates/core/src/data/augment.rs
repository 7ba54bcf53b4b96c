use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Sample;
use crate::geometry::{bounds, Point};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub out_h: usize,
    pub out_w: usize,
    /// Smallest crop side as a fraction of the largest crop that fits.
    pub min_crop: f64,
    pub rotate: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            out_h: 128,
            out_w: 128,
            min_crop: 0.6,
            rotate: true,
        }
    }
}

/// Clockwise quarter turns in image coordinates (y down).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Rotation {
    R0,
    R90,
    R180,
    R270,
}

impl Rotation {
    pub const ALL: [Rotation; 4] = [Rotation::R0, Rotation::R90, Rotation::R180, Rotation::R270];

    /// Maps a point of an `h×w` image into the rotated image.
    pub fn apply(self, p: Point, h: usize, w: usize) -> Point {
        let (hm, wm) = ((h - 1) as f64, (w - 1) as f64);
        match self {
            Rotation::R0 => p,
            Rotation::R90 => Point::new(hm - p.y, p.x),
            Rotation::R180 => Point::new(wm - p.x, hm - p.y),
            Rotation::R270 => Point::new(p.y, wm - p.x),
        }
    }

    /// Shape `(h, w)` after rotating an `h×w` image.
    pub fn shape(self, h: usize, w: usize) -> (usize, usize) {
        match self {
            Rotation::R0 | Rotation::R180 => (h, w),
            Rotation::R90 | Rotation::R270 => (w, h),
        }
    }
}

pub fn rotate_sample(s: &Sample, rot: Rotation) -> Sample {
    let [c, h, w] = *s.image.shape() else {
        panic!("sample images are [c, h, w]");
    };
    let (nh, nw) = rot.shape(h, w);
    let src = s.image.data();
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for r in 0..h {
            for col in 0..w {
                let q = rot.apply(Point::new(col as f64, r as f64), h, w);
                let (qr, qc) = (q.y as usize, q.x as usize);
                out[ch * nh * nw + qr * nw + qc] = src[ch * h * w + r * w + col];
            }
        }
    }
    Sample {
        image: Tensor::new(&[c, nh, nw], out).expect("same element count"),
        annotations: s.annotations.iter().map(|a| a.map(|p| rot.apply(p, h, w))).collect(),
    }
}

/// Integer pixel rectangle.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropBox {
    pub x0: usize,
    pub y0: usize,
    pub w: usize,
    pub h: usize,
}

/// Crops `crop` and resizes it bilinearly to `out_h×out_w`. Pixel centres
/// stay aligned: `x ↦ (x − x0 + ½)·out_w/w − ½`.
pub fn crop_resize(s: &Sample, crop: CropBox, out_h: usize, out_w: usize) -> Sample {
    let [c, h, w] = *s.image.shape() else {
        panic!("sample images are [c, h, w]");
    };
    let (sx, sy) = (out_w as f64 / crop.w as f64, out_h as f64 / crop.h as f64);
    let src = s.image.data();
    let mut out = vec![0.0; c * out_h * out_w];
    for r in 0..out_h {
        let y = (crop.y0 as f64 - 0.5 + (r as f64 + 0.5) / sy).clamp(0.0, (h - 1) as f64);
        let (y0, fy) = (y.floor() as usize, y.fract());
        let y1 = (y0 + 1).min(h - 1);
        for col in 0..out_w {
            let x = (crop.x0 as f64 - 0.5 + (col as f64 + 0.5) / sx).clamp(0.0, (w - 1) as f64);
            let (x0, fx) = (x.floor() as usize, x.fract());
            let x1 = (x0 + 1).min(w - 1);
            for ch in 0..c {
                let at = |yy: usize, xx: usize| src[ch * h * w + yy * w + xx];
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let bot = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                out[ch * out_h * out_w + r * out_w + col] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    let map = |p: Point| {
        Point::new(
            (p.x - crop.x0 as f64) * sx + 0.5 * (sx - 1.0),
            (p.y - crop.y0 as f64) * sy + 0.5 * (sy - 1.0),
        )
    };
    Sample {
        image: Tensor::new(&[c, out_h, out_w], out).expect("sized buffer"),
        annotations: s.annotations.iter().map(|a| a.map(map)).collect(),
    }
}

/// Picks a crop with the output aspect ratio that contains every instance.
/// Falls back to the full image when they cannot all fit.
pub fn choose_crop<R: Rng + ?Sized>(s: &Sample, cfg: &AugmentConfig, rng: &mut R) -> CropBox {
    let (h, w) = (s.image.shape()[1], s.image.shape()[2]);
    let full = CropBox { x0: 0, y0: 0, w, h };
    let aspect = cfg.out_w as f64 / cfg.out_h as f64;
    let max_w = (w as f64).min((h as f64 * aspect).floor()) as usize;
    if max_w == 0 {
        return full;
    }
    let all: Vec<Point> = s.annotations.iter().flat_map(|a| a.boundary.vertices.iter().copied()).collect();
    let (lo_x, lo_y, hi_x, hi_y) = if all.is_empty() {
        (w, h, 0, 0)
    } else {
        let (lo, hi) = bounds(&all);
        (
            lo.x.floor().max(0.0) as usize,
            lo.y.floor().max(0.0) as usize,
            (hi.x.ceil() as usize).min(w - 1),
            (hi.y.ceil() as usize).min(h - 1),
        )
    };
    let need = if all.is_empty() {
        0
    } else {
        ((hi_x - lo_x + 1) as f64).max((hi_y - lo_y + 1) as f64 * aspect).ceil() as usize
    };
    let min_w = need.max((cfg.min_crop * max_w as f64).ceil() as usize).max(1);
    if min_w > max_w {
        return full;
    }
    for _ in 0..16 {
        let cw = rng.random_range(min_w..=max_w);
        let ch = ((cw as f64 / aspect).round() as usize).clamp(1, h);
        let x_range = if all.is_empty() {
            (0, w - cw)
        } else {
            ((hi_x + 1).saturating_sub(cw), lo_x.min(w - cw))
        };
        let y_range = if all.is_empty() {
            (0, h - ch)
        } else {
            ((hi_y + 1).saturating_sub(ch), lo_y.min(h - ch))
        };
        if x_range.0 <= x_range.1 && y_range.0 <= y_range.1 {
            return CropBox {
                x0: rng.random_range(x_range.0..=x_range.1),
                y0: rng.random_range(y_range.0..=y_range.1),
                w: cw,
                h: ch,
            };
        }
    }
    full
}

/// Random crop around all instances, resize to the training size and a
/// random quarter turn. Deterministic in `seed`.
pub fn augment(s: &Sample, seed: u64, cfg: &AugmentConfig) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let crop = choose_crop(s, cfg, &mut rng);
    let out = crop_resize(s, crop, cfg.out_h, cfg.out_w);
    let rot = if cfg.rotate {
        Rotation::ALL[rng.random_range(0..4)]
    } else {
        Rotation::R0
    };
    rotate_sample(&out, rot)
}
