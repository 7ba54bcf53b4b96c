//! Polygon-level detection metrics.

use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{signed_area, Point, Polygon};

/// Areas below this are treated as zero.
pub const AREA_EPS: f64 = 1e-9;

/// Intersection-over-union of two simple polygons.
///
/// Both polygons are fanned into signed triangles from their first vertex;
/// the intersection area is the signed sum of pairwise convex triangle
/// clips, which equals the exact overlap for simple polygons.
pub fn polygon_iou(a: &Polygon, b: &Polygon) -> f64 {
    let (aa, ab) = (a.area(), b.area());
    if aa < AREA_EPS || ab < AREA_EPS {
        return 0.0;
    }
    let inter = intersection_area(&a.vertices, &b.vertices).clamp(0.0, aa.min(ab));
    let union = aa + ab - inter;
    if union < AREA_EPS {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

pub fn intersection_area(a: &[Point], b: &[Point]) -> f64 {
    let (la, lb) = (bounds_of(a), bounds_of(b));
    if la.1.x <= lb.0.x || lb.1.x <= la.0.x || la.1.y <= lb.0.y || lb.1.y <= la.0.y {
        return 0.0;
    }
    let ta = signed_fan(a);
    let tb = signed_fan(b);
    let mut total = 0.0;
    for (sa, tra) in &ta {
        for (sb, trb) in &tb {
            total += sa * sb * clip_area(tra, trb);
        }
    }
    total
}

fn bounds_of(v: &[Point]) -> (Point, Point) {
    crate::geometry::bounds(v)
}

/// Fan triangles `(v0, vi, vi+1)` of a positively oriented copy of `v`,
/// each stored positively oriented with its original sign.
fn signed_fan(v: &[Point]) -> Vec<(f64, [Point; 3])> {
    let mut v = v.to_vec();
    if signed_area(&v) < 0.0 {
        v.reverse();
    }
    let mut out = Vec::with_capacity(v.len().saturating_sub(2));
    for i in 1..v.len().saturating_sub(1) {
        let t = [v[0], v[i], v[i + 1]];
        let s = signed_area(&t);
        if s.abs() < 1e-15 {
            continue;
        }
        if s > 0.0 {
            out.push((1.0, t));
        } else {
            out.push((-1.0, [t[0], t[2], t[1]]));
        }
    }
    out
}

/// Area of the intersection of two positively oriented triangles
/// (Sutherland–Hodgman).
fn clip_area(subject: &[Point; 3], clip: &[Point; 3]) -> f64 {
    let mut poly: Vec<Point> = subject.to_vec();
    let mut next = Vec::with_capacity(8);
    for i in 0..3 {
        let (a, b) = (clip[i], clip[(i + 1) % 3]);
        let e = b.sub(a);
        let side = |p: Point| e.cross(p.sub(a));
        next.clear();
        let n = poly.len();
        for j in 0..n {
            let (p, q) = (poly[j], poly[(j + 1) % n]);
            let (sp, sq) = (side(p), side(q));
            if sp >= 0.0 {
                next.push(p);
            }
            if (sp >= 0.0) != (sq >= 0.0) {
                let t = sp / (sp - sq);
                next.push(p.lerp(q, t));
            }
        }
        std::mem::swap(&mut poly, &mut next);
        if poly.len() < 3 {
            return 0.0;
        }
    }
    signed_area(&poly).max(0.0)
}

/// A ground-truth polygon for scoring.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GtInstance {
    pub polygon: Polygon,
    #[serde(default)]
    pub ignore: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    /// `(gt index, det index, iou)`, in the order they were accepted.
    pub pairs: Vec<(usize, usize, f64)>,
    pub unmatched_gt: Vec<usize>,
    pub unmatched_det: Vec<usize>,
    /// Detections dropped because they cover an ignored ground truth.
    pub ignored_det: Vec<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ImageScore {
    pub matched: usize,
    pub gts: usize,
    pub dets: usize,
    pub precision: f64,
    pub recall: f64,
    pub hmean: f64,
}

pub fn prh(matched: usize, gts: usize, dets: usize) -> (f64, f64, f64) {
    let p = if dets == 0 { 1.0 } else { matched as f64 / dets as f64 };
    let r = if gts == 0 { 1.0 } else { matched as f64 / gts as f64 };
    let h = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    (p, r, h)
}

/// Greedy one-to-one matching in descending IoU order. Ties go to the
/// lowest ground-truth index, then the lowest detection index.
pub fn match_and_score(gts: &[GtInstance], dets: &[Polygon], iou_threshold: f64) -> (MatchResult, ImageScore) {
    let mut cand = Vec::new();
    for (g, gt) in gts.iter().enumerate() {
        if gt.ignore {
            continue;
        }
        for (d, det) in dets.iter().enumerate() {
            let iou = polygon_iou(&gt.polygon, det);
            if iou >= iou_threshold && iou > 0.0 {
                cand.push((g, d, iou));
            }
        }
    }
    cand.sort_by(|x, y| y.2.total_cmp(&x.2).then(x.0.cmp(&y.0)).then(x.1.cmp(&y.1)));
    let mut gt_used = vec![false; gts.len()];
    let mut det_used = vec![false; dets.len()];
    let mut res = MatchResult::default();
    for (g, d, iou) in cand {
        if !gt_used[g] && !det_used[d] {
            gt_used[g] = true;
            det_used[d] = true;
            res.pairs.push((g, d, iou));
        }
    }
    for (d, det) in dets.iter().enumerate() {
        if det_used[d] {
            continue;
        }
        let covers_ignored = gts
            .iter()
            .any(|gt| gt.ignore && polygon_iou(&gt.polygon, det) >= iou_threshold);
        if covers_ignored {
            res.ignored_det.push(d);
        } else {
            res.unmatched_det.push(d);
        }
    }
    res.unmatched_gt = (0..gts.len()).filter(|&g| !gts[g].ignore && !gt_used[g]).collect();
    let matched = res.pairs.len();
    let n_gt = gts.iter().filter(|g| !g.ignore).count();
    let n_det = dets.len() - res.ignored_det.len();
    let (precision, recall, hmean) = prh(matched, n_gt, n_det);
    let score = ImageScore {
        matched,
        gts: n_gt,
        dets: n_det,
        precision,
        recall,
        hmean,
    };
    (res, score)
}

/// Dataset-level report; totals are pooled over images.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub precision: f64,
    pub recall: f64,
    pub hmean: f64,
    pub fps: Option<f64>,
    pub per_image: Vec<ImageScore>,
}

impl EvalReport {
    pub fn from_images(per_image: Vec<ImageScore>, fps: Option<f64>) -> Self {
        let (m, g, d) = per_image
            .iter()
            .fold((0, 0, 0), |acc, s| (acc.0 + s.matched, acc.1 + s.gts, acc.2 + s.dets));
        let (precision, recall, hmean) = prh(m, g, d);
        Self {
            precision,
            recall,
            hmean,
            fps,
            per_image,
        }
    }

    /// Evaluates `(ground truths, detections)` image pairs.
    pub fn evaluate(images: &[(Vec<GtInstance>, Vec<Polygon>)], iou_threshold: f64) -> Self {
        let per = images
            .iter()
            .map(|(g, d)| match_and_score(g, d, iou_threshold).1)
            .collect();
        Self::from_images(per, None)
    }

    /// Aligned text table with R, P, H and F columns (percent, FPS).
    pub fn table(&self, label: &str) -> String {
        let fps = self.fps.map_or_else(|| "-".to_string(), |f| format!("{f:.2}"));
        let width = label.len().max(6);
        let mut s = String::new();
        let _ = writeln!(s, "{:<width$}  {:>6}  {:>6}  {:>6}  {:>8}", "Method", "R", "P", "H", "F");
        let _ = writeln!(
            s,
            "{:<width$}  {:>6.1}  {:>6.1}  {:>6.1}  {:>8}",
            label,
            100.0 * self.recall,
            100.0 * self.precision,
            100.0 * self.hmean,
            fps
        );
        s
    }
}

/// Images per second over `items[warmup..]`, after running the first
/// `warmup` items untimed.
pub fn measure_fps<T>(items: &[T], warmup: usize, mut run: impl FnMut(&T)) -> Result<f64> {
    if items.len() <= warmup {
        return Err(Error::Config(format!(
            "need more than {warmup} images to measure throughput, got {}",
            items.len()
        )));
    }
    items[..warmup].iter().for_each(&mut run);
    let start = Instant::now();
    items[warmup..].iter().for_each(&mut run);
    let secs = start.elapsed().as_secs_f64().max(1e-9);
    Ok((items.len() - warmup) as f64 / secs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square(x: f64, y: f64, s: f64) -> Polygon {
        Polygon::new(vec![
            Point::new(x, y),
            Point::new(x + s, y),
            Point::new(x + s, y + s),
            Point::new(x, y + s),
        ])
        .unwrap()
    }

    #[test]
    fn basic_ious() {
        let a = square(0.0, 0.0, 1.0);
        assert!((polygon_iou(&a, &a) - 1.0).abs() < 1e-12);
        assert_eq!(polygon_iou(&a, &square(3.0, 0.0, 1.0)), 0.0);
        assert!((polygon_iou(&a, &square(0.5, 0.0, 1.0)) - 1.0 / 3.0).abs() < 1e-9);
    }

    #[test]
    fn concave_overlap() {
        // an L shape covering three unit cells of a 2×2 square
        let l = Polygon::new(vec![
            Point::new(0.0, 0.0),
            Point::new(2.0, 0.0),
            Point::new(2.0, 1.0),
            Point::new(1.0, 1.0),
            Point::new(1.0, 2.0),
            Point::new(0.0, 2.0),
        ])
        .unwrap();
        let sq = square(0.0, 0.0, 2.0);
        assert!((polygon_iou(&l, &sq) - 0.75).abs() < 1e-12);
        assert!((polygon_iou(&l, &square(1.0, 1.0, 1.0))).abs() < 1e-12);
    }

    #[test]
    fn scoring_conventions() {
        assert_eq!(prh(0, 0, 0), (1.0, 1.0, 1.0));
        assert_eq!(prh(0, 3, 0), (1.0, 0.0, 0.0));
        let (p, r, h) = prh(2, 3, 3);
        assert!((p - 2.0 / 3.0).abs() < 1e-12 && (r - p).abs() < 1e-12 && (h - p).abs() < 1e-12);
    }

    #[test]
    fn fps_needs_enough_items() {
        assert!(measure_fps(&[1], 1, |_| ()).is_err());
        assert!(measure_fps(&[1, 2], 1, |_| ()).unwrap() > 0.0);
    }
}
