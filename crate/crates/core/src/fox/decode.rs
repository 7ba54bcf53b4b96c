use std::cmp::Ordering;
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};

use super::{fiducial_points_trig, normalize_trig, rdp_closed, AttributeFrame, FiducialPointSet, GeometryMaps};
use crate::error::{Error, Result};
use crate::geometry::{cumulative_lengths, point_at_arc, Point, Polygon};
use crate::mask::{components8, neighbors8};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub n: usize,
    pub t_tr: f64,
    pub t_tcl: f64,
    /// Simplification tolerance in map pixels.
    pub dp_epsilon: f64,
    /// Components with fewer pixels are ignored.
    pub min_area: usize,
    /// Each chain end is extended by this fraction of the local scale,
    /// undoing the end trim applied when the band was drawn.
    pub end_ratio: f64,
    /// Half-width, in path pixels, of the window pooled into each centre-line
    /// point.
    pub smooth_radius: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            n: 8,
            t_tr: 0.7,
            t_tcl: 0.6,
            dp_epsilon: 1.0,
            min_area: 10,
            end_ratio: 0.5,
            smooth_radius: 2,
        }
    }
}

/// An ordered centre line and the component pixels it was traced from.
#[derive(Clone, Debug, PartialEq)]
pub struct CenterLine {
    pub points: Vec<Point>,
    pub pixels: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodedText {
    pub polygon: Polygon,
    /// Fiducial points in image coordinates, before simplification.
    pub fiducials: FiducialPointSet,
    /// Mean TCL probability over the sample points.
    pub score: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Decoded {
    pub instances: Vec<DecodedText>,
    /// One line per dropped chain.
    pub diagnostics: Vec<String>,
}

#[derive(Clone, Copy, PartialEq)]
struct Entry(f64, usize);

impl Eq for Entry {}

impl Ord for Entry {
    fn cmp(&self, o: &Self) -> Ordering {
        o.0.total_cmp(&self.0).then(o.1.cmp(&self.1))
    }
}

impl PartialOrd for Entry {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}

/// Geodesic distances inside one component; returns (dist, parent) arrays
/// indexed like `pixels`.
fn geodesic(pixels: &[usize], local: &[usize], w: usize, h: usize, src: usize) -> (Vec<f64>, Vec<usize>) {
    let mut dist = vec![f64::INFINITY; pixels.len()];
    let mut parent = vec![usize::MAX; pixels.len()];
    let mut heap = BinaryHeap::new();
    dist[src] = 0.0;
    heap.push(Entry(0.0, src));
    while let Some(Entry(d, i)) = heap.pop() {
        if d > dist[i] {
            continue;
        }
        let p = pixels[i];
        for q in neighbors8(p, h, w) {
            let j = local[q];
            if j == usize::MAX {
                continue;
            }
            let step = if q / w != p / w && q % w != p % w { std::f64::consts::SQRT_2 } else { 1.0 };
            let nd = d + step;
            if nd < dist[j] - 1e-12 {
                dist[j] = nd;
                parent[j] = i;
                heap.push(Entry(nd, j));
            }
        }
    }
    (dist, parent)
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x.is_finite() && x > v[best] {
            best = i;
        }
    }
    best
}

fn pixel_point(p: usize, w: usize) -> Point {
    Point::new((p % w) as f64, (p / w) as f64)
}

/// Traces an ordered centre line through every sufficiently large
/// 8-connected component of `(tcl ≥ t_tcl) ∧ (tr ≥ t_tr)`.
///
/// Endpoints are a farthest pair under geodesic distance; the shortest
/// path between them is then pulled to the middle of the band by replacing
/// each path pixel with the centroid of the component pixels closest to it
/// and its neighbours. Chains run rightward (or upward when vertical).
#[allow(clippy::too_many_arguments)]
pub fn extract_center_lines(
    tcl: &[f64],
    tr: &[f64],
    h: usize,
    w: usize,
    t_tr: f64,
    t_tcl: f64,
    min_area: usize,
    smooth_radius: usize,
) -> Vec<CenterLine> {
    let mask: Vec<bool> = tcl.iter().zip(tr).map(|(&c, &r)| c >= t_tcl && r >= t_tr).collect();
    let mut local = vec![usize::MAX; h * w];
    let mut out = Vec::new();
    for pixels in components8(&mask, h, w) {
        if pixels.len() < min_area.max(1) {
            continue;
        }
        for (i, &p) in pixels.iter().enumerate() {
            local[p] = i;
        }
        let (d0, _) = geodesic(&pixels, &local, w, h, 0);
        let a = argmax(&d0);
        let (da, parent) = geodesic(&pixels, &local, w, h, a);
        let b = argmax(&da);
        let mut path = vec![b];
        while *path.last().unwrap() != a {
            path.push(parent[*path.last().unwrap()]);
        }
        let path_pts: Vec<Point> = path.iter().map(|&i| pixel_point(pixels[i], w)).collect();
        let mut points = recentre(&path_pts, &pixels, w, smooth_radius);
        let d = points[points.len() - 1].sub(points[0]);
        if d.x - d.y < 0.0 {
            points.reverse();
        }
        for &p in &pixels {
            local[p] = usize::MAX;
        }
        out.push(CenterLine { points, pixels });
    }
    out
}

/// Assigns every component pixel to its nearest path point, then replaces
/// path point `k` with the centroid of all pixels assigned to points
/// `k−r..=k+r`.
fn recentre(path: &[Point], pixels: &[usize], w: usize, radius: usize) -> Vec<Point> {
    let mut sums = vec![(Point::default(), 0usize); path.len()];
    let mut owner = Vec::with_capacity(pixels.len());
    for &p in pixels {
        let q = pixel_point(p, w);
        let mut best = (f64::INFINITY, 0);
        for (k, &c) in path.iter().enumerate() {
            let d = q.dist(c);
            if d < best.0 {
                best = (d, k);
            }
        }
        let slot = &mut sums[best.1];
        slot.0 = slot.0.add(q);
        slot.1 += 1;
        owner.push(best.1);
    }
    let n = path.len();
    let mut out: Vec<Point> = (0..n)
        .map(|k| {
            let r = radius.min(k).min(n - 1 - k);
            let (s, c) = sums[k - r..=k + r]
                .iter()
                .fold((Point::default(), 0), |acc, &(s, c)| (acc.0.add(s), acc.1 + c));
            s.scale(1.0 / c as f64)
        })
        .collect();
    // the traced endpoints are corners of the band's end caps; rebuild each
    // end from an interior point, pushed along the local tangent to the
    // farthest pixel of the end region
    let m = (2 * radius).max(2);
    let step = radius.max(2);
    if n > 2 * (m + step) {
        let ends = [(0, m, m + step), (n - 1, n - 1 - m, n - 1 - m - step)];
        for (end, anchor, inner) in ends {
            let a = out[anchor];
            let d = a.sub(out[inner]);
            let len = d.norm();
            if len == 0.0 {
                continue;
            }
            let u = d.scale(1.0 / len);
            let (lo, hi) = (end.min(anchor), end.max(anchor));
            let reach = owner
                .iter()
                .zip(pixels)
                .filter(|(&k, _)| k >= lo && k <= hi)
                .map(|(_, &p)| pixel_point(p, w).sub(a).dot(u))
                .fold(0.0, f64::max);
            let tip = a.add(u.scale(reach));
            for k in lo..=hi {
                let t = k.abs_diff(anchor) as f64 / m as f64;
                out[k] = a.lerp(tip, t);
            }
        }
    }
    out
}

/// `n` points at arc positions `k·L/(n−1)` along the chain.
pub fn sample_equidistant(chain: &[Point], n: usize) -> Result<Vec<Point>> {
    if n < 2 {
        return Err(Error::Config(format!("need at least 2 samples, got {n}")));
    }
    if chain.is_empty() {
        return Err(Error::Contract("empty chain".into()));
    }
    let cum = cumulative_lengths(chain);
    let total = *cum.last().unwrap();
    if !(total > 0.0) {
        return Err(Error::Contract("chain has zero length".into()));
    }
    Ok((0..n)
        .map(|k| {
            if k == n - 1 {
                chain[chain.len() - 1]
            } else {
                point_at_arc(chain, &cum, total * k as f64 / (n - 1) as f64)
            }
        })
        .collect())
}

struct Readout {
    s: f64,
    cos_p: f64,
    sin_p: f64,
    tcl: f64,
}

/// Mean attributes over valid pixels in the 3×3 window around `q`; falls
/// back to the closest component pixel when the window has none.
fn read_attributes(maps: &GeometryMaps, valid: &[bool], line: &CenterLine, q: Point) -> Readout {
    let (h, w) = (maps.h as isize, maps.w as isize);
    let r0 = (q.y.round() as isize).clamp(0, h - 1);
    let c0 = (q.x.round() as isize).clamp(0, w - 1);
    let mut acc = (0.0, 0.0, 0.0, 0usize);
    for r in r0 - 1..=r0 + 1 {
        for c in c0 - 1..=c0 + 1 {
            if r < 0 || c < 0 || r >= h || c >= w {
                continue;
            }
            let i = (r * w + c) as usize;
            if valid[i] {
                acc = (acc.0 + maps.scale[i], acc.1 + maps.cos_p[i], acc.2 + maps.sin_p[i], acc.3 + 1);
            }
        }
    }
    let centre = (r0 * w + c0) as usize;
    if acc.3 == 0 {
        let i = *line
            .pixels
            .iter()
            .min_by(|&&a, &&b| pixel_point(a, maps.w).dist(q).total_cmp(&pixel_point(b, maps.w).dist(q)))
            .unwrap();
        return Readout {
            s: maps.scale[i],
            cos_p: maps.cos_p[i],
            sin_p: maps.sin_p[i],
            tcl: maps.tcl[i],
        };
    }
    let k = acc.3 as f64;
    Readout {
        s: acc.0 / k,
        cos_p: acc.1 / k,
        sin_p: acc.2 / k,
        tcl: maps.tcl[centre],
    }
}

/// Extends both chain ends along their end tangents.
fn extend_chain(chain: &[Point], start: f64, end: f64) -> Vec<Point> {
    let n = chain.len();
    let k = 3.min(n - 1);
    let dir = |from: Point, to: Point| {
        let d = to.sub(from);
        let len = d.norm();
        if len > 0.0 {
            d.scale(1.0 / len)
        } else {
            Point::default()
        }
    };
    let head = chain[0].add(dir(chain[k], chain[0]).scale(start));
    let tail = chain[n - 1].add(dir(chain[n - 1 - k], chain[n - 1]).scale(end));
    let mut out = Vec::with_capacity(n + 2);
    if start > 0.0 {
        out.push(head);
    }
    out.extend_from_slice(chain);
    if end > 0.0 {
        out.push(tail);
    }
    out
}

/// Reconstructs boundary polygons from geometry maps.
///
/// Centre lines are traced in map pixel space. With map-frame attributes
/// the polygons are built there and mapped through `maps.to_image`; with
/// image-frame attributes the fiducial points are placed around the mapped
/// centres directly. The text-orientation channels are not consulted.
pub fn decode(maps: &GeometryMaps, cfg: &DecodeConfig) -> Result<Decoded> {
    if cfg.n < 2 {
        return Err(Error::Config(format!("need at least 2 samples, got {}", cfg.n)));
    }
    let lines = extract_center_lines(
        &maps.tcl,
        &maps.tr,
        maps.h,
        maps.w,
        cfg.t_tr,
        cfg.t_tcl,
        cfg.min_area,
        cfg.smooth_radius,
    );
    let valid: Vec<bool> = maps.tcl.iter().zip(&maps.tr).map(|(&c, &r)| c >= cfg.t_tcl && r >= cfg.t_tr).collect();
    let mut out = Decoded::default();
    for (idx, line) in lines.iter().enumerate() {
        match decode_line(maps, &valid, line, cfg) {
            Ok(inst) => out.instances.push(inst),
            Err(e) => out.diagnostics.push(format!("chain {idx}: {e}")),
        }
    }
    Ok(out)
}

fn decode_line(maps: &GeometryMaps, valid: &[bool], line: &CenterLine, cfg: &DecodeConfig) -> Result<DecodedText> {
    let chain = &line.points;
    if chain.len() < 2 {
        return Err(Error::Contract("chain shorter than two points".into()));
    }
    let cum = cumulative_lengths(chain);
    let length = *cum.last().unwrap();
    let s_head = read_attributes(maps, valid, line, chain[0]).s.max(0.0);
    let s_tail = read_attributes(maps, valid, line, chain[chain.len() - 1]).s.max(0.0);
    let image_frame = maps.frame == AttributeFrame::Image;
    // image-frame scales are converted to map pixels along each end tangent
    let map_len = |from: Point, to: Point, len: f64| {
        let d = to.sub(from);
        let stretched = Point::new(d.x * maps.to_image.sx, d.y * maps.to_image.sy).norm();
        if image_frame && stretched > 0.0 {
            len * d.norm() / stretched
        } else {
            len
        }
    };
    let k_end = 3.min(chain.len() - 1);
    let last = chain.len() - 1;
    let head_ext = map_len(chain[k_end], chain[0], cfg.end_ratio * s_head);
    let tail_ext = map_len(chain[last - k_end], chain[last], cfg.end_ratio * s_tail);
    let extended = extend_chain(chain, head_ext, tail_ext);
    let ext_cum = cumulative_lengths(&extended);
    let ext_len = *ext_cum.last().unwrap();
    let centres = sample_equidistant(&extended, cfg.n)?;
    let head_ext = if extended.len() > chain.len() && head_ext > 0.0 { ext_cum[1] } else { 0.0 };

    let mut reads = Vec::with_capacity(cfg.n);
    for k in 0..cfg.n {
        let along = ext_len * k as f64 / (cfg.n - 1) as f64 - head_ext;
        let q = point_at_arc(chain, &cum, along.clamp(0.0, length));
        reads.push(read_attributes(maps, valid, line, q));
    }
    let trig: Vec<Option<(f64, f64)>> = reads.iter().map(|r| normalize_trig(r.cos_p, r.sin_p).ok()).collect();
    if trig.iter().all(Option::is_none) {
        return Err(Error::DegenerateOrientation { norm: 0.0 });
    }
    let mut points = Vec::with_capacity(2 * cfg.n);
    for (k, r) in reads.iter().enumerate() {
        let (c, s) = match trig[k] {
            Some(cs) => cs,
            None => neighbour_average(&trig, k),
        };
        let centre = if image_frame { maps.to_image.apply(centres[k]) } else { centres[k] };
        let (top, bottom) = fiducial_points_trig(centre, r.s.max(0.0), c, s);
        points.push(top);
        points.push(bottom);
    }
    let mut fid = FiducialPointSet { points, n: cfg.n };
    let to_map = maps.to_image.inverse();
    let map_ring: Vec<Point> = if image_frame {
        fid.ring().into_iter().map(|p| to_map.apply(p)).collect()
    } else {
        fid.ring()
    };
    let ring = rdp_closed(&map_ring, cfg.dp_epsilon);
    let mut ring: Vec<Point> = ring.into_iter().map(|p| maps.to_image.apply(p)).collect();
    ring.dedup();
    while ring.len() > 1 && ring[0] == ring[ring.len() - 1] {
        ring.pop();
    }
    let polygon = Polygon::new(ring)?;
    if !image_frame {
        fid.points = fid.points.into_iter().map(|p| maps.to_image.apply(p)).collect();
    }
    let score = reads.iter().map(|r| r.tcl).sum::<f64>() / reads.len() as f64;
    Ok(DecodedText {
        polygon,
        fiducials: fid,
        score: score.clamp(0.0, 1.0),
    })
}

/// Direction substituted for a degenerate sample: the normalized mean of
/// the nearest valid samples on either side.
fn neighbour_average(trig: &[Option<(f64, f64)>], k: usize) -> (f64, f64) {
    let before = trig[..k].iter().rev().flatten().next();
    let after = trig[k + 1..].iter().flatten().next();
    let (c, s) = match (before, after) {
        (Some(a), Some(b)) => (a.0 + b.0, a.1 + b.1),
        (Some(a), None) | (None, Some(a)) => *a,
        (None, None) => unreachable!("at least one sample is valid"),
    };
    normalize_trig(c, s).unwrap_or(before.or(after).copied().unwrap())
}
