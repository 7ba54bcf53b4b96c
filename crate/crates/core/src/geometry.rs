//! Planar primitives shared by the codec, the data layer and evaluation.
//!
//! Image coordinates: `x` grows to the right, `y` grows downward, and the
//! centre of pixel `(row, col)` sits at `(x = col, y = row)`. Angles follow
//! the math convention (counter-clockwise from +x with y pointing up), so a
//! direction `(dx, dy)` in image space has angle `atan2(-dy, dx)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn add(self, o: Point) -> Point {
        Point::new(self.x + o.x, self.y + o.y)
    }

    pub fn sub(self, o: Point) -> Point {
        Point::new(self.x - o.x, self.y - o.y)
    }

    pub fn scale(self, k: f64) -> Point {
        Point::new(self.x * k, self.y * k)
    }

    pub fn dot(self, o: Point) -> f64 {
        self.x * o.x + self.y * o.y
    }

    pub fn cross(self, o: Point) -> f64 {
        self.x * o.y - self.y * o.x
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn dist(self, o: Point) -> f64 {
        self.sub(o).norm()
    }

    pub fn lerp(self, o: Point, t: f64) -> Point {
        Point::new(self.x + (o.x - self.x) * t, self.y + (o.y - self.y) * t)
    }

    pub fn midpoint(self, o: Point) -> Point {
        self.lerp(o, 0.5)
    }

    /// Math-convention angle of this vector taken as an image-space direction.
    pub fn image_angle(self) -> f64 {
        (-self.y).atan2(self.x)
    }

    /// Unit image-space direction for a math-convention angle.
    pub fn from_image_angle(a: f64) -> Point {
        Point::new(a.cos(), -a.sin())
    }
}

/// Closed polygon; the last vertex connects back to the first.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Polygon {
    pub vertices: Vec<Point>,
}

impl Polygon {
    /// Checks the basic invariants: at least three vertices and no repeated
    /// consecutive vertex (including the closing edge).
    pub fn new(vertices: Vec<Point>) -> Result<Self> {
        if vertices.len() < 3 {
            return Err(Error::MalformedAnnotation(format!(
                "polygon needs ≥3 vertices, got {}",
                vertices.len()
            )));
        }
        let n = vertices.len();
        for i in 0..n {
            if vertices[i] == vertices[(i + 1) % n] {
                return Err(Error::MalformedAnnotation(format!(
                    "consecutive vertices {i} and {} coincide",
                    (i + 1) % n
                )));
            }
        }
        Ok(Self { vertices })
    }

    /// Skips validation; for internal results that may be degenerate.
    pub fn from_points_unchecked(vertices: Vec<Point>) -> Self {
        Self { vertices }
    }

    pub fn len(&self) -> usize {
        self.vertices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }

    /// Shoelace signed area in the raw coordinate frame.
    pub fn signed_area(&self) -> f64 {
        signed_area(&self.vertices)
    }

    pub fn area(&self) -> f64 {
        self.signed_area().abs()
    }

    pub fn bounds(&self) -> (Point, Point) {
        bounds(&self.vertices)
    }

    pub fn contains(&self, p: Point) -> bool {
        point_in_polygon(&self.vertices, p)
    }

    pub fn translate(&self, d: Point) -> Polygon {
        Polygon::from_points_unchecked(self.vertices.iter().map(|v| v.add(d)).collect())
    }

    pub fn map(&self, f: impl Fn(Point) -> Point) -> Polygon {
        Polygon::from_points_unchecked(self.vertices.iter().map(|&v| f(v)).collect())
    }

    /// True if no two non-adjacent edges intersect.
    pub fn is_simple(&self) -> bool {
        let v = &self.vertices;
        let n = v.len();
        for i in 0..n {
            let (a, b) = (v[i], v[(i + 1) % n]);
            for j in i + 1..n {
                if j == i + 1 || (i == 0 && j == n - 1) {
                    continue;
                }
                let (c, d) = (v[j], v[(j + 1) % n]);
                if segments_intersect(a, b, c, d) {
                    return false;
                }
            }
        }
        true
    }
}

pub fn signed_area(v: &[Point]) -> f64 {
    let n = v.len();
    if n < 3 {
        return 0.0;
    }
    let mut s = 0.0;
    for i in 0..n {
        s += v[i].cross(v[(i + 1) % n]);
    }
    0.5 * s
}

pub fn bounds(v: &[Point]) -> (Point, Point) {
    let mut lo = Point::new(f64::INFINITY, f64::INFINITY);
    let mut hi = Point::new(f64::NEG_INFINITY, f64::NEG_INFINITY);
    for p in v {
        lo.x = lo.x.min(p.x);
        lo.y = lo.y.min(p.y);
        hi.x = hi.x.max(p.x);
        hi.y = hi.y.max(p.y);
    }
    (lo, hi)
}

/// Even-odd rule.
pub fn point_in_polygon(v: &[Point], p: Point) -> bool {
    let n = v.len();
    let mut inside = false;
    let mut j = n - 1;
    for i in 0..n {
        let (a, b) = (v[i], v[j]);
        if (a.y > p.y) != (b.y > p.y) {
            let x = a.x + (p.y - a.y) * (b.x - a.x) / (b.y - a.y);
            if p.x < x {
                inside = !inside;
            }
        }
        j = i;
    }
    inside
}

fn orient(a: Point, b: Point, c: Point) -> f64 {
    b.sub(a).cross(c.sub(a))
}

fn on_segment(a: Point, b: Point, p: Point) -> bool {
    p.x >= a.x.min(b.x) && p.x <= a.x.max(b.x) && p.y >= a.y.min(b.y) && p.y <= a.y.max(b.y)
}

pub fn segments_intersect(a: Point, b: Point, c: Point, d: Point) -> bool {
    let d1 = orient(c, d, a);
    let d2 = orient(c, d, b);
    let d3 = orient(a, b, c);
    let d4 = orient(a, b, d);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0))
        && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0))
    {
        return true;
    }
    (d1 == 0.0 && on_segment(c, d, a))
        || (d2 == 0.0 && on_segment(c, d, b))
        || (d3 == 0.0 && on_segment(a, b, c))
        || (d4 == 0.0 && on_segment(a, b, d))
}

/// Distance from `p` to segment `ab`, plus the clamped projection parameter.
pub fn point_segment_distance(p: Point, a: Point, b: Point) -> (f64, f64) {
    let ab = b.sub(a);
    let len2 = ab.dot(ab);
    let t = if len2 > 0.0 {
        (p.sub(a).dot(ab) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    (p.dist(a.lerp(b, t)), t)
}

pub fn polyline_length(pts: &[Point]) -> f64 {
    pts.windows(2).map(|w| w[0].dist(w[1])).sum()
}

/// Cumulative arc length at each vertex.
pub fn cumulative_lengths(pts: &[Point]) -> Vec<f64> {
    let mut acc = Vec::with_capacity(pts.len());
    let mut s = 0.0;
    acc.push(0.0);
    for w in pts.windows(2) {
        s += w[0].dist(w[1]);
        acc.push(s);
    }
    acc
}

/// Point at arc length `s` along the polyline (clamped to its ends).
pub fn point_at_arc(pts: &[Point], cum: &[f64], s: f64) -> Point {
    let total = *cum.last().unwrap_or(&0.0);
    if pts.len() == 1 || s <= 0.0 {
        return pts[0];
    }
    if s >= total {
        return *pts.last().unwrap();
    }
    let k = cum.partition_point(|&c| c <= s).clamp(1, pts.len() - 1);
    let seg = cum[k] - cum[k - 1];
    let t = if seg > 0.0 { (s - cum[k - 1]) / seg } else { 0.0 };
    pts[k - 1].lerp(pts[k], t)
}

/// Axis-separable affine map `p ↦ (sx·x + tx, sy·y + ty)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Affine {
    pub sx: f64,
    pub tx: f64,
    pub sy: f64,
    pub ty: f64,
}

impl Default for Affine {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl Affine {
    pub const IDENTITY: Affine = Affine {
        sx: 1.0,
        tx: 0.0,
        sy: 1.0,
        ty: 0.0,
    };

    pub fn apply(&self, p: Point) -> Point {
        Point::new(self.sx * p.x + self.tx, self.sy * p.y + self.ty)
    }

    /// `self ∘ inner`: apply `inner` first.
    pub fn compose(&self, inner: &Affine) -> Affine {
        Affine {
            sx: self.sx * inner.sx,
            tx: self.sx * inner.tx + self.tx,
            sy: self.sy * inner.sy,
            ty: self.sy * inner.ty + self.ty,
        }
    }

    pub fn inverse(&self) -> Affine {
        Affine {
            sx: 1.0 / self.sx,
            tx: -self.tx / self.sx,
            sy: 1.0 / self.sy,
            ty: -self.ty / self.sy,
        }
    }
}

/// Rasterizes the polygon into a `h×w` mask using pixel-centre sampling.
pub fn rasterize(poly: &[Point], h: usize, w: usize) -> Vec<bool> {
    let mut mask = vec![false; h * w];
    for_each_inside(poly, h, w, |r, c| mask[r * w + c] = true);
    mask
}

/// Calls `f(row, col)` for every pixel centre inside the polygon, using
/// even-odd scanline crossings.
pub fn for_each_inside(poly: &[Point], h: usize, w: usize, mut f: impl FnMut(usize, usize)) {
    if poly.len() < 3 || h == 0 || w == 0 {
        return;
    }
    let (lo, hi) = bounds(poly);
    let r0 = lo.y.ceil().max(0.0) as usize;
    let r1 = (hi.y.floor().min((h - 1) as f64)).max(-1.0);
    if r1 < 0.0 {
        return;
    }
    let mut xs = Vec::new();
    for r in r0..=r1 as usize {
        let y = r as f64;
        xs.clear();
        let n = poly.len();
        for i in 0..n {
            let (a, b) = (poly[i], poly[(i + 1) % n]);
            if (a.y > y) != (b.y > y) {
                xs.push(a.x + (y - a.y) * (b.x - a.x) / (b.y - a.y));
            }
        }
        xs.sort_by(f64::total_cmp);
        for pair in xs.chunks_exact(2) {
            // pixel centres with pair[0] <= c < pair[1]; matches point_in_polygon
            let c0 = pair[0].ceil().max(0.0);
            let c1 = pair[1].ceil().min(w as f64);
            let mut c = c0 as i64;
            while (c as f64) < c1 {
                if (c as f64) < pair[1] {
                    f(r, c as usize);
                }
                c += 1;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square(x: f64, y: f64, s: f64) -> Vec<Point> {
        vec![
            Point::new(x, y),
            Point::new(x + s, y),
            Point::new(x + s, y + s),
            Point::new(x, y + s),
        ]
    }

    #[test]
    fn polygon_invariants() {
        assert!(Polygon::new(square(0.0, 0.0, 1.0)[..2].to_vec()).is_err());
        let mut v = square(0.0, 0.0, 1.0);
        v.push(v[0]);
        assert!(Polygon::new(v).is_err());
        assert!(Polygon::new(square(0.0, 0.0, 1.0)).is_ok());
    }

    #[test]
    fn shoelace() {
        assert_eq!(signed_area(&square(0.0, 0.0, 2.0)), 4.0);
        let mut v = square(0.0, 0.0, 2.0);
        v.reverse();
        assert_eq!(signed_area(&v), -4.0);
    }

    #[test]
    fn simplicity() {
        let bowtie = Polygon::from_points_unchecked(vec![
            Point::new(0.0, 0.0),
            Point::new(2.0, 2.0),
            Point::new(2.0, 0.0),
            Point::new(0.0, 2.0),
        ]);
        assert!(!bowtie.is_simple());
        assert!(Polygon::from_points_unchecked(square(0.0, 0.0, 1.0)).is_simple());
    }

    #[test]
    fn raster_matches_point_in_polygon() {
        let poly = vec![
            Point::new(1.3, 0.2),
            Point::new(9.7, 2.0),
            Point::new(6.0, 5.5),
            Point::new(8.2, 9.1),
            Point::new(0.4, 7.7),
        ];
        let mask = rasterize(&poly, 12, 12);
        for r in 0..12 {
            for c in 0..12 {
                let want = point_in_polygon(&poly, Point::new(c as f64, r as f64));
                assert_eq!(mask[r * 12 + c], want, "pixel ({r},{c})");
            }
        }
    }

    #[test]
    fn arc_sampling() {
        let pts = [Point::new(0.0, 0.0), Point::new(10.0, 0.0), Point::new(10.0, 10.0)];
        let cum = cumulative_lengths(&pts);
        assert_eq!(point_at_arc(&pts, &cum, 15.0), Point::new(10.0, 5.0));
        assert_eq!(point_at_arc(&pts, &cum, -1.0), pts[0]);
        assert_eq!(point_at_arc(&pts, &cum, 99.0), pts[2]);
    }

    #[test]
    fn affine_inverse_and_compose() {
        let a = Affine { sx: 2.0, tx: 1.0, sy: 0.5, ty: -3.0 };
        let b = Affine { sx: 4.0, tx: -0.5, sy: 3.0, ty: 2.0 };
        let p = Point::new(3.0, 7.0);
        let q = a.compose(&b).apply(p);
        let r = a.apply(b.apply(p));
        assert!((q.x - r.x).abs() < 1e-12 && (q.y - r.y).abs() < 1e-12);
        let back = a.inverse().apply(a.apply(p));
        assert!((back.x - p.x).abs() < 1e-12 && (back.y - p.y).abs() < 1e-12);
    }

    #[test]
    fn angle_convention() {
        // up in the image is +π/2
        assert!((Point::new(0.0, -1.0).image_angle() - std::f64::consts::FRAC_PI_2).abs() < 1e-15);
        let d = Point::from_image_angle(std::f64::consts::PI);
        assert!((d.x + 1.0).abs() < 1e-15 && d.y.abs() < 1e-15);
    }
}
