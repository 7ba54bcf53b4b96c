//! Fiducial-point text geometry: per-character slices, dense geometry maps
//! for supervision, and reconstruction of boundary polygons from predicted
//! maps.
//!
//! A text instance is described by its top and bottom boundary lines in
//! reading order. Each slice `i` carries a centre `c`, a scale `s` (half
//! the top-to-bottom distance), a character orientation `φ` (bottom → top)
//! and a text orientation `θ` (towards the next centre).

mod decode;
mod encode;
mod simplify;

pub use decode::{
    decode, extract_center_lines, sample_equidistant, CenterLine, DecodeConfig, Decoded, DecodedText,
};
pub use encode::{encode_geometry, encode_geometry_framed, EncodeConfig};
pub use simplify::{rdp_closed, rdp_open};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{cumulative_lengths, point_at_arc, polyline_length, Affine, Point, Polygon};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CharNode {
    pub c: Point,
    pub s: f64,
    pub phi: f64,
    pub theta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextAnnotation {
    pub boundary: Polygon,
    pub top_line: Vec<Point>,
    pub bottom_line: Vec<Point>,
    #[serde(default)]
    pub ignore: bool,
}

impl TextAnnotation {
    /// Builds the instance from its two boundary lines, both in reading
    /// order. The boundary is the top line followed by the reversed bottom.
    pub fn from_lines(top: Vec<Point>, bottom: Vec<Point>, ignore: bool) -> Result<Self> {
        if top.len() < 2 || bottom.len() < 2 {
            return Err(Error::MalformedAnnotation(
                "top and bottom lines need at least two points each".into(),
            ));
        }
        let mut ring = top.clone();
        ring.extend(bottom.iter().rev());
        let boundary = Polygon::new(ring)?;
        let (top_line, bottom_line) = equalize(&top, &bottom);
        Ok(Self {
            boundary,
            top_line,
            bottom_line,
            ignore,
        })
    }

    /// Splits an arbitrary polygon into top/bottom lines by locating its
    /// head and tail edges.
    pub fn from_polygon(boundary: Polygon, ignore: bool) -> Result<Self> {
        let (top, bottom) = split_boundary(&boundary)?;
        let (top_line, bottom_line) = equalize(&top, &bottom);
        Ok(Self {
            boundary,
            top_line,
            bottom_line,
            ignore,
        })
    }

    pub fn char_nodes(&self, n: usize) -> Result<Vec<CharNode>> {
        derive_char_nodes(self, n)
    }

    pub fn map(&self, f: impl Fn(Point) -> Point) -> Self {
        Self {
            boundary: self.boundary.map(&f),
            top_line: self.top_line.iter().map(|&p| f(p)).collect(),
            bottom_line: self.bottom_line.iter().map(|&p| f(p)).collect(),
            ignore: self.ignore,
        }
    }
}

/// Resamples two polylines to a common point count by arc-length fraction.
fn equalize(top: &[Point], bottom: &[Point]) -> (Vec<Point>, Vec<Point>) {
    if top.len() == bottom.len() {
        return (top.to_vec(), bottom.to_vec());
    }
    let m = top.len().max(bottom.len());
    let resample = |line: &[Point]| {
        let cum = cumulative_lengths(line);
        let total = *cum.last().unwrap();
        (0..m)
            .map(|k| point_at_arc(line, &cum, total * k as f64 / (m - 1) as f64))
            .collect::<Vec<_>>()
    };
    (resample(top), resample(bottom))
}

/// Head/tail detection for polygons without explicit top/bottom split.
///
/// Head and tail are the two edges whose neighbouring edges run most
/// antiparallel, preferring short edges. The side that travels rightward
/// (or upward, for vertical text) is the top line.
pub fn split_boundary(poly: &Polygon) -> Result<(Vec<Point>, Vec<Point>)> {
    let mut v = poly.vertices.clone();
    if v.len() < 4 {
        return Err(Error::MalformedAnnotation(format!(
            "{} vertices cannot be split into top and bottom",
            v.len()
        )));
    }
    if poly.signed_area() < 0.0 {
        v.reverse();
    }
    let n = v.len();
    let edge = |i: usize| v[(i + 1) % n].sub(v[i % n]);
    let perimeter: f64 = (0..n).map(|i| edge(i).norm()).sum();
    if perimeter <= 0.0 || poly.area() < 1e-9 {
        return Err(Error::MalformedAnnotation("degenerate polygon".into()));
    }
    let unit = |p: Point| p.scale(1.0 / p.norm());
    let anti: Vec<f64> = (0..n)
        .map(|i| -unit(edge(i + n - 1)).dot(unit(edge(i + 1))))
        .collect();
    let mut best: Option<(f64, usize, usize)> = None;
    for i in 0..n {
        // side A is v[i+1..=j], side B is v[j+1..=i]; both need two points
        for j in (i + 2)..(i + n - 1) {
            let j = j % n;
            let score = anti[i] + anti[j] - (edge(i).norm() + edge(j).norm()) / perimeter;
            if best.is_none_or(|(s, _, _)| score > s + 1e-12) {
                best = Some((score, i, j));
            }
        }
    }
    let (_, i, j) = best.ok_or_else(|| Error::MalformedAnnotation("no head/tail split".into()))?;
    let walk = |from: usize, to: usize| {
        let mut out = vec![v[from]];
        let mut k = from;
        while k != to {
            k = (k + 1) % n;
            out.push(v[k]);
        }
        out
    };
    let a = walk((i + 1) % n, j);
    let b = walk((j + 1) % n, i);
    let heading = |line: &[Point]| {
        let d = line[line.len() - 1].sub(line[0]);
        d.x - d.y
    };
    let (top, mut bottom) = if heading(&a) >= heading(&b) { (a, b) } else { (b, a) };
    bottom.reverse();
    if top.len() < 2 || bottom.len() < 2 || polyline_length(&top) <= 0.0 || polyline_length(&bottom) <= 0.0 {
        return Err(Error::MalformedAnnotation("indistinguishable top and bottom".into()));
    }
    Ok((top, bottom))
}

/// Slices at the given arc-length fractions of the centre polyline through
/// the midpoints of corresponding top and bottom vertices. Both ends of a
/// slice sit at the same segment and parameter of their own line.
pub(crate) fn slices_at(top: &[Point], bottom: &[Point], fractions: &[f64]) -> Result<Vec<CharNode>> {
    if top.len() != bottom.len() || top.len() < 2 {
        return Err(Error::MalformedAnnotation(format!(
            "top and bottom lines have {} and {} points",
            top.len(),
            bottom.len()
        )));
    }
    let mids: Vec<Point> = top.iter().zip(bottom).map(|(t, b)| t.midpoint(*b)).collect();
    let cum = cumulative_lengths(&mids);
    let total = *cum.last().unwrap();
    let last = mids.len() - 1;
    let mut nodes = Vec::with_capacity(fractions.len());
    for &f in fractions {
        let (i, u) = if total > 0.0 {
            let at = (f * total).clamp(0.0, total);
            let i = cum.partition_point(|&c| c <= at).clamp(1, last) - 1;
            let seg = cum[i + 1] - cum[i];
            (i, if seg > 0.0 { (at - cum[i]) / seg } else { 0.0 })
        } else {
            let x = (f * last as f64).clamp(0.0, last as f64);
            let i = (x.floor() as usize).min(last - 1);
            (i, x - i as f64)
        };
        let t = top[i].add(top[i + 1].sub(top[i]).scale(u));
        let b = bottom[i].add(bottom[i + 1].sub(bottom[i]).scale(u));
        let s = t.dist(b) / 2.0;
        if s <= 0.0 {
            return Err(Error::MalformedAnnotation("top and bottom lines touch".into()));
        }
        nodes.push(CharNode {
            c: t.midpoint(b),
            s,
            phi: t.sub(b).image_angle(),
            theta: 0.0,
        });
    }
    let m = nodes.len();
    for i in 0..m.saturating_sub(1) {
        nodes[i].theta = nodes[i + 1].c.sub(nodes[i].c).image_angle();
    }
    if m >= 2 {
        nodes[m - 1].theta = nodes[m - 2].theta;
    }
    Ok(nodes)
}

/// `n` pseudo-character slices centred at arc fractions `(i + ½)/n`.
pub fn derive_char_nodes(ann: &TextAnnotation, n: usize) -> Result<Vec<CharNode>> {
    if n < 2 {
        return Err(Error::Config(format!("need at least 2 slices, got {n}")));
    }
    if ann.boundary.len() < 4 {
        return Err(Error::MalformedAnnotation("boundary needs at least 4 vertices".into()));
    }
    let fractions: Vec<f64> = (0..n).map(|i| (i as f64 + 0.5) / n as f64).collect();
    slices_at(&ann.top_line, &ann.bottom_line, &fractions)
}

/// Rescales a raw `(cos, sin)` regression pair to unit length.
pub fn normalize_trig(f_cos: f64, f_sin: f64) -> Result<(f64, f64)> {
    let norm = f_cos.hypot(f_sin);
    if !(norm >= 1e-9) {
        return Err(Error::DegenerateOrientation { norm });
    }
    Ok((f_cos / norm, f_sin / norm))
}

/// The two boundary points of one slice: `c ± s·(cos φ, −sin φ)`.
pub fn fiducial_points(c: Point, s: f64, phi: f64) -> (Point, Point) {
    fiducial_points_trig(c, s, phi.cos(), phi.sin())
}

pub fn fiducial_points_trig(c: Point, s: f64, cos_p: f64, sin_p: f64) -> (Point, Point) {
    let (tx, bx) = mirrored(c.x, s * cos_p);
    let (ty, by) = mirrored(c.y, -s * sin_p);
    (Point::new(tx, ty), Point::new(bx, by))
}

/// `(c + d, c − d)`. When `c` lies on the coarsest binary grid that can hold
/// both results, `d` is snapped to that grid first so neither sum rounds and
/// the pair sums to exactly `2c`.
fn mirrored(c: f64, d: f64) -> (f64, f64) {
    let m = c.abs() + d.abs();
    if m == 0.0 || !m.is_finite() {
        return (c + d, c - d);
    }
    let g = 2f64.powi(m.log2().floor() as i32 + 2 - 53);
    if (c / g).fract() != 0.0 {
        return (c + d, c - d);
    }
    let d = (d / g).round() * g;
    (c + d, c - d)
}

/// `2n` boundary points; index `2i` is the top point of slice `i` and
/// `2i + 1` its bottom point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FiducialPointSet {
    pub points: Vec<Point>,
    pub n: usize,
}

impl FiducialPointSet {
    pub fn top(&self) -> impl Iterator<Item = Point> + '_ {
        self.points.iter().step_by(2).copied()
    }

    pub fn bottom(&self) -> impl Iterator<Item = Point> + '_ {
        self.points.iter().skip(1).step_by(2).copied()
    }

    /// Top points in order, then bottom points reversed.
    pub fn ring(&self) -> Vec<Point> {
        let mut ring: Vec<Point> = self.top().collect();
        let bottom: Vec<Point> = self.bottom().collect();
        ring.extend(bottom.into_iter().rev());
        ring
    }
}

/// Text-region map plus the six regressed geometry channels, all `h×w`.
#[derive(Clone, Debug, PartialEq)]
pub struct GeometryMaps {
    pub h: usize,
    pub w: usize,
    pub tr: Vec<f64>,
    pub tcl: Vec<f64>,
    pub scale: Vec<f64>,
    pub sin_t: Vec<f64>,
    pub cos_t: Vec<f64>,
    pub sin_p: Vec<f64>,
    pub cos_p: Vec<f64>,
    /// Map pixel index space → image coordinates.
    pub to_image: Affine,
    /// Units of the scale and orientation channels.
    pub frame: AttributeFrame,
}

/// Where the scale and orientation channels are measured.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttributeFrame {
    /// Map pixels; decoded polygons are rescaled through `to_image` as a whole.
    #[default]
    Map,
    /// Image pixels and image-space angles. Only centre-line positions live
    /// in map coordinates, so an anisotropic `to_image` does not skew them.
    Image,
}

impl GeometryMaps {
    pub const CHANNELS: [&'static str; 7] = ["tr", "tcl", "s", "sin_t", "cos_t", "sin_p", "cos_p"];

    pub fn zeros(h: usize, w: usize) -> Self {
        let z = vec![0.0; h * w];
        Self {
            h,
            w,
            tr: z.clone(),
            tcl: z.clone(),
            scale: z.clone(),
            sin_t: z.clone(),
            cos_t: z.clone(),
            sin_p: z.clone(),
            cos_p: z,
            to_image: Affine::IDENTITY,
            frame: AttributeFrame::Map,
        }
    }

    fn channels(&self) -> [&Vec<f64>; 7] {
        [
            &self.tr,
            &self.tcl,
            &self.scale,
            &self.sin_t,
            &self.cos_t,
            &self.sin_p,
            &self.cos_p,
        ]
    }

    /// `[7, h, w]` in [`Self::CHANNELS`] order.
    pub fn to_tensor(&self) -> Tensor {
        let data = self.channels().iter().flat_map(|c| c.iter().copied()).collect();
        Tensor::new(&[7, self.h, self.w], data).expect("channel sizes")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let [c, h, w] = t.shape() else {
            return Err(Error::Dimension(format!("geometry maps need [7,h,w], got {:?}", t.shape())));
        };
        if *c != 7 {
            return Err(Error::Dimension(format!("geometry maps need 7 channels, got {c}")));
        }
        let (h, w) = (*h, *w);
        let ch = |k: usize| t.data()[k * h * w..(k + 1) * h * w].to_vec();
        Ok(Self {
            h,
            w,
            tr: ch(0),
            tcl: ch(1),
            scale: ch(2),
            sin_t: ch(3),
            cos_t: ch(4),
            sin_p: ch(5),
            cos_p: ch(6),
            to_image: Affine::IDENTITY,
            frame: AttributeFrame::Map,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn rect(x0: f64, y0: f64, x1: f64, y1: f64) -> Polygon {
        Polygon::new(vec![
            Point::new(x0, y0),
            Point::new(x1, y0),
            Point::new(x1, y1),
            Point::new(x0, y1),
        ])
        .unwrap()
    }

    #[test]
    fn rectangle_nodes() {
        let ann = TextAnnotation::from_polygon(rect(0.0, 0.0, 100.0, 20.0), false).unwrap();
        assert_eq!(ann.top_line, vec![Point::new(0.0, 0.0), Point::new(100.0, 0.0)]);
        let nodes = derive_char_nodes(&ann, 2).unwrap();
        for node in &nodes {
            assert!((node.s - 10.0).abs() < 1e-12);
            assert!((node.phi - FRAC_PI_2).abs() < 1e-12);
            assert!(node.theta.abs() < 1e-12);
        }
        assert_eq!(nodes[0].c, Point::new(25.0, 10.0));
    }

    #[test]
    fn split_ignores_orientation_and_start_vertex() {
        let mut v = rect(0.0, 0.0, 100.0, 20.0).vertices;
        v.reverse();
        v.rotate_left(1);
        let ann = TextAnnotation::from_polygon(Polygon::new(v).unwrap(), false).unwrap();
        assert_eq!(ann.top_line, vec![Point::new(0.0, 0.0), Point::new(100.0, 0.0)]);
        assert_eq!(ann.bottom_line, vec![Point::new(0.0, 20.0), Point::new(100.0, 20.0)]);
    }

    #[test]
    fn rotated_rectangle_nodes() {
        // the 100×20 strip turned a quarter counter-clockwise on screen
        let ann = TextAnnotation::from_polygon(rect(0.0, 0.0, 20.0, 100.0), false).unwrap();
        let nodes = derive_char_nodes(&ann, 2).unwrap();
        for node in &nodes {
            assert!((node.s - 10.0).abs() < 1e-12);
            assert!((node.phi.rem_euclid(2.0 * PI) - PI).abs() < 1e-12);
            assert!((node.theta - FRAC_PI_2).abs() < 1e-12);
        }
    }

    #[test]
    fn too_few_vertices() {
        let tri = Polygon::new(vec![Point::new(0.0, 0.0), Point::new(5.0, 0.0), Point::new(0.0, 5.0)]).unwrap();
        assert!(matches!(
            TextAnnotation::from_polygon(tri, false),
            Err(Error::MalformedAnnotation(_))
        ));
        let ann = TextAnnotation::from_polygon(rect(0.0, 0.0, 10.0, 4.0), false).unwrap();
        assert!(matches!(derive_char_nodes(&ann, 1), Err(Error::Config(_))));
    }

    #[test]
    fn trig_normalization() {
        assert_eq!(normalize_trig(3.0, 4.0).unwrap(), (0.6, 0.8));
        assert_eq!(normalize_trig(1.0, 0.0).unwrap(), (1.0, 0.0));
        assert!(matches!(
            normalize_trig(1e-10, 0.0),
            Err(Error::DegenerateOrientation { .. })
        ));
    }

    #[test]
    fn fiducial_examples() {
        let (t, b) = fiducial_points(Point::new(10.0, 10.0), 2.0, FRAC_PI_2);
        assert!(t.dist(Point::new(10.0, 8.0)) < 1e-12);
        assert!(b.dist(Point::new(10.0, 12.0)) < 1e-12);
        let (t, b) = fiducial_points(Point::new(3.0, 4.0), 0.0, 1.0);
        assert_eq!((t, b), (Point::new(3.0, 4.0), Point::new(3.0, 4.0)));
    }

    #[test]
    fn maps_tensor_roundtrip() {
        let mut m = GeometryMaps::zeros(2, 3);
        m.tcl[4] = 1.0;
        m.cos_p[5] = -0.5;
        let t = m.to_tensor();
        assert_eq!(t.shape(), &[7, 2, 3]);
        assert_eq!(t.at(&[1, 1, 1]), 1.0);
        assert_eq!(GeometryMaps::from_tensor(&t).unwrap(), m);
    }
}
