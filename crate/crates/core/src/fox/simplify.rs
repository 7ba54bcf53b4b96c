//! Ramer–Douglas–Peucker polyline simplification.

use crate::geometry::{point_segment_distance, Point};

/// Simplifies an open polyline; both endpoints are always kept.
pub fn rdp_open(pts: &[Point], epsilon: f64) -> Vec<Point> {
    if pts.len() <= 2 {
        return pts.to_vec();
    }
    let mut keep = vec![false; pts.len()];
    keep[0] = true;
    keep[pts.len() - 1] = true;
    let mut stack = vec![(0, pts.len() - 1)];
    while let Some((a, b)) = stack.pop() {
        let mut far = (0.0, a);
        for i in a + 1..b {
            let (d, _) = point_segment_distance(pts[i], pts[a], pts[b]);
            if d > far.0 {
                far = (d, i);
            }
        }
        if far.0 > epsilon {
            keep[far.1] = true;
            stack.push((a, far.1));
            stack.push((far.1, b));
        }
    }
    pts.iter().zip(&keep).filter(|(_, &k)| k).map(|(&p, _)| p).collect()
}

/// Simplifies a closed ring. The ring is cut at vertex 0 and at the vertex
/// farthest from it; at least three vertices survive.
pub fn rdp_closed(ring: &[Point], epsilon: f64) -> Vec<Point> {
    let n = ring.len();
    if n <= 3 {
        return ring.to_vec();
    }
    let far = (1..n)
        .max_by(|&i, &j| ring[0].dist(ring[i]).total_cmp(&ring[0].dist(ring[j])).then(j.cmp(&i)))
        .unwrap();
    let first = rdp_open(&ring[..=far], epsilon);
    let mut second_src = ring[far..].to_vec();
    second_src.push(ring[0]);
    let second = rdp_open(&second_src, epsilon);
    let mut out = first[..first.len() - 1].to_vec();
    out.extend_from_slice(&second[..second.len() - 1]);
    if out.len() < 3 {
        // both halves collapsed to their chord: restore the widest vertex
        let (a, b) = (ring[0], ring[far]);
        let extra = (1..n)
            .filter(|&i| i != far)
            .max_by(|&i, &j| {
                let di = point_segment_distance(ring[i], a, b).0;
                let dj = point_segment_distance(ring[j], a, b).0;
                di.total_cmp(&dj).then(j.cmp(&i))
            })
            .unwrap();
        out = if extra < far {
            vec![a, ring[extra], b]
        } else {
            vec![a, b, ring[extra]]
        };
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(x: f64, y: f64) -> Point {
        Point::new(x, y)
    }

    #[test]
    fn collinear_points_collapse() {
        let line: Vec<Point> = (0..10).map(|i| p(i as f64, 0.0)).collect();
        assert_eq!(rdp_open(&line, 0.1), vec![p(0.0, 0.0), p(9.0, 0.0)]);
    }

    #[test]
    fn corner_survives() {
        let pts = vec![p(0.0, 0.0), p(5.0, 0.1), p(10.0, 0.0), p(10.0, 10.0)];
        assert_eq!(rdp_open(&pts, 0.5), vec![p(0.0, 0.0), p(10.0, 0.0), p(10.0, 10.0)]);
    }

    #[test]
    fn densified_square_returns_corners() {
        let mut ring = Vec::new();
        for i in 0..4 {
            ring.push(p(i as f64 * 2.5, 0.0));
        }
        for i in 0..4 {
            ring.push(p(10.0, i as f64 * 2.5));
        }
        for i in 0..4 {
            ring.push(p(10.0 - i as f64 * 2.5, 10.0));
        }
        for i in 0..4 {
            ring.push(p(0.0, 10.0 - i as f64 * 2.5));
        }
        let out = rdp_closed(&ring, 0.5);
        assert_eq!(out, vec![p(0.0, 0.0), p(10.0, 0.0), p(10.0, 10.0), p(0.0, 10.0)]);
    }

    #[test]
    fn thin_ring_keeps_three_vertices() {
        let ring = vec![p(0.0, 0.0), p(5.0, 0.2), p(10.0, 0.0), p(5.0, -0.1)];
        let out = rdp_closed(&ring, 1.0);
        assert_eq!(out.len(), 3);
    }
}
