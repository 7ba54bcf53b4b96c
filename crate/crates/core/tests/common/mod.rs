#![allow(dead_code)]

use nask::tensor::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Relative error `‖a − b‖₂ / max(‖a‖₂ + ‖b‖₂, 1e-12)`.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / (na + nb).max(1e-12)
}

/// Central finite differences of a scalar function over every input entry.
pub fn numeric_grad(x: &Tensor, h: f64, f: &dyn Fn(&Tensor) -> f64) -> Vec<f64> {
    let mut probe = x.clone();
    (0..x.len())
        .map(|i| {
            let orig = probe.data()[i];
            probe.data_mut()[i] = orig + h;
            let up = f(&probe);
            probe.data_mut()[i] = orig - h;
            let down = f(&probe);
            probe.data_mut()[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Builds a scalar loss from a single input via `build`, returns
/// (analytic, numeric) gradients w.r.t. that input.
pub fn grad_pair(x: &Tensor, build: &dyn Fn(&mut Tape, Var) -> Var) -> (Vec<f64>, Vec<f64>) {
    let mut tape = Tape::new();
    let xv = tape.param(x);
    let loss = build(&mut tape, xv);
    tape.backward(loss).unwrap();
    let analytic = tape.grad(xv).unwrap().to_vec();
    let numeric = numeric_grad(x, 1e-5, &|probe| {
        let mut t = Tape::new();
        let v = t.constant(probe.clone());
        let l = build(&mut t, v);
        t.value(l).data()[0]
    });
    (analytic, numeric)
}

/// `Σ rᵢ·yᵢ` with a fixed pseudo-random projection, so that every output
/// entry contributes a distinct weight to the gradient.
pub fn project(tape: &mut Tape, y: Var, seed: u64) -> Var {
    let mut r = rng(seed ^ 0x9e37_79b9);
    let w = random_tensor(&mut r, tape.shape(y));
    let w = tape.constant(w);
    let p = tape.mul(y, w).unwrap();
    tape.sum(p)
}

use nask::fox::TextAnnotation;
use nask::geometry::Point;

/// Ribbon around a sampled spine: the top line is offset by `half` to the
/// image-up side of the tangent, the bottom line to the other side.
pub fn ribbon(spine: &[Point], half: f64) -> TextAnnotation {
    let n = spine.len();
    let mut top = Vec::with_capacity(n);
    let mut bottom = Vec::with_capacity(n);
    for i in 0..n {
        let (a, b) = (spine[i.saturating_sub(1)], spine[(i + 1).min(n - 1)]);
        let t = b.sub(a);
        let t = t.scale(1.0 / t.norm());
        let nrm = Point::new(t.y, -t.x);
        top.push(spine[i].add(nrm.scale(half)));
        bottom.push(spine[i].sub(nrm.scale(half)));
    }
    TextAnnotation::from_lines(top, bottom, false).unwrap()
}

/// Upper half circle around `c`, traversed left to right.
pub fn semicircle(c: Point, r: f64, samples: usize) -> Vec<Point> {
    (0..samples)
        .map(|k| {
            let a = std::f64::consts::PI * (1.0 - k as f64 / (samples - 1) as f64);
            Point::new(c.x + r * a.cos(), c.y - r * a.sin())
        })
        .collect()
}

/// Cubic Bézier through four control points.
pub fn bezier(ctrl: [Point; 4], samples: usize) -> Vec<Point> {
    (0..samples)
        .map(|k| {
            let t = k as f64 / (samples - 1) as f64;
            let u = 1.0 - t;
            let w = [u * u * u, 3.0 * u * u * t, 3.0 * u * t * t, t * t * t];
            ctrl.iter().zip(w).fold(Point::default(), |acc, (p, wi)| acc.add(p.scale(wi)))
        })
        .collect()
}

/// Symmetric Hausdorff distance between two point sets.
pub fn hausdorff(a: &[Point], b: &[Point]) -> f64 {
    let one = |x: &[Point], y: &[Point]| {
        x.iter()
            .map(|p| y.iter().map(|q| p.dist(*q)).fold(f64::INFINITY, f64::min))
            .fold(0.0, f64::max)
    };
    one(a, b).max(one(b, a))
}
