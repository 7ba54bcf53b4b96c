use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::Sample;
use crate::error::{Error, Result};
use crate::fox::TextAnnotation;
use crate::geometry::{bounds, cumulative_lengths, for_each_inside, point_at_arc, Point};
use crate::tensor::Tensor;

/// Pixel noise added to every rendered image.
pub const NOISE_SIGMA: f64 = 0.05;
const DENSE: usize = 256;

/// One ribbon-shaped text instance around a cubic Bézier baseline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RibbonSpec {
    pub baseline: [Point; 4],
    pub half_thickness: f64,
    /// Arc length of the baseline.
    pub length: f64,
    pub char_count: usize,
    /// Seeds the ribbon's fill colour.
    pub seed: u64,
}

fn bezier(b: &[Point; 4], t: f64) -> Point {
    let u = 1.0 - t;
    b[0].scale(u * u * u)
        .add(b[1].scale(3.0 * u * u * t))
        .add(b[2].scale(3.0 * u * t * t))
        .add(b[3].scale(t * t * t))
}

fn bezier_d1(b: &[Point; 4], t: f64) -> Point {
    let u = 1.0 - t;
    b[1].sub(b[0])
        .scale(3.0 * u * u)
        .add(b[2].sub(b[1]).scale(6.0 * u * t))
        .add(b[3].sub(b[2]).scale(3.0 * t * t))
}

fn bezier_d2(b: &[Point; 4], t: f64) -> Point {
    let u = 1.0 - t;
    b[2].sub(b[1].scale(2.0)).add(b[0]).scale(6.0 * u).add(b[3].sub(b[2].scale(2.0)).add(b[1]).scale(6.0 * t))
}

impl RibbonSpec {
    pub fn new(baseline: [Point; 4], half_thickness: f64, char_count: usize, seed: u64) -> Self {
        let dense: Vec<Point> = (0..=DENSE).map(|k| bezier(&baseline, k as f64 / DENSE as f64)).collect();
        let length = cumulative_lengths(&dense)[DENSE];
        Self {
            baseline,
            half_thickness,
            length,
            char_count,
            seed,
        }
    }

    /// Validates the ribbon and builds its annotation: the baseline offset by
    /// ±`half_thickness` along its normals, `2·char_count` points per side.
    pub fn annotation(&self, h: usize, w: usize) -> Result<TextAnnotation> {
        if self.half_thickness.is_nan() || self.half_thickness <= 0.0 {
            return Err(Error::RejectedSpec(format!("half thickness {}", self.half_thickness)));
        }
        if self.char_count == 0 {
            return Err(Error::RejectedSpec("char_count must be positive".into()));
        }
        let ts: Vec<f64> = (0..=DENSE).map(|k| k as f64 / DENSE as f64).collect();
        let dense: Vec<Point> = ts.iter().map(|&t| bezier(&self.baseline, t)).collect();
        for &t in &ts {
            let d1 = bezier_d1(&self.baseline, t);
            let speed = d1.norm();
            if speed < 1e-9 {
                return Err(Error::RejectedSpec(format!("baseline stalls at t={t:.3}")));
            }
            let kappa = d1.cross(bezier_d2(&self.baseline, t)).abs() / speed.powi(3);
            if kappa * self.half_thickness >= 0.5 {
                return Err(Error::RejectedSpec(format!(
                    "curvature {kappa:.4} too tight for half thickness {} at t={t:.3}",
                    self.half_thickness
                )));
            }
        }
        let cum = cumulative_lengths(&dense);
        let total = cum[DENSE];
        let m = 2 * self.char_count;
        let mut top = Vec::with_capacity(m);
        let mut bottom = Vec::with_capacity(m);
        for k in 0..m {
            let s = total * k as f64 / (m - 1).max(1) as f64;
            let p = point_at_arc(&dense, &cum, s);
            // tangent from the parameter of the nearest dense sample
            let j = cum.partition_point(|&c| c < s).min(DENSE);
            let d = bezier_d1(&self.baseline, ts[j]);
            let d = d.scale(1.0 / d.norm());
            let up = Point::new(d.y, -d.x).scale(self.half_thickness);
            top.push(p.add(up));
            bottom.push(p.sub(up));
        }
        let ann = TextAnnotation::from_lines(top, bottom, false)
            .map_err(|e| Error::RejectedSpec(format!("offset curve: {e}")))?;
        if !ann.boundary.is_simple() {
            return Err(Error::RejectedSpec("offset curve self-intersects".into()));
        }
        let (lo, hi) = bounds(&ann.boundary.vertices);
        if lo.x < 0.0 || lo.y < 0.0 || hi.x > (w - 1) as f64 || hi.y > (h - 1) as f64 {
            return Err(Error::RejectedSpec(format!(
                "ribbon spans ({:.1},{:.1})..({:.1},{:.1}) outside a {w}×{h} canvas",
                lo.x, lo.y, hi.x, hi.y
            )));
        }
        Ok(ann)
    }
}

/// Renders the ribbons onto an `h×w` canvas. Deterministic in `seed`.
pub fn generate_sample(specs: &[RibbonSpec], h: usize, w: usize, seed: u64) -> Result<Sample> {
    let annotations = specs.iter().map(|s| s.annotation(h, w)).collect::<Result<Vec<_>>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bg: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..0.35));
    let mut img = vec![0.0; 3 * h * w];
    for (ch, &b) in bg.iter().enumerate() {
        img[ch * h * w..(ch + 1) * h * w].fill(b);
    }
    for (spec, ann) in specs.iter().zip(&annotations) {
        let mut crng = ChaCha8Rng::seed_from_u64(spec.seed);
        let fg: [f64; 3] = std::array::from_fn(|_| crng.random_range(0.65..1.0));
        for_each_inside(&ann.boundary.vertices, h, w, |r, c| {
            for (ch, &f) in fg.iter().enumerate() {
                img[ch * h * w + r * w + c] = f;
            }
        });
    }
    let noise = Normal::new(0.0, NOISE_SIGMA).expect("valid sigma");
    for v in &mut img {
        *v += noise.sample(&mut rng);
    }
    Ok(Sample {
        image: Tensor::new(&[3, h, w], img)?,
        annotations,
    })
}

/// Parameters of random ribbon layouts.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub h: usize,
    pub w: usize,
    pub min_instances: usize,
    pub max_instances: usize,
    pub min_half_thickness: f64,
    pub max_half_thickness: f64,
    pub min_length: f64,
    pub max_length: f64,
    /// Largest baseline tilt from horizontal, radians.
    pub max_tilt: f64,
    /// Largest control-point offset from the chord, as a fraction of its length.
    pub max_bend: f64,
    /// Clearance between instance bounding boxes.
    pub gap: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            h: 128,
            w: 128,
            min_instances: 1,
            max_instances: 2,
            min_half_thickness: 5.0,
            max_half_thickness: 8.0,
            min_length: 50.0,
            max_length: 100.0,
            max_tilt: 0.5,
            max_bend: 0.35,
            gap: 6.0,
        }
    }
}

/// Draws a ribbon that fits the canvas, retrying rejected draws.
pub fn random_spec<R: Rng + ?Sized>(rng: &mut R, cfg: &SynthConfig) -> Result<(RibbonSpec, TextAnnotation)> {
    for _ in 0..200 {
        let half = rng.random_range(cfg.min_half_thickness..=cfg.max_half_thickness);
        let len = rng.random_range(cfg.min_length..=cfg.max_length).min(cfg.w as f64 - 2.0 * half - 4.0);
        if len <= 4.0 * half {
            continue;
        }
        let tilt = rng.random_range(-cfg.max_tilt..=cfg.max_tilt);
        let u = Point::new(tilt.cos(), -tilt.sin());
        let nrm = Point::new(u.y, -u.x);
        let c = Point::new(
            rng.random_range(0.0..cfg.w as f64),
            rng.random_range(0.0..cfg.h as f64),
        );
        let p0 = c.sub(u.scale(len / 2.0));
        let p3 = c.add(u.scale(len / 2.0));
        let b1 = rng.random_range(-cfg.max_bend..=cfg.max_bend) * len;
        let b2 = rng.random_range(-cfg.max_bend..=cfg.max_bend) * len;
        let p1 = p0.add(u.scale(len / 3.0)).add(nrm.scale(b1));
        let p2 = p3.sub(u.scale(len / 3.0)).add(nrm.scale(b2));
        let chars = ((len / (2.0 * half)).round() as usize).clamp(2, 10);
        let spec = RibbonSpec::new([p0, p1, p2, p3], half, chars, rng.random());
        if let Ok(ann) = spec.annotation(cfg.h, cfg.w) {
            return Ok((spec, ann));
        }
    }
    Err(Error::RejectedSpec(format!(
        "no ribbon fits a {}×{} canvas after 200 draws",
        cfg.w, cfg.h
    )))
}

fn boxes_clear(a: &TextAnnotation, b: &TextAnnotation, gap: f64) -> bool {
    let (alo, ahi) = bounds(&a.boundary.vertices);
    let (blo, bhi) = bounds(&b.boundary.vertices);
    alo.x > bhi.x + gap || blo.x > ahi.x + gap || alo.y > bhi.y + gap || blo.y > ahi.y + gap
}

/// Random layout of separated ribbons. Deterministic in `seed`.
pub fn random_specs(cfg: &SynthConfig, seed: u64) -> Result<Vec<RibbonSpec>> {
    if cfg.min_instances > cfg.max_instances {
        return Err(Error::Config("min_instances exceeds max_instances".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let count = rng.random_range(cfg.min_instances..=cfg.max_instances);
    let mut specs = Vec::with_capacity(count);
    let mut anns: Vec<TextAnnotation> = Vec::with_capacity(count);
    let mut tries = 0;
    while specs.len() < count {
        tries += 1;
        if tries > 500 {
            return Err(Error::RejectedSpec(format!("could not place {count} separated ribbons")));
        }
        let (spec, ann) = random_spec(&mut rng, cfg)?;
        if anns.iter().all(|a| boxes_clear(a, &ann, cfg.gap)) {
            specs.push(spec);
            anns.push(ann);
        }
    }
    Ok(specs)
}

pub fn synthetic_sample(cfg: &SynthConfig, seed: u64) -> Result<Sample> {
    let specs = random_specs(cfg, seed)?;
    generate_sample(&specs, cfg.h, cfg.w, seed.wrapping_add(0x5eed))
}

/// `count` samples with seeds `seed, seed+1, …`.
pub fn synthetic_set(cfg: &SynthConfig, count: usize, seed: u64) -> Result<Vec<Sample>> {
    (0..count as u64).map(|k| synthetic_sample(cfg, seed.wrapping_add(k))).collect()
}
