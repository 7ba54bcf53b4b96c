use nask::eval::{match_and_score, polygon_iou, EvalReport, GtInstance};
use nask::geometry::{Point, Polygon};
use proptest::prelude::*;

fn rect(x: f64, y: f64, w: f64, h: f64) -> Polygon {
    Polygon::new(vec![
        Point::new(x, y),
        Point::new(x + w, y),
        Point::new(x + w, y + h),
        Point::new(x, y + h),
    ])
    .unwrap()
}

fn rect_iou(a: (f64, f64, f64, f64), b: (f64, f64, f64, f64)) -> f64 {
    let iw = ((a.0 + a.2).min(b.0 + b.2) - a.0.max(b.0)).max(0.0);
    let ih = ((a.1 + a.3).min(b.1 + b.3) - a.1.max(b.1)).max(0.0);
    let i = iw * ih;
    i / (a.2 * a.3 + b.2 * b.3 - i)
}

/// Star-shaped simple polygon around `c`.
fn star(c: (f64, f64), radii: &[f64]) -> Polygon {
    let k = radii.len();
    let pts = radii
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let a = 2.0 * std::f64::consts::PI * i as f64 / k as f64;
            Point::new(c.0 + r * a.cos(), c.1 + r * a.sin())
        })
        .collect();
    Polygon::new(pts).unwrap()
}

fn gt(p: Polygon) -> GtInstance {
    GtInstance { polygon: p, ignore: false }
}

fn rect_strategy() -> impl Strategy<Value = (f64, f64, f64, f64)> {
    (-50.0..50.0, -50.0..50.0, 1.0..40.0, 1.0..40.0)
}

fn star_strategy() -> impl Strategy<Value = ((f64, f64), Vec<f64>)> {
    ((-20.0..20.0, -20.0..20.0), prop::collection::vec(5.0..30.0, 3..12))
}

proptest! {
    #[test]
    fn rectangles_match_closed_form(a in rect_strategy(), b in rect_strategy()) {
        let got = polygon_iou(&rect(a.0, a.1, a.2, a.3), &rect(b.0, b.1, b.2, b.3));
        prop_assert!((got - rect_iou(a, b)).abs() < 1e-9);
    }

    #[test]
    fn iou_is_symmetric_and_bounded((ca, ra) in star_strategy(), (cb, rb) in star_strategy()) {
        let (a, b) = (star(ca, &ra), star(cb, &rb));
        let ab = polygon_iou(&a, &b);
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert!((ab - polygon_iou(&b, &a)).abs() < 1e-9);
        prop_assert!((polygon_iou(&a, &a) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn iou_ignores_translation_start_vertex_and_orientation(
        (ca, ra) in star_strategy(),
        (cb, rb) in star_strategy(),
        shift in (-500.0..500.0, -500.0..500.0),
        rot in 0usize..12,
    ) {
        let (a, b) = (star(ca, &ra), star(cb, &rb));
        let base = polygon_iou(&a, &b);
        let moved = |p: &Polygon| Polygon::new(p.vertices.iter().map(|v| Point::new(v.x + shift.0, v.y + shift.1)).collect()).unwrap();
        prop_assert!((polygon_iou(&moved(&a), &moved(&b)) - base).abs() < 1e-9);
        let mut v = b.vertices.clone();
        let k = rot % v.len();
        v.rotate_left(k);
        v.reverse();
        prop_assert!((polygon_iou(&a, &Polygon::new(v).unwrap()) - base).abs() < 1e-9);
    }

    #[test]
    fn matching_is_one_to_one(
        gts in prop::collection::vec(rect_strategy(), 0..6),
        dets in prop::collection::vec(rect_strategy(), 0..6),
    ) {
        let g: Vec<GtInstance> = gts.iter().map(|r| gt(rect(r.0, r.1, r.2, r.3))).collect();
        let d: Vec<Polygon> = dets.iter().map(|r| rect(r.0, r.1, r.2, r.3)).collect();
        let (m, s) = match_and_score(&g, &d, 0.5);
        let mut gs: Vec<usize> = m.pairs.iter().map(|p| p.0).collect();
        let mut ds: Vec<usize> = m.pairs.iter().map(|p| p.1).collect();
        gs.sort_unstable();
        ds.sort_unstable();
        gs.dedup();
        ds.dedup();
        prop_assert_eq!(gs.len(), m.pairs.len());
        prop_assert_eq!(ds.len(), m.pairs.len());
        for &(gi, di, iou) in &m.pairs {
            prop_assert!(iou >= 0.5);
            prop_assert!((iou - rect_iou(gts[gi], dets[di])).abs() < 1e-9);
        }
        prop_assert!(m.pairs.windows(2).all(|w| w[0].2 >= w[1].2));
        prop_assert_eq!(m.pairs.len() + m.unmatched_gt.len(), g.len());
        prop_assert_eq!(m.pairs.len() + m.unmatched_det.len(), d.len());
        prop_assert!((0.0..=1.0).contains(&s.precision) && (0.0..=1.0).contains(&s.recall));
    }
}

#[test]
fn duplicate_detections_go_to_the_lowest_index() {
    let g = vec![gt(rect(0.0, 0.0, 10.0, 10.0))];
    let d = vec![rect(1.0, 0.0, 10.0, 10.0), rect(1.0, 0.0, 10.0, 10.0)];
    let (m, s) = match_and_score(&g, &d, 0.5);
    assert_eq!(m.pairs.len(), 1);
    assert_eq!((m.pairs[0].0, m.pairs[0].1), (0, 0));
    assert_eq!(m.unmatched_det, vec![1]);
    assert_eq!((s.precision, s.recall), (0.5, 1.0));
}

#[test]
fn greedy_prefers_the_best_pair_first() {
    // det 0 overlaps both gts; it goes to gt 1 where its IoU is highest
    let g = vec![gt(rect(0.0, 0.0, 10.0, 10.0)), gt(rect(2.0, 0.0, 10.0, 10.0))];
    let d = vec![rect(2.5, 0.0, 10.0, 10.0), rect(0.0, 0.0, 10.0, 10.0)];
    let (m, s) = match_and_score(&g, &d, 0.5);
    assert_eq!(m.pairs.iter().map(|p| (p.0, p.1)).collect::<Vec<_>>(), vec![(0, 1), (1, 0)]);
    assert_eq!(s.hmean, 1.0);
}

#[test]
fn detections_on_ignored_text_are_not_counted() {
    let g = vec![
        gt(rect(0.0, 0.0, 10.0, 10.0)),
        GtInstance {
            polygon: rect(50.0, 0.0, 10.0, 10.0),
            ignore: true,
        },
    ];
    let d = vec![rect(0.0, 0.0, 10.0, 10.0), rect(50.0, 0.0, 10.0, 10.0), rect(90.0, 0.0, 5.0, 5.0)];
    let (m, s) = match_and_score(&g, &d, 0.5);
    assert_eq!(m.ignored_det, vec![1]);
    assert_eq!(m.unmatched_det, vec![2]);
    assert!(m.unmatched_gt.is_empty());
    assert_eq!((s.matched, s.gts, s.dets), (1, 1, 2));
    assert_eq!(s.precision, 0.5);
}

#[test]
fn report_pools_counts_over_images() {
    let a = rect(0.0, 0.0, 10.0, 10.0);
    let images = vec![
        (vec![gt(a.clone())], vec![a.clone()]),
        (vec![gt(a.clone()), gt(rect(30.0, 0.0, 10.0, 10.0))], vec![]),
        (vec![], vec![rect(60.0, 0.0, 4.0, 4.0)]),
    ];
    let r = EvalReport::evaluate(&images, 0.5);
    assert_eq!(r.per_image.len(), 3);
    assert!((r.precision - 0.5).abs() < 1e-12);
    assert!((r.recall - 1.0 / 3.0).abs() < 1e-12);
    assert!((r.hmean - 0.4).abs() < 1e-12);
    assert!(r.table("NASK").contains("33.3"));
}
