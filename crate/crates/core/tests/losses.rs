mod common;

use common::{rel_err, rng};
use nask::fox::GeometryMaps;
use nask::losses::{
    fox_losses, ohem_cross_entropy, smoothed_l1, total_loss, total_loss_tape, LossWeights, NEG_POS_RATIO,
};
use nask::tensor::{Tape, Tensor};
use proptest::prelude::*;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

fn ce(p: f64, t: f64) -> f64 {
    let p = p.max(1e-7).min(1.0 - 1e-7);
    if t > 0.5 {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

fn huber(d: f64) -> f64 {
    if d.abs() < 1.0 {
        d * d / 2.0
    } else {
        d.abs() - 0.5
    }
}

/// Sorts every negative loss and averages the kept ones with all positives.
fn brute_ohem(pred: &[f64], gt: &[f64], ratio: usize) -> f64 {
    let pos: Vec<f64> = (0..pred.len()).filter(|&i| gt[i] > 0.5).map(|i| ce(pred[i], 1.0)).collect();
    let mut neg: Vec<f64> = (0..pred.len()).filter(|&i| gt[i] <= 0.5).map(|i| ce(pred[i], 0.0)).collect();
    neg.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let k = if pos.is_empty() {
        std::cmp::max(64, neg.len() / 100)
    } else {
        ratio * pos.len()
    };
    let k = k.min(neg.len());
    let kept = pos.len() + k;
    if kept == 0 {
        return 0.0;
    }
    (pos.iter().sum::<f64>() + neg[..k].iter().sum::<f64>()) / kept as f64
}

/// Ground truth with a random text region, a TCL subset, a few zero-scale
/// TCL pixels and random trig targets.
fn random_gt(r: &mut ChaCha8Rng, h: usize, w: usize) -> GeometryMaps {
    let mut g = GeometryMaps::zeros(h, w);
    for i in 0..h * w {
        if r.random_bool(0.35) {
            g.tr[i] = 1.0;
            if r.random_bool(0.6) {
                g.tcl[i] = 1.0;
                g.scale[i] = if r.random_bool(0.1) { 0.0 } else { r.random_range(2.0..20.0) };
                g.sin_t[i] = r.random_range(-1.0..1.0);
                g.cos_t[i] = r.random_range(-1.0..1.0);
                g.sin_p[i] = r.random_range(-1.0..1.0);
                g.cos_p[i] = r.random_range(-1.0..1.0);
            }
        }
    }
    g
}

fn random_pred(r: &mut ChaCha8Rng, h: usize, w: usize) -> GeometryMaps {
    let mut p = GeometryMaps::zeros(h, w);
    for i in 0..h * w {
        p.tr[i] = r.random_range(0.05..0.95);
        p.tcl[i] = r.random_range(0.05..0.95);
        p.scale[i] = r.random_range(0.0..30.0);
        p.sin_t[i] = r.random_range(-2.5..2.5);
        p.cos_t[i] = r.random_range(-2.5..2.5);
        p.sin_p[i] = r.random_range(-2.5..2.5);
        p.cos_p[i] = r.random_range(-2.5..2.5);
    }
    p
}

/// Reference objective written pixel by pixel, without the library masks.
fn reference_total(pred: &GeometryMaps, gt: &GeometryMaps) -> (f64, [f64; 7]) {
    let n = gt.h * gt.w;
    let tis = brute_ohem(&pred.tr, &gt.tr, 3);
    let (mut tcl_sum, mut tcl_n) = (0.0, 0);
    let (mut s_sum, mut s_n) = (0.0, 0);
    let mut trig = [0.0; 4];
    let mut trig_n = 0;
    for i in 0..n {
        if gt.tr[i] == 1.0 {
            tcl_sum += ce(pred.tcl[i], gt.tcl[i]);
            tcl_n += 1;
        }
        if gt.tcl[i] == 1.0 {
            trig_n += 1;
            trig[0] += huber(pred.sin_t[i] - gt.sin_t[i]);
            trig[1] += huber(pred.cos_t[i] - gt.cos_t[i]);
            trig[2] += huber(pred.sin_p[i] - gt.sin_p[i]);
            trig[3] += huber(pred.cos_p[i] - gt.cos_p[i]);
            if gt.scale[i] != 0.0 {
                s_sum += huber((pred.scale[i] - gt.scale[i]) / gt.scale[i]);
                s_n += 1;
            }
        }
    }
    let tcl = if tcl_n == 0 { 0.0 } else { tcl_sum / tcl_n as f64 };
    let s = s_sum / (s_n.max(1)) as f64;
    let t = trig_n.max(1) as f64;
    let terms = [tis, tcl, s, trig[0] / t, trig[1] / t, trig[2] / t, trig[3] / t];
    (terms.iter().sum(), terms)
}

#[test]
fn analytic_examples() {
    assert!(ohem_cross_entropy(&[1e-7, 1.0 - 1e-7], &[0.0, 1.0], NEG_POS_RATIO).unwrap() <= 1e-6);
    assert!(ohem_cross_entropy(&[0.0, 1.0], &[0.0, 1.0], NEG_POS_RATIO).unwrap() <= 1e-6);
    assert_eq!(smoothed_l1(&[1.0, 2.0], &[1.0, 2.0], &[1.0, 1.0]).unwrap(), 0.0);
    assert_eq!(smoothed_l1(&[0.5], &[0.0], &[1.0]).unwrap(), 0.125);
    assert_eq!(smoothed_l1(&[3.0], &[0.0], &[1.0]).unwrap(), 2.5);
    assert!(ohem_cross_entropy(&[0.5; 3], &[0.0; 4], 3).is_err());
}

#[test]
fn ohem_matches_brute_force_sort() {
    let mut r = rng(11);
    for case in 0..200 {
        let n = r.random_range(1..3000);
        let pos_rate = [0.0, 0.01, 0.1, 0.5, 0.9][case % 5];
        let gt: Vec<f64> = (0..n).map(|_| f64::from(u8::from(r.random_bool(pos_rate)))).collect();
        let pred: Vec<f64> = (0..n).map(|_| r.random_range(0.0..1.0)).collect();
        let ratio = r.random_range(1..5);
        let a = ohem_cross_entropy(&pred, &gt, ratio).unwrap();
        let b = brute_ohem(&pred, &gt, ratio);
        assert!((a - b).abs() < 1e-12, "case {case}: {a} vs {b}");
    }
}

#[test]
fn total_matches_reference_on_16x16() {
    let mut r = rng(5);
    for _ in 0..20 {
        let gt = random_gt(&mut r, 16, 16);
        let pred = random_pred(&mut r, 16, 16);
        let rep = total_loss(&pred, &gt, &LossWeights::default()).unwrap();
        let (total, terms) = reference_total(&pred, &gt);
        assert!((rep.total - total).abs() < 1e-9, "{} vs {total}", rep.total);
        let got = [rep.tis, rep.tcl, rep.s, rep.sin_t, rep.cos_t, rep.sin_p, rep.cos_p];
        for (a, b) in got.iter().zip(terms) {
            assert!((a - b).abs() < 1e-9);
        }
        let zero_scale = (0..256).filter(|&i| gt.tcl[i] == 1.0 && gt.scale[i] == 0.0).count();
        assert_eq!(rep.scale_excluded, zero_scale);
    }
}

#[test]
fn perfect_prediction_and_zero_weights() {
    let mut r = rng(6);
    let gt = random_gt(&mut r, 16, 16);
    let rep = total_loss(&gt, &gt, &LossWeights::default()).unwrap();
    for t in [rep.tis, rep.tcl, rep.s, rep.sin_t, rep.cos_t, rep.sin_p, rep.cos_p, rep.total] {
        assert!((0.0..=1e-6).contains(&t), "{t}");
    }
    let pred = random_pred(&mut r, 16, 16);
    let rep = total_loss(&pred, &gt, &LossWeights::uniform(0.0)).unwrap();
    assert_eq!(rep.total, 0.0);
    assert!(rep.tis > 0.0);
}

#[test]
fn mismatched_maps_are_rejected() {
    let a = GeometryMaps::zeros(4, 4);
    let b = GeometryMaps::zeros(4, 5);
    assert!(total_loss(&a, &b, &LossWeights::default()).is_err());
}

#[test]
fn taped_loss_agrees_with_eager() {
    let mut r = rng(7);
    let gt = random_gt(&mut r, 12, 12);
    let pred = random_pred(&mut r, 12, 12);
    let weights = LossWeights {
        tis: 0.5,
        tcl: 2.0,
        s: 1.5,
        sin_t: 0.25,
        cos_t: 1.0,
        sin_p: 3.0,
        cos_p: 0.75,
    };
    let eager = total_loss(&pred, &gt, &weights).unwrap();
    let mut tape = Tape::new();
    let t = pred.to_tensor();
    let tr = tape.constant(Tensor::new(&[12, 12], pred.tr.clone()).unwrap());
    let fox = tape.constant(Tensor::new(&[6, 12, 12], t.data()[144..].to_vec()).unwrap());
    let (total, rep) = total_loss_tape(&mut tape, tr, fox, &gt, &weights).unwrap();
    assert!((tape.value(total).data()[0] - eager.total).abs() < 1e-12);
    assert!((rep.total - eager.total).abs() < 1e-12);
    assert_eq!(rep.scale_excluded, eager.scale_excluded);
}

#[test]
fn every_term_gradient_matches_finite_differences() {
    let mut r = rng(8);
    let gt = random_gt(&mut r, 8, 8);
    let pred = random_pred(&mut r, 8, 8);
    let t = pred.to_tensor();
    let tr0 = Tensor::new(&[8, 8], t.data()[..64].to_vec()).unwrap();
    let fox0 = Tensor::new(&[6, 8, 8], t.data()[64..].to_vec()).unwrap();
    let eval = |tr: &Tensor, fox: &Tensor| {
        let mut tape = Tape::new();
        let (a, b) = (tape.constant(tr.clone()), tape.constant(fox.clone()));
        total_loss_tape(&mut tape, a, b, &gt, &LossWeights::default()).unwrap().1.total
    };
    let mut tape = Tape::new();
    let (trv, foxv) = (tape.param(&tr0), tape.param(&fox0));
    let (total, _) = total_loss_tape(&mut tape, trv, foxv, &gt, &LossWeights::default()).unwrap();
    tape.backward(total).unwrap();
    let g_tr = tape.grad(trv).unwrap().to_vec();
    let g_fox = tape.grad(foxv).unwrap().to_vec();
    let n_tr = common::numeric_grad(&tr0, 1e-6, &|p| eval(p, &fox0));
    let n_fox = common::numeric_grad(&fox0, 1e-6, &|p| eval(&tr0, p));
    assert!(rel_err(&g_tr, &n_tr) < 1e-4, "tr {}", rel_err(&g_tr, &n_tr));
    for k in 0..6 {
        let (a, b) = (&g_fox[k * 64..(k + 1) * 64], &n_fox[k * 64..(k + 1) * 64]);
        assert!(rel_err(a, b) < 1e-4, "channel {k}: {}", rel_err(a, b));
    }
}

proptest! {
    #[test]
    fn geometry_terms_ignore_pixels_outside_tcl(seed in 0u64..1000, junk in -50f64..50.0) {
        let mut r = rng(seed);
        let gt = random_gt(&mut r, 10, 10);
        let pred = random_pred(&mut r, 10, 10);
        let mut other = pred.clone();
        for i in 0..100 {
            if gt.tcl[i] == 0.0 {
                other.scale[i] = junk;
                other.sin_t[i] = junk;
                other.cos_t[i] = -junk;
                other.sin_p[i] = junk * 0.5;
                other.cos_p[i] = junk * 2.0;
            }
        }
        let (a, _) = fox_losses(&pred, &gt).unwrap();
        let (b, _) = fox_losses(&other, &gt).unwrap();
        prop_assert_eq!(&a[1..], &b[1..]);
    }

    #[test]
    fn total_is_nonnegative(seed in 0u64..1000) {
        let mut r = rng(seed);
        let gt = random_gt(&mut r, 10, 10);
        let pred = random_pred(&mut r, 10, 10);
        let rep = total_loss(&pred, &gt, &LossWeights::default()).unwrap();
        prop_assert!(rep.total >= 0.0);
        prop_assert!(rep.total > 1e-6);
    }

    #[test]
    fn ohem_equals_brute_force(seed in 0u64..10_000, n in 1usize..500, rate in 0f64..1.0) {
        let mut r = rng(seed);
        let gt: Vec<f64> = (0..n).map(|_| f64::from(u8::from(r.random_bool(rate)))).collect();
        let pred: Vec<f64> = (0..n).map(|_| r.random_range(0.0..1.0)).collect();
        let a = ohem_cross_entropy(&pred, &gt, 3).unwrap();
        prop_assert!((a - brute_ohem(&pred, &gt, 3)).abs() < 1e-12);
    }
}
