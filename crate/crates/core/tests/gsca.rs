mod common;

use common::{project, random_tensor, rel_err, rng};
use nask::gsca::{attention_cost, group_attention, CostModel, Gsca, GscaConfig, Normalization};
use nask::nn::ParamStore;
use nask::tensor::{macs, Tape, Tensor};

fn block(c: usize, g: usize, seed: u64) -> (ParamStore, Gsca) {
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    let gsca = Gsca::new(&mut store, "gsca", GscaConfig::new(c, g).unwrap(), &mut r).unwrap();
    (store, gsca)
}

fn run(store: &ParamStore, gsca: &Gsca, x: &Tensor) -> Tensor {
    let mut tape = Tape::new();
    let b = store.bind(&mut tape);
    let xv = tape.constant(x.clone());
    let y = gsca.forward(&mut tape, &b, xv).unwrap();
    tape.value(y).clone()
}

/// Scalar-loop evaluation of one group's attention.
fn naive_group(theta: &Tensor, phi: &Tensor, g: &Tensor, softmax: bool) -> Vec<f64> {
    let (c, h, w) = (theta.shape()[0], theta.shape()[1], theta.shape()[2]);
    let hw = h * w;
    let mut out = vec![0.0; c * hw];
    for p in 0..hw {
        let mut row = vec![0.0; hw];
        for (q, r) in row.iter_mut().enumerate() {
            for k in 0..c {
                *r += theta.data()[k * hw + p] * phi.data()[k * hw + q];
            }
        }
        if softmax {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
            for v in row.iter_mut() {
                *v = (*v - m).exp() / z;
            }
        }
        for k in 0..c {
            let mut acc = 0.0;
            for q in 0..hw {
                acc += row[q] * g.data()[k * hw + q];
            }
            out[k * hw + p] = acc;
        }
    }
    out
}

fn eval_group(theta: &Tensor, phi: &Tensor, g: &Tensor, norm: Normalization) -> Vec<f64> {
    let mut tape = Tape::new();
    let t = tape.constant(theta.clone());
    let f = tape.constant(phi.clone());
    let v = tape.constant(g.clone());
    let y = group_attention(&mut tape, t, f, v, norm).unwrap();
    tape.value(y).data().to_vec()
}

#[test]
fn group_attention_matches_triple_loop() {
    for seed in 0..5 {
        let mut r = rng(seed);
        let t = random_tensor(&mut r, &[2, 4, 4]);
        let f = random_tensor(&mut r, &[2, 4, 4]);
        let g = random_tensor(&mut r, &[2, 4, 4]);
        for (norm, soft) in [(Normalization::Softmax, true), (Normalization::Linear, false)] {
            let got = eval_group(&t, &f, &g, norm);
            let want = naive_group(&t, &f, &g, soft);
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() < 1e-9, "{a} vs {b}");
            }
        }
    }
}

#[test]
fn linear_mode_is_associative() {
    let mut r = rng(11);
    let (c, h, w) = (3, 3, 5);
    let hw = h * w;
    let t = random_tensor(&mut r, &[c, h, w]);
    let f = random_tensor(&mut r, &[c, h, w]);
    let g = random_tensor(&mut r, &[c, h, w]);
    let got = eval_group(&t, &f, &g, Normalization::Linear);
    // theta·(phi·gᵀ): a C'×C' inner product first
    let mut inner = vec![0.0; c * c];
    for a in 0..c {
        for b in 0..c {
            inner[a * c + b] = (0..hw).map(|q| f.data()[a * hw + q] * g.data()[b * hw + q]).sum();
        }
    }
    for k in 0..c {
        for p in 0..hw {
            let want: f64 = (0..c).map(|a| t.data()[a * hw + p] * inner[a * c + k]).sum();
            assert!((got[k * hw + p] - want).abs() < 1e-9);
        }
    }
}

#[test]
fn group_attention_rejects_mismatched_shapes() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 4, 4]));
    let b = tape.constant(Tensor::zeros(&[2, 4, 3]));
    assert!(group_attention(&mut tape, a, a, b, Normalization::Softmax).is_err());
}

#[test]
fn softmax_rows_sum_to_one() {
    let mut r = rng(3);
    let t = random_tensor(&mut r, &[4, 3, 3]);
    let f = random_tensor(&mut r, &[4, 3, 3]);
    let mut tape = Tape::new();
    let tv = tape.constant(t.reshape(&[4, 9]).unwrap());
    let fv = tape.constant(f.reshape(&[4, 9]).unwrap());
    let tt = tape.transpose(tv).unwrap();
    let a = tape.matmul(tt, fv).unwrap();
    let a = tape.softmax(a, 1).unwrap();
    for row in tape.value(a).data().chunks(9) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
}

#[test]
fn zero_fc_gives_half_weights() {
    let (mut store, gsca) = block(8, 2, 4);
    let ids = [gsca.params.fc_weight, gsca.params.fc_bias];
    for id in ids {
        store.get_mut(id).data_mut().fill(0.0);
    }
    let x = random_tensor(&mut rng(5), &[8, 4, 4]);
    let mut tape = Tape::new();
    let b = store.bind(&mut tape);
    let xv = tape.constant(x);
    let l = gsca.global_channel_weights(&mut tape, &b, xv).unwrap();
    assert!(tape.value(l).data().iter().all(|&v| v == 0.5));
}

#[test]
fn channel_weights_lie_in_open_unit_interval() {
    for seed in 0..10 {
        let (store, gsca) = block(8, 4, seed);
        let x = random_tensor(&mut rng(seed + 100), &[8, 5, 3]);
        let mut tape = Tape::new();
        let b = store.bind(&mut tape);
        let xv = tape.constant(x);
        let l = gsca.global_channel_weights(&mut tape, &b, xv).unwrap();
        assert!(tape.value(l).data().iter().all(|&v| v > 0.0 && v < 1.0));
    }
}

#[test]
fn channel_weights_match_composed_ops() {
    let (store, gsca) = block(4, 2, 8);
    let x = random_tensor(&mut rng(9), &[4, 5, 5]);
    let mut tape = Tape::new();
    let b = store.bind(&mut tape);
    let xv = tape.constant(x.clone());
    let l = gsca.global_channel_weights(&mut tape, &b, xv).unwrap();
    let got = tape.value(l).data().to_vec();

    // conv → relu twice, pool, dense, sigmoid, each step evaluated by hand
    let p = &gsca.params;
    let mut h = x;
    for conv in [p.lambda_conv1, p.lambda_conv2] {
        let w = store.get(conv.weight);
        let bias = store.get(conv.bias.unwrap());
        let (c, hh, ww) = (h.shape()[0], h.shape()[1], h.shape()[2]);
        let co = w.shape()[0];
        let mut out = vec![0.0; co * hh * ww];
        for o in 0..co {
            for y in 0..hh {
                for xx in 0..ww {
                    let mut acc = bias.data()[o];
                    for i in 0..c {
                        for dy in 0..3 {
                            for dx in 0..3 {
                                let (sy, sx) = (y as isize + dy as isize - 1, xx as isize + dx as isize - 1);
                                if sy < 0 || sx < 0 || sy >= hh as isize || sx >= ww as isize {
                                    continue;
                                }
                                acc += w.at(&[o, i, dy, dx]) * h.at(&[i, sy as usize, sx as usize]);
                            }
                        }
                    }
                    out[(o * hh + y) * ww + xx] = acc.max(0.0);
                }
            }
        }
        h = Tensor::new(&[co, hh, ww], out).unwrap();
    }
    let c = h.shape()[0];
    let area = (h.shape()[1] * h.shape()[2]) as f64;
    let pooled: Vec<f64> = h.data().chunks(h.len() / c).map(|ch| ch.iter().sum::<f64>() / area).collect();
    let fw = store.get(p.fc_weight);
    let fb = store.get(p.fc_bias);
    for o in 0..c {
        let z: f64 = fb.data()[o] + (0..c).map(|i| fw.data()[o * c + i] * pooled[i]).sum::<f64>();
        let want = 1.0 / (1.0 + (-z).exp());
        assert!((got[o] - want).abs() < 1e-12);
    }
}

#[test]
fn bypass_is_exact_identity() {
    for (c, g) in [(8, 1), (8, 2), (8, 4)] {
        let (store, mut gsca) = block(c, g, 21);
        gsca.bypass_channel_weights = true;
        let x = random_tensor(&mut rng(22), &[c, 6, 6]);
        let y = run(&store, &gsca, &x);
        assert_eq!(y.data(), x.data());
    }
}

#[test]
fn single_group_equals_whole_channel_attention() {
    let (store, gsca) = block(6, 1, 30);
    let x = random_tensor(&mut rng(31), &[6, 4, 3]);
    let mut tape = Tape::new();
    let b = store.bind(&mut tape);
    let xv = tape.constant(x);
    let y = gsca.attend(&mut tape, &b, xv).unwrap();
    let p = &gsca.params;
    let t = p.theta.forward(&mut tape, &b, xv).unwrap();
    let f = p.phi.forward(&mut tape, &b, xv).unwrap();
    let v = p.g.forward(&mut tape, &b, xv).unwrap();
    let direct = group_attention(&mut tape, t, f, v, Normalization::Softmax).unwrap();
    assert_eq!(tape.value(y).data(), tape.value(direct).data());
}

#[test]
fn forward_rejects_wrong_channel_count() {
    let (store, gsca) = block(8, 2, 1);
    let mut tape = Tape::new();
    let b = store.bind(&mut tape);
    let x = tape.constant(Tensor::zeros(&[4, 4, 4]));
    assert!(gsca.forward(&mut tape, &b, x).is_err());
}

/// Central differences over every scalar of every parameter and the input.
fn check_all_grads(c: usize, g: usize, h: usize, seed: u64) {
    let (store, gsca) = block(c, g, seed);
    let x = random_tensor(&mut rng(seed + 1), &[c, h, h]).requires_grad();
    let loss_of = |store: &ParamStore, x: &Tensor| {
        let mut tape = Tape::new();
        let b = store.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let y = gsca.forward(&mut tape, &b, xv).unwrap();
        let l = project(&mut tape, y, seed);
        tape.value(l).data()[0]
    };

    let mut tape = Tape::new();
    let b = store.bind(&mut tape);
    let xv = tape.param(&x);
    let y = gsca.forward(&mut tape, &b, xv).unwrap();
    let l = project(&mut tape, y, seed);
    tape.backward(l).unwrap();

    let step = 1e-5;
    let mut analytic = tape.grad(xv).unwrap().to_vec();
    let mut numeric = Vec::new();
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let up = loss_of(&store, &probe);
        probe.data_mut()[i] = orig - step;
        let down = loss_of(&store, &probe);
        probe.data_mut()[i] = orig;
        numeric.push((up - down) / (2.0 * step));
    }
    let err = rel_err(&analytic, &numeric);
    assert!(err < 1e-4, "input grad rel err {err}");

    for id in store.ids() {
        analytic = tape.grad(b.var(id)).unwrap().to_vec();
        numeric.clear();
        let mut s = store.clone();
        for i in 0..store.get(id).len() {
            let orig = s.get(id).data()[i];
            s.get_mut(id).data_mut()[i] = orig + step;
            let up = loss_of(&s, &x);
            s.get_mut(id).data_mut()[i] = orig - step;
            let down = loss_of(&s, &x);
            s.get_mut(id).data_mut()[i] = orig;
            numeric.push((up - down) / (2.0 * step));
        }
        let err = rel_err(&analytic, &numeric);
        assert!(err < 1e-4, "{} grad rel err {err} (c={c}, g={g})", store.name(id));
    }
}

#[test]
fn gradients_match_finite_differences_small() {
    check_all_grads(8, 2, 4, 40);
}

#[test]
fn gradients_match_finite_differences_8x8x8() {
    for g in [1, 2, 4] {
        check_all_grads(8, g, 8, 50 + g as u64);
    }
}

#[test]
fn permuting_groups_permutes_outputs() {
    let (c, g) = (8, 4);
    let cw = c / g;
    let (mut store, gsca) = block(c, g, 60);
    let p = gsca.params;
    // group-diagonal projections: no mixing across groups before attention
    for conv in [p.theta, p.phi, p.g] {
        let w = store.get_mut(conv.weight);
        for o in 0..c {
            for i in 0..c {
                if o / cw != i / cw {
                    w.data_mut()[o * c + i] = 0.0;
                }
            }
        }
    }
    let perm = [2usize, 0, 3, 1];
    let chan = |k: usize| perm[k / cw] * cw + k % cw;
    let mut permuted = store.clone();
    for id in store.ids() {
        let src = store.get(id);
        let dst = permuted.get_mut(id);
        match src.shape() {
            [n] if *n == c => {
                for k in 0..c {
                    dst.data_mut()[chan(k)] = src.data()[k];
                }
            }
            [o, i] if *o == c && *i == c => {
                for a in 0..c {
                    for b in 0..c {
                        dst.data_mut()[chan(a) * c + chan(b)] = src.data()[a * c + b];
                    }
                }
            }
            [o, i, kh, kw] if *o == c && *i == c => {
                let k2 = kh * kw;
                for a in 0..c {
                    for b in 0..c {
                        for t in 0..k2 {
                            dst.data_mut()[(chan(a) * c + chan(b)) * k2 + t] = src.data()[(a * c + b) * k2 + t];
                        }
                    }
                }
            }
            other => panic!("unexpected parameter shape {other:?}"),
        }
    }
    let x = random_tensor(&mut rng(61), &[c, 5, 5]);
    let hw = 25;
    let mut xp = x.clone();
    for k in 0..c {
        xp.data_mut()[chan(k) * hw..(chan(k) + 1) * hw].copy_from_slice(&x.data()[k * hw..(k + 1) * hw]);
    }
    let y = run(&store, &gsca, &x);
    let yp = run(&permuted, &gsca, &xp);
    for k in 0..c {
        for q in 0..hw {
            let a = y.data()[k * hw + q];
            let b = yp.data()[chan(k) * hw + q];
            assert!((a - b).abs() < 1e-12, "channel {k}: {a} vs {b}");
        }
    }
}

#[test]
fn paper_cost_scales_inversely_with_groups() {
    let base = attention_cost(4, 4, 8, 1, CostModel::Paper).unwrap();
    for g in [1u128, 2, 4, 8] {
        let cost = attention_cost(4, 4, 8, g as usize, CostModel::Paper).unwrap();
        assert_eq!(cost * g, base);
    }
    assert_eq!(attention_cost(4, 4, 8, 4, CostModel::Paper).unwrap(), 4096);
}

#[test]
fn mac_counter_matches_implemented_cost() {
    for (c, g, h, w) in [(8, 1, 4, 4), (8, 2, 4, 4), (8, 4, 4, 4), (8, 8, 4, 4), (6, 3, 3, 5)] {
        let (store, gsca) = block(c, g, 70);
        let mut tape = Tape::new();
        let b = store.bind(&mut tape);
        let x = tape.constant(random_tensor(&mut rng(71), &[c, h, w]));
        macs::reset();
        gsca.attend(&mut tape, &b, x).unwrap();
        let counted = macs::count() as u128;
        assert_eq!(counted, attention_cost(h, w, c, g, CostModel::Implemented).unwrap());
    }
    assert_eq!(attention_cost(4, 4, 8, 2, CostModel::Implemented).unwrap(), 4096);
}

#[test]
fn forward_is_deterministic() {
    let (store, gsca) = block(8, 4, 80);
    let x = random_tensor(&mut rng(81), &[8, 6, 6]);
    assert_eq!(run(&store, &gsca, &x).data(), run(&store, &gsca, &x).data());
}
