mod common;

use std::sync::Arc;

use camid::netcore::gradcheck::check;
use camid::netcore::*;
use camid::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn every_op_passes_gradient_check() {
    for r in common::gradsuite::run_all() {
        assert!(r.shapes >= 5);
        assert!(
            r.worst <= 1e-4,
            "{}: relative error {:.3e}",
            r.name,
            r.worst
        );
    }
}

fn t(shape: &[usize], data: Vec<f64>) -> Tensor {
    Tensor::new(shape, data).unwrap()
}

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    t(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

fn conv_oracle(x: &Tensor, w: &Tensor, s: usize, p: usize) -> Vec<f64> {
    let (xs, ws) = (x.shape(), w.shape());
    let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
    let (o, k) = (ws[0], ws[2]);
    let oh = (h + 2 * p - k) / s + 1;
    let ow = (wd + 2 * p - k) / s + 1;
    let mut out = vec![0.0; n * o * oh * ow];
    for b in 0..n {
        for oc in 0..o {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ic in 0..c {
                        for i in 0..k {
                            for j in 0..k {
                                let iy = (oy * s + i) as isize - p as isize;
                                let ix = (ox * s + j) as isize - p as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                    acc += x.data()
                                        [((b * c + ic) * h + iy as usize) * wd + ix as usize]
                                        * w.data()[((oc * c + ic) * k + i) * k + j];
                                }
                            }
                        }
                    }
                    out[((b * o + oc) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    out
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

#[test]
fn conv_matches_nested_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for (k, s, p) in [
        (3, 1, 0),
        (3, 1, 1),
        (3, 2, 1),
        (1, 1, 0),
        (5, 2, 2),
        (7, 2, 3),
    ] {
        let x = rand_t(&mut rng, &[2, 3, 9, 8]);
        let w = rand_t(&mut rng, &[4, 3, k, k]);
        let y = conv2d(&x, &w, s, p).unwrap();
        assert!(
            close(y.data(), &conv_oracle(&x, &w, s, p), 1e-12),
            "k{k} s{s} p{p}"
        );
    }
    let x5 = rand_t(&mut rng, &[1, 1, 5, 5]);
    let w3 = rand_t(&mut rng, &[1, 1, 3, 3]);
    assert!(close(
        conv2d(&x5, &w3, 1, 0).unwrap().data(),
        &conv_oracle(&x5, &w3, 1, 0),
        1e-12
    ));
}

#[test]
fn conv_shapes() {
    let x = Tensor::zeros(&[1, 3, 256, 256]);
    let w = Tensor::zeros(&[2, 3, 7, 7]);
    assert_eq!(conv2d(&x, &w, 2, 3).unwrap().shape(), &[1, 2, 128, 128]);
    let bad = Tensor::zeros(&[2, 4, 3, 3]);
    assert!(matches!(
        conv2d(&x, &bad, 1, 1),
        Err(Error::ShapeMismatch(_))
    ));
}

#[test]
fn identity_1x1_conv() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = rand_t(&mut rng, &[2, 3, 4, 5]);
    let mut w = vec![0.0; 9];
    for i in 0..3 {
        w[i * 3 + i] = 1.0;
    }
    let y = conv2d(&x, &t(&[3, 3, 1, 1], w), 1, 0).unwrap();
    assert_eq!(y.data(), x.data());
}

fn pool_oracle(x: &Tensor, k: usize, s: usize, p: usize, max: bool) -> Vec<f64> {
    let sh = x.shape();
    let (h, w) = (sh[2], sh[3]);
    let oh = (h + 2 * p - k) / s + 1;
    let ow = (w + 2 * p - k) / s + 1;
    let mut out = Vec::new();
    for plane in 0..sh[0] * sh[1] {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut vals = Vec::new();
                for i in 0..k {
                    for j in 0..k {
                        let iy = (oy * s + i) as isize - p as isize;
                        let ix = (ox * s + j) as isize - p as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                            vals.push(x.data()[plane * h * w + iy as usize * w + ix as usize]);
                        }
                    }
                }
                out.push(if max {
                    vals.iter().copied().fold(f64::MIN, f64::max)
                } else {
                    vals.iter().sum::<f64>() / (k * k) as f64
                });
            }
        }
    }
    out
}

#[test]
fn pools_match_nested_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for (h, w) in [(8, 8), (7, 9), (64, 64), (5, 4)] {
        let x = rand_t(&mut rng, &[2, 3, h, w]);
        assert!(close(
            max_pool2d(&x, 3, 2, 1).unwrap().data(),
            &pool_oracle(&x, 3, 2, 1, true),
            0.0
        ));
        assert!(close(
            avg_pool2d(&x, 2, 2, 0).unwrap().data(),
            &pool_oracle(&x, 2, 2, 0, false),
            1e-15
        ));
    }
    let x = Tensor::zeros(&[1, 1, 64, 64]);
    assert_eq!(max_pool2d(&x, 3, 2, 1).unwrap().shape(), &[1, 1, 32, 32]);
    assert_eq!(avg_pool2d(&x, 2, 2, 0).unwrap().shape(), &[1, 1, 32, 32]);
}

#[test]
fn pool_examples() {
    let x = t(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
    assert_eq!(avg_pool2d(&x, 2, 2, 0).unwrap().data(), &[2.5]);
    let c = t(&[1, 2, 6, 6], vec![3.5; 72]);
    assert!(max_pool2d(&c, 3, 2, 1)
        .unwrap()
        .data()
        .iter()
        .all(|&v| v == 3.5));
    assert!(avg_pool2d(&c, 2, 2, 0)
        .unwrap()
        .data()
        .iter()
        .all(|&v| v == 3.5));
}

fn bn_setup(c: usize, gamma: f64, beta: f64, rm: f64, rv: f64) -> (ParamStore, BatchNormParams) {
    let mut s = ParamStore::new();
    let bn = BatchNormParams::register(&mut s, "bn", c).unwrap();
    s.set("bn.gamma", vec![gamma; c]).unwrap();
    s.set("bn.beta", vec![beta; c]).unwrap();
    s.set("bn.running_mean", vec![rm; c]).unwrap();
    s.set("bn.running_var", vec![rv; c]).unwrap();
    (s, bn)
}

#[test]
fn batch_norm_train_normalizes() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (n, c, hw) = (4, 3, 25);
    let x = t(
        &[n, c, 5, 5],
        (0..n * c * hw).map(|_| rng.gen_range(-3.0..7.0)).collect(),
    );
    let (mut store, bn) = bn_setup(c, 1.0, 0.0, 0.0, 1.0);
    let mut ctx = ForwardCtx::train(0);
    let y = batch_norm(&x, &bn, &store, &mut ctx).unwrap();
    for ch in 0..c {
        let vals: Vec<f64> = (0..n)
            .flat_map(|b| y.data()[(b * c + ch) * hw..][..hw].to_vec())
            .collect();
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        let v = vals.iter().map(|a| (a - m).powi(2)).sum::<f64>() / vals.len() as f64;
        assert!(m.abs() <= 1e-6);
        assert!((v - 1.0).abs() <= 1e-4);
    }
    assert_eq!(ctx.pending_updates(), 2);
    ctx.commit(&mut store);
    assert_ne!(store.get("bn.running_mean").unwrap().data[0], 0.0);
}

#[test]
fn batch_norm_near_identity_on_standard_input() {
    // Exactly zero-mean, unit-variance per channel.
    let vals = [-1.5, -0.5, 0.5, 1.5];
    let sd = (vals.iter().map(|v| v * v).sum::<f64>() / 4.0).sqrt();
    let data: Vec<f64> = vals.iter().map(|v| v / sd).collect();
    let x = t(&[4, 1], data.clone());
    let (store, bn) = bn_setup(1, 1.0, 0.0, 0.0, 1.0);
    let y = batch_norm(&x, &bn, &store, &mut ForwardCtx::train(0)).unwrap();
    assert!(close(y.data(), &data, 1e-5));
}

#[test]
fn batch_norm_eval_closed_form() {
    let (store, bn) = bn_setup(2, 2.0, 1.0, 0.0, 1.0);
    let x = t(&[1, 2, 1, 2], vec![0.5, -1.0, 3.0, 0.0]);
    let y = batch_norm(&x, &bn, &store, &mut ForwardCtx::eval()).unwrap();
    let k = 1.0 / (1.0 + 1e-5f64).sqrt();
    let want: Vec<f64> = x.data().iter().map(|v| 2.0 * v * k + 1.0).collect();
    assert!(close(y.data(), &want, 1e-12));
    assert!(close(y.data(), &[2.0, -1.0, 7.0, 1.0], 1e-4));
}

#[test]
fn running_moments_follow_momentum() {
    let (mut store, bn) = bn_setup(1, 1.0, 0.0, 0.0, 1.0);
    let x = t(&[4, 1], vec![1.0, 2.0, 3.0, 4.0]);
    let mut ctx = ForwardCtx::train(0);
    batch_norm(&x, &bn, &store, &mut ctx).unwrap();
    ctx.commit(&mut store);
    // mean 2.5, unbiased variance 5/3
    assert!((store.get("bn.running_mean").unwrap().data[0] - 0.25).abs() < 1e-12);
    assert!((store.get("bn.running_var").unwrap().data[0] - (0.9 + 0.1 * 5.0 / 3.0)).abs() < 1e-12);
}

#[test]
fn softmax_examples() {
    let y = softmax(&Tensor::zeros(&[1, 10])).unwrap();
    assert!(y.data().iter().all(|&p| (p - 0.1).abs() < 1e-15));
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let z = softmax(&rand_t(&mut rng, &[3, 7])).unwrap();
    for row in z.data().chunks(7) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn cross_entropy_gradient_is_p_minus_onehot() {
    let logits = [0.3, -1.2, 2.0, 0.7];
    let x = Tensor::variable(ParamId(0), &[1, 4], Arc::new(logits.to_vec())).unwrap();
    let loss = softmax_cross_entropy(&x, &[2]).unwrap();
    let g = loss.backward().unwrap();
    let p = softmax(&t(&[1, 4], logits.to_vec())).unwrap();
    let mut want = p.data().to_vec();
    want[2] -= 1.0;
    assert_eq!(g.get(ParamId(0)).unwrap(), want.as_slice());
    let expected_loss = -p.data()[2].ln();
    assert!((loss.item().unwrap() - expected_loss).abs() < 1e-12);
}

#[test]
fn dropout_behaviour() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = rand_t(&mut rng, &[4, 9]);
    let mut eval = ForwardCtx::eval();
    assert_eq!(dropout(&x, 0.3, &mut eval).unwrap().data(), x.data());
    let mut train = ForwardCtx::train(1);
    assert_eq!(dropout(&x, 0.0, &mut train).unwrap().data(), x.data());
    assert!(dropout(&x, 1.0, &mut train).is_err());

    // Mean preservation over 10^4 trials on a unit input.
    let ones = t(&[1, 16], vec![1.0; 16]);
    let trials = 10_000;
    let mut total = 0.0;
    let mut zeros = 0usize;
    for _ in 0..trials {
        let y = dropout(&ones, 0.3, &mut train).unwrap();
        total += y.data().iter().sum::<f64>();
        zeros += y.data().iter().filter(|&&v| v == 0.0).count();
    }
    let n = (trials * 16) as f64;
    let mean = total / n;
    // Per-entry variance of the scaled Bernoulli: rate / (1 - rate).
    let sigma = (0.3f64 / 0.7 / n).sqrt();
    assert!((mean - 1.0).abs() <= 3.0 * sigma, "mean {mean}");
    assert!(((zeros as f64 / n) - 0.3).abs() < 0.01);
}

#[test]
fn global_avg_pool_constant() {
    let x = t(&[1, 1920, 4, 4], vec![2.5; 1920 * 16]);
    let y = global_avg_pool(&x).unwrap();
    assert_eq!(y.shape(), &[1, 1920]);
    assert!(y.data().iter().all(|&v| v == 2.5));
}

#[test]
fn matmul_gradient_hand_derivation() {
    // loss = sum(W x): dW[i][j] = x[j] for every row i.
    let x = t(&[1, 3], vec![1.0, -2.0, 0.5]);
    let w = Tensor::variable(
        ParamId(7),
        &[3, 2],
        Arc::new(vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]),
    )
    .unwrap();
    let g = sum(&matmul(&x, &w).unwrap()).backward().unwrap();
    assert_eq!(
        g.get(ParamId(7)).unwrap(),
        &[1.0, 1.0, -2.0, -2.0, 0.5, 0.5]
    );
}

#[test]
fn disconnected_parameter_gets_no_gradient() {
    let mut store = ParamStore::new();
    let a = store.add("a", &[2], vec![1.0, 2.0], true).unwrap();
    let b = store.add("b", &[2], vec![3.0, 4.0], true).unwrap();
    let ctx = ForwardCtx::train(0);
    let _unused = ctx.param(&store, b);
    let g = sum(&ctx.param(&store, a)).backward().unwrap();
    assert_eq!(g.get(a).unwrap(), &[1.0, 1.0]);
    assert!(g.get(b).is_none());
}

#[test]
fn backward_needs_scalar() {
    let x = Tensor::variable(ParamId(0), &[2], Arc::new(vec![1.0, 2.0])).unwrap();
    assert!(matches!(relu(&x).backward(), Err(Error::NonScalarLoss(_))));
}

#[test]
fn shared_subexpression_accumulates() {
    // f = sum(x * x) -> 2x
    let x = Tensor::variable(ParamId(0), &[3], Arc::new(vec![1.0, -2.0, 3.0])).unwrap();
    let g = sum(&mul(&x, &x).unwrap()).backward().unwrap();
    assert_eq!(g.get(ParamId(0)).unwrap(), &[2.0, -4.0, 6.0]);
}

#[test]
fn untracked_params_build_no_graph() {
    let mut store = ParamStore::new();
    let a = store.add("a", &[2], vec![1.0, 2.0], true).unwrap();
    let y = relu(&ForwardCtx::eval().param(&store, a));
    assert!(!y.requires_grad());
    assert!(sum(&y).backward().unwrap().is_empty());
}

#[test]
fn gradcheck_detects_wrong_gradient() {
    // detach() hides the dependency, so the analytic gradient is wrong.
    let r = check(&[(vec![3], vec![0.5, -0.2, 0.9])], 0, |x| {
        mul(&x[0], &x[0].detach())
    })
    .unwrap();
    assert!(r.max_rel_err > 0.1);
}
