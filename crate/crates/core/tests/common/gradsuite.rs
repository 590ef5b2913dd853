//! Finite-difference checks for every differentiable op, on several random
//! shapes each. Shared by the unit-style test and the acceptance runner.

use camid::fusionhead::{head_forward, se_forward};
use camid::netcore::gradcheck::{check_wrt, GradCheckReport};
use camid::netcore::*;
use camid::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const SHAPES_PER_OP: usize = 5;

pub struct OpResult {
    pub name: &'static str,
    pub worst: f64,
    pub shapes: usize,
}

fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn input(rng: &mut ChaCha8Rng, shape: &[usize]) -> (Vec<usize>, Vec<f64>) {
    (shape.to_vec(), rand_vec(rng, shape.iter().product()))
}

/// Store whose first slot is a placeholder, so parameter ids 1.. line up
/// with gradient-check input indices 1...
fn bn_store(gamma: &Tensor, beta: &Tensor, c: usize) -> (ParamStore, BatchNormParams) {
    let mut s = ParamStore::new();
    s.add("x", &[1], vec![0.0], false).unwrap();
    let bn = BatchNormParams {
        gamma: s
            .add("bn.gamma", &[c], gamma.data().to_vec(), true)
            .unwrap(),
        beta: s.add("bn.beta", &[c], beta.data().to_vec(), true).unwrap(),
        running_mean: s.add("bn.running_mean", &[c], vec![0.1; c], false).unwrap(),
        running_var: s.add("bn.running_var", &[c], vec![1.3; c], false).unwrap(),
    };
    (s, bn)
}

fn run(
    name: &'static str,
    seed: u64,
    make: impl Fn(&mut ChaCha8Rng) -> Vec<(Vec<usize>, Vec<f64>)>,
    f: impl Fn(&[Tensor]) -> Result<Tensor> + Clone,
) -> OpResult {
    run_wrt(name, seed, None, make, f)
}

fn run_wrt(
    name: &'static str,
    seed: u64,
    wrt: Option<&[usize]>,
    make: impl Fn(&mut ChaCha8Rng) -> Vec<(Vec<usize>, Vec<f64>)>,
    f: impl Fn(&[Tensor]) -> Result<Tensor> + Clone,
) -> OpResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for i in 0..SHAPES_PER_OP {
        let inputs = make(&mut rng);
        let all: Vec<usize> = (0..inputs.len()).collect();
        let wrt = wrt.unwrap_or(&all);
        let r: GradCheckReport = check_wrt(&inputs, wrt, seed * 31 + i as u64, f.clone()).unwrap();
        assert!(r.checked > 0);
        worst = worst.max(r.max_rel_err);
    }
    OpResult {
        name,
        worst,
        shapes: SHAPES_PER_OP,
    }
}

macro_rules! inp {
    ($r:expr, $shape:expr) => {{
        let shape = $shape;
        input($r, &shape)
    }};
}

pub fn run_all() -> Vec<OpResult> {
    let mut out = Vec::new();
    let dims = |r: &mut ChaCha8Rng, lo: usize, hi: usize| r.gen_range(lo..=hi);

    out.push(run(
        "add",
        1,
        |r| {
            let s = [dims(r, 1, 4), dims(r, 1, 5)];
            vec![input(r, &s), input(r, &s)]
        },
        |x| add(&x[0], &x[1]),
    ));
    out.push(run(
        "mul",
        2,
        |r| {
            let s = [dims(r, 1, 4), dims(r, 1, 5)];
            vec![input(r, &s), input(r, &s)]
        },
        |x| mul(&x[0], &x[1]),
    ));
    out.push(run(
        "scale+sum+mean",
        3,
        |r| vec![inp!(r, [dims(r, 1, 6), dims(r, 1, 3)])],
        |x| add(&sum(&scale(&x[0], -1.7)), &mean(&x[0])),
    ));
    out.push(run(
        "reshape",
        4,
        |r| vec![inp!(r, [dims(r, 1, 4), 6])],
        |x| {
            let n = x[0].shape()[0];
            reshape(&x[0], &[n, 2, 3])
        },
    ));
    out.push(run(
        "relu",
        5,
        |r| vec![inp!(r, [dims(r, 1, 4), dims(r, 2, 7)])],
        |x| Ok(relu(&x[0])),
    ));
    out.push(run(
        "sigmoid",
        6,
        |r| vec![inp!(r, [dims(r, 1, 4), dims(r, 2, 7)])],
        |x| Ok(sigmoid(&x[0])),
    ));
    out.push(run(
        "softmax",
        7,
        |r| vec![inp!(r, [dims(r, 1, 4), dims(r, 2, 7)])],
        |x| softmax(&x[0]),
    ));
    out.push(run_wrt(
        "softmax_cross_entropy",
        8,
        Some(&[0]),
        |r| {
            let (n, c) = (dims(r, 1, 5), dims(r, 2, 6));
            let labels: Vec<f64> = (0..n).map(|_| r.gen_range(0..c) as f64).collect();
            // Labels ride along as a non-differentiated second input.
            vec![inp!(r, [n, c]), (vec![n], labels)]
        },
        |x| {
            let labels: Vec<usize> = x[1].data().iter().map(|&v| v as usize).collect();
            softmax_cross_entropy(&x[0], &labels)
        },
    ));
    out.push(run(
        "dense",
        9,
        |r| {
            let (n, k, m) = (dims(r, 1, 4), dims(r, 1, 6), dims(r, 1, 5));
            vec![inp!(r, [n, k]), inp!(r, [k, m]), inp!(r, [m])]
        },
        |x| dense(&x[0], &x[1], &x[2]),
    ));
    out.push(run(
        "conv2d",
        10,
        |r| {
            let (n, c, o) = (dims(r, 1, 2), dims(r, 1, 3), dims(r, 1, 3));
            let k = [1, 3, 5][r.gen_range(0..3)];
            let (h, w) = (dims(r, k, k + 4), dims(r, k, k + 4));
            vec![inp!(r, [n, c, h, w]), inp!(r, [o, c, k, k])]
        },
        |x| {
            let k = x[1].shape()[2];
            let (stride, pad) = if k == 1 { (1, 0) } else { (1 + k % 2, k / 2) };
            conv2d(&x[0], &x[1], stride, pad)
        },
    ));
    out.push(run(
        "conv2d_7x7_s2",
        11,
        |r| {
            let (n, c) = (dims(r, 1, 2), dims(r, 1, 2));
            vec![
                inp!(r, [n, c, dims(r, 6, 10), dims(r, 6, 10)]),
                inp!(r, [2, c, 7, 7]),
            ]
        },
        |x| conv2d(&x[0], &x[1], 2, 3),
    ));
    out.push(run(
        "max_pool2d",
        12,
        |r| {
            vec![inp!(
                r,
                [dims(r, 1, 2), dims(r, 1, 3), dims(r, 3, 8), dims(r, 3, 8)]
            )]
        },
        |x| max_pool2d(&x[0], 3, 2, 1),
    ));
    out.push(run(
        "avg_pool2d",
        13,
        |r| {
            vec![inp!(
                r,
                [dims(r, 1, 2), dims(r, 1, 3), dims(r, 2, 8), dims(r, 2, 8)]
            )]
        },
        |x| avg_pool2d(&x[0], 2, 2, 0),
    ));
    out.push(run(
        "global_avg_pool",
        14,
        |r| {
            vec![inp!(
                r,
                [dims(r, 1, 3), dims(r, 1, 4), dims(r, 1, 5), dims(r, 1, 5)]
            )]
        },
        global_avg_pool_first,
    ));
    out.push(run(
        "concat_channels",
        15,
        |r| {
            let (n, h, w) = (dims(r, 1, 2), dims(r, 1, 4), dims(r, 1, 4));
            vec![
                inp!(r, [n, dims(r, 1, 3), h, w]),
                inp!(r, [n, dims(r, 1, 3), h, w]),
            ]
        },
        |x| concat_channels(&[x[0].clone(), x[1].clone(), x[0].clone()]),
    ));
    out.push(run(
        "mean_rows",
        16,
        |r| vec![inp!(r, [dims(r, 1, 3), dims(r, 1, 4), dims(r, 1, 6)])],
        |x| mean_rows(&x[0]),
    ));
    out.push(run(
        "mul_rows",
        17,
        |r| {
            let (n, rows, f) = (dims(r, 1, 3), dims(r, 1, 4), dims(r, 1, 6));
            vec![inp!(r, [n, rows, f]), inp!(r, [n, f])]
        },
        |x| mul_rows(&x[0], &x[1]),
    ));
    out.push(run(
        "dropout",
        18,
        |r| vec![inp!(r, [dims(r, 1, 4), dims(r, 2, 8)])],
        |x| {
            // Fresh context with a fixed seed: the same mask on every call.
            let mut ctx = ForwardCtx::train(99);
            dropout(&x[0], 0.3, &mut ctx)
        },
    ));
    for (name, train) in [("batch_norm_train", true), ("batch_norm_eval", false)] {
        out.push(run(
            name,
            19 + train as u64,
            |r| {
                let c = dims(r, 1, 3);
                let shape = [dims(r, 2, 3), c, dims(r, 1, 3), dims(r, 1, 3)];
                vec![input(r, &shape), inp!(r, [c]), inp!(r, [c])]
            },
            move |x| {
                let c = x[1].len();
                let (store, bn) = bn_store(&x[1], &x[2], c);
                let mut ctx = if train {
                    ForwardCtx::train(0)
                } else {
                    ForwardCtx::eval()
                };
                ctx.track_params = true;
                batch_norm(&x[0], &bn, &store, &mut ctx)
            },
        ));
    }
    out.push(run(
        "se+head",
        21,
        |r| {
            let red = [1, 2, 4][r.gen_range(0..3)];
            let f = red * dims(r, 1, 4);
            let (b, c) = (dims(r, 1, 3), dims(r, 2, 4));
            let hd = f / red;
            vec![
                inp!(r, [b, 3, f]),
                inp!(r, [f, hd]),
                inp!(r, [hd]),
                inp!(r, [hd, f]),
                inp!(r, [f]),
                inp!(r, [f, c]),
                inp!(r, [c]),
            ]
        },
        |x| {
            let mut ctx = ForwardCtx::train(5);
            let y = se_forward(&x[0], &x[1], &x[2], &x[3], &x[4])?;
            head_forward(&y, &x[5], &x[6], 0.3, &mut ctx)
        },
    ));
    out
}

fn global_avg_pool_first(x: &[Tensor]) -> Result<Tensor> {
    global_avg_pool(&x[0])
}
