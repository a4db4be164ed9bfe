//! Central finite differences against the tape's reverse sweep.
//!
//! Each case feeds random inputs through one operation, reduces the output
//! to a scalar with a fixed random weighting `L = Σ R ⊙ op(x)`, and compares
//! dL/dx from `backward` with `(L(x+h) − L(x−h)) / 2h`, `h = 1e-4`. The
//! error of a case is `‖analytic − numeric‖₂ / max(‖analytic‖₂, ‖numeric‖₂)`
//! over all inputs, and must stay below 1e-5.

use prunekit::model::{build_synthetic_residual, ModelGraph};
use prunekit::{Result, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-4;
pub const TOL: f64 = 1e-5;
pub const CASES: u64 = 60;

type Op<'a> = &'a dyn Fn(&mut Tape, &[Var]) -> Result<Var>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(lo..hi)).collect(),
    )
    .unwrap()
}

/// Values bounded away from zero, for the ReLU kink.
pub fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(0.05..1.0);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Distinct values at least 0.01 apart, so no max-pool window is near a tie.
pub fn spread(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let mut data: Vec<f64> = (0..n).map(|i| i as f64 * 0.01 - 0.5).collect();
    data.shuffle(rng);
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// An input extent for which `(extent + 2·padding − k)` is a multiple of
/// `stride`, with at least one real pixel.
pub fn tiling_extent(rng: &mut ChaCha8Rng, k: usize, stride: usize, padding: usize) -> usize {
    loop {
        let out = rng.random_range(1..=4);
        let span = (out - 1) * stride + k;
        if span > 2 * padding {
            return span - 2 * padding;
        }
    }
}

pub fn weighted_value(tape: &Tape, out: Var, r: &Tensor) -> f64 {
    tape.value(out)
        .unwrap()
        .data()
        .iter()
        .zip(r.data())
        .map(|(a, b)| a * b)
        .sum()
}

pub fn rel_err(a: &[f64], n: &[f64]) -> f64 {
    let diff: f64 = a
        .iter()
        .zip(n)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nn = n.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nn);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Relative error of the gradient of `Σ R ⊙ op(inputs)` with respect to
/// every input.
pub fn check(inputs: &[Tensor], seed: u64, op: Op<'_>) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(t.clone().with_requires_grad(true)))
        .collect();
    let out = op(&mut tape, &vars).unwrap();
    let shape = tape.value(out).unwrap().shape().to_vec();
    let r = uniform(&mut rng(seed ^ 0xF00D), &shape, -1.0, 1.0);
    let rv = tape.leaf(r.clone());
    let prod = tape.mul(out, rv).unwrap();
    let loss = tape.sum(prod).unwrap();
    tape.backward(loss).unwrap();

    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for (i, v) in vars.iter().enumerate() {
        let g = tape
            .grad(*v)
            .unwrap()
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; inputs[i].numel()]);
        analytic.extend(g);
        for j in 0..inputs[i].numel() {
            let at = |delta: f64| {
                let mut shifted = inputs.to_vec();
                shifted[i].data_mut()[j] += delta;
                let mut t = Tape::new();
                let vs: Vec<Var> = shifted.into_iter().map(|x| t.leaf(x)).collect();
                let o = op(&mut t, &vs).unwrap();
                weighted_value(&t, o, &r)
            };
            numeric.push((at(H) - at(-H)) / (2.0 * H));
        }
    }
    rel_err(&analytic, &numeric)
}

pub fn conv2d_case(seed: u64) -> f64 {
    let mut g = rng(seed);
    let k = g.random_range(1..=3);
    let stride = g.random_range(1..=2);
    let padding = g.random_range(0..k);
    let n = g.random_range(1..=2);
    let cin = g.random_range(1..=3);
    let cout = g.random_range(1..=3);
    let h = tiling_extent(&mut g, k, stride, padding);
    let w = tiling_extent(&mut g, k, stride, padding);
    let x = uniform(&mut g, &[n, cin, h, w], -1.0, 1.0);
    let kern = uniform(&mut g, &[cout, cin, k, k], -1.0, 1.0);
    let b = uniform(&mut g, &[cout], -1.0, 1.0);
    check(&[x, kern, b], seed, &move |t, v| {
        t.conv2d(v[0], v[1], v[2], stride, padding)
    })
}

pub fn dense_case(seed: u64) -> f64 {
    let mut g = rng(seed + 1000);
    let (n, din, dout) = (
        g.random_range(1..=4),
        g.random_range(1..=9),
        g.random_range(1..=6),
    );
    let x = uniform(&mut g, &[n, din], -1.0, 1.0);
    let w = uniform(&mut g, &[dout, din], -1.0, 1.0);
    let b = uniform(&mut g, &[dout], -1.0, 1.0);
    check(&[x, w, b], seed, &|t, v| t.dense(v[0], v[1], v[2]))
}

pub fn relu_case(seed: u64) -> f64 {
    let mut g = rng(seed + 2000);
    let shape = [
        g.random_range(1..=3),
        g.random_range(1..=4),
        g.random_range(1..=5),
    ];
    let x = away_from_zero(&mut g, &shape);
    check(&[x], seed, &|t, v| t.relu(v[0]))
}

pub fn maxpool_case(seed: u64) -> f64 {
    let mut g = rng(seed + 3000);
    let shape = [
        g.random_range(1..=2),
        g.random_range(1..=3),
        2 * g.random_range(1..=3),
        2 * g.random_range(1..=3),
    ];
    let x = spread(&mut g, &shape);
    check(&[x], seed, &|t, v| t.maxpool2x2(v[0]))
}

pub fn flatten_case(seed: u64) -> f64 {
    let mut g = rng(seed + 4000);
    let shape = [
        g.random_range(1..=3),
        g.random_range(1..=3),
        g.random_range(1..=4),
        g.random_range(1..=4),
    ];
    let x = uniform(&mut g, &shape, -1.0, 1.0);
    check(&[x], seed, &|t, v| t.flatten(v[0]))
}

pub fn add_case(seed: u64) -> f64 {
    let mut g = rng(seed + 5000);
    let shape = [g.random_range(1..=4), g.random_range(1..=5)];
    let (a, b) = (
        uniform(&mut g, &shape, -1.0, 1.0),
        uniform(&mut g, &shape, -1.0, 1.0),
    );
    check(&[a, b], seed, &|t, v| t.add(v[0], v[1]))
}

pub fn mul_case(seed: u64) -> f64 {
    let mut g = rng(seed + 6000);
    let shape = [g.random_range(1..=4), g.random_range(1..=5)];
    let (a, b) = (
        uniform(&mut g, &shape, -1.0, 1.0),
        uniform(&mut g, &shape, -1.0, 1.0),
    );
    check(&[a, b], seed, &|t, v| t.mul(v[0], v[1]))
}

pub fn sum_case(seed: u64) -> f64 {
    let mut g = rng(seed + 7000);
    let shape = [g.random_range(1..=5), g.random_range(1..=5)];
    let x = uniform(&mut g, &shape, -2.0, 2.0);
    check(&[x], seed, &|t, v| t.sum(v[0]))
}

pub fn softmax_ce_case(seed: u64) -> f64 {
    let mut g = rng(seed + 8000);
    let (n, c) = (g.random_range(1..=5), g.random_range(2..=10));
    let x = uniform(&mut g, &[n, c], -3.0, 3.0);
    let labels: Vec<usize> = (0..n).map(|_| g.random_range(0..c)).collect();
    check(&[x], seed, &move |t, v| {
        t.softmax_cross_entropy(v[0], &labels)
    })
}

/// Every differentiable operation with its case generator.
pub const OPS: [(&str, fn(u64) -> f64); 9] = [
    ("conv2d", conv2d_case),
    ("dense", dense_case),
    ("relu", relu_case),
    ("maxpool2x2", maxpool_case),
    ("flatten", flatten_case),
    ("add", add_case),
    ("mul", mul_case),
    ("sum", sum_case),
    ("softmax_cross_entropy", softmax_ce_case),
];

/// Gradient of the training loss with respect to every parameter of a small
/// residual network, finite-differenced through the model's own forward.
pub fn whole_model_case(seed: u64) -> f64 {
    let mut model = build_synthetic_residual(1, 2).unwrap();
    model.init_params(seed);
    let mut g = rng(seed + 9000);
    let images = uniform(&mut g, &[3, 1, 8, 8], -1.0, 1.0);
    let labels: Vec<usize> = (0..3).map(|_| g.random_range(0..10)).collect();
    let loss_of = |m: &ModelGraph| {
        let mut t = Tape::new();
        let f = m.forward_taped(&mut t, images.clone(), false).unwrap();
        let l = t.softmax_cross_entropy(f.logits, &labels).unwrap();
        t.value(l).unwrap().item()
    };
    let mut tape = Tape::new();
    let fwd = model
        .forward_taped(&mut tape, images.clone(), true)
        .unwrap();
    let loss = tape.softmax_cross_entropy(fwd.logits, &labels).unwrap();
    tape.backward(loss).unwrap();
    let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
    for (id, vars) in fwd.params.iter().enumerate() {
        let Some((w, b)) = vars else { continue };
        for (var, is_bias) in [(*w, false), (*b, true)] {
            let n = tape.value(var).unwrap().numel();
            analytic.extend(
                tape.grad(var)
                    .unwrap()
                    .map(<[f64]>::to_vec)
                    .unwrap_or(vec![0.0; n]),
            );
            for j in 0..n {
                let at = |delta: f64| {
                    let mut m = model.clone();
                    let p = &mut m.params_mut()[id];
                    let t = if is_bias { &mut p.bias } else { &mut p.weight };
                    t.data_mut()[j] += delta;
                    loss_of(&m)
                };
                numeric.push((at(H) - at(-H)) / (2.0 * H));
            }
        }
    }
    rel_err(&analytic, &numeric)
}
