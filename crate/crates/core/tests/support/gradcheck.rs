//! Central finite differences against the analytic kernels, one case per layer kind.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rlprune::layer::{LayerKind, Mode, Params};
use rlprune::ops::{backward_op, forward_op};
use rlprune::Tensor;

pub const H: f32 = 1e-3;

pub struct Case {
    pub name: &'static str,
    pub kind: LayerKind,
    pub params: Params,
    pub inputs: Vec<Tensor>,
    pub mode: Mode,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f32, hi: f32) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Values at least 0.1 away from zero, so ±h never crosses a ReLU kink.
fn off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(0.1f32..1.0);
            if rng.random_bool(0.5) { m } else { -m }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Distinct values spaced 0.05 apart, so a max never changes under ±h.
fn spaced(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let mut data: Vec<f32> = (0..n).map(|i| i as f32 * 0.05 - n as f32 * 0.025).collect();
    data.shuffle(rng);
    Tensor::new(shape.to_vec(), data).unwrap()
}

pub fn cases(seed: u64) -> Vec<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let conv = |r: &mut ChaCha8Rng, cout: usize, cin: usize, k: usize| Params {
        weight: Some(uniform(r, &[cout, cin, k, k], -0.5, 0.5)),
        bias: Some(uniform(r, &[cout], -0.5, 0.5)),
        ..Default::default()
    };
    let bn = |r: &mut ChaCha8Rng, c: usize| Params {
        gamma: Some(uniform(r, &[c], 0.5, 1.5)),
        beta: Some(uniform(r, &[c], -0.5, 0.5)),
        running_mean: Some(uniform(r, &[c], -0.2, 0.2)),
        running_var: Some(uniform(r, &[c], 0.5, 1.5)),
        ..Default::default()
    };
    let none = Params::default;
    vec![
        Case {
            name: "conv2d 3x3 pad 1",
            kind: LayerKind::Conv2d { out_channels: 3, in_channels: 2, kernel: 3, stride: 1, padding: 1, bias: true },
            params: conv(r, 3, 2, 3),
            inputs: vec![uniform(r, &[2, 2, 5, 5], -1.0, 1.0)],
            mode: Mode::Train,
        },
        Case {
            name: "conv2d 3x3 stride 2",
            kind: LayerKind::Conv2d { out_channels: 2, in_channels: 3, kernel: 3, stride: 2, padding: 1, bias: true },
            params: conv(r, 2, 3, 3),
            inputs: vec![uniform(r, &[2, 3, 6, 6], -1.0, 1.0)],
            mode: Mode::Train,
        },
        Case {
            name: "conv2d 1x1 stride 2",
            kind: LayerKind::Conv2d { out_channels: 3, in_channels: 2, kernel: 1, stride: 2, padding: 0, bias: true },
            params: conv(r, 3, 2, 1),
            inputs: vec![uniform(r, &[2, 2, 6, 6], -1.0, 1.0)],
            mode: Mode::Train,
        },
        Case {
            name: "linear",
            kind: LayerKind::Linear { out_features: 4, in_features: 5, bias: true },
            params: Params {
                weight: Some(uniform(r, &[4, 5], -0.5, 0.5)),
                bias: Some(uniform(r, &[4], -0.5, 0.5)),
                ..Default::default()
            },
            inputs: vec![uniform(r, &[3, 5], -1.0, 1.0)],
            mode: Mode::Train,
        },
        Case {
            name: "batch_norm train",
            kind: LayerKind::BatchNorm { channels: 3, eps: 1e-5, momentum: 0.1 },
            params: bn(r, 3),
            inputs: vec![uniform(r, &[2, 3, 3, 3], -1.0, 1.0)],
            mode: Mode::Train,
        },
        Case {
            name: "batch_norm eval",
            kind: LayerKind::BatchNorm { channels: 3, eps: 1e-5, momentum: 0.1 },
            params: bn(r, 3),
            inputs: vec![uniform(r, &[2, 3, 3, 3], -1.0, 1.0)],
            mode: Mode::Eval,
        },
        Case {
            name: "relu",
            kind: LayerKind::Relu,
            params: none(),
            inputs: vec![off_zero(r, &[2, 3, 3, 3])],
            mode: Mode::Train,
        },
        Case {
            name: "sigmoid",
            kind: LayerKind::Sigmoid,
            params: none(),
            inputs: vec![uniform(r, &[2, 3, 2, 2], -3.0, 3.0)],
            mode: Mode::Train,
        },
        Case {
            name: "hard_swish",
            kind: LayerKind::HardSwish,
            params: none(),
            inputs: vec![uniform(r, &[2, 3, 2, 2], -2.9, 2.9)],
            mode: Mode::Train,
        },
        Case {
            name: "max_pool",
            kind: LayerKind::MaxPool { kernel: 2, stride: 2 },
            params: none(),
            inputs: vec![spaced(r, &[2, 2, 4, 4])],
            mode: Mode::Train,
        },
        Case {
            name: "avg_pool",
            kind: LayerKind::AvgPool { kernel: 2, stride: 2 },
            params: none(),
            inputs: vec![uniform(r, &[2, 2, 4, 4], -1.0, 1.0)],
            mode: Mode::Train,
        },
        Case {
            name: "global_avg_pool",
            kind: LayerKind::GlobalAvgPool,
            params: none(),
            inputs: vec![uniform(r, &[2, 3, 3, 3], -1.0, 1.0)],
            mode: Mode::Train,
        },
        Case {
            name: "flatten",
            kind: LayerKind::Flatten,
            params: none(),
            inputs: vec![uniform(r, &[2, 3, 2, 2], -1.0, 1.0)],
            mode: Mode::Train,
        },
        Case {
            name: "add",
            kind: LayerKind::Add,
            params: none(),
            inputs: vec![uniform(r, &[2, 3, 2, 2], -1.0, 1.0), uniform(r, &[2, 3, 2, 2], -1.0, 1.0)],
            mode: Mode::Train,
        },
        Case {
            name: "mul",
            kind: LayerKind::Mul,
            params: none(),
            inputs: vec![uniform(r, &[2, 3, 2, 2], -1.0, 1.0), uniform(r, &[2, 3, 2, 2], -1.0, 1.0)],
            mode: Mode::Train,
        },
        Case {
            name: "mul channel gate",
            kind: LayerKind::Mul,
            params: none(),
            inputs: vec![uniform(r, &[2, 3, 3, 3], -1.0, 1.0), uniform(r, &[2, 3, 1, 1], 0.0, 1.0)],
            mode: Mode::Train,
        },
        Case {
            name: "concat",
            kind: LayerKind::Concat,
            params: none(),
            inputs: vec![
                uniform(r, &[2, 2, 2, 2], -1.0, 1.0),
                uniform(r, &[2, 3, 2, 2], -1.0, 1.0),
                uniform(r, &[2, 1, 2, 2], -1.0, 1.0),
            ],
            mode: Mode::Train,
        },
        Case {
            name: "softmax",
            kind: LayerKind::Softmax,
            params: none(),
            inputs: vec![uniform(r, &[3, 5], -2.0, 2.0)],
            mode: Mode::Train,
        },
    ]
}

/// `Σ r·y` in f64 with fixed random weights `r`.
fn objective(case: &Case, params: &Params, inputs: &[Tensor], r: &[f32]) -> f64 {
    let refs: Vec<&Tensor> = inputs.iter().collect();
    let (y, _) = forward_op(&case.kind, params, &refs, case.mode).unwrap();
    y.data().iter().zip(r).map(|(&a, &b)| a as f64 * b as f64).sum()
}

fn rel_err(analytic: &[f32], numeric: &[f64]) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a as f64 - n).abs())
        .fold(0.0, f64::max);
    let scale = analytic
        .iter()
        .map(|a| a.abs() as f64)
        .chain(numeric.iter().map(|n| n.abs()))
        .fold(1e-6, f64::max);
    diff / scale
}

/// Largest norm-relative error `‖a − n‖∞ / max(‖a‖∞, ‖n‖∞)` over every input
/// and trainable parameter of the case.
pub fn max_rel_error(case: &Case, seed: u64) -> f64 {
    let refs: Vec<&Tensor> = case.inputs.iter().collect();
    let (y, cache) = forward_op(&case.kind, &case.params, &refs, case.mode).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfd);
    let r: Vec<f32> = (0..y.len()).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    let (din, dparams) = backward_op(&case.kind, &case.params, &refs, &y, &cache, &r).unwrap();

    let mut worst = 0.0f64;
    for (i, analytic) in din.iter().enumerate() {
        let mut numeric = Vec::with_capacity(analytic.len());
        for j in 0..case.inputs[i].len() {
            let mut plus = case.inputs.clone();
            plus[i].data_mut()[j] += H;
            let mut minus = case.inputs.clone();
            minus[i].data_mut()[j] -= H;
            let d = objective(case, &case.params, &plus, &r) - objective(case, &case.params, &minus, &r);
            numeric.push(d / (2.0 * H as f64));
        }
        worst = worst.max(rel_err(analytic, &numeric));
    }
    let trainable = [
        ("weight", dparams.weight.as_ref()),
        ("bias", dparams.bias.as_ref()),
        ("gamma", dparams.gamma.as_ref()),
        ("beta", dparams.beta.as_ref()),
    ];
    for (name, analytic) in trainable {
        let Some(analytic) = analytic else { continue };
        let mut numeric = Vec::with_capacity(analytic.len());
        for j in 0..analytic.len() {
            let bump = |delta: f32| {
                let mut p = case.params.clone();
                p.slot_mut(name).unwrap().as_mut().unwrap().data_mut()[j] += delta;
                objective(case, &p, &case.inputs, &r)
            };
            numeric.push((bump(H) - bump(-H)) / (2.0 * H as f64));
        }
        worst = worst.max(rel_err(analytic, &numeric));
    }
    worst
}
