//! Taylor scores against brute-force leave-one-out on a 4-channel two-layer net.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rlprune::dependency::Analysis;
use rlprune::optim::Sgd;
use rlprune::layer::{LayerKind, Mode};
use rlprune::loss::cross_entropy;
use rlprune::pruner::{apply_pruning, ranked_channels, taylor_scores, CalibrationSet, PrunePlan};
use rlprune::zoo::GraphBuilder;
use rlprune::{ModelGraph, Tensor};

const FEATURES: usize = 6;
const CLASSES: usize = 3;
pub const WIDTH: usize = 4;

pub struct Case {
    pub model: ModelGraph,
    pub analysis: Analysis,
    pub calib: CalibrationSet,
    /// Group id of the hidden layer.
    pub group: usize,
}

/// Zero-centred inputs with random linear-teacher labels. The net gets a
/// few full-batch SGD steps so gradients are informative but not vanishing.
pub fn case(seed: u64) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let teacher: Vec<f32> = (0..FEATURES * CLASSES).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    let n = 100;
    let xs: Vec<f32> = (0..n * FEATURES).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    let labels: Vec<usize> = xs
        .chunks(FEATURES)
        .map(|x| {
            let score = |c: usize| -> f32 { (0..FEATURES).map(|f| teacher[c * FEATURES + f] * x[f]).sum() };
            (0..CLASSES).max_by(|&a, &b| score(a).total_cmp(&score(b))).unwrap()
        })
        .collect();
    let calib = CalibrationSet::new(Tensor::new(vec![n, FEATURES, 1, 1], xs).unwrap(), labels).unwrap();

    let mut g = GraphBuilder::new("two-layer", [FEATURES, 1, 1], seed);
    let flat = g.op("flatten", LayerKind::Flatten, &[]);
    let fc1 = g.linear("fc1", Some(flat), WIDTH, true);
    let relu = g.op("relu", LayerKind::Relu, &[fc1]);
    g.linear("fc2", Some(relu), CLASSES, true);
    let mut model = g.finish(CLASSES);
    let mut opt = Sgd::new(0.1, 0.9, 0.0).unwrap();
    for _ in 0..10 {
        let (logits, tape) = model.run_forward(&calib.images, Mode::Train).unwrap();
        let grads = model.backward(&tape, &cross_entropy(&logits, &calib.labels).unwrap()).unwrap();
        opt.step(&mut model, &grads).unwrap();
    }

    let analysis = Analysis::of(&model).unwrap();
    let group = analysis.groups.group_of(model.id_of("fc1").unwrap()).unwrap();
    Case {
        model,
        analysis,
        calib,
        group,
    }
}

pub fn loss(model: &ModelGraph, calib: &CalibrationSet) -> f64 {
    let (logits, _) = model.run_forward(&calib.images, Mode::Eval).unwrap();
    cross_entropy(&logits, &calib.labels).unwrap().value as f64
}

/// Channel whose removal changes the calibration loss the least.
pub fn leave_one_out_least(c: &Case) -> usize {
    let base = loss(&c.model, &c.calib);
    (0..WIDTH)
        .map(|k| {
            let plan: PrunePlan = [(c.group, vec![k])].into();
            let pruned = apply_pruning(&c.model, &c.analysis, &plan).unwrap();
            (k, (loss(&pruned, &c.calib) - base).abs())
        })
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .unwrap()
        .0
}

pub fn taylor_least(c: &Case) -> usize {
    let scores = taylor_scores(&c.model, &c.calib, &c.analysis).unwrap();
    ranked_channels(&scores, c.group)[0]
}

/// Silence the consumer column of channel `k` so nothing downstream reads it.
pub fn plant_dead(c: &mut Case, k: usize) {
    let fc2 = c.model.id_of("fc2").unwrap();
    let w = c.model.nodes[fc2].params.weight.as_mut().unwrap();
    for o in 0..CLASSES {
        w.data_mut()[o * WIDTH + k] = 0.0;
    }
}

/// Outcome for one seed: Taylor agrees with leave-one-out, and a planted
/// dead channel ranks least important.
pub fn run(seed: u64) -> (bool, bool) {
    let mut c = case(seed);
    let agree = taylor_least(&c) == leave_one_out_least(&c);
    let dead = (seed as usize) % WIDTH;
    plant_dead(&mut c, dead);
    (agree, taylor_least(&c) == dead)
}
