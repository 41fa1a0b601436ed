//! A model whose reward landscape is known in closed form.
//!
//! Input is `K×1×1` with a bright pixel at the label's index. Branch `live`
//! copies the input through an identity 1×1 conv and the classifier reads
//! live channel `c` for class `c`, so removing any live channel costs exactly
//! `1/K` accuracy on a balanced split. Branch `dead` has random weights but
//! the classifier ignores it, so its channels can all go for free.

use rlprune::data::Dataset;
use rlprune::layer::LayerKind;
use rlprune::zoo::GraphBuilder;
use rlprune::ModelGraph;

pub const K: usize = 32;

pub fn model(seed: u64) -> ModelGraph {
    let mut g = GraphBuilder::new("landscape", [K, 1, 1], seed);
    let live = g.conv("live", None, K, 1, 1, 0, true);
    let dead = g.conv("dead", None, K, 1, 1, 0, true);
    let cat = g.op("concat", LayerKind::Concat, &[live, dead]);
    let flat = g.op("flatten", LayerKind::Flatten, &[cat]);
    let fc = g.linear("fc", Some(flat), K, true);
    let mut m = g.finish(K);

    let w = m.nodes[live].params.weight.as_mut().unwrap().data_mut();
    w.fill(0.0);
    for c in 0..K {
        w[c * K + c] = 1.0;
    }
    m.nodes[live].params.bias.as_mut().unwrap().data_mut().fill(0.0);
    let w = m.nodes[fc].params.weight.as_mut().unwrap().data_mut();
    w.fill(0.0);
    for c in 0..K {
        w[c * 2 * K + c] = 1.0;
    }
    m.nodes[fc].params.bias.as_mut().unwrap().data_mut().fill(0.0);
    m
}

/// `per_class` samples of every class; background pixels in `1..=100`,
/// the label's pixel in `156..=255`.
pub fn data(per_class: usize, seed: u64) -> Dataset {
    let mut state = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) | 1;
    let mut next = || {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        (state % 100) as u8
    };
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for i in 0..per_class * K {
        let label = i % K;
        for c in 0..K {
            let base = if c == label { 156 } else { 1 };
            pixels.push(base + next());
        }
        labels.push(label);
    }
    Dataset::new(K, [K, 1, 1], pixels, labels).unwrap()
}

/// Final PD share of the dead branch after the stock search (no post-training)
/// prunes 20 of the 64 channels over 20 steps.
pub fn converged_dead_share() -> (f64, Vec<f64>) {
    use rlprune::dependency::Analysis;
    use rlprune::search::{run_pruning_search, SearchConfig};

    let m = model(1);
    let a = Analysis::of(&m).unwrap();
    let g = a.groups.group_of(m.id_of("dead").unwrap()).unwrap();
    let dead = a.groups.searchable_ids().iter().position(|&i| i == g).unwrap();
    let cfg = SearchConfig {
        target_sparsity: 20.0 / 64.0,
        steps: 20,
        seed: 11,
        post_train_every: 0,
        ..Default::default()
    };
    let out = run_pruning_search(&m, &data(4, 3), &data(4, 2), &cfg).unwrap();
    let pd = out.policy.unwrap().pd;
    (pd[dead], pd)
}
