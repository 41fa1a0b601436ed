#[path = "support/counts.rs"]
mod counts;

use std::path::PathBuf;

use proptest::prelude::*;
use proptest::test_runner::RngSeed;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use rlprune::dependency::Analysis;
use rlprune::format::{deserialize, serialize};
use rlprune::pruner::{apply_pruning, PrunePlan};
use rlprune::{zoo, ModelGraph, Tensor};

fn input(m: &ModelGraph, batch: usize, seed: u64) -> Tensor {
    let [c, h, w] = m.input_shape;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..batch * c * h * w).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    Tensor::new(vec![batch, c, h, w], data).unwrap()
}

#[test]
fn full_size_counts_match_published_totals() {
    for c in counts::checks() {
        assert!(c.ok(), "{}: {} vs {} ({:.2}%)", c.what, c.got, c.want, 100.0 * c.rel_error());
    }
}

fn golden_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden/vgg_mini_logits.txt")
}

/// Set `RLPRUNE_BLESS=1` to rewrite the frozen values.
#[test]
fn golden_logits() {
    let m = zoo::vgg_mini(10, 7);
    let logits = m.predict(&input(&m, 2, 99)).unwrap();
    if std::env::var_os("RLPRUNE_BLESS").is_some() {
        let text: String = logits.data().iter().map(|v| format!("{v:.9e}\n")).collect();
        std::fs::write(golden_path(), text).unwrap();
    }
    let want: Vec<f32> = std::fs::read_to_string(golden_path())
        .unwrap()
        .lines()
        .map(|l| l.parse().unwrap())
        .collect();
    assert_eq!(want.len(), logits.data().len());
    for (g, w) in logits.data().iter().zip(&want) {
        assert!((g - w).abs() <= 1e-5, "{g} vs {w}");
    }
}

#[test]
fn clone_is_isolated() {
    let m = zoo::res_mini(10, 0);
    let mut c = m.clone();
    c.nodes[0].params.weight.as_mut().unwrap().data_mut().fill(0.0);
    assert_ne!(c, m);
    assert!(m.nodes[0].params.weight.as_ref().unwrap().data().iter().any(|&v| v != 0.0));
    assert_eq!(m.clone().clone(), m);
}

#[test]
fn hundred_clones_agree_concurrently() {
    let m = zoo::se_mini(10, 3);
    let x = input(&m, 2, 5);
    let want = m.predict(&x).unwrap();
    let clones: Vec<ModelGraph> = (0..100).map(|_| m.clone()).collect();
    let all: Vec<Tensor> = clones.par_iter().map(|c| c.predict(&x).unwrap()).collect();
    assert!(all.iter().all(|t| t.bit_eq(&want)));
}

#[test]
fn vgg19_roundtrip_is_bit_exact() {
    let m = zoo::vgg19(100, 1);
    let (manifest, blob) = serialize(&m).unwrap();
    let back = deserialize(&manifest, &blob).unwrap();
    let x = input(&m, 1, 3);
    assert!(m.predict(&x).unwrap().bit_eq(&back.predict(&x).unwrap()));
}

fn fixture() -> impl Strategy<Value = ModelGraph> {
    (0usize..4, any::<u64>()).prop_map(|(i, seed)| {
        zoo::by_name(["vgg-mini", "res-mini", "incep-mini", "se-mini"][i], 10, seed).unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig {
        cases: 32,
        rng_seed: RngSeed::Fixed(0x5eed),
        failure_persistence: None,
        ..ProptestConfig::default()
    })]

    #[test]
    fn totals_are_sums_of_layers(m in fixture()) {
        for r in [m.count_flops().unwrap(), m.count_params().unwrap()] {
            prop_assert_eq!(r.total, r.per_layer.iter().map(|p| p.1).sum::<u64>());
        }
    }

    #[test]
    fn pruning_shrinks_params_and_never_grows_flops(m in fixture(), seed in any::<u64>()) {
        let a = Analysis::of(&m).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ids = a.groups.searchable_ids();
        let gid = ids[rng.random_range(0..ids.len())];
        let width = a.groups.groups[gid].channels;
        let k = rng.random_range(1..width);
        let plan: PrunePlan = [(gid, (0..k).collect())].into();
        let p = apply_pruning(&m, &a, &plan).unwrap();
        prop_assert!(p.count_params().unwrap().total < m.count_params().unwrap().total);
        prop_assert!(p.count_flops().unwrap().total <= m.count_flops().unwrap().total);
    }
}
