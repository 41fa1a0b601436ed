//! Dependency-analysis checks shared by the unit suite and the acceptance run.

use std::collections::BTreeSet;
use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rlprune::dependency::{Analysis, TraceReport};
use rlprune::pruner::{apply_pruning, PrunePlan};
use rlprune::{zoo, ModelGraph, Tensor};

pub fn oracle(name: &str) -> BTreeSet<String> {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../core/tests/oracles")
        .join(format!("{name}.txt"));
    std::fs::read_to_string(&path)
        .unwrap_or_else(|e| panic!("{}: {e}", path.display()))
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(String::from)
        .collect()
}

pub fn extracted(model: &ModelGraph) -> BTreeSet<String> {
    let a = Analysis::of(model).unwrap();
    TraceReport::new(model, &a).lines().into_iter().collect()
}

/// Lines missing from and extra to the hand oracle for fixture `name`.
pub fn oracle_diff(name: &str) -> (Vec<String>, Vec<String>) {
    let m = zoo::by_name(name, 10, 0).unwrap();
    let got = extracted(&m);
    let want = oracle(name);
    (
        want.difference(&got).cloned().collect(),
        got.difference(&want).cloned().collect(),
    )
}

pub fn random_plan(a: &Analysis, rng: &mut ChaCha8Rng) -> PrunePlan {
    let mut plan = PrunePlan::new();
    for g in a.groups.searchable() {
        if g.channels < 2 || rng.random_bool(0.4) {
            continue;
        }
        let k = rng.random_range(1..g.channels);
        let mut idx: Vec<usize> = (0..g.channels).collect();
        for i in 0..k {
            let j = rng.random_range(i..idx.len());
            idx.swap(i, j);
        }
        plan.insert(g.id, idx[..k].to_vec());
    }
    plan
}

pub fn example(m: &ModelGraph, seed: u64) -> Tensor {
    let [c, h, w] = m.input_shape;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..2 * c * h * w).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    Tensor::new(vec![2, c, h, w], data).unwrap()
}

/// `trials` random legal prunings of fixture `name`: each must keep full
/// coverage, the group topology and a runnable forward pass.
pub fn coverage_after_prunings(name: &str, trials: usize) -> Result<(), String> {
    let base = zoo::by_name(name, 10, 1).unwrap();
    let a0 = Analysis::of(&base).map_err(|e| e.to_string())?;
    a0.graph.check_coverage(&base).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for trial in 0..trials {
        let plan = random_plan(&a0, &mut rng);
        let pruned = apply_pruning(&base, &a0, &plan).map_err(|e| format!("{name} #{trial}: {e}"))?;
        let a1 = Analysis::of(&pruned).map_err(|e| format!("{name} #{trial}: {e}"))?;
        a1.graph.check_coverage(&pruned).map_err(|e| format!("{name} #{trial}: {e}"))?;
        if a1.groups.len() != a0.groups.len() {
            return Err(format!("{name} #{trial}: group count changed"));
        }
        for (g0, g1) in a0.groups.groups.iter().zip(&a1.groups.groups) {
            let removed = plan.get(&g0.id).map_or(0, Vec::len);
            if g0.members != g1.members || g1.channels != g0.channels - removed {
                return Err(format!("{name} #{trial}: group {} changed shape", g0.id));
            }
        }
        let logits = pruned.predict(&example(&pruned, trial as u64)).map_err(|e| e.to_string())?;
        if logits.shape() != [2, 10] {
            return Err(format!("{name} #{trial}: logits {:?}", logits.shape()));
        }
    }
    Ok(())
}

/// Zero channel `k` of a group: member rows and biases, plus every consumer
/// column that reads it.
pub fn silence(model: &mut ModelGraph, a: &Analysis, gid: usize, k: usize) {
    let g = &a.groups.groups[gid];
    for &m in &g.members {
        let p = &mut model.nodes[m].params;
        let w = p.weight.as_mut().unwrap();
        let row = w.len() / g.channels;
        w.data_mut()[k * row..(k + 1) * row].fill(0.0);
        if let Some(b) = p.bias.as_mut() {
            b.data_mut()[k] = 0.0;
        }
    }
    for e in &a.graph.edges {
        if !g.members.contains(&e.producer) {
            continue;
        }
        let node = &mut model.nodes[e.consumer];
        let n_in = node.kind.in_channels().unwrap();
        let w = node.params.weight.as_mut().unwrap();
        let per = w.len() / (w.shape()[0] * n_in);
        for o in 0..w.shape()[0] {
            for i in e.mapping.inputs_for(k) {
                let at = (o * n_in + i) * per;
                w.data_mut()[at..at + per].fill(0.0);
            }
        }
    }
}

/// Silence the middle channel of every searchable group, prune those
/// channels, and compare logits bit for bit.
pub fn zero_channel_bit_exact(name: &str) -> bool {
    let mut m = zoo::by_name(name, 10, 2).unwrap();
    let a = Analysis::of(&m).unwrap();
    let picks: Vec<(usize, usize)> = a.groups.searchable().map(|g| (g.id, g.channels / 2)).collect();
    for &(gid, k) in &picks {
        silence(&mut m, &a, gid, k);
    }
    let x = example(&m, 11);
    let before = m.predict(&x).unwrap();
    let plan: PrunePlan = picks.iter().map(|&(g, k)| (g, vec![k])).collect();
    let after = apply_pruning(&m, &a, &plan).unwrap().predict(&x).unwrap();
    before.bit_eq(&after)
}
