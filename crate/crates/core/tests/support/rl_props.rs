//! Property checks for the search primitives, driven by a fixed-seed proptest runner.

use proptest::prelude::*;
use proptest::test_runner::{Config, RngSeed, TestCaseError, TestRunner};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rlprune::search::{clipped_ratios, floor_renormalize, perturb, sample_action, update_policy, PruningPolicy, ReplayBuffer};

fn runner(cases: u32) -> TestRunner {
    TestRunner::new(Config {
        cases,
        rng_seed: RngSeed::Fixed(0x5eed),
        failure_persistence: None,
        ..Config::default()
    })
}

fn simplex(n: std::ops::Range<usize>) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.001f64..1.0, n).prop_map(|v| {
        let s: f64 = v.iter().sum();
        v.into_iter().map(|x| x / s).collect()
    })
}

fn pair() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (2usize..12).prop_flat_map(|n| (simplex(n..n + 1), simplex(n..n + 1)))
}

fn report<T: std::fmt::Debug>(r: Result<(), proptest::test_runner::TestError<T>>) -> Result<(), String> {
    r.map_err(|e| e.to_string())
}

/// Entries stay ≥ p_min and sum to 1 within 1e-9 after an update.
pub fn simplex_preserved() -> Result<(), String> {
    report(runner(1000).run(&(pair(), 0.0f64..2.0, 0.01f64..0.99), |((pd, a), lambda, delta)| {
        let p = PruningPolicy {
            pd: floor_renormalize(&pd, 1e-4),
            p_min: 1e-4,
        };
        let q = update_policy(&p, &a, lambda, delta);
        prop_assert!((q.pd.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        prop_assert!(q.pd.iter().all(|&x| x >= 1e-4));
        Ok(())
    }))
}

/// Every pre-renormalization ratio lies within [1−δ, 1+δ].
pub fn clip_bound() -> Result<(), String> {
    report(runner(1000).run(&(pair(), 0.0f64..2.0, 0.01f64..0.99), |((pd, a), lambda, delta)| {
        for r in clipped_ratios(&pd, &a, lambda, delta) {
            prop_assert!((r - 1.0).abs() <= delta + 1e-12, "ratio {} δ {}", r, delta);
        }
        Ok(())
    }))
}

/// After inserting distinct Q values the buffer holds exactly the top-capacity set.
pub fn replay_top_k() -> Result<(), String> {
    let strat = (prop::collection::hash_set(0u32..100_000, 1..120), 1usize..40);
    report(runner(500).run(&strat, |(qs, cap)| {
        let qs: Vec<f64> = qs.into_iter().map(|q| q as f64 / 1000.0).collect();
        let mut b = ReplayBuffer::new(cap);
        for &q in &qs {
            b.update(vec![q], q);
        }
        let mut want = qs.clone();
        want.sort_by(|a, b| b.total_cmp(a));
        want.truncate(cap);
        want.sort_by(f64::total_cmp);
        let mut got: Vec<f64> = b.entries().iter().map(|e| e.q).collect();
        got.sort_by(f64::total_cmp);
        prop_assert_eq!(got, want);
        prop_assert_eq!(b.best().unwrap().q, qs.iter().copied().fold(f64::MIN, f64::max));
        Ok(())
    }))
}

/// With ε = 1 each entry is picked with frequency within 3σ of uniform over 10⁴ draws.
pub fn epsilon_frequencies() -> Result<(), String> {
    report(runner(8).run(&(2usize..9, any::<u64>()), |(n, seed)| {
        let mut b = ReplayBuffer::new(32);
        for i in 0..n {
            b.update(vec![i as f64], i as f64);
        }
        let draws = 10_000;
        let mut hist = vec![0usize; n];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..draws {
            hist[b.select_action(1.0, &mut rng).unwrap().action[0] as usize] += 1;
        }
        let p = 1.0 / n as f64;
        let mean = draws as f64 * p;
        let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
        for &h in &hist {
            prop_assert!((h as f64 - mean).abs() <= 3.0 * sigma, "{:?}", hist);
        }
        Ok(())
    }))
}

/// Sampled actions are non-negative and sum to 1.
pub fn actions_on_simplex() -> Result<(), String> {
    report(runner(8).run(&(simplex(2..10), any::<u64>()), |(pd, seed)| {
        let p = PruningPolicy { pd, p_min: 1e-4 };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..1250 {
            let a = sample_action(&p, 0.04, &mut rng).map_err(|e| TestCaseError::fail(e.to_string()))?;
            prop_assert!(a.iter().all(|&x| x >= 0.0));
            prop_assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        Ok(())
    }))
}

/// Per-coordinate std of the pre-clamp noise over 10⁵ draws is √0.04 within 2%.
pub fn noise_std() -> Result<(), String> {
    report(runner(4).run(&(simplex(2..6), any::<u64>()), |(pd, seed)| {
        let n = 100_000;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut sum = vec![0.0f64; pd.len()];
        let mut sq = vec![0.0f64; pd.len()];
        for _ in 0..n {
            for (i, x) in perturb(&pd, 0.04, &mut rng).into_iter().enumerate() {
                let d = x - pd[i];
                sum[i] += d;
                sq[i] += d * d;
            }
        }
        for i in 0..pd.len() {
            let mean = sum[i] / n as f64;
            let std = (sq[i] / n as f64 - mean * mean).sqrt();
            prop_assert!((std / 0.2 - 1.0).abs() <= 0.02, "coord {} std {}", i, std);
        }
        Ok(())
    }))
}

#[allow(dead_code)]
pub const ALL: [(&str, fn() -> Result<(), String>); 6] = [
    ("simplex preservation", simplex_preserved),
    ("clip bound", clip_bound),
    ("replay top-k", replay_top_k),
    ("epsilon-greedy frequencies", epsilon_frequencies),
    ("actions on simplex", actions_on_simplex),
    ("noise std", noise_std),
];
