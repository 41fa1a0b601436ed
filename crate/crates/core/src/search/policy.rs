use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const RESAMPLE_LIMIT: usize = 10;

/// Pruning distribution over the searchable groups.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruningPolicy {
    pub pd: Vec<f64>,
    pub p_min: f64,
}

impl PruningPolicy {
    /// Mass proportional to each group's channel count.
    pub fn proportional(channels: &[usize], p_min: f64) -> Result<Self> {
        let total: usize = channels.iter().sum();
        if total == 0 {
            return Err(Error::Input("no channels to distribute over".into()));
        }
        if p_min * channels.len() as f64 >= 1.0 {
            return Err(Error::Config(format!(
                "p_min {p_min} too large for {} groups",
                channels.len()
            )));
        }
        let raw: Vec<f64> = channels.iter().map(|&c| c as f64 / total as f64).collect();
        Ok(Self {
            pd: floor_renormalize(&raw, p_min),
            p_min,
        })
    }

    pub fn len(&self) -> usize {
        self.pd.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pd.is_empty()
    }
}

/// Scale `v` onto the simplex with every entry at least `p_min`.
pub fn floor_renormalize(v: &[f64], p_min: f64) -> Vec<f64> {
    let n = v.len();
    let mut fixed = vec![false; n];
    let mut out = v.to_vec();
    loop {
        let free_mass = 1.0 - p_min * fixed.iter().filter(|&&f| f).count() as f64;
        let free_sum: f64 = (0..n).filter(|&i| !fixed[i]).map(|i| v[i]).sum();
        let mut changed = false;
        for i in 0..n {
            if fixed[i] {
                out[i] = p_min;
                continue;
            }
            out[i] = if free_sum > 0.0 {
                v[i] * free_mass / free_sum
            } else {
                free_mass / (n - fixed.iter().filter(|&&f| f).count()) as f64
            };
            if out[i] < p_min {
                fixed[i] = true;
                changed = true;
            }
        }
        if !changed {
            return out;
        }
    }
}

/// `PD + z` with `z_i ~ N(0, v)`, before any clamping.
pub fn perturb<R: Rng + ?Sized>(pd: &[f64], variance: f64, rng: &mut R) -> Vec<f64> {
    let noise = Normal::new(0.0, variance.sqrt()).expect("finite non-negative variance");
    pd.iter().map(|&p| p + noise.sample(rng)).collect()
}

/// A noisy action on the simplex: perturb, clamp negatives to zero and renormalize.
pub fn sample_action<R: Rng + ?Sized>(policy: &PruningPolicy, variance: f64, rng: &mut R) -> Result<Vec<f64>> {
    for _ in 0..RESAMPLE_LIMIT {
        let a: Vec<f64> = perturb(&policy.pd, variance, rng).into_iter().map(|x| x.max(0.0)).collect();
        let sum: f64 = a.iter().sum();
        if sum > 0.0 && sum.is_finite() {
            return Ok(a.into_iter().map(|x| x / sum).collect());
        }
    }
    Err(Error::State(format!(
        "action noise clamped to all zeros {RESAMPLE_LIMIT} times"
    )))
}

/// Per-coordinate update ratios `(PD + λ·a)/PD`, clipped to `[1−δ, 1+δ]`.
pub fn clipped_ratios(pd: &[f64], action: &[f64], step_size: f64, clip: f64) -> Vec<f64> {
    pd.iter()
        .zip(action)
        .map(|(&p, &a)| ((p + step_size * a) / p).clamp(1.0 - clip, 1.0 + clip))
        .collect()
}

/// Move the policy toward `action` with clipped ratios, then floor at `p_min` and renormalize.
pub fn update_policy(policy: &PruningPolicy, action: &[f64], step_size: f64, clip: f64) -> PruningPolicy {
    let ratios = clipped_ratios(&policy.pd, action, step_size, clip);
    let moved: Vec<f64> = policy.pd.iter().zip(&ratios).map(|(p, r)| p * r).collect();
    PruningPolicy {
        pd: floor_renormalize(&moved, policy.p_min),
        p_min: policy.p_min,
    }
}
