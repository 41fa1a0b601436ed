use serde::{Deserialize, Serialize};

use crate::distill::DistillConfig;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EpsilonDecay {
    Constant,
    Linear,
    Cosine,
}

impl std::str::FromStr for EpsilonDecay {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(Self::Constant),
            "linear" => Ok(Self::Linear),
            "cosine" => Ok(Self::Cosine),
            _ => Err(Error::Config(format!("unknown epsilon decay `{s}`"))),
        }
    }
}

/// Reward weights: `R = T_e + α·C_F + β·C_P`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardSpec {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for RewardSpec {
    fn default() -> Self {
        Self::ACCURACY
    }
}

impl RewardSpec {
    pub const ACCURACY: Self = Self { alpha: 0.0, beta: 0.0 };
    pub const FLOPS: Self = Self { alpha: 0.25, beta: 0.0 };
    pub const PARAMS: Self = Self { alpha: 0.0, beta: 0.25 };

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "accuracy" => Ok(Self::ACCURACY),
            "flops" => Ok(Self::FLOPS),
            "params" => Ok(Self::PARAMS),
            _ => Err(Error::Config(format!(
                "unknown reward strategy `{name}` (accuracy, flops, params)"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.beta >= 0.0) || !self.alpha.is_finite() || !self.beta.is_finite() {
            return Err(Error::Config(format!(
                "reward weights must be finite and non-negative, got α={} β={}",
                self.alpha, self.beta
            )));
        }
        Ok(())
    }
}

/// How each step's channel budget is spread over the groups.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    /// Sampled actions, replay buffer and policy updates.
    Rl,
    /// Every step prunes each group in proportion to its live channels.
    Uniform,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchConfig {
    /// Fraction of the searchable output channels to remove.
    pub target_sparsity: f64,
    pub steps: usize,
    pub stages_per_step: usize,
    /// Variance of the Gaussian action noise.
    pub noise_variance: f64,
    /// Policy step size λ.
    pub step_size: f64,
    /// Discount γ.
    pub discount: f64,
    /// Rollouts per Q estimate (T).
    pub sample_steps: usize,
    /// Actions sampled per stage (N_S).
    pub samples_per_stage: usize,
    /// PPO clip δ.
    pub clip: f64,
    pub epsilon0: f64,
    pub epsilon_decay: EpsilonDecay,
    /// Decay window as a fraction of `steps`.
    pub decay_window: f64,
    pub rollout_depth: usize,
    pub inner_samples: usize,
    pub replay_capacity: usize,
    pub p_min: f64,
    pub calibration_size: usize,
    pub reward: RewardSpec,
    pub strategy: Strategy,
    /// Post-train after every `post_train_every` steps; 0 disables.
    pub post_train_every: usize,
    /// Extra post-training epochs after the last step.
    pub final_epochs: usize,
    pub distill: DistillConfig,
    pub seed: u64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            target_sparsity: 0.3,
            steps: 10,
            stages_per_step: 10,
            noise_variance: 0.04,
            step_size: 0.1,
            discount: 0.9,
            sample_steps: 1,
            samples_per_stage: 10,
            clip: 0.2,
            epsilon0: 0.4,
            epsilon_decay: EpsilonDecay::Cosine,
            decay_window: 0.1,
            rollout_depth: 1,
            inner_samples: 3,
            replay_capacity: 32,
            p_min: 1e-4,
            calibration_size: crate::pruner::CALIBRATION_SIZE,
            reward: RewardSpec::default(),
            strategy: Strategy::Rl,
            post_train_every: 1,
            final_epochs: 0,
            distill: DistillConfig::default(),
            seed: 0,
        }
    }
}

fn check(ok: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::Config(msg()))
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        let s = self.target_sparsity;
        check((0.0..1.0).contains(&s), || format!("target_sparsity must be in [0, 1), got {s}"))?;
        check(self.steps >= 1, || "steps must be at least 1".into())?;
        check(self.stages_per_step >= 1, || "stages_per_step must be at least 1".into())?;
        check(self.samples_per_stage >= 1, || "samples_per_stage must be at least 1".into())?;
        check(self.sample_steps >= 1, || "sample_steps must be at least 1".into())?;
        check(self.replay_capacity >= 1, || "replay_capacity must be at least 1".into())?;
        check(self.calibration_size >= 1, || "calibration_size must be at least 1".into())?;
        let v = self.noise_variance;
        check(v >= 0.0 && v.is_finite(), || format!("noise_variance must be ≥ 0, got {v}"))?;
        let l = self.step_size;
        check(l >= 0.0 && l.is_finite(), || format!("step_size must be ≥ 0, got {l}"))?;
        let g = self.discount;
        check((0.0..=1.0).contains(&g), || format!("discount must be in [0, 1], got {g}"))?;
        let d = self.clip;
        check(d > 0.0 && d < 1.0, || format!("clip must be in (0, 1), got {d}"))?;
        let e = self.epsilon0;
        check((0.0..=1.0).contains(&e), || format!("epsilon0 must be in [0, 1], got {e}"))?;
        let w = self.decay_window;
        check((0.0..=1.0).contains(&w), || format!("decay_window must be in [0, 1], got {w}"))?;
        let p = self.p_min;
        check(p > 0.0 && p < 1.0, || format!("p_min must be in (0, 1), got {p}"))?;
        self.reward.validate()?;
        self.distill.validate()
    }

    /// Exploration rate at pruning step `step`.
    pub fn epsilon_at(&self, step: usize) -> f64 {
        let window = self.decay_window * self.steps as f64;
        let t = step as f64;
        match self.epsilon_decay {
            EpsilonDecay::Constant => self.epsilon0,
            _ if t >= window => 0.0,
            EpsilonDecay::Linear => self.epsilon0 * (1.0 - t / window),
            EpsilonDecay::Cosine => self.epsilon0 * (1.0 + (std::f64::consts::PI * t / window).cos()) / 2.0,
        }
    }
}
