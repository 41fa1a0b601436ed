use std::path::{Path, PathBuf};

use anyhow::Context;
use rlprune::distill::TrainConfig;
use rlprune::search::{EpsilonDecay, RewardSpec, SearchConfig};
use rlprune::Error;
use serde::{Deserialize, Serialize};

/// Contents of a `--config` TOML file. Flags given on the command line win.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub search: SearchConfig,
    /// Baseline trainer settings for `rlprune train`.
    pub train: TrainConfig,
    pub paths: Paths,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub model: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())).into())
    }
}

/// Search flags shared by `prune` and the global options.
#[derive(Clone, Debug, Default, clap::Args)]
pub struct SearchFlags {
    /// Target channel sparsity S.
    #[arg(long, global = true)]
    pub sparsity: Option<f64>,
    /// Number of pruning steps.
    #[arg(long, global = true)]
    pub steps: Option<usize>,
    /// Reward preset: accuracy, flops or params.
    #[arg(long, global = true)]
    pub reward: Option<String>,
    #[arg(long, global = true)]
    pub alpha: Option<f64>,
    #[arg(long, global = true)]
    pub beta: Option<f64>,
    #[arg(long, global = true)]
    pub epsilon0: Option<f64>,
    /// Epsilon decay: constant, linear or cosine.
    #[arg(long, global = true)]
    pub decay: Option<String>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
}

impl SearchFlags {
    /// Apply flags over `cfg`; a `--reward` preset is applied before `--alpha`/`--beta`.
    pub fn apply(&self, cfg: &mut SearchConfig) -> anyhow::Result<()> {
        if let Some(s) = self.sparsity {
            cfg.target_sparsity = s;
        }
        if let Some(s) = self.steps {
            cfg.steps = s;
        }
        if let Some(r) = &self.reward {
            cfg.reward = RewardSpec::preset(r)?;
        }
        if let Some(a) = self.alpha {
            cfg.reward.alpha = a;
        }
        if let Some(b) = self.beta {
            cfg.reward.beta = b;
        }
        if let Some(e) = self.epsilon0 {
            cfg.epsilon0 = e;
        }
        if let Some(d) = &self.decay {
            cfg.epsilon_decay = d.parse::<EpsilonDecay>()?;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        cfg.validate()?;
        Ok(())
    }
}
