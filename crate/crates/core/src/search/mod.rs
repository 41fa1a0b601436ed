//! Sparsity-distribution search: noisy actions, Q estimates, replay buffer,
//! ε-greedy selection, clipped policy updates and the multi-step pruning loop.

pub mod config;
pub mod history;
pub mod policy;
pub mod replay;

use std::collections::{BTreeMap, HashMap};
use std::sync::{Arc, Mutex, OnceLock};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::dependency::Analysis;
use crate::distill::{post_train, DistillConfig, Teacher};
use crate::error::{Error, Result};
use crate::graph::ModelGraph;
use crate::metrics::{accuracy, Costs};
use crate::pruner::{allocate_prune_counts, channel_sparsity, prune_by_scores, taylor_scores, CalibrationSet, ChannelScore};
use crate::seed::derive;

pub use config::{EpsilonDecay, RewardSpec, SearchConfig, Strategy};
pub use history::{read_history, write_history, HistoryRow};
pub use policy::{clipped_ratios, floor_renormalize, perturb, sample_action, update_policy, PruningPolicy};
pub use replay::{ReplayBuffer, ReplayEntry};

// rng stream tags
const CALIB: u64 = 1;
const SAMPLE: u64 = 2;
const SELECT: u64 = 3;
const TRAIN: u64 = 4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    /// Top-1 accuracy on the evaluation split.
    pub accuracy: f64,
    pub c_f: f64,
    pub c_p: f64,
    pub reward: f64,
}

/// `T_e + α·C_F + β·C_P` for `candidate` against the base costs.
pub fn compute_reward(candidate: &ModelGraph, base: &Costs, spec: &RewardSpec, eval: &Dataset) -> Result<RewardBreakdown> {
    let acc = accuracy(candidate, eval)?;
    let (c_f, c_p) = Costs::of(candidate)?.ratios(base);
    Ok(RewardBreakdown {
        accuracy: acc,
        c_f,
        c_p,
        reward: acc + spec.alpha * c_f + spec.beta * c_p,
    })
}

/// A model reached from the step's state, with lazily computed scores.
pub struct Node {
    pub model: ModelGraph,
    pub analysis: Analysis,
    pub reward: RewardBreakdown,
    /// Per-group prune counts that produced this node from its parent.
    pub counts: Vec<usize>,
    scores: OnceLock<Vec<ChannelScore>>,
}

impl Node {
    fn scores(&self, calib: &CalibrationSet) -> Result<&[ChannelScore]> {
        if let Some(s) = self.scores.get() {
            return Ok(s);
        }
        let s = taylor_scores(&self.model, calib, &self.analysis)?;
        Ok(self.scores.get_or_init(|| s))
    }
}

/// Everything fixed during one pruning step. Transitions are deterministic
/// in the allocation, so their results are memoized by the path of counts.
pub struct StepContext<'a> {
    pub root: Arc<Node>,
    /// Searchable group ids; actions are indexed in this order.
    pub group_ids: Vec<usize>,
    pub budget: usize,
    pub base: Costs,
    pub reward: RewardSpec,
    pub eval: &'a Dataset,
    pub calib: &'a CalibrationSet,
    cache: Mutex<HashMap<Vec<usize>, Arc<Node>>>,
}

impl<'a> StepContext<'a> {
    pub fn new(
        state: ModelGraph,
        budget: usize,
        base: Costs,
        reward: RewardSpec,
        eval: &'a Dataset,
        calib: &'a CalibrationSet,
    ) -> Result<Self> {
        let analysis = Analysis::of(&state)?;
        let group_ids = analysis.groups.searchable_ids();
        let reward_now = compute_reward(&state, &base, &reward, eval)?;
        Ok(Self {
            root: Arc::new(Node {
                model: state,
                analysis,
                reward: reward_now,
                counts: Vec::new(),
                scores: OnceLock::new(),
            }),
            group_ids,
            budget,
            base,
            reward,
            eval,
            calib,
            cache: Mutex::new(HashMap::new()),
        })
    }

    pub fn live(&self, node: &Node) -> Vec<usize> {
        self.group_ids
            .iter()
            .map(|&g| node.analysis.groups.groups[g].channels)
            .collect()
    }

    /// Prune this step's budget from `parent` as apportioned by `action`.
    /// `None` when every group is already at its floor.
    pub fn transition(&self, path: &[usize], parent: &Node, action: &[f64]) -> Result<Option<(Vec<usize>, Arc<Node>)>> {
        let alloc = match allocate_prune_counts(action, self.budget, &self.live(parent)) {
            Ok(a) => a,
            Err(Error::BudgetUnplaceable { .. }) => return Ok(None),
            Err(e) => return Err(e),
        };
        let mut key = path.to_vec();
        key.push(usize::MAX);
        key.extend(&alloc.counts);
        if let Some(hit) = self.cache.lock().expect("cache lock").get(&key) {
            return Ok(Some((key, hit.clone())));
        }
        let counts: BTreeMap<usize, usize> = self.group_ids.iter().copied().zip(alloc.counts.iter().copied()).collect();
        let model = prune_by_scores(&parent.model, &parent.analysis, parent.scores(self.calib)?, &counts)?;
        let analysis = Analysis::of(&model)?;
        let reward = compute_reward(&model, &self.base, &self.reward, self.eval)?;
        let node = Arc::new(Node {
            model,
            analysis,
            reward,
            counts: alloc.counts,
            scores: OnceLock::new(),
        });
        let node = self
            .cache
            .lock()
            .expect("cache lock")
            .entry(key.clone())
            .or_insert(node)
            .clone();
        Ok(Some((key, node)))
    }

    /// Value of taking `action` from `parent`, looking `depth` steps ahead.
    fn value<R: Rng + ?Sized>(
        &self,
        path: &[usize],
        parent: &Node,
        action: &[f64],
        depth: usize,
        policy: &PruningPolicy,
        cfg: &SearchConfig,
        rng: &mut R,
    ) -> Result<Option<(f64, Arc<Node>)>> {
        let Some((key, child)) = self.transition(path, parent, action)? else {
            return Ok(None);
        };
        let r = child.reward.reward;
        if depth == 0 {
            return Ok(Some((r, child)));
        }
        let mut best: Option<f64> = None;
        for _ in 0..cfg.inner_samples {
            let next = sample_action(policy, cfg.noise_variance, rng)?;
            if let Some((v, _)) = self.value(&key, &child, &next, depth - 1, policy, cfg, rng)? {
                best = Some(best.map_or(v, |b: f64| b.max(v)));
            }
        }
        Ok(Some((best.map_or(r, |b| r + cfg.discount * b), child)))
    }
}

/// Mean rollout value of `action` from the step's state, and the pruned
/// candidate. The sentinel `−∞` (and no candidate) means the budget could
/// not be placed.
pub fn estimate_q<R: Rng + ?Sized>(
    ctx: &StepContext,
    action: &[f64],
    policy: &PruningPolicy,
    cfg: &SearchConfig,
    rng: &mut R,
) -> Result<(f64, Option<ModelGraph>)> {
    let mut total = 0.0;
    let mut candidate = None;
    for _ in 0..cfg.sample_steps {
        match ctx.value(&[], &ctx.root, action, cfg.rollout_depth, policy, cfg, rng)? {
            Some((v, child)) => {
                total += v;
                candidate.get_or_insert_with(|| child.model.clone());
            }
            None => return Ok((f64::NEG_INFINITY, None)),
        }
    }
    Ok((total / cfg.sample_steps as f64, candidate))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epsilon: f64,
    pub budget: usize,
    pub removed: usize,
    /// Budget units that could not be placed because groups hit their floor.
    pub shortfall: usize,
    pub best_q: f64,
    pub reward: RewardBreakdown,
    pub channel_sparsity: f64,
    pub teacher_switched: bool,
    pub post_train_rolled_back: bool,
}

#[derive(Clone, Debug)]
pub struct SearchOutcome {
    pub model: ModelGraph,
    /// Final policy over `group_ids`; `None` for the uniform strategy.
    pub policy: Option<PruningPolicy>,
    pub group_ids: Vec<usize>,
    pub history: Vec<HistoryRow>,
    pub steps: Vec<StepRecord>,
    /// Channels the run set out to remove.
    pub target_channels: usize,
}

/// A run that stopped on an error; `model` is the last consistent state.
#[derive(Debug)]
pub struct SearchAborted {
    pub error: Error,
    pub model: ModelGraph,
    pub history: Vec<HistoryRow>,
}

impl std::fmt::Display for SearchAborted {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "search aborted after {} history rows: {}", self.history.len(), self.error)
    }
}

impl std::error::Error for SearchAborted {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

/// Per-step channel budgets: `round(total·S/steps)` each, with the last
/// step absorbing the rounding remainder so the run targets `round(total·S)`.
pub fn step_budgets(total: usize, sparsity: f64, steps: usize) -> Vec<usize> {
    let per = (total as f64 * sparsity / steps as f64).round() as usize;
    if per == 0 {
        return vec![0; steps];
    }
    let target = (total as f64 * sparsity).round() as usize;
    let mut out = Vec::with_capacity(steps);
    let mut left = target;
    for s in 0..steps {
        let b = if s + 1 == steps { left } else { per.min(left) };
        out.push(b);
        left -= b;
    }
    out
}

/// Calibration batch: `size` training samples chosen with the run seed.
pub fn calibration_set(train: &Dataset, size: usize, seed: u64) -> Result<CalibrationSet> {
    if train.is_empty() {
        return Err(Error::Config("empty training split".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive(seed, &[CALIB]));
    let idx = rand::seq::index::sample(&mut rng, train.len(), size.min(train.len())).into_vec();
    let (x, y) = train.batch(&idx);
    CalibrationSet::new(x, y)
}

struct Run<'a> {
    cfg: &'a SearchConfig,
    train: &'a Dataset,
    eval: &'a Dataset,
    base: Costs,
    original: Analysis,
    model: ModelGraph,
    history: Vec<HistoryRow>,
    steps: Vec<StepRecord>,
    policy: Option<PruningPolicy>,
}

impl Run<'_> {
    fn rows(&mut self, step: usize, analysis: &Analysis, epsilon: f64, best_q: f64, r: &RewardBreakdown) {
        for g in self.original.groups.searchable() {
            let live = analysis.groups.groups[g.id].channels;
            self.history.push(HistoryRow {
                step,
                group_id: g.id,
                group_sparsity: 1.0 - live as f64 / g.channels as f64,
                epsilon,
                best_q,
                reward: r.reward,
                accuracy: r.accuracy,
                flops_ratio: r.c_f,
                params_ratio: r.c_p,
            });
        }
    }

    fn distill(&self, student: &ModelGraph, teacher: &ModelGraph, epochs: usize, tag: u64) -> Result<(ModelGraph, bool)> {
        let mut d: DistillConfig = self.cfg.distill.clone();
        d.train.epochs = epochs;
        d.train.seed = derive(self.cfg.seed, &[TRAIN, tag]);
        let (m, report) = post_train(student, teacher, self.train, &d)?;
        Ok((m, report.rolled_back))
    }

    fn go(&mut self) -> Result<()> {
        let cfg = self.cfg;
        let calib = calibration_set(self.train, cfg.calibration_size, cfg.seed)?;
        let group_ids = self.original.groups.searchable_ids();
        let channels: Vec<usize> = self.original.groups.searchable().map(|g| g.channels).collect();
        let total: usize = channels.iter().sum();
        let budgets = step_budgets(total, cfg.target_sparsity, cfg.steps);
        if cfg.strategy == Strategy::Rl && !group_ids.is_empty() {
            self.policy = Some(PruningPolicy::proportional(&channels, cfg.p_min)?);
        }
        let mut teacher = Teacher::new(self.model.clone(), accuracy(&self.model, self.eval)?);
        let mut removed_total = 0usize;
        let mut pruned_any = false;

        for (step, &budget) in budgets.iter().enumerate() {
            let epsilon = cfg.epsilon_at(step);
            let ctx = StepContext::new(self.model.clone(), budget, self.base, cfg.reward, self.eval, &calib)?;
            if budget == 0 || group_ids.is_empty() {
                let r = ctx.root.reward;
                let analysis = ctx.root.analysis.clone();
                self.rows(step, &analysis, epsilon, r.reward, &r);
                self.steps.push(StepRecord {
                    step,
                    epsilon,
                    budget,
                    removed: 0,
                    shortfall: budget,
                    best_q: r.reward,
                    reward: r,
                    channel_sparsity: channel_sparsity(&self.original, &analysis),
                    teacher_switched: false,
                    post_train_rolled_back: false,
                });
                continue;
            }

            let (action, best_q) = match self.policy.as_mut() {
                Some(policy) => {
                    let mut buffer = ReplayBuffer::new(cfg.replay_capacity);
                    for stage in 0..cfg.stages_per_step {
                        let snapshot = policy.clone();
                        let results: Vec<Result<(Vec<f64>, f64)>> = (0..cfg.samples_per_stage)
                            .into_par_iter()
                            .map(|i| {
                                let mut rng = ChaCha8Rng::seed_from_u64(derive(
                                    cfg.seed,
                                    &[SAMPLE, step as u64, stage as u64, i as u64],
                                ));
                                let a = sample_action(&snapshot, cfg.noise_variance, &mut rng)?;
                                let (q, _) = estimate_q(&ctx, &a, &snapshot, cfg, &mut rng)?;
                                Ok((a, q))
                            })
                            .collect();
                        for r in results {
                            let (a, q) = r?;
                            buffer.update(a, q);
                        }
                        if buffer.is_empty() {
                            break;
                        }
                        let mut rng = ChaCha8Rng::seed_from_u64(derive(cfg.seed, &[SELECT, step as u64, stage as u64]));
                        let chosen = buffer.select_action(epsilon, &mut rng)?;
                        *policy = update_policy(policy, &chosen.action, cfg.step_size, cfg.clip);
                    }
                    match buffer.best() {
                        Some(b) => (b.action.clone(), b.q),
                        None => {
                            log::warn!("step {step}: every group is at its channel floor; stopping");
                            break;
                        }
                    }
                }
                None => {
                    let live = ctx.live(&ctx.root);
                    let sum: usize = live.iter().sum();
                    (live.iter().map(|&c| c as f64 / sum as f64).collect(), f64::NAN)
                }
            };

            let Some((_, next)) = ctx.transition(&[], &ctx.root, &action)? else {
                log::warn!("step {step}: every group is at its channel floor; stopping");
                break;
            };
            let best_q = if best_q.is_nan() { next.reward.reward } else { best_q };
            let removed: usize = next.counts.iter().sum();
            removed_total += removed;
            pruned_any |= removed > 0;
            let mut model = next.model.clone();
            drop(ctx);

            let mut rolled_back = false;
            if cfg.post_train_every > 0 && (step + 1) % cfg.post_train_every == 0 && cfg.distill.train.epochs > 0 {
                let (m, rb) = self.distill(&model, &teacher.model, cfg.distill.train.epochs, step as u64)?;
                model = m;
                rolled_back = rb;
            }
            let analysis = Analysis::of(&model)?;
            let r = compute_reward(&model, &self.base, &cfg.reward, self.eval)?;
            let switched = teacher.update(&model, r.accuracy);
            self.model = model;
            self.rows(step, &analysis, epsilon, best_q, &r);
            let sparsity = channel_sparsity(&self.original, &analysis);
            log::info!(
                "step {step}: budget {budget} removed {removed} sparsity {sparsity:.4} best_q {best_q:.4} accuracy {:.4}",
                r.accuracy
            );
            if removed < budget {
                log::warn!("step {step}: {} channels of budget unplaced (groups at floor)", budget - removed);
            }
            self.steps.push(StepRecord {
                step,
                epsilon,
                budget,
                removed,
                shortfall: budget - removed,
                best_q,
                reward: r,
                channel_sparsity: sparsity,
                teacher_switched: switched,
                post_train_rolled_back: rolled_back,
            });
            let target: usize = budgets.iter().sum();
            if removed_total >= target {
                break;
            }
        }

        if pruned_any && cfg.final_epochs > 0 {
            let (m, rb) = self.distill(&self.model, &teacher.model, cfg.final_epochs, u64::MAX)?;
            if rb {
                log::warn!("final post-training diverged; kept the pre-training model");
            }
            self.model = m;
        }
        Ok(())
    }
}

/// Prune `model` toward `cfg.target_sparsity` over `cfg.steps` steps,
/// rewarding candidates on `eval` and calibrating and post-training on `train`.
///
/// Sampling within a stage runs on the current rayon pool. Every sample
/// draws from its own seed stream, so results do not depend on the pool size.
pub fn run_pruning_search(
    model: &ModelGraph,
    train: &Dataset,
    eval: &Dataset,
    cfg: &SearchConfig,
) -> std::result::Result<SearchOutcome, Box<SearchAborted>> {
    let abort = |error: Error, model: ModelGraph, history: Vec<HistoryRow>| Box::new(SearchAborted { error, model, history });
    if let Err(e) = cfg.validate().and_then(|_| model.validate().map(|_| ())) {
        return Err(abort(e, model.clone(), Vec::new()));
    }
    let (base, original) = match Costs::of(model).and_then(|c| Ok((c, Analysis::of(model)?))) {
        Ok(v) => v,
        Err(e) => return Err(abort(e, model.clone(), Vec::new())),
    };
    let mut run = Run {
        cfg,
        train,
        eval,
        base,
        original,
        model: model.clone(),
        history: Vec::new(),
        steps: Vec::new(),
        policy: None,
    };
    match run.go() {
        Ok(()) => {
            let group_ids = run.original.groups.searchable_ids();
            let total: usize = run.original.groups.searchable().map(|g| g.channels).sum();
            Ok(SearchOutcome {
                model: run.model,
                policy: run.policy,
                group_ids,
                history: run.history,
                steps: run.steps,
                target_channels: step_budgets(total, cfg.target_sparsity, cfg.steps).iter().sum(),
            })
        }
        Err(e) => Err(abort(e, run.model, run.history)),
    }
}
