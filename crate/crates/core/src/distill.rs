//! Supervised training, knowledge-distillation post-training, and teacher switching.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::graph::ModelGraph;
use crate::layer::Mode;
use crate::loss::{cross_entropy, log_softmax, Loss};
use crate::optim::Sgd;
use crate::seed::derive;
use crate::tensor::Tensor;

/// `τ·KL(softmax(t/T) ‖ softmax(s/T)) + (1−τ)·CE(s, labels)`, averaged over the batch.
///
/// The teacher logits are constants: no gradient flows to them.
pub fn kd_loss(student: &Tensor, teacher: &Tensor, labels: &[usize], tau: f64, temperature: f64) -> Result<Loss> {
    if student.shape() != teacher.shape() || student.rank() != 2 {
        return Err(Error::Input(format!(
            "student logits {:?} and teacher logits {:?} must both be [batch, classes]",
            student.shape(),
            teacher.shape()
        )));
    }
    if !(0.0..=1.0).contains(&tau) || !(temperature > 0.0) {
        return Err(Error::Config(format!(
            "tau must be in [0, 1] and temperature positive, got {tau} and {temperature}"
        )));
    }
    let (batch, classes) = (student.shape()[0], student.shape()[1]);
    if labels.len() != batch {
        return Err(Error::Input(format!("{} labels for a batch of {batch}", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Input(format!("label {bad} out of range for {classes} classes")));
    }
    let inv_b = 1.0 / batch as f64;
    let scaled = |row: &[f32]| -> Vec<f32> { row.iter().map(|&v| (v as f64 / temperature) as f32).collect() };
    let (mut kl, mut ce) = (0.0f64, 0.0f64);
    let mut grad = vec![0.0f32; batch * classes];
    for (b, g) in grad.chunks_exact_mut(classes).enumerate() {
        let s_row = &student.data()[b * classes..(b + 1) * classes];
        let t_row = &teacher.data()[b * classes..(b + 1) * classes];
        let ls = log_softmax(s_row);
        let (ls_t, lt_t) = if temperature == 1.0 {
            (ls.clone(), log_softmax(t_row))
        } else {
            (log_softmax(&scaled(s_row)), log_softmax(&scaled(t_row)))
        };
        ce -= ls[labels[b]];
        for j in 0..classes {
            let pt = lt_t[j].exp();
            if pt > 0.0 {
                kl += pt * (lt_t[j] - ls_t[j]);
            }
            let onehot = if j == labels[b] { 1.0 } else { 0.0 };
            let g_kl = (ls_t[j].exp() - pt) / temperature * inv_b;
            let g_ce = (ls[j].exp() - onehot) * inv_b;
            g[j] = (tau * g_kl + (1.0 - tau) * g_ce) as f32;
        }
    }
    Ok(Loss {
        value: (tau * kl * inv_b + (1.0 - tau) * ce * inv_b) as f32,
        grad: Tensor::from_parts(vec![batch, classes], grad),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    /// Epoch fractions at which the learning rate is multiplied by `lr_decay`.
    pub milestones: Vec<f64>,
    pub lr_decay: f32,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 64,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            milestones: vec![0.5, 0.75],
            lr_decay: 0.1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return Err(Error::Config(format!(
                "need lr > 0, momentum in [0, 1), weight_decay ≥ 0; got {}, {}, {}",
                self.lr, self.momentum, self.weight_decay
            )));
        }
        if self.milestones.iter().any(|m| !(0.0..=1.0).contains(m)) {
            return Err(Error::Config("milestones are epoch fractions in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f32 {
        let passed = self
            .milestones
            .iter()
            .filter(|&&m| epoch as f64 >= (m * self.epochs as f64).round())
            .count();
        self.lr * self.lr_decay.powi(passed as i32)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    pub tau: f64,
    pub temperature: f64,
    pub train: TrainConfig,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            tau: 0.75,
            temperature: 1.0,
            train: TrainConfig {
                epochs: 1,
                lr: 0.01,
                milestones: Vec::new(),
                ..TrainConfig::default()
            },
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::Config(format!("tau must be in [0, 1], got {}", self.tau)));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config(format!("temperature must be positive, got {}", self.temperature)));
        }
        self.train.validate()
    }
}

/// Mean loss per epoch.
pub type LossCurve = Vec<f64>;

/// Mini-batch SGD over `data`. With a teacher the loss is [`kd_loss`],
/// otherwise cross-entropy. `on_epoch` sees the model after every epoch.
pub fn fit(
    model: &mut ModelGraph,
    teacher: Option<(&ModelGraph, f64, f64)>,
    data: &Dataset,
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(usize, &ModelGraph, f64) -> Result<()>,
) -> Result<LossCurve> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Config("empty training split".into()));
    }
    let mut opt = Sgd::new(cfg.lr, cfg.momentum, cfg.weight_decay)?;
    let mut curve = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        opt.set_lr(cfg.lr_at(epoch));
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive(cfg.seed, &[epoch as u64])));
        let (mut total, mut seen) = (0.0f64, 0usize);
        for idx in order.chunks(cfg.batch_size) {
            let (x, y) = data.batch(idx);
            let (logits, tape) = model.run_forward(&x, Mode::Train)?;
            let loss = match teacher {
                Some((t, tau, temp)) => kd_loss(&logits, &t.predict(&x)?, &y, tau, temp)?,
                None => cross_entropy(&logits, &y)?,
            };
            if !loss.value.is_finite() {
                return Err(Error::Numeric {
                    layer: "loss".into(),
                });
            }
            let grads = model.backward(&tape, &loss)?;
            opt.step(model, &grads)?;
            model.apply_running_stats(&tape)?;
            total += loss.value as f64 * idx.len() as f64;
            seen += idx.len();
        }
        let mean = total / seen as f64;
        curve.push(mean);
        on_epoch(epoch, model, mean)?;
    }
    Ok(curve)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PostTrainReport {
    pub curve: LossCurve,
    /// Training diverged; the student was restored to its pre-training weights.
    pub rolled_back: bool,
}

/// Distil `teacher` into `student` for the configured epoch budget.
/// On divergence the untouched student is returned.
pub fn post_train(
    student: &ModelGraph,
    teacher: &ModelGraph,
    data: &Dataset,
    cfg: &DistillConfig,
) -> Result<(ModelGraph, PostTrainReport)> {
    cfg.validate()?;
    let mut trained = student.clone();
    match fit(
        &mut trained,
        Some((teacher, cfg.tau, cfg.temperature)),
        data,
        &cfg.train,
        &mut |_, _, _| Ok(()),
    ) {
        Ok(curve) => Ok((
            trained,
            PostTrainReport {
                curve,
                rolled_back: false,
            },
        )),
        Err(Error::Numeric { layer }) => {
            log::warn!("post-training diverged at {layer}; keeping the pre-training student");
            Ok((
                student.clone(),
                PostTrainReport {
                    curve: Vec::new(),
                    rolled_back: true,
                },
            ))
        }
        Err(e) => Err(e),
    }
}

/// The current distillation teacher and the best accuracy seen so far.
#[derive(Clone, Debug)]
pub struct Teacher {
    pub model: ModelGraph,
    pub watermark: f64,
}

impl Teacher {
    pub fn new(model: ModelGraph, accuracy: f64) -> Self {
        Self {
            model,
            watermark: accuracy,
        }
    }

    /// Switch to `candidate` if it is strictly more accurate. Returns whether it switched.
    pub fn update(&mut self, candidate: &ModelGraph, accuracy: f64) -> bool {
        if accuracy > self.watermark {
            self.model = candidate.clone();
            self.watermark = accuracy;
            true
        } else {
            false
        }
    }
}
