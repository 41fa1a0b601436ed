//! SGD with classical momentum.

use crate::error::{Error, Result};
use crate::graph::{Gradients, ModelGraph};
use crate::layer::ParamGrads;

/// Momentum SGD over every trainable tensor of a model.
///
/// Update rule (in place): `v ← momentum·v + (g + weight_decay·w)`, `w ← w − lr·v`.
/// Velocity buffers are created lazily and reset whenever a layer's
/// parameter shapes change (after pruning).
#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    velocity: Vec<ParamGrads>,
}

impl Sgd {
    pub fn new(lr: f32, momentum: f32, weight_decay: f32) -> Result<Self> {
        if !(lr > 0.0) || !lr.is_finite() {
            return Err(Error::Config(format!("learning rate must be positive, got {lr}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Config(format!("momentum must be in [0, 1), got {momentum}")));
        }
        Ok(Self {
            lr,
            momentum,
            weight_decay,
            velocity: Vec::new(),
        })
    }

    /// Like [`Sgd::new`] but accepts `lr = 0` (a frozen step).
    pub fn frozen_ok(lr: f32, momentum: f32, weight_decay: f32) -> Result<Self> {
        if lr == 0.0 {
            let mut s = Self::new(1.0, momentum, weight_decay)?;
            s.lr = 0.0;
            return Ok(s);
        }
        Self::new(lr, momentum, weight_decay)
    }

    pub fn set_lr(&mut self, lr: f32) {
        self.lr = lr;
    }

    pub fn step(&mut self, model: &mut ModelGraph, grads: &Gradients) -> Result<()> {
        if grads.params.len() != model.nodes.len() {
            return Err(Error::Input(format!(
                "gradient map covers {} nodes, model has {}",
                grads.params.len(),
                model.nodes.len()
            )));
        }
        if self.velocity.len() != model.nodes.len() {
            self.velocity = vec![ParamGrads::default(); model.nodes.len()];
        }
        for ((node, g), vel) in model
            .nodes
            .iter_mut()
            .zip(&grads.params)
            .zip(self.velocity.iter_mut())
        {
            let p = &mut node.params;
            let slots = [
                (&mut p.weight, &g.weight, &mut vel.weight),
                (&mut p.bias, &g.bias, &mut vel.bias),
                (&mut p.gamma, &g.gamma, &mut vel.gamma),
                (&mut p.beta, &g.beta, &mut vel.beta),
            ];
            for (param, grad, v) in slots {
                let (Some(param), Some(grad)) = (param.as_mut(), grad.as_ref()) else {
                    continue;
                };
                if grad.len() != param.len() {
                    return Err(Error::Input(format!(
                        "gradient for {} has {} entries, parameter has {}",
                        node.name,
                        grad.len(),
                        param.len()
                    )));
                }
                if v.as_ref().map(|v| v.len()) != Some(param.len()) {
                    *v = Some(vec![0.0; param.len()]);
                }
                let v = v.as_mut().expect("initialized");
                for ((w, &gi), vi) in param.data_mut().iter_mut().zip(grad).zip(v.iter_mut()) {
                    *vi = self.momentum * *vi + gi + self.weight_decay * *w;
                    *w -= self.lr * *vi;
                }
            }
        }
        Ok(())
    }
}
