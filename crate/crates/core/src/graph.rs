//! The model DAG: validation, execution, gradients, and cost accounting.

use crate::error::{Error, Result};
use crate::layer::{LayerKind, Mode, ParamGrads, Params};
use crate::loss::Loss;
use crate::ops::{backward_op, forward_op, Cache};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNode {
    /// Position in [`ModelGraph::nodes`]; validated.
    pub id: usize,
    pub name: String,
    pub kind: LayerKind,
    /// Producer node ids. Empty means the node reads the model input.
    pub inputs: Vec<usize>,
    pub params: Params,
}

impl LayerNode {
    pub fn new(
        id: usize,
        name: impl Into<String>,
        kind: LayerKind,
        inputs: Vec<usize>,
        params: Params,
    ) -> Self {
        Self {
            id,
            name: name.into(),
            kind,
            inputs,
            params,
        }
    }
}

/// A DAG of layers in topological order. The last node is the output.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelGraph {
    pub name: String,
    pub version: u32,
    /// `C×H×W` of one sample.
    pub input_shape: [usize; 3],
    pub class_count: usize,
    pub nodes: Vec<LayerNode>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ValidationReport {
    /// Output shape of every node for a batch of one.
    pub shapes: Vec<Vec<usize>>,
    pub conv_layers: usize,
    pub linear_layers: usize,
    pub prunable: Vec<usize>,
}

/// Everything recorded by [`ModelGraph::run_forward`] that backward needs.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    pub input: Option<Tensor>,
    pub outputs: Vec<Tensor>,
    caches: Vec<Cache>,
    pub mode: Option<Mode>,
}

/// Parameter gradients per node (zeros for nodes the loss never reached)
/// plus the gradient w.r.t. the model input.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients {
    pub params: Vec<ParamGrads>,
    pub input: Option<Vec<f32>>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CostReport {
    pub per_layer: Vec<(usize, u64)>,
    pub total: u64,
}

impl ModelGraph {
    pub fn new(
        name: impl Into<String>,
        input_shape: [usize; 3],
        class_count: usize,
        nodes: Vec<LayerNode>,
    ) -> Self {
        Self {
            name: name.into(),
            version: 1,
            input_shape,
            class_count,
            nodes,
        }
    }

    pub fn output_id(&self) -> Option<usize> {
        self.nodes.len().checked_sub(1)
    }

    pub fn node_by_name(&self, name: &str) -> Option<&LayerNode> {
        self.nodes.iter().find(|n| n.name == name)
    }

    pub fn id_of(&self, name: &str) -> Option<usize> {
        self.node_by_name(name).map(|n| n.id)
    }

    pub fn validate(&self) -> Result<ValidationReport> {
        let Some(out_id) = self.output_id() else {
            return Err(Error::Validation {
                nodes: vec![],
                detail: "no output node".into(),
            });
        };
        let mut shapes: Vec<Vec<usize>> = Vec::with_capacity(self.nodes.len());
        let input = [1, self.input_shape[0], self.input_shape[1], self.input_shape[2]];
        let (mut conv, mut linear, mut prunable) = (0, 0, Vec::new());
        for (pos, node) in self.nodes.iter().enumerate() {
            if node.id != pos {
                return Err(Error::Validation {
                    nodes: vec![node.id],
                    detail: format!("node `{}` has id {} at position {pos}", node.name, node.id),
                });
            }
            if let Some(&bad) = node.inputs.iter().find(|&&i| i >= pos) {
                return Err(Error::Validation {
                    nodes: vec![pos, bad],
                    detail: format!(
                        "node `{}` reads node {bad}, which is not earlier: cycle or bad order",
                        node.name
                    ),
                });
            }
            let in_shapes: Vec<&[usize]> = if node.inputs.is_empty() {
                vec![&input[..]]
            } else {
                node.inputs.iter().map(|&i| shapes[i].as_slice()).collect()
            };
            let shape = node
                .kind
                .output_shape(&in_shapes)
                .and_then(|s| {
                    if node.kind.has_params() {
                        node.params.check(&node.kind)?;
                    } else if node.params.count() > 0 {
                        return Err(Error::shape("?", "parameter-free kind carries tensors"));
                    }
                    Ok(s)
                })
                .map_err(|e| Error::Validation {
                    nodes: {
                        let mut v = vec![pos];
                        v.extend(&node.inputs);
                        v
                    },
                    detail: format!("shape conflict at `{}`: {e}", node.name),
                })?;
            match node.kind {
                LayerKind::Conv2d { .. } => {
                    conv += 1;
                    prunable.push(pos);
                }
                LayerKind::Linear { .. } => {
                    linear += 1;
                    prunable.push(pos);
                }
                _ => {}
            }
            shapes.push(shape);
        }
        if shapes[out_id] != [1, self.class_count] {
            return Err(Error::Validation {
                nodes: vec![out_id],
                detail: format!(
                    "output shape {:?} does not match [batch, {}]",
                    shapes[out_id], self.class_count
                ),
            });
        }
        Ok(ValidationReport {
            shapes,
            conv_layers: conv,
            linear_layers: linear,
            prunable,
        })
    }

    pub fn run_forward(&self, batch: &Tensor, mode: Mode) -> Result<(Tensor, Tape)> {
        let s = batch.shape();
        if s.len() != 4 || s[1..] != self.input_shape {
            return Err(Error::Input(format!(
                "batch shape {s:?} does not match model input [B, {}, {}, {}]",
                self.input_shape[0], self.input_shape[1], self.input_shape[2]
            )));
        }
        if self.nodes.is_empty() {
            return Err(Error::Validation {
                nodes: vec![],
                detail: "no output node".into(),
            });
        }
        let mut outputs: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        let mut caches = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let (y, cache) = {
                let inputs: Vec<&Tensor> = if node.inputs.is_empty() {
                    vec![batch]
                } else {
                    node.inputs.iter().map(|&i| &outputs[i]).collect()
                };
                forward_op(&node.kind, &node.params, &inputs, mode).map_err(|e| e.in_node(&node.name))?
            };
            y.ensure_finite(&node.name)?;
            outputs.push(y);
            caches.push(cache);
        }
        let logits = outputs.last().expect("non-empty").clone();
        Ok((
            logits,
            Tape {
                input: Some(batch.clone()),
                outputs,
                caches,
                mode: Some(mode),
            },
        ))
    }

    /// Inference-only forward that drops intermediates as soon as possible.
    pub fn predict(&self, batch: &Tensor) -> Result<Tensor> {
        let (logits, _) = self.run_forward(batch, Mode::Eval)?;
        Ok(logits)
    }

    pub fn backward(&self, tape: &Tape, loss: &Loss) -> Result<Gradients> {
        let Some(input) = tape.input.as_ref() else {
            return Err(Error::State("backward called before forward".into()));
        };
        if tape.outputs.len() != self.nodes.len() {
            return Err(Error::State(format!(
                "tape records {} nodes, model has {}",
                tape.outputs.len(),
                self.nodes.len()
            )));
        }
        let out = tape.outputs.last().expect("non-empty");
        if loss.grad.shape() != out.shape() {
            return Err(Error::Input(format!(
                "loss gradient shape {:?} does not match logits {:?}",
                loss.grad.shape(),
                out.shape()
            )));
        }
        let n = self.nodes.len();
        let mut upstream: Vec<Option<Vec<f32>>> = vec![None; n];
        upstream[n - 1] = Some(loss.grad.data().to_vec());
        let mut input_grad: Option<Vec<f32>> = None;
        let mut params = vec![ParamGrads::default(); n];
        for node in self.nodes.iter().rev() {
            let Some(g) = upstream[node.id].take() else {
                params[node.id] = ParamGrads::zeros_like(&node.params);
                continue;
            };
            let inputs: Vec<&Tensor> = if node.inputs.is_empty() {
                vec![input]
            } else {
                node.inputs.iter().map(|&i| &tape.outputs[i]).collect()
            };
            let (in_grads, pg) = backward_op(
                &node.kind,
                &node.params,
                &inputs,
                &tape.outputs[node.id],
                &tape.caches[node.id],
                &g,
            )
            .map_err(|e| e.in_node(&node.name))?;
            params[node.id] = if pg.is_empty() {
                ParamGrads::zeros_like(&node.params)
            } else {
                pg
            };
            if node.inputs.is_empty() {
                accumulate(&mut input_grad, in_grads.into_iter().next().expect("one input"));
            } else {
                for (&src, ig) in node.inputs.iter().zip(in_grads) {
                    accumulate(&mut upstream[src], ig);
                }
            }
        }
        Ok(Gradients {
            params,
            input: input_grad,
        })
    }

    /// Fold the batch statistics of a training-mode tape into BatchNorm running stats.
    pub fn apply_running_stats(&mut self, tape: &Tape) -> Result<()> {
        if tape.mode != Some(Mode::Train) {
            return Ok(());
        }
        for (node, cache) in self.nodes.iter_mut().zip(&tape.caches) {
            let LayerKind::BatchNorm { momentum, .. } = node.kind else {
                continue;
            };
            let Cache::BatchNorm {
                batch_mean,
                batch_var,
                ..
            } = cache
            else {
                return Err(Error::State(format!("missing batch statistics for {}", node.name)));
            };
            let rm = node.params.running_mean.as_mut().expect("validated");
            for (r, &m) in rm.data_mut().iter_mut().zip(batch_mean) {
                *r = (1.0 - momentum) * *r + momentum * m;
            }
            let rv = node.params.running_var.as_mut().expect("validated");
            for (r, &v) in rv.data_mut().iter_mut().zip(batch_var) {
                *r = (1.0 - momentum) * *r + momentum * v;
            }
        }
        Ok(())
    }

    /// Multiply-accumulates per layer: conv `N_out·N_in·K²·H_out·W_out`,
    /// linear `N_out·N_in`, everything else zero.
    pub fn count_flops(&self) -> Result<CostReport> {
        let report = self.validate()?;
        let per_layer: Vec<(usize, u64)> = self
            .nodes
            .iter()
            .map(|n| {
                let f = match n.kind {
                    LayerKind::Conv2d {
                        out_channels,
                        in_channels,
                        kernel,
                        ..
                    } => {
                        let s = &report.shapes[n.id];
                        (out_channels * in_channels * kernel * kernel * s[2] * s[3]) as u64
                    }
                    LayerKind::Linear {
                        out_features,
                        in_features,
                        ..
                    } => (out_features * in_features) as u64,
                    _ => 0,
                };
                (n.id, f)
            })
            .collect();
        let total = per_layer.iter().map(|p| p.1).sum();
        Ok(CostReport { per_layer, total })
    }

    /// Stored scalars per layer: weights, biases, and BatchNorm affine + running entries.
    pub fn count_params(&self) -> Result<CostReport> {
        self.validate()?;
        let per_layer: Vec<(usize, u64)> = self
            .nodes
            .iter()
            .map(|n| (n.id, n.params.count() as u64))
            .collect();
        let total = per_layer.iter().map(|p| p.1).sum();
        Ok(CostReport { per_layer, total })
    }

    pub fn prunable_ids(&self) -> Vec<usize> {
        self.nodes
            .iter()
            .filter(|n| n.kind.is_prunable())
            .map(|n| n.id)
            .collect()
    }
}

fn accumulate(slot: &mut Option<Vec<f32>>, g: Vec<f32>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        None => *slot = Some(g),
    }
}
