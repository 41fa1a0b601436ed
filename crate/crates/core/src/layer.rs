//! Layer kinds, their parameter sets, and static shape rules.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub enum LayerKind {
    Conv2d {
        out_channels: usize,
        in_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    },
    Linear {
        out_features: usize,
        in_features: usize,
        bias: bool,
    },
    BatchNorm {
        channels: usize,
        eps: f32,
        momentum: f32,
    },
    Relu,
    Sigmoid,
    HardSwish,
    MaxPool {
        kernel: usize,
        stride: usize,
    },
    AvgPool {
        kernel: usize,
        stride: usize,
    },
    GlobalAvgPool,
    Flatten,
    Add,
    Mul,
    /// Concatenation along the channel axis.
    Concat,
    Softmax,
}

impl LayerKind {
    pub const NAMES: [&'static str; 14] = [
        "conv2d",
        "linear",
        "batch_norm",
        "relu",
        "sigmoid",
        "hard_swish",
        "max_pool",
        "avg_pool",
        "global_avg_pool",
        "flatten",
        "add",
        "mul",
        "concat",
        "softmax",
    ];

    pub fn op_name(&self) -> &'static str {
        match self {
            LayerKind::Conv2d { .. } => "conv2d",
            LayerKind::Linear { .. } => "linear",
            LayerKind::BatchNorm { .. } => "batch_norm",
            LayerKind::Relu => "relu",
            LayerKind::Sigmoid => "sigmoid",
            LayerKind::HardSwish => "hard_swish",
            LayerKind::MaxPool { .. } => "max_pool",
            LayerKind::AvgPool { .. } => "avg_pool",
            LayerKind::GlobalAvgPool => "global_avg_pool",
            LayerKind::Flatten => "flatten",
            LayerKind::Add => "add",
            LayerKind::Mul => "mul",
            LayerKind::Concat => "concat",
            LayerKind::Softmax => "softmax",
        }
    }

    /// Convolutional and linear layers are the prunable kinds.
    pub fn is_prunable(&self) -> bool {
        matches!(self, LayerKind::Conv2d { .. } | LayerKind::Linear { .. })
    }

    pub fn has_params(&self) -> bool {
        matches!(
            self,
            LayerKind::Conv2d { .. } | LayerKind::Linear { .. } | LayerKind::BatchNorm { .. }
        )
    }

    pub fn out_channels(&self) -> Option<usize> {
        match self {
            LayerKind::Conv2d { out_channels, .. } => Some(*out_channels),
            LayerKind::Linear { out_features, .. } => Some(*out_features),
            _ => None,
        }
    }

    pub fn in_channels(&self) -> Option<usize> {
        match self {
            LayerKind::Conv2d { in_channels, .. } => Some(*in_channels),
            LayerKind::Linear { in_features, .. } => Some(*in_features),
            _ => None,
        }
    }

    /// Permitted number of inputs: `(min, max)`.
    pub fn arity(&self) -> (usize, usize) {
        match self {
            LayerKind::Add | LayerKind::Mul => (2, 2),
            LayerKind::Concat => (2, usize::MAX),
            _ => (1, 1),
        }
    }

    /// Output shape for the given input shapes (batch axis included).
    pub fn output_shape(&self, inputs: &[&[usize]]) -> Result<Vec<usize>> {
        let (lo, hi) = self.arity();
        if inputs.len() < lo || inputs.len() > hi {
            return Err(Error::shape(
                "?",
                format!("{} expects {lo}..={hi} inputs, got {}", self.op_name(), inputs.len()),
            ));
        }
        let x = inputs[0];
        let rank4 = |what: &str| -> Result<(usize, usize, usize, usize)> {
            if x.len() != 4 {
                return Err(Error::shape(
                    "?",
                    format!("{what} needs a rank-4 input, got {x:?}"),
                ));
            }
            Ok((x[0], x[1], x[2], x[3]))
        };
        match *self {
            LayerKind::Conv2d {
                out_channels,
                in_channels,
                kernel,
                stride,
                padding,
                ..
            } => {
                let (b, c, h, w) = rank4("conv2d")?;
                if c != in_channels {
                    return Err(Error::shape(
                        "?",
                        format!("conv2d expects {in_channels} input channels, got {c}"),
                    ));
                }
                let (oh, ow) = window_out(h, w, kernel, stride, padding)?;
                Ok(vec![b, out_channels, oh, ow])
            }
            LayerKind::Linear {
                out_features,
                in_features,
                ..
            } => {
                if x.len() != 2 {
                    return Err(Error::shape(
                        "?",
                        format!("linear needs a rank-2 input, got {x:?}"),
                    ));
                }
                if x[1] != in_features {
                    return Err(Error::shape(
                        "?",
                        format!("linear expects {in_features} features, got {}", x[1]),
                    ));
                }
                Ok(vec![x[0], out_features])
            }
            LayerKind::BatchNorm { channels, .. } => {
                if !(x.len() == 2 || x.len() == 4) || x[1] != channels {
                    return Err(Error::shape(
                        "?",
                        format!("batch_norm over {channels} channels cannot take {x:?}"),
                    ));
                }
                Ok(x.to_vec())
            }
            LayerKind::Relu | LayerKind::Sigmoid | LayerKind::HardSwish => Ok(x.to_vec()),
            LayerKind::MaxPool { kernel, stride } | LayerKind::AvgPool { kernel, stride } => {
                let (b, c, h, w) = rank4(self.op_name())?;
                let (oh, ow) = window_out(h, w, kernel, stride, 0)?;
                Ok(vec![b, c, oh, ow])
            }
            LayerKind::GlobalAvgPool => {
                let (b, c, _, _) = rank4("global_avg_pool")?;
                Ok(vec![b, c, 1, 1])
            }
            LayerKind::Flatten => {
                if x.len() < 2 {
                    return Err(Error::shape("?", format!("flatten needs rank >= 2, got {x:?}")));
                }
                Ok(vec![x[0], x[1..].iter().product()])
            }
            LayerKind::Add => {
                if inputs[0] != inputs[1] {
                    return Err(Error::shape(
                        "?",
                        format!("add operands differ: {:?} vs {:?}", inputs[0], inputs[1]),
                    ));
                }
                Ok(x.to_vec())
            }
            LayerKind::Mul => {
                let (a, b) = (inputs[0], inputs[1]);
                if a == b {
                    return Ok(a.to_vec());
                }
                // channel-wise gating: one operand is [B, C, 1, 1]
                if a.len() == 4 && b.len() == 4 && a[..2] == b[..2] {
                    if b[2] == 1 && b[3] == 1 {
                        return Ok(a.to_vec());
                    }
                    if a[2] == 1 && a[3] == 1 {
                        return Ok(b.to_vec());
                    }
                }
                Err(Error::shape(
                    "?",
                    format!("mul operands incompatible: {a:?} vs {b:?}"),
                ))
            }
            LayerKind::Concat => {
                let mut out = x.to_vec();
                if out.len() < 2 {
                    return Err(Error::shape("?", "concat needs rank >= 2"));
                }
                for other in &inputs[1..] {
                    if other.len() != x.len()
                        || other[0] != x[0]
                        || other[2..] != x[2..]
                    {
                        return Err(Error::shape(
                            "?",
                            format!("concat operands disagree off the channel axis: {x:?} vs {other:?}"),
                        ));
                    }
                    out[1] += other[1];
                }
                Ok(out)
            }
            LayerKind::Softmax => {
                if x.len() != 2 {
                    return Err(Error::shape("?", format!("softmax needs rank 2, got {x:?}")));
                }
                Ok(x.to_vec())
            }
        }
    }
}

fn window_out(h: usize, w: usize, k: usize, s: usize, p: usize) -> Result<(usize, usize)> {
    if k == 0 || s == 0 {
        return Err(Error::shape("?", "kernel and stride must be positive"));
    }
    if h + 2 * p < k || w + 2 * p < k {
        return Err(Error::shape(
            "?",
            format!("window {k} larger than padded input {h}x{w} (pad {p})"),
        ));
    }
    Ok(((h + 2 * p - k) / s + 1, (w + 2 * p - k) / s + 1))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Named parameter tensors of one layer.
///
/// Field order is the on-disk order: weight, bias, bn-gamma, bn-beta,
/// bn-running-mean, bn-running-var.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Params {
    pub weight: Option<Tensor>,
    pub bias: Option<Tensor>,
    pub gamma: Option<Tensor>,
    pub beta: Option<Tensor>,
    pub running_mean: Option<Tensor>,
    pub running_var: Option<Tensor>,
}

pub const PARAM_NAMES: [&str; 6] = [
    "weight",
    "bias",
    "gamma",
    "beta",
    "running_mean",
    "running_var",
];

impl Params {
    pub fn named(&self) -> impl Iterator<Item = (&'static str, &Tensor)> {
        PARAM_NAMES
            .into_iter()
            .zip(self.slots())
            .filter_map(|(n, t)| t.map(|t| (n, t)))
    }

    fn slots(&self) -> [Option<&Tensor>; 6] {
        [
            self.weight.as_ref(),
            self.bias.as_ref(),
            self.gamma.as_ref(),
            self.beta.as_ref(),
            self.running_mean.as_ref(),
            self.running_var.as_ref(),
        ]
    }

    pub fn slot_mut(&mut self, name: &str) -> Option<&mut Option<Tensor>> {
        match name {
            "weight" => Some(&mut self.weight),
            "bias" => Some(&mut self.bias),
            "gamma" => Some(&mut self.gamma),
            "beta" => Some(&mut self.beta),
            "running_mean" => Some(&mut self.running_mean),
            "running_var" => Some(&mut self.running_var),
            _ => None,
        }
    }

    pub fn count(&self) -> usize {
        self.named().map(|(_, t)| t.len()).sum()
    }

    pub fn batch_norm(channels: usize) -> Self {
        Params {
            gamma: Some(Tensor::full(&[channels], 1.0)),
            beta: Some(Tensor::zeros(&[channels])),
            running_mean: Some(Tensor::zeros(&[channels])),
            running_var: Some(Tensor::full(&[channels], 1.0)),
            ..Default::default()
        }
    }

    /// Check that the tensors present match what `kind` requires.
    pub fn check(&self, kind: &LayerKind) -> Result<()> {
        let want: Vec<(&str, Vec<usize>)> = match *kind {
            LayerKind::Conv2d {
                out_channels,
                in_channels,
                kernel,
                bias,
                ..
            } => {
                let mut v = vec![("weight", vec![out_channels, in_channels, kernel, kernel])];
                if bias {
                    v.push(("bias", vec![out_channels]));
                }
                v
            }
            LayerKind::Linear {
                out_features,
                in_features,
                bias,
            } => {
                let mut v = vec![("weight", vec![out_features, in_features])];
                if bias {
                    v.push(("bias", vec![out_features]));
                }
                v
            }
            LayerKind::BatchNorm { channels, .. } => ["gamma", "beta", "running_mean", "running_var"]
                .into_iter()
                .map(|n| (n, vec![channels]))
                .collect(),
            _ => Vec::new(),
        };
        let present: Vec<(&str, &Tensor)> = self.named().collect();
        if present.len() != want.len() {
            return Err(Error::shape(
                "?",
                format!(
                    "{} expects parameters {:?}, found {:?}",
                    kind.op_name(),
                    want.iter().map(|w| w.0).collect::<Vec<_>>(),
                    present.iter().map(|p| p.0).collect::<Vec<_>>()
                ),
            ));
        }
        for ((name, shape), (pname, t)) in want.iter().zip(&present) {
            if name != pname || t.shape() != shape.as_slice() {
                return Err(Error::shape(
                    "?",
                    format!(
                        "parameter {pname} has shape {:?}, expected {name} {shape:?}",
                        t.shape()
                    ),
                ));
            }
        }
        Ok(())
    }
}

/// Gradients for the trainable parameters of one layer.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamGrads {
    pub weight: Option<Vec<f32>>,
    pub bias: Option<Vec<f32>>,
    pub gamma: Option<Vec<f32>>,
    pub beta: Option<Vec<f32>>,
}

impl ParamGrads {
    pub fn is_empty(&self) -> bool {
        self.weight.is_none() && self.bias.is_none() && self.gamma.is_none() && self.beta.is_none()
    }

    pub(crate) fn zeros_like(params: &Params) -> Self {
        let z = |t: &Option<Tensor>| t.as_ref().map(|t| vec![0.0; t.len()]);
        ParamGrads {
            weight: z(&params.weight),
            bias: z(&params.bias),
            gamma: z(&params.gamma),
            beta: z(&params.beta),
        }
    }
}
