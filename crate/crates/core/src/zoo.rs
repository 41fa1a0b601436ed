//! Model constructors: desk-scale fixtures and the CIFAR reference architectures.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::graph::{LayerNode, ModelGraph};
use crate::layer::{LayerKind, Params};
use crate::tensor::Tensor;

/// Incremental graph construction with He-normal initialisation.
pub struct GraphBuilder {
    name: String,
    input_shape: [usize; 3],
    nodes: Vec<LayerNode>,
    shapes: Vec<Vec<usize>>,
    rng: ChaCha8Rng,
}

impl GraphBuilder {
    pub fn new(name: &str, input_shape: [usize; 3], seed: u64) -> Self {
        Self {
            name: name.to_string(),
            input_shape,
            nodes: Vec::new(),
            shapes: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn shape_of(&self, from: Option<usize>) -> Vec<usize> {
        match from {
            None => {
                let [c, h, w] = self.input_shape;
                vec![1, c, h, w]
            }
            Some(i) => self.shapes[i].clone(),
        }
    }

    fn randn(&mut self, n: usize, std: f32) -> Vec<f32> {
        let d = Normal::new(0.0f32, std).expect("positive std");
        (0..n).map(|_| d.sample(&mut self.rng)).collect()
    }

    /// Append a node; panics on a shape conflict, since builders are static code.
    pub fn push(&mut self, name: &str, kind: LayerKind, inputs: &[Option<usize>], params: Params) -> usize {
        let in_shapes: Vec<Vec<usize>> = inputs.iter().map(|&i| self.shape_of(i)).collect();
        let refs: Vec<&[usize]> = in_shapes.iter().map(|s| s.as_slice()).collect();
        let shape = kind
            .output_shape(&refs)
            .unwrap_or_else(|e| panic!("fixture {}: node {name}: {e}", self.name));
        let id = self.nodes.len();
        let ids = inputs.iter().filter_map(|&i| i).collect::<Vec<_>>();
        assert!(
            ids.len() == inputs.len() || inputs.len() == 1,
            "only single-input nodes may read the model input"
        );
        self.nodes.push(LayerNode::new(id, name, kind, ids, params));
        self.shapes.push(shape);
        id
    }

    pub fn channels(&self, from: Option<usize>) -> usize {
        self.shape_of(from)[1]
    }

    pub fn conv(
        &mut self,
        name: &str,
        from: Option<usize>,
        out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    ) -> usize {
        let cin = self.channels(from);
        let std = (2.0 / (cin * kernel * kernel) as f32).sqrt();
        let w = self.randn(out * cin * kernel * kernel, std);
        let params = Params {
            weight: Some(Tensor::from_parts(vec![out, cin, kernel, kernel], w)),
            bias: bias.then(|| Tensor::zeros(&[out])),
            ..Default::default()
        };
        self.push(
            name,
            LayerKind::Conv2d {
                out_channels: out,
                in_channels: cin,
                kernel,
                stride,
                padding,
                bias,
            },
            &[from],
            params,
        )
    }

    pub fn linear(&mut self, name: &str, from: Option<usize>, out: usize, bias: bool) -> usize {
        let inf = self.channels(from);
        let std = (2.0 / inf as f32).sqrt();
        let w = self.randn(out * inf, std);
        let params = Params {
            weight: Some(Tensor::from_parts(vec![out, inf], w)),
            bias: bias.then(|| Tensor::zeros(&[out])),
            ..Default::default()
        };
        self.push(
            name,
            LayerKind::Linear {
                out_features: out,
                in_features: inf,
                bias,
            },
            &[from],
            params,
        )
    }

    pub fn bn(&mut self, name: &str, from: usize) -> usize {
        let c = self.channels(Some(from));
        self.push(
            name,
            LayerKind::BatchNorm {
                channels: c,
                eps: 1e-5,
                momentum: 0.1,
            },
            &[Some(from)],
            Params::batch_norm(c),
        )
    }

    /// Parameter-free node; an empty `inputs` reads the model input.
    pub fn op(&mut self, name: &str, kind: LayerKind, inputs: &[usize]) -> usize {
        let ins: Vec<Option<usize>> = if inputs.is_empty() {
            vec![None]
        } else {
            inputs.iter().map(|&i| Some(i)).collect()
        };
        self.push(name, kind, &ins, Params::default())
    }

    pub fn finish(self, class_count: usize) -> ModelGraph {
        let g = ModelGraph::new(self.name, self.input_shape, class_count, self.nodes);
        debug_assert!(g.validate().is_ok());
        g
    }
}

/// 8 conv + 2 linear layers, plain chain: exercises Identity and FlattenBlock edges.
pub fn vgg_mini(classes: usize, seed: u64) -> ModelGraph {
    let mut g = GraphBuilder::new("vgg-mini", [3, 32, 32], seed);
    let cfg = [8, 8, 0, 16, 16, 0, 32, 32, 0, 32, 32, 0];
    let mut x: Option<usize> = None;
    let (mut conv_i, mut pool_i) = (1, 1);
    for c in cfg {
        if c == 0 {
            x = Some(g.op(
                &format!("pool{pool_i}"),
                LayerKind::MaxPool { kernel: 2, stride: 2 },
                &[x.expect("conv first")],
            ));
            pool_i += 1;
        } else {
            let conv = g.conv(&format!("conv{conv_i}"), x, c, 3, 1, 1, true);
            let bn = g.bn(&format!("bn{conv_i}"), conv);
            x = Some(g.op(&format!("relu{conv_i}"), LayerKind::Relu, &[bn]));
            conv_i += 1;
        }
    }
    let flat = g.op("flatten", LayerKind::Flatten, &[x.expect("body")]);
    let fc1 = g.linear("fc1", Some(flat), 64, true);
    let r = g.op("relu_fc1", LayerKind::Relu, &[fc1]);
    g.linear("fc2", Some(r), classes, true);
    g.finish(classes)
}

fn basic_block(g: &mut GraphBuilder, p: &str, x: usize, out: usize, stride: usize) -> usize {
    let cin = g.channels(Some(x));
    let c1 = g.conv(&format!("{p}_conv1"), Some(x), out, 3, stride, 1, false);
    let b1 = g.bn(&format!("{p}_bn1"), c1);
    let r1 = g.op(&format!("{p}_relu1"), LayerKind::Relu, &[b1]);
    let c2 = g.conv(&format!("{p}_conv2"), Some(r1), out, 3, 1, 1, false);
    let b2 = g.bn(&format!("{p}_bn2"), c2);
    let shortcut = if stride != 1 || cin != out {
        let d = g.conv(&format!("{p}_down"), Some(x), out, 1, stride, 0, false);
        g.bn(&format!("{p}_down_bn"), d)
    } else {
        x
    };
    let add = g.op(&format!("{p}_add"), LayerKind::Add, &[b2, shortcut]);
    g.op(&format!("{p}_relu2"), LayerKind::Relu, &[add])
}

fn resnet(name: &str, widths: [usize; 3], blocks: usize, classes: usize, seed: u64) -> ModelGraph {
    let mut g = GraphBuilder::new(name, [3, 32, 32], seed);
    let stem = g.conv("stem", None, widths[0], 3, 1, 1, false);
    let b = g.bn("stem_bn", stem);
    let mut x = g.op("stem_relu", LayerKind::Relu, &[b]);
    for (s, &w) in widths.iter().enumerate() {
        for k in 0..blocks {
            let stride = if s > 0 && k == 0 { 2 } else { 1 };
            x = basic_block(&mut g, &format!("s{}b{}", s + 1, k + 1), x, w, stride);
        }
    }
    let gap = g.op("gap", LayerKind::GlobalAvgPool, &[x]);
    let flat = g.op("flatten", LayerKind::Flatten, &[gap]);
    g.linear("fc", Some(flat), classes, true);
    g.finish(classes)
}

/// Three residual stages of two basic blocks each (8/16/32 channels).
pub fn res_mini(classes: usize, seed: u64) -> ModelGraph {
    resnet("res-mini", [8, 16, 32], 2, classes, seed)
}

fn inception_block(g: &mut GraphBuilder, p: &str, x: usize, w: [usize; 6]) -> usize {
    let cba = |g: &mut GraphBuilder, name: &str, from: usize, out: usize, k: usize| {
        let c = g.conv(&format!("{p}_{name}"), Some(from), out, k, 1, k / 2, false);
        let b = g.bn(&format!("{p}_{name}_bn"), c);
        g.op(&format!("{p}_{name}_relu"), LayerKind::Relu, &[b])
    };
    let b1 = cba(g, "b1", x, w[0], 1);
    let b2r = cba(g, "b2_reduce", x, w[1], 1);
    let b2 = cba(g, "b2", b2r, w[2], 3);
    let b3r = cba(g, "b3_reduce", x, w[3], 1);
    let b3 = cba(g, "b3", b3r, w[4], 3);
    let b4 = cba(g, "b4", x, w[5], 3);
    g.op(&format!("{p}_concat"), LayerKind::Concat, &[b1, b2, b3, b4])
}

/// Stem plus two four-branch concat blocks: exercises Offset edges.
pub fn incep_mini(classes: usize, seed: u64) -> ModelGraph {
    let mut g = GraphBuilder::new("incep-mini", [3, 32, 32], seed);
    let stem = g.conv("stem", None, 16, 3, 1, 1, false);
    let b = g.bn("stem_bn", stem);
    let r = g.op("stem_relu", LayerKind::Relu, &[b]);
    let p = g.op("pool1", LayerKind::MaxPool { kernel: 2, stride: 2 }, &[r]);
    let a = inception_block(&mut g, "a", p, [8, 6, 8, 4, 4, 4]);
    let p2 = g.op("pool2", LayerKind::MaxPool { kernel: 2, stride: 2 }, &[a]);
    let bb = inception_block(&mut g, "b", p2, [12, 8, 12, 4, 8, 8]);
    let gap = g.op("gap", LayerKind::GlobalAvgPool, &[bb]);
    let flat = g.op("flatten", LayerKind::Flatten, &[gap]);
    g.linear("fc", Some(flat), classes, true);
    g.finish(classes)
}

/// One squeeze-and-excitation block gating a conv trunk: exercises Mul coupling.
pub fn se_mini(classes: usize, seed: u64) -> ModelGraph {
    let mut g = GraphBuilder::new("se-mini", [3, 32, 32], seed);
    let stem = g.conv("stem", None, 16, 3, 1, 1, false);
    let sb = g.bn("stem_bn", stem);
    let sr = g.op("stem_relu", LayerKind::Relu, &[sb]);
    let sp = g.op("pool1", LayerKind::MaxPool { kernel: 2, stride: 2 }, &[sr]);
    let cb = g.conv("conv_b", Some(sp), 16, 3, 1, 1, false);
    let bb = g.bn("conv_b_bn", cb);
    let x = g.op("conv_b_relu", LayerKind::Relu, &[bb]);
    let squeeze = g.op("se_pool", LayerKind::GlobalAvgPool, &[x]);
    let red = g.conv("se_reduce", Some(squeeze), 4, 1, 1, 0, true);
    let rr = g.op("se_relu", LayerKind::Relu, &[red]);
    let exp = g.conv("se_expand", Some(rr), 16, 1, 1, 0, true);
    let gate = g.op("se_gate", LayerKind::Sigmoid, &[exp]);
    let m = g.op("se_scale", LayerKind::Mul, &[x, gate]);
    let p = g.op("pool2", LayerKind::MaxPool { kernel: 2, stride: 2 }, &[m]);
    let c3 = g.conv("conv3", Some(p), 32, 3, 1, 1, false);
    let b3 = g.bn("conv3_bn", c3);
    let h3 = g.op("conv3_hswish", LayerKind::HardSwish, &[b3]);
    let gap = g.op("gap", LayerKind::GlobalAvgPool, &[h3]);
    let flat = g.op("flatten", LayerKind::Flatten, &[gap]);
    g.linear("fc", Some(flat), classes, true);
    g.finish(classes)
}

/// VGG-19 (configuration E, batchnorm) with a 512-4096-4096-classes head.
pub fn vgg19(classes: usize, seed: u64) -> ModelGraph {
    let mut g = GraphBuilder::new("vgg19", [3, 32, 32], seed);
    let cfg = [
        64, 64, 0, 128, 128, 0, 256, 256, 256, 256, 0, 512, 512, 512, 512, 0, 512, 512, 512, 512, 0,
    ];
    let mut x: Option<usize> = None;
    let (mut ci, mut pi) = (1, 1);
    for c in cfg {
        if c == 0 {
            x = Some(g.op(
                &format!("pool{pi}"),
                LayerKind::MaxPool { kernel: 2, stride: 2 },
                &[x.expect("conv first")],
            ));
            pi += 1;
        } else {
            let conv = g.conv(&format!("conv{ci}"), x, c, 3, 1, 1, true);
            let bn = g.bn(&format!("bn{ci}"), conv);
            x = Some(g.op(&format!("relu{ci}"), LayerKind::Relu, &[bn]));
            ci += 1;
        }
    }
    let flat = g.op("flatten", LayerKind::Flatten, &[x.expect("body")]);
    let fc1 = g.linear("fc1", Some(flat), 4096, true);
    let r1 = g.op("relu_fc1", LayerKind::Relu, &[fc1]);
    let fc2 = g.linear("fc2", Some(r1), 4096, true);
    let r2 = g.op("relu_fc2", LayerKind::Relu, &[fc2]);
    g.linear("fc3", Some(r2), classes, true);
    g.finish(classes)
}

/// ResNet-56 for 32×32 inputs: 3 stages × 9 basic blocks, projection shortcuts.
pub fn resnet56(classes: usize, seed: u64) -> ModelGraph {
    resnet("resnet56", [16, 32, 64], 9, classes, seed)
}

pub const FIXTURES: [&str; 4] = ["vgg-mini", "res-mini", "incep-mini", "se-mini"];

pub fn by_name(name: &str, classes: usize, seed: u64) -> Result<ModelGraph> {
    Ok(match name {
        "vgg-mini" => vgg_mini(classes, seed),
        "res-mini" => res_mini(classes, seed),
        "incep-mini" => incep_mini(classes, seed),
        "se-mini" => se_mini(classes, seed),
        "vgg19" => vgg19(classes, seed),
        "resnet56" => resnet56(classes, seed),
        other => {
            return Err(Error::Config(format!(
                "unknown architecture `{other}` (expected one of vgg-mini, res-mini, incep-mini, se-mini, vgg19, resnet56)"
            )))
        }
    })
}
