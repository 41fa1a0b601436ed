//! The `rlpmodel-v1` file pair: a JSON manifest plus a little-endian f32 blob.
//! Field names are documented in `docs/format.md`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::graph::{LayerNode, ModelGraph};
use crate::layer::{LayerKind, Params, PARAM_NAMES};
use crate::tensor::Tensor;

pub const FORMAT: &str = "rlpmodel-v1";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    name: String,
    version: u32,
    input_shape: [usize; 3],
    class_count: usize,
    output: usize,
    blob_bytes: usize,
    nodes: Vec<NodeEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NodeEntry {
    id: usize,
    name: String,
    op: String,
    attrs: BTreeMap<String, Value>,
    inputs: Vec<usize>,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the blob.
    offset: usize,
    /// Element count.
    len: usize,
}

fn attrs_of(kind: &LayerKind) -> BTreeMap<String, Value> {
    let mut a = BTreeMap::new();
    let mut put = |k: &str, v: Value| {
        a.insert(k.to_string(), v);
    };
    match *kind {
        LayerKind::Conv2d {
            out_channels,
            in_channels,
            kernel,
            stride,
            padding,
            bias,
        } => {
            put("out_channels", out_channels.into());
            put("in_channels", in_channels.into());
            put("kernel", kernel.into());
            put("stride", stride.into());
            put("padding", padding.into());
            put("bias", bias.into());
        }
        LayerKind::Linear {
            out_features,
            in_features,
            bias,
        } => {
            put("out_features", out_features.into());
            put("in_features", in_features.into());
            put("bias", bias.into());
        }
        LayerKind::BatchNorm {
            channels,
            eps,
            momentum,
        } => {
            put("channels", channels.into());
            put("eps", (eps as f64).into());
            put("momentum", (momentum as f64).into());
        }
        LayerKind::MaxPool { kernel, stride } | LayerKind::AvgPool { kernel, stride } => {
            put("kernel", kernel.into());
            put("stride", stride.into());
        }
        _ => {}
    }
    a
}

/// Serialize to `(manifest, blob)`. Byte-stable for identical models.
pub fn serialize(model: &ModelGraph) -> Result<(Vec<u8>, Vec<u8>)> {
    model.validate()?;
    let mut blob = Vec::new();
    let mut nodes = Vec::with_capacity(model.nodes.len());
    for node in &model.nodes {
        let mut tensors = Vec::new();
        for (name, t) in node.params.named() {
            tensors.push(TensorEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                offset: blob.len(),
                len: t.len(),
            });
            for v in t.data() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
        nodes.push(NodeEntry {
            id: node.id,
            name: node.name.clone(),
            op: node.kind.op_name().to_string(),
            attrs: attrs_of(&node.kind),
            inputs: node.inputs.clone(),
            tensors,
        });
    }
    let manifest = Manifest {
        format: FORMAT.to_string(),
        name: model.name.clone(),
        version: model.version,
        input_shape: model.input_shape,
        class_count: model.class_count,
        output: model.output_id().expect("validated"),
        blob_bytes: blob.len(),
        nodes,
    };
    let mut text = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    text.push(b'\n');
    Ok((text, blob))
}

fn offset_of(text: &[u8], line: usize, column: usize) -> usize {
    let mut off = 0;
    for (i, l) in text.split(|&b| b == b'\n').enumerate() {
        if i + 1 == line {
            return off + column.saturating_sub(1);
        }
        off += l.len() + 1;
    }
    text.len()
}

fn find(text: &[u8], needle: &str) -> usize {
    text.windows(needle.len())
        .position(|w| w == needle.as_bytes())
        .unwrap_or(0)
}

fn kind_of(entry: &NodeEntry, text: &[u8]) -> Result<LayerKind> {
    let at = find(text, &format!("\"name\": \"{}\"", entry.name));
    let attr = |k: &str| -> Result<&Value> {
        entry.attrs.get(k).ok_or_else(|| Error::Parse {
            offset: at,
            detail: format!("node `{}` ({}) lacks attribute `{k}`", entry.name, entry.op),
        })
    };
    let num = |k: &str| -> Result<usize> {
        attr(k)?.as_u64().map(|v| v as usize).ok_or_else(|| Error::Parse {
            offset: at,
            detail: format!("node `{}`: `{k}` must be a non-negative integer", entry.name),
        })
    };
    let real = |k: &str| -> Result<f32> {
        attr(k)?.as_f64().map(|v| v as f32).ok_or_else(|| Error::Parse {
            offset: at,
            detail: format!("node `{}`: `{k}` must be a number", entry.name),
        })
    };
    let flag = |k: &str| -> Result<bool> {
        attr(k)?.as_bool().ok_or_else(|| Error::Parse {
            offset: at,
            detail: format!("node `{}`: `{k}` must be a boolean", entry.name),
        })
    };
    Ok(match entry.op.as_str() {
        "conv2d" => LayerKind::Conv2d {
            out_channels: num("out_channels")?,
            in_channels: num("in_channels")?,
            kernel: num("kernel")?,
            stride: num("stride")?,
            padding: num("padding")?,
            bias: flag("bias")?,
        },
        "linear" => LayerKind::Linear {
            out_features: num("out_features")?,
            in_features: num("in_features")?,
            bias: flag("bias")?,
        },
        "batch_norm" => LayerKind::BatchNorm {
            channels: num("channels")?,
            eps: real("eps")?,
            momentum: real("momentum")?,
        },
        "max_pool" => LayerKind::MaxPool {
            kernel: num("kernel")?,
            stride: num("stride")?,
        },
        "avg_pool" => LayerKind::AvgPool {
            kernel: num("kernel")?,
            stride: num("stride")?,
        },
        "relu" => LayerKind::Relu,
        "sigmoid" => LayerKind::Sigmoid,
        "hard_swish" => LayerKind::HardSwish,
        "global_avg_pool" => LayerKind::GlobalAvgPool,
        "flatten" => LayerKind::Flatten,
        "add" => LayerKind::Add,
        "mul" => LayerKind::Mul,
        "concat" => LayerKind::Concat,
        "softmax" => LayerKind::Softmax,
        other => {
            return Err(Error::UnsupportedKind {
                kind: other.to_string(),
                offset: find(text, &format!("\"op\": \"{other}\"")),
            })
        }
    })
}

pub fn deserialize(manifest: &[u8], blob: &[u8]) -> Result<ModelGraph> {
    let header: Value = serde_json::from_slice(manifest).map_err(|e| Error::Parse {
        offset: offset_of(manifest, e.line(), e.column()),
        detail: e.to_string(),
    })?;
    match header.get("format").and_then(Value::as_str) {
        Some(FORMAT) => {}
        found => {
            return Err(Error::Version {
                expected: FORMAT.into(),
                found: found.unwrap_or("<missing>").into(),
            })
        }
    }
    let m: Manifest = serde_json::from_value(header).map_err(|e| Error::Parse {
        offset: 0,
        detail: e.to_string(),
    })?;
    if blob.len() != m.blob_bytes {
        return Err(Error::BlobLength {
            expected: m.blob_bytes,
            actual: blob.len(),
        });
    }
    let mut nodes = Vec::with_capacity(m.nodes.len());
    for entry in &m.nodes {
        let kind = kind_of(entry, manifest)?;
        let mut params = Params::default();
        for t in &entry.tensors {
            let end = t.offset + 4 * t.len;
            if end > blob.len() {
                return Err(Error::BlobLength {
                    expected: end,
                    actual: blob.len(),
                });
            }
            let data: Vec<f32> = blob[t.offset..end]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            let slot = params.slot_mut(&t.name).ok_or_else(|| Error::Parse {
                offset: find(manifest, &format!("\"name\": \"{}\"", t.name)),
                detail: format!(
                    "node `{}`: unknown tensor `{}` (expected one of {PARAM_NAMES:?})",
                    entry.name, t.name
                ),
            })?;
            *slot = Some(Tensor::new(t.shape.clone(), data)?);
        }
        nodes.push(LayerNode::new(entry.id, entry.name.clone(), kind, entry.inputs.clone(), params));
    }
    let mut model = ModelGraph::new(m.name, m.input_shape, m.class_count, nodes);
    model.version = m.version;
    if model.output_id() != Some(m.output) {
        return Err(Error::Validation {
            nodes: vec![m.output],
            detail: "declared output is not the last node".into(),
        });
    }
    model.validate()?;
    Ok(model)
}

/// `(manifest, blob)` paths for a model stem, with or without `.rlpm`,
/// or either file's path.
pub fn model_paths(path: &Path) -> (PathBuf, PathBuf) {
    let s = path.to_string_lossy();
    let stem = s
        .strip_suffix(".rlpm.json")
        .or_else(|| s.strip_suffix(".rlpm.bin"))
        .or_else(|| s.strip_suffix(".rlpm"))
        .unwrap_or(&s);
    (PathBuf::from(format!("{stem}.rlpm.json")), PathBuf::from(format!("{stem}.rlpm.bin")))
}

pub fn save(model: &ModelGraph, path: &Path) -> Result<(PathBuf, PathBuf)> {
    let (mp, bp) = model_paths(path);
    let (manifest, blob) = serialize(model)?;
    if let Some(dir) = mp.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(&mp, manifest)?;
    fs::write(&bp, blob)?;
    Ok((mp, bp))
}

pub fn load(path: &Path) -> Result<ModelGraph> {
    let (mp, bp) = model_paths(path);
    deserialize(&fs::read(mp)?, &fs::read(bp)?)
}
