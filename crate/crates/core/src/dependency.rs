//! Inter-layer channel dependencies recovered from an execution trace.
//!
//! A single seeded example input is pushed through the model. Every tensor
//! gets an id; each consumer's input is matched to its producer by id, and
//! the channel layout of every tensor is tracked as a list of [`Segment`]s
//! naming the prunable layers whose output channels it carries. Concat
//! offsets are located by slicing the traced values. Add and Mul junctions
//! couple the producers on either side; coupled layers are pruned together.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::graph::ModelGraph;
use crate::layer::{LayerKind, Mode};
use crate::tensor::Tensor;

/// Tensor id of the model input in every trace.
pub const INPUT_TENSOR: usize = 0;

/// Seed of the default tracing input.
pub const TRACE_SEED: u64 = 0x7261_6365;

#[derive(Clone, Debug)]
pub struct TraceEntry {
    pub node: usize,
    pub inputs: Vec<usize>,
    pub output: usize,
    pub value: Tensor,
}

#[derive(Clone, Debug)]
pub struct Trace {
    pub input: Tensor,
    pub entries: Vec<TraceEntry>,
}

impl Trace {
    fn value_of(&self, tensor: usize) -> Option<&Tensor> {
        if tensor == INPUT_TENSOR {
            return Some(&self.input);
        }
        self.entries
            .iter()
            .find(|e| e.output == tensor)
            .map(|e| &e.value)
    }
}

/// Batch-of-one input drawn from uniform(-1, 1).
pub fn example_input(model: &ModelGraph, seed: u64) -> Tensor {
    let [c, h, w] = model.input_shape;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..c * h * w).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    Tensor::from_parts(vec![1, c, h, w], data)
}

/// Run `model` on `example` and record, per node, its input and output tensor ids.
pub fn trace_execution(model: &ModelGraph, example: &Tensor) -> Result<Trace> {
    let (_, tape) = model.run_forward(example, Mode::Eval)?;
    let entries = model
        .nodes
        .iter()
        .zip(tape.outputs)
        .map(|(node, value)| TraceEntry {
            node: node.id,
            inputs: if node.inputs.is_empty() {
                vec![INPUT_TENSOR]
            } else {
                node.inputs.iter().map(|&i| i + 1).collect()
            },
            output: node.id + 1,
            value,
        })
        .collect();
    Ok(Trace {
        input: example.clone(),
        entries,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(tag = "map", rename_all = "snake_case")]
pub enum ChannelMap {
    /// `DG(k) = [k]`
    Identity,
    /// `DG(k) = [start + k]`
    Offset { start: usize },
    /// `DG(k) = [start + k·area, start + (k+1)·area)`
    FlattenBlock { area: usize, start: usize },
}

impl ChannelMap {
    /// Consumer input positions fed by producer channel `k`.
    pub fn inputs_for(&self, k: usize) -> Range<usize> {
        match *self {
            ChannelMap::Identity => k..k + 1,
            ChannelMap::Offset { start } => start + k..start + k + 1,
            ChannelMap::FlattenBlock { area, start } => start + k * area..start + (k + 1) * area,
        }
    }

    /// All consumer positions covered when the producer has `channels` outputs.
    pub fn span(&self, channels: usize) -> Range<usize> {
        self.inputs_for(0).start..self.inputs_for(channels - 1).end
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct DependencyEdge {
    pub producer: usize,
    pub consumer: usize,
    pub mapping: ChannelMap,
    /// Producer output channels carried by this edge.
    pub channels: usize,
}

/// Producers joined at an Add or Mul node; their output channels must be pruned together.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct Coupling {
    pub a: usize,
    pub b: usize,
    pub via: usize,
}

#[derive(Clone, Debug, Default)]
pub struct DependencyGraph {
    /// Edges into prunable consumers.
    pub edges: Vec<DependencyEdge>,
    /// Edges into BatchNorm nodes whose per-channel state follows the producer.
    pub attached: Vec<DependencyEdge>,
    pub couplings: Vec<Coupling>,
    /// Consumer input ranges read straight from the model input.
    pub input_ranges: Vec<(usize, Range<usize>)>,
    /// Producers that must keep every channel: they reach the model output
    /// or are added to the raw model input.
    pub pinned: BTreeSet<usize>,
}

/// A contiguous run along axis 1 of a traced tensor.
#[derive(Clone, Debug, PartialEq, Eq)]
struct Segment {
    start: usize,
    channels: usize,
    /// Axis-1 positions per producer channel (>1 only after flattening).
    area: usize,
    flattened: bool,
    /// Prunable producers whose channels occupy this run; empty for the model input.
    producers: BTreeSet<usize>,
}

impl Segment {
    fn end(&self) -> usize {
        self.start + self.channels * self.area
    }
}

pub fn build_dependency_graph(trace: &Trace, model: &ModelGraph) -> Result<DependencyGraph> {
    let mut layout: HashMap<usize, Vec<Segment>> = HashMap::new();
    layout.insert(
        INPUT_TENSOR,
        vec![Segment {
            start: 0,
            channels: trace.input.shape()[1],
            area: 1,
            flattened: false,
            producers: BTreeSet::new(),
        }],
    );
    let mut dg = DependencyGraph::default();

    for entry in &trace.entries {
        let node = model.nodes.get(entry.node).ok_or_else(|| {
            Error::Inconsistent(format!("trace names node {} not in model", entry.node))
        })?;
        let mut ins: Vec<&Vec<Segment>> = Vec::with_capacity(entry.inputs.len());
        for &t in &entry.inputs {
            ins.push(layout.get(&t).ok_or_else(|| Error::UnresolvedDependency {
                node: node.id,
                name: node.name.clone(),
                tensor: t,
            })?);
        }
        let out: Vec<Segment> = match &node.kind {
            LayerKind::Conv2d { out_channels: n_out, in_channels: n_in, .. }
            | LayerKind::Linear { out_features: n_out, in_features: n_in, .. } => {
                emit_edges(&mut dg.edges, &mut dg.input_ranges, ins[0], node.id, *n_in);
                vec![Segment {
                    start: 0,
                    channels: *n_out,
                    area: 1,
                    flattened: false,
                    producers: BTreeSet::from([node.id]),
                }]
            }
            LayerKind::BatchNorm { channels, .. } => {
                let mut sink = Vec::new();
                emit_edges(&mut dg.attached, &mut sink, ins[0], node.id, *channels);
                ins[0].clone()
            }
            LayerKind::Relu
            | LayerKind::Sigmoid
            | LayerKind::HardSwish
            | LayerKind::MaxPool { .. }
            | LayerKind::AvgPool { .. }
            | LayerKind::GlobalAvgPool
            | LayerKind::Softmax => ins[0].clone(),
            LayerKind::Flatten => {
                let shape = trace
                    .value_of(entry.inputs[0])
                    .map(|t| t.shape().to_vec())
                    .ok_or_else(|| Error::UnresolvedDependency {
                        node: node.id,
                        name: node.name.clone(),
                        tensor: entry.inputs[0],
                    })?;
                let inner: usize = shape[2..].iter().product();
                ins[0]
                    .iter()
                    .map(|s| Segment {
                        start: s.start * inner,
                        area: s.area * inner,
                        flattened: true,
                        ..s.clone()
                    })
                    .collect()
            }
            LayerKind::Concat => {
                let offsets = locate_concat_operands(trace, entry, node.id, &node.name)?;
                ins.iter()
                    .zip(offsets)
                    .flat_map(|(segs, off)| {
                        segs.iter().map(move |s| Segment {
                            start: s.start + off,
                            ..s.clone()
                        })
                    })
                    .collect()
            }
            LayerKind::Add | LayerKind::Mul => couple(&mut dg, ins[0], ins[1], node.id),
        };
        layout.insert(entry.output, out);
    }

    let last = trace
        .entries
        .last()
        .ok_or_else(|| Error::Inconsistent("empty trace".into()))?;
    for s in &layout[&last.output] {
        dg.pinned.extend(s.producers.iter().copied());
    }
    dg.edges.sort();
    dg.attached.sort();
    dg.couplings.sort();
    dg.couplings.dedup();
    Ok(dg)
}

fn emit_edges(
    out: &mut Vec<DependencyEdge>,
    input_ranges: &mut Vec<(usize, Range<usize>)>,
    segs: &[Segment],
    consumer: usize,
    n_in: usize,
) {
    for s in segs {
        let Some(&producer) = s.producers.first() else {
            input_ranges.push((consumer, s.start..s.end()));
            continue;
        };
        let mapping = if s.flattened {
            ChannelMap::FlattenBlock {
                area: s.area,
                start: s.start,
            }
        } else if s.start == 0 && s.channels == n_in {
            ChannelMap::Identity
        } else {
            ChannelMap::Offset { start: s.start }
        };
        out.push(DependencyEdge {
            producer,
            consumer,
            mapping,
            channels: s.channels,
        });
    }
}

/// Find where each concat operand sits inside the concat output by bitwise slice comparison.
fn locate_concat_operands(trace: &Trace, entry: &TraceEntry, node: usize, name: &str) -> Result<Vec<usize>> {
    let unresolved = |tensor| Error::UnresolvedDependency {
        node,
        name: name.to_string(),
        tensor,
    };
    let out = &entry.value;
    let total = out.shape()[1];
    let inner: usize = out.shape()[2..].iter().product();
    let mut claimed = vec![false; total];
    let mut offsets = Vec::with_capacity(entry.inputs.len());
    for &t in &entry.inputs {
        let v = trace.value_of(t).ok_or_else(|| unresolved(t))?;
        let c = v.shape()[1];
        let found = (0..=total.saturating_sub(c)).find(|&i| {
            !claimed[i..i + c].iter().any(|&x| x)
                && (0..out.shape()[0]).all(|b| {
                    let o = &out.data()[(b * total + i) * inner..(b * total + i + c) * inner];
                    let s = &v.data()[b * c * inner..(b + 1) * c * inner];
                    o.iter().zip(s).all(|(x, y)| x.to_bits() == y.to_bits())
                })
        });
        let i = found.ok_or_else(|| unresolved(t))?;
        claimed[i..i + c].iter_mut().for_each(|x| *x = true);
        offsets.push(i);
    }
    Ok(offsets)
}

/// Merge the layouts of two operands of an elementwise junction.
fn couple(dg: &mut DependencyGraph, a: &[Segment], b: &[Segment], via: usize) -> Vec<Segment> {
    let mut cuts: BTreeSet<usize> = BTreeSet::new();
    for s in a.iter().chain(b) {
        cuts.insert(s.start);
        cuts.insert(s.end());
    }
    let cuts: Vec<usize> = cuts.into_iter().collect();
    let find = |segs: &[Segment], pos: usize| segs.iter().find(|s| s.start <= pos && pos < s.end()).cloned();
    let mut out: Vec<Segment> = Vec::new();
    for w in cuts.windows(2) {
        let (lo, hi) = (w[0], w[1]);
        let (Some(sa), Some(sb)) = (find(a, lo), find(b, lo)) else {
            continue;
        };
        let joined: BTreeSet<usize> = sa.producers.union(&sb.producers).copied().collect();
        if sa.producers.is_empty() || sb.producers.is_empty() {
            dg.pinned.extend(joined.iter().copied());
        }
        let list: Vec<usize> = joined.iter().copied().collect();
        for pair in list.windows(2) {
            dg.couplings.push(Coupling {
                a: pair[0],
                b: pair[1],
                via,
            });
        }
        let piece = Segment {
            start: lo,
            channels: (hi - lo) / sa.area.max(1),
            area: sa.area,
            flattened: sa.flattened,
            producers: joined,
        };
        // pieces of one aligned segment pair collapse back into one run
        match out.last_mut() {
            Some(prev) if prev.end() == lo && prev.producers == piece.producers && prev.area == piece.area => {
                prev.channels += piece.channels;
            }
            _ => out.push(piece),
        }
    }
    out
}

impl DependencyGraph {
    /// Every prunable consumer's inputs are covered exactly once by edges and
    /// model-input ranges.
    pub fn check_coverage(&self, model: &ModelGraph) -> Result<()> {
        for node in &model.nodes {
            let Some(n_in) = node.kind.in_channels() else {
                continue;
            };
            let mut hits = vec![0u8; n_in];
            let ranges = self
                .edges
                .iter()
                .filter(|e| e.consumer == node.id)
                .map(|e| e.mapping.span(e.channels))
                .chain(
                    self.input_ranges
                        .iter()
                        .filter(|(c, _)| *c == node.id)
                        .map(|(_, r)| r.clone()),
                );
            for r in ranges {
                if r.end > n_in {
                    return Err(Error::Inconsistent(format!(
                        "{}: edge range {r:?} exceeds {n_in} inputs",
                        node.name
                    )));
                }
                hits[r].iter_mut().for_each(|h| *h += 1);
            }
            if let Some(pos) = hits.iter().position(|&h| h != 1) {
                return Err(Error::Inconsistent(format!(
                    "{}: input position {pos} covered {} times",
                    node.name, hits[pos]
                )));
            }
        }
        Ok(())
    }

    /// Edges (prunable and BatchNorm consumers) leaving any of `producers`.
    pub fn edges_from<'a>(&'a self, producers: &'a [usize]) -> impl Iterator<Item = &'a DependencyEdge> + 'a {
        self.edges
            .iter()
            .chain(&self.attached)
            .filter(move |e| producers.contains(&e.producer))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CoupledGroup {
    pub id: usize,
    pub members: Vec<usize>,
    pub channels: usize,
    /// Pinned groups (the classifier, or anything tied to it) are never pruned.
    pub pinned: bool,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CoupledGroupSet {
    pub groups: Vec<CoupledGroup>,
    group_of: BTreeMap<usize, usize>,
}

impl CoupledGroupSet {
    pub fn group_of(&self, node: usize) -> Option<usize> {
        self.group_of.get(&node).copied()
    }

    pub fn searchable(&self) -> impl Iterator<Item = &CoupledGroup> {
        self.groups.iter().filter(|g| !g.pinned)
    }

    pub fn searchable_ids(&self) -> Vec<usize> {
        self.searchable().map(|g| g.id).collect()
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }
}

/// Union-find closure of the coupling constraints over all prunable layers.
pub fn partition_coupled_groups(dg: &DependencyGraph, model: &ModelGraph) -> Result<CoupledGroupSet> {
    let prunable = model.prunable_ids();
    let mut parent: BTreeMap<usize, usize> = prunable.iter().map(|&i| (i, i)).collect();
    fn root(parent: &mut BTreeMap<usize, usize>, mut x: usize) -> usize {
        while parent[&x] != x {
            let up = parent[&parent[&x]];
            parent.insert(x, up);
            x = up;
        }
        x
    }
    for c in &dg.couplings {
        if !parent.contains_key(&c.a) || !parent.contains_key(&c.b) {
            return Err(Error::Inconsistent(format!(
                "coupling {}–{} names a non-prunable node",
                c.a, c.b
            )));
        }
        let (ra, rb) = (root(&mut parent, c.a), root(&mut parent, c.b));
        if ra != rb {
            parent.insert(ra.max(rb), ra.min(rb));
        }
    }
    let mut by_root: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &p in &prunable {
        let r = root(&mut parent, p);
        by_root.entry(r).or_default().push(p);
    }
    let mut groups = Vec::with_capacity(by_root.len());
    let mut group_of = BTreeMap::new();
    for (id, (_, members)) in by_root.into_iter().enumerate() {
        let counts: BTreeSet<usize> = members
            .iter()
            .map(|&m| model.nodes[m].kind.out_channels().expect("prunable"))
            .collect();
        if counts.len() != 1 {
            let names: Vec<&str> = members.iter().map(|&m| model.nodes[m].name.as_str()).collect();
            return Err(Error::Inconsistent(format!(
                "coupled layers {names:?} have unequal output channels {counts:?}"
            )));
        }
        for &m in &members {
            group_of.insert(m, id);
        }
        groups.push(CoupledGroup {
            id,
            pinned: members.iter().any(|m| dg.pinned.contains(m)),
            channels: *counts.first().expect("non-empty"),
            members,
        });
    }
    Ok(CoupledGroupSet { groups, group_of })
}

/// Trace, build, and partition in one call, using the default seeded input.
#[derive(Clone, Debug)]
pub struct Analysis {
    pub graph: DependencyGraph,
    pub groups: CoupledGroupSet,
}

impl Analysis {
    pub fn of(model: &ModelGraph) -> Result<Self> {
        let trace = trace_execution(model, &example_input(model, TRACE_SEED))?;
        let graph = build_dependency_graph(&trace, model)?;
        let groups = partition_coupled_groups(&graph, model)?;
        Ok(Self { graph, groups })
    }
}

// ---------------------------------------------------------------------------
// report

#[derive(Debug, Serialize)]
pub struct EdgeReport {
    pub producer: String,
    pub consumer: String,
    #[serde(flatten)]
    pub mapping: ChannelMap,
    pub channels: usize,
}

#[derive(Debug, Serialize)]
pub struct GroupReport {
    pub id: usize,
    pub members: Vec<String>,
    pub channels: usize,
    pub pinned: bool,
}

#[derive(Debug, Serialize)]
pub struct TraceReport {
    pub model: String,
    pub edges: Vec<EdgeReport>,
    pub attached: Vec<EdgeReport>,
    pub couplings: Vec<(String, String)>,
    pub groups: Vec<GroupReport>,
}

impl TraceReport {
    pub fn new(model: &ModelGraph, analysis: &Analysis) -> Self {
        let name = |i: usize| model.nodes[i].name.clone();
        let edge = |e: &DependencyEdge| EdgeReport {
            producer: name(e.producer),
            consumer: name(e.consumer),
            mapping: e.mapping,
            channels: e.channels,
        };
        Self {
            model: model.name.clone(),
            edges: analysis.graph.edges.iter().map(edge).collect(),
            attached: analysis.graph.attached.iter().map(edge).collect(),
            couplings: analysis
                .graph
                .couplings
                .iter()
                .map(|c| (name(c.a), name(c.b)))
                .collect(),
            groups: analysis
                .groups
                .groups
                .iter()
                .map(|g| GroupReport {
                    id: g.id,
                    members: g.members.iter().map(|&m| name(m)).collect(),
                    channels: g.channels,
                    pinned: g.pinned,
                })
                .collect(),
        }
    }
}

impl TraceReport {
    /// Line-oriented summary: one `group` line per coupled group and one
    /// `edge` line per prunable-consumer edge, in analysis order.
    ///
    /// ```text
    /// group conv_b se_expand : 16
    /// group fc : 10 pinned
    /// edge a_b2 -> b_b1 offset 8 8
    /// edge conv8 -> fc1 flatten 4 0 32
    /// ```
    pub fn lines(&self) -> Vec<String> {
        let mut out: Vec<String> = self
            .groups
            .iter()
            .map(|g| {
                format!(
                    "group {} : {}{}",
                    g.members.join(" "),
                    g.channels,
                    if g.pinned { " pinned" } else { "" }
                )
            })
            .collect();
        for e in &self.edges {
            let map = match e.mapping {
                ChannelMap::Identity => "identity".to_string(),
                ChannelMap::Offset { start } => format!("offset {start}"),
                ChannelMap::FlattenBlock { area, start } => format!("flatten {area} {start}"),
            };
            out.push(format!("edge {} -> {} {map} {}", e.producer, e.consumer, e.channels));
        }
        out
    }
}
