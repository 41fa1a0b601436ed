//! Taylor channel scoring, integer budget apportionment, and
//! dependency-respecting channel removal.

use std::collections::{BTreeMap, BTreeSet};

use crate::dependency::Analysis;
use crate::error::{Error, Result};
use crate::graph::ModelGraph;
use crate::layer::{LayerKind, Mode};
use crate::loss::cross_entropy;
use crate::tensor::Tensor;

/// Default number of calibration samples.
pub const CALIBRATION_SIZE: usize = 100;

/// Channels every group keeps.
pub const MIN_CHANNELS: usize = 1;

#[derive(Clone, Debug)]
pub struct CalibrationSet {
    pub images: Tensor,
    pub labels: Vec<usize>,
}

impl CalibrationSet {
    pub fn new(images: Tensor, labels: Vec<usize>) -> Result<Self> {
        if labels.is_empty() || images.rank() != 4 || images.shape()[0] != labels.len() {
            return Err(Error::Config(format!(
                "calibration set needs a non-empty [B,C,H,W] batch with B labels, got {:?} and {} labels",
                images.shape(),
                labels.len()
            )));
        }
        Ok(Self { images, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ChannelScore {
    pub group: usize,
    pub channel: usize,
    pub score: f64,
}

/// Per-group channel importance `|Σ g·w|` over each output row (weights and
/// bias), summed over the group's members.
///
/// Gradients come from one cross-entropy pass over the calibration batch with
/// BatchNorm in inference mode. In training mode the batch normalization makes
/// the loss invariant to the scale of each preceding row, which drives `Σ g·w`
/// to zero for every conv channel.
pub fn taylor_scores(model: &ModelGraph, calib: &CalibrationSet, analysis: &Analysis) -> Result<Vec<ChannelScore>> {
    if calib.is_empty() {
        return Err(Error::Config("empty calibration set".into()));
    }
    let (logits, tape) = model.run_forward(&calib.images, Mode::Eval)?;
    let loss = cross_entropy(&logits, &calib.labels)?;
    let grads = model.backward(&tape, &loss)?;

    let mut out = Vec::new();
    for group in &analysis.groups.groups {
        let mut acc = vec![0.0f64; group.channels];
        for &m in &group.members {
            let node = &model.nodes[m];
            let g = &grads.params[m];
            let w = node.params.weight.as_ref().expect("prunable layer has weights");
            let gw = g.weight.as_ref().expect("gradient for prunable layer");
            let row = w.len() / group.channels;
            for (k, a) in acc.iter_mut().enumerate() {
                let mut s: f64 = w.data()[k * row..(k + 1) * row]
                    .iter()
                    .zip(&gw[k * row..(k + 1) * row])
                    .map(|(&w, &g)| w as f64 * g as f64)
                    .sum();
                if let (Some(b), Some(gb)) = (node.params.bias.as_ref(), g.bias.as_ref()) {
                    s += b.data()[k] as f64 * gb[k] as f64;
                }
                *a += s.abs();
            }
        }
        out.extend(acc.into_iter().enumerate().map(|(channel, score)| ChannelScore {
            group: group.id,
            channel,
            score,
        }));
    }
    Ok(out)
}

/// Channel indices of `group` ordered least important first; ties go to the lower index.
pub fn ranked_channels(scores: &[ChannelScore], group: usize) -> Vec<usize> {
    let mut g: Vec<&ChannelScore> = scores.iter().filter(|s| s.group == group).collect();
    g.sort_by(|a, b| a.score.total_cmp(&b.score).then(a.channel.cmp(&b.channel)));
    g.into_iter().map(|s| s.channel).collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Allocation {
    pub counts: Vec<usize>,
    /// Budget units that could not be placed because every group hit its floor.
    pub shortfall: usize,
}

/// Largest-remainder apportionment of `budget` channels by `action` mass,
/// capped at `live − MIN_CHANNELS` per group.
///
/// Groups whose proportional quota exceeds their cap are fixed at the cap and
/// the remainder is reapportioned over the rest. Remainder ties go to the
/// lower group index.
pub fn allocate_prune_counts(action: &[f64], budget: usize, live: &[usize]) -> Result<Allocation> {
    if action.len() != live.len() {
        return Err(Error::Input(format!(
            "action has {} entries for {} groups",
            action.len(),
            live.len()
        )));
    }
    let n = live.len();
    let caps: Vec<usize> = live.iter().map(|&l| l.saturating_sub(MIN_CHANNELS)).collect();
    let room: usize = caps.iter().sum();
    if budget == 0 {
        return Ok(Allocation {
            counts: vec![0; n],
            shortfall: 0,
        });
    }
    if room == 0 {
        return Err(Error::BudgetUnplaceable { budget });
    }
    let placed = budget.min(room);
    let mass: Vec<f64> = action.iter().map(|&a| if a.is_finite() { a.max(0.0) } else { 0.0 }).collect();

    let mut fixed: Vec<Option<usize>> = caps.iter().map(|&c| (c == 0).then_some(0)).collect();
    let quotas = loop {
        let remaining = (placed - fixed.iter().flatten().sum::<usize>()) as f64;
        let total: f64 = (0..n).filter(|&g| fixed[g].is_none()).map(|g| mass[g]).sum();
        let quotas: Vec<f64> = (0..n)
            .map(|g| match fixed[g] {
                Some(c) => c as f64,
                None if total > 0.0 => remaining * mass[g] / total,
                None => 0.0,
            })
            .collect();
        let over: Vec<usize> = (0..n)
            .filter(|&g| fixed[g].is_none() && quotas[g] > caps[g] as f64)
            .collect();
        if over.is_empty() {
            break quotas;
        }
        for g in over {
            fixed[g] = Some(caps[g]);
        }
    };

    let mut counts: Vec<usize> = quotas
        .iter()
        .zip(&caps)
        .map(|(&q, &c)| (q.floor() as usize).min(c))
        .collect();
    let mut left = placed - counts.iter().sum::<usize>();
    let round = |x: f64| (x * 1e9).round() / 1e9;
    let mut order: Vec<usize> = (0..n).filter(|&g| fixed[g].is_none()).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (round(quotas[a] - quotas[a].floor()), round(quotas[b] - quotas[b].floor()));
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    // zero-mass groups can still absorb leftovers, after everyone else
    order.extend((0..n).filter(|&g| fixed[g].is_some() && counts[g] < caps[g]));
    while left > 0 {
        let before = left;
        for &g in &order {
            if left == 0 {
                break;
            }
            if counts[g] < caps[g] {
                counts[g] += 1;
                left -= 1;
            }
        }
        if left == before {
            break;
        }
    }
    Ok(Allocation {
        counts,
        shortfall: budget - placed + left,
    })
}

/// Removal plan: group id → channel indices to remove.
pub type PrunePlan = BTreeMap<usize, Vec<usize>>;

/// Remove the planned channels from every member of each group, together
/// with the consumer input columns and BatchNorm entries they feed.
pub fn apply_pruning(model: &ModelGraph, analysis: &Analysis, plan: &PrunePlan) -> Result<ModelGraph> {
    let mut rows: BTreeMap<usize, BTreeSet<usize>> = BTreeMap::new();
    let mut cols: BTreeMap<usize, BTreeSet<usize>> = BTreeMap::new();
    for (&gid, channels) in plan {
        if channels.is_empty() {
            continue;
        }
        let group = analysis
            .groups
            .groups
            .get(gid)
            .ok_or_else(|| Error::PruneRefused(format!("no group {gid}")))?;
        if group.pinned {
            let names: Vec<&str> = group.members.iter().map(|&m| model.nodes[m].name.as_str()).collect();
            return Err(Error::PruneRefused(format!(
                "group {gid} {names:?} feeds the classifier output"
            )));
        }
        let set: BTreeSet<usize> = channels.iter().copied().collect();
        if let Some(&bad) = set.iter().find(|&&k| k >= group.channels) {
            return Err(Error::PruneRefused(format!(
                "channel {bad} not live in group {gid} ({} channels)",
                group.channels
            )));
        }
        if set.len() >= group.channels {
            return Err(Error::PruneRefused(format!(
                "group {gid} would be pruned to zero channels"
            )));
        }
        for &m in &group.members {
            rows.entry(m).or_default().extend(&set);
        }
        for e in analysis.graph.edges_from(&group.members) {
            let c = cols.entry(e.consumer).or_default();
            for &k in &set {
                c.extend(e.mapping.inputs_for(k));
            }
        }
    }

    let mut out = model.clone();
    for node in &mut out.nodes {
        let r = rows.get(&node.id);
        let c = cols.get(&node.id);
        if r.is_none() && c.is_none() {
            continue;
        }
        let empty = BTreeSet::new();
        let (r, c) = (r.unwrap_or(&empty), c.unwrap_or(&empty));
        match &mut node.kind {
            LayerKind::Conv2d {
                out_channels,
                in_channels,
                kernel,
                ..
            } => {
                let area = *kernel * *kernel;
                let w = node.params.weight.take().expect("validated");
                node.params.weight = Some(drop_rows_cols(&w, *out_channels, *in_channels, area, r, c)?);
                *out_channels -= r.len();
                *in_channels -= c.len();
            }
            LayerKind::Linear {
                out_features,
                in_features,
                ..
            } => {
                let w = node.params.weight.take().expect("validated");
                node.params.weight = Some(drop_rows_cols(&w, *out_features, *in_features, 1, r, c)?);
                *out_features -= r.len();
                *in_features -= c.len();
            }
            LayerKind::BatchNorm { channels, .. } => {
                for slot in [
                    &mut node.params.gamma,
                    &mut node.params.beta,
                    &mut node.params.running_mean,
                    &mut node.params.running_var,
                ] {
                    let t = slot.take().expect("validated");
                    *slot = Some(drop_entries(&t, c)?);
                }
                *channels -= c.len();
            }
            other => {
                return Err(Error::Inconsistent(format!(
                    "{} ({}) cannot lose channels",
                    node.name,
                    other.op_name()
                )))
            }
        }
        if let Some(b) = node.params.bias.take() {
            node.params.bias = Some(drop_entries(&b, r)?);
        }
    }
    out.validate()?;
    Ok(out)
}

fn drop_entries(t: &Tensor, drop: &BTreeSet<usize>) -> Result<Tensor> {
    let data: Vec<f32> = t
        .data()
        .iter()
        .enumerate()
        .filter(|(i, _)| !drop.contains(i))
        .map(|(_, &v)| v)
        .collect();
    Tensor::new(vec![data.len()], data)
}

fn drop_rows_cols(
    w: &Tensor,
    n_out: usize,
    n_in: usize,
    area: usize,
    rows: &BTreeSet<usize>,
    cols: &BTreeSet<usize>,
) -> Result<Tensor> {
    let keep_r: Vec<usize> = (0..n_out).filter(|i| !rows.contains(i)).collect();
    let keep_c: Vec<usize> = (0..n_in).filter(|i| !cols.contains(i)).collect();
    let mut data = Vec::with_capacity(keep_r.len() * keep_c.len() * area);
    for &o in &keep_r {
        for &i in &keep_c {
            let at = (o * n_in + i) * area;
            data.extend_from_slice(&w.data()[at..at + area]);
        }
    }
    let mut shape = w.shape().to_vec();
    shape[0] = keep_r.len();
    shape[1] = keep_c.len();
    Tensor::new(shape, data)
}

/// Prune `counts[g]` lowest-scoring channels from each group `g`.
pub fn prune_by_scores(
    model: &ModelGraph,
    analysis: &Analysis,
    scores: &[ChannelScore],
    counts: &BTreeMap<usize, usize>,
) -> Result<ModelGraph> {
    let plan: PrunePlan = counts
        .iter()
        .filter(|(_, &k)| k > 0)
        .map(|(&g, &k)| (g, ranked_channels(scores, g).into_iter().take(k).collect()))
        .collect();
    apply_pruning(model, analysis, &plan)
}

/// Fraction of the original searchable output channels (counted once per
/// group) that have been removed.
pub fn channel_sparsity(original: &Analysis, current: &Analysis) -> f64 {
    let total: usize = original.groups.searchable().map(|g| g.channels).sum();
    let live: usize = current.groups.searchable().map(|g| g.channels).sum();
    if total == 0 {
        return 0.0;
    }
    1.0 - live as f64 / total as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::zoo::GraphBuilder;

    #[test]
    fn uniform_action_splits_evenly() {
        let a = allocate_prune_counts(&[0.25; 4], 8, &[10; 4]).unwrap();
        assert_eq!(a.counts, vec![2, 2, 2, 2]);
        assert_eq!(a.shortfall, 0);
    }

    #[test]
    fn largest_remainder_example() {
        let a = allocate_prune_counts(&[0.5, 0.3, 0.2], 5, &[10, 10, 10]).unwrap();
        assert_eq!(a.counts, vec![3, 1, 1]);
    }

    #[test]
    fn floor_group_gets_nothing() {
        let a = allocate_prune_counts(&[0.8, 0.1, 0.1], 4, &[1, 10, 10]).unwrap();
        assert_eq!(a.counts[0], 0);
        assert_eq!(a.counts.iter().sum::<usize>(), 4);
    }

    #[test]
    fn saturation_reports_shortfall() {
        let a = allocate_prune_counts(&[0.5, 0.5], 10, &[3, 4]).unwrap();
        assert_eq!(a.counts, vec![2, 3]);
        assert_eq!(a.shortfall, 5);
        assert!(matches!(
            allocate_prune_counts(&[0.5, 0.5], 1, &[1, 1]),
            Err(Error::BudgetUnplaceable { budget: 1 })
        ));
    }

    fn flatten_model() -> ModelGraph {
        let mut g = GraphBuilder::new("flat", [3, 4, 4], 3);
        let c = g.conv("conv", None, 8, 3, 1, 1, true);
        let f = g.op("flat", LayerKind::Flatten, &[c]);
        let h = g.linear("hidden", Some(f), 6, true);
        g.linear("fc", Some(h), 3, true);
        g.finish(3)
    }

    #[test]
    fn flatten_block_columns_removed() {
        let m = flatten_model();
        let a = Analysis::of(&m).unwrap();
        let gid = a.groups.group_of(m.id_of("conv").unwrap()).unwrap();
        let p = apply_pruning(&m, &a, &PrunePlan::from([(gid, vec![3])])).unwrap();
        let before = m.node_by_name("hidden").unwrap().params.weight.clone().unwrap();
        let after = p.node_by_name("hidden").unwrap().params.weight.clone().unwrap();
        assert_eq!(after.shape(), &[6, 112]);
        for o in 0..6 {
            let mut want: Vec<f32> = before.data()[o * 128..o * 128 + 48].to_vec();
            want.extend_from_slice(&before.data()[o * 128 + 64..(o + 1) * 128]);
            assert_eq!(&after.data()[o * 112..(o + 1) * 112], want.as_slice());
        }
    }

    #[test]
    fn classifier_and_zero_width_refused() {
        let m = flatten_model();
        let a = Analysis::of(&m).unwrap();
        let fc = a.groups.group_of(m.id_of("fc").unwrap()).unwrap();
        assert!(matches!(
            apply_pruning(&m, &a, &PrunePlan::from([(fc, vec![0])])),
            Err(Error::PruneRefused(_))
        ));
        let h = a.groups.group_of(m.id_of("hidden").unwrap()).unwrap();
        assert!(matches!(
            apply_pruning(&m, &a, &PrunePlan::from([(h, (0..6).collect())])),
            Err(Error::PruneRefused(_))
        ));
    }

    #[test]
    fn zero_weight_channel_scores_zero() {
        let mut m = flatten_model();
        let id = m.id_of("conv").unwrap();
        let p = &mut m.nodes[id].params;
        p.weight.as_mut().unwrap().data_mut()[2 * 27..3 * 27].fill(0.0);
        p.bias.as_mut().unwrap().data_mut()[2] = 0.0;
        let a = Analysis::of(&m).unwrap();
        let images = Tensor::full(&[4, 3, 4, 4], 0.3);
        let calib = CalibrationSet::new(images, vec![0, 1, 2, 0]).unwrap();
        let s = taylor_scores(&m, &calib, &a).unwrap();
        let gid = a.groups.group_of(id).unwrap();
        let zero = s.iter().find(|s| s.group == gid && s.channel == 2).unwrap();
        assert_eq!(zero.score, 0.0);
        assert_eq!(ranked_channels(&s, gid)[0], 2);
    }

    #[test]
    fn empty_calibration_rejected() {
        assert!(matches!(
            CalibrationSet::new(Tensor::zeros(&[1, 3, 4, 4]), vec![]),
            Err(Error::Config(_))
        ));
    }
}
