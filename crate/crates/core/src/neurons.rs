//! Highly activated neurons, per-subgroup activation scores, and the
//! three-column partition behind the threshold slider.

use std::collections::BTreeMap;

use ndarray::{Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{AuditError, Result};
use crate::model::{Classifier, NeuronRef};

pub const DEFAULT_TOP_RATE: f64 = 0.03;
pub const THRESHOLD_MIN: f64 = 0.5;
pub const THRESHOLD_MAX: f64 = 1.0;

/// Per-channel maximum over spatial positions. Negative maxima are kept.
pub fn channel_maxima(activation: &Array3<f64>) -> Vec<f64> {
    activation
        .axis_iter(Axis(0))
        .map(|ch| ch.iter().cloned().fold(f64::NEG_INFINITY, f64::max))
        .collect()
}

pub fn image_activation_values(
    model: &dyn Classifier,
    input: &Array3<f64>,
    layer_id: &str,
) -> Result<Vec<f64>> {
    let act = model
        .capture_activations(input, &[layer_id])?
        .pop()
        .expect("one layer requested");
    Ok(channel_maxima(&act.values))
}

/// Channels taken greedily in descending value (ties to the lower index)
/// until the running sum first exceeds `rate` times the layer total.
/// Negative values count as zero.
pub fn highly_activated_neurons(values: &[f64], rate: f64) -> Vec<usize> {
    let clamped: Vec<f64> = values.iter().map(|v| v.max(0.0)).collect();
    let total: f64 = clamped.iter().sum();
    if total <= 0.0 {
        return Vec::new();
    }
    let threshold = rate * total;
    let mut order: Vec<usize> = (0..clamped.len()).collect();
    order.sort_by(|&a, &b| clamped[b].total_cmp(&clamped[a]).then(a.cmp(&b)));
    let mut picked = Vec::new();
    let mut running = 0.0;
    for c in order {
        picked.push(c);
        running += clamped[c];
        if running > threshold {
            break;
        }
    }
    picked
}

/// Highly activated neurons of one image across all participating layers.
pub fn image_highly_activated(
    layer_values: &[(String, Vec<f64>)],
    rate: f64,
) -> Vec<NeuronRef> {
    layer_values
        .iter()
        .flat_map(|(layer, values)| {
            highly_activated_neurons(values, rate)
                .into_iter()
                .map(move |c| NeuronRef::new(layer.clone(), c))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeuronActivationScore {
    pub neuron: NeuronRef,
    pub subgroup_id: usize,
    /// Members having this neuron highly activated.
    pub count: u64,
    pub score: f64,
}

/// Scores every neuron that is highly activated for at least one member.
/// Output is ordered by neuron.
pub fn score_subgroup(
    subgroup_id: usize,
    member_sets: &[&[NeuronRef]],
) -> Vec<NeuronActivationScore> {
    let mut counts: BTreeMap<&NeuronRef, u64> = BTreeMap::new();
    for set in member_sets {
        let mut seen = std::collections::HashSet::new();
        for n in set.iter().filter(|n| seen.insert(*n)) {
            *counts.entry(n).or_default() += 1;
        }
    }
    let size = member_sets.len() as f64;
    counts
        .into_iter()
        .map(|(n, count)| NeuronActivationScore {
            neuron: n.clone(),
            subgroup_id,
            count,
            score: count as f64 / size,
        })
        .collect()
}

/// Runs the model over every member image and scores the given layers.
pub fn subgroup_scores(
    model: &dyn Classifier,
    subgroup_id: usize,
    members: &[Array3<f64>],
    layers: &[&str],
    rate: f64,
) -> Result<Vec<NeuronActivationScore>> {
    if members.is_empty() {
        return Err(AuditError::RejectedInput("subgroup has no members".into()));
    }
    let sets = members
        .iter()
        .map(|input| {
            let acts = model.capture_activations(input, layers)?;
            let values: Vec<(String, Vec<f64>)> = acts
                .into_iter()
                .map(|a| (a.layer_id, channel_maxima(&a.values)))
                .collect();
            Ok(image_highly_activated(&values, rate))
        })
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&[NeuronRef]> = sets.iter().map(Vec::as_slice).collect();
    Ok(score_subgroup(subgroup_id, &refs))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Column {
    UnderOnly,
    Both,
    WellOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionedNeuron {
    pub channel: usize,
    pub under_score: f64,
    pub well_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerGroup {
    pub layer: String,
    pub neurons: Vec<PartitionedNeuron>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeuronPartition {
    pub threshold: f64,
    pub under_only: Vec<LayerGroup>,
    pub both: Vec<LayerGroup>,
    pub well_only: Vec<LayerGroup>,
}

impl NeuronPartition {
    pub fn column(&self, c: Column) -> &[LayerGroup] {
        match c {
            Column::UnderOnly => &self.under_only,
            Column::Both => &self.both,
            Column::WellOnly => &self.well_only,
        }
    }

    pub fn neurons(&self, c: Column) -> impl Iterator<Item = NeuronRef> + '_ {
        self.column(c).iter().flat_map(|g| {
            g.neurons
                .iter()
                .map(move |n| NeuronRef::new(g.layer.clone(), n.channel))
        })
    }

    pub fn all_neurons(&self) -> Vec<NeuronRef> {
        [Column::UnderOnly, Column::Both, Column::WellOnly]
            .into_iter()
            .flat_map(|c| self.neurons(c).collect::<Vec<_>>())
            .collect()
    }
}

pub fn validate_threshold(threshold: f64) -> Result<()> {
    if !(THRESHOLD_MIN..=THRESHOLD_MAX).contains(&threshold) {
        return Err(AuditError::Validation(format!(
            "threshold {threshold} outside [{THRESHOLD_MIN}, {THRESHOLD_MAX}]"
        )));
    }
    Ok(())
}

/// Splits neurons into the three columns. Groups follow `layer_order`
/// (input to output); neurons inside a group are ordered by channel.
pub fn partition(
    under: &[NeuronActivationScore],
    well: &[NeuronActivationScore],
    threshold: f64,
    layer_order: &[String],
) -> Result<NeuronPartition> {
    validate_threshold(threshold)?;
    let mut joint: BTreeMap<NeuronRef, (f64, f64)> = BTreeMap::new();
    for s in under {
        joint.entry(s.neuron.clone()).or_default().0 = s.score;
    }
    for s in well {
        joint.entry(s.neuron.clone()).or_default().1 = s.score;
    }
    let mut columns: [BTreeMap<usize, Vec<PartitionedNeuron>>; 3] = Default::default();
    let rank = |layer: &str| layer_order.iter().position(|l| l == layer).unwrap_or(usize::MAX);
    let mut unknown_layers = Vec::new();
    for (n, (u, w)) in joint {
        let col = match (u >= threshold, w >= threshold) {
            (true, false) => 0,
            (true, true) => 1,
            (false, true) => 2,
            (false, false) => continue,
        };
        let r = rank(&n.layer);
        if r == usize::MAX {
            unknown_layers.push(n.layer.clone());
            continue;
        }
        columns[col].entry(r).or_default().push(PartitionedNeuron {
            channel: n.channel,
            under_score: u,
            well_score: w,
        });
    }
    if let Some(l) = unknown_layers.first() {
        return Err(AuditError::UnknownLayer(l.clone()));
    }
    let groups = |m: BTreeMap<usize, Vec<PartitionedNeuron>>| {
        m.into_iter()
            .map(|(r, mut neurons)| {
                neurons.sort_by_key(|n| n.channel);
                LayerGroup {
                    layer: layer_order[r].clone(),
                    neurons,
                }
            })
            .collect::<Vec<_>>()
    };
    let [a, b, c] = columns;
    Ok(NeuronPartition {
        threshold,
        under_only: groups(a),
        both: groups(b),
        well_only: groups(c),
    })
}
