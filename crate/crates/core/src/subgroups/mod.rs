//! Subgroup discovery: clusters of audit images, their accuracies and
//! confusion matrices, the half-of-overall-accuracy selection rule, and
//! nearest well-performing pairing.

mod cluster;

pub use cluster::{canonical_labels, cluster_features, ClusterConfig, Linkage};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{AuditError, Result};

/// The fields of one audited image that subgroup statistics need.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledPrediction {
    pub image_id: String,
    pub true_label: usize,
    pub predicted_label: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubgroupStatus {
    Underperforming,
    WellPerforming,
    Other,
}

impl std::str::FromStr for SubgroupStatus {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "underperforming" => Ok(SubgroupStatus::Underperforming),
            "well_performing" => Ok(SubgroupStatus::WellPerforming),
            "other" => Ok(SubgroupStatus::Other),
            _ => Err(format!("unknown subgroup status `{s}`")),
        }
    }
}

/// Rows are true labels, columns predicted labels.
pub type ConfusionMatrix = Vec<Vec<u64>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Subgroup {
    pub subgroup_id: usize,
    pub member_ids: Vec<String>,
    /// Correctly predicted members; `accuracy = correct / members`.
    pub correct: u64,
    pub accuracy: f64,
    /// Mean of the members' feature vectors.
    pub embedding: Vec<f64>,
    pub confusion: ConfusionMatrix,
    pub status: SubgroupStatus,
}

impl Subgroup {
    pub fn size(&self) -> usize {
        self.member_ids.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubgroupPairing {
    pub under_id: usize,
    pub well_id: usize,
    pub distance: f64,
}

/// Thresholds that turn accuracies into statuses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectionRule {
    /// A subgroup is well-performing when its accuracy is at least
    /// `overall - well_margin`.
    pub well_margin: f64,
    /// Subgroups smaller than this are always `other`.
    pub min_size: usize,
}

impl Default for SelectionRule {
    fn default() -> Self {
        SelectionRule {
            well_margin: 0.07,
            min_size: 5,
        }
    }
}

pub fn overall_accuracy(samples: &[LabeledPrediction]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    let correct = samples
        .iter()
        .filter(|s| s.true_label == s.predicted_label)
        .count();
    correct as f64 / samples.len() as f64
}

/// `matrix[t][p]` counts members with true label `t` predicted as `p`.
pub fn confusion_matrix<'a>(
    members: impl IntoIterator<Item = &'a LabeledPrediction>,
    num_classes: usize,
) -> ConfusionMatrix {
    let mut m = vec![vec![0u64; num_classes]; num_classes];
    for s in members {
        m[s.true_label][s.predicted_label] += 1;
    }
    m
}

pub fn trace(m: &ConfusionMatrix) -> u64 {
    m.iter().enumerate().map(|(i, row)| row[i]).sum()
}

/// Groups samples by cluster label. The result is sorted by ascending
/// accuracy, ties broken by subgroup id (the canonical cluster label). All
/// statuses start as `other`.
pub fn build_subgroups(
    assignment: &[usize],
    samples: &[LabeledPrediction],
    features: &[Vec<f64>],
    num_classes: usize,
) -> Result<Vec<Subgroup>> {
    if assignment.len() != samples.len() || samples.len() != features.len() {
        return Err(AuditError::RejectedInput(format!(
            "length mismatch: {} assignments, {} samples, {} feature rows",
            assignment.len(),
            samples.len(),
            features.len()
        )));
    }
    if let Some(s) = samples
        .iter()
        .find(|s| s.true_label >= num_classes || s.predicted_label >= num_classes)
    {
        return Err(AuditError::RejectedInput(format!(
            "image `{}` has a label outside {num_classes} classes",
            s.image_id
        )));
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &label) in assignment.iter().enumerate() {
        groups.entry(label).or_default().push(i);
    }
    let dim = features.first().map_or(0, Vec::len);
    let mut subgroups: Vec<Subgroup> = groups
        .into_iter()
        .map(|(id, rows)| {
            let confusion = confusion_matrix(rows.iter().map(|&i| &samples[i]), num_classes);
            let correct = trace(&confusion);
            let mut embedding = vec![0.0; dim];
            for &i in &rows {
                for (e, v) in embedding.iter_mut().zip(&features[i]) {
                    *e += v;
                }
            }
            embedding.iter_mut().for_each(|e| *e /= rows.len() as f64);
            Subgroup {
                subgroup_id: id,
                member_ids: rows.iter().map(|&i| samples[i].image_id.clone()).collect(),
                correct,
                accuracy: correct as f64 / rows.len() as f64,
                embedding,
                confusion,
                status: SubgroupStatus::Other,
            }
        })
        .collect();
    sort_by_accuracy(&mut subgroups);
    Ok(subgroups)
}

pub fn sort_by_accuracy(subgroups: &mut [Subgroup]) {
    subgroups.sort_by(|a, b| {
        a.accuracy
            .total_cmp(&b.accuracy)
            .then(a.subgroup_id.cmp(&b.subgroup_id))
    });
}

pub fn classify_status(
    accuracy: f64,
    size: usize,
    overall_accuracy: f64,
    rule: &SelectionRule,
) -> SubgroupStatus {
    if size < rule.min_size {
        SubgroupStatus::Other
    } else if accuracy < overall_accuracy / 2.0 {
        SubgroupStatus::Underperforming
    } else if accuracy >= overall_accuracy - rule.well_margin {
        SubgroupStatus::WellPerforming
    } else {
        SubgroupStatus::Other
    }
}

/// Underperforming: accuracy strictly below half the overall accuracy.
pub fn select_underperforming(
    subgroups: &mut [Subgroup],
    overall_accuracy: f64,
    rule: &SelectionRule,
) -> Result<()> {
    if !(overall_accuracy > 0.0 && overall_accuracy <= 1.0) {
        return Err(AuditError::Config(format!(
            "overall accuracy must lie in (0, 1], got {overall_accuracy}"
        )));
    }
    for s in subgroups.iter_mut() {
        s.status = classify_status(s.accuracy, s.size(), overall_accuracy, rule);
    }
    Ok(())
}

pub fn euclidean_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Nearest well-performing subgroup by embedding distance; ties go to the
/// lower subgroup id. `None` when no subgroup is well-performing.
pub fn pair_with_well_performing(
    target: &Subgroup,
    subgroups: &[Subgroup],
) -> Option<SubgroupPairing> {
    subgroups
        .iter()
        .filter(|s| s.status == SubgroupStatus::WellPerforming && s.subgroup_id != target.subgroup_id)
        .map(|s| (euclidean_distance(&target.embedding, &s.embedding), s.subgroup_id))
        .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
        .map(|(distance, well_id)| SubgroupPairing {
            under_id: target.subgroup_id,
            well_id,
            distance,
        })
}
