//! The versioned output bundle of an audit run.
//!
//! One directory holds `manifest.json` plus the PNG assets and the embedder
//! checkpoint it references. The manifest is written with sorted keys and
//! every float rounded to six significant digits, so identical artifacts
//! produce identical bytes.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::{Component, Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{AuditError, Result};
use crate::model::{ModelManifest, NeuronRef};
use crate::neuron_clusters::NeuronCluster;
use crate::neurons::NeuronActivationScore;
use crate::patches::NeuronConcept;
use crate::subgroups::{Subgroup, SubgroupPairing};

pub const SCHEMA_VERSION: u64 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageEntry {
    pub image_id: String,
    pub true_label: usize,
    pub predicted_label: usize,
    pub scores: Vec<f64>,
    #[serde(default)]
    pub attributes: BTreeMap<String, bool>,
    pub subgroup_id: Option<usize>,
    pub thumbnail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaliencyEntry {
    pub image_id: String,
    pub target_class: usize,
    pub predicted: bool,
    pub height: usize,
    pub width: usize,
    /// Raw map at layer resolution, base64 little-endian `f32`.
    pub heatmap: String,
    pub overlay: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaliencyIndex {
    pub layer_id: String,
    pub colormap: String,
    pub alpha: f64,
    /// Overlays are upsampled to input resolution; stored heatmaps are not.
    pub overlay_upsampled: bool,
    pub entries: Vec<SaliencyEntry>,
}

impl Default for SaliencyIndex {
    fn default() -> Self {
        SaliencyIndex {
            layer_id: String::new(),
            colormap: crate::saliency::COLORMAP_NAME.into(),
            alpha: crate::saliency::OVERLAY_ALPHA,
            overlay_upsampled: true,
            entries: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairingScores {
    pub under_id: usize,
    pub well_id: usize,
    pub under: Vec<NeuronActivationScore>,
    pub well: Vec<NeuronActivationScore>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedderSummary {
    pub checkpoint: String,
    pub dim: usize,
    pub positive_pairs: usize,
    pub negative_pairs: usize,
    /// Entry 0 before training, then one entry per epoch.
    pub loss_curve: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssetLayout {
    pub manifest: String,
    pub saliency_dir: String,
    pub patches_dir: String,
    pub thumbnails_dir: String,
    pub embedder_checkpoint: String,
}

impl Default for AssetLayout {
    fn default() -> Self {
        AssetLayout {
            manifest: MANIFEST_FILE.into(),
            saliency_dir: "saliency".into(),
            patches_dir: "patches".into(),
            thumbnails_dir: "thumbnails".into(),
            embedder_checkpoint: "embedder.ckpt".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditArtifact {
    pub schema_version: u64,
    /// Every knob of the run, seeds included.
    pub run_config: Value,
    pub model: ModelManifest,
    pub overall_accuracy: f64,
    pub images: Vec<ImageEntry>,
    pub subgroups: Vec<Subgroup>,
    pub pairings: Vec<SubgroupPairing>,
    pub saliency: SaliencyIndex,
    pub neuron_scores: Vec<PairingScores>,
    pub concepts: Vec<NeuronConcept>,
    pub clusters: Vec<NeuronCluster>,
    pub embedder: Option<EmbedderSummary>,
    pub notices: Vec<String>,
    pub layout: AssetLayout,
}

impl AuditArtifact {
    pub fn empty(model: ModelManifest, run_config: Value) -> Self {
        AuditArtifact {
            schema_version: SCHEMA_VERSION,
            run_config,
            saliency: SaliencyIndex {
                layer_id: model.saliency_layer.clone(),
                ..SaliencyIndex::default()
            },
            model,
            overall_accuracy: 0.0,
            images: Vec::new(),
            subgroups: Vec::new(),
            pairings: Vec::new(),
            neuron_scores: Vec::new(),
            concepts: Vec::new(),
            clusters: Vec::new(),
            embedder: None,
            notices: Vec::new(),
            layout: AssetLayout::default(),
        }
    }

    pub fn image(&self, id: &str) -> Option<&ImageEntry> {
        self.images.iter().find(|i| i.image_id == id)
    }

    pub fn subgroup(&self, id: usize) -> Option<&Subgroup> {
        self.subgroups.iter().find(|s| s.subgroup_id == id)
    }

    pub fn pairing_for(&self, under_id: usize) -> Option<&SubgroupPairing> {
        self.pairings.iter().find(|p| p.under_id == under_id)
    }

    pub fn scores_for(&self, under_id: usize) -> Option<&PairingScores> {
        self.neuron_scores.iter().find(|p| p.under_id == under_id)
    }

    pub fn concept(&self, neuron: &NeuronRef) -> Option<&NeuronConcept> {
        self.concepts.iter().find(|c| &c.neuron == neuron)
    }

    /// Every asset path referenced by the manifest.
    pub fn asset_paths(&self) -> Vec<&str> {
        let mut out: Vec<&str> = self.images.iter().map(|i| i.thumbnail.as_str()).collect();
        out.extend(self.saliency.entries.iter().map(|e| e.overlay.as_str()));
        out.extend(
            self.concepts
                .iter()
                .flat_map(|c| c.patches.iter().map(|p| p.asset.as_str())),
        );
        if let Some(e) = &self.embedder {
            out.push(e.checkpoint.as_str());
        }
        out
    }

    /// The artifact as it will read back after a save: floats rounded.
    pub fn canonicalized(&self) -> Result<Self> {
        Ok(serde_json::from_value(canonical_value(self)?)?)
    }
}

fn dangling(msg: String) -> AuditError {
    AuditError::DanglingReference(msg)
}

/// Checks that every cross-reference resolves inside the artifact. The first
/// problem found is reported.
pub fn validate(a: &AuditArtifact) -> Result<()> {
    if a.schema_version != SCHEMA_VERSION {
        return Err(AuditError::SchemaVersion {
            found: a.schema_version,
            supported: SCHEMA_VERSION,
        });
    }
    a.model.validate()?;
    let n_classes = a.model.class_names.len();

    let mut image_ids = HashSet::new();
    for img in &a.images {
        if !image_ids.insert(img.image_id.as_str()) {
            return Err(AuditError::DuplicateId(format!("image `{}`", img.image_id)));
        }
        if img.true_label >= n_classes || img.predicted_label >= n_classes {
            return Err(AuditError::Validation(format!(
                "image `{}` has a label outside the class list",
                img.image_id
            )));
        }
    }
    let mut subgroup_ids = HashSet::new();
    for sg in &a.subgroups {
        if !subgroup_ids.insert(sg.subgroup_id) {
            return Err(AuditError::DuplicateId(format!("subgroup {}", sg.subgroup_id)));
        }
        for m in &sg.member_ids {
            if !image_ids.contains(m.as_str()) {
                return Err(dangling(format!(
                    "subgroup {} lists unknown image `{m}`",
                    sg.subgroup_id
                )));
            }
        }
    }
    for img in &a.images {
        if let Some(s) = img.subgroup_id {
            if !subgroup_ids.contains(&s) {
                return Err(dangling(format!(
                    "image `{}` points at unknown subgroup {s}",
                    img.image_id
                )));
            }
        }
    }
    for p in &a.pairings {
        for id in [p.under_id, p.well_id] {
            if !subgroup_ids.contains(&id) {
                return Err(dangling(format!("pairing references unknown subgroup {id}")));
            }
        }
    }
    for e in &a.saliency.entries {
        if !image_ids.contains(e.image_id.as_str()) {
            return Err(dangling(format!("saliency for unknown image `{}`", e.image_id)));
        }
        if e.target_class >= n_classes {
            return Err(AuditError::Validation(format!(
                "saliency target class {} out of range",
                e.target_class
            )));
        }
    }
    let check_neuron = |n: &NeuronRef, what: &str| {
        if a.model.contains(n) {
            Ok(())
        } else {
            Err(dangling(format!("{what} references unknown neuron {n}")))
        }
    };
    for ps in &a.neuron_scores {
        if !a.pairings.iter().any(|p| p.under_id == ps.under_id && p.well_id == ps.well_id) {
            return Err(dangling(format!(
                "neuron scores for unknown pairing {} -> {}",
                ps.under_id, ps.well_id
            )));
        }
        for (side, scores) in [(ps.under_id, &ps.under), (ps.well_id, &ps.well)] {
            for s in scores {
                if s.subgroup_id != side {
                    return Err(dangling(format!(
                        "score for neuron {} names subgroup {} inside pairing side {side}",
                        s.neuron, s.subgroup_id
                    )));
                }
                check_neuron(&s.neuron, "activation score")?;
            }
        }
    }
    let mut concept_neurons = HashSet::new();
    let mut patch_ids: HashSet<&str> = HashSet::new();
    for c in &a.concepts {
        check_neuron(&c.neuron, "concept")?;
        if !concept_neurons.insert(&c.neuron) {
            return Err(AuditError::DuplicateId(format!("concept for neuron {}", c.neuron)));
        }
        let mut own = HashSet::new();
        for p in &c.patches {
            if !own.insert(p.patch_id.as_str()) {
                return Err(AuditError::DuplicateId(format!(
                    "patch `{}` twice in neuron {}",
                    p.patch_id, c.neuron
                )));
            }
            if !image_ids.contains(p.source_image_id.as_str()) {
                return Err(dangling(format!(
                    "patch `{}` cut from unknown image `{}`",
                    p.patch_id, p.source_image_id
                )));
            }
            patch_ids.insert(p.patch_id.as_str());
        }
    }
    let mut cluster_ids = HashSet::new();
    let mut clustered = HashSet::new();
    for cl in &a.clusters {
        if !cluster_ids.insert(cl.cluster_id) {
            return Err(AuditError::DuplicateId(format!("cluster {}", cl.cluster_id)));
        }
        if cl.member_neurons.is_empty() {
            return Err(AuditError::Validation(format!("cluster {} is empty", cl.cluster_id)));
        }
        for n in &cl.member_neurons {
            if !concept_neurons.contains(n) {
                return Err(dangling(format!(
                    "cluster {} member {n} has no concept",
                    cl.cluster_id
                )));
            }
            if !clustered.insert(n) {
                return Err(AuditError::DuplicateId(format!("neuron {n} in two clusters")));
            }
        }
        for p in &cl.exemplar_patch_ids {
            if !patch_ids.contains(p.as_str()) {
                return Err(dangling(format!(
                    "cluster {} exemplar `{p}` is not a concept patch",
                    cl.cluster_id
                )));
            }
        }
    }
    for p in a.asset_paths() {
        check_relative(p)?;
    }
    Ok(())
}

fn check_relative(p: &str) -> Result<()> {
    let path = Path::new(p);
    let ok = !p.is_empty() && path.components().all(|c| matches!(c, Component::Normal(_)));
    if ok {
        Ok(())
    } else {
        Err(AuditError::Validation(format!("asset path `{p}` must be relative and plain")))
    }
}

/// Checks that every referenced asset exists under `dir`.
pub fn validate_assets(a: &AuditArtifact, dir: &Path) -> Result<()> {
    for c in &a.concepts {
        for p in &c.patches {
            if !dir.join(&p.asset).is_file() {
                return Err(dangling(format!("patch `{}` asset missing: {}", p.patch_id, p.asset)));
            }
        }
    }
    for p in a.asset_paths() {
        if !dir.join(p).is_file() {
            return Err(dangling(format!("asset missing: {p}")));
        }
    }
    Ok(())
}

fn round6(v: f64) -> f64 {
    if v == 0.0 {
        return 0.0;
    }
    format!("{v:.5e}").parse().expect("formatted float parses")
}

fn round_floats(v: &mut Value) -> Result<()> {
    match v {
        Value::Number(n) if n.is_f64() => {
            let f = n.as_f64().expect("f64");
            *v = serde_json::Number::from_f64(round6(f))
                .map(Value::Number)
                .ok_or_else(|| AuditError::Validation(format!("non-finite value {f}")))?;
        }
        Value::Array(items) => {
            for i in items {
                round_floats(i)?;
            }
        }
        Value::Object(map) => {
            for (_, i) in map.iter_mut() {
                round_floats(i)?;
            }
        }
        _ => {}
    }
    Ok(())
}

fn canonical_value(a: &AuditArtifact) -> Result<Value> {
    let finite = a.overall_accuracy.is_finite()
        && a.images.iter().all(|i| i.scores.iter().all(|s| s.is_finite()))
        && a.subgroups
            .iter()
            .all(|s| s.accuracy.is_finite() && s.embedding.iter().all(|v| v.is_finite()))
        && a.pairings.iter().all(|p| p.distance.is_finite())
        && a.concepts
            .iter()
            .all(|c| c.patches.iter().all(|p| p.activation.is_finite()))
        && a.embedder
            .as_ref()
            .is_none_or(|e| e.loss_curve.iter().all(|v| v.is_finite()));
    if !finite {
        return Err(AuditError::Validation("artifact contains a non-finite number".into()));
    }
    let mut v = serde_json::to_value(a)?;
    round_floats(&mut v)?;
    Ok(v)
}

/// Canonical manifest bytes: sorted keys, floats at six significant digits.
pub fn to_bytes(a: &AuditArtifact) -> Result<Vec<u8>> {
    let v = canonical_value(a)?;
    let mut out = serde_json::to_vec_pretty(&v)?;
    out.push(b'\n');
    Ok(out)
}

/// Validates, then writes `manifest.json` into `dir`. Assets must already be
/// in place. The write goes through a temporary file and a rename.
pub fn save(a: &AuditArtifact, dir: &Path) -> Result<PathBuf> {
    validate(a)?;
    validate_assets(a, dir)?;
    let bytes = to_bytes(a)?;
    std::fs::create_dir_all(dir).map_err(|e| AuditError::io(dir, e))?;
    let path = dir.join(MANIFEST_FILE);
    let tmp = dir.join(format!("{MANIFEST_FILE}.tmp"));
    std::fs::write(&tmp, &bytes).map_err(|e| AuditError::io(&tmp, e))?;
    std::fs::rename(&tmp, &path).map_err(|e| AuditError::io(&path, e))?;
    Ok(path)
}

/// Parses manifest bytes. Checks the schema version before the structure.
pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<AuditArtifact> {
    let parse_err = |e: serde_json::Error| AuditError::Parse {
        path: origin.to_path_buf(),
        message: e.to_string(),
    };
    let v: Value = serde_json::from_slice(bytes).map_err(parse_err)?;
    let found = v
        .get("schema_version")
        .and_then(Value::as_u64)
        .ok_or_else(|| AuditError::Parse {
            path: origin.to_path_buf(),
            message: "missing or non-integer schema_version".into(),
        })?;
    if found != SCHEMA_VERSION {
        return Err(AuditError::SchemaVersion {
            found,
            supported: SCHEMA_VERSION,
        });
    }
    let a: AuditArtifact = serde_json::from_value(v).map_err(parse_err)?;
    validate(&a)?;
    Ok(a)
}

/// Loads and fully validates an artifact. `path` may be the manifest file or
/// the directory holding it.
pub fn load(path: &Path) -> Result<AuditArtifact> {
    let manifest = if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    };
    let bytes = std::fs::read(&manifest).map_err(|e| AuditError::io(&manifest, e))?;
    let a = from_bytes(&bytes, &manifest)?;
    let dir = manifest.parent().unwrap_or(Path::new("."));
    validate_assets(&a, dir)?;
    Ok(a)
}

/// Distinct neurons with a concept, in artifact order.
pub fn concept_neurons(a: &AuditArtifact) -> BTreeSet<&NeuronRef> {
    a.concepts.iter().map(|c| &c.neuron).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn six_significant_digits() {
        assert_eq!(round6(0.123456789), 0.123457);
        assert_eq!(round6(123456.789), 123457.0);
        assert_eq!(round6(-2.5e-9), -2.5e-9);
        assert_eq!(round6(round6(1.0 / 3.0)), round6(1.0 / 3.0));
    }

    #[test]
    fn relative_paths_only() {
        assert!(check_relative("patches/a/b.png").is_ok());
        assert!(check_relative("../x.png").is_err());
        assert!(check_relative("/etc/passwd").is_err());
        assert!(check_relative("").is_err());
    }
}
