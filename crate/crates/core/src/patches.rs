//! Concept patches: square crops of a neuron's top-activating images that
//! activate the neuron most strongly when fed to the model on their own.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use image::RgbImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{AuditError, Result};
use crate::model::{Classifier, NeuronRef, Preprocessing};
use crate::neurons::channel_maxima;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PatchConfig {
    pub top_images: usize,
    pub masks_per_image: usize,
    pub patch_size: usize,
    pub min_separation: usize,
    pub patches_per_neuron: usize,
    pub retry_cap: usize,
    pub seed: u64,
}

impl Default for PatchConfig {
    fn default() -> Self {
        PatchConfig {
            top_images: 10,
            masks_per_image: 32,
            patch_size: 30,
            min_separation: 5,
            patches_per_neuron: 10,
            retry_cap: 1000,
            seed: 0,
        }
    }
}

/// A square in preprocessed-input pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PatchBox {
    pub top: usize,
    pub left: usize,
    pub size: usize,
}

impl PatchBox {
    pub fn fits(&self, height: usize, width: usize) -> bool {
        self.top + self.size <= height && self.left + self.size <= width
    }
}

/// Gap between the edges of two squares along one axis (negative if they overlap).
fn axis_gap(a_start: usize, a_len: usize, b_start: usize, b_len: usize) -> i64 {
    let (a0, a1) = (a_start as i64, (a_start + a_len) as i64);
    let (b0, b1) = (b_start as i64, (b_start + b_len) as i64);
    (b0 - a1).max(a0 - b1)
}

/// Two boxes are separated when their edge gap is at least `min_gap` along
/// at least one axis.
pub fn separated(a: &PatchBox, b: &PatchBox, min_gap: usize) -> bool {
    let gx = axis_gap(a.left, a.size, b.left, b.size);
    let gy = axis_gap(a.top, a.size, b.top, b.size);
    gx >= min_gap as i64 || gy >= min_gap as i64
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskSample {
    pub boxes: Vec<PatchBox>,
    pub requested: usize,
    pub attempts: usize,
}

/// Seeded rejection sampling of up to `count` mutually separated boxes.
pub fn sample_masks(
    height: usize,
    width: usize,
    count: usize,
    size: usize,
    min_separation: usize,
    seed: u64,
    retry_cap: usize,
) -> Result<MaskSample> {
    if size == 0 || height < size || width < size {
        return Err(AuditError::RejectedInput(format!(
            "{height}x{width} image cannot hold a {size}px patch"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut boxes: Vec<PatchBox> = Vec::with_capacity(count);
    let mut attempts = 0;
    while boxes.len() < count && attempts < retry_cap {
        attempts += 1;
        let candidate = PatchBox {
            top: rng.random_range(0..=height - size),
            left: rng.random_range(0..=width - size),
            size,
        };
        if boxes.iter().all(|b| separated(b, &candidate, min_separation)) {
            boxes.push(candidate);
        }
    }
    Ok(MaskSample {
        boxes,
        requested: count,
        attempts,
    })
}

pub fn crop(img: &RgbImage, b: &PatchBox) -> RgbImage {
    image::imageops::crop_imm(img, b.left as u32, b.top as u32, b.size as u32, b.size as u32)
        .to_image()
}

/// Per-layer channel maxima induced by a patch fed to the model on its own.
pub fn patch_activation(
    model: &dyn Classifier,
    preprocessing: &Preprocessing,
    patch: &RgbImage,
) -> Result<Vec<(String, Vec<f64>)>> {
    let input = preprocessing.to_tensor(patch);
    let pass = model.forward_all(&input)?;
    Ok(pass
        .activations
        .into_iter()
        .map(|a| (a.layer_id, channel_maxima(&a.values)))
        .collect())
}

/// The `k` images with the largest activation; ties by image id.
pub fn top_activating_images(values: &[(&str, f64)], k: usize) -> Vec<String> {
    let mut v: Vec<&(&str, f64)> = values.iter().collect();
    v.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(b.0)));
    v.into_iter().take(k).map(|(id, _)| id.to_string()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptPatch {
    pub patch_id: String,
    pub source_image_id: String,
    #[serde(flatten)]
    pub bbox: PatchBox,
    /// Activation induced in the owning neuron.
    pub activation: f64,
    /// Relative path of the thumbnail inside the artifact directory.
    pub asset: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeuronConcept {
    pub neuron: NeuronRef,
    /// Descending by activation, ties by patch id.
    pub patches: Vec<ConceptPatch>,
}

/// Keeps the `k` strongest candidates, ties broken by patch id.
pub fn select_top_patches(mut candidates: Vec<ConceptPatch>, k: usize) -> Vec<ConceptPatch> {
    candidates.sort_by(|a, b| {
        b.activation
            .total_cmp(&a.activation)
            .then_with(|| a.patch_id.cmp(&b.patch_id))
    });
    candidates.truncate(k);
    candidates
}

pub fn patch_asset_path(neuron: &NeuronRef, patch_id: &str) -> String {
    format!("patches/{}/{}.png", neuron.key(), patch_id)
}

/// Per-image mask seed derived from the run seed and the image id.
pub fn image_seed(seed: u64, image_id: &str) -> u64 {
    // FNV-1a
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in image_id.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h ^ seed.rotate_left(17)
}

/// Per-image activation maxima for every layer, used to rank images per neuron.
#[derive(Debug, Clone, Default)]
pub struct ActivationIndex {
    pub image_ids: Vec<String>,
    /// `layers[layer][image][channel]`.
    pub layers: BTreeMap<String, Vec<Vec<f64>>>,
}

impl ActivationIndex {
    pub fn neuron_values(&self, neuron: &NeuronRef) -> Option<Vec<(&str, f64)>> {
        let rows = self.layers.get(&neuron.layer)?;
        rows.iter()
            .zip(&self.image_ids)
            .map(|(row, id)| row.get(neuron.channel).map(|v| (id.as_str(), *v)))
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct Candidate {
    pub patch_id: String,
    pub source_image_id: String,
    pub bbox: PatchBox,
    pub pixels: RgbImage,
    pub layer_values: HashMap<String, Vec<f64>>,
}

#[derive(Debug, Default)]
pub struct ConceptBuild {
    pub concepts: Vec<NeuronConcept>,
    /// Pixels of every retained patch, keyed by patch id.
    pub pixels: BTreeMap<String, RgbImage>,
    pub warnings: Vec<String>,
}

/// For each neuron: its top images, up to `masks_per_image` separated crops per
/// image, and the `patches_per_neuron` crops that activate it most.
/// `image_for` returns an image already resized to the model's input resolution.
pub fn build_neuron_concepts<F>(
    model: &dyn Classifier,
    neurons: &[NeuronRef],
    index: &ActivationIndex,
    image_for: F,
    config: &PatchConfig,
) -> Result<ConceptBuild>
where
    F: Fn(&str) -> Result<RgbImage> + Sync,
{
    let manifest = model.manifest();
    let preprocessing = &manifest.preprocessing;
    let mut build = ConceptBuild::default();

    let mut tops: Vec<(NeuronRef, Vec<String>)> = Vec::with_capacity(neurons.len());
    for n in neurons {
        let values = index.neuron_values(n).ok_or_else(|| {
            AuditError::DanglingReference(format!("neuron {n} missing from activation index"))
        })?;
        tops.push((n.clone(), top_activating_images(&values, config.top_images)));
    }
    let images: BTreeSet<&str> = tops.iter().flat_map(|(_, ids)| ids.iter().map(String::as_str)).collect();

    let per_image: Vec<(String, Result<Vec<Candidate>>)> = images
        .into_par_iter()
        .map(|id| (id.to_string(), candidates_for_image(model, preprocessing, id, &image_for, config)))
        .collect();
    let mut candidates: HashMap<String, Vec<Candidate>> = HashMap::new();
    for (id, res) in per_image {
        match res {
            Ok(c) => {
                candidates.insert(id, c);
            }
            Err(AuditError::RejectedInput(msg)) => {
                build.warnings.push(format!("image `{id}` skipped for concept patches: {msg}"));
            }
            Err(e) => return Err(e),
        }
    }

    for (neuron, ids) in tops {
        let pool: Vec<ConceptPatch> = ids
            .iter()
            .filter_map(|id| candidates.get(id))
            .flatten()
            .map(|c| ConceptPatch {
                patch_id: c.patch_id.clone(),
                source_image_id: c.source_image_id.clone(),
                bbox: c.bbox,
                activation: c.layer_values[&neuron.layer][neuron.channel],
                asset: patch_asset_path(&neuron, &c.patch_id),
            })
            .collect();
        if pool.is_empty() {
            build
                .warnings
                .push(format!("neuron {neuron} has no candidate patches"));
        }
        let patches = select_top_patches(pool, config.patches_per_neuron);
        for p in &patches {
            if !build.pixels.contains_key(&p.patch_id) {
                let c = candidates[&p.source_image_id]
                    .iter()
                    .find(|c| c.patch_id == p.patch_id)
                    .expect("candidate exists");
                build.pixels.insert(p.patch_id.clone(), c.pixels.clone());
            }
        }
        build.concepts.push(NeuronConcept { neuron, patches });
    }
    Ok(build)
}

fn candidates_for_image<F>(
    model: &dyn Classifier,
    preprocessing: &Preprocessing,
    image_id: &str,
    image_for: &F,
    config: &PatchConfig,
) -> Result<Vec<Candidate>>
where
    F: Fn(&str) -> Result<RgbImage>,
{
    let img = image_for(image_id)?;
    let masks = sample_masks(
        img.height() as usize,
        img.width() as usize,
        config.masks_per_image,
        config.patch_size,
        config.min_separation,
        image_seed(config.seed, image_id),
        config.retry_cap,
    )?;
    masks
        .boxes
        .into_iter()
        .map(|b| {
            let pixels = crop(&img, &b);
            let layer_values = patch_activation(model, preprocessing, &pixels)?
                .into_iter()
                .collect();
            Ok(Candidate {
                patch_id: format!("{image_id}_{}_{}", b.top, b.left),
                source_image_id: image_id.to_string(),
                bbox: b,
                pixels,
                layer_values,
            })
        })
        .collect()
}
