//! End-to-end audit run: predictions and features, subgroup discovery,
//! pairing, saliency, neuron scores, concept patches, embedder training,
//! neuron clustering, save.
//!
//! Each stage's result is cached under `<output>/cache/` keyed by a hash of
//! the config and the input files, so an interrupted run can resume.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::{Path, PathBuf};
use std::time::Instant;

use image::RgbImage;
use ndarray::Array3;
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::artifact::{
    self, AuditArtifact, EmbedderSummary, ImageEntry, PairingScores, SaliencyEntry,
};
use crate::dataset::{cooccurrence, load_dataset, BiasSpec, ImageRecord, Split};
use crate::error::{AuditError, Result};
use crate::model::{load_rgb, Classifier, Cnn, NeuronRef};
use crate::neuron_clusters::{
    assign_clusters, clustering_order, embed_all, sample_pairs, train_embedder, EmbedTrainConfig,
    Embedder, NeuronCluster, NeuronClusterConfig,
};
use crate::neurons::{image_highly_activated, score_subgroup, validate_threshold, DEFAULT_TOP_RATE};
use crate::patches::{build_neuron_concepts, crop, ActivationIndex, NeuronConcept, PatchConfig};
use crate::saliency::{encode_heatmap, grad_cam, render_overlay, OVERLAY_ALPHA};

use crate::subgroups::{
    build_subgroups, cluster_features, overall_accuracy, ClusterConfig, pair_with_well_performing, select_underperforming,
    sort_by_accuracy, LabeledPrediction, SelectionRule, Subgroup, SubgroupPairing,
    SubgroupStatus,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub model: PathBuf,
    pub dataset: PathBuf,
    pub output: PathBuf,
    pub split: Split,
    /// Echoed into the artifact; the measured training co-occurrence is
    /// reported as a notice.
    pub bias: Option<BiasSpec>,
    pub subgroup_clustering: ClusterConfig,
    pub selection: SelectionRule,
    pub top_rate: f64,
    pub slider_default: f64,
    /// Layers analysed for neuron scores; all capturable layers when empty.
    pub layers: Vec<String>,
    pub patches: PatchConfig,
    pub positive_pairs: usize,
    pub negative_pairs: usize,
    pub pair_seed: u64,
    pub embedder: EmbedTrainConfig,
    pub neuron_clustering: NeuronClusterConfig,
    /// Reuse cached stage results from a previous run with the same inputs.
    pub resume: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            model: PathBuf::new(),
            dataset: PathBuf::new(),
            output: PathBuf::new(),
            split: Split::Audit,
            bias: None,
            subgroup_clustering: ClusterConfig::default(),
            selection: SelectionRule::default(),
            top_rate: DEFAULT_TOP_RATE,
            slider_default: 0.5,
            layers: Vec::new(),
            patches: PatchConfig::default(),
            positive_pairs: 10_000,
            negative_pairs: 10_000,
            pair_seed: 0,
            embedder: EmbedTrainConfig::default(),
            neuron_clustering: NeuronClusterConfig::default(),
            resume: false,
        }
    }
}

impl PipelineConfig {
    /// Sets every seed from one value.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.subgroup_clustering.seed = seed;
        self.patches.seed = seed.wrapping_add(1);
        self.pair_seed = seed.wrapping_add(2);
        self.embedder.seed = seed.wrapping_add(3);
        self.neuron_clustering.seed = seed.wrapping_add(4);
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(AuditError::Config(m.to_string()));
        if self.model.as_os_str().is_empty() {
            return bad("model path is required");
        }
        if self.dataset.as_os_str().is_empty() {
            return bad("dataset manifest path is required");
        }
        if self.output.as_os_str().is_empty() {
            return bad("output directory is required");
        }
        if !(self.top_rate > 0.0 && self.top_rate <= 1.0) {
            return bad("top_rate must lie in (0, 1]");
        }
        validate_threshold(self.slider_default)
            .map_err(|e| AuditError::Config(format!("slider_default: {e}")))?;
        let p = &self.patches;
        if p.patch_size == 0 || p.masks_per_image == 0 || p.patches_per_neuron == 0 || p.top_images == 0 {
            return bad("patch counts and size must be positive");
        }
        if p.retry_cap == 0 {
            return bad("retry_cap must be positive");
        }
        if !(self.embedder.lr > 0.0) || self.embedder.batch_size == 0 {
            return bad("embedder lr and batch_size must be positive");
        }
        if self.embedder.weight_decay < 0.0 || self.embedder.momentum < 0.0 {
            return bad("embedder weight_decay and momentum must be non-negative");
        }
        let t = self.neuron_clustering.threshold;
        if !(t > -1.0 && t <= 1.0) {
            return bad("cluster threshold must lie in (-1, 1]");
        }
        if self.neuron_clustering.exemplars_per_cluster == 0 {
            return bad("exemplars_per_cluster must be positive");
        }
        if self.selection.well_margin < 0.0 {
            return bad("well_margin must be non-negative");
        }
        if self.subgroup_clustering.n_clusters == Some(0) {
            return bad("n_clusters must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub seconds: f64,
    pub cached: bool,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub manifest: PathBuf,
    pub artifact: AuditArtifact,
    pub timings: Vec<StageTiming>,
}

pub const RUN_LOG_FILE: &str = "run_log.json";

fn fnv(bytes: &[u8], mut h: u64) -> u64 {
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

struct Runner<'a> {
    cache_dir: PathBuf,
    key: String,
    resume: bool,
    timings: Vec<StageTiming>,
    notices: &'a mut Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct CacheEntry<T> {
    key: String,
    value: T,
    /// Notices the stage emitted, replayed on reuse.
    notices: Vec<String>,
}

impl Runner<'_> {
    fn run<T, F, C>(&mut self, name: &'static str, valid: C, compute: F) -> Result<T>
    where
        T: Serialize + DeserializeOwned,
        F: FnOnce(&mut Vec<String>) -> Result<T>,
        C: Fn(&T) -> bool,
    {
        let start = Instant::now();
        let path = self.cache_dir.join(format!("{name}.json"));
        if self.resume {
            if let Some(entry) = std::fs::read(&path)
                .ok()
                .and_then(|b| serde_json::from_slice::<CacheEntry<T>>(&b).ok())
            {
                if entry.key == self.key && valid(&entry.value) {
                    self.notices.extend(entry.notices);
                    log::info!("stage {name}: reused cached result");
                    self.timings.push(StageTiming {
                        stage: name.to_string(),
                        seconds: start.elapsed().as_secs_f64(),
                        cached: true,
                    });
                    return Ok(entry.value);
                }
            }
        }
        log::info!("stage {name}: running");
        let before = self.notices.len();
        let value = compute(self.notices).map_err(|e| e.in_stage(name))?;
        let entry = CacheEntry {
            key: self.key.clone(),
            value,
            notices: self.notices[before..].to_vec(),
        };
        let bytes = serde_json::to_vec(&entry)?;
        std::fs::write(&path, bytes).map_err(|e| AuditError::io(&path, e))?;
        self.timings.push(StageTiming {
            stage: name.to_string(),
            seconds: start.elapsed().as_secs_f64(),
            cached: false,
        });
        Ok(entry.value)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Predictions {
    samples: Vec<LabeledPrediction>,
    scores: Vec<Vec<f64>>,
    features: Vec<Vec<f64>>,
    /// `layers[layer][image][channel]` spatial maxima.
    layers: BTreeMap<String, Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Discovery {
    overall_accuracy: f64,
    assignment: Vec<usize>,
    subgroups: Vec<Subgroup>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Trained {
    summary: Option<EmbedderSummary>,
}

fn write_png(dir: &Path, rel: &str, img: &RgbImage) -> Result<()> {
    let path = dir.join(rel);
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| AuditError::io(parent, e))?;
    }
    img.save_with_format(&path, image::ImageFormat::Png)
        .map_err(|e| AuditError::Image {
            path: path.clone(),
            message: e.to_string(),
        })
}

fn all_exist(dir: &Path, rels: impl IntoIterator<Item = impl AsRef<Path>>) -> bool {
    rels.into_iter().all(|r| dir.join(r).is_file())
}

/// Runs the whole audit and saves the artifact under `config.output`.
pub fn run_audit(config: &PipelineConfig) -> Result<RunOutcome> {
    config.validate()?;
    let out = config.output.clone();
    let cache_dir = out.join("cache");
    std::fs::create_dir_all(&cache_dir).map_err(|e| AuditError::io(&cache_dir, e))?;

    let model = Cnn::load(&config.model)?;
    let manifest = model.manifest();
    manifest.validate()?;
    let layer_ids: Vec<String> = if config.layers.is_empty() {
        manifest.layers.iter().map(|l| l.id.clone()).collect()
    } else {
        for l in &config.layers {
            if manifest.layer(l).is_none() {
                return Err(AuditError::UnknownLayer(l.clone()));
            }
        }
        manifest
            .layers
            .iter()
            .filter(|l| config.layers.contains(&l.id))
            .map(|l| l.id.clone())
            .collect()
    };

    let loaded = load_dataset(&config.dataset, manifest.class_names.len())?;
    let mut notices: Vec<String> = loaded
        .errors
        .iter()
        .map(|e| format!("manifest line {}: {}", e.line, e.message))
        .collect();
    if let Some(spec) = &config.bias {
        let train: Vec<ImageRecord> = loaded
            .records
            .iter()
            .filter(|r| r.split == Split::Train)
            .cloned()
            .collect();
        match cooccurrence(&train, &spec.attribute, spec.label) {
            Some(c) => notices.push(format!(
                "training co-occurrence of `{}` with label {}: {c:.3} (target {})",
                spec.attribute, spec.label, spec.target_cooccurrence
            )),
            None => notices.push(format!(
                "no training images with label {} to measure `{}`",
                spec.label, spec.attribute
            )),
        }
    }
    let records: Vec<ImageRecord> = loaded
        .records
        .into_iter()
        .filter(|r| r.split == config.split)
        .collect();
    if records.is_empty() {
        return Err(AuditError::Validation(format!(
            "dataset has no usable `{}` images",
            config.split
        )));
    }

    let key = {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        let mut cfg = config.clone();
        cfg.resume = false;
        h = fnv(&serde_json::to_vec(&cfg)?, h);
        for p in [&config.model, &config.dataset] {
            h = fnv(&std::fs::read(p).map_err(|e| AuditError::io(p, e))?, h);
        }
        format!("{h:016x}")
    };
    let mut runner = Runner {
        cache_dir,
        key,
        resume: config.resume,
        timings: Vec::new(),
        notices: &mut notices,
    };

    let pre = &manifest.preprocessing;
    let load_start = Instant::now();
    let images: Vec<RgbImage> = records
        .par_iter()
        .map(|r| load_rgb(&r.path).map(|img| pre.resize(&img)))
        .collect::<Result<_>>()
        .map_err(|e| e.in_stage("load_images"))?;
    runner.timings.push(StageTiming {
        stage: "load_images".into(),
        seconds: load_start.elapsed().as_secs_f64(),
        cached: false,
    });
    let position: HashMap<&str, usize> = records
        .iter()
        .enumerate()
        .map(|(i, r)| (r.image_id.as_str(), i))
        .collect();
    let tensor = |i: usize| -> Array3<f64> { pre.to_tensor(&images[i]) };

    // Predictions, features and per-layer maxima.
    let predictions: Predictions = runner.run(
        "predictions",
        |p: &Predictions| p.samples.len() == records.len(),
        |_| {
            let passes = (0..records.len())
                .into_par_iter()
                .map(|i| model.forward_all(&tensor(i)))
                .collect::<Result<Vec<_>>>()?;
            let mut layers: BTreeMap<String, Vec<Vec<f64>>> = BTreeMap::new();
            let mut samples = Vec::new();
            let mut scores = Vec::new();
            let mut features = Vec::new();
            for (r, pass) in records.iter().zip(passes) {
                samples.push(LabeledPrediction {
                    image_id: r.image_id.clone(),
                    true_label: r.true_label,
                    predicted_label: pass.prediction.label,
                });
                scores.push(pass.prediction.scores);
                features.push(pass.features);
                for act in pass.activations {
                    if layer_ids.contains(&act.layer_id) {
                        layers
                            .entry(act.layer_id)
                            .or_default()
                            .push(crate::neurons::channel_maxima(&act.values));
                    }
                }
            }
            Ok(Predictions {
                samples,
                scores,
                features,
                layers,
            })
        },
    )?;

    // Subgroups.
    let discovery: Discovery = runner.run(
        "subgroups",
        |_| true,
        |_| {
            let overall = overall_accuracy(&predictions.samples);
            let assignment = cluster_features(&predictions.features, &config.subgroup_clustering)?;
            let mut subgroups = build_subgroups(
                &assignment,
                &predictions.samples,
                &predictions.features,
                manifest.class_names.len(),
            )?;
            select_underperforming(&mut subgroups, overall, &config.selection)?;
            sort_by_accuracy(&mut subgroups);
            Ok(Discovery {
                overall_accuracy: overall,
                assignment,
                subgroups,
            })
        },
    )?;

    // Pairings.
    let pairings: Vec<SubgroupPairing> = runner.run("pairings", |_| true, |notices| {
        let mut out = Vec::new();
        let under: Vec<&Subgroup> = discovery
            .subgroups
            .iter()
            .filter(|s| s.status == SubgroupStatus::Underperforming)
            .collect();
        if under.is_empty() {
            notices.push("no underperforming subgroups found".into());
        }
        for s in under {
            match pair_with_well_performing(s, &discovery.subgroups) {
                Some(p) => out.push(p),
                None => notices.push(format!(
                    "subgroup {} has no well-performing counterpart",
                    s.subgroup_id
                )),
            }
        }
        Ok(out)
    })?;

    let paired_images: BTreeSet<&str> = pairings
        .iter()
        .flat_map(|p| [p.under_id, p.well_id])
        .filter_map(|id| discovery.subgroups.iter().find(|s| s.subgroup_id == id))
        .flat_map(|s| s.member_ids.iter().map(String::as_str))
        .collect();

    // Saliency for images of paired subgroups.
    let saliency: Vec<SaliencyEntry> = runner.run(
        "saliency",
        |v: &Vec<SaliencyEntry>| all_exist(&out, v.iter().map(|e| &e.overlay)),
        |notices| {
            let jobs: Vec<(usize, usize, bool)> = paired_images
                .iter()
                .flat_map(|id| {
                    let i = position[id];
                    let s = &predictions.samples[i];
                    let mut v = vec![(i, s.predicted_label, true)];
                    if s.true_label != s.predicted_label {
                        v.push((i, s.true_label, false));
                    }
                    v
                })
                .collect();
            let results = jobs
                .par_iter()
                .map(|&(i, class, predicted)| {
                    let map = grad_cam(&model, &tensor(i), class, &manifest.saliency_layer)?;
                    let id = &records[i].image_id;
                    let rel = format!("saliency/{id}_{class}.png");
                    write_png(&out, &rel, &render_overlay(&images[i], &map.heatmap, OVERLAY_ALPHA))?;
                    let (h, w) = map.heatmap.dim();
                    Ok(SaliencyEntry {
                        image_id: id.clone(),
                        target_class: class,
                        predicted,
                        height: h,
                        width: w,
                        heatmap: encode_heatmap(&map.heatmap),
                        overlay: rel,
                    })
                })
                .collect::<Vec<Result<_>>>();
            let mut entries = Vec::new();
            for r in results {
                match r {
                    Ok(e) => entries.push(e),
                    Err(AuditError::Capability(msg)) => {
                        notices.push(msg);
                        return Ok(Vec::new());
                    }
                    Err(e) => return Err(e),
                }
            }
            Ok(entries)
        },
    )?;

    // Neuron activation scores per pairing.
    let neuron_scores: Vec<PairingScores> = runner.run("neuron_scores", |_| true, |_| {
        let high: HashMap<&str, Vec<NeuronRef>> = paired_images
            .iter()
            .map(|id| {
                let i = position[id];
                let values: Vec<(String, Vec<f64>)> = layer_ids
                    .iter()
                    .map(|l| (l.clone(), predictions.layers[l][i].clone()))
                    .collect();
                (*id, image_highly_activated(&values, config.top_rate))
            })
            .collect();
        let score = |id: usize| {
            let sg = discovery
                .subgroups
                .iter()
                .find(|s| s.subgroup_id == id)
                .expect("paired subgroup exists");
            let sets: Vec<&[NeuronRef]> = sg
                .member_ids
                .iter()
                .map(|m| high[m.as_str()].as_slice())
                .collect();
            score_subgroup(id, &sets)
        };
        Ok(pairings
            .iter()
            .map(|p| PairingScores {
                under_id: p.under_id,
                well_id: p.well_id,
                under: score(p.under_id),
                well: score(p.well_id),
            })
            .collect())
    })?;

    // Concept patches for neurons shown at the default slider position.
    let mut max_score: BTreeMap<NeuronRef, f64> = BTreeMap::new();
    for ps in &neuron_scores {
        for s in ps.under.iter().chain(&ps.well) {
            let e = max_score.entry(s.neuron.clone()).or_insert(0.0);
            *e = e.max(s.score);
        }
    }
    let layer_rank = |l: &str| manifest.layer_position(l).unwrap_or(usize::MAX);
    let mut concept_neurons: Vec<NeuronRef> = max_score
        .iter()
        .filter(|(_, s)| **s >= config.slider_default)
        .map(|(n, _)| n.clone())
        .collect();
    concept_neurons.sort_by_key(|n| (layer_rank(&n.layer), n.channel));

    let image_for = |id: &str| -> Result<RgbImage> {
        position
            .get(id)
            .map(|&i| images[i].clone())
            .ok_or_else(|| AuditError::DanglingReference(format!("unknown image `{id}`")))
    };
    let concepts: Vec<NeuronConcept> = runner.run(
        "concepts",
        |v: &Vec<NeuronConcept>| {
            all_exist(&out, v.iter().flat_map(|c| c.patches.iter().map(|p| &p.asset)))
        },
        |notices| {
            let index = ActivationIndex {
                image_ids: records.iter().map(|r| r.image_id.clone()).collect(),
                layers: predictions.layers.clone(),
            };
            let build = build_neuron_concepts(&model, &concept_neurons, &index, image_for, &config.patches)?;
            notices.extend(build.warnings);
            for c in &build.concepts {
                for p in &c.patches {
                    write_png(&out, &p.asset, &build.pixels[&p.patch_id])?;
                }
            }
            Ok(build.concepts)
        },
    )?;

    // Patch tensors, cut again from the source images.
    let patch_inputs: HashMap<String, Array3<f64>> = concepts
        .iter()
        .flat_map(|c| c.patches.iter())
        .map(|p| -> Result<(String, Array3<f64>)> {
            let img = image_for(&p.source_image_id)?;
            Ok((p.patch_id.clone(), pre.to_tensor(&crop(&img, &p.bbox))))
        })
        .collect::<Result<_>>()?;

    let checkpoint_rel = artifact::AssetLayout::default().embedder_checkpoint;
    let trained: Trained = runner.run(
        "embedder",
        |t: &Trained| t.summary.as_ref().is_none_or(|s| out.join(&s.checkpoint).is_file()),
        |notices| {
            let pairs = match sample_pairs(
                &concepts,
                config.positive_pairs,
                config.negative_pairs,
                config.pair_seed,
            ) {
                Ok(p) => p,
                Err(AuditError::Validation(msg)) => {
                    notices.push(format!("embedder not trained: {msg}"));
                    return Ok(Trained { summary: None });
                }
                Err(e) => return Err(e),
            };
            let mut embedder = Embedder::from_classifier(&model);
            let curve = train_embedder(&mut embedder, &pairs, &patch_inputs, &config.embedder)?;
            embedder.save(&out.join(&checkpoint_rel))?;
            Ok(Trained {
                summary: Some(EmbedderSummary {
                    checkpoint: checkpoint_rel.clone(),
                    dim: embedder.dim(),
                    positive_pairs: config.positive_pairs,
                    negative_pairs: config.negative_pairs,
                    loss_curve: curve,
                }),
            })
        },
    )?;

    let clusters: Vec<NeuronCluster> = runner.run("clusters", |_| true, |_| {
        let Some(summary) = &trained.summary else {
            return Ok(Vec::new());
        };
        let embedder = Embedder::load(&out.join(&summary.checkpoint))?;
        let ids: Vec<&str> = patch_inputs.keys().map(String::as_str).collect::<BTreeSet<_>>().into_iter().collect();
        let vectors = embed_all(&embedder, &ids, &patch_inputs)?;
        let scored: Vec<(NeuronRef, f64)> = concepts
            .iter()
            .map(|c| (c.neuron.clone(), max_score.get(&c.neuron).copied().unwrap_or(0.0)))
            .collect();
        let layer_order: Vec<String> = manifest.layers.iter().map(|l| l.id.clone()).collect();
        let order = clustering_order(&scored, &layer_order);
        assign_clusters(&concepts, &vectors, &order, &config.neuron_clustering)
    })?;

    // Thumbnails and the image table.
    let save_start = Instant::now();
    let entries = records
        .par_iter()
        .enumerate()
        .map(|(i, r)| {
            let rel = format!("thumbnails/{}.png", r.image_id);
            write_png(&out, &rel, &images[i])?;
            Ok(ImageEntry {
                image_id: r.image_id.clone(),
                true_label: r.true_label,
                predicted_label: predictions.samples[i].predicted_label,
                scores: predictions.scores[i].clone(),
                attributes: r.attributes.clone(),
                subgroup_id: Some(discovery.assignment[i]),
                thumbnail: rel,
            })
        })
        .collect::<Result<Vec<_>>>()
        .map_err(|e| e.in_stage("save"))?;

    let mut timings = runner.timings;
    let mut run_config = serde_json::to_value(config)?;
    if let Some(obj) = run_config.as_object_mut() {
        obj.remove("resume");
    }
    let mut art = AuditArtifact::empty(manifest.clone(), run_config);
    art.overall_accuracy = discovery.overall_accuracy;
    art.images = entries;
    art.subgroups = discovery.subgroups;
    art.pairings = pairings;
    art.saliency.entries = saliency;
    art.neuron_scores = neuron_scores;
    art.concepts = concepts;
    art.clusters = clusters;
    art.embedder = trained.summary;
    art.notices = notices;
    let art = art.canonicalized()?;
    let manifest_path = artifact::save(&art, &out).map_err(|e| e.in_stage("save"))?;

    timings.push(StageTiming {
        stage: "save".into(),
        seconds: save_start.elapsed().as_secs_f64(),
        cached: false,
    });
    let log_path = out.join(RUN_LOG_FILE);
    let log = serde_json::json!({ "stages": timings });
    std::fs::write(&log_path, serde_json::to_vec_pretty(&log)?)
        .map_err(|e| AuditError::io(&log_path, e))?;
    Ok(RunOutcome {
        manifest: manifest_path,
        artifact: art,
        timings,
    })
}
