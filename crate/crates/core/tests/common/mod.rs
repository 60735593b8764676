//! Independent oracles and fixtures shared by the integration tests.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use audit_core::artifact::{
    AuditArtifact, EmbedderSummary, ImageEntry, PairingScores, SaliencyEntry,
};
use audit_core::model::{Cnn, InputShape, LayerInfo, ModelManifest, NeuronRef, Pool, Preprocessing, StageSpec};
use audit_core::neuron_clusters::NeuronCluster;
use audit_core::neurons::NeuronActivationScore;
use audit_core::patches::{ConceptPatch, NeuronConcept, PatchBox};
use audit_core::subgroups::{Subgroup, SubgroupPairing, SubgroupStatus};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// ---- 3% rule ----

/// Minimal-prefix oracle. Ranks come from pairwise counting rather than a
/// sort, and every prefix length is tried from scratch.
pub fn prefix_oracle(values: &[f64], rate: f64) -> BTreeSet<usize> {
    let v: Vec<f64> = values.iter().map(|x| if *x > 0.0 { *x } else { 0.0 }).collect();
    let total: f64 = v.iter().sum();
    if total <= 0.0 {
        return BTreeSet::new();
    }
    let rank = |i: usize| {
        (0..v.len())
            .filter(|&j| v[j] > v[i] || (v[j] == v[i] && j < i))
            .count()
    };
    let ranks: Vec<usize> = (0..v.len()).map(rank).collect();
    for k in 1..=v.len() {
        let set: BTreeSet<usize> = (0..v.len()).filter(|&i| ranks[i] < k).collect();
        let sum: f64 = set.iter().map(|&i| v[i]).sum();
        if sum > rate * total {
            return set;
        }
    }
    (0..v.len()).collect()
}

// ---- pairing ----

/// Scans every candidate; returns `(well_id, distance)`.
pub fn exhaustive_pairing(target: &Subgroup, all: &[Subgroup]) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for s in all {
        if s.status != SubgroupStatus::WellPerforming || s.subgroup_id == target.subgroup_id {
            continue;
        }
        let mut d2 = 0.0;
        for i in 0..s.embedding.len() {
            let diff = s.embedding[i] - target.embedding[i];
            d2 += diff * diff;
        }
        let d = d2.sqrt();
        best = match best {
            None => Some((s.subgroup_id, d)),
            Some((id, bd)) if d < bd || (d == bd && s.subgroup_id < id) => Some((s.subgroup_id, d)),
            keep => keep,
        };
    }
    best
}

pub fn random_subgroups(r: &mut ChaCha8Rng, n: usize, dim: usize, ties: bool) -> Vec<Subgroup> {
    let mut ids: Vec<usize> = (0..n * 3).collect();
    ids.shuffle(r);
    ids.truncate(n);
    (0..n)
        .map(|i| {
            let embedding = (0..dim)
                .map(|_| {
                    if ties {
                        r.random_range(0..3) as f64
                    } else {
                        r.random_range(-2.0..2.0)
                    }
                })
                .collect();
            let status = match r.random_range(0..3) {
                0 => SubgroupStatus::Underperforming,
                1 => SubgroupStatus::WellPerforming,
                _ => SubgroupStatus::Other,
            };
            Subgroup {
                subgroup_id: ids[i],
                member_ids: vec![format!("m{i}")],
                correct: 0,
                accuracy: 0.0,
                embedding,
                confusion: vec![vec![0, 0], vec![0, 0]],
                status,
            }
        })
        .collect()
}

// ---- masks ----

/// Checks bounds and pairwise separation of square boxes.
pub fn check_boxes(boxes: &[PatchBox], h: usize, w: usize, size: usize, min_sep: usize) -> Result<(), String> {
    for b in boxes {
        if b.size != size || b.top + size > h || b.left + size > w {
            return Err(format!("box {b:?} out of bounds for {h}x{w}"));
        }
    }
    for i in 0..boxes.len() {
        for j in i + 1..boxes.len() {
            let (a, b) = (boxes[i], boxes[j]);
            let apart = a.left + a.size + min_sep <= b.left
                || b.left + b.size + min_sep <= a.left
                || a.top + a.size + min_sep <= b.top
                || b.top + b.size + min_sep <= a.top;
            if !apart {
                return Err(format!("boxes {a:?} and {b:?} closer than {min_sep}"));
            }
        }
    }
    Ok(())
}

// ---- Grad-CAM ----

pub fn tiny_cnn(seed: u64) -> Cnn {
    let specs = vec![
        StageSpec { id: "c1".into(), out_channels: 4, kernel: 3, pool: Pool::Avg2 },
        StageSpec { id: "c2".into(), out_channels: 6, kernel: 3, pool: Pool::None },
        StageSpec { id: "c3".into(), out_channels: 5, kernel: 3, pool: Pool::None },
    ];
    let mut cnn = Cnn::random(
        vec!["a".into(), "b".into(), "c".into()],
        InputShape { height: 8, width: 8, channels: 3 },
        Preprocessing::new(8, 8, [0.5; 3], [0.25; 3]),
        &specs,
        seed,
    )
    .unwrap();
    // Nonzero biases so ReLUs see both signs.
    let mut r = rng(seed ^ 0xb1a5);
    for s in &mut cnn.stages {
        s.conv.bias.iter_mut().for_each(|b| *b = r.random_range(-0.2..0.2));
    }
    cnn.saliency_layer = "c2".into();
    cnn
}

pub fn random_input(r: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Array3<f64> {
    Array3::from_shape_fn((c, h, w), |_| r.random_range(-1.5..1.5))
}

/// Grad-CAM rebuilt from central differences of the class score with
/// respect to each activation of `layer`.
pub fn finite_difference_cam(cnn: &Cnn, input: &Array3<f64>, class: usize, layer: &str) -> Array2<f64> {
    let s = cnn.stage_index(layer).unwrap();
    let act = cnn.trace(input).unwrap().outputs[s + 1].clone();
    let (c, h, w) = act.dim();
    let step = 1e-5;
    let mut grad = Array3::<f64>::zeros((c, h, w));
    for k in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut up = act.clone();
                up[[k, y, x]] += step;
                let mut down = act.clone();
                down[[k, y, x]] -= step;
                let f1 = cnn.scores_from_layer(layer, &up).unwrap()[class];
                let f0 = cnn.scores_from_layer(layer, &down).unwrap()[class];
                grad[[k, y, x]] = (f1 - f0) / (2.0 * step);
            }
        }
    }
    let mut cam = Array2::<f64>::zeros((h, w));
    for k in 0..c {
        let mut wk = 0.0;
        for y in 0..h {
            for x in 0..w {
                wk += grad[[k, y, x]];
            }
        }
        wk /= (h * w) as f64;
        for y in 0..h {
            for x in 0..w {
                cam[[y, x]] += wk * act[[k, y, x]];
            }
        }
    }
    cam.mapv_inplace(|v| v.max(0.0));
    let m = cam.iter().cloned().fold(0.0, f64::max);
    if m > 0.0 {
        cam.mapv_inplace(|v| v / m);
    }
    cam
}

pub fn relative_error(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let diff: f64 = a.iter().zip(b.iter()).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let norm: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    if norm == 0.0 {
        diff
    } else {
        diff / norm
    }
}

// ---- planted clusters ----

/// 12 neurons in 3 groups; each patch vector is its group's axis tilted
/// slightly toward a private axis. Returns concepts, patch vectors and the
/// planted groups.
pub fn planted_neurons(patches_per_neuron: usize) -> (Vec<NeuronConcept>, BTreeMap<String, Vec<f64>>, Vec<BTreeSet<NeuronRef>>) {
    let dim = 3 + 12 * patches_per_neuron;
    let mut concepts = Vec::new();
    let mut vectors = BTreeMap::new();
    let mut groups = vec![BTreeSet::new(); 3];
    for n in 0..12 {
        let group = n % 3;
        let neuron = NeuronRef::new(if n < 6 { "conv1" } else { "conv2" }, n);
        let mut patches = Vec::new();
        for p in 0..patches_per_neuron {
            let id = format!("img{n}_{p}_0");
            let mut v = vec![0.0; dim];
            v[group] = 0.99;
            v[3 + n * patches_per_neuron + p] = (1.0f64 - 0.99 * 0.99).sqrt();
            vectors.insert(id.clone(), v);
            patches.push(ConceptPatch {
                patch_id: id.clone(),
                source_image_id: format!("img{n}"),
                bbox: PatchBox { top: p, left: 0, size: 4 },
                activation: 1.0 - p as f64 * 0.01,
                asset: format!("patches/{}/{id}.png", neuron.key()),
            });
        }
        groups[group].insert(neuron.clone());
        concepts.push(NeuronConcept { neuron, patches });
    }
    (concepts, vectors, groups)
}

// ---- artifacts ----

pub fn fixture_manifest(classes: usize) -> ModelManifest {
    ModelManifest {
        input_shape: InputShape { height: 32, width: 32, channels: 3 },
        class_names: (0..classes).map(|c| format!("class{c}")).collect(),
        layers: vec![
            LayerInfo { id: "conv1".into(), channels: 4, height: 16, width: 16 },
            LayerInfo { id: "conv2".into(), channels: 6, height: 8, width: 8 },
        ],
        feature_layer: "conv2".into(),
        saliency_layer: "conv2".into(),
        feature_pooling: "global_average".into(),
        preprocessing: Preprocessing::new(32, 32, [0.5; 3], [0.25; 3]),
    }
}

fn random_neuron(r: &mut ChaCha8Rng) -> NeuronRef {
    if r.random_bool(0.5) {
        NeuronRef::new("conv1", r.random_range(0..4))
    } else {
        NeuronRef::new("conv2", r.random_range(0..6))
    }
}

fn random_scores(r: &mut ChaCha8Rng, subgroup_id: usize) -> Vec<NeuronActivationScore> {
    let mut neurons: BTreeSet<NeuronRef> = BTreeSet::new();
    for _ in 0..r.random_range(0..6) {
        neurons.insert(random_neuron(r));
    }
    neurons
        .into_iter()
        .map(|neuron| {
            let count = r.random_range(1..10u64);
            NeuronActivationScore { neuron, subgroup_id, count, score: count as f64 / 10.0 }
        })
        .collect()
}

/// A random artifact whose cross-references all resolve.
pub fn random_artifact(seed: u64) -> AuditArtifact {
    let mut r = rng(seed);
    let classes = r.random_range(2..4);
    let mut a = AuditArtifact::empty(fixture_manifest(classes), json!({ "seed": seed, "top_rate": 0.03 }));
    let n_images = r.random_range(3..12);
    let n_groups = r.random_range(1..=3.min(n_images));
    let ids: Vec<usize> = (0..n_groups).map(|g| g * 7 + r.random_range(0..7)).collect();
    for i in 0..n_images {
        let scores: Vec<f64> = (0..classes).map(|_| r.random::<f64>()).collect();
        a.images.push(ImageEntry {
            image_id: format!("img_{i:03}"),
            true_label: r.random_range(0..classes),
            predicted_label: r.random_range(0..classes),
            scores,
            attributes: BTreeMap::from([("warm".to_string(), r.random_bool(0.5))]),
            subgroup_id: if r.random_bool(0.9) { Some(ids[i % n_groups]) } else { None },
            thumbnail: format!("thumbnails/img_{i:03}.png"),
        });
    }
    for (g, &id) in ids.iter().enumerate() {
        let members: Vec<String> = (0..n_images).filter(|i| i % n_groups == g).map(|i| format!("img_{i:03}")).collect();
        let correct = r.random_range(0..=members.len() as u64);
        a.subgroups.push(Subgroup {
            subgroup_id: id,
            accuracy: correct as f64 / members.len() as f64,
            correct,
            member_ids: members,
            embedding: (0..4).map(|_| r.random_range(-3.0..3.0)).collect(),
            confusion: vec![vec![r.random_range(0..5u64); classes]; classes],
            status: [SubgroupStatus::Underperforming, SubgroupStatus::WellPerforming, SubgroupStatus::Other][r.random_range(0..3)],
        });
    }
    a.overall_accuracy = r.random();
    for &under in &ids {
        if r.random_bool(0.6) {
            let well = ids[r.random_range(0..ids.len())];
            a.pairings.push(SubgroupPairing { under_id: under, well_id: well, distance: r.random_range(0.0..5.0) });
            a.neuron_scores.push(PairingScores {
                under_id: under,
                well_id: well,
                under: random_scores(&mut r, under),
                well: random_scores(&mut r, well),
            });
        }
    }
    for i in 0..n_images {
        if r.random_bool(0.5) {
            let c = r.random_range(0..classes);
            a.saliency.entries.push(SaliencyEntry {
                image_id: format!("img_{i:03}"),
                target_class: c,
                predicted: r.random_bool(0.5),
                height: 2,
                width: 2,
                heatmap: "AAAAAAAAgD8AAAA/AACAPg==".into(),
                overlay: format!("saliency/img_{i:03}_{c}.png"),
            });
        }
    }
    let mut neurons: BTreeSet<NeuronRef> = BTreeSet::new();
    for _ in 0..r.random_range(0..5) {
        neurons.insert(random_neuron(&mut r));
    }
    for neuron in neurons {
        let mut boxes = BTreeSet::new();
        for _ in 0..r.random_range(1..4) {
            boxes.insert((r.random_range(0..n_images), r.random_range(0..20usize), r.random_range(0..20usize)));
        }
        let patches = boxes
            .into_iter()
            .map(|(img, top, left)| {
                let patch_id = format!("img_{img:03}_{top}_{left}");
                ConceptPatch {
                    asset: format!("patches/{}/{patch_id}.png", neuron.key()),
                    patch_id,
                    source_image_id: format!("img_{img:03}"),
                    bbox: PatchBox { top, left, size: 12 },
                    activation: r.random_range(0.0..4.0),
                }
            })
            .collect();
        a.concepts.push(NeuronConcept { neuron, patches });
    }
    let mut cluster_id = 0;
    let mut pending: Vec<&NeuronConcept> = a.concepts.iter().filter(|_| r.random_bool(0.8)).collect();
    let mut clusters = Vec::new();
    while !pending.is_empty() {
        let take = r.random_range(1..=pending.len());
        let members: Vec<&NeuronConcept> = pending.drain(..take).collect();
        clusters.push(NeuronCluster {
            cluster_id,
            member_neurons: members.iter().map(|c| c.neuron.clone()).collect(),
            exemplar_patch_ids: members.iter().map(|c| c.patches[0].patch_id.clone()).collect(),
        });
        cluster_id += 1;
    }
    a.clusters = clusters;
    if r.random_bool(0.5) {
        a.embedder = Some(EmbedderSummary {
            checkpoint: "embedder.ckpt".into(),
            dim: 6,
            positive_pairs: 10,
            negative_pairs: 10,
            loss_curve: (0..4).map(|_| r.random_range(0.0..2.0)).collect(),
        });
    }
    if r.random_bool(0.3) {
        a.notices.push(format!("notice {}", r.random::<u32>()));
    }
    a
}

/// Writes a placeholder file at every asset path.
pub fn write_assets(a: &AuditArtifact, dir: &Path) {
    for p in a.asset_paths() {
        let path = dir.join(p);
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        std::fs::write(path, b"x").unwrap();
    }
}

/// Every variant of `a` with exactly one reference pointed at nothing.
pub fn dangling_mutations(a: &AuditArtifact) -> Vec<(String, AuditArtifact)> {
    let mut out = Vec::new();
    let mut push = |what: String, f: &dyn Fn(&mut AuditArtifact)| {
        let mut m = a.clone();
        f(&mut m);
        out.push((what, m));
    };
    let ghost_image = "ghost_image".to_string();
    let ghost_group = 9_999usize;
    for (s, sg) in a.subgroups.iter().enumerate() {
        for k in 0..sg.member_ids.len() {
            push(format!("subgroup {s} member {k}"), &|m| m.subgroups[s].member_ids[k] = ghost_image.clone());
        }
    }
    for (i, img) in a.images.iter().enumerate() {
        if img.subgroup_id.is_some() {
            push(format!("image {i} subgroup"), &|m| m.images[i].subgroup_id = Some(ghost_group));
        }
        push(format!("image {i} thumbnail"), &|m| m.images[i].thumbnail = "thumbnails/ghost.png".into());
    }
    for p in 0..a.pairings.len() {
        push(format!("pairing {p} under"), &|m| m.pairings[p].under_id = ghost_group);
        push(format!("pairing {p} well"), &|m| m.pairings[p].well_id = ghost_group);
    }
    for e in 0..a.saliency.entries.len() {
        push(format!("saliency {e} image"), &|m| m.saliency.entries[e].image_id = ghost_image.clone());
        push(format!("saliency {e} overlay"), &|m| m.saliency.entries[e].overlay = "saliency/ghost.png".into());
    }
    for (p, ps) in a.neuron_scores.iter().enumerate() {
        push(format!("scores {p} under id"), &|m| m.neuron_scores[p].under_id = ghost_group);
        push(format!("scores {p} well id"), &|m| m.neuron_scores[p].well_id = ghost_group);
        for k in 0..ps.under.len() {
            push(format!("scores {p} under {k} neuron"), &|m| m.neuron_scores[p].under[k].neuron.channel = 999);
            push(format!("scores {p} under {k} layer"), &|m| m.neuron_scores[p].under[k].neuron.layer = "ghost".into());
            push(format!("scores {p} under {k} subgroup"), &|m| m.neuron_scores[p].under[k].subgroup_id = ghost_group);
        }
        for k in 0..ps.well.len() {
            push(format!("scores {p} well {k} neuron"), &|m| m.neuron_scores[p].well[k].neuron.channel = 999);
            push(format!("scores {p} well {k} subgroup"), &|m| m.neuron_scores[p].well[k].subgroup_id = ghost_group);
        }
    }
    for (c, concept) in a.concepts.iter().enumerate() {
        push(format!("concept {c} neuron"), &|m| m.concepts[c].neuron.channel = 999);
        for k in 0..concept.patches.len() {
            push(format!("concept {c} patch {k} source"), &|m| m.concepts[c].patches[k].source_image_id = ghost_image.clone());
            push(format!("concept {c} patch {k} asset"), &|m| m.concepts[c].patches[k].asset = "patches/ghost.png".into());
        }
    }
    for (c, cl) in a.clusters.iter().enumerate() {
        for k in 0..cl.member_neurons.len() {
            push(format!("cluster {c} member {k}"), &|m| m.clusters[c].member_neurons[k] = NeuronRef::new("conv1", 999));
        }
        for k in 0..cl.exemplar_patch_ids.len() {
            push(format!("cluster {c} exemplar {k}"), &|m| m.clusters[c].exemplar_patch_ids[k] = "ghost_patch".into());
        }
    }
    if a.embedder.is_some() {
        push("embedder checkpoint".into(), &|m| m.embedder.as_mut().unwrap().checkpoint = "ghost.ckpt".into());
    }

    // Deleting a referenced entity.
    for (i, img) in a.images.iter().enumerate() {
        let id = img.image_id.as_str();
        let referenced = a.subgroups.iter().any(|s| s.member_ids.iter().any(|m| m == id))
            || a.saliency.entries.iter().any(|e| e.image_id == id)
            || a.concepts.iter().flat_map(|c| &c.patches).any(|p| p.source_image_id == id);
        if referenced {
            push(format!("delete image {i}"), &|m| {
                m.images.remove(i);
            });
        }
    }
    for (s, sg) in a.subgroups.iter().enumerate() {
        let id = sg.subgroup_id;
        let referenced = a.images.iter().any(|i| i.subgroup_id == Some(id))
            || a.pairings.iter().any(|p| p.under_id == id || p.well_id == id);
        if referenced {
            push(format!("delete subgroup {s}"), &|m| {
                m.subgroups.remove(s);
            });
        }
    }
    for p in 0..a.pairings.len() {
        let referenced = a.neuron_scores.iter().any(|s| s.under_id == a.pairings[p].under_id);
        if referenced {
            push(format!("delete pairing {p}"), &|m| {
                m.pairings.remove(p);
            });
        }
    }
    for (c, concept) in a.concepts.iter().enumerate() {
        if a.clusters.iter().any(|cl| cl.member_neurons.contains(&concept.neuron)) {
            push(format!("delete concept {c}"), &|m| {
                m.concepts.remove(c);
            });
        }
        for (k, patch) in concept.patches.iter().enumerate() {
            let shared = a.concepts.iter().flat_map(|c| &c.patches).filter(|p| p.patch_id == patch.patch_id).count() > 1;
            if !shared && a.clusters.iter().any(|cl| cl.exemplar_patch_ids.contains(&patch.patch_id)) {
                push(format!("delete concept {c} patch {k}"), &|m| {
                    m.concepts[c].patches.remove(k);
                });
            }
        }
    }
    out
}

/// Writes `m`'s manifest without validating and returns whether loading fails.
pub fn load_rejects(m: &AuditArtifact, dir: &Path) -> bool {
    let bytes = audit_core::artifact::to_bytes(m).unwrap();
    std::fs::write(dir.join("manifest.json"), bytes).unwrap();
    audit_core::artifact::load(dir).is_err()
}
