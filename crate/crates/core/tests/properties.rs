mod common;

use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;

use audit_core::artifact;
use audit_core::model::NeuronRef;
use audit_core::neuron_clusters::{assign_clusters, pair_loss, NeuronClusterConfig};
use audit_core::neurons::{highly_activated_neurons, partition, NeuronActivationScore};
use audit_core::patches::{sample_masks, select_top_patches, top_activating_images, ConceptPatch, PatchBox};
use audit_core::saliency::{grad_cam_from, upsample_bilinear};
use audit_core::subgroups::{build_subgroups, pair_with_well_performing, LabeledPrediction, SubgroupStatus};
use common::*;

fn channel_values() -> impl Strategy<Value = Vec<f64>> {
    prop_oneof![
        prop::collection::vec(-1.0f64..10.0, 1..=512),
        // Few distinct values, many ties.
        prop::collection::vec((0u8..4).prop_map(f64::from), 1..=512),
        prop::collection::vec(prop_oneof![Just(0.0), 0.0f64..1e-3, 1e3f64..1e4], 1..=64),
    ]
}

fn layer_order() -> Vec<String> {
    vec!["conv1".into(), "conv2".into()]
}

fn scores_for(values: &[(usize, f64)], subgroup_id: usize) -> Vec<NeuronActivationScore> {
    values
        .iter()
        .map(|&(n, score)| NeuronActivationScore {
            neuron: NeuronRef::new(if n % 2 == 0 { "conv1" } else { "conv2" }, n),
            subgroup_id,
            count: 0,
            score,
        })
        .collect()
}

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn three_percent_rule_is_the_minimal_prefix(values in channel_values(), rate in prop_oneof![Just(0.03), 0.001f64..0.5]) {
        let got: BTreeSet<usize> = highly_activated_neurons(&values, rate).into_iter().collect();
        prop_assert_eq!(got, prefix_oracle(&values, rate));
    }

    #[test]
    fn partition_is_monotone_disjoint_and_complete(
        under in prop::collection::btree_map(0usize..40, 0.0f64..=1.0, 0..30),
        well in prop::collection::btree_map(0usize..40, 0.0f64..=1.0, 0..30),
        a in 0.5f64..=1.0,
        b in 0.5f64..=1.0,
    ) {
        let under: Vec<(usize, f64)> = under.into_iter().collect();
        let well: Vec<(usize, f64)> = well.into_iter().collect();
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let us = scores_for(&under, 1);
        let ws = scores_for(&well, 2);
        let p_lo = partition(&us, &ws, lo, &layer_order()).unwrap();
        let p_hi = partition(&us, &ws, hi, &layer_order()).unwrap();
        let set_lo: BTreeSet<NeuronRef> = p_lo.all_neurons().into_iter().collect();
        let all_hi = p_hi.all_neurons();
        let set_hi: BTreeSet<NeuronRef> = all_hi.iter().cloned().collect();
        prop_assert_eq!(all_hi.len(), set_hi.len(), "a neuron sits in two columns");
        prop_assert!(set_hi.is_subset(&set_lo));
        let mut expected = BTreeSet::new();
        let get = |v: &[(usize, f64)], n: usize| v.iter().find(|x| x.0 == n).map_or(0.0, |x| x.1);
        for n in 0..40 {
            if get(&under, n).max(get(&well, n)) >= hi {
                expected.insert(NeuronRef::new(if n % 2 == 0 { "conv1" } else { "conv2" }, n));
            }
        }
        prop_assert_eq!(set_hi, expected);
        for g in &p_hi.under_only {
            for n in &g.neurons {
                prop_assert!(n.under_score >= hi && n.well_score < hi);
            }
        }
        for g in &p_hi.both {
            for n in &g.neurons {
                prop_assert!(n.under_score >= hi && n.well_score >= hi);
            }
        }
        for g in &p_hi.well_only {
            for n in &g.neurons {
                prop_assert!(n.under_score < hi && n.well_score >= hi);
            }
        }
    }

    #[test]
    fn masks_are_separated_in_bounds_and_seeded(
        h in 12usize..80,
        w in 12usize..80,
        size in 2usize..12,
        count in 1usize..40,
        gap in 0usize..8,
        seed in any::<u64>(),
    ) {
        let m = sample_masks(h, w, count, size, gap, seed, 1000).unwrap();
        prop_assert!(m.boxes.len() <= count && !m.boxes.is_empty());
        if let Err(e) = check_boxes(&m.boxes, h, w, size, gap) {
            prop_assert!(false, "{}", e);
        }
        prop_assert_eq!(m, sample_masks(h, w, count, size, gap, seed, 1000).unwrap());
    }

    #[test]
    fn pair_loss_is_nonnegative(
        a in prop::collection::vec(-1.0f64..1.0, 8),
        b in prop::collection::vec(-1.0f64..1.0, 8),
        same in any::<bool>(),
    ) {
        prop_assume!(a.iter().any(|x| x.abs() > 1e-3) && b.iter().any(|x| x.abs() > 1e-3));
        let l = pair_loss(&unit(a), &unit(b), same).unwrap();
        prop_assert!(l >= 0.0 && l.is_finite());
    }

    #[test]
    fn pairing_matches_exhaustive_scan(seed in any::<u64>(), n in 1usize..20, ties in any::<bool>()) {
        let mut r = rng(seed);
        let groups = random_subgroups(&mut r, n, 3, ties);
        for g in groups.iter().filter(|g| g.status == SubgroupStatus::Underperforming) {
            let got = pair_with_well_performing(g, &groups).map(|p| (p.well_id, p.distance));
            prop_assert_eq!(got, exhaustive_pairing(g, &groups));
        }
    }

    #[test]
    fn top_images_match_selection_oracle(values in prop::collection::vec(0u8..5, 0..40), k in 0usize..15) {
        let ids: Vec<String> = (0..values.len()).map(|i| format!("img{:02}", (i * 7) % 41)).collect();
        let pairs: Vec<(&str, f64)> = ids.iter().map(String::as_str).zip(values.iter().map(|&v| f64::from(v))).collect();
        let mut remaining = pairs.clone();
        let mut expected = Vec::new();
        while expected.len() < k && !remaining.is_empty() {
            let mut best = 0;
            for i in 1..remaining.len() {
                let (id, v) = remaining[i];
                let (bid, bv) = remaining[best];
                if v > bv || (v == bv && id < bid) {
                    best = i;
                }
            }
            expected.push(remaining.remove(best).0.to_string());
        }
        prop_assert_eq!(top_activating_images(&pairs, k), expected);
    }

    #[test]
    fn top_patches_match_selection_oracle(acts in prop::collection::vec(0u8..4, 0..30), k in 0usize..12) {
        let candidates: Vec<ConceptPatch> = acts
            .iter()
            .enumerate()
            .map(|(i, &a)| ConceptPatch {
                patch_id: format!("p{:02}", (i * 11) % 31),
                source_image_id: "img".into(),
                bbox: PatchBox { top: i, left: 0, size: 2 },
                activation: f64::from(a),
                asset: format!("patches/x/p{i}.png"),
            })
            .collect();
        let got = select_top_patches(candidates.clone(), k);
        prop_assert_eq!(got.len(), k.min(candidates.len()));
        for w in got.windows(2) {
            prop_assert!(w[0].activation > w[1].activation
                || (w[0].activation == w[1].activation && w[0].patch_id < w[1].patch_id));
        }
        if let Some(last) = got.last() {
            for c in candidates.iter().filter(|c| !got.contains(c)) {
                prop_assert!(c.activation < last.activation
                    || (c.activation == last.activation && c.patch_id > last.patch_id));
            }
        }
    }

    #[test]
    fn planted_clusters_recovered_in_any_order(order in Just((0..12usize).collect::<Vec<_>>()).prop_shuffle(), seed in any::<u64>()) {
        let (concepts, vectors, groups) = planted_neurons(3);
        let order: Vec<NeuronRef> = order.into_iter().map(|i| concepts[i].neuron.clone()).collect();
        let clusters = assign_clusters(&concepts, &vectors, &order, &NeuronClusterConfig { threshold: 0.9, exemplars_per_cluster: 10, seed }).unwrap();
        let found: BTreeSet<BTreeSet<NeuronRef>> = clusters.iter().map(|c| c.member_neurons.iter().cloned().collect()).collect();
        let planted: BTreeSet<BTreeSet<NeuronRef>> = groups.into_iter().collect();
        prop_assert_eq!(found, planted);
    }

    #[test]
    fn grad_cam_and_upsampling_stay_in_unit_range(
        act in prop::collection::vec(-3.0f64..3.0, 2 * 3 * 4),
        grad in prop::collection::vec(-3.0f64..3.0, 2 * 3 * 4),
        h in 1usize..20,
        w in 1usize..20,
    ) {
        let a = ndarray::Array3::from_shape_vec((2, 3, 4), act).unwrap();
        let g = ndarray::Array3::from_shape_vec((2, 3, 4), grad).unwrap();
        let cam = grad_cam_from(&a, &g);
        prop_assert!(cam.iter().all(|v| (0.0..=1.0).contains(v)));
        let up = upsample_bilinear(&cam, h, w);
        prop_assert_eq!(up.dim(), (h, w));
        prop_assert!(up.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn every_image_lands_in_exactly_one_subgroup(assignment in prop::collection::vec(0usize..6, 1..60)) {
        let samples: Vec<LabeledPrediction> = assignment
            .iter()
            .enumerate()
            .map(|(i, a)| LabeledPrediction { image_id: format!("i{i}"), true_label: i % 2, predicted_label: (i / 2 + a) % 2 })
            .collect();
        let features: Vec<Vec<f64>> = (0..samples.len()).map(|i| vec![i as f64]).collect();
        let groups = build_subgroups(&assignment, &samples, &features, 2).unwrap();
        let mut seen: BTreeMap<&str, usize> = BTreeMap::new();
        for g in &groups {
            for m in &g.member_ids {
                *seen.entry(m.as_str()).or_default() += 1;
            }
            prop_assert_eq!(g.confusion.iter().flatten().sum::<u64>() as usize, g.size());
        }
        prop_assert_eq!(seen.len(), samples.len());
        prop_assert!(seen.values().all(|&c| c == 1));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn artifact_round_trip_is_byte_stable(seed in any::<u64>()) {
        let a = random_artifact(seed);
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        write_assets(&a, d1.path());
        artifact::save(&a, d1.path()).unwrap();
        let first = std::fs::read(d1.path().join(artifact::MANIFEST_FILE)).unwrap();
        let loaded = artifact::load(d1.path()).unwrap();
        prop_assert_eq!(&loaded, &a.canonicalized().unwrap());
        write_assets(&loaded, d2.path());
        artifact::save(&loaded, d2.path()).unwrap();
        let second = std::fs::read(d2.path().join(artifact::MANIFEST_FILE)).unwrap();
        prop_assert_eq!(first, second);
    }

    #[test]
    fn validator_rejects_every_dangling_reference(seed in any::<u64>()) {
        let a = random_artifact(seed);
        let dir = tempfile::tempdir().unwrap();
        write_assets(&a, dir.path());
        prop_assert!(!load_rejects(&a, dir.path()));
        for (what, m) in dangling_mutations(&a) {
            prop_assert!(load_rejects(&m, dir.path()), "accepted: {}", what);
        }
    }
}

#[test]
fn uniform_layer_takes_four_of_a_hundred() {
    let picked = highly_activated_neurons(&[1.0; 100], 0.03);
    assert_eq!(picked, vec![0, 1, 2, 3]);
    assert_eq!(prefix_oracle(&[1.0; 100], 0.03), (0..4).collect());
}

#[test]
fn all_zero_layer_has_no_highly_activated_neuron() {
    assert!(highly_activated_neurons(&[0.0, -1.0, 0.0], 0.03).is_empty());
}

#[test]
fn planted_clusters_have_three_groups() {
    let (concepts, vectors, groups) = planted_neurons(4);
    let order: Vec<NeuronRef> = concepts.iter().map(|c| c.neuron.clone()).collect();
    let clusters = assign_clusters(&concepts, &vectors, &order, &NeuronClusterConfig::default()).unwrap();
    assert_eq!(clusters.len(), 3);
    for c in &clusters {
        let members: BTreeSet<NeuronRef> = c.member_neurons.iter().cloned().collect();
        assert!(groups.contains(&members));
        assert!(!c.exemplar_patch_ids.is_empty() && c.exemplar_patch_ids.len() <= 10);
    }
}

#[test]
fn schema_version_is_checked_first() {
    let bytes = br#"{"schema_version": 99, "nonsense": true}"#;
    let err = artifact::from_bytes(bytes, std::path::Path::new("m.json")).unwrap_err();
    assert!(matches!(err, audit_core::AuditError::SchemaVersion { found: 99, .. }));
}

#[test]
fn malformed_manifest_reports_position() {
    let err = artifact::from_bytes(b"{\"schema_version\": 1,", std::path::Path::new("m.json")).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("m.json") && msg.contains("line"), "{msg}");
}

#[test]
fn empty_artifact_round_trips() {
    let a = artifact::AuditArtifact::empty(fixture_manifest(2), serde_json::json!({}));
    let dir = tempfile::tempdir().unwrap();
    let path = artifact::save(&a, dir.path()).unwrap();
    assert_eq!(artifact::load(&path).unwrap(), a.canonicalized().unwrap());
}

#[test]
fn truncated_manifest_is_a_parse_error() {
    let a = random_artifact(3);
    let dir = tempfile::tempdir().unwrap();
    write_assets(&a, dir.path());
    let path = artifact::save(&a, dir.path()).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
    assert!(matches!(artifact::load(&path), Err(audit_core::AuditError::Parse { .. })));
}

#[test]
fn missing_patch_file_is_named() {
    let a = (0..).map(random_artifact).find(|a| !a.concepts.is_empty()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_assets(&a, dir.path());
    let patch = &a.concepts[0].patches[0];
    std::fs::remove_file(dir.path().join(&patch.asset)).unwrap();
    let err = artifact::save(&a, dir.path()).unwrap_err().to_string();
    assert!(err.contains(&patch.patch_id), "{err}");
    assert!(!dir.path().join(artifact::MANIFEST_FILE).exists());
}
