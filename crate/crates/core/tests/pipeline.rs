use std::collections::BTreeMap;
use std::path::Path;

use audit_core::artifact::{self, MANIFEST_FILE};
use audit_core::dataset::Split;
use audit_core::demo::{demo_architecture, demo_pipeline_config, DemoConfig};
use audit_core::model::{load_rgb, train_classifier, Cnn, InputShape, Preprocessing, TrainConfig};
use audit_core::pipeline::{run_audit, PipelineConfig};
use audit_core::subgroups::ClusterConfig;
use audit_core::synthetic::{generate_shapes, ShapesConfig, CLASS_NAMES};

/// Small dataset, briefly trained model, fast pipeline settings.
fn small_setup(dir: &Path) -> PipelineConfig {
    let shapes = ShapesConfig { train_per_class: 120, audit_per_class: 60, ..ShapesConfig::default() };
    let (dataset, records) = generate_shapes(&dir.join("data"), &shapes).unwrap();
    let pre = Preprocessing::new(32, 32, [0.5; 3], [0.25; 3]);
    let train: Vec<_> = records
        .iter()
        .filter(|r| r.split == Split::Train)
        .map(|r| (pre.to_tensor(&load_rgb(&dir.join("data").join(&r.path)).unwrap()), r.true_label))
        .collect();
    let mut model = Cnn::random(
        CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
        InputShape { height: 32, width: 32, channels: 3 },
        pre,
        &demo_architecture(),
        1,
    )
    .unwrap();
    train_classifier(&mut model, &train, &TrainConfig { epochs: 2, ..TrainConfig::default() }).unwrap();
    let model_path = dir.join("model.ckpt");
    model.save(&model_path).unwrap();
    let demo = DemoConfig { pairs: 40, embedder_epochs: 2, ..DemoConfig::default() };
    let mut c = demo_pipeline_config(dir, &dataset, &model_path, &demo);
    c.subgroup_clustering = ClusterConfig { n_clusters: Some(12), ..c.subgroup_clustering };
    c.patches.top_images = 4;
    c.patches.masks_per_image = 8;
    c
}

#[test]
fn small_run_is_consistent_resumable_and_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_setup(dir.path());
    let first = run_audit(&config).unwrap();
    let bytes = std::fs::read(&first.manifest).unwrap();
    let a = artifact::load(&config.output).unwrap();
    assert_eq!(a, first.artifact);

    // Every audit image in exactly one subgroup.
    let mut seen: BTreeMap<&str, usize> = BTreeMap::new();
    for s in &a.subgroups {
        for m in &s.member_ids {
            *seen.entry(m).or_default() += 1;
        }
    }
    assert_eq!(seen.len(), a.images.len());
    assert!(seen.values().all(|&c| c == 1));
    assert_eq!(a.images.len(), 120);
    for e in &a.saliency.entries {
        let map = audit_core::saliency::decode_heatmap(&e.heatmap, e.height, e.width).unwrap();
        assert!(map.iter().all(|v| (0.0..=1.0).contains(v)));
    }
    for c in &a.concepts {
        assert!(c.patches.len() <= 10);
        for p in &c.patches {
            assert!(p.bbox.fits(32, 32));
        }
    }

    let resumed = run_audit(&PipelineConfig { resume: true, ..config.clone() }).unwrap();
    assert!(resumed.timings.iter().any(|t| t.cached));
    assert_eq!(std::fs::read(&resumed.manifest).unwrap(), bytes);

    let fresh = run_audit(&config).unwrap();
    assert!(fresh.timings.iter().all(|t| !t.cached));
    assert_eq!(std::fs::read(&fresh.manifest).unwrap(), bytes);
    assert!(config.output.join(MANIFEST_FILE).is_file());
}

#[test]
fn no_underperforming_subgroups_still_saves() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = small_setup(dir.path());
    // Every subgroup is too small to be classified.
    config.selection.min_size = 10_000;
    let run = run_audit(&config).unwrap();
    let a = &run.artifact;
    assert!(a.pairings.is_empty() && a.neuron_scores.is_empty() && a.saliency.entries.is_empty());
    assert!(a.notices.iter().any(|n| n.contains("no underperforming")), "{:?}", a.notices);
    assert_eq!(artifact::load(&config.output).unwrap(), *a);
}

#[test]
fn missing_paths_are_config_errors() {
    let err = run_audit(&PipelineConfig::default()).unwrap_err();
    assert!(matches!(err, audit_core::AuditError::Config(_)), "{err}");
}

#[test]
fn out_of_range_top_rate_is_rejected() {
    let c = PipelineConfig {
        model: "m".into(),
        dataset: "d".into(),
        output: "o".into(),
        top_rate: 0.0,
        ..PipelineConfig::default()
    };
    assert!(c.validate().is_err());
}
