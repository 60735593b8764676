//! One-command reproduction on synthetic data: generate the biased shapes
//! dataset, train a small CNN on its training split, audit the audit split.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::dataset::{BiasSpec, Split};
use crate::error::{AuditError, Result};
use crate::model::{load_rgb, train_classifier, Cnn, InputShape, Pool, Preprocessing, StageSpec, TrainConfig};
use crate::neuron_clusters::{EmbedTrainConfig, NeuronClusterConfig};
use crate::patches::PatchConfig;
use crate::pipeline::{run_audit, PipelineConfig, RunOutcome};
use crate::subgroups::ClusterConfig;
use crate::synthetic::{generate_shapes, ShapesConfig, ATTRIBUTE, CLASS_NAMES};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DemoConfig {
    pub shapes: ShapesConfig,
    pub train: TrainConfig,
    pub model_seed: u64,
    pub pipeline_seed: u64,
    pub patch_size: usize,
    pub pairs: usize,
    pub embedder_epochs: usize,
    pub embedder_lr: f64,
}

impl Default for DemoConfig {
    fn default() -> Self {
        DemoConfig {
            shapes: ShapesConfig::default(),
            train: TrainConfig {
                epochs: 12,
                ..TrainConfig::default()
            },
            model_seed: 3,
            pipeline_seed: 5,
            patch_size: 12,
            pairs: 500,
            embedder_epochs: 10,
            embedder_lr: 0.01,
        }
    }
}

pub fn demo_architecture() -> Vec<StageSpec> {
    vec![
        StageSpec { id: "conv1".into(), out_channels: 8, kernel: 3, pool: Pool::Avg2 },
        StageSpec { id: "conv2".into(), out_channels: 16, kernel: 3, pool: Pool::Avg2 },
        StageSpec { id: "conv3".into(), out_channels: 32, kernel: 3, pool: Pool::None },
    ]
}

#[derive(Debug, Clone)]
pub struct DemoOutcome {
    pub dataset: PathBuf,
    pub model: PathBuf,
    pub train_losses: Vec<f64>,
    pub run: RunOutcome,
    pub seconds: f64,
}

/// Pipeline settings for the demo: library defaults except where the 32 px
/// images and small pair budget call for smaller values.
pub fn demo_pipeline_config(dir: &Path, dataset: &Path, model: &Path, config: &DemoConfig) -> PipelineConfig {
    PipelineConfig {
        model: model.to_path_buf(),
        dataset: dataset.to_path_buf(),
        output: dir.join("artifact"),
        split: Split::Audit,
        bias: Some(BiasSpec {
            attribute: ATTRIBUTE.to_string(),
            label: 1,
            target_cooccurrence: config.shapes.train_cooccurrence,
            seed: config.shapes.seed,
        }),
        subgroup_clustering: ClusterConfig::default(),
        patches: PatchConfig {
            patch_size: config.patch_size,
            ..PatchConfig::default()
        },
        positive_pairs: config.pairs,
        negative_pairs: config.pairs,
        embedder: EmbedTrainConfig {
            epochs: config.embedder_epochs,
            lr: config.embedder_lr,
            ..EmbedTrainConfig::default()
        },
        neuron_clustering: NeuronClusterConfig::default(),
        ..PipelineConfig::default()
    }
    .with_seed(config.pipeline_seed)
}

/// Writes `data/`, `model.ckpt` and `artifact/` under `dir`.
pub fn run_demo(dir: &Path, config: &DemoConfig) -> Result<DemoOutcome> {
    let start = Instant::now();
    std::fs::create_dir_all(dir).map_err(|e| AuditError::io(dir, e))?;
    let (dataset, records) = generate_shapes(&dir.join("data"), &config.shapes)?;
    let size = config.shapes.image_size as usize;
    let pre = Preprocessing::new(size, size, [0.5; 3], [0.25; 3]);
    let train = records
        .iter()
        .filter(|r| r.split == Split::Train)
        .map(|r| {
            let img = load_rgb(&dataset.parent().expect("in dir").join(&r.path))?;
            Ok((pre.to_tensor(&img), r.true_label))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut model = Cnn::random(
        CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
        InputShape { height: size, width: size, channels: 3 },
        pre,
        &demo_architecture(),
        config.model_seed,
    )?;
    let train_losses = train_classifier(&mut model, &train, &config.train)?;
    let model_path = dir.join("model.ckpt");
    model.save(&model_path)?;
    let pipeline = demo_pipeline_config(dir, &dataset, &model_path, config);
    let run = run_audit(&pipeline)?;
    Ok(DemoOutcome {
        dataset,
        model: model_path,
        train_losses,
        run,
        seconds: start.elapsed().as_secs_f64(),
    })
}
