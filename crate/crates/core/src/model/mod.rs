//! Uniform contract over an audited CNN classifier.

mod cnn;
mod preprocess;
mod train;

pub use cnn::{
    avg_pool2, backward_stages, forward_from, forward_stages, global_avg_pool,
    global_avg_pool_backward, softmax, Cnn, CnnGrads, Conv2d, Linear, ParamGrad, Pool, Stage,
    StageSpec, Trace, CHECKPOINT_FORMAT,
};
pub use preprocess::{load_rgb, Preprocessing};
pub use train::{train_classifier, Sgd, TrainConfig};

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{AuditError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerInfo {
    pub id: String,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

/// Machine-readable description of a loaded classifier. Embedded verbatim in
/// every audit artifact so downstream consumers use the same preprocessing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub input_shape: InputShape,
    pub class_names: Vec<String>,
    /// Ordered from input to output.
    pub layers: Vec<LayerInfo>,
    pub feature_layer: String,
    pub saliency_layer: String,
    pub feature_pooling: String,
    pub preprocessing: Preprocessing,
}

impl ModelManifest {
    pub fn layer(&self, id: &str) -> Option<&LayerInfo> {
        self.layers.iter().find(|l| l.id == id)
    }

    pub fn layer_position(&self, id: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.id == id)
    }

    pub fn contains(&self, neuron: &NeuronRef) -> bool {
        self.layer(&neuron.layer)
            .is_some_and(|l| neuron.channel < l.channels)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(AuditError::Validation("model declares no layers".into()));
        }
        for id in [&self.feature_layer, &self.saliency_layer] {
            if self.layer(id).is_none() {
                return Err(AuditError::UnknownLayer(id.clone()));
            }
        }
        Ok(())
    }
}

/// The activation map of one layer, shaped `(channels, height, width)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTensor {
    pub layer_id: String,
    pub values: Array3<f64>,
}

/// One channel of one layer.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct NeuronRef {
    pub layer: String,
    pub channel: usize,
}

impl NeuronRef {
    pub fn new(layer: impl Into<String>, channel: usize) -> Self {
        NeuronRef {
            layer: layer.into(),
            channel,
        }
    }

    /// Filesystem- and URL-safe key, e.g. `conv2_7`.
    pub fn key(&self) -> String {
        format!("{}_{}", self.layer, self.channel)
    }
}

impl std::fmt::Display for NeuronRef {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}:{}", self.layer, self.channel)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub label: usize,
    pub scores: Vec<f64>,
}

/// Everything one forward pass yields.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub prediction: Prediction,
    pub features: Vec<f64>,
    /// One tensor per capturable layer, input to output.
    pub activations: Vec<ActivationTensor>,
}

/// Index of the largest score; ties go to the lowest index.
pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// Inputs are preprocessed tensors shaped `(channels, height, width)`.
pub trait Classifier: Send + Sync {
    fn manifest(&self) -> ModelManifest;

    fn predict(&self, input: &Array3<f64>) -> Result<Prediction>;

    /// One tensor per requested layer, in request order.
    fn capture_activations(&self, input: &Array3<f64>, layer_ids: &[&str])
        -> Result<Vec<ActivationTensor>>;

    /// Feature-layer activation reduced by the model's own pooling.
    fn feature_vector(&self, input: &Array3<f64>) -> Result<Vec<f64>>;

    /// Gradient of `target_class`'s score with respect to `layer_id`'s activations.
    fn class_gradient(
        &self,
        _input: &Array3<f64>,
        _target_class: usize,
        _layer_id: &str,
    ) -> Result<Array3<f64>> {
        Err(AuditError::Capability("backend is not differentiable".into()))
    }

    fn activation_and_gradient(
        &self,
        input: &Array3<f64>,
        target_class: usize,
        layer_id: &str,
    ) -> Result<(Array3<f64>, Array3<f64>)> {
        let grad = self.class_gradient(input, target_class, layer_id)?;
        let act = self
            .capture_activations(input, &[layer_id])?
            .pop()
            .expect("one layer requested");
        Ok((act.values, grad))
    }

    fn forward_all(&self, input: &Array3<f64>) -> Result<ForwardPass> {
        let manifest = self.manifest();
        let ids: Vec<&str> = manifest.layers.iter().map(|l| l.id.as_str()).collect();
        Ok(ForwardPass {
            prediction: self.predict(input)?,
            features: self.feature_vector(input)?,
            activations: self.capture_activations(input, &ids)?,
        })
    }
}
