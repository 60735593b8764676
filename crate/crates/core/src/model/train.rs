//! Mini-batch SGD for the demo classifier.

use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::cnn::{Cnn, CnnGrads, ParamGrad};
use crate::error::{AuditError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 8,
            batch_size: 32,
            lr: 0.05,
            momentum: 0.9,
            seed: 7,
        }
    }
}

/// SGD with classical momentum over a list of parameter buffers.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<ParamGrad>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Sgd {
            lr,
            momentum,
            velocity: Vec::new(),
        }
    }

    /// `params[i]` is updated with `grads[i]`; each pair is `(weight, bias)`.
    pub fn step(&mut self, params: Vec<(&mut Vec<f64>, &mut Vec<f64>)>, grads: &[&ParamGrad]) {
        if self.velocity.is_empty() {
            self.velocity = grads.iter().map(|g| (*g).clone()).collect();
            self.velocity.iter_mut().for_each(|v| v.scale(0.0));
        }
        for (((w, b), g), v) in params.into_iter().zip(grads).zip(&mut self.velocity) {
            for ((p, gv), vv) in w.iter_mut().zip(&g.weight).zip(&mut v.weight) {
                *vv = self.momentum * *vv + gv;
                *p -= self.lr * *vv;
            }
            for ((p, gv), vv) in b.iter_mut().zip(&g.bias).zip(&mut v.bias) {
                *vv = self.momentum * *vv + gv;
                *p -= self.lr * *vv;
            }
        }
    }
}

/// Trains with softmax cross-entropy. Returns the mean training loss per epoch.
pub fn train_classifier(
    cnn: &mut Cnn,
    data: &[(Array3<f64>, usize)],
    config: &TrainConfig,
) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(AuditError::Config("no training samples".into()));
    }
    if config.batch_size == 0 {
        return Err(AuditError::Config("batch_size must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut sgd = Sgd::new(config.lr, config.momentum);
    let mut curve = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(config.batch_size) {
            let model = &*cnn;
            // Ordered collect keeps the float reduction deterministic.
            let per_sample = batch
                .par_iter()
                .map(|&i| model.loss_and_grads(&data[i].0, data[i].1))
                .collect::<Result<Vec<_>>>()?;
            let mut total = CnnGrads::zeros(cnn);
            for (loss, g) in &per_sample {
                epoch_loss += loss;
                total.add_assign(g);
            }
            total.scale(1.0 / batch.len() as f64);
            if !total.is_finite() {
                return Err(AuditError::Diverged {
                    epoch,
                    detail: "non-finite classifier gradient".into(),
                });
            }
            let mut grads: Vec<&ParamGrad> = total.stages.iter().collect();
            grads.push(&total.head);
            let mut params: Vec<(&mut Vec<f64>, &mut Vec<f64>)> = cnn
                .stages
                .iter_mut()
                .map(|s| (&mut s.conv.weight, &mut s.conv.bias))
                .collect();
            params.push((&mut cnn.head.weight, &mut cnn.head.bias));
            sgd.step(params, &grads);
        }
        let mean = epoch_loss / data.len() as f64;
        if !mean.is_finite() {
            return Err(AuditError::Diverged {
                epoch,
                detail: format!("mean loss {mean}"),
            });
        }
        log::info!("classifier epoch {epoch}: loss {mean:.4}");
        curve.push(mean);
    }
    Ok(curve)
}
