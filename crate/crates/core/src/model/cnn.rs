//! A small convolutional network with hand-written forward and backward passes.
//!
//! The network is a chain of convolutional stages (3x3 "same" convolution,
//! optional ReLU, optional 2x2 average pooling) followed by a global average
//! pool and a linear classification head. Every stage output is a capturable
//! layer; the last stage is the feature layer.

use ndarray::Array3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{
    argmax, ActivationTensor, Classifier, InputShape, LayerInfo, ModelManifest, Prediction,
    Preprocessing,
};
use crate::error::{AuditError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    /// `[out][in][ky][kx]`, row-major.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv2d {
    pub fn zeros(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        assert!(kernel % 2 == 1, "kernel size must be odd");
        Conv2d {
            in_channels,
            out_channels,
            kernel,
            weight: vec![0.0; out_channels * in_channels * kernel * kernel],
            bias: vec![0.0; out_channels],
        }
    }

    /// Channel-wise identity: output channel `c` copies input channel `c`.
    pub fn identity(channels: usize, kernel: usize) -> Self {
        let mut conv = Conv2d::zeros(channels, channels, kernel);
        let centre = kernel / 2;
        for c in 0..channels {
            let idx = conv.widx(c, c, centre, centre);
            conv.weight[idx] = 1.0;
        }
        conv
    }

    pub fn widx(&self, o: usize, i: usize, ky: usize, kx: usize) -> usize {
        ((o * self.in_channels + i) * self.kernel + ky) * self.kernel + kx
    }

    pub fn forward(&self, x: &Array3<f64>) -> Array3<f64> {
        let (c, h, w) = x.dim();
        debug_assert_eq!(c, self.in_channels);
        let xs = x.as_slice().expect("standard layout");
        let k = self.kernel;
        let pad = (k / 2) as isize;
        let mut out = vec![0.0; self.out_channels * h * w];
        for o in 0..self.out_channels {
            let plane = &mut out[o * h * w..(o + 1) * h * w];
            plane.fill(self.bias[o]);
            for i in 0..c {
                let input = &xs[i * h * w..(i + 1) * h * w];
                for ky in 0..k {
                    let dy = ky as isize - pad;
                    let (y0, y1) = valid_range(h, dy);
                    for kx in 0..k {
                        let dx = kx as isize - pad;
                        let (x0, x1) = valid_range(w, dx);
                        let wv = self.weight[self.widx(o, i, ky, kx)];
                        if wv == 0.0 {
                            continue;
                        }
                        for y in y0..y1 {
                            let sy = (y as isize + dy) as usize;
                            let src = &input[sy * w..(sy + 1) * w];
                            let dst = &mut plane[y * w..(y + 1) * w];
                            for xx in x0..x1 {
                                dst[xx] += wv * src[(xx as isize + dx) as usize];
                            }
                        }
                    }
                }
            }
        }
        Array3::from_shape_vec((self.out_channels, h, w), out).expect("shape")
    }

    /// Returns the gradient with respect to the input (when requested) and
    /// accumulates parameter gradients into `grad` (when provided).
    pub fn backward(
        &self,
        x: &Array3<f64>,
        grad_out: &Array3<f64>,
        want_input_grad: bool,
        grad: Option<&mut ParamGrad>,
    ) -> Option<Array3<f64>> {
        let (c, h, w) = x.dim();
        let xs = x.as_slice().expect("standard layout");
        let gs = grad_out.as_slice().expect("standard layout");
        let k = self.kernel;
        let pad = (k / 2) as isize;

        if let Some(pg) = grad {
            for o in 0..self.out_channels {
                let g = &gs[o * h * w..(o + 1) * h * w];
                pg.bias[o] += g.iter().sum::<f64>();
                for i in 0..c {
                    let input = &xs[i * h * w..(i + 1) * h * w];
                    for ky in 0..k {
                        let dy = ky as isize - pad;
                        let (y0, y1) = valid_range(h, dy);
                        for kx in 0..k {
                            let dx = kx as isize - pad;
                            let (x0, x1) = valid_range(w, dx);
                            let mut acc = 0.0;
                            for y in y0..y1 {
                                let sy = (y as isize + dy) as usize;
                                let src = &input[sy * w..(sy + 1) * w];
                                let gr = &g[y * w..(y + 1) * w];
                                for xx in x0..x1 {
                                    acc += gr[xx] * src[(xx as isize + dx) as usize];
                                }
                            }
                            pg.weight[self.widx(o, i, ky, kx)] += acc;
                        }
                    }
                }
            }
        }

        if !want_input_grad {
            return None;
        }
        let mut gin = vec![0.0; c * h * w];
        for o in 0..self.out_channels {
            let g = &gs[o * h * w..(o + 1) * h * w];
            for i in 0..c {
                let dst_plane = &mut gin[i * h * w..(i + 1) * h * w];
                for ky in 0..k {
                    let dy = ky as isize - pad;
                    let (y0, y1) = valid_range(h, dy);
                    for kx in 0..k {
                        let dx = kx as isize - pad;
                        let (x0, x1) = valid_range(w, dx);
                        let wv = self.weight[self.widx(o, i, ky, kx)];
                        if wv == 0.0 {
                            continue;
                        }
                        for y in y0..y1 {
                            let sy = (y as isize + dy) as usize;
                            let gr = &g[y * w..(y + 1) * w];
                            let dst = &mut dst_plane[sy * w..(sy + 1) * w];
                            for xx in x0..x1 {
                                dst[(xx as isize + dx) as usize] += wv * gr[xx];
                            }
                        }
                    }
                }
            }
        }
        Some(Array3::from_shape_vec((c, h, w), gin).expect("shape"))
    }
}

/// Output rows/cols `[lo, hi)` whose shifted source index stays in bounds.
fn valid_range(len: usize, shift: isize) -> (usize, usize) {
    let lo = (-shift).max(0) as usize;
    let hi = (len as isize - shift.max(0)).max(0) as usize;
    (lo.min(len), hi.min(len))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pool {
    None,
    /// 2x2 average pooling with stride 2; a trailing odd row/column is dropped.
    Avg2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage {
    pub id: String,
    pub conv: Conv2d,
    pub relu: bool,
    pub pool: Pool,
}

impl Stage {
    pub fn output_dims(&self, h: usize, w: usize) -> (usize, usize) {
        match self.pool {
            Pool::None => (h, w),
            Pool::Avg2 => (h / 2, w / 2),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub inputs: usize,
    pub outputs: usize,
    /// `[out][in]`, row-major.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Linear {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Linear {
            inputs,
            outputs,
            weight: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut l = Linear::zeros(n, n);
        for i in 0..n {
            l.weight[i * n + i] = 1.0;
        }
        l
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        (0..self.outputs)
            .map(|o| {
                let row = &self.weight[o * self.inputs..(o + 1) * self.inputs];
                self.bias[o] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect()
    }

    /// Gradient with respect to the input; accumulates parameter gradients.
    pub fn backward(&self, x: &[f64], grad_out: &[f64], grad: Option<&mut ParamGrad>) -> Vec<f64> {
        if let Some(pg) = grad {
            for o in 0..self.outputs {
                pg.bias[o] += grad_out[o];
                for i in 0..self.inputs {
                    pg.weight[o * self.inputs + i] += grad_out[o] * x[i];
                }
            }
        }
        (0..self.inputs)
            .map(|i| {
                (0..self.outputs)
                    .map(|o| self.weight[o * self.inputs + i] * grad_out[o])
                    .sum()
            })
            .collect()
    }
}

/// Gradient buffers matching one parameterised layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrad {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ParamGrad {
    pub fn for_conv(conv: &Conv2d) -> Self {
        ParamGrad {
            weight: vec![0.0; conv.weight.len()],
            bias: vec![0.0; conv.bias.len()],
        }
    }

    pub fn for_linear(lin: &Linear) -> Self {
        ParamGrad {
            weight: vec![0.0; lin.weight.len()],
            bias: vec![0.0; lin.bias.len()],
        }
    }

    pub fn add_assign(&mut self, other: &ParamGrad) {
        for (a, b) in self.weight.iter_mut().zip(&other.weight) {
            *a += b;
        }
        for (a, b) in self.bias.iter_mut().zip(&other.bias) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.weight.iter_mut().for_each(|v| *v *= s);
        self.bias.iter_mut().for_each(|v| *v *= s);
    }

    pub fn is_finite(&self) -> bool {
        self.weight.iter().chain(&self.bias).all(|v| v.is_finite())
    }
}

/// Intermediate values of one forward pass through the stage chain.
#[derive(Debug, Clone)]
pub struct Trace {
    /// `outputs[0]` is the network input; `outputs[s + 1]` is stage `s`'s output.
    pub outputs: Vec<Array3<f64>>,
    /// Convolution output of each stage, before ReLU and pooling.
    pub pre: Vec<Array3<f64>>,
}

pub fn forward_stages(stages: &[Stage], input: &Array3<f64>) -> Trace {
    let mut outputs = Vec::with_capacity(stages.len() + 1);
    let mut pre = Vec::with_capacity(stages.len());
    outputs.push(input.as_standard_layout().into_owned());
    for stage in stages {
        let z = stage.conv.forward(outputs.last().expect("nonempty"));
        let a = if stage.relu { z.mapv(|v| v.max(0.0)) } else { z.clone() };
        let out = match stage.pool {
            Pool::None => a,
            Pool::Avg2 => avg_pool2(&a),
        };
        pre.push(z);
        outputs.push(out);
    }
    Trace { outputs, pre }
}

/// Runs the stages after output index `from` (so `from = s + 1` resumes after stage `s`).
pub fn forward_from(stages: &[Stage], from: usize, activation: &Array3<f64>) -> Array3<f64> {
    let tail = &stages[from..];
    let trace = forward_stages(tail, activation);
    trace.outputs.into_iter().last().expect("nonempty")
}

/// Backpropagates `grad` (with respect to `trace.outputs[from]`) down to
/// `trace.outputs[down_to]`. Parameter gradients for the traversed stages are
/// accumulated into `param_grads` when provided (indexed by stage).
pub fn backward_stages(
    stages: &[Stage],
    trace: &Trace,
    from: usize,
    grad: Array3<f64>,
    down_to: usize,
    mut param_grads: Option<&mut [ParamGrad]>,
) -> Option<Array3<f64>> {
    let mut g = grad;
    for s in (down_to..from).rev() {
        let stage = &stages[s];
        let z = &trace.pre[s];
        let mut ga = match stage.pool {
            Pool::None => g,
            Pool::Avg2 => avg_pool2_backward(&g, z.dim()),
        };
        if stage.relu {
            ga.zip_mut_with(z, |gv, &zv| {
                if zv <= 0.0 {
                    *gv = 0.0;
                }
            });
        }
        let want_input = s > down_to || down_to > 0 || param_grads.is_none();
        let pg = param_grads.as_deref_mut().map(|p| &mut p[s]);
        match stage.conv.backward(&trace.outputs[s], &ga, want_input, pg) {
            Some(gi) => g = gi,
            None => return None,
        }
    }
    Some(g)
}

pub fn avg_pool2(x: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = x.dim();
    let (oh, ow) = (h / 2, w / 2);
    Array3::from_shape_fn((c, oh, ow), |(ch, y, xx)| {
        0.25 * (x[[ch, 2 * y, 2 * xx]]
            + x[[ch, 2 * y, 2 * xx + 1]]
            + x[[ch, 2 * y + 1, 2 * xx]]
            + x[[ch, 2 * y + 1, 2 * xx + 1]])
    })
}

fn avg_pool2_backward(g: &Array3<f64>, input_dims: (usize, usize, usize)) -> Array3<f64> {
    let (c, h, w) = input_dims;
    let (_, oh, ow) = g.dim();
    Array3::from_shape_fn((c, h, w), |(ch, y, xx)| {
        let (py, px) = (y / 2, xx / 2);
        if py < oh && px < ow {
            0.25 * g[[ch, py, px]]
        } else {
            0.0
        }
    })
}

pub fn global_avg_pool(x: &Array3<f64>) -> Vec<f64> {
    let (c, h, w) = x.dim();
    let area = (h * w) as f64;
    let xs = x.as_slice().expect("standard layout");
    (0..c)
        .map(|ch| xs[ch * h * w..(ch + 1) * h * w].iter().sum::<f64>() / area)
        .collect()
}

pub fn global_avg_pool_backward(g: &[f64], dims: (usize, usize, usize)) -> Array3<f64> {
    let (c, h, w) = dims;
    let area = (h * w) as f64;
    Array3::from_shape_fn((c, h, w), |(ch, _, _)| g[ch] / area)
}

/// Architecture description used to build a freshly initialised network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSpec {
    pub id: String,
    pub out_channels: usize,
    pub kernel: usize,
    pub pool: Pool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cnn {
    pub format: String,
    pub class_names: Vec<String>,
    pub input_shape: InputShape,
    pub preprocessing: Preprocessing,
    pub stages: Vec<Stage>,
    pub head: Linear,
    pub saliency_layer: String,
}

pub const CHECKPOINT_FORMAT: &str = "audit-cnn/v1";

impl Cnn {
    /// He-initialised network; ReLU follows every convolution.
    pub fn random(
        class_names: Vec<String>,
        input_shape: InputShape,
        preprocessing: Preprocessing,
        specs: &[StageSpec],
        seed: u64,
    ) -> Result<Self> {
        if specs.is_empty() {
            return Err(AuditError::Config("network needs at least one stage".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut in_ch = input_shape.channels;
        let mut stages = Vec::with_capacity(specs.len());
        for spec in specs {
            let mut conv = Conv2d::zeros(in_ch, spec.out_channels, spec.kernel);
            let fan_in = (in_ch * spec.kernel * spec.kernel) as f64;
            let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("finite std");
            conv.weight.iter_mut().for_each(|v| *v = normal.sample(&mut rng));
            stages.push(Stage {
                id: spec.id.clone(),
                conv,
                relu: true,
                pool: spec.pool,
            });
            in_ch = spec.out_channels;
        }
        let mut head = Linear::zeros(in_ch, class_names.len());
        let normal = Normal::new(0.0, (1.0 / in_ch as f64).sqrt()).expect("finite std");
        head.weight.iter_mut().for_each(|v| *v = normal.sample(&mut rng));
        let saliency_layer = stages.last().expect("nonempty").id.clone();
        Cnn::from_parts(class_names, input_shape, preprocessing, stages, head, saliency_layer)
    }

    pub fn from_parts(
        class_names: Vec<String>,
        input_shape: InputShape,
        preprocessing: Preprocessing,
        stages: Vec<Stage>,
        head: Linear,
        saliency_layer: String,
    ) -> Result<Self> {
        let cnn = Cnn {
            format: CHECKPOINT_FORMAT.to_string(),
            class_names,
            input_shape,
            preprocessing,
            stages,
            head,
            saliency_layer,
        };
        cnn.check()?;
        Ok(cnn)
    }

    fn check(&self) -> Result<()> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(AuditError::Validation(format!(
                "unsupported checkpoint format `{}`",
                self.format
            )));
        }
        if self.stages.is_empty() {
            return Err(AuditError::Validation("checkpoint has no stages".into()));
        }
        if self.class_names.is_empty() {
            return Err(AuditError::Validation("checkpoint has no classes".into()));
        }
        let mut in_ch = self.input_shape.channels;
        let (mut h, mut w) = (self.input_shape.height, self.input_shape.width);
        let mut seen = std::collections::HashSet::new();
        for stage in &self.stages {
            let conv = &stage.conv;
            if !seen.insert(stage.id.as_str()) {
                return Err(AuditError::Validation(format!("duplicate layer id `{}`", stage.id)));
            }
            if conv.in_channels != in_ch
                || conv.weight.len() != conv.out_channels * conv.in_channels * conv.kernel * conv.kernel
                || conv.bias.len() != conv.out_channels
                || conv.kernel % 2 == 0
            {
                return Err(AuditError::Validation(format!(
                    "layer `{}` has inconsistent shapes",
                    stage.id
                )));
            }
            (h, w) = stage.output_dims(h, w);
            if h == 0 || w == 0 {
                return Err(AuditError::Validation(format!(
                    "layer `{}` pools the input down to nothing",
                    stage.id
                )));
            }
            in_ch = conv.out_channels;
        }
        if self.head.inputs != in_ch
            || self.head.outputs != self.class_names.len()
            || self.head.weight.len() != self.head.inputs * self.head.outputs
            || self.head.bias.len() != self.head.outputs
        {
            return Err(AuditError::Validation("head shape does not match the feature layer".into()));
        }
        if !seen.contains(self.saliency_layer.as_str()) {
            return Err(AuditError::UnknownLayer(self.saliency_layer.clone()));
        }
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| AuditError::io(path, e))?;
        let cnn: Cnn = serde_json::from_str(&text).map_err(|e| AuditError::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        cnn.check()?;
        Ok(cnn)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text).map_err(|e| AuditError::io(path, e))
    }

    pub fn stage_index(&self, layer_id: &str) -> Result<usize> {
        self.stages
            .iter()
            .position(|s| s.id == layer_id)
            .ok_or_else(|| AuditError::UnknownLayer(layer_id.to_string()))
    }

    fn check_input(&self, input: &Array3<f64>) -> Result<()> {
        let expected = (
            self.input_shape.channels,
            self.input_shape.height,
            self.input_shape.width,
        );
        if input.dim() != expected {
            return Err(AuditError::RejectedInput(format!(
                "expected (C,H,W) = {:?}, got {:?}",
                expected,
                input.dim()
            )));
        }
        if input.iter().any(|v| !v.is_finite()) {
            return Err(AuditError::RejectedInput("input contains non-finite values".into()));
        }
        Ok(())
    }

    pub fn trace(&self, input: &Array3<f64>) -> Result<Trace> {
        self.check_input(input)?;
        Ok(forward_stages(&self.stages, input))
    }

    pub fn scores_from_trace(&self, trace: &Trace) -> Vec<f64> {
        let feats = global_avg_pool(trace.outputs.last().expect("nonempty"));
        self.head.forward(&feats)
    }

    /// Class scores obtained by substituting `activation` for the output of `layer_id`.
    pub fn scores_from_layer(&self, layer_id: &str, activation: &Array3<f64>) -> Result<Vec<f64>> {
        let s = self.stage_index(layer_id)?;
        let out = forward_from(&self.stages, s + 1, activation);
        Ok(self.head.forward(&global_avg_pool(&out)))
    }

    /// Cross-entropy loss of one sample and the gradient of every parameter.
    pub fn loss_and_grads(&self, input: &Array3<f64>, label: usize) -> Result<(f64, CnnGrads)> {
        let trace = self.trace(input)?;
        let last = trace.outputs.last().expect("nonempty");
        let feats = global_avg_pool(last);
        let scores = self.head.forward(&feats);
        let probs = softmax(&scores);
        let loss = -probs[label].max(1e-300).ln();
        let mut dscores = probs;
        dscores[label] -= 1.0;
        let mut grads = CnnGrads::zeros(self);
        let dfeat = self.head.backward(&feats, &dscores, Some(&mut grads.head));
        let g = global_avg_pool_backward(&dfeat, last.dim());
        let n = self.stages.len();
        backward_stages(&self.stages, &trace, n, g, 0, Some(&mut grads.stages));
        Ok((loss, grads))
    }
}

/// Parameter gradients for a whole [`Cnn`].
#[derive(Debug, Clone, PartialEq)]
pub struct CnnGrads {
    pub stages: Vec<ParamGrad>,
    pub head: ParamGrad,
}

impl CnnGrads {
    pub fn zeros(cnn: &Cnn) -> Self {
        CnnGrads {
            stages: cnn.stages.iter().map(|s| ParamGrad::for_conv(&s.conv)).collect(),
            head: ParamGrad::for_linear(&cnn.head),
        }
    }

    pub fn add_assign(&mut self, other: &CnnGrads) {
        for (a, b) in self.stages.iter_mut().zip(&other.stages) {
            a.add_assign(b);
        }
        self.head.add_assign(&other.head);
    }

    pub fn scale(&mut self, s: f64) {
        self.stages.iter_mut().for_each(|g| g.scale(s));
        self.head.scale(s);
    }

    pub fn is_finite(&self) -> bool {
        self.stages.iter().all(ParamGrad::is_finite) && self.head.is_finite()
    }
}

pub fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

impl Classifier for Cnn {
    fn manifest(&self) -> ModelManifest {
        let (mut h, mut w) = (self.input_shape.height, self.input_shape.width);
        let layers = self
            .stages
            .iter()
            .map(|s| {
                (h, w) = s.output_dims(h, w);
                LayerInfo {
                    id: s.id.clone(),
                    channels: s.conv.out_channels,
                    height: h,
                    width: w,
                }
            })
            .collect();
        ModelManifest {
            input_shape: self.input_shape,
            class_names: self.class_names.clone(),
            layers,
            feature_layer: self.stages.last().expect("nonempty").id.clone(),
            saliency_layer: self.saliency_layer.clone(),
            feature_pooling: "global_average".to_string(),
            preprocessing: self.preprocessing.clone(),
        }
    }

    fn predict(&self, input: &Array3<f64>) -> Result<Prediction> {
        let trace = self.trace(input)?;
        let scores = self.scores_from_trace(&trace);
        Ok(Prediction {
            label: argmax(&scores),
            scores,
        })
    }

    fn capture_activations(
        &self,
        input: &Array3<f64>,
        layer_ids: &[&str],
    ) -> Result<Vec<ActivationTensor>> {
        let indices = layer_ids
            .iter()
            .map(|id| self.stage_index(id))
            .collect::<Result<Vec<_>>>()?;
        let trace = self.trace(input)?;
        Ok(indices
            .into_iter()
            .map(|s| ActivationTensor {
                layer_id: self.stages[s].id.clone(),
                values: trace.outputs[s + 1].clone(),
            })
            .collect())
    }

    fn feature_vector(&self, input: &Array3<f64>) -> Result<Vec<f64>> {
        let trace = self.trace(input)?;
        Ok(global_avg_pool(trace.outputs.last().expect("nonempty")))
    }

    fn class_gradient(
        &self,
        input: &Array3<f64>,
        target_class: usize,
        layer_id: &str,
    ) -> Result<Array3<f64>> {
        Ok(self.activation_and_gradient(input, target_class, layer_id)?.1)
    }

    fn activation_and_gradient(
        &self,
        input: &Array3<f64>,
        target_class: usize,
        layer_id: &str,
    ) -> Result<(Array3<f64>, Array3<f64>)> {
        if target_class >= self.class_names.len() {
            return Err(AuditError::RejectedInput(format!(
                "class index {target_class} out of range for {} classes",
                self.class_names.len()
            )));
        }
        let s = self.stage_index(layer_id)?;
        let trace = self.trace(input)?;
        let n = self.stages.len();
        let last = &trace.outputs[n];
        let row = &self.head.weight
            [target_class * self.head.inputs..(target_class + 1) * self.head.inputs];
        let g = global_avg_pool_backward(row, last.dim());
        let grad = backward_stages(&self.stages, &trace, n, g, s + 1, None)
            .expect("input gradient requested");
        Ok((trace.outputs[s + 1].clone(), grad))
    }

    fn forward_all(&self, input: &Array3<f64>) -> Result<super::ForwardPass> {
        let trace = self.trace(input)?;
        let scores = self.scores_from_trace(&trace);
        let features = global_avg_pool(trace.outputs.last().expect("nonempty"));
        let activations = self
            .stages
            .iter()
            .zip(trace.outputs.into_iter().skip(1))
            .map(|(s, values)| ActivationTensor {
                layer_id: s.id.clone(),
                values,
            })
            .collect();
        Ok(super::ForwardPass {
            prediction: Prediction {
                label: argmax(&scores),
                scores,
            },
            features,
            activations,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn valid(len: usize, shift: isize) -> Vec<usize> {
        let (a, b) = valid_range(len, shift);
        (a..b).collect()
    }

    #[test]
    fn valid_range_clips_shifted_indices() {
        assert_eq!(valid(4, 0), vec![0, 1, 2, 3]);
        assert_eq!(valid(4, -1), vec![1, 2, 3]);
        assert_eq!(valid(4, 1), vec![0, 1, 2]);
        assert_eq!(valid(1, 2), Vec::<usize>::new());
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut conv = Conv2d::zeros(1, 1, 3);
        conv.weight = (1..=9).map(f64::from).collect();
        conv.bias = vec![0.5];
        let x = array![[[1.0, 2.0, 3.0], [4.0, 5.0, 6.0], [7.0, 8.0, 9.0]]];
        let y = conv.forward(&x);
        // Centre output sees the full kernel: sum_k k * x_k.
        let centre: f64 = (1..=9).map(|k| (k * k) as f64).sum::<f64>() + 0.5;
        assert_eq!(y[[0, 1, 1]], centre);
        // Top-left output: kernel rows/cols 1..3 over x rows/cols 0..2.
        let tl = 5.0 * 1.0 + 6.0 * 2.0 + 8.0 * 4.0 + 9.0 * 5.0 + 0.5;
        assert_eq!(y[[0, 0, 0]], tl);
    }

    #[test]
    fn avg_pool_averages_blocks() {
        let x = array![[[1.0, 3.0, 9.0], [5.0, 7.0, 9.0], [9.0, 9.0, 9.0]]];
        assert_eq!(avg_pool2(&x), array![[[4.0]]]);
    }
}
