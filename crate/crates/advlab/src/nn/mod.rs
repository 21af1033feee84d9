//! Minimal differentiable classifier.
//!
//! A model is an ordered list of layers (dense, 2-d convolution, ReLU,
//! flatten) ending in `n_classes` logits, trained with softmax
//! cross-entropy. Gradients are exact reverse-mode, computed by hand per
//! layer; there is no general autodiff graph. Everything runs in `f64` on a
//! single thread and is bit-deterministic for fixed inputs and parameters.

mod backprop;
mod container;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::array::DenseArray;
use crate::error::{Error, Result};

pub use container::{load_model, save_model, CONTAINER_MAGIC, CONTAINER_VERSION};

/// One layer of a [`ModelSpec`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layer {
    /// Affine map from `in_dim` to `out_dim`; weight shape `[out, in]`.
    Dense { in_dim: usize, out_dim: usize },
    /// 2-d convolution over `[channels, height, width]` input.
    Conv2d {
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    /// Elementwise `max(0, x)`; the subgradient at 0 is taken as 0.
    Relu,
    /// Reshape a row to one dimension.
    Flatten,
}

impl Layer {
    /// Whether this layer carries parameters (a weight and a bias tensor).
    pub fn has_params(&self) -> bool {
        matches!(self, Layer::Dense { .. } | Layer::Conv2d { .. })
    }

    /// Output row shape for a given input row shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match *self {
            Layer::Dense { in_dim, out_dim } => {
                if input != [in_dim] {
                    return Err(Error::config(format!(
                        "dense layer wants input [{in_dim}], got {input:?}"
                    )));
                }
                Ok(vec![out_dim])
            }
            Layer::Conv2d { in_ch, out_ch, kernel, stride, pad } => {
                let [c, h, w] = *input else {
                    return Err(Error::config(format!(
                        "conv2d wants a [channels, height, width] input, got {input:?}"
                    )));
                };
                if c != in_ch {
                    return Err(Error::config(format!(
                        "conv2d wants {in_ch} input channels, got {c}"
                    )));
                }
                if kernel == 0 || stride == 0 {
                    return Err(Error::config("conv2d kernel and stride must be positive".into()));
                }
                let span_h = (h + 2 * pad).checked_sub(kernel);
                let span_w = (w + 2 * pad).checked_sub(kernel);
                let (Some(sh), Some(sw)) = (span_h, span_w) else {
                    return Err(Error::config(format!(
                        "conv2d kernel {kernel} larger than padded input {h}x{w} (pad {pad})"
                    )));
                };
                if sh % stride != 0 || sw % stride != 0 {
                    return Err(Error::config(format!(
                        "conv2d stride {stride} does not evenly cover the padded input"
                    )));
                }
                Ok(vec![out_ch, sh / stride + 1, sw / stride + 1])
            }
            Layer::Relu => Ok(input.to_vec()),
            Layer::Flatten => Ok(vec![input.iter().product()]),
        }
    }

    /// Shapes of the parameter tensors, `[weight, bias]`, empty if none.
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        match *self {
            Layer::Dense { in_dim, out_dim } => vec![vec![out_dim, in_dim], vec![out_dim]],
            Layer::Conv2d { in_ch, out_ch, kernel, .. } => {
                vec![vec![out_ch, in_ch, kernel, kernel], vec![out_ch]]
            }
            _ => vec![],
        }
    }

    fn fan_in_out(&self) -> Option<(usize, usize)> {
        match *self {
            Layer::Dense { in_dim, out_dim } => Some((in_dim, out_dim)),
            Layer::Conv2d { in_ch, out_ch, kernel, .. } => {
                Some((in_ch * kernel * kernel, out_ch * kernel * kernel))
            }
            _ => None,
        }
    }
}

/// Architecture description: per-example input shape plus the layer list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    /// Shape of a single example, without the batch dimension.
    pub input_shape: Vec<usize>,
    pub layers: Vec<Layer>,
    pub n_classes: usize,
}

impl ModelSpec {
    /// Checks that adjacent layers compose and that the final output is
    /// exactly `[n_classes]`.
    pub fn validate(&self) -> Result<()> {
        if self.n_classes == 0 {
            return Err(Error::config("n_classes must be positive".into()));
        }
        if self.input_shape.is_empty() || self.input_shape.iter().any(|&d| d == 0) {
            return Err(Error::config(format!(
                "input shape {:?} must be non-empty and positive",
                self.input_shape
            )));
        }
        let mut shape = self.input_shape.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            shape = layer
                .output_shape(&shape)
                .map_err(|e| Error::config(format!("layer {i}: {e}")))?;
        }
        if shape != [self.n_classes] {
            return Err(Error::config(format!(
                "model output shape {shape:?} does not match [{}]",
                self.n_classes
            )));
        }
        Ok(())
    }

    /// Parameter tensor shapes in layer order (weight then bias per layer).
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        self.layers.iter().flat_map(|l| l.param_shapes()).collect()
    }

    /// Total number of scalar parameters.
    pub fn n_params(&self) -> usize {
        self.param_shapes().iter().map(|s| s.iter().product::<usize>()).sum()
    }
}

/// Current parameter values plus SGD momentum buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub params: Vec<DenseArray>,
    pub momentum: Vec<DenseArray>,
}

impl ModelState {
    /// Zero-initialized state matching `spec` (all weights and buffers 0).
    pub fn zeros(spec: &ModelSpec) -> Result<Self> {
        let params = spec
            .param_shapes()
            .into_iter()
            .map(DenseArray::zeros)
            .collect::<Result<Vec<_>>>()?;
        let momentum = params.clone();
        Ok(Self { params, momentum })
    }

    /// Glorot-style init: weights uniform in `±sqrt(6/(fan_in+fan_out))`,
    /// biases and momentum buffers zero. Draw order is layer order,
    /// row-major within each weight tensor.
    pub fn init(spec: &ModelSpec, rng: &mut impl Rng) -> Result<Self> {
        let mut params = Vec::new();
        for layer in &spec.layers {
            let shapes = layer.param_shapes();
            if shapes.is_empty() {
                continue;
            }
            let (fan_in, fan_out) = layer.fan_in_out().expect("parameterized layer");
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let w_shape = shapes[0].clone();
            let n: usize = w_shape.iter().product();
            let mut w = Vec::with_capacity(n);
            for _ in 0..n {
                w.push(rng.gen_range(-limit..=limit));
            }
            params.push(DenseArray::new(w_shape, w)?);
            params.push(DenseArray::zeros(shapes[1].clone())?);
        }
        let momentum = params
            .iter()
            .map(|p| DenseArray::zeros(p.shape().to_vec()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { params, momentum })
    }

    fn check_against(&self, spec: &ModelSpec) -> Result<()> {
        let shapes = spec.param_shapes();
        if self.params.len() != shapes.len() {
            return Err(Error::config(format!(
                "state has {} parameter tensors, spec wants {}",
                self.params.len(),
                shapes.len()
            )));
        }
        for (i, (p, s)) in self.params.iter().zip(&shapes).enumerate() {
            if p.shape() != &s[..] {
                return Err(Error::config(format!(
                    "parameter tensor {i} has shape {:?}, spec wants {s:?}",
                    p.shape()
                )));
            }
        }
        if self.momentum.len() != self.params.len() {
            return Err(Error::config("momentum buffer count mismatch".into()));
        }
        for (i, (m, p)) in self.momentum.iter().zip(&self.params).enumerate() {
            if m.shape() != p.shape() {
                return Err(Error::config(format!(
                    "momentum buffer {i} shape {:?} does not mirror parameter shape {:?}",
                    m.shape(),
                    p.shape()
                )));
            }
        }
        Ok(())
    }
}

/// A labeled image batch; pixels live in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledBatch {
    images: DenseArray,
    labels: Vec<usize>,
}

impl LabeledBatch {
    pub fn new(images: DenseArray, labels: Vec<usize>) -> Result<Self> {
        if images.rows() != labels.len() {
            return Err(Error::input(format!(
                "{} labels for {} images",
                labels.len(),
                images.rows()
            )));
        }
        if let Some(pos) = images.data().iter().position(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::input(format!(
                "pixel {pos} = {} outside [0, 1]",
                images.data()[pos]
            )));
        }
        Ok(Self { images, labels })
    }

    pub fn images(&self) -> &DenseArray {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Sub-batch by row indices.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let images = self.images.select_rows(indices)?;
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Self::new(images, labels)
    }

    /// Insert a channel dimension: `[n, h, w]` becomes `[n, 1, h, w]`.
    pub fn with_channel_dim(self) -> Result<Self> {
        let mut shape = self.images.shape().to_vec();
        shape.insert(1, 1);
        Ok(Self { images: self.images.reshape(shape)?, labels: self.labels })
    }
}

/// Per-example softmax cross-entropy, computed with a stable log-sum-exp.
pub fn per_example_losses(logits: &DenseArray, labels: &[usize]) -> Result<Vec<f64>> {
    if logits.shape().len() != 2 {
        return Err(Error::input(format!("logits must be [n, classes], got {:?}", logits.shape())));
    }
    if logits.rows() != labels.len() {
        return Err(Error::input(format!(
            "{} labels for {} logit rows",
            labels.len(),
            logits.rows()
        )));
    }
    let k = logits.row_len();
    let mut out = Vec::with_capacity(labels.len());
    for (i, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(Error::input(format!("label {y} out of range for {k} classes")));
        }
        let z = logits.row(i);
        out.push(log_sum_exp(z) - z[y]);
    }
    Ok(out)
}

/// Mean softmax cross-entropy over the batch; errors on an empty batch.
pub fn batch_loss(logits: &DenseArray, labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::input("loss of an empty batch".into()));
    }
    let losses = per_example_losses(logits, labels)?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// `ln Σ exp(z_j)` without overflow.
pub fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    m + z.iter().map(|&v| (v - m).exp()).sum::<f64>().ln()
}

/// Argmax per row; ties resolve to the lowest class index.
pub fn predictions(logits: &DenseArray) -> Vec<usize> {
    (0..logits.rows())
        .map(|i| {
            let row = logits.row(i);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Fraction of rows whose argmax equals the label; 0 on an empty batch.
pub fn accuracy(logits: &DenseArray, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let preds = predictions(logits);
    let hits = preds.iter().zip(labels).filter(|(p, y)| p == y).count();
    hits as f64 / labels.len() as f64
}

/// Result of one fused forward + reverse pass.
pub struct LossAndGrad {
    /// Logits from the forward pass, `[n, n_classes]`.
    pub logits: DenseArray,
    /// `ℓ_i` per example.
    pub per_example_loss: Vec<f64>,
    /// Row `i` is the gradient of example `i`'s own loss w.r.t. its pixels.
    pub input_grad: DenseArray,
}

/// Anything attacks and metrics can differentiate through.
///
/// Contract: `forward` costs exactly one forward pass over the batch;
/// `loss_and_input_grad` costs exactly one forward plus one reverse pass
/// and its `logits` must equal what `forward` would return for the same
/// images. Gradients in `input_grad` are of each example's own loss (not
/// the batch mean), which leaves sign-based attacks unaffected and gives
/// metrics per-example norms directly.
pub trait Classifier {
    fn n_classes(&self) -> usize;
    fn forward(&self, images: &DenseArray) -> Result<DenseArray>;
    fn loss_and_input_grad(&self, images: &DenseArray, labels: &[usize]) -> Result<LossAndGrad>;
}

/// Layer-list classifier: a spec plus its current state.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    spec: ModelSpec,
    state: ModelState,
}

/// Gradients of the batch-mean loss with respect to every parameter tensor.
pub type ParamGradients = Vec<DenseArray>;

impl Model {
    pub fn new(spec: ModelSpec, state: ModelState) -> Result<Self> {
        spec.validate()?;
        state.check_against(&spec)?;
        Ok(Self { spec, state })
    }

    /// Fresh model with seeded Glorot-uniform weights.
    pub fn init(spec: ModelSpec, rng: &mut impl Rng) -> Result<Self> {
        spec.validate()?;
        let state = ModelState::init(&spec, rng)?;
        Ok(Self { spec, state })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn state(&self) -> &ModelState {
        &self.state
    }

    /// Replace the state wholesale (shapes are re-validated).
    pub fn set_state(&mut self, state: ModelState) -> Result<()> {
        state.check_against(&self.spec)?;
        self.state = state;
        Ok(())
    }

    /// Gradient of the batch-mean loss w.r.t. the input pixels.
    pub fn input_gradient(&self, batch: &LabeledBatch) -> Result<DenseArray> {
        let lg = self.loss_and_input_grad(batch.images(), batch.labels())?;
        let n = batch.len().max(1) as f64;
        lg.input_grad.scale(1.0 / n)
    }

    /// Gradients of the batch-mean loss w.r.t. every parameter tensor.
    pub fn param_gradients(&self, batch: &LabeledBatch) -> Result<ParamGradients> {
        let bp = backprop::backprop(&self.spec, &self.state, batch.images(), batch.labels())?;
        Ok(bp.param_grads)
    }

    /// Classical momentum update:
    /// `v ← momentum·v + (g + weight_decay·θ)`, `θ ← θ − lr·v`.
    pub fn sgd_step(
        &mut self,
        grads: &ParamGradients,
        lr: f64,
        momentum: f64,
        weight_decay: f64,
    ) -> Result<()> {
        if grads.len() != self.state.params.len() {
            return Err(Error::config(format!(
                "{} gradient tensors for {} parameters",
                grads.len(),
                self.state.params.len()
            )));
        }
        for ((p, v), g) in self
            .state
            .params
            .iter_mut()
            .zip(self.state.momentum.iter_mut())
            .zip(grads)
        {
            if g.shape() != p.shape() {
                return Err(Error::config(format!(
                    "gradient shape {:?} does not match parameter shape {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            let (pd, vd, gd) = (p.data_mut(), v.data_mut(), g.data());
            for i in 0..gd.len() {
                vd[i] = momentum * vd[i] + (gd[i] + weight_decay * pd[i]);
                pd[i] -= lr * vd[i];
            }
        }
        for (i, p) in self.state.params.iter().enumerate() {
            if let Some(pos) = p.data().iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("parameter tensor {i} element {pos} after sgd step")));
            }
        }
        Ok(())
    }
}

impl Classifier for Model {
    fn n_classes(&self) -> usize {
        self.spec.n_classes
    }

    fn forward(&self, images: &DenseArray) -> Result<DenseArray> {
        backprop::forward(&self.spec, &self.state, images)
    }

    fn loss_and_input_grad(&self, images: &DenseArray, labels: &[usize]) -> Result<LossAndGrad> {
        let bp = backprop::backprop(&self.spec, &self.state, images, labels)?;
        Ok(LossAndGrad {
            logits: bp.logits,
            per_example_loss: bp.per_example_loss,
            input_grad: bp.input_grads,
        })
    }
}

/// Wrapper that counts forward and reverse passes through a classifier.
///
/// Used to check that attack-reported counters match what actually ran.
pub struct CountingClassifier<'a, C: Classifier + ?Sized> {
    inner: &'a C,
    forwards: std::cell::Cell<u64>,
    backwards: std::cell::Cell<u64>,
}

impl<'a, C: Classifier + ?Sized> CountingClassifier<'a, C> {
    pub fn new(inner: &'a C) -> Self {
        Self { inner, forwards: 0.into(), backwards: 0.into() }
    }

    pub fn forwards(&self) -> u64 {
        self.forwards.get()
    }

    pub fn backwards(&self) -> u64 {
        self.backwards.get()
    }
}

impl<C: Classifier + ?Sized> Classifier for CountingClassifier<'_, C> {
    fn n_classes(&self) -> usize {
        self.inner.n_classes()
    }

    fn forward(&self, images: &DenseArray) -> Result<DenseArray> {
        self.forwards.set(self.forwards.get() + 1);
        self.inner.forward(images)
    }

    fn loss_and_input_grad(&self, images: &DenseArray, labels: &[usize]) -> Result<LossAndGrad> {
        self.forwards.set(self.forwards.get() + 1);
        self.backwards.set(self.backwards.get() + 1);
        self.inner.loss_and_input_grad(images, labels)
    }
}
