//! Minimal dense/convolutional network engine with manual backpropagation.
//!
//! Besides parameter gradients, the engine exposes the output of the last
//! convolutional layer (the Grad-CAM feature maps `A^k`) and the gradient of
//! a class score with respect to them.

mod layers;
mod train;

use rand_distr::{Distribution, Normal};

use crate::error::{config, shape, Result};
use crate::rng;
use crate::tensor::Tensor;
use crate::Scalar;

pub use train::{apply_update, local_train, TrainParams};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Dense,
    Conv,
    MaxPool,
    Relu,
    Softmax,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer<S> {
    /// `weight` is `out × in`, `bias` is `out`.
    Dense {
        weight: Tensor<S>,
        bias: Tensor<S>,
    },
    /// `weight` is `filters × channels × k × k`; valid stride-1 convolution.
    Conv {
        weight: Tensor<S>,
        bias: Tensor<S>,
    },
    MaxPool {
        size: usize,
    },
    Relu,
    /// Terminal marker. The forward pass treats it as identity and the loss
    /// applies the softmax.
    Softmax,
}

impl<S> Layer<S> {
    pub fn kind(&self) -> LayerKind {
        match self {
            Layer::Dense { .. } => LayerKind::Dense,
            Layer::Conv { .. } => LayerKind::Conv,
            Layer::MaxPool { .. } => LayerKind::MaxPool,
            Layer::Relu => LayerKind::Relu,
            Layer::Softmax => LayerKind::Softmax,
        }
    }
}

/// Which scalar is differentiated for the feature-map gradients.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ClassScore {
    /// Logit of each sample's labelled class, summed over the batch.
    #[default]
    TrueLabel,
    /// Logit of each sample's arg-max class, summed over the batch.
    TopLogit,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<S> {
    input_shape: Vec<usize>,
    layers: Vec<Layer<S>>,
    /// Per-sample activation shapes; `shapes[0]` is the input.
    shapes: Vec<Vec<usize>>,
}

impl<S: Scalar> ModelParams<S> {
    pub fn new(input_shape: Vec<usize>, layers: Vec<Layer<S>>) -> Result<Self> {
        if input_shape.is_empty() {
            return config("model input shape is empty");
        }
        let mut shapes = vec![input_shape.clone()];
        for (i, layer) in layers.iter().enumerate() {
            let cur = shapes.last().unwrap().clone();
            let next = match layer {
                Layer::Dense { weight, bias } => {
                    let flat: usize = cur.iter().product();
                    if weight.shape().len() != 2 || weight.shape()[1] != flat {
                        return shape(format!(
                            "dense layer {i}: weight {:?} does not accept {flat} inputs",
                            weight.shape()
                        ));
                    }
                    if bias.shape() != [weight.shape()[0]] {
                        return shape(format!("dense layer {i}: bias {:?}", bias.shape()));
                    }
                    vec![weight.shape()[0]]
                }
                Layer::Conv { weight, bias } => {
                    let ws = weight.shape();
                    if cur.len() != 3 || ws.len() != 4 || ws[1] != cur[0] || ws[2] != ws[3] {
                        return shape(format!(
                            "conv layer {i}: weight {:?} incompatible with input {:?}",
                            ws, cur
                        ));
                    }
                    if ws[2] > cur[1] || ws[2] > cur[2] || ws[2] == 0 {
                        return shape(format!("conv layer {i}: kernel larger than input"));
                    }
                    if bias.shape() != [ws[0]] {
                        return shape(format!("conv layer {i}: bias {:?}", bias.shape()));
                    }
                    vec![ws[0], cur[1] - ws[2] + 1, cur[2] - ws[2] + 1]
                }
                Layer::MaxPool { size } => {
                    if cur.len() != 3 || *size == 0 || *size > cur[1] || *size > cur[2] {
                        return shape(format!("maxpool layer {i}: size {size} on {:?}", cur));
                    }
                    vec![cur[0], cur[1] / size, cur[2] / size]
                }
                Layer::Relu => cur,
                Layer::Softmax => {
                    if i + 1 != layers.len() {
                        return config("softmax must be the last layer");
                    }
                    cur
                }
            };
            shapes.push(next);
        }
        if shapes.last().unwrap().len() != 1 {
            return shape(format!("model output {:?} is not a vector", shapes.last().unwrap()));
        }
        Ok(Self {
            input_shape,
            layers,
            shapes,
        })
    }

    /// `input → (dense → relu)* → dense → softmax` with He-normal weights.
    pub fn mlp(input_dim: usize, hidden: &[usize], classes: usize, seed: u64) -> Result<Self> {
        let mut r = rng::rng(seed);
        let mut layers = Vec::new();
        let mut fan_in = input_dim;
        for &h in hidden {
            layers.push(dense_init(fan_in, h, &mut r));
            layers.push(Layer::Relu);
            fan_in = h;
        }
        layers.push(dense_init(fan_in, classes, &mut r));
        layers.push(Layer::Softmax);
        Self::new(vec![input_dim], layers)
    }

    /// `conv(filters, k×k) → relu → maxpool(pool) → (dense → relu)* → dense → softmax`.
    pub fn cnn(
        input: [usize; 3],
        filters: usize,
        kernel: usize,
        pool: usize,
        hidden: &[usize],
        classes: usize,
        seed: u64,
    ) -> Result<Self> {
        let [c, h, w] = input;
        if kernel == 0 || kernel > h || kernel > w {
            return config(format!("kernel {kernel} does not fit input {h}×{w}"));
        }
        let mut r = rng::rng(seed);
        let fan = c * kernel * kernel;
        let std = (2.0 / fan as f64).sqrt();
        let normal = Normal::new(0.0, std).unwrap();
        let weight = Tensor::from_fn(&[filters, c, kernel, kernel], |_| S::of(normal.sample(&mut r)));
        let mut layers = vec![
            Layer::Conv {
                weight,
                bias: Tensor::zeros(&[filters]),
            },
            Layer::Relu,
        ];
        let (mut oh, mut ow) = (h - kernel + 1, w - kernel + 1);
        if pool > 1 {
            layers.push(Layer::MaxPool { size: pool });
            oh /= pool;
            ow /= pool;
        }
        let mut fan_in = filters * oh * ow;
        for &hd in hidden {
            layers.push(dense_init(fan_in, hd, &mut r));
            layers.push(Layer::Relu);
            fan_in = hd;
        }
        layers.push(dense_init(fan_in, classes, &mut r));
        layers.push(Layer::Softmax);
        Self::new(vec![c, h, w], layers)
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn layers(&self) -> &[Layer<S>] {
        &self.layers
    }

    pub fn num_classes(&self) -> usize {
        self.shapes.last().unwrap()[0]
    }

    /// Index of the last convolutional layer, if any.
    pub fn last_conv(&self) -> Option<usize> {
        self.layers.iter().rposition(|l| l.kind() == LayerKind::Conv)
    }

    /// Position of the last conv layer's weight tensor in the parameter list.
    pub fn last_conv_param_index(&self) -> Option<usize> {
        let conv = self.last_conv()?;
        Some(
            self.layers[..conv]
                .iter()
                .filter(|l| matches!(l, Layer::Dense { .. } | Layer::Conv { .. }))
                .count()
                * 2,
        )
    }

    /// Parameter tensors in canonical order: weight then bias for every
    /// dense or conv layer.
    pub fn params(&self) -> Vec<&Tensor<S>> {
        self.layers
            .iter()
            .flat_map(|l| match l {
                Layer::Dense { weight, bias } | Layer::Conv { weight, bias } => vec![weight, bias],
                _ => vec![],
            })
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<S>> {
        self.layers
            .iter_mut()
            .flat_map(|l| match l {
                Layer::Dense { weight, bias } | Layer::Conv { weight, bias } => vec![weight, bias],
                _ => vec![],
            })
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    fn check_batch(&self, batch: &Tensor<S>) -> Result<()> {
        if batch.shape().len() != self.input_shape.len() + 1 || batch.shape()[1..] != self.input_shape[..] {
            return config(format!(
                "batch shape {:?} does not match model input {:?}",
                batch.shape(),
                self.input_shape
            ));
        }
        Ok(())
    }

    pub fn forward(&self, batch: &Tensor<S>) -> Result<ForwardTrace<S>> {
        self.check_batch(batch)?;
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(batch.clone());
        for layer in &self.layers {
            let next = self.layer_forward(layer, activations.last().unwrap());
            activations.push(next);
        }
        Ok(ForwardTrace {
            activations,
            feature_layer: self.last_conv(),
        })
    }

    /// Re-runs the network from the input of layer `start` given that
    /// layer's input activation. Returns the logits.
    pub fn forward_from(&self, start: usize, activation: &Tensor<S>) -> Tensor<S> {
        let mut cur = activation.clone();
        for layer in &self.layers[start..] {
            cur = self.layer_forward(layer, &cur);
        }
        cur
    }

    fn layer_forward(&self, layer: &Layer<S>, x: &Tensor<S>) -> Tensor<S> {
        match layer {
            Layer::Dense { weight, bias } => layers::dense_forward(x, weight, bias),
            Layer::Conv { weight, bias } => layers::conv_forward(x, weight, bias),
            Layer::MaxPool { size } => layers::maxpool_forward(x, *size),
            Layer::Relu => layers::relu_forward(x),
            Layer::Softmax => x.clone(),
        }
    }

    /// Mean softmax cross-entropy of a trace against `labels`.
    pub fn loss(&self, trace: &ForwardTrace<S>, labels: &[usize]) -> S {
        cross_entropy(trace.logits(), labels)
    }

    pub fn backward(
        &self,
        trace: &ForwardTrace<S>,
        labels: &[usize],
        capture_feature_grads: bool,
    ) -> Result<GradientSet<S>> {
        let score = capture_feature_grads.then_some(ClassScore::TrueLabel);
        self.backward_with(trace, labels, score)
    }

    /// Backward pass of the mean cross-entropy loss. With `feature_score`
    /// set, also differentiates that class score with respect to the last
    /// conv layer's output in a separate pass.
    pub fn backward_with(
        &self,
        trace: &ForwardTrace<S>,
        labels: &[usize],
        feature_score: Option<ClassScore>,
    ) -> Result<GradientSet<S>> {
        let logits = trace.logits();
        let n = logits.shape()[0];
        if labels.len() != n {
            return config(format!("{} labels for a batch of {n}", labels.len()));
        }
        let classes = self.num_classes();
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return config(format!("label {bad} outside {classes} classes"));
        }
        let feature_grads = match feature_score {
            None => None,
            Some(score) => {
                let conv = self.last_conv().ok_or_else(|| {
                    crate::Error::Config("feature-map gradients requested but model has no conv layer".into())
                })?;
                let mut top = Tensor::zeros(logits.shape());
                for s in 0..n {
                    let c = match score {
                        ClassScore::TrueLabel => labels[s],
                        ClassScore::TopLogit => argmax(logits.row(s)),
                    };
                    top.row_mut(s)[c] = S::one();
                }
                Some(self.backprop(trace, top, conv + 1, None))
            }
        };

        let inv_n = S::one() / S::of_usize(n);
        let mut dz = Tensor::zeros(logits.shape());
        for s in 0..n {
            let p = layers::softmax_row(logits.row(s));
            let row = dz.row_mut(s);
            for (c, pv) in p.into_iter().enumerate() {
                let target = if c == labels[s] { S::one() } else { S::zero() };
                row[c] = (pv - target) * inv_n;
            }
        }
        let mut grads: Vec<Tensor<S>> = self.params().iter().map(|p| Tensor::zeros(p.shape())).collect();
        self.backprop(trace, dz, 0, Some(&mut grads));
        Ok(GradientSet {
            tensors: grads,
            feature_map_grads: feature_grads,
        })
    }

    /// Propagates `top` (gradient w.r.t. the logits) down to the input of
    /// layer `stop`, accumulating parameter gradients when requested.
    fn backprop(
        &self,
        trace: &ForwardTrace<S>,
        top: Tensor<S>,
        stop: usize,
        mut grads: Option<&mut Vec<Tensor<S>>>,
    ) -> Tensor<S> {
        let mut upstream = top;
        let mut pidx = self.params().len();
        for (li, layer) in self.layers.iter().enumerate().rev() {
            if li < stop {
                break;
            }
            let x = &trace.activations[li];
            upstream = match layer {
                Layer::Dense { weight, .. } | Layer::Conv { weight, .. } => {
                    pidx -= 2;
                    let (dw, db, dx) = if layer.kind() == LayerKind::Dense {
                        layers::dense_backward(x, weight, &upstream)
                    } else {
                        layers::conv_backward(x, weight, &upstream)
                    };
                    if let Some(g) = grads.as_deref_mut() {
                        g[pidx] = dw;
                        g[pidx + 1] = db;
                    }
                    dx
                }
                Layer::MaxPool { size } => layers::maxpool_backward(x, *size, &upstream),
                Layer::Relu => layers::relu_backward(x, &upstream),
                Layer::Softmax => upstream,
            };
        }
        upstream
    }

    /// Predicted class per sample.
    pub fn predict(&self, batch: &Tensor<S>) -> Result<Vec<usize>> {
        let trace = self.forward(batch)?;
        let logits = trace.logits();
        Ok((0..logits.shape()[0]).map(|s| argmax(logits.row(s))).collect())
    }

    pub fn cast<T: Scalar>(&self) -> ModelParams<T> {
        let layers = self
            .layers
            .iter()
            .map(|l| match l {
                Layer::Dense { weight, bias } => Layer::Dense {
                    weight: weight.cast(),
                    bias: bias.cast(),
                },
                Layer::Conv { weight, bias } => Layer::Conv {
                    weight: weight.cast(),
                    bias: bias.cast(),
                },
                Layer::MaxPool { size } => Layer::MaxPool { size: *size },
                Layer::Relu => Layer::Relu,
                Layer::Softmax => Layer::Softmax,
            })
            .collect();
        ModelParams {
            input_shape: self.input_shape.clone(),
            layers,
            shapes: self.shapes.clone(),
        }
    }
}

fn dense_init<S: Scalar>(fan_in: usize, out: usize, r: &mut impl rand::Rng) -> Layer<S> {
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).unwrap();
    Layer::Dense {
        weight: Tensor::from_fn(&[out, fan_in], |_| S::of(normal.sample(r))),
        bias: Tensor::zeros(&[out]),
    }
}

/// First index of the maximum.
pub fn argmax<S: Scalar>(row: &[S]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn cross_entropy<S: Scalar>(logits: &Tensor<S>, labels: &[usize]) -> S {
    let n = logits.shape()[0];
    let mut total = S::zero();
    for (s, &label) in labels.iter().enumerate().take(n) {
        let z = logits.row(s);
        let m = z.iter().copied().fold(S::neg_infinity(), S::max);
        let lse = z.iter().map(|&v| (v - m).exp()).sum::<S>().ln() + m;
        total = total + lse - z[label];
    }
    total / S::of_usize(n)
}

#[derive(Clone, Debug)]
pub struct ForwardTrace<S> {
    /// `activations[0]` is the batch; `activations[l + 1]` is layer `l`'s output.
    pub activations: Vec<Tensor<S>>,
    feature_layer: Option<usize>,
}

impl<S: Scalar> ForwardTrace<S> {
    pub fn logits(&self) -> &Tensor<S> {
        self.activations.last().unwrap()
    }

    /// Output of the last conv layer, `batch × channels × H × W`.
    pub fn feature_maps(&self) -> Option<&Tensor<S>> {
        self.feature_layer.map(|l| &self.activations[l + 1])
    }
}

/// Per-parameter gradients (or model updates) in [`ModelParams::params`]
/// order, plus optional `∂y/∂A^k` for the last conv layer.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientSet<S> {
    pub tensors: Vec<Tensor<S>>,
    pub feature_map_grads: Option<Tensor<S>>,
}

impl<S: Scalar> GradientSet<S> {
    pub fn new(tensors: Vec<Tensor<S>>) -> Self {
        Self {
            tensors,
            feature_map_grads: None,
        }
    }

    pub fn zeros_like(model: &ModelParams<S>) -> Self {
        Self::new(model.params().iter().map(|p| Tensor::zeros(p.shape())).collect())
    }

    /// Gradient with the same layout as the model, holding the model's own
    /// parameter values.
    pub fn from_params(model: &ModelParams<S>) -> Self {
        Self::new(model.params().into_iter().cloned().collect())
    }

    pub fn congruent(&self, model: &ModelParams<S>) -> bool {
        let params = model.params();
        params.len() == self.tensors.len() && params.iter().zip(&self.tensors).all(|(p, t)| p.same_shape(t))
    }

    pub fn same_layout(&self, other: &Self) -> bool {
        self.tensors.len() == other.tensors.len()
            && self.tensors.iter().zip(&other.tensors).all(|(a, b)| a.same_shape(b))
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn flatten(&self) -> Vec<S> {
        let mut out = Vec::with_capacity(self.num_values());
        for t in &self.tensors {
            out.extend_from_slice(t.data());
        }
        out
    }

    /// Inverse of [`flatten`](Self::flatten) using `self` as the layout.
    pub fn with_values(&self, values: &[S]) -> Result<Self> {
        if values.len() != self.num_values() {
            return shape(format!(
                "{} values for a gradient of {}",
                values.len(),
                self.num_values()
            ));
        }
        let mut off = 0;
        let tensors = self
            .tensors
            .iter()
            .map(|t| {
                let chunk = values[off..off + t.len()].to_vec();
                off += t.len();
                Tensor::new(t.shape().to_vec(), chunk).expect("layout matches")
            })
            .collect();
        Ok(Self::new(tensors))
    }

    pub fn norm(&self) -> S {
        self.tensors.iter().map(|t| t.norm_sq()).sum::<S>().sqrt()
    }

    pub fn dot(&self, other: &Self) -> S {
        self.tensors.iter().zip(&other.tensors).map(|(a, b)| a.dot(b)).sum()
    }

    pub fn scaled(&self, s: S) -> Self {
        Self::new(self.tensors.iter().map(|t| t.scaled(s)).collect())
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: S, other: &Self) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.axpy(alpha, b);
        }
    }

    pub fn add(&self, other: &Self) -> Self {
        let mut out = self.clone();
        out.feature_map_grads = None;
        out.axpy(S::one(), other);
        out
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.is_finite())
    }

    /// Element-wise mean. Panics on an empty slice.
    pub fn mean(items: &[&Self]) -> Self {
        let mut acc = Self::new(items[0].tensors.iter().map(|t| Tensor::zeros(t.shape())).collect());
        for g in items {
            acc.axpy(S::one(), g);
        }
        acc.scaled(S::one() / S::of_usize(items.len()))
    }

    pub fn cast<T: Scalar>(&self) -> GradientSet<T> {
        GradientSet {
            tensors: self.tensors.iter().map(|t| t.cast()).collect(),
            feature_map_grads: self.feature_map_grads.as_ref().map(|t| t.cast()),
        }
    }
}
