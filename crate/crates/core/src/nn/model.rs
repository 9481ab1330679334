use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::ops;
use super::{NnError, Result, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", deny_unknown_fields)]
pub enum LayerSpec {
    Conv2D {
        out_channels: usize,
        kernel: (usize, usize),
        stride: usize,
        padding: usize,
    },
    MaxPool2D {
        window: usize,
        stride: usize,
    },
    ReLU,
    Dense {
        out_features: usize,
    },
    GlobalAvgPool,
    Softmax,
}

impl LayerSpec {
    pub fn conv(out_channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        LayerSpec::Conv2D {
            out_channels,
            kernel: (kernel, kernel),
            stride,
            padding,
        }
    }

    pub fn pool(window: usize, stride: usize) -> Self {
        LayerSpec::MaxPool2D { window, stride }
    }

    pub fn dense(out_features: usize) -> Self {
        LayerSpec::Dense { out_features }
    }

    pub fn is_parametric(&self) -> bool {
        matches!(self, LayerSpec::Conv2D { .. } | LayerSpec::Dense { .. })
    }

    fn short_name(&self) -> &'static str {
        match self {
            LayerSpec::Conv2D { .. } => "conv",
            LayerSpec::MaxPool2D { .. } => "pool",
            LayerSpec::ReLU => "relu",
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::GlobalAvgPool => "gap",
            LayerSpec::Softmax => "softmax",
        }
    }

    /// Output shape for a given input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let spatial = |what: &str| -> Result<(usize, usize, usize)> {
            match *input {
                [c, h, w] => Ok((c, h, w)),
                _ => Err(NnError::ShapeMismatch(format!("{what} expects [c, h, w], got {input:?}"))),
            }
        };
        match *self {
            LayerSpec::Conv2D {
                out_channels,
                kernel: (kh, kw),
                stride,
                padding,
            } => {
                if out_channels == 0 || kh == 0 || kw == 0 || stride == 0 {
                    return Err(NnError::InvalidSpec(format!("{self:?}")));
                }
                let (_, h, w) = spatial("Conv2D")?;
                let ho = ops::window_out(h, kh, stride, padding);
                let wo = ops::window_out(w, kw, stride, padding);
                match (ho, wo) {
                    (Some(ho), Some(wo)) => Ok(vec![out_channels, ho, wo]),
                    _ => Err(NnError::ShapeMismatch(format!("{self:?} does not fit {input:?}"))),
                }
            }
            LayerSpec::MaxPool2D { window, stride } => {
                if window == 0 || stride == 0 {
                    return Err(NnError::InvalidSpec(format!("{self:?}")));
                }
                let (c, h, w) = spatial("MaxPool2D")?;
                match (ops::window_out(h, window, stride, 0), ops::window_out(w, window, stride, 0)) {
                    (Some(ho), Some(wo)) => Ok(vec![c, ho, wo]),
                    _ => Err(NnError::ShapeMismatch(format!("{self:?} does not fit {input:?}"))),
                }
            }
            LayerSpec::ReLU => Ok(input.to_vec()),
            LayerSpec::Dense { out_features } => {
                if out_features == 0 {
                    return Err(NnError::InvalidSpec("Dense with zero outputs".into()));
                }
                Ok(vec![out_features])
            }
            LayerSpec::GlobalAvgPool => {
                let (c, _, _) = spatial("GlobalAvgPool")?;
                Ok(vec![c])
            }
            LayerSpec::Softmax => match *input {
                [_] => Ok(input.to_vec()),
                _ => Err(NnError::ShapeMismatch(format!("Softmax expects rank 1, got {input:?}"))),
            },
        }
    }
}

/// Topology: input shape plus an ordered layer list ending in Softmax.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    input: [usize; 3],
    layers: Vec<LayerSpec>,
    shapes: Vec<Vec<usize>>,
}

impl ModelSpec {
    pub fn new(input: [usize; 3], layers: Vec<LayerSpec>) -> Result<Self> {
        if input.iter().any(|&d| d == 0) {
            return Err(NnError::InvalidSpec(format!("input shape {input:?}")));
        }
        match layers.last() {
            Some(LayerSpec::Softmax) => {}
            _ => return Err(NnError::InvalidSpec("final layer must be Softmax".into())),
        }
        if layers[..layers.len() - 1].iter().any(|l| *l == LayerSpec::Softmax) {
            return Err(NnError::InvalidSpec("Softmax only allowed as the final layer".into()));
        }
        if !layers.iter().any(LayerSpec::is_parametric) {
            return Err(NnError::InvalidSpec("model has no parametric layer".into()));
        }
        let mut shapes = vec![input.to_vec()];
        for layer in &layers {
            let next = layer.output_shape(shapes.last().unwrap())?;
            shapes.push(next);
        }
        Ok(Self { input, layers, shapes })
    }

    pub fn input(&self) -> [usize; 3] {
        self.input
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    /// Activation shapes: entry `i` is the input of layer `i`, the last entry
    /// is the model output.
    pub fn shapes(&self) -> &[Vec<usize>] {
        &self.shapes
    }

    pub fn n_classes(&self) -> usize {
        self.shapes.last().unwrap()[0]
    }

    /// Layer indices of Conv2D / Dense layers, in order.
    pub fn parametric_layers(&self) -> Vec<usize> {
        (0..self.layers.len()).filter(|&i| self.layers[i].is_parametric()).collect()
    }

    pub fn n_parametric(&self) -> usize {
        self.layers.iter().filter(|l| l.is_parametric()).count()
    }

    /// The final Dense layer's parametric ordinal.
    pub fn head_ordinal(&self) -> Option<usize> {
        let layers = self.parametric_layers();
        layers
            .iter()
            .rposition(|&i| matches!(self.layers[i], LayerSpec::Dense { .. }))
            .filter(|&p| p == layers.len() - 1)
    }

    /// `(weight shape, bias shape, fan_in)` per parametric layer.
    pub fn param_shapes(&self) -> Vec<(Vec<usize>, Vec<usize>, usize)> {
        self.parametric_layers()
            .into_iter()
            .map(|i| {
                let inp = &self.shapes[i];
                match self.layers[i] {
                    LayerSpec::Conv2D {
                        out_channels,
                        kernel: (kh, kw),
                        ..
                    } => (vec![out_channels, inp[0], kh, kw], vec![out_channels], inp[0] * kh * kw),
                    LayerSpec::Dense { out_features } => {
                        let fan_in: usize = inp.iter().product();
                        (vec![out_features, fan_in], vec![out_features], fan_in)
                    }
                    _ => unreachable!(),
                }
            })
            .collect()
    }

    /// Container path of a parametric layer, e.g. `conv0`, `dense9`.
    pub fn layer_path(&self, ordinal: usize) -> String {
        let i = self.parametric_layers()[ordinal];
        format!("{}{}", self.layers[i].short_name(), i)
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes()
            .iter()
            .map(|(w, b, _)| w.iter().product::<usize>() + b[0])
            .sum()
    }
}

/// The two desk-scale network families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    /// `[Conv 8@3×3 → ReLU → MaxPool 2×2] ×2 → Conv 16@3×3 → ReLU → MaxPool →
    /// Dense 32 → ReLU → Dense n → Softmax`
    MicroVgg,
    /// Same first two blocks, then `Conv 16@3×3 → ReLU → GlobalAvgPool →
    /// Dense n → Softmax`.
    MicroGap,
}

impl Architecture {
    pub const MIN_INPUT: usize = 8;

    pub fn layers(self, n_classes: usize) -> Vec<LayerSpec> {
        let block = |c| [LayerSpec::conv(c, 3, 1, 1), LayerSpec::ReLU, LayerSpec::pool(2, 2)];
        let mut layers: Vec<LayerSpec> = block(8).into_iter().chain(block(8)).collect();
        match self {
            Architecture::MicroVgg => {
                layers.extend(block(16));
                layers.extend([LayerSpec::dense(32), LayerSpec::ReLU, LayerSpec::dense(n_classes)]);
            }
            Architecture::MicroGap => {
                layers.extend([
                    LayerSpec::conv(16, 3, 1, 1),
                    LayerSpec::ReLU,
                    LayerSpec::GlobalAvgPool,
                    LayerSpec::dense(n_classes),
                ]);
            }
        }
        layers.push(LayerSpec::Softmax);
        layers
    }

    pub fn spec(self, input: [usize; 3], n_classes: usize) -> Result<ModelSpec> {
        ModelSpec::new(input, self.layers(n_classes))
    }

    /// Identifier such as `micro_vgg:3x32x32:2` that pins every tensor shape.
    pub fn architecture_id(self, input: [usize; 3], n_classes: usize) -> String {
        format!("{self}:{}x{}x{}:{n_classes}", input[0], input[1], input[2])
    }

    pub fn parse_id(id: &str) -> Option<(Architecture, [usize; 3], usize)> {
        let mut parts = id.split(':');
        let arch = parts.next()?.parse().ok()?;
        let dims: Vec<usize> = parts.next()?.split('x').map(|d| d.parse().ok()).collect::<Option<_>>()?;
        let n: usize = parts.next()?.parse().ok()?;
        if parts.next().is_some() || dims.len() != 3 {
            return None;
        }
        Some((arch, [dims[0], dims[1], dims[2]], n))
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Architecture::MicroVgg => "micro_vgg",
            Architecture::MicroGap => "micro_gap",
        })
    }
}

impl FromStr for Architecture {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "micro_vgg" => Ok(Architecture::MicroVgg),
            "micro_gap" => Ok(Architecture::MicroGap),
            other => Err(format!("unknown architecture {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

/// Per parametric layer; `None` where the layer is frozen.
pub type Gradients<T> = Vec<Option<LayerParams<T>>>;

/// Cached activations of one forward pass.
#[derive(Debug, Clone)]
pub struct Trace<T> {
    /// `activations[i]` is the input to layer `i`; the last entry is the
    /// softmax output.
    pub activations: Vec<Tensor<T>>,
    pub argmax: Vec<Option<Vec<usize>>>,
}

impl<T: Scalar> Trace<T> {
    pub fn probs(&self) -> &Tensor<T> {
        self.activations.last().unwrap()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    spec: ModelSpec,
    params: Vec<LayerParams<T>>,
}

/// Weight std of the output classifier.
pub const CLASSIFIER_INIT_STD: f64 = 0.01;

fn normal_draws(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    let normal = Normal::new(0.0, std).expect("positive std");
    (0..n).map(|_| normal.sample(rng)).collect()
}

impl<T: Scalar> Model<T> {
    pub fn from_params(spec: ModelSpec, params: Vec<LayerParams<T>>) -> Result<Self> {
        let shapes = spec.param_shapes();
        if shapes.len() != params.len() {
            return Err(NnError::ShapeMismatch(format!(
                "{} parameter sets for {} parametric layers",
                params.len(),
                shapes.len()
            )));
        }
        for (ord, ((w, b, _), p)) in shapes.iter().zip(&params).enumerate() {
            if p.weight.shape() != w.as_slice() || p.bias.shape() != b.as_slice() {
                return Err(NnError::ShapeMismatch(format!(
                    "layer {}: got {:?}/{:?}, expected {w:?}/{b:?}",
                    spec.layer_path(ord),
                    p.weight.shape(),
                    p.bias.shape()
                )));
            }
        }
        Ok(Self { spec, params })
    }

    /// He-normal weights (`std = sqrt(2 / fan_in)`) for hidden layers,
    /// `N(0, 0.01²)` for the final Dense classifier, zero biases, from a
    /// seeded ChaCha stream. Sampling happens in f64 so both precisions see
    /// the same draws.
    pub fn init_random(spec: &ModelSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = spec
            .param_shapes()
            .into_iter()
            .enumerate()
            .map(|(ord, (w, b, fan_in))| Self::fresh_layer(&mut rng, &w, &b, Self::init_std(spec, ord, fan_in)))
            .collect();
        Self {
            spec: spec.clone(),
            params,
        }
    }

    fn init_std(spec: &ModelSpec, ordinal: usize, fan_in: usize) -> f64 {
        if spec.head_ordinal() == Some(ordinal) {
            CLASSIFIER_INIT_STD
        } else {
            (2.0 / fan_in as f64).sqrt()
        }
    }

    fn fresh_layer(rng: &mut ChaCha8Rng, w: &[usize], b: &[usize], std: f64) -> LayerParams<T> {
        let n = w.iter().product();
        let weight = normal_draws(rng, n, std).into_iter().map(T::of).collect();
        LayerParams {
            weight: Tensor::from_vec(w.to_vec(), weight).unwrap(),
            bias: Tensor::zeros(b),
        }
    }

    /// Re-draw one parametric layer from its own seeded stream.
    pub fn reinit_layer(&mut self, ordinal: usize, seed: u64) {
        let (w, b, fan_in) = &self.spec.param_shapes()[ordinal];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = Self::init_std(&self.spec, ordinal, *fan_in);
        self.params[ordinal] = Self::fresh_layer(&mut rng, w, b, std);
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &[LayerParams<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [LayerParams<T>] {
        &mut self.params
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            spec: self.spec.clone(),
            params: self
                .params
                .iter()
                .map(|p| LayerParams {
                    weight: p.weight.cast(),
                    bias: p.bias.cast(),
                })
                .collect(),
        }
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        if x.shape() != self.spec.input() {
            return Err(NnError::ShapeMismatch(format!(
                "model input {:?}, got {:?}",
                self.spec.input(),
                x.shape()
            )));
        }
        Ok(())
    }

    pub fn forward_trace(&self, x: &Tensor<T>) -> Result<Trace<T>> {
        self.check_input(x)?;
        x.ensure_finite("model input")?;
        let mut activations = Vec::with_capacity(self.spec.layers.len() + 1);
        let mut argmax = Vec::with_capacity(self.spec.layers.len());
        activations.push(x.clone());
        let mut ordinal = 0;
        for layer in &self.spec.layers {
            let input = activations.last().unwrap();
            let mut am = None;
            let out = match *layer {
                LayerSpec::Conv2D { stride, padding, .. } => {
                    let p = &self.params[ordinal];
                    ordinal += 1;
                    ops::conv2d_forward(input, &p.weight, &p.bias, stride, padding)?
                }
                LayerSpec::Dense { .. } => {
                    let p = &self.params[ordinal];
                    ordinal += 1;
                    ops::dense_forward(input, &p.weight, &p.bias)?
                }
                LayerSpec::MaxPool2D { window, stride } => {
                    let (out, idx) = ops::maxpool_forward(input, window, stride)?;
                    am = Some(idx);
                    out
                }
                LayerSpec::ReLU => ops::relu_forward(input),
                LayerSpec::GlobalAvgPool => ops::gap_forward(input)?,
                LayerSpec::Softmax => ops::softmax(input)?,
            };
            out.ensure_finite(layer.short_name())?;
            activations.push(out);
            argmax.push(am);
        }
        Ok(Trace { activations, argmax })
    }

    /// Class probabilities.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward_trace(x)?.activations.pop().unwrap())
    }

    /// Argmax of the softmax output; ties go to the lower class index.
    pub fn predict(&self, x: &Tensor<T>) -> Result<(usize, Tensor<T>)> {
        let probs = self.forward(x)?;
        let mut best = 0;
        for (i, &p) in probs.data().iter().enumerate() {
            if p > probs.data()[best] {
                best = i;
            }
        }
        Ok((best, probs))
    }

    pub fn loss(&self, x: &Tensor<T>, label: usize) -> Result<f64> {
        ops::cross_entropy(&self.forward(x)?, label)
    }

    /// Cross-entropy loss and its gradient w.r.t. every trainable parameter.
    /// Layers with `trainable[ordinal] == false` get `None`, and the backward
    /// sweep stops below the lowest trainable layer.
    pub fn backward(&self, x: &Tensor<T>, label: usize, trainable: &[bool]) -> Result<(f64, Gradients<T>)> {
        let trace = self.forward_trace(x)?;
        self.backward_from_trace(&trace, label, trainable)
    }

    pub fn backward_all(&self, x: &Tensor<T>, label: usize) -> Result<(f64, Gradients<T>)> {
        self.backward(x, label, &vec![true; self.params.len()])
    }

    pub fn backward_from_trace(&self, trace: &Trace<T>, label: usize, trainable: &[bool]) -> Result<(f64, Gradients<T>)> {
        if trainable.len() != self.params.len() {
            return Err(NnError::ShapeMismatch(format!(
                "trainable mask has {} entries for {} parametric layers",
                trainable.len(),
                self.params.len()
            )));
        }
        let probs = trace.probs();
        let loss = ops::cross_entropy(probs, label)?;
        let mut grads: Gradients<T> = vec![None; self.params.len()];
        let layer_of: Vec<usize> = self.spec.parametric_layers();
        let Some(lowest) = (0..trainable.len()).find(|&o| trainable[o]).map(|o| layer_of[o]) else {
            return Ok((loss, grads));
        };

        // fused softmax + cross-entropy: dL/dlogits = p - onehot
        let mut g = probs.clone();
        g.data_mut()[label] -= T::one();

        let n_layers = self.spec.layers.len();
        let mut ordinal = self.params.len();
        for i in (0..n_layers - 1).rev() {
            let input = &trace.activations[i];
            let need_input = i > lowest;
            let layer = self.spec.layers[i];
            if layer.is_parametric() {
                ordinal -= 1;
            }
            g = match layer {
                LayerSpec::Conv2D { stride, padding, .. } => {
                    let p = &self.params[ordinal];
                    let (gx, gw, gb) = ops::conv2d_backward(input, &p.weight, &g, stride, padding, need_input)?;
                    if trainable[ordinal] {
                        grads[ordinal] = Some(LayerParams { weight: gw, bias: gb });
                    }
                    match gx {
                        Some(gx) => gx,
                        None => break,
                    }
                }
                LayerSpec::Dense { .. } => {
                    let p = &self.params[ordinal];
                    let (gx, gw, gb) = ops::dense_backward(input, &p.weight, &g, need_input)?;
                    if trainable[ordinal] {
                        grads[ordinal] = Some(LayerParams { weight: gw, bias: gb });
                    }
                    match gx {
                        Some(gx) => gx,
                        None => break,
                    }
                }
                LayerSpec::MaxPool2D { .. } => {
                    let am = trace.argmax[i].as_ref().expect("pool argmax recorded");
                    ops::maxpool_backward(input.shape(), am, &g)?
                }
                LayerSpec::ReLU => ops::relu_backward(input, &g)?,
                LayerSpec::GlobalAvgPool => ops::gap_backward(input.shape(), &g)?,
                LayerSpec::Softmax => unreachable!("softmax is only the final layer"),
            };
            if i <= lowest {
                break;
            }
        }
        Ok((loss, grads))
    }
}
