//! Weight containers, layer freezing, optimizers and the mini-batch training
//! loop.

use std::collections::{BTreeMap, HashSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::{ImageTensor, Normalization};
use crate::nn::{Architecture, Gradients, LayerParams, Model, ModelSpec, NnError, Scalar, Tensor};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TransferError {
    #[error("bad magic: not an NSWT weight container")]
    BadMagic,
    #[error("unsupported container version {0}")]
    VersionUnsupported(u16),
    #[error("truncated container: need {needed} bytes at offset {offset}")]
    TruncatedData { offset: usize, needed: usize },
    #[error("malformed container: {0}")]
    Corrupt(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("duplicate tensor name {0:?}")]
    DuplicateName(String),
    #[error("container is missing tensor {0:?}")]
    MissingTensor(String),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("invalid training config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Nn(#[from] NnError),
}

pub type Result<T, E = TransferError> = std::result::Result<T, E>;

// ---------------------------------------------------------------------------
// NSWT container
// ---------------------------------------------------------------------------

const NSWT_MAGIC: &[u8; 4] = b"NSWT";
pub const NSWT_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct ContainerMeta {
    pub architecture_id: Option<String>,
    pub normalization: Option<Normalization>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightContainer {
    pub format_version: u16,
    pub meta: ContainerMeta,
    /// Sorted by name; serialization order follows the map.
    pub tensors: BTreeMap<String, NamedTensor>,
}

pub fn weight_name(spec: &ModelSpec, ordinal: usize, bias: bool) -> String {
    format!("{}.{}", spec.layer_path(ordinal), if bias { "bias" } else { "weight" })
}

/// Expected `(name, shape)` pairs for every parameter of a spec.
pub fn expected_tensors(spec: &ModelSpec) -> Vec<(String, Vec<usize>)> {
    spec.param_shapes()
        .into_iter()
        .enumerate()
        .flat_map(|(ord, (w, b, _))| [(weight_name(spec, ord, false), w), (weight_name(spec, ord, true), b)])
        .collect()
}

impl WeightContainer {
    pub fn from_model<T: Scalar>(model: &Model<T>, meta: ContainerMeta) -> Self {
        let spec = model.spec();
        let mut tensors = BTreeMap::new();
        for (ord, p) in model.params().iter().enumerate() {
            for (bias, t) in [(false, &p.weight), (true, &p.bias)] {
                tensors.insert(
                    weight_name(spec, ord, bias),
                    NamedTensor {
                        shape: t.shape().to_vec(),
                        values: t.data().iter().map(|v| v.as_f64() as f32).collect(),
                    },
                );
            }
        }
        Self {
            format_version: NSWT_VERSION,
            meta,
            tensors,
        }
    }

    pub fn tensor<T: Scalar>(&self, name: &str, shape: &[usize]) -> Result<Tensor<T>> {
        let t = self
            .tensors
            .get(name)
            .ok_or_else(|| TransferError::MissingTensor(name.to_string()))?;
        if t.shape != shape {
            return Err(TransferError::ShapeMismatch(format!(
                "{name}: container {:?}, model {shape:?}",
                t.shape
            )));
        }
        Ok(Tensor::from_vec(
            t.shape.clone(),
            t.values.iter().map(|&v| T::of(v as f64)).collect(),
        )?)
    }

    /// Check tensor shapes against the declared architecture, if any.
    pub fn validate(&self) -> Result<()> {
        let Some(id) = self.meta.architecture_id.as_deref() else {
            return Ok(());
        };
        let Some((arch, input, n_classes)) = Architecture::parse_id(id) else {
            return Ok(());
        };
        let spec = arch
            .spec(input, n_classes)
            .map_err(|e| TransferError::ShapeMismatch(format!("architecture {id}: {e}")))?;
        let expected: BTreeMap<_, _> = expected_tensors(&spec).into_iter().collect();
        for (name, t) in &self.tensors {
            match expected.get(name) {
                Some(shape) if *shape == t.shape => {}
                Some(shape) => {
                    return Err(TransferError::ShapeMismatch(format!(
                        "{name}: {:?} but {id} expects {shape:?}",
                        t.shape
                    )))
                }
                None => {
                    return Err(TransferError::ShapeMismatch(format!("{name} is not a tensor of {id}")));
                }
            }
        }
        Ok(())
    }

    pub fn encode(&self) -> Vec<u8> {
        let meta = serde_json::to_vec(&self.meta).expect("metadata serializes");
        let mut out = Vec::new();
        out.extend_from_slice(NSWT_MAGIC);
        out.extend_from_slice(&self.format_version.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u16).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.shape.len() as u8);
            for &d in &t.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in &t.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(TransferError::TruncatedData {
                offset: self.pos,
                needed: n,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Serialize a model's parameters (as f32) with metadata.
pub fn save_weights<T: Scalar>(model: &Model<T>, meta: ContainerMeta) -> Vec<u8> {
    WeightContainer::from_model(model, meta).encode()
}

/// Decode and validate an NSWT stream.
pub fn load_weights(bytes: &[u8]) -> Result<WeightContainer> {
    if bytes.len() < 4 || &bytes[..4] != NSWT_MAGIC {
        return Err(TransferError::BadMagic);
    }
    let mut cur = Cursor { bytes, pos: 4 };
    let version = cur.u16()?;
    if version != NSWT_VERSION {
        return Err(TransferError::VersionUnsupported(version));
    }
    let meta_len = cur.u16()? as usize;
    let meta: ContainerMeta = serde_json::from_slice(cur.take(meta_len)?)
        .map_err(|e| TransferError::Corrupt(format!("metadata: {e}")))?;
    let count = cur.u32()?;
    let mut tensors = BTreeMap::new();
    let mut seen = HashSet::new();
    for _ in 0..count {
        let name_len = cur.u16()? as usize;
        let name = std::str::from_utf8(cur.take(name_len)?)
            .map_err(|_| TransferError::Corrupt("tensor name is not UTF-8".into()))?
            .to_string();
        if !seen.insert(name.clone()) {
            return Err(TransferError::DuplicateName(name));
        }
        let rank = cur.u8()? as usize;
        let shape = (0..rank).map(|_| cur.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        if shape.is_empty() || shape.contains(&0) {
            return Err(TransferError::Corrupt(format!("{name}: invalid shape {shape:?}")));
        }
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| TransferError::Corrupt(format!("{name}: shape overflow")))?;
        let raw = cur.take(n.checked_mul(4).ok_or_else(|| TransferError::Corrupt("size overflow".into()))?)?;
        let values = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        tensors.insert(name, NamedTensor { shape, values });
    }
    if cur.pos != bytes.len() {
        return Err(TransferError::Corrupt(format!("{} trailing bytes", bytes.len() - cur.pos)));
    }
    let container = WeightContainer {
        format_version: version,
        meta,
        tensors,
    };
    container.validate()?;
    Ok(container)
}

// ---------------------------------------------------------------------------
// Transfer setup
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// Random init, every layer trainable.
    #[default]
    Scratch,
    /// Backbone loaded from a container and frozen; final Dense re-drawn and
    /// trained.
    HeadOnly,
}

/// `true` marks a trainable parametric layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FreezeMask {
    pub trainable: Vec<bool>,
}

impl FreezeMask {
    pub fn all_trainable(n: usize) -> Self {
        Self { trainable: vec![true; n] }
    }

    /// Only the last `n_trainable` parametric layers train.
    pub fn last(n_layers: usize, n_trainable: usize) -> Self {
        Self {
            trainable: (0..n_layers).map(|i| i + n_trainable >= n_layers).collect(),
        }
    }

    pub fn n_trainable(&self) -> usize {
        self.trainable.iter().filter(|&&t| t).count()
    }
}

/// Seed used to re-draw the head in HeadOnly mode.
fn head_seed(seed: u64) -> u64 {
    seed ^ 0x6865_6164_5f69_6e69
}

pub fn apply_transfer<T: Scalar>(
    spec: &ModelSpec,
    weights: Option<&WeightContainer>,
    regime: Regime,
    seed: u64,
) -> Result<(Model<T>, FreezeMask)> {
    match regime {
        Regime::Scratch => Ok((Model::init_random(spec, seed), FreezeMask::all_trainable(spec.n_parametric()))),
        Regime::HeadOnly => {
            let weights = weights.ok_or_else(|| TransferError::MissingTensor("<no container given>".into()))?;
            apply_transfer_retraining(spec, weights, 1, seed)
        }
    }
}

/// Load every layer except the final Dense from `weights`, re-initialize
/// the final Dense, and leave the last `retrain` parametric layers trainable.
pub fn apply_transfer_retraining<T: Scalar>(
    spec: &ModelSpec,
    weights: &WeightContainer,
    retrain: usize,
    seed: u64,
) -> Result<(Model<T>, FreezeMask)> {
    let n = spec.n_parametric();
    let head = spec
        .head_ordinal()
        .ok_or_else(|| TransferError::ShapeMismatch("model has no final Dense head".into()))?;
    if retrain == 0 || retrain > n {
        return Err(TransferError::BadConfig(format!("retrain {retrain} of {n} layers")));
    }
    let mut params = Vec::with_capacity(n);
    let mut fresh = Model::<T>::init_random(spec, seed);
    fresh.reinit_layer(head, head_seed(seed));
    for (ord, (w, b, _)) in spec.param_shapes().into_iter().enumerate() {
        if ord == head {
            params.push(fresh.params()[head].clone());
        } else {
            params.push(LayerParams {
                weight: weights.tensor(&weight_name(spec, ord, false), &w)?,
                bias: weights.tensor(&weight_name(spec, ord, true), &b)?,
            });
        }
    }
    Ok((Model::from_params(spec.clone(), params)?, FreezeMask::last(n, retrain)))
}

// ---------------------------------------------------------------------------
// Optimizers
// ---------------------------------------------------------------------------

fn same_shape<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TransferError::ShapeMismatch(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// `w ← w − lr·g`
pub fn sgd_step<T: Scalar>(param: &mut Tensor<T>, grad: &Tensor<T>, lr: T) -> Result<()> {
    same_shape(param, grad)?;
    for (w, &g) in param.data_mut().iter_mut().zip(grad.data()) {
        *w -= lr * g;
    }
    Ok(())
}

/// `a ← ρ·a + (1−ρ)·g²;  w ← w − lr·g / (√a + ε)`
pub fn rmsprop_step<T: Scalar>(
    param: &mut Tensor<T>,
    grad: &Tensor<T>,
    acc: &mut Tensor<T>,
    lr: T,
    rho: T,
    eps: T,
) -> Result<()> {
    same_shape(param, grad)?;
    same_shape(param, acc)?;
    let one_minus = T::one() - rho;
    for ((w, &g), a) in param.data_mut().iter_mut().zip(grad.data()).zip(acc.data_mut()) {
        *a = rho * *a + one_minus * g * g;
        *w -= lr * g / (a.sqrt() + eps);
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    #[serde(rename = "rmsprop")]
    RmsProp,
}

#[derive(Debug, Clone)]
pub enum OptimizerState<T> {
    Sgd,
    /// Squared-gradient accumulators, one per parameter tensor, starting at 0.
    RmsProp(Vec<LayerParams<T>>),
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(kind: OptimizerKind, model: &Model<T>) -> Self {
        match kind {
            OptimizerKind::Sgd => OptimizerState::Sgd,
            OptimizerKind::RmsProp => OptimizerState::RmsProp(
                model
                    .params()
                    .iter()
                    .map(|p| LayerParams {
                        weight: Tensor::zeros(p.weight.shape()),
                        bias: Tensor::zeros(p.bias.shape()),
                    })
                    .collect(),
            ),
        }
    }

    /// Apply one update to every layer with a gradient.
    pub fn step(&mut self, model: &mut Model<T>, grads: &Gradients<T>, cfg: &TrainConfig) -> Result<()> {
        let lr = T::of(cfg.learning_rate);
        for (ord, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let p = &mut model.params_mut()[ord];
            match self {
                OptimizerState::Sgd => {
                    sgd_step(&mut p.weight, &g.weight, lr)?;
                    sgd_step(&mut p.bias, &g.bias, lr)?;
                }
                OptimizerState::RmsProp(acc) => {
                    let (rho, eps) = (T::of(cfg.rmsprop_decay), T::of(cfg.rmsprop_epsilon));
                    rmsprop_step(&mut p.weight, &g.weight, &mut acc[ord].weight, lr, rho, eps)?;
                    rmsprop_step(&mut p.bias, &g.bias, &mut acc[ord].bias, lr, rho, eps)?;
                }
            }
        }
        Ok(())
    }

    pub fn accumulators(&self) -> Option<&[LayerParams<T>]> {
        match self {
            OptimizerState::Sgd => None,
            OptimizerState::RmsProp(acc) => Some(acc),
        }
    }
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

fn default_decay() -> f64 {
    0.9
}

fn default_epsilon() -> f64 {
    1e-8
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    #[serde(default = "default_decay")]
    pub rmsprop_decay: f64,
    #[serde(default = "default_epsilon")]
    pub rmsprop_epsilon: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_true")]
    pub shuffle: bool,
    /// Fixed-order gradient reduction. Set from the command line, not config.
    #[serde(skip, default = "default_true")]
    pub deterministic: bool,
}

impl TrainConfig {
    /// 100 epochs, batch 40, RMSProp (lr 0.001, ρ 0.9, ε 1e-8).
    pub fn vgg_style() -> Self {
        Self {
            epochs: 100,
            batch_size: 40,
            optimizer: OptimizerKind::RmsProp,
            learning_rate: 1e-3,
            rmsprop_decay: 0.9,
            rmsprop_epsilon: 1e-8,
            seed: 0,
            shuffle: true,
            deterministic: true,
        }
    }

    /// 100 epochs, batch 8, plain SGD at lr 0.0001.
    pub fn inception_style() -> Self {
        Self {
            epochs: 100,
            batch_size: 8,
            optimizer: OptimizerKind::Sgd,
            learning_rate: 1e-4,
            ..Self::vgg_style()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TransferError::BadConfig(m.to_string()));
        if self.epochs == 0 {
            return bad("epochs must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return bad("learning_rate must be a finite nonnegative number");
        }
        if !(self.rmsprop_decay > 0.0 && self.rmsprop_decay < 1.0) {
            return bad("rmsprop_decay must lie in (0, 1)");
        }
        if !(self.rmsprop_epsilon > 0.0) {
            return bad("rmsprop_epsilon must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean pre-update cross-entropy over the epoch's examples.
    pub loss: f64,
    /// Fraction of examples classified correctly before their batch update.
    pub train_accuracy: f64,
}

struct SampleOutcome<T> {
    loss: f64,
    correct: bool,
    grads: Gradients<T>,
}

fn add_grads<T: Scalar>(acc: &mut Gradients<T>, g: &Gradients<T>) {
    for (a, g) in acc.iter_mut().zip(g) {
        match (a.as_mut(), g) {
            (Some(a), Some(g)) => {
                a.weight.add_scaled(&g.weight, T::one()).expect("matching gradient shapes");
                a.bias.add_scaled(&g.bias, T::one()).expect("matching gradient shapes");
            }
            (None, Some(g)) => *a = Some(g.clone()),
            _ => {}
        }
    }
}

fn argmax<T: Scalar>(p: &Tensor<T>) -> usize {
    let d = p.data();
    (1..d.len()).fold(0, |best, i| if d[i] > d[best] { i } else { best })
}

/// Mini-batch training. Per-sample gradients are computed in parallel; in
/// deterministic mode they are summed in dataset order so results do not
/// depend on the thread count.
pub fn train<T: Scalar, X: AsRef<ImageTensor> + Sync>(
    model: &mut Model<T>,
    dataset: &[(X, usize)],
    cfg: &TrainConfig,
    mask: &FreezeMask,
) -> Result<Vec<EpochStats>> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(TransferError::EmptyDataset);
    }
    if mask.trainable.len() != model.spec().n_parametric() {
        return Err(TransferError::ShapeMismatch("freeze mask length".into()));
    }
    if mask.n_trainable() == 0 {
        return Err(TransferError::BadConfig("no trainable layer".into()));
    }
    let n_classes = model.spec().n_classes();
    let inputs: Vec<Tensor<T>> = dataset.iter().map(|(x, _)| x.as_ref().to_tensor()).collect();
    for x in &inputs {
        if x.shape() != model.spec().input() {
            return Err(TransferError::ShapeMismatch(format!(
                "input {:?} for model input {:?}",
                x.shape(),
                model.spec().input()
            )));
        }
    }
    if let Some(&(_, label)) = dataset.iter().find(|(_, l)| *l >= n_classes) {
        return Err(NnError::BadLabel {
            label,
            classes: n_classes,
        }
        .into());
    }

    let mut opt = OptimizerState::new(cfg.optimizer, model);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        if cfg.shuffle {
            order.shuffle(&mut rng);
        }
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let outcome = |&i: &usize| -> Result<SampleOutcome<T>> {
                let trace = model.forward_trace(&inputs[i])?;
                let label = dataset[i].1;
                let (loss, grads) = model.backward_from_trace(&trace, label, &mask.trainable)?;
                Ok(SampleOutcome {
                    loss,
                    correct: argmax(trace.probs()) == label,
                    grads,
                })
            };
            let empty = || SampleOutcome {
                loss: 0.0,
                correct: false,
                grads: vec![None; mask.trainable.len()],
            };
            let merge = |mut a: SampleOutcome<T>, b: SampleOutcome<T>| {
                add_grads(&mut a.grads, &b.grads);
                a.loss += b.loss;
                a
            };
            let (batch_loss, batch_correct, mut grads) = if cfg.deterministic {
                let per: Vec<SampleOutcome<T>> = batch.par_iter().map(outcome).collect::<Result<_>>()?;
                let n_ok = per.iter().filter(|o| o.correct).count();
                let total = per.into_iter().fold(empty(), merge);
                (total.loss, n_ok, total.grads)
            } else {
                let (total, n_ok) = batch
                    .par_iter()
                    .map(|i| outcome(i).map(|o| (usize::from(o.correct), o)))
                    .try_reduce(
                        || (0, empty()),
                        |(ca, a), (cb, b)| Ok((ca + cb, merge(a, b))),
                    )
                    .map(|(c, o)| (o, c))?;
                (total.loss, n_ok, total.grads)
            };
            let inv = T::one() / T::of(batch.len() as f64);
            for g in grads.iter_mut().flatten() {
                g.weight.scale(inv);
                g.bias.scale(inv);
            }
            opt.step(model, &grads, cfg)?;
            loss_sum += batch_loss;
            correct += batch_correct;
        }
        history.push(EpochStats {
            epoch,
            loss: loss_sum / dataset.len() as f64,
            train_accuracy: correct as f64 / dataset.len() as f64,
        });
    }
    Ok(history)
}

/// Class index (ties to the lower index) and class probabilities.
pub fn predict<T: Scalar>(model: &Model<T>, input: &ImageTensor) -> Result<(usize, Vec<f64>)> {
    let (class, probs) = model.predict(&input.to_tensor())?;
    Ok((class, probs.data().iter().map(|p| p.as_f64()).collect()))
}

impl AsRef<ImageTensor> for ImageTensor {
    fn as_ref(&self) -> &ImageTensor {
        self
    }
}
