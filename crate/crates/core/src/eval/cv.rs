use std::collections::{BTreeMap, HashSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::dataset::Sample;
use super::report::{EvalReport, ReportEcho};
use super::{EvalError, Result};
use crate::nn::{Model, ModelSpec};
use crate::transfer::{self, apply_transfer, Regime, TrainConfig, WeightContainer};
use crate::volume::Label;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FoldLevel {
    /// All slices of a subject share a fold.
    #[default]
    Subject,
    /// Every slice is its own unit.
    Slice,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CvConfig {
    pub k: usize,
    #[serde(default)]
    pub level: FoldLevel,
    #[serde(default)]
    pub seed: u64,
}

impl Default for CvConfig {
    fn default() -> Self {
        Self {
            k: 5,
            level: FoldLevel::Subject,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    pub level: FoldLevel,
    pub assignment: BTreeMap<String, usize>,
}

impl FoldPlan {
    pub fn fold_of(&self, unit: &str) -> Option<usize> {
        self.assignment.get(unit).copied()
    }

    /// Units per fold, each list sorted.
    pub fn folds(&self) -> Vec<Vec<&str>> {
        let mut folds = vec![Vec::new(); self.k];
        for (u, &f) in &self.assignment {
            folds[f].push(u.as_str());
        }
        folds
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        self.folds().iter().map(Vec::len).collect()
    }
}

/// Seeded shuffle, then round-robin assignment to `k` folds.
pub fn kfold_split(units: &[String], k: usize, seed: u64, level: FoldLevel) -> Result<FoldPlan> {
    if k < 2 {
        return Err(EvalError::BadParams(format!("k = {k}; need at least 2 folds")));
    }
    if units.len() < k {
        return Err(EvalError::TooFewUnits { n: units.len(), k });
    }
    let mut seen = HashSet::new();
    if let Some(dup) = units.iter().find(|u| !seen.insert(u.as_str())) {
        return Err(EvalError::BadParams(format!("duplicate unit id {dup:?}")));
    }
    let mut order: Vec<&String> = units.iter().collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let assignment = order.into_iter().enumerate().map(|(i, u)| (u.clone(), i % k)).collect();
    Ok(FoldPlan { k, level, assignment })
}

pub fn accuracy<L: PartialEq>(predictions: &[L], truth: &[L]) -> Result<f64> {
    if predictions.len() != truth.len() {
        return Err(EvalError::LengthMismatch(predictions.len(), truth.len()));
    }
    if truth.is_empty() {
        return Err(EvalError::Empty);
    }
    let hits = predictions.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / truth.len() as f64)
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation (n − 1 denominator); 0 for fewer than two values.
pub fn sample_stddev(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

pub fn fold_seed(seed: u64, fold: usize) -> u64 {
    seed ^ (fold as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Something that can be fitted on one fold's training split.
pub trait FoldLearner: Sync {
    type Fitted: Send;

    fn fit(&self, train: &[&Sample], fold: usize) -> Result<Self::Fitted>;

    fn predict(&self, fitted: &Self::Fitted, sample: &Sample) -> Result<Label>;
}

/// Trains a CNN per fold under the given regime.
#[derive(Debug, Clone)]
pub struct CnnLearner {
    pub spec: ModelSpec,
    pub regime: Regime,
    pub weights: Option<WeightContainer>,
    pub train: TrainConfig,
}

impl FoldLearner for CnnLearner {
    type Fitted = Model<f32>;

    fn fit(&self, train: &[&Sample], fold: usize) -> Result<Model<f32>> {
        let seed = fold_seed(self.train.seed, fold);
        let (mut model, mask) = apply_transfer::<f32>(&self.spec, self.weights.as_ref(), self.regime, seed)?;
        let data: Vec<(&crate::image::ImageTensor, usize)> =
            train.iter().map(|s| (&s.input, s.label.class_index())).collect();
        let cfg = TrainConfig {
            seed,
            ..self.train.clone()
        };
        transfer::train(&mut model, &data, &cfg, &mask)?;
        Ok(model)
    }

    fn predict(&self, fitted: &Model<f32>, sample: &Sample) -> Result<Label> {
        let (class, _) = transfer::predict(fitted, &sample.input)?;
        Label::from_class_index(class).ok_or_else(|| EvalError::BadParams(format!("class {class} has no label")))
    }
}

/// Train on every fold but one, test on the held-out fold, rotate.
pub fn cross_validate<L: FoldLearner>(
    dataset: &[Sample],
    plan: &FoldPlan,
    learner: &L,
    echo: ReportEcho,
) -> Result<EvalReport> {
    let mut fold_of = Vec::with_capacity(dataset.len());
    for s in dataset {
        let unit = s.unit_id(plan.level);
        fold_of.push(plan.fold_of(&unit).ok_or(EvalError::MissingUnit(unit))?);
    }
    let splits: Vec<(Vec<&Sample>, Vec<&Sample>)> = (0..plan.k)
        .map(|f| {
            let (test, train): (Vec<_>, Vec<_>) = dataset.iter().zip(&fold_of).partition(|(_, &g)| g == f);
            (
                train.into_iter().map(|(s, _)| s).collect(),
                test.into_iter().map(|(s, _)| s).collect(),
            )
        })
        .collect();
    for (f, (train, test)) in splits.iter().enumerate() {
        let has = |l: Label| train.iter().any(|s| s.label == l);
        if !has(Label::HC) || !has(Label::AD) {
            return Err(EvalError::DegenerateFold(f));
        }
        if test.is_empty() {
            return Err(EvalError::BadParams(format!("fold {f} has no test examples")));
        }
    }
    let per_fold: Vec<f64> = splits
        .par_iter()
        .enumerate()
        .map(|(f, (train, test))| {
            let fitted = learner.fit(train, f)?;
            let preds = test.iter().map(|s| learner.predict(&fitted, s)).collect::<Result<Vec<_>>>()?;
            let truth: Vec<Label> = test.iter().map(|s| s.label).collect();
            accuracy(&preds, &truth)
        })
        .collect::<Result<_>>()?;
    let training_sizes: Vec<usize> = splits.iter().map(|(train, _)| train.len()).collect();
    Ok(EvalReport {
        mean: mean(&per_fold),
        stddev: sample_stddev(&per_fold),
        per_fold,
        training_size: *training_sizes.iter().min().unwrap(),
        training_sizes,
        total_examples: dataset.len(),
        config: echo,
        generated_at: None,
    })
}
