use super::dataset::{build_dataset, PrepConfig, SelectionStrategy};
use super::synth::{generate_synthetic_cohort, CohortSpec};
use super::Result;
use crate::nn::{Architecture, Model};
use crate::transfer::{self, ContainerMeta, FreezeMask, TrainConfig, WeightContainer};
use crate::volume::Label;

/// Train `arch` from scratch on a generated auxiliary cohort and package the
/// result as a weight container for HeadOnly transfer.
pub fn pretrain(
    arch: Architecture,
    cohort: &CohortSpec,
    prep: &PrepConfig,
    train: &TrainConfig,
) -> Result<(WeightContainer, Vec<transfer::EpochStats>)> {
    let (volumes, records) = generate_synthetic_cohort(cohort)?;
    let data = build_dataset(&volumes, &records, prep, SelectionStrategy::Entropy, 0)?;
    let input = [3, prep.input_size, prep.input_size];
    let spec = arch.spec(input, Label::COUNT)?;
    let mut model = Model::<f32>::init_random(&spec, train.seed);
    let pairs: Vec<_> = data.iter().map(|s| (&s.input, s.label.class_index())).collect();
    let history = transfer::train(&mut model, &pairs, train, &FreezeMask::all_trainable(spec.n_parametric()))?;
    let meta = ContainerMeta {
        architecture_id: Some(arch.architecture_id(input, Label::COUNT)),
        normalization: Some(prep.normalization),
    };
    Ok((WeightContainer::from_model(&model, meta), history))
}
