//! Cross-validation, accuracy statistics, the synthetic cohort generator and
//! entropy-versus-random selection comparison.

mod cv;
mod dataset;
mod pretrain;
mod report;
mod synth;

use thiserror::Error;

use crate::nn::NnError;
use crate::select::SelectError;
use crate::transfer::TransferError;
use crate::volume::VolumeError;

pub use cv::{
    accuracy, cross_validate, fold_seed, kfold_split, mean, sample_stddev, CnnLearner, CvConfig, FoldLearner,
    FoldLevel, FoldPlan,
};
pub use dataset::{build_dataset, select_slice_indices, PrepConfig, Sample, SelectionStrategy};
pub use pretrain::pretrain;
pub use report::{
    compare_selection, render_table, run_cv, training_size_identities, ComparisonRow, ComparisonTable, EvalReport,
    Identity, ReferenceRow, ReportEcho, PUBLISHED_ACCURACY, PUBLISHED_SLICES_PER_SUBJECT, PUBLISHED_SUBJECTS,
    PUBLISHED_TOTAL_IMAGES, PUBLISHED_TRAINING_SIZES,
};
pub use synth::{generate_synthetic_cohort, CohortSpec, TextureFamily};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("{n} units cannot fill {k} folds")]
    TooFewUnits { n: usize, k: usize },
    #[error("length mismatch: {0} predictions for {1} labels")]
    LengthMismatch(usize, usize),
    #[error("accuracy of an empty prediction list")]
    Empty,
    #[error("fold {0}: training split lacks one of the classes")]
    DegenerateFold(usize),
    #[error("invalid parameters: {0}")]
    BadParams(String),
    #[error("unit {0:?} is not covered by the fold plan")]
    MissingUnit(String),
    #[error(transparent)]
    Transfer(#[from] TransferError),
    #[error(transparent)]
    Select(#[from] SelectError),
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

impl From<NnError> for EvalError {
    fn from(e: NnError) -> Self {
        EvalError::Transfer(TransferError::Nn(e))
    }
}

pub type Result<T, E = EvalError> = std::result::Result<T, E>;
