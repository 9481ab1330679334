use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::cv::FoldLevel;
use super::{EvalError, Result};
use crate::image::{to_model_input, ImageTensor, Normalization};
use crate::select::{extract_slices, rank_slices, SelectionConfig};
use crate::volume::{Label, SubjectRecord, Volume};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SelectionStrategy {
    #[default]
    Entropy,
    /// `k` slice indices drawn uniformly without replacement.
    Random,
}

/// Everything between a volume and a batch of network inputs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrepConfig {
    pub selection: SelectionConfig,
    pub input_size: usize,
    #[serde(default)]
    pub normalization: Normalization,
}

/// One labelled slice.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub subject_id: String,
    pub slice_index: usize,
    pub input: ImageTensor,
    pub label: Label,
}

impl Sample {
    pub fn unit_id(&self, level: FoldLevel) -> String {
        match level {
            FoldLevel::Subject => self.subject_id.clone(),
            FoldLevel::Slice => format!("{}#{}", self.subject_id, self.slice_index),
        }
    }
}

impl AsRef<ImageTensor> for Sample {
    fn as_ref(&self) -> &ImageTensor {
        &self.input
    }
}

fn fnv1a(s: &str) -> u64 {
    s.bytes()
        .fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Slice indices for one volume. `seed` only matters for `Random`, which
/// mixes in the subject id so subjects draw independently.
pub fn select_slice_indices(
    volume: &Volume,
    cfg: &SelectionConfig,
    strategy: SelectionStrategy,
    seed: u64,
) -> Result<Vec<usize>> {
    cfg.validate()?;
    match strategy {
        SelectionStrategy::Entropy => Ok(rank_slices(volume, cfg)?.iter().map(|s| s.slice_index).collect()),
        SelectionStrategy::Random => {
            let n = volume.dims()[cfg.axis as usize];
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(volume.source_id()));
            Ok(rand::seq::index::sample(&mut rng, n, cfg.k.min(n)).into_vec())
        }
    }
}

/// Select, resize and normalize slices for every subject. `volumes[i]`
/// belongs to `records[i]`; samples come out grouped by subject in record
/// order, slices in selection order.
pub fn build_dataset(
    volumes: &[Volume],
    records: &[SubjectRecord],
    prep: &PrepConfig,
    strategy: SelectionStrategy,
    seed: u64,
) -> Result<Vec<Sample>> {
    if volumes.len() != records.len() {
        return Err(EvalError::BadParams(format!(
            "{} volumes for {} manifest records",
            volumes.len(),
            records.len()
        )));
    }
    prep.normalization.validate().map_err(EvalError::BadParams)?;
    let per_subject = volumes
        .par_iter()
        .zip(records)
        .map(|(vol, rec)| {
            let indices = select_slice_indices(vol, &prep.selection, strategy, seed)?;
            let slices = extract_slices(vol, prep.selection.axis);
            Ok(indices
                .into_iter()
                .map(|z| Sample {
                    subject_id: rec.subject_id.clone(),
                    slice_index: z,
                    input: to_model_input(&slices[z], prep.input_size, &prep.normalization),
                    label: rec.label,
                })
                .collect::<Vec<_>>())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(per_subject.into_iter().flatten().collect())
}
