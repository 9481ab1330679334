//! Histogram entropy scoring of 2D slices and top-k informative slice
//! selection.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::volume::Volume;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SelectError {
    #[error("degenerate histogram range ({0}, {1})")]
    DegenerateRange(f64, f64),
    #[error("histogram needs at least 2 bins, got {0}")]
    TooFewBins(usize),
    #[error("volume has no slices along the chosen axis")]
    EmptyVolume,
    #[error("invalid selection config: {0}")]
    BadConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    X,
    Y,
    #[default]
    Z,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RangeMode {
    #[default]
    PerVolume,
    PerSlice,
}

/// A single 2D image, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Slice2D {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f64>,
    pub slice_index: usize,
}

impl Slice2D {
    pub fn new(width: usize, height: usize, pixels: Vec<f64>, slice_index: usize) -> Self {
        assert!(width >= 1 && height >= 1, "slice extents must be positive");
        assert_eq!(pixels.len(), width * height, "pixel count must equal width * height");
        Self {
            width,
            height,
            pixels,
            slice_index,
        }
    }

    #[inline]
    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.pixels[row * self.width + col]
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.pixels
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &p| (lo.min(p), hi.max(p)))
    }
}

/// Extract every slice perpendicular to `axis`.
///
/// Plane layouts: Z gives `nx × ny` (row = y), Y gives `nx × nz` (row = z),
/// X gives `ny × nz` (row = z).
pub fn extract_slices(volume: &Volume, axis: Axis) -> Vec<Slice2D> {
    let [nx, ny, nz] = volume.dims();
    match axis {
        Axis::Z => {
            let plane = nx * ny;
            volume
                .voxels()
                .chunks_exact(plane)
                .enumerate()
                .map(|(z, p)| Slice2D::new(nx, ny, p.to_vec(), z))
                .collect()
        }
        Axis::Y => (0..ny)
            .map(|y| {
                let mut px = Vec::with_capacity(nx * nz);
                for z in 0..nz {
                    for x in 0..nx {
                        px.push(volume.get(x, y, z));
                    }
                }
                Slice2D::new(nx, nz, px, y)
            })
            .collect(),
        Axis::X => (0..nx)
            .map(|x| {
                let mut px = Vec::with_capacity(ny * nz);
                for z in 0..nz {
                    for y in 0..ny {
                        px.push(volume.get(x, y, z));
                    }
                }
                Slice2D::new(ny, nz, px, x)
            })
            .collect(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub bins: Vec<u64>,
    pub total: u64,
    pub range: (f64, f64),
}

impl Histogram {
    pub fn from_counts(bins: Vec<u64>, range: (f64, f64)) -> Self {
        let total = bins.iter().sum();
        Self { bins, total, range }
    }

    /// Shannon entropy in nats; same ordering as [`entropy_bits`].
    pub fn entropy_nats(&self) -> f64 {
        entropy_with(self, f64::ln)
    }
}

pub fn build_histogram(slice: &Slice2D, bins: usize, range: (f64, f64)) -> Result<Histogram, SelectError> {
    if bins < 2 {
        return Err(SelectError::TooFewBins(bins));
    }
    let (lo, hi) = range;
    if !(lo < hi) {
        return Err(SelectError::DegenerateRange(lo, hi));
    }
    let mut counts = vec![0u64; bins];
    let scale = bins as f64 / (hi - lo);
    let last = bins - 1;
    for &p in &slice.pixels {
        let pos = ((p - lo) * scale).floor();
        let bin = if pos <= 0.0 {
            0
        } else {
            (pos as usize).min(last)
        };
        counts[bin] += 1;
    }
    Ok(Histogram {
        bins: counts,
        total: slice.pixels.len() as u64,
        range,
    })
}

fn entropy_with(h: &Histogram, log: impl Fn(f64) -> f64) -> f64 {
    if h.total == 0 {
        return 0.0;
    }
    let total = h.total as f64;
    // summing over sorted counts makes the result a function of the count
    // multiset alone, so histograms that are permutations of each other tie
    // exactly in every log base
    let mut counts: Vec<u64> = h.bins.iter().copied().filter(|&c| c > 0).collect();
    counts.sort_unstable();
    let mut acc = 0.0;
    for c in counts {
        let p = c as f64 / total;
        acc -= p * log(p);
    }
    // -0.0 and tiny negative rounding from a single full bin
    acc.max(0.0)
}

/// `H = -Σ p_i log2 p_i` over nonempty bins, `p_i = count_i / total`.
pub fn entropy_bits(h: &Histogram) -> f64 {
    entropy_with(h, f64::log2)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EntropyScore {
    pub slice_index: usize,
    pub entropy_bits: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectionConfig {
    pub k: usize,
    #[serde(default = "default_bins")]
    pub bins: usize,
    #[serde(default)]
    pub axis: Axis,
    #[serde(default)]
    pub range_mode: RangeMode,
}

fn default_bins() -> usize {
    256
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            k: 32,
            bins: 256,
            axis: Axis::Z,
            range_mode: RangeMode::PerVolume,
        }
    }
}

impl SelectionConfig {
    pub fn with_k(k: usize) -> Self {
        Self { k, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), SelectError> {
        if self.k < 1 {
            return Err(SelectError::BadConfig("k must be at least 1".into()));
        }
        if self.bins < 2 {
            return Err(SelectError::TooFewBins(self.bins));
        }
        Ok(())
    }
}

fn score_slice(slice: &Slice2D, cfg: &SelectionConfig, volume_range: (f64, f64)) -> Result<f64, SelectError> {
    let range = match cfg.range_mode {
        RangeMode::PerVolume => volume_range,
        RangeMode::PerSlice => slice.min_max(),
    };
    if !(range.0 < range.1) {
        return Ok(0.0);
    }
    Ok(entropy_bits(&build_histogram(slice, cfg.bins, range)?))
}

/// Score every slice along `cfg.axis` without truncating.
pub fn score_slices(volume: &Volume, cfg: &SelectionConfig) -> Result<Vec<EntropyScore>, SelectError> {
    cfg.validate()?;
    let slices = extract_slices(volume, cfg.axis);
    if slices.is_empty() {
        return Err(SelectError::EmptyVolume);
    }
    let range = volume.value_range();
    slices
        .par_iter()
        .map(|s| {
            Ok(EntropyScore {
                slice_index: s.slice_index,
                entropy_bits: score_slice(s, cfg, range)?,
            })
        })
        .collect()
}

/// Sort by entropy descending, ties by ascending slice index.
pub fn sort_scores(scores: &mut [EntropyScore]) {
    scores.sort_by(|a, b| {
        b.entropy_bits
            .total_cmp(&a.entropy_bits)
            .then(a.slice_index.cmp(&b.slice_index))
    });
}

/// The `min(k, n)` highest-entropy slices, most informative first.
pub fn rank_slices(volume: &Volume, cfg: &SelectionConfig) -> Result<Vec<EntropyScore>, SelectError> {
    let mut scores = score_slices(volume, cfg)?;
    sort_scores(&mut scores);
    scores.truncate(cfg.k);
    Ok(scores)
}

/// Serialized selection result for one volume.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub source_id: String,
    pub axis: Axis,
    pub k: usize,
    pub bins: usize,
    pub range_mode: RangeMode,
    pub selected: Vec<EntropyScore>,
}

impl Selection {
    pub fn compute(volume: &Volume, cfg: &SelectionConfig) -> Result<Self, SelectError> {
        Ok(Self {
            source_id: volume.source_id().to_string(),
            axis: cfg.axis,
            k: cfg.k,
            bins: cfg.bins,
            range_mode: cfg.range_mode,
            selected: rank_slices(volume, cfg)?,
        })
    }

    pub fn indices(&self) -> Vec<usize> {
        self.selected.iter().map(|s| s.slice_index).collect()
    }
}
