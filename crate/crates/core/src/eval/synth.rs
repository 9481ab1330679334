use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{EvalError, Result};
use crate::volume::{Label, SubjectRecord, Volume};

/// Texture used inside the synthetic brain. Both families come in a
/// low-frequency (HC) and a high-frequency (AD) variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TextureFamily {
    /// Mean of two orthogonal square-wave gratings (values -1, 0, 1), rotated
    /// by a random angle.
    #[default]
    Checker,
    /// A single sinusoidal grating with random orientation.
    Gratings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CohortSpec {
    pub n_subjects: usize,
    pub dims: [usize; 3],
    /// Texture amplitude relative to the unit tissue intensity.
    pub class_gap: f64,
    /// Standard deviation of the additive Gaussian noise.
    pub noise: f64,
    #[serde(default)]
    pub family: TextureFamily,
    pub seed: u64,
}

impl CohortSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_subjects == 0 || self.n_subjects % 2 != 0 {
            return Err(EvalError::BadParams(format!(
                "n_subjects must be even and positive, got {}",
                self.n_subjects
            )));
        }
        if self.dims.iter().any(|&d| d < 2) {
            return Err(EvalError::BadParams(format!("every extent must be at least 2, got {:?}", self.dims)));
        }
        if !(self.class_gap > 0.0) || !self.class_gap.is_finite() {
            return Err(EvalError::BadParams(format!("class_gap must be positive, got {}", self.class_gap)));
        }
        if !(self.noise >= 0.0) || !self.noise.is_finite() {
            return Err(EvalError::BadParams(format!("noise must be nonnegative, got {}", self.noise)));
        }
        Ok(())
    }
}

const LOW_CYCLES: f64 = 1.5;
const HIGH_CYCLES: f64 = 5.0;
const AD_CDRS: [f64; 3] = [0.5, 1.0, 2.0];

struct Texture {
    family: TextureFamily,
    cycles: f64,
    theta: f64,
    phase: (f64, f64),
}

impl Texture {
    fn sample(family: TextureFamily, label: Label, rng: &mut ChaCha8Rng) -> Self {
        let base = match label {
            Label::HC => LOW_CYCLES,
            Label::AD => HIGH_CYCLES,
        };
        Self {
            family,
            cycles: base * rng.random_range(0.85..1.15),
            theta: rng.random_range(0.0..std::f64::consts::PI),
            phase: (rng.random_range(0.0..TAU), rng.random_range(0.0..TAU)),
        }
    }

    /// `u`, `v` in [0, 1).
    fn at(&self, u: f64, v: f64) -> f64 {
        let f = TAU * self.cycles;
        match self.family {
            TextureFamily::Checker => {
                let (c, s) = (self.theta.cos(), self.theta.sin());
                let a = (f * (u * c + v * s) + self.phase.0).sin().signum();
                let b = (f * (v * c - u * s) + self.phase.1).sin().signum();
                0.5 * (a + b)
            }
            TextureFamily::Gratings => {
                (f * (u * self.theta.cos() + v * self.theta.sin()) + self.phase.0).sin()
            }
        }
    }
}

fn subject_volume(spec: &CohortSpec, id: &str, label: Label, seed: u64) -> Result<Volume> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [nx, ny, nz] = spec.dims;
    let texture = Texture::sample(spec.family, label, &mut rng);
    // ellipsoid semi-axes in normalized coordinates, jittered per subject
    let semi = [
        rng.random_range(0.75..0.9),
        rng.random_range(0.8..0.95),
        rng.random_range(0.85..1.0),
    ];
    let noise = Normal::new(0.0, spec.noise).map_err(|e| EvalError::BadParams(e.to_string()))?;
    let norm = |i: usize, n: usize| (i as f64 + 0.5) / n as f64;
    let mut voxels = vec![0.0; nx * ny * nz];
    for z in 0..nz {
        let w = 2.0 * norm(z, nz) - 1.0;
        let envelope = (-(w / 0.4).powi(2)).exp();
        for y in 0..ny {
            let v = norm(y, ny);
            for x in 0..nx {
                let u = norm(x, nx);
                let r2 = ((2.0 * u - 1.0) / semi[0]).powi(2)
                    + ((2.0 * v - 1.0) / semi[1]).powi(2)
                    + (w / semi[2]).powi(2);
                let tissue = if r2 <= 1.0 {
                    1.0 + spec.class_gap * envelope * texture.at(u, v)
                } else {
                    0.0
                };
                voxels[x + nx * (y + ny * z)] = tissue + noise.sample(&mut rng);
            }
        }
    }
    Ok(Volume::new(spec.dims, voxels, id)?)
}

/// Balanced two-class cohort. Subjects alternate HC, AD; ids are `sub-000`,
/// `sub-001`, ... and volume paths `<id>.rvol`.
pub fn generate_synthetic_cohort(spec: &CohortSpec) -> Result<(Vec<Volume>, Vec<SubjectRecord>)> {
    spec.validate()?;
    let records = (0..spec.n_subjects)
        .map(|i| {
            let id = format!("sub-{i:03}");
            let cdr = if i % 2 == 0 { 0.0 } else { AD_CDRS[(i / 2) % AD_CDRS.len()] };
            Ok(SubjectRecord::new(id.clone(), cdr, format!("{id}.rvol"))?)
        })
        .collect::<Result<Vec<_>>>()?;
    let volumes = records
        .par_iter()
        .enumerate()
        .map(|(i, r)| {
            let seed = spec.seed ^ (i as u64 + 1).wrapping_mul(0xA076_1D64_78BD_642F);
            subject_volume(spec, &r.subject_id, r.label, seed)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((volumes, records))
}
