use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::cv::{cross_validate, kfold_split, mean, CvConfig, FoldLearner, FoldLevel};
use super::dataset::{build_dataset, PrepConfig, Sample, SelectionStrategy};
use super::{EvalError, Result};
use crate::transfer::Regime;
use crate::volume::{SubjectRecord, Volume};

/// Run parameters echoed into every report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct ReportEcho {
    pub regime: Option<Regime>,
    pub strategy: Option<SelectionStrategy>,
    pub architecture: Option<String>,
    pub k: usize,
    pub level: FoldLevel,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_fold: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation (n − 1) of `per_fold`.
    pub stddev: f64,
    /// Total examples minus the examples of the largest test fold.
    pub training_size: usize,
    pub training_sizes: Vec<usize>,
    pub total_examples: usize,
    pub config: ReportEcho,
    /// The only field allowed to differ between identical runs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generated_at: Option<String>,
}

impl EvalReport {
    /// Model name plus "mean (stddev)" in percent.
    pub fn accuracy_cell(&self) -> String {
        format!("{:.2} ({:.2})", 100.0 * self.mean, 100.0 * self.stddev)
    }

    pub fn default_name(&self) -> String {
        let regime = match self.config.regime {
            Some(Regime::Scratch) => " (from scratch)",
            Some(Regime::HeadOnly) => " (transfer learning)",
            None => "",
        };
        format!("{}{}", self.config.architecture.as_deref().unwrap_or("model"), regime)
    }
}

/// A literature value shown next to computed runs, never computed here.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ReferenceRow {
    pub model: &'static str,
    pub accuracy: f64,
    pub stddev: Option<f64>,
    pub training_size: Option<usize>,
}

pub const PUBLISHED_ACCURACY: [ReferenceRow; 3] = [
    ReferenceRow {
        model: "VGG16 (from scratch)",
        accuracy: 74.12,
        stddev: Some(1.55),
        training_size: None,
    },
    ReferenceRow {
        model: "VGG16 (transfer learning)",
        accuracy: 92.3,
        stddev: Some(2.42),
        training_size: None,
    },
    ReferenceRow {
        model: "Inception V4 (transfer learning)",
        accuracy: 96.25,
        stddev: Some(1.2),
        training_size: None,
    },
];

pub const PUBLISHED_TRAINING_SIZES: [ReferenceRow; 6] = [
    ReferenceRow {
        model: "Wavelet + NN",
        accuracy: 90.06,
        stddev: None,
        training_size: Some(3_629),
    },
    ReferenceRow {
        model: "DeepAD (Inception)",
        accuracy: 98.84,
        stddev: None,
        training_size: Some(46_751),
    },
    ReferenceRow {
        model: "3DConv",
        accuracy: 95.39,
        stddev: None,
        training_size: Some(117_708),
    },
    ReferenceRow {
        model: "Sparse autoencoder + conv",
        accuracy: 94.74,
        stddev: None,
        training_size: Some(103_683),
    },
    ReferenceRow {
        model: "Stacked autoencoders",
        accuracy: 87.76,
        stddev: None,
        training_size: Some(21_726),
    },
    ReferenceRow {
        model: "Inception V4 (transfer learning)",
        accuracy: 96.25,
        stddev: None,
        training_size: Some(5_120),
    },
];

/// Image and training-set counts behind the published training size.
pub const PUBLISHED_SUBJECTS: usize = 200;
pub const PUBLISHED_SLICES_PER_SUBJECT: usize = 32;
pub const PUBLISHED_TOTAL_IMAGES: usize = 6_400;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Identity {
    pub expression: String,
    pub computed: usize,
    pub published: usize,
    pub holds: bool,
}

/// `subjects × slices = images` and `images × 0.8 = training size`, in exact
/// integer arithmetic.
pub fn training_size_identities() -> Vec<Identity> {
    let total = PUBLISHED_SUBJECTS * PUBLISHED_SLICES_PER_SUBJECT;
    let published_train = PUBLISHED_TRAINING_SIZES[5].training_size.unwrap();
    let exact = (PUBLISHED_TOTAL_IMAGES * 4) % 5 == 0;
    let train = PUBLISHED_TOTAL_IMAGES * 4 / 5;
    vec![
        Identity {
            expression: format!("{PUBLISHED_SUBJECTS} x {PUBLISHED_SLICES_PER_SUBJECT}"),
            computed: total,
            published: PUBLISHED_TOTAL_IMAGES,
            holds: total == PUBLISHED_TOTAL_IMAGES,
        },
        Identity {
            expression: format!("{PUBLISHED_TOTAL_IMAGES} x 0.8"),
            computed: train,
            published: published_train,
            holds: exact && train == published_train,
        },
    ]
}

impl ReferenceRow {
    pub fn accuracy_cell(&self) -> String {
        match self.stddev {
            Some(s) => format!("{} ({})", self.accuracy, s),
            None => format!("{}", self.accuracy),
        }
    }
}

/// Aligned plain-text table: model, accuracy % with stddev in brackets, and
/// optionally training size.
pub fn render_table(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for r in rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.chars().count());
        }
    }
    let line = |cells: Vec<&str>| {
        let mut s = String::from("|");
        for (c, w) in cells.iter().zip(&widths) {
            let _ = write!(s, " {c:<w$} |");
        }
        s.push('\n');
        s
    };
    let mut out = line(header.to_vec());
    out.push('|');
    for w in &widths {
        out.push_str(&"-".repeat(w + 2));
        out.push('|');
    }
    out.push('\n');
    for r in rows {
        out.push_str(&line(r.iter().map(String::as_str).collect()));
    }
    out
}

impl EvalReport {
    pub fn to_text(&self, name: &str) -> String {
        let mut s = render_table(
            &["Model", "Accuracy % (stddev)", "Training size"],
            &[vec![name.to_string(), self.accuracy_cell(), self.training_size.to_string()]],
        );
        let folds: Vec<String> = self.per_fold.iter().map(|a| format!("{:.4}", a)).collect();
        let _ = writeln!(s, "per-fold accuracy: {}", folds.join(" "));
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub strategy: SelectionStrategy,
    pub seed: u64,
    pub mean: f64,
    pub stddev: f64,
    pub per_fold: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub rows: Vec<ComparisonRow>,
    pub mean_entropy: f64,
    pub mean_random: f64,
    /// mean(Entropy) − mean(Random)
    pub mean_gap: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generated_at: Option<String>,
}

impl ComparisonTable {
    pub fn to_text(&self) -> String {
        let rows: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| {
                vec![
                    format!("{:?}", r.strategy),
                    r.seed.to_string(),
                    format!("{:.2} ({:.2})", 100.0 * r.mean, 100.0 * r.stddev),
                ]
            })
            .collect();
        let mut s = render_table(&["Selection", "Seed", "Accuracy % (stddev)"], &rows);
        let _ = writeln!(
            s,
            "mean gap (Entropy - Random): {:+.2} points ({:.2} vs {:.2})",
            100.0 * self.mean_gap,
            100.0 * self.mean_entropy,
            100.0 * self.mean_random
        );
        s
    }
}

/// Run select → preprocess → cross-validate for both strategies and every
/// seed. Seeds drive only the Random draw; the fold plan and training seeds
/// come from `cv` and the learner, so Entropy rows repeat exactly.
pub fn compare_selection<L: FoldLearner>(
    volumes: &[Volume],
    records: &[SubjectRecord],
    prep: &PrepConfig,
    cv: &CvConfig,
    learner: &L,
    seeds: &[u64],
) -> Result<ComparisonTable> {
    if seeds.len() < 2 {
        return Err(EvalError::BadParams(format!("need at least 2 seeds, got {}", seeds.len())));
    }
    let jobs: Vec<(SelectionStrategy, u64)> = [SelectionStrategy::Entropy, SelectionStrategy::Random]
        .into_iter()
        .flat_map(|st| seeds.iter().map(move |&s| (st, s)))
        .collect();
    let rows = jobs
        .par_iter()
        .map(|&(strategy, seed)| {
            let data = build_dataset(volumes, records, prep, strategy, seed)?;
            let report = run_cv(&data, cv, learner, ReportEcho {
                strategy: Some(strategy),
                k: cv.k,
                level: cv.level,
                seed: cv.seed,
                ..ReportEcho::default()
            })?;
            Ok(ComparisonRow {
                strategy,
                seed,
                mean: report.mean,
                stddev: report.stddev,
                per_fold: report.per_fold,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let means = |st: SelectionStrategy| mean(&rows.iter().filter(|r| r.strategy == st).map(|r| r.mean).collect::<Vec<_>>());
    let (e, r) = (means(SelectionStrategy::Entropy), means(SelectionStrategy::Random));
    Ok(ComparisonTable {
        rows,
        mean_entropy: e,
        mean_random: r,
        mean_gap: e - r,
        generated_at: None,
    })
}

/// Fold plan over the dataset's units, then cross-validate.
pub fn run_cv<L: FoldLearner>(data: &[Sample], cv: &CvConfig, learner: &L, echo: ReportEcho) -> Result<EvalReport> {
    let mut seen = std::collections::HashSet::new();
    let units: Vec<String> = data
        .iter()
        .map(|s| s.unit_id(cv.level))
        .filter(|u| seen.insert(u.clone()))
        .collect();
    let plan = kfold_split(&units, cv.k, cv.seed, cv.level)?;
    cross_validate(data, &plan, learner, echo)
}
