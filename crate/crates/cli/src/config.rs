use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use serde::{Deserialize, Serialize};

use neuroslice::eval::{CohortSpec, CvConfig, PrepConfig, SelectionStrategy};
use neuroslice::image::Normalization;
use neuroslice::nn::{Architecture, ModelSpec};
use neuroslice::select::SelectionConfig;
use neuroslice::transfer::{Regime, TrainConfig};
use neuroslice::volume::Label;

fn default_input_size() -> usize {
    150
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

fn default_architecture() -> Architecture {
    Architecture::MicroVgg
}

/// JSON run configuration. Relative paths resolve against the config file's
/// directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub manifest_path: Option<PathBuf>,
    #[serde(default)]
    pub selection: SelectionConfig,
    #[serde(default)]
    pub strategy: SelectionStrategy,
    #[serde(default = "default_input_size")]
    pub input_size: usize,
    #[serde(default)]
    pub normalization: Normalization,
    #[serde(default = "default_architecture")]
    pub architecture: Architecture,
    #[serde(default)]
    pub regime: Regime,
    #[serde(default)]
    pub weights_path: Option<PathBuf>,
    #[serde(default = "TrainConfig::vgg_style")]
    pub train: TrainConfig,
    #[serde(default)]
    pub cv: CvConfig,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Auxiliary cohort for `pretrain`.
    #[serde(default)]
    pub pretrain: Option<PretrainSection>,
    #[serde(default)]
    pub compare: Option<CompareSection>,
    /// Cohort written by `synth`.
    #[serde(default)]
    pub synth: Option<CohortSpec>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainSection {
    pub cohort: CohortSpec,
    #[serde(default = "TrainConfig::vgg_style")]
    pub train: TrainConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareSection {
    pub seeds: Vec<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("every field has a default")
    }
}

/// What a verb needs from the config beyond the common checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Needs {
    Manifest,
    Evaluation,
    Pretrain,
    Compare,
    Synth,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: RunConfig =
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.rebase(base);
        Ok(cfg)
    }

    fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(p) = self.manifest_path.as_mut() {
            fix(p);
        }
        if let Some(p) = self.weights_path.as_mut() {
            fix(p);
        }
        fix(&mut self.output_dir);
    }

    pub fn prep(&self) -> PrepConfig {
        PrepConfig {
            selection: self.selection,
            input_size: self.input_size,
            normalization: self.normalization,
        }
    }

    pub fn input_shape(&self) -> [usize; 3] {
        [3, self.input_size, self.input_size]
    }

    pub fn model_spec(&self) -> Result<ModelSpec> {
        self.architecture
            .spec(self.input_shape(), Label::COUNT)
            .with_context(|| format!("{} at input size {}", self.architecture, self.input_size))
    }

    /// Full validation; runs before anything is written.
    pub fn validate(&self, needs: Needs) -> Result<()> {
        self.selection.validate().context("selection")?;
        ensure!(
            self.input_size >= Architecture::MIN_INPUT,
            "input_size must be at least {}, got {}",
            Architecture::MIN_INPUT,
            self.input_size
        );
        self.normalization.validate().map_err(anyhow::Error::msg).context("normalization")?;
        self.model_spec()?;
        self.train.validate().context("train")?;
        ensure!(self.cv.k >= 2, "cv.k must be at least 2, got {}", self.cv.k);
        if self.regime == Regime::HeadOnly {
            ensure!(self.weights_path.is_some(), "regime head_only requires weights_path");
        }
        match needs {
            Needs::Manifest | Needs::Evaluation => {
                ensure!(self.manifest_path.is_some(), "manifest_path is required");
            }
            Needs::Compare => {
                ensure!(self.manifest_path.is_some(), "manifest_path is required");
                let Some(c) = &self.compare else { bail!("a compare section with seeds is required") };
                ensure!(c.seeds.len() >= 2, "compare needs at least 2 seeds, got {}", c.seeds.len());
            }
            Needs::Pretrain => {
                let Some(p) = &self.pretrain else { bail!("a pretrain section is required") };
                p.cohort.validate().context("pretrain.cohort")?;
                p.train.validate().context("pretrain.train")?;
            }
            Needs::Synth => {
                let Some(s) = &self.synth else { bail!("a synth section is required") };
                s.validate().context("synth")?;
            }
        }
        Ok(())
    }
}
