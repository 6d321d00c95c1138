//! TOML experiment configuration. Every hyperparameter is spelled out in the file.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rdml::{Direction, TrainConfig, UpdateMode};
use serde::Deserialize;

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    pub model: ModelSpec,
    pub train: TrainSection,
    pub experiment: ExperimentSection,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DatasetSpec {
    Blobs {
        n: usize,
        dim: usize,
        classes: usize,
        spread: f64,
        seed: u64,
        standardize: bool,
    },
    File {
        /// Relative paths resolve against the config file's directory.
        path: PathBuf,
        /// Empty string selects the last column.
        label_column: String,
        /// 0 infers the count from the labels.
        classes: usize,
        test_fraction: f64,
        split_seed: u64,
        standardize: bool,
    },
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    /// Hidden layer widths; empty gives a linear model.
    pub hidden: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub students: usize,
    pub alpha: f64,
    pub psi: f64,
    pub epsilon_floor: f64,
    pub lr: f64,
    pub momentum: f64,
    pub nesterov: bool,
    pub weight_decay: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_epochs: Vec<usize>,
    /// 0 disables clipping.
    pub clip_max_norm: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub update_mode: String,
    pub divergence_direction: String,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    pub alphas: Vec<f64>,
    pub seeds: Vec<u64>,
    /// Number of final epochs averaged into the reported accuracy.
    pub report_window: usize,
    /// Relative paths resolve against the config file's directory.
    pub out_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).context("invalid config")?;
        config.validate()?;
        Ok(config)
    }

    /// Reads a config file and resolves its relative paths.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut config = Self::parse(&text).with_context(|| format!("in {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new(""));
        if let DatasetSpec::File { path, .. } = &mut config.dataset {
            if path.is_relative() {
                *path = base.join(&*path);
            }
        }
        if config.experiment.out_dir.is_relative() {
            config.experiment.out_dir = base.join(&config.experiment.out_dir);
        }
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.train_config()?
            .validate()
            .map_err(|e| anyhow::anyhow!("train: {e}"))?;
        let exp = &self.experiment;
        if exp.alphas.is_empty() {
            bail!("experiment.alphas: the alpha grid is empty");
        }
        for &a in &exp.alphas {
            if !(a.is_finite() && a >= 0.0) {
                bail!("experiment.alphas: {a} is not a finite alpha >= 0");
            }
        }
        if exp.seeds.is_empty() {
            bail!("experiment.seeds: the seed list is empty");
        }
        if exp.report_window == 0 || exp.report_window > self.train.epochs {
            bail!(
                "experiment.report_window: {} must be in 1..={} (train.epochs)",
                exp.report_window,
                self.train.epochs
            );
        }
        if self.model.hidden.contains(&0) {
            bail!("model.hidden: layer widths must be positive");
        }
        if let DatasetSpec::File { test_fraction, .. } = &self.dataset {
            if !(*test_fraction > 0.0 && *test_fraction < 1.0) {
                bail!("dataset.test_fraction: {test_fraction} must be in (0, 1)");
            }
        }
        Ok(())
    }

    /// The trainer config for the `[train]` section.
    pub fn train_config(&self) -> Result<TrainConfig> {
        let t = &self.train;
        let update_mode = match t.update_mode.as_str() {
            "sequential" => UpdateMode::Sequential,
            "simultaneous" => UpdateMode::Simultaneous,
            other => bail!("train.update_mode: expected \"sequential\" or \"simultaneous\", got {other:?}"),
        };
        let direction = match t.divergence_direction.as_str() {
            "peer_to_self" => Direction::PeerToSelf,
            "self_to_peer" => Direction::SelfToPeer,
            other => bail!("train.divergence_direction: expected \"peer_to_self\" or \"self_to_peer\", got {other:?}"),
        };
        if t.clip_max_norm.is_nan() || t.clip_max_norm < 0.0 {
            bail!(
                "train.clip_max_norm: {} must be >= 0 (0 disables clipping)",
                t.clip_max_norm
            );
        }
        Ok(TrainConfig {
            students: t.students,
            alpha: t.alpha,
            epsilon_floor: t.epsilon_floor,
            psi: t.psi,
            lr: t.lr,
            momentum: t.momentum,
            nesterov: t.nesterov,
            weight_decay: t.weight_decay,
            lr_decay_factor: t.lr_decay_factor,
            lr_decay_epochs: t.lr_decay_epochs.clone(),
            clip_max_norm: (t.clip_max_norm > 0.0).then_some(t.clip_max_norm),
            epochs: t.epochs,
            batch_size: t.batch_size,
            seed: t.seed,
            update_mode,
            direction,
        })
    }

    /// Applies `--seed` and `--alpha` overrides to both the single run and the sweep grid.
    pub fn apply_overrides(&mut self, seed: Option<u64>, alpha: Option<f64>) -> Result<()> {
        if let Some(s) = seed {
            self.train.seed = s;
            self.experiment.seeds = vec![s];
        }
        if let Some(a) = alpha {
            self.train.alpha = a;
            self.experiment.alphas = vec![a];
        }
        self.validate()
    }
}

#[cfg(test)]
pub(crate) const EXAMPLE: &str = r#"
[dataset]
kind = "blobs"
n = 200
dim = 4
classes = 3
spread = 1.0
seed = 3
standardize = true

[model]
hidden = [8]

[train]
students = 2
alpha = 1.5
psi = 1.0
epsilon_floor = 1e-12
lr = 0.1
momentum = 0.9
nesterov = true
weight_decay = 5e-4
lr_decay_factor = 0.2
lr_decay_epochs = [3]
clip_max_norm = 5.0
epochs = 4
batch_size = 32
seed = 0
update_mode = "sequential"
divergence_direction = "peer_to_self"

[experiment]
alphas = [0.5, 2.0]
seeds = [0, 1]
report_window = 2
out_dir = "out"
"#;
