use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::augment::{Affine3dRanges, Augment2DParams};
use crate::baselines::BaselineKind;
use crate::data::{load_sweep, PhantomConfig, Sweep};
use crate::encoder::EncoderConfig;
use crate::objective::{AblationMode, LossConfig};
use crate::tensor::AdamConfig;

/// Sweep directories per split. A listed directory that has no
/// `manifest.json` is expanded to its sweep subdirectories in name order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train: Vec<PathBuf>,
    pub val: Vec<PathBuf>,
    pub test: Vec<PathBuf>,
}

/// Split sizes and phantom settings for `gen-synth`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub train_sweeps: usize,
    pub val_sweeps: usize,
    pub test_sweeps: usize,
    pub phantom: PhantomConfig,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            train_sweeps: 8,
            val_sweeps: 2,
            test_sweeps: 2,
            phantom: PhantomConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Epochs between learning-rate decays.
    pub step_size: u64,
    pub gamma: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step_size: 100,
            gamma: 0.95,
        }
    }
}

impl OptimizerConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub batch_size: usize,
    pub overlap_frac: f64,
    pub max_epochs: usize,
    /// Epoch budget selected by `--desk`.
    pub desk_epochs: usize,
    pub baseline: BaselineKind,
    /// Component ablation; only meaningful for `baseline = "ours"`.
    pub ablation: AblationMode,
    pub seed: u64,
    pub validation_seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            batch_size: 30,
            overlap_frac: 0.75,
            max_epochs: 300,
            desk_epochs: 60,
            baseline: BaselineKind::Ours,
            ablation: AblationMode::Full,
            seed: 0,
            validation_seed: 0x5eed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationConfig {
    pub queries_per_sweep: usize,
    pub half_width: usize,
    pub success_threshold_mm: f64,
    pub seed: u64,
    pub affine: Affine3dRanges,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self {
            queries_per_sweep: 50,
            half_width: 30,
            success_threshold_mm: 15.0,
            seed: 0,
            affine: Affine3dRanges::default(),
        }
    }
}

/// Everything a run needs; one TOML file with a section per field.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub data: DataConfig,
    pub synth: SynthConfig,
    pub encoder: EncoderConfig,
    pub loss: LossConfig,
    pub augment: Augment2DParams,
    pub optimizer: OptimizerConfig,
    pub training: TrainingConfig,
    pub evaluation: EvaluationConfig,
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self, EvalError> {
        toml::from_str(text).map_err(|e| EvalError::Config(e.to_string()))
    }

    /// Parses the file and resolves relative data paths against its directory.
    pub fn load(path: &Path) -> Result<(Self, String), EvalError> {
        let text = fs::read_to_string(path).map_err(|e| EvalError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        if let Some(base) = path.parent() {
            cfg.data.resolve_against(base);
        }
        Ok((cfg, text))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        let bad = |m: String| Err(EvalError::Config(m));
        self.encoder.validate().map_err(|e| EvalError::Config(e.to_string()))?;
        self.loss.validate().map_err(EvalError::Config)?;
        self.augment.validate().map_err(EvalError::Config)?;
        if self.training.batch_size < 2 {
            return bad("batch_size must be at least 2".into());
        }
        if !(0.0..=1.0).contains(&self.training.overlap_frac) {
            return bad(format!("overlap_frac {} outside [0, 1]", self.training.overlap_frac));
        }
        if !(self.optimizer.learning_rate > 0.0) {
            return bad("learning_rate must be positive".into());
        }
        if !(self.evaluation.success_threshold_mm > 0.0) {
            return bad("success_threshold_mm must be positive".into());
        }
        Ok(())
    }

    /// The component mode actually trained: non-`ours` baselines fix their
    /// own recipe and ignore the ablation key.
    pub fn training_mode(&self) -> Option<crate::baselines::TrainingMode> {
        match self.training.baseline {
            BaselineKind::Ours => Some(crate::baselines::TrainingMode::from_ablation(self.training.ablation)),
            k => crate::baselines::make_training_mode(k),
        }
    }
}

impl DataConfig {
    pub fn resolve_against(&mut self, base: &Path) {
        for list in [&mut self.train, &mut self.val, &mut self.test] {
            for p in list.iter_mut() {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
    }
}

fn expand(paths: &[PathBuf]) -> Result<Vec<PathBuf>, EvalError> {
    let mut out = Vec::new();
    for p in paths {
        if p.join("manifest.json").is_file() {
            out.push(p.clone());
            continue;
        }
        let rd = fs::read_dir(p).map_err(|e| EvalError::Config(format!("{}: {e}", p.display())))?;
        let mut subs: Vec<PathBuf> = rd
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|d| d.join("manifest.json").is_file())
            .collect();
        if subs.is_empty() {
            return Err(EvalError::Config(format!("{} contains no sweeps", p.display())));
        }
        subs.sort();
        out.extend(subs);
    }
    Ok(out)
}

pub fn load_split(paths: &[PathBuf]) -> Result<Vec<Sweep>, EvalError> {
    expand(paths)?
        .iter()
        .map(|p| load_sweep(p).map_err(EvalError::from))
        .collect()
}

/// Loaded train/val/test sweeps.
#[derive(Clone, Debug, Default)]
pub struct Splits {
    pub train: Vec<Sweep>,
    pub val: Vec<Sweep>,
    pub test: Vec<Sweep>,
}

impl Splits {
    pub fn load(data: &DataConfig) -> Result<Self, EvalError> {
        let s = Self {
            train: load_split(&data.train)?,
            val: load_split(&data.val)?,
            test: load_split(&data.test)?,
        };
        s.check_disjoint()?;
        Ok(s)
    }

    /// No sweep id may appear in two splits.
    pub fn check_disjoint(&self) -> Result<(), EvalError> {
        let mut seen = std::collections::HashMap::new();
        for (split, sweeps) in [("train", &self.train), ("val", &self.val), ("test", &self.test)] {
            for s in sweeps {
                if let Some(other) = seen.insert(s.id.clone(), split) {
                    return Err(EvalError::Config(format!(
                        "sweep `{}` appears in both {other} and {split}",
                        s.id
                    )));
                }
            }
        }
        Ok(())
    }
}
