//! Losses, gradients, the optimizer and the attention-stage trainer.

pub mod checkpoint;
pub mod gradcheck;
pub mod loss;
pub mod rmsprop;
pub mod sampler;
pub mod trainer;

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use loss::{calibration_loss, ce_loss, objective, Example, Grads, Input, Stage, Term};
pub use rmsprop::{OptState, RmsProp};
pub use trainer::{train_stage1, train_stage1_traced, IterationLog};

/// How novel-class features are composed in the second stage.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "camelCase")]
pub enum CompositionMode {
    /// NN-OMP related set, tempered prior, classifier-scored candidate selection.
    #[default]
    Full,
    /// One uniform draw from all combinations of the batch (no related set, no selection).
    Random,
}

/// Which conditioning the few-shot composer uses for its prior.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "camelCase")]
pub enum FewShotPrior {
    #[default]
    VisualSemantic,
    /// Condition on the class semantic vector only, as in the zero-shot composer.
    Semantic,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(rename_all = "camelCase", default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub n_att: usize,
    pub n_comp: usize,
    pub lambda_cal: f64,
    pub beta: f64,
    pub k: usize,
    pub b: usize,
    pub lambda: f64,
    pub margin: f64,
    pub rmsprop_decay: f64,
    pub rmsprop_eps: f64,
    pub seed: u64,
    /// Reuse the first seen batch for every composition iteration.
    pub fixed_batch: bool,
    pub composition: CompositionMode,
    pub few_shot_prior: FewShotPrior,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_size: 50,
            n_att: 2000,
            n_comp: 4000,
            lambda_cal: 0.1,
            beta: 5.0,
            k: 5,
            b: 50,
            lambda: 0.5,
            margin: 1.0,
            rmsprop_decay: 0.99,
            rmsprop_eps: 1e-8,
            seed: 0,
            fixed_batch: false,
            composition: CompositionMode::Full,
            few_shot_prior: FewShotPrior::VisualSemantic,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let rates = [
            ("learningRate", self.learning_rate),
            ("lambdaCal", self.lambda_cal),
            ("beta", self.beta),
            ("lambda", self.lambda),
            ("margin", self.margin),
            ("rmspropEps", self.rmsprop_eps),
        ];
        if let Some((name, _)) = rates.iter().find(|(_, v)| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Config(format!("{name} must be finite and nonnegative")));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batchSize must be at least 1".into()));
        }
        if self.k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.rmsprop_decay) {
            return Err(Error::Config("rmspropDecay must be in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn optimizer(&self) -> RmsProp {
        RmsProp {
            learning_rate: self.learning_rate,
            decay: self.rmsprop_decay,
            eps: self.rmsprop_eps,
        }
    }

    /// Reads a JSON config; `COMPOSER_SEED` overrides the seed.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: TrainConfig = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        if let Some(seed) = crate::rng::seed_override() {
            cfg.seed = seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}
