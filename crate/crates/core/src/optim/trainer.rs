//! First training stage: dense attention, attribute embedding and attribute
//! grounding, learned on seen classes.

use serde::Serialize;

use super::loss::{objective, Example, Grads, Input, Stage, Term};
use super::rmsprop::OptState;
use super::sampler::BalancedSampler;
use super::TrainConfig;
use crate::attention::ModelParams;
use crate::dataio::Dataset;
use crate::error::{Error, Result};
use crate::rng::{self, Purpose};

/// One line of a training log.
#[derive(Debug, Clone, Serialize, PartialEq)]
#[serde(rename_all = "camelCase")]
pub struct IterationLog {
    pub iteration: usize,
    pub seen_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub compose_loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_log_score: Option<f64>,
}

pub(crate) fn optimizer_state(params: &ModelParams, stage: Stage) -> OptState {
    match stage {
        Stage::Attention => OptState::for_params(&[&params.w_alpha, &params.w_e, &params.attr_sem.0]),
        Stage::FrozenFeatures => OptState::for_params(&[&params.w_e, &params.attr_sem.0]),
    }
}

pub(crate) fn apply_grads(params: &mut ModelParams, grads: &Grads, state: &mut OptState, cfg: &TrainConfig) {
    let opt = cfg.optimizer();
    let ModelParams { w_alpha, w_e, attr_sem } = params;
    match &grads.w_alpha {
        Some(g_alpha) => opt.step(
            &mut [w_alpha, w_e, &mut attr_sem.0],
            &[g_alpha, &grads.w_e, &grads.attr_sem],
            state,
        ),
        None => opt.step(&mut [w_e, &mut attr_sem.0], &[&grads.w_e, &grads.attr_sem], state),
    }
}

pub(crate) fn seen_sampler(dataset: &Dataset) -> BalancedSampler {
    BalancedSampler::new(dataset.train_by_class(&dataset.splits.seen_train, &dataset.seen_classes))
}

pub fn train_stage1(dataset: &Dataset, cfg: &TrainConfig, use_calibration: bool) -> Result<ModelParams> {
    train_stage1_traced(dataset, cfg, use_calibration, |_| {})
}

/// Runs `cfg.n_att` iterations from freshly initialized parameters, reporting each iteration.
pub fn train_stage1_traced(
    dataset: &Dataset,
    cfg: &TrainConfig,
    use_calibration: bool,
    mut log: impl FnMut(&IterationLog),
) -> Result<ModelParams> {
    cfg.validate()?;
    let sampler = seen_sampler(dataset);
    if sampler.is_empty() {
        return Err(Error::Precondition("no seen-class training samples".into()));
    }
    if use_calibration && dataset.novel_classes.is_empty() {
        return Err(Error::Precondition("calibration needs at least one novel class".into()));
    }
    let mut params = ModelParams::init(dataset, cfg.seed)?;
    let mut state = optimizer_state(&params, Stage::Attention);

    let mut seen = dataset.seen_classes.clone();
    seen.sort_unstable();
    let all = dataset.all_classes();
    let mut novel = dataset.novel_classes.clone();
    novel.sort_unstable();
    let mut terms = vec![Term::CrossEntropy {
        classes: &seen,
        weight: 1.0,
    }];
    if use_calibration {
        terms.push(Term::Calibration {
            classes: &all,
            novel: &novel,
            weight: cfg.lambda_cal,
        });
    }

    for it in 0..cfg.n_att {
        let mut rng = rng::stream(cfg.seed, Purpose::Batch, it as u64, 0);
        let batch = sampler.sample(&mut rng, cfg.batch_size);
        let w = 1.0 / batch.len() as f64;
        let examples: Vec<Example> = batch
            .iter()
            .map(|&i| Example {
                input: Input::Regions(dataset.samples[i].regions.view()),
                label: dataset.samples[i].class,
                weight: w,
            })
            .collect();
        let (loss, grads) = objective(&examples, &terms, &dataset.class_sem, &params, Stage::Attention)?;
        apply_grads(&mut params, &grads, &mut state, cfg);
        log(&IterationLog {
            iteration: it,
            seen_loss: loss,
            compose_loss: None,
            mean_log_score: None,
        });
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::synth::{synth_dataset, SynthConfig};

    fn tiny() -> Dataset {
        synth_dataset(&SynthConfig {
            num_seen: 3,
            num_novel: 1,
            num_attributes: 6,
            region_dim: 8,
            regions_per_image: 3,
            samples_per_seen_class: 6,
            test_samples_per_class: 2,
            few_shot_budget: 0,
            attributes_per_class: 2,
            noise_sigma: 0.05,
            semantic_dim: None,
            seed: 1,
        })
        .unwrap()
    }

    #[test]
    fn zero_iterations_returns_initial_params() {
        let d = tiny();
        let cfg = TrainConfig {
            n_att: 0,
            seed: 4,
            ..Default::default()
        };
        assert_eq!(
            train_stage1(&d, &cfg, false).unwrap(),
            ModelParams::init(&d, 4).unwrap()
        );
    }

    #[test]
    fn bit_deterministic() {
        let d = tiny();
        let cfg = TrainConfig {
            n_att: 30,
            batch_size: 9,
            learning_rate: 1e-3,
            ..Default::default()
        };
        assert_eq!(
            train_stage1(&d, &cfg, true).unwrap(),
            train_stage1(&d, &cfg, true).unwrap()
        );
    }

    #[test]
    fn no_seen_samples_is_an_error() {
        let mut d = tiny();
        d.splits.seen_train.clear();
        assert!(train_stage1(&d, &TrainConfig::default(), false).is_err());
    }
}
