//! Second training stage for zero-shot learning: fine-tune `W_e` and `V` on
//! seen samples plus one composed feature per novel class and iteration.

use ndarray::Array2;
use rayon::prelude::*;

use super::{
    prior_probs, related_or_fallback, sample_candidates, select_with_kernel, ComposedFeature, CompositionPrior,
};
use crate::attention::{dense_feature, DenseFeature, ModelParams};
use crate::dataio::{ClassSemantics, Dataset};
use crate::error::{Error, Result};
use crate::optim::loss::{objective, Example, Input, Stage, Term};
use crate::optim::trainer::{apply_grads, optimizer_state, seen_sampler};
use crate::optim::{CompositionMode, IterationLog, TrainConfig};
use crate::rng::{self, Purpose};

/// Dense features of the given samples under the current parameters.
pub fn dense_features(dataset: &Dataset, params: &ModelParams, indices: &[usize]) -> Result<Vec<DenseFeature>> {
    indices
        .par_iter()
        .map(|&i| dense_feature(dataset.samples[i].regions.view(), params))
        .collect()
}

/// Class semantic rows of the batch labels, one dictionary atom per sample.
pub fn batch_semantics(z: &ClassSemantics, labels: &[usize]) -> Array2<f64> {
    let mut out = Array2::zeros((labels.len(), z.num_attributes()));
    for (mut row, &y) in out.rows_mut().into_iter().zip(labels) {
        row.assign(&z.row(y));
    }
    out
}

/// One composed feature per target class, each drawn from its own random stream.
#[allow(clippy::too_many_arguments)]
pub fn compose_batch(
    dense: &[DenseFeature],
    labels: &[usize],
    targets: &[usize],
    z: &ClassSemantics,
    score_kernel: &Array2<f64>,
    classes: &[usize],
    cfg: &TrainConfig,
    iteration: u64,
) -> Result<Vec<ComposedFeature>> {
    let sem = batch_semantics(z, labels);
    let random = cfg.composition == CompositionMode::Random || cfg.b == 0;
    targets
        .par_iter()
        .map(|&n| {
            let mut rng = rng::stream(cfg.seed, Purpose::Compose, iteration, n as u64);
            let (prior, b) = if random {
                (CompositionPrior::uniform(dense.len())?, 1)
            } else {
                let q = related_or_fallback(z.row(n), sem.view(), cfg.k)?;
                (prior_probs(q, sem.view(), z.row(n), cfg.beta)?, cfg.b)
            };
            let cands = sample_candidates(&prior, dense, b, &mut rng)?;
            select_with_kernel(cands, n, z, score_kernel.view(), classes)
        })
        .collect()
}

pub fn train_stage2_zeroshot(dataset: &Dataset, params: &ModelParams, cfg: &TrainConfig) -> Result<ModelParams> {
    train_stage2_zeroshot_traced(dataset, params, cfg, |_| {})
}

/// Runs `cfg.n_comp` composition iterations starting from `params`.
pub fn train_stage2_zeroshot_traced(
    dataset: &Dataset,
    params: &ModelParams,
    cfg: &TrainConfig,
    mut log: impl FnMut(&IterationLog),
) -> Result<ModelParams> {
    cfg.validate()?;
    if dataset.novel_classes.is_empty() {
        return Err(Error::Precondition("no novel classes to compose".into()));
    }
    let sampler = seen_sampler(dataset);
    if sampler.is_empty() {
        return Err(Error::Precondition("no seen-class training samples".into()));
    }
    let mut params = params.clone();
    let mut state = optimizer_state(&params, Stage::FrozenFeatures);
    let all = dataset.all_classes();
    let mut novel = dataset.novel_classes.clone();
    novel.sort_unstable();
    let z = &dataset.class_sem;
    let terms = [Term::CrossEntropy {
        classes: &all,
        weight: 1.0,
    }];

    for it in 0..cfg.n_comp {
        let batch_it = if cfg.fixed_batch { 0 } else { it as u64 };
        let batch = sampler.sample(&mut rng::stream(cfg.seed, Purpose::Batch, batch_it, 1), cfg.batch_size);
        let labels: Vec<usize> = batch.iter().map(|&i| dataset.samples[i].class).collect();
        let dense = dense_features(dataset, &params, &batch)?;
        let composed = compose_batch(&dense, &labels, &novel, z, &params.score_kernel(), &all, cfg, it as u64)?;

        let ws = 1.0 / dense.len() as f64;
        let seen: Vec<Example> = dense
            .iter()
            .zip(&labels)
            .map(|(h, &y)| Example {
                input: Input::Dense(h),
                label: y,
                weight: ws,
            })
            .collect();
        let wc = 1.0 / novel.len() as f64;
        let synth: Vec<Example> = composed
            .iter()
            .zip(&novel)
            .map(|(c, &n)| Example {
                input: Input::Dense(&c.h),
                label: n,
                weight: wc,
            })
            .collect();
        let (seen_loss, mut grads) = objective(&seen, &terms, z, &params, Stage::FrozenFeatures)?;
        let (compose_loss, g2) = objective(&synth, &terms, z, &params, Stage::FrozenFeatures)?;
        grads.w_e += &g2.w_e;
        grads.attr_sem += &g2.attr_sem;
        apply_grads(&mut params, &grads, &mut state, cfg);

        let mean_log_score =
            composed.iter().map(|c| c.log_score.unwrap_or(f64::NAN)).sum::<f64>() / composed.len() as f64;
        log(&IterationLog {
            iteration: it,
            seen_loss,
            compose_loss: Some(compose_loss),
            mean_log_score: Some(mean_log_score),
        });
    }
    Ok(params)
}
