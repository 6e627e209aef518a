//! Few-shot composition: novel training images condition the composer through
//! their visual-semantic features, and the classifier is fine-tuned on a
//! λ-weighted mix of real and composed novel features.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rayon::prelude::*;
use serde::Serialize;

use crate::attention::{DenseFeature, ModelParams};
use crate::composer::trainer::{batch_semantics, dense_features};
use crate::composer::{
    nnomp, prior_from_similarities, prior_probs, related_or_fallback, sample_candidates, select_with_kernel,
    ComposedFeature, CompositionPrior, RelatedSet,
};
use crate::dataio::Dataset;
use crate::error::{Error, Result};
use crate::eval::{evaluate_all, EvalOptions, Metrics};
use crate::numkernel::l2_norm;
use crate::optim::loss::{objective, Example, Input, Stage, Term};
use crate::optim::sampler::BalancedSampler;
use crate::optim::trainer::{apply_grads, optimizer_state, seen_sampler};
use crate::optim::{FewShotPrior, IterationLog, TrainConfig};
use crate::rng::{self, Purpose};

#[derive(Debug, Clone, PartialEq)]
pub struct VisualSemanticFeature {
    pub hbar: Array1<f64>,
    pub source: usize,
}

/// `h̄ = Σ_a z[a] · H[a, :]`.
pub fn visual_semantic_feature(h: &DenseFeature, z: ArrayView1<f64>, source: usize) -> Result<VisualSemanticFeature> {
    if h.num_attributes() != z.len() {
        return Err(Error::shape("visual_semantic_feature", h.num_attributes(), z.len()));
    }
    Ok(VisualSemanticFeature {
        hbar: h.0.t().dot(&z),
        source,
    })
}

/// NN-OMP over visual-semantic features.
pub fn related_samples_fs(hbar_j: ArrayView1<f64>, hbars: ArrayView2<f64>, k: usize) -> Result<RelatedSet> {
    nnomp(hbar_j, hbars, k)
}

/// `probs_i ∝ exp(β cos(h̄_i, h̄_j))` over the related set.
pub fn prior_probs_fs(
    related: RelatedSet,
    hbars: ArrayView2<f64>,
    hbar_j: ArrayView1<f64>,
    beta: f64,
) -> Result<CompositionPrior> {
    let degenerate = || Error::Precondition("degenerate visual-semantic feature".into());
    let nj = l2_norm(hbar_j);
    if nj == 0.0 {
        return Err(degenerate());
    }
    let sims = related
        .indices
        .iter()
        .map(|&i| {
            let row = hbars.row(i);
            let ni = l2_norm(row);
            if ni == 0.0 {
                Err(degenerate())
            } else {
                Ok(row.dot(&hbar_j) / (ni * nj))
            }
        })
        .collect::<Result<Vec<f64>>>()?;
    prior_from_similarities(related, &sims, beta)
}

/// Building blocks for few-shot composition: the seen batch and its per-sample vectors.
pub struct ComposeContext<'a> {
    pub dense: &'a [DenseFeature],
    /// Visual-semantic features of the batch, one row per sample.
    pub hbars: ArrayView2<'a, f64>,
    /// Class semantic vectors of the batch labels, one row per sample.
    pub semantics: ArrayView2<'a, f64>,
    pub score_kernel: ArrayView2<'a, f64>,
    pub classes: &'a [usize],
}

/// Composed feature for one novel training sample with label `label`.
pub fn compose_fewshot<R: rand::Rng>(
    label: usize,
    target: &VisualSemanticFeature,
    ctx: &ComposeContext,
    z: &crate::dataio::ClassSemantics,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<ComposedFeature> {
    let prior = match cfg.few_shot_prior {
        FewShotPrior::VisualSemantic => {
            let q = related_samples_fs(target.hbar.view(), ctx.hbars, cfg.k)?;
            let q = if q.is_empty() {
                crate::composer::fallback_related(ctx.hbars, target.hbar.view())?
            } else {
                q
            };
            prior_probs_fs(q, ctx.hbars, target.hbar.view(), cfg.beta)?
        }
        FewShotPrior::Semantic => {
            let q = related_or_fallback(z.row(label), ctx.semantics, cfg.k)?;
            prior_probs(q, ctx.semantics, z.row(label), cfg.beta)?
        }
    };
    let cands = sample_candidates(&prior, ctx.dense, cfg.b.max(1), rng)?;
    select_with_kernel(cands, label, z, ctx.score_kernel, ctx.classes)
}

fn hbar_matrix(dense: &[DenseFeature], labels: &[usize], dataset: &Dataset) -> Result<Array2<f64>> {
    let d = dense.first().map_or(0, |h| h.0.ncols());
    let mut out = Array2::zeros((dense.len(), d));
    for (k, (h, &y)) in dense.iter().zip(labels).enumerate() {
        out.row_mut(k)
            .assign(&visual_semantic_feature(h, dataset.class_sem.row(y), k)?.hbar);
    }
    Ok(out)
}

pub fn train_stage2_fewshot(dataset: &Dataset, params: &ModelParams, cfg: &TrainConfig) -> Result<ModelParams> {
    train_stage2_fewshot_traced(dataset, params, cfg, |_| {})
}

/// Runs `cfg.n_comp` iterations on seen batches, real novel shots and their compositions.
pub fn train_stage2_fewshot_traced(
    dataset: &Dataset,
    params: &ModelParams,
    cfg: &TrainConfig,
    mut log: impl FnMut(&IterationLog),
) -> Result<ModelParams> {
    cfg.validate()?;
    let novel_sampler =
        BalancedSampler::new(dataset.train_by_class(&dataset.splits.novel_train, &dataset.novel_classes));
    if novel_sampler.is_empty() {
        return Err(Error::Precondition(
            "no novel training samples; use zero-shot trainer".into(),
        ));
    }
    let sampler = seen_sampler(dataset);
    if sampler.is_empty() {
        return Err(Error::Precondition("no seen-class training samples".into()));
    }
    let shots = dataset.few_shot_budget.max(1);
    let mut params = params.clone();
    let mut state = optimizer_state(&params, Stage::FrozenFeatures);
    let all = dataset.all_classes();
    let z = &dataset.class_sem;
    let terms = [Term::CrossEntropy {
        classes: &all,
        weight: 1.0,
    }];
    let lambda = cfg.lambda;

    for it in 0..cfg.n_comp {
        let batch_it = if cfg.fixed_batch { 0 } else { it as u64 };
        let batch = sampler.sample(&mut rng::stream(cfg.seed, Purpose::Batch, batch_it, 1), cfg.batch_size);
        let novel = novel_sampler.sample_each(&mut rng::stream(cfg.seed, Purpose::Batch, it as u64, 2), shots);
        let labels: Vec<usize> = batch.iter().map(|&i| dataset.samples[i].class).collect();
        let novel_labels: Vec<usize> = novel.iter().map(|&i| dataset.samples[i].class).collect();
        let dense = dense_features(dataset, &params, &batch)?;
        let novel_dense = dense_features(dataset, &params, &novel)?;

        let composed: Vec<ComposedFeature> = if lambda > 0.0 {
            let hbars = hbar_matrix(&dense, &labels, dataset)?;
            let sem = batch_semantics(z, &labels);
            let kernel = params.score_kernel();
            let ctx = ComposeContext {
                dense: &dense,
                hbars: hbars.view(),
                semantics: sem.view(),
                score_kernel: kernel.view(),
                classes: &all,
            };
            novel
                .par_iter()
                .zip(&novel_dense)
                .zip(&novel_labels)
                .map(|((&j, h), &y)| {
                    let target = visual_semantic_feature(h, z.row(y), j)?;
                    let mut r = rng::stream(cfg.seed, Purpose::Compose, it as u64, j as u64);
                    compose_fewshot(y, &target, &ctx, z, cfg, &mut r)
                })
                .collect::<Result<_>>()?
        } else {
            Vec::new()
        };

        let seen: Vec<Example> = dense
            .iter()
            .zip(&labels)
            .map(|(h, &y)| Example {
                input: Input::Dense(h),
                label: y,
                weight: 1.0 / dense.len() as f64,
            })
            .collect();
        let scale = 1.0 / (novel.len() as f64 * (1.0 + lambda));
        let mut novel_examples: Vec<Example> = novel_dense
            .iter()
            .zip(&novel_labels)
            .map(|(h, &y)| Example {
                input: Input::Dense(h),
                label: y,
                weight: scale,
            })
            .collect();
        novel_examples.extend(composed.iter().zip(&novel_labels).map(|(c, &y)| Example {
            input: Input::Dense(&c.h),
            label: y,
            weight: lambda * scale,
        }));

        let (seen_loss, mut grads) = objective(&seen, &terms, z, &params, Stage::FrozenFeatures)?;
        let (novel_loss, g2) = objective(&novel_examples, &terms, z, &params, Stage::FrozenFeatures)?;
        grads.w_e += &g2.w_e;
        grads.attr_sem += &g2.attr_sem;
        apply_grads(&mut params, &grads, &mut state, cfg);

        let mean_log_score = (!composed.is_empty())
            .then(|| composed.iter().map(|c| c.log_score.unwrap_or(f64::NAN)).sum::<f64>() / composed.len() as f64);
        log(&IterationLog {
            iteration: it,
            seen_loss,
            compose_loss: Some(novel_loss),
            mean_log_score,
        });
    }
    Ok(params)
}

#[derive(Debug, Clone, Serialize, PartialEq)]
#[serde(rename_all = "camelCase")]
pub struct FewShotRun {
    pub run: usize,
    pub seed: u64,
    pub metrics: Metrics,
}

#[derive(Debug, Clone, Serialize, PartialEq)]
#[serde(rename_all = "camelCase")]
pub struct FewShotReport {
    pub shots: usize,
    pub lambda: f64,
    pub runs: Vec<FewShotRun>,
    pub mean: Metrics,
}

/// Field-wise mean of several metric reports.
pub fn mean_metrics(all: &[Metrics]) -> Metrics {
    let mean = |f: fn(&Metrics) -> Option<f64>| -> Option<f64> {
        let vals: Vec<f64> = all.iter().filter_map(f).collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    };
    let mut per_class: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for m in all {
        for (&c, &a) in &m.per_class_accuracies {
            let e = per_class.entry(c).or_default();
            e.0 += a;
            e.1 += 1;
        }
    }
    Metrics {
        acc_novel_only: mean(|m| m.acc_novel_only),
        acc_seen: mean(|m| m.acc_seen),
        acc_novel: mean(|m| m.acc_novel),
        harmonic_mean: mean(|m| m.harmonic_mean),
        per_class_accuracies: per_class.into_iter().map(|(c, (s, n))| (c, s / n as f64)).collect(),
    }
}

/// Trains and evaluates `runs` few-shot models from one first-stage model.
/// Run `r` uses seed `cfg.seed + r` for both the shot selection and training.
pub fn fewshot_runs(
    dataset: &Dataset,
    stage1: &ModelParams,
    cfg: &TrainConfig,
    shots: usize,
    runs: usize,
    opts: &EvalOptions,
) -> Result<FewShotReport> {
    if shots == 0 {
        return Err(Error::Precondition(
            "no novel training samples; use zero-shot trainer".into(),
        ));
    }
    let mut out = Vec::with_capacity(runs);
    for run in 0..runs {
        let seed = cfg.seed.wrapping_add(run as u64);
        let data = dataset.sample_shots(shots, seed);
        let run_cfg = TrainConfig { seed, ..cfg.clone() };
        let params = train_stage2_fewshot(&data, stage1, &run_cfg)?;
        out.push(FewShotRun {
            run,
            seed,
            metrics: evaluate_all(&data, &params, opts)?,
        });
    }
    let mean = mean_metrics(&out.iter().map(|r| r.metrics.clone()).collect::<Vec<_>>());
    Ok(FewShotReport {
        shots,
        lambda: cfg.lambda,
        runs: out,
        mean,
    })
}
