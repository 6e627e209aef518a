//! Cross-entropy and self-calibration losses with analytic gradients.
//!
//! An objective is a weighted sum over examples of a fixed list of terms, each
//! term reading the class scores over its own class subset. Gradients flow
//! back through the attribute scores into `V W_e` and, when the input is raw
//! region features, through the attention softmax into `V W_α`. The two
//! kernel gradients are accumulated over the batch and pushed onto
//! `W_α`, `W_e` and `V` once at the end.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rayon::prelude::*;

use crate::attention::{attention_weights_with, attribute_features, attribute_scores_with, DenseFeature, ModelParams};
use crate::dataio::ClassSemantics;
use crate::error::{Error, Result};
use crate::numkernel::log_sum_exp;

/// Which parameters receive gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    /// W_α, W_e and V through the full attention graph.
    Attention,
    /// W_e and V only; dense features are constants.
    FrozenFeatures,
}

#[derive(Debug, Clone, Copy)]
pub enum Input<'a> {
    Regions(ArrayView2<'a, f64>),
    Dense(&'a DenseFeature),
}

#[derive(Debug, Clone, Copy)]
pub struct Example<'a> {
    pub input: Input<'a>,
    pub label: usize,
    pub weight: f64,
}

#[derive(Debug, Clone)]
pub enum Term<'a> {
    /// `−weight · log p(label | H)` with the softmax over `classes`.
    CrossEntropy { classes: &'a [usize], weight: f64 },
    /// `−weight · log Σ_{n ∈ novel} p(n | H)` with the softmax over `classes`.
    Calibration {
        classes: &'a [usize],
        novel: &'a [usize],
        weight: f64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    pub w_alpha: Option<Array2<f64>>,
    pub w_e: Array2<f64>,
    pub attr_sem: Array2<f64>,
}

struct PerExample {
    loss: f64,
    d_score_kernel: Array2<f64>,
    d_attention_kernel: Option<Array2<f64>>,
}

fn position(classes: &[usize], c: usize) -> Result<usize> {
    classes
        .iter()
        .position(|&x| x == c)
        .ok_or_else(|| Error::Precondition(format!("class {c} is not in the loss class subset")))
}

/// Loss of one example given its attribute scores, and `dL/de`.
fn terms_on_scores(e: &Array1<f64>, label: usize, z: &ClassSemantics, terms: &[Term]) -> Result<(f64, Array1<f64>)> {
    let mut loss = 0.0;
    let mut de = Array1::<f64>::zeros(e.len());
    for term in terms {
        match *term {
            Term::CrossEntropy { classes, weight } => {
                if weight == 0.0 {
                    continue;
                }
                let target = position(classes, label)?;
                let s: Array1<f64> = classes.iter().map(|&c| e.dot(&z.row(c))).collect();
                let lse = log_sum_exp(s.view())?;
                loss += weight * (lse - s[target]);
                for (k, &c) in classes.iter().enumerate() {
                    let ds = (s[k] - lse).exp() - if k == target { 1.0 } else { 0.0 };
                    de.scaled_add(weight * ds, &z.row(c));
                }
            }
            Term::Calibration { classes, novel, weight } => {
                if weight == 0.0 {
                    continue;
                }
                let s: Array1<f64> = classes.iter().map(|&c| e.dot(&z.row(c))).collect();
                let lse_all = log_sum_exp(s.view())?;
                let novel_pos = novel
                    .iter()
                    .map(|&n| position(classes, n))
                    .collect::<Result<Vec<_>>>()?;
                let s_novel: Array1<f64> = novel_pos.iter().map(|&k| s[k]).collect();
                let lse_novel = log_sum_exp(s_novel.view())?;
                loss -= weight * (lse_novel - lse_all);
                for (k, &c) in classes.iter().enumerate() {
                    let q = if novel_pos.contains(&k) {
                        (s[k] - lse_novel).exp()
                    } else {
                        0.0
                    };
                    let p = (s[k] - lse_all).exp();
                    de.scaled_add(-weight * (q - p), &z.row(c));
                }
            }
        }
    }
    Ok((loss, de))
}

fn example_grads(
    ex: &Example,
    stage: Stage,
    attention_kernel: &Array2<f64>,
    score_kernel: &Array2<f64>,
    z: &ClassSemantics,
    terms: &[Term],
) -> Result<PerExample> {
    match (stage, ex.input) {
        (Stage::Attention, Input::Regions(f)) => {
            let alpha = attention_weights_with(f, attention_kernel.view())?;
            let h = attribute_features(f, alpha.view())?;
            let e = attribute_scores_with(&h, score_kernel.view())?;
            let (loss, de) = terms_on_scores(&e, ex.label, z, terms)?;
            let de = de * ex.weight;
            let de_col = de.view().insert_axis(Axis(1));
            let d_score_kernel = &h.0 * &de_col;
            let d_h = score_kernel * &de_col;
            let d_alpha = d_h.dot(&f.t());
            let inner = (&alpha * &d_alpha).sum_axis(Axis(1)).insert_axis(Axis(1));
            let d_logits = &alpha * &(&d_alpha - &inner);
            Ok(PerExample {
                loss: ex.weight * loss,
                d_score_kernel,
                d_attention_kernel: Some(d_logits.dot(&f)),
            })
        }
        (Stage::FrozenFeatures, input) => {
            let owned;
            let h = match input {
                Input::Dense(h) => h,
                Input::Regions(f) => {
                    let alpha = attention_weights_with(f, attention_kernel.view())?;
                    owned = attribute_features(f, alpha.view())?;
                    &owned
                }
            };
            let e = attribute_scores_with(h, score_kernel.view())?;
            let (loss, de) = terms_on_scores(&e, ex.label, z, terms)?;
            let de = de * ex.weight;
            Ok(PerExample {
                loss: ex.weight * loss,
                d_score_kernel: &h.0 * &de.view().insert_axis(Axis(1)),
                d_attention_kernel: None,
            })
        }
        (Stage::Attention, Input::Dense(_)) => Err(Error::Precondition(
            "attention-stage gradients need region features, not dense features".into(),
        )),
    }
}

/// Weighted objective value and gradients for the parameters in scope of `stage`.
pub fn objective(
    examples: &[Example],
    terms: &[Term],
    z: &ClassSemantics,
    params: &ModelParams,
    stage: Stage,
) -> Result<(f64, Grads)> {
    let attention_kernel = params.attention_kernel();
    let score_kernel = params.score_kernel();
    let per: Vec<PerExample> = examples
        .par_iter()
        .map(|ex| example_grads(ex, stage, &attention_kernel, &score_kernel, z, terms))
        .collect::<Result<_>>()?;

    // Sequential reduction keeps results independent of thread scheduling.
    let mut loss = 0.0;
    let mut d_score = Array2::<f64>::zeros(score_kernel.dim());
    let mut d_att = match stage {
        Stage::Attention => Some(Array2::<f64>::zeros(attention_kernel.dim())),
        Stage::FrozenFeatures => None,
    };
    for p in &per {
        loss += p.loss;
        d_score += &p.d_score_kernel;
        if let (Some(acc), Some(g)) = (d_att.as_mut(), p.d_attention_kernel.as_ref()) {
            *acc += g;
        }
    }

    let v = &params.attr_sem.0;
    let w_e = v.t().dot(&d_score);
    let mut attr_sem = d_score.dot(&params.w_e.t());
    let w_alpha = d_att.map(|g| {
        attr_sem += &g.dot(&params.w_alpha.t());
        v.t().dot(&g)
    });
    if !loss.is_finite() {
        return Err(Error::Precondition("loss is not finite".into()));
    }
    Ok((loss, Grads { w_alpha, w_e, attr_sem }))
}

fn uniform_batch<'a>(batch: &[(Input<'a>, usize)]) -> Vec<Example<'a>> {
    let w = 1.0 / batch.len().max(1) as f64;
    batch
        .iter()
        .map(|&(input, label)| Example {
            input,
            label,
            weight: w,
        })
        .collect()
}

/// Mean cross-entropy `−(1/|B|) Σ log p(y_i | H_i)` over `classes`.
pub fn ce_loss(
    batch: &[(Input, usize)],
    z: &ClassSemantics,
    params: &ModelParams,
    classes: &[usize],
    stage: Stage,
) -> Result<(f64, Grads)> {
    if batch.is_empty() {
        return Err(Error::EmptyInput);
    }
    objective(
        &uniform_batch(batch),
        &[Term::CrossEntropy { classes, weight: 1.0 }],
        z,
        params,
        stage,
    )
}

/// `−λ_cal (1/|B|) Σ_i log Σ_{n ∈ novel} p(n | H_i)` with the softmax over `all_classes`.
pub fn calibration_loss(
    batch: &[(Input, usize)],
    z: &ClassSemantics,
    params: &ModelParams,
    all_classes: &[usize],
    novel: &[usize],
    lambda_cal: f64,
    stage: Stage,
) -> Result<(f64, Grads)> {
    if novel.is_empty() {
        return Err(Error::Precondition("calibration needs at least one novel class".into()));
    }
    if batch.is_empty() {
        return Err(Error::EmptyInput);
    }
    objective(
        &uniform_batch(batch),
        &[Term::Calibration {
            classes: all_classes,
            novel,
            weight: lambda_cal,
        }],
        z,
        params,
        stage,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::AttributeSemantics;
    use crate::optim::gradcheck::{grad_check_params, random_instance};
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn symmetric() -> (ModelParams, ClassSemantics, Array2<f64>) {
        let v = AttributeSemantics::new(array![[1.0, 0.0], [0.0, 1.0]]).unwrap();
        let p = ModelParams::new(Array2::eye(2), Array2::eye(2), v).unwrap();
        let z = ClassSemantics::new(array![[1.0, 0.0], [0.0, 1.0]]).unwrap();
        // Both regions identical, so both attributes see the same feature and score equally.
        let f = array![[1.0, 1.0], [1.0, 1.0]];
        (p, z, f)
    }

    #[test]
    fn single_class_has_zero_loss_and_gradient() {
        let (p, z, f) = symmetric();
        let batch = [(Input::Regions(f.view()), 0)];
        let (loss, g) = ce_loss(&batch, &z, &p, &[0], Stage::Attention).unwrap();
        assert_eq!(loss, 0.0);
        assert!(g
            .w_e
            .iter()
            .chain(g.attr_sem.iter())
            .chain(g.w_alpha.unwrap().iter())
            .all(|&x| x == 0.0));
    }

    #[test]
    fn equal_scores_give_ln2() {
        let (p, z, f) = symmetric();
        let batch = [(Input::Regions(f.view()), 1)];
        let (loss, _) = ce_loss(&batch, &z, &p, &[0, 1], Stage::Attention).unwrap();
        assert!((loss - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn calibration_examples() {
        let (p, z, f) = symmetric();
        let batch = [(Input::Regions(f.view()), 0)];
        let (loss, g) = calibration_loss(&batch, &z, &p, &[0, 1], &[1], 0.0, Stage::Attention).unwrap();
        assert_eq!(loss, 0.0);
        assert!(g.w_e.iter().all(|&x| x == 0.0));
        let (loss, _) = calibration_loss(&batch, &z, &p, &[0, 1], &[1], 0.1, Stage::Attention).unwrap();
        assert!((loss - (-0.1 * 0.5f64.ln())).abs() < 1e-12);
        assert!(calibration_loss(&batch, &z, &p, &[0, 1], &[], 0.1, Stage::Attention).is_err());
    }

    #[test]
    fn label_outside_subset_rejected() {
        let (p, z, f) = symmetric();
        let batch = [(Input::Regions(f.view()), 1)];
        assert!(ce_loss(&batch, &z, &p, &[0], Stage::Attention).is_err());
    }

    #[test]
    fn extreme_scores_stay_finite() {
        let (mut p, z, f) = symmetric();
        p.w_e *= 1e4;
        let batch = [(Input::Regions(f.view()), 1)];
        let (loss, g) = ce_loss(&batch, &z, &p, &[0, 1], Stage::Attention).unwrap();
        assert!(loss.is_finite());
        assert!(g.w_e.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let inst = random_instance(&mut rng, 4, 3, 5, 4, 3);
            for stage in [Stage::Attention, Stage::FrozenFeatures] {
                let err = grad_check_params(&inst, stage, true, 1e-5, usize::MAX, seed).unwrap();
                assert!(err < 1e-4, "seed {seed} {stage:?}: {err}");
            }
        }
    }
}
