//! Central finite-difference gradient oracle.

use ndarray::Array2;
use rand::seq::index::sample as sample_indices;
use rand::Rng;

use super::loss::{objective, Example, Grads, Input, Stage, Term};
use crate::attention::{dense_feature, DenseFeature, ModelParams};
use crate::dataio::{AttributeSemantics, ClassSemantics, Dataset};
use crate::error::{Error, Result};
use crate::rng::{self, Purpose};

/// Relative error with a small floor on the denominator so that entries whose
/// true gradient is numerically zero are judged on absolute error.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-7)
}

/// Compares `probe_count` randomly chosen gradient entries of `f` at `theta`
/// against `(f(θ+h) − f(θ−h)) / 2h` and returns the largest relative error.
pub fn grad_check<F>(f: F, theta: &[f64], probe_count: usize, h: f64, seed: u64) -> Result<f64>
where
    F: Fn(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let (_, grad) = f(theta)?;
    let mut rng = rng::stream(seed, Purpose::Probe, 0, 0);
    let probes = sample_indices(&mut rng, theta.len(), probe_count.min(theta.len()));
    let mut worst: f64 = 0.0;
    let mut x = theta.to_vec();
    for i in probes {
        let orig = x[i];
        x[i] = orig + h;
        let (plus, _) = f(&x)?;
        x[i] = orig - h;
        let (minus, _) = f(&x)?;
        x[i] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        worst = worst.max(relative_error(grad[i], numeric));
    }
    Ok(worst)
}

/// Flattens the parameters in scope of `stage`: `[W_α,] W_e, V`.
pub fn flatten(params: &ModelParams, stage: Stage) -> Vec<f64> {
    let mut out = Vec::new();
    if stage == Stage::Attention {
        out.extend(params.w_alpha.iter());
    }
    out.extend(params.w_e.iter());
    out.extend(params.attr_sem.0.iter());
    out
}

pub fn unflatten(template: &ModelParams, stage: Stage, theta: &[f64]) -> ModelParams {
    let mut p = template.clone();
    let mut it = theta.iter().copied();
    if stage == Stage::Attention {
        p.w_alpha.iter_mut().for_each(|x| *x = it.next().expect("length"));
    }
    p.w_e.iter_mut().for_each(|x| *x = it.next().expect("length"));
    p.attr_sem.0.iter_mut().for_each(|x| *x = it.next().expect("length"));
    p
}

pub fn flatten_grads(g: &Grads) -> Vec<f64> {
    let mut out = Vec::new();
    if let Some(wa) = &g.w_alpha {
        out.extend(wa.iter());
    }
    out.extend(g.w_e.iter());
    out.extend(g.attr_sem.iter());
    out
}

/// A small random problem for gradient checks.
#[derive(Debug, Clone)]
pub struct Instance {
    pub params: ModelParams,
    pub z: ClassSemantics,
    pub regions: Vec<(Array2<f64>, usize)>,
    /// Dense features of `regions` under `params`, frozen for stage-2 checks.
    pub dense: Vec<DenseFeature>,
    pub seen: Vec<usize>,
    pub novel: Vec<usize>,
    pub all: Vec<usize>,
}

/// `classes` ≥ 2; the last class is novel, the rest are seen and label the samples.
pub fn random_instance<R: Rng>(rng: &mut R, a: usize, r: usize, d: usize, dv: usize, classes: usize) -> Instance {
    let mut mat =
        |rows, cols, lo: f64, hi: f64| Array2::from_shape_simple_fn((rows, cols), || rng.random_range(lo..hi));
    let v = AttributeSemantics::new(mat(a, dv, -1.0, 1.0)).expect("finite");
    let params = ModelParams::new(mat(dv, d, -1.0, 1.0), mat(dv, d, -1.0, 1.0), v).expect("shapes");
    let z = ClassSemantics::new(mat(classes, a, 0.05, 1.0)).expect("positive rows");
    let all: Vec<usize> = (0..classes).collect();
    let seen: Vec<usize> = (0..classes - 1).collect();
    let novel = vec![classes - 1];
    let n = 3;
    let regions: Vec<(Array2<f64>, usize)> = (0..n).map(|i| (mat(r, d, -1.0, 1.0), seen[i % seen.len()])).collect();
    let dense = regions
        .iter()
        .map(|(f, _)| dense_feature(f.view(), &params).expect("shapes"))
        .collect();
    Instance {
        params,
        z,
        regions,
        dense,
        seen,
        novel,
        all,
    }
}

/// Gradient-check instance on a dataset's shapes: random parameters in
/// [−1, 1], the dataset's class semantics and its first few seen training images.
pub fn dataset_instance(dataset: &Dataset, samples: usize, seed: u64) -> Result<Instance> {
    let (_, d) = dataset
        .region_shape()
        .ok_or_else(|| Error::Precondition("dataset has no samples".into()))?;
    let (a, dv) = (dataset.num_attributes(), dataset.attr_sem.dim());
    let mut rng = rng::stream(seed, Purpose::Probe, 1, 0);
    let mut mat = |rows, cols| Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-1.0..1.0));
    let v = AttributeSemantics::new(mat(a, dv))?;
    let params = ModelParams::new(mat(dv, d), mat(dv, d), v)?;
    let regions: Vec<(Array2<f64>, usize)> = dataset
        .splits
        .seen_train
        .iter()
        .take(samples)
        .map(|&i| (dataset.samples[i].regions.clone(), dataset.samples[i].class))
        .collect();
    if regions.is_empty() {
        return Err(Error::Precondition("no seen-class training samples".into()));
    }
    let dense = regions
        .iter()
        .map(|(f, _)| dense_feature(f.view(), &params))
        .collect::<Result<_>>()?;
    let mut seen = dataset.seen_classes.clone();
    seen.sort_unstable();
    let mut novel = dataset.novel_classes.clone();
    novel.sort_unstable();
    Ok(Instance {
        params,
        z: dataset.class_sem.clone(),
        regions,
        dense,
        seen,
        novel,
        all: dataset.all_classes(),
    })
}

/// Gradient check of the stage objective on `inst`: seen-class cross-entropy
/// for stage 1 (plus calibration when asked), all-class cross-entropy on frozen
/// dense features for stage 2. Probes at most `max_probes` coordinates.
pub fn grad_check_params(
    inst: &Instance,
    stage: Stage,
    with_calibration: bool,
    h: f64,
    max_probes: usize,
    seed: u64,
) -> Result<f64> {
    let w = 1.0 / inst.regions.len() as f64;
    let examples: Vec<Example> = match stage {
        Stage::Attention => inst
            .regions
            .iter()
            .map(|(f, y)| Example {
                input: Input::Regions(f.view()),
                label: *y,
                weight: w,
            })
            .collect(),
        Stage::FrozenFeatures => inst
            .dense
            .iter()
            .zip(&inst.regions)
            .map(|(hd, (_, y))| Example {
                input: Input::Dense(hd),
                label: *y,
                weight: w,
            })
            .collect(),
    };
    let mut terms = vec![Term::CrossEntropy {
        classes: if stage == Stage::Attention {
            &inst.seen
        } else {
            &inst.all
        },
        weight: 1.0,
    }];
    if with_calibration && !inst.novel.is_empty() {
        terms.push(Term::Calibration {
            classes: &inst.all,
            novel: &inst.novel,
            weight: 0.7,
        });
    }
    let f = |theta: &[f64]| -> Result<(f64, Vec<f64>)> {
        let p = unflatten(&inst.params, stage, theta);
        let (loss, g) = objective(&examples, &terms, &inst.z, &p, stage)?;
        Ok((loss, flatten_grads(&g)))
    };
    let theta = flatten(&inst.params, stage);
    grad_check(f, &theta, max_probes, h, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_loss_is_exact() {
        let c = [0.3, -1.2, 2.5, 0.0, 4.0];
        let f = |theta: &[f64]| -> Result<(f64, Vec<f64>)> {
            Ok((theta.iter().zip(&c).map(|(t, c)| t * c).sum(), c.to_vec()))
        };
        let err = grad_check(f, &[1.0, 2.0, -3.0, 0.5, 0.25], 5, 1e-5, 0).unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn wrong_gradient_is_detected() {
        let f = |theta: &[f64]| -> Result<(f64, Vec<f64>)> { Ok((theta[0] * theta[0], vec![theta[0]])) };
        let err = grad_check(f, &[1.5], 1, 1e-5, 0).unwrap();
        assert!(err > 0.4);
    }

    #[test]
    fn flatten_round_trip() {
        use rand::SeedableRng;
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let inst = random_instance(&mut r, 3, 2, 4, 2, 3);
        for stage in [Stage::Attention, Stage::FrozenFeatures] {
            let theta = flatten(&inst.params, stage);
            assert_eq!(unflatten(&inst.params, stage, &theta), inst.params);
        }
    }
}
