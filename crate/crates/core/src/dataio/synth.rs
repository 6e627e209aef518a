//! Planted-model synthetic benchmark.
//!
//! Every attribute `a` owns a visual prototype `u_a`. A class switches on a
//! fixed subset of attributes; each image of the class hosts one region per
//! active attribute (`u_a` plus Gaussian noise) and fills its remaining regions
//! with pure noise. Novel classes only use attributes that some seen class
//! also uses, so they are describable by recombining seen-class regions.

use std::collections::BTreeSet;

use ndarray::{Array1, Array2};
use rand::seq::index::sample as sample_indices;
use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{AttributeSemantics, ClassSemantics, Dataset, Sample, Splits};
use crate::error::{Error, Result};
use crate::numkernel::l2_normalize;
use crate::rng::{self, Purpose, Rng};

const MAX_RESAMPLES: usize = 100_000;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct SynthConfig {
    pub num_seen: usize,
    pub num_novel: usize,
    pub num_attributes: usize,
    pub region_dim: usize,
    pub regions_per_image: usize,
    pub samples_per_seen_class: usize,
    /// Held-out test images per class (seen and novel).
    #[serde(default = "default_test_samples")]
    pub test_samples_per_class: usize,
    /// Training images generated per novel class (0 for zero-shot data).
    #[serde(default)]
    pub few_shot_budget: usize,
    pub attributes_per_class: usize,
    pub noise_sigma: f64,
    /// Attribute semantic dimension; defaults to `region_dim`.
    #[serde(default)]
    pub semantic_dim: Option<usize>,
    pub seed: u64,
}

fn default_test_samples() -> usize {
    10
}

impl SynthConfig {
    /// The fixed configuration the acceptance suite runs on.
    pub fn reference() -> Self {
        Self {
            num_seen: 10,
            num_novel: 4,
            num_attributes: 20,
            region_dim: 32,
            regions_per_image: 6,
            samples_per_seen_class: 40,
            test_samples_per_class: 10,
            few_shot_budget: 0,
            attributes_per_class: 4,
            noise_sigma: 0.05,
            semantic_dim: None,
            seed: 0,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.attributes_per_class > self.regions_per_image {
            return Err(Error::Config("regions cannot host attributes".into()));
        }
        if self.attributes_per_class == 0 || self.attributes_per_class > self.num_attributes {
            return Err(Error::Config(format!(
                "attributesPerClass must be in 1..={}",
                self.num_attributes
            )));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config("noiseSigma must be a finite nonnegative number".into()));
        }
        if self.num_seen == 0 || self.region_dim == 0 || self.semantic_dim == Some(0) {
            return Err(Error::Config(
                "numSeen, regionDim and semanticDim must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// A generated dataset together with the planted attribute prototypes (A × d).
#[derive(Debug, Clone)]
pub struct Synthetic {
    pub dataset: Dataset,
    pub prototypes: Array2<f64>,
    pub class_attributes: Vec<Vec<usize>>,
}

fn round_f32(x: f64) -> f64 {
    x as f32 as f64
}

fn gaussian_matrix(rng: &mut Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || StandardNormal.sample(rng))
}

fn prototypes(rng: &mut Rng, a: usize, d: usize) -> Array2<f64> {
    let mut u = gaussian_matrix(rng, a, d);
    let orthogonalize = d >= a;
    for i in 0..a {
        if orthogonalize {
            for j in 0..i {
                let proj = u.row(i).dot(&u.row(j));
                let prev = u.row(j).to_owned();
                u.row_mut(i).scaled_add(-proj, &prev);
            }
        }
        let n = l2_normalize(u.row(i)).expect("gaussian rows are nonzero almost surely");
        u.row_mut(i).assign(&n);
    }
    u
}

fn draw_class_attributes(cfg: &SynthConfig, rng: &mut Rng) -> Result<Vec<Vec<usize>>> {
    let total = cfg.num_seen + cfg.num_novel;
    for _ in 0..MAX_RESAMPLES {
        let mut sets: Vec<Vec<usize>> = Vec::with_capacity(total);
        let mut distinct = BTreeSet::new();
        while sets.len() < total {
            let mut s = sample_indices(rng, cfg.num_attributes, cfg.attributes_per_class).into_vec();
            s.sort_unstable();
            if distinct.insert(s.clone()) {
                sets.push(s);
            } else if distinct.len() >= binomial(cfg.num_attributes, cfg.attributes_per_class) {
                return Err(Error::Config(
                    "not enough distinct attribute subsets for all classes".into(),
                ));
            }
        }
        let seen_union: BTreeSet<usize> = sets[..cfg.num_seen].iter().flatten().copied().collect();
        if sets[cfg.num_seen..].iter().flatten().all(|a| seen_union.contains(a)) {
            return Ok(sets);
        }
    }
    Err(Error::Config(
        "could not draw novel classes describable by seen-class attributes".into(),
    ))
}

fn binomial(n: usize, k: usize) -> usize {
    (0..k).fold(1usize, |acc, i| acc.saturating_mul(n - i) / (i + 1))
}

pub fn generate(cfg: &SynthConfig) -> Result<Synthetic> {
    cfg.validate()?;
    let mut rng = rng::stream(cfg.seed, Purpose::Synth, 0, 0);
    let (a, d, r) = (cfg.num_attributes, cfg.region_dim, cfg.regions_per_image);
    let dv = cfg.semantic_dim.unwrap_or(d);

    let protos = prototypes(&mut rng, a, d).mapv(round_f32);
    let class_attributes = draw_class_attributes(cfg, &mut rng)?;
    let num_classes = class_attributes.len();

    let mut z = Array2::<f64>::zeros((num_classes, a));
    for (c, attrs) in class_attributes.iter().enumerate() {
        for &at in attrs {
            z[[c, at]] = 1.0;
        }
        let n = l2_normalize(z.row(c))?.mapv(round_f32);
        z.row_mut(c).assign(&n);
    }
    let class_sem = ClassSemantics::new(z)?;

    let mut v = gaussian_matrix(&mut rng, a, dv);
    for mut row in v.rows_mut() {
        let n = l2_normalize(row.view())?.mapv(round_f32);
        row.assign(&n);
    }
    let attr_sem = AttributeSemantics::new(v)?;

    let noise = Normal::new(0.0, cfg.noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
    let make_image = |rng: &mut Rng, attrs: &[usize]| -> Array2<f64> {
        let mut slots: Vec<usize> = (0..r).collect();
        slots.shuffle(rng);
        let mut regions = Array2::<f64>::zeros((r, d));
        for (k, &slot) in slots.iter().enumerate() {
            let mut row: Array1<f64> = match attrs.get(k) {
                Some(&at) => protos.row(at).to_owned(),
                None => Array1::zeros(d),
            };
            row.mapv_inplace(|x| x + noise.sample(rng));
            regions.row_mut(slot).assign(&row.mapv(round_f32));
        }
        regions
    };

    let seen_classes: Vec<usize> = (0..cfg.num_seen).collect();
    let novel_classes: Vec<usize> = (cfg.num_seen..num_classes).collect();
    let mut samples = Vec::new();
    let mut splits = Splits::default();
    for (c, attrs) in class_attributes.iter().enumerate() {
        let (train, target) = if c < cfg.num_seen {
            (cfg.samples_per_seen_class, &mut splits.seen_train)
        } else {
            (cfg.few_shot_budget, &mut splits.novel_train)
        };
        for _ in 0..train {
            target.push(samples.len());
            samples.push(Sample {
                regions: make_image(&mut rng, attrs),
                class: c,
            });
        }
        for _ in 0..cfg.test_samples_per_class {
            splits.test.push(samples.len());
            samples.push(Sample {
                regions: make_image(&mut rng, attrs),
                class: c,
            });
        }
    }

    let dataset = Dataset::new(
        format!("synthetic-seed{}", cfg.seed),
        samples,
        class_sem,
        attr_sem,
        seen_classes,
        novel_classes,
        splits,
        cfg.few_shot_budget,
    )?;
    Ok(Synthetic {
        dataset,
        prototypes: protos,
        class_attributes,
    })
}

pub fn synth_dataset(cfg: &SynthConfig) -> Result<Dataset> {
    generate(cfg).map(|s| s.dataset)
}
