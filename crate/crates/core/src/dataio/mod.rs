//! Data model, on-disk formats and the planted-model generator.

pub mod cfgf;
pub mod manifest;
pub mod synth;

use std::collections::BTreeSet;

use ndarray::{Array2, ArrayView1};

use crate::error::{Error, Result};
use crate::numkernel::l2_normalize;

pub use cfgf::{load_tensor, store_tensor};
pub use manifest::{load_manifest, write_manifest};
pub use synth::{synth_dataset, SynthConfig};

/// Attribute semantic vectors, one row per attribute (A × dv).
#[derive(Debug, Clone, PartialEq)]
pub struct AttributeSemantics(pub Array2<f64>);

impl AttributeSemantics {
    pub fn new(v: Array2<f64>) -> Result<Self> {
        if v.nrows() == 0 || v.ncols() == 0 {
            return Err(Error::Dataset(
                "attribute semantics must have at least one attribute".into(),
            ));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::Dataset("attribute semantics contain non-finite values".into()));
        }
        Ok(Self(v))
    }

    pub fn num_attributes(&self) -> usize {
        self.0.nrows()
    }

    pub fn dim(&self) -> usize {
        self.0.ncols()
    }
}

/// Class attribute strengths, one unit-norm, nonnegative row per class (C × A).
#[derive(Debug, Clone, PartialEq)]
pub struct ClassSemantics(Array2<f64>);

impl ClassSemantics {
    /// Validates nonnegativity and normalizes every row to unit length.
    pub fn new(raw: Array2<f64>) -> Result<Self> {
        let mut z = raw;
        if z.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(Error::Dataset("class semantics must be finite and nonnegative".into()));
        }
        for (c, mut row) in z.rows_mut().into_iter().enumerate() {
            let normalized = l2_normalize(row.view())
                .map_err(|_| Error::Dataset(format!("class {c} has an all-zero semantic vector")))?;
            row.assign(&normalized);
        }
        Ok(Self(z))
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn row(&self, class: usize) -> ArrayView1<'_, f64> {
        self.0.row(class)
    }

    pub fn num_classes(&self) -> usize {
        self.0.nrows()
    }

    pub fn num_attributes(&self) -> usize {
        self.0.ncols()
    }
}

/// One image: its R × d region features and its class id.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub regions: Array2<f64>,
    pub class: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Splits {
    pub seen_train: Vec<usize>,
    pub novel_train: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub samples: Vec<Sample>,
    pub class_sem: ClassSemantics,
    pub attr_sem: AttributeSemantics,
    pub seen_classes: Vec<usize>,
    pub novel_classes: Vec<usize>,
    pub splits: Splits,
    pub few_shot_budget: usize,
}

impl Dataset {
    /// Builds a dataset, enforcing every structural invariant.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: String,
        samples: Vec<Sample>,
        class_sem: ClassSemantics,
        attr_sem: AttributeSemantics,
        seen_classes: Vec<usize>,
        novel_classes: Vec<usize>,
        splits: Splits,
        few_shot_budget: usize,
    ) -> Result<Self> {
        let num_classes = class_sem.num_classes();
        if class_sem.num_attributes() != attr_sem.num_attributes() {
            return Err(Error::Dataset(format!(
                "class semantics describe {} attributes but {} attribute vectors were given",
                class_sem.num_attributes(),
                attr_sem.num_attributes()
            )));
        }
        let seen: BTreeSet<usize> = seen_classes.iter().copied().collect();
        let novel: BTreeSet<usize> = novel_classes.iter().copied().collect();
        if seen.len() != seen_classes.len() || novel.len() != novel_classes.len() {
            return Err(Error::Dataset("duplicate class ids in class sets".into()));
        }
        if seen.intersection(&novel).next().is_some() {
            return Err(Error::Dataset("overlapping class sets".into()));
        }
        if let Some(&c) = seen.iter().chain(&novel).find(|&&c| c >= num_classes) {
            return Err(Error::Dataset(format!(
                "class id {c} out of range for {num_classes} class semantic vectors"
            )));
        }

        if let Some(first) = samples.first() {
            let shape = first.regions.dim();
            if shape.0 == 0 {
                return Err(Error::Dataset("samples must have at least one region".into()));
            }
            for (i, s) in samples.iter().enumerate() {
                if s.regions.dim() != shape {
                    return Err(Error::Dataset(format!(
                        "sample {i} has region shape {:?}, expected {:?}",
                        s.regions.dim(),
                        shape
                    )));
                }
                if !seen.contains(&s.class) && !novel.contains(&s.class) {
                    return Err(Error::Dataset(format!(
                        "sample {i} has class {} outside the seen and novel sets",
                        s.class
                    )));
                }
            }
        }

        let mut used = BTreeSet::new();
        let mut check_split = |name: &str, idx: &[usize], allowed: Option<&BTreeSet<usize>>| -> Result<()> {
            for &i in idx {
                if i >= samples.len() {
                    return Err(Error::Dataset(format!(
                        "{name} index {i} out of range for {} samples",
                        samples.len()
                    )));
                }
                if !used.insert(i) {
                    return Err(Error::Dataset(format!("split overlap: sample {i} listed twice")));
                }
                if let Some(allowed) = allowed {
                    if !allowed.contains(&samples[i].class) {
                        return Err(Error::Dataset(format!(
                            "{name} sample {i} has class {} outside its class set",
                            samples[i].class
                        )));
                    }
                }
            }
            Ok(())
        };
        check_split("seenTrain", &splits.seen_train, Some(&seen))?;
        check_split("novelTrain", &splits.novel_train, Some(&novel))?;
        check_split("test", &splits.test, None)?;

        for &c in &novel {
            let shots = splits.novel_train.iter().filter(|&&i| samples[i].class == c).count();
            if shots > few_shot_budget {
                return Err(Error::Dataset(format!(
                    "novel class {c} has {shots} training samples, budget is {few_shot_budget}"
                )));
            }
        }

        Ok(Self {
            name,
            samples,
            class_sem,
            attr_sem,
            seen_classes,
            novel_classes,
            splits,
            few_shot_budget,
        })
    }

    pub fn num_attributes(&self) -> usize {
        self.attr_sem.num_attributes()
    }

    pub fn num_classes(&self) -> usize {
        self.class_sem.num_classes()
    }

    /// Region count and region feature dimension shared by all samples.
    pub fn region_shape(&self) -> Option<(usize, usize)> {
        self.samples.first().map(|s| s.regions.dim())
    }

    pub fn all_classes(&self) -> Vec<usize> {
        let mut all: Vec<usize> = self.seen_classes.iter().chain(&self.novel_classes).copied().collect();
        all.sort_unstable();
        all
    }

    pub fn is_seen(&self, class: usize) -> bool {
        self.seen_classes.contains(&class)
    }

    /// Keeps the first `shots` novel training samples of every novel class.
    pub fn with_shots(&self, shots: usize) -> Dataset {
        let mut kept = Vec::new();
        for &c in &self.novel_classes {
            kept.extend(
                self.splits
                    .novel_train
                    .iter()
                    .copied()
                    .filter(|&i| self.samples[i].class == c)
                    .take(shots),
            );
        }
        kept.sort_unstable();
        let mut out = self.clone();
        out.splits.novel_train = kept;
        out.few_shot_budget = shots;
        out
    }

    /// Keeps `shots` randomly chosen novel training samples per novel class (fewer if the pool is smaller).
    pub fn sample_shots(&self, shots: usize, seed: u64) -> Dataset {
        let mut rng = crate::rng::stream(seed, crate::rng::Purpose::Shots, 0, 0);
        let mut kept = Vec::new();
        for (_, pool) in self.train_by_class(&self.splits.novel_train, &self.novel_classes) {
            let take = shots.min(pool.len());
            kept.extend(
                rand::seq::index::sample(&mut rng, pool.len(), take)
                    .into_iter()
                    .map(|k| pool[k]),
            );
        }
        kept.sort_unstable();
        let mut out = self.clone();
        out.splits.novel_train = kept;
        out.few_shot_budget = shots;
        out
    }

    /// Training sample indices grouped per class, in ascending class order.
    pub fn train_by_class(&self, indices: &[usize], classes: &[usize]) -> Vec<(usize, Vec<usize>)> {
        let mut sorted = classes.to_vec();
        sorted.sort_unstable();
        sorted
            .into_iter()
            .map(|c| {
                (
                    c,
                    indices
                        .iter()
                        .copied()
                        .filter(|&i| self.samples[i].class == c)
                        .collect::<Vec<_>>(),
                )
            })
            .filter(|(_, v)| !v.is_empty())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn one_class() -> Dataset {
        Dataset::new(
            "tiny".into(),
            vec![Sample {
                regions: array![[1.0, 0.0], [0.0, 1.0]],
                class: 0,
            }],
            ClassSemantics::new(array![[3.0, 4.0]]).unwrap(),
            AttributeSemantics::new(array![[1.0], [0.5]]).unwrap(),
            vec![0],
            vec![],
            Splits {
                seen_train: vec![0],
                ..Default::default()
            },
            0,
        )
        .unwrap()
    }

    #[test]
    fn class_rows_are_unit_norm() {
        let d = one_class();
        assert_eq!(d.class_sem.row(0).to_vec(), vec![0.6, 0.8]);
        assert!(ClassSemantics::new(array![[0.0, 0.0]]).is_err());
        assert!(ClassSemantics::new(array![[-1.0, 1.0]]).is_err());
    }

    #[test]
    fn overlapping_classes_rejected() {
        let d = one_class();
        let err = Dataset::new(
            d.name,
            d.samples,
            ClassSemantics::new(array![[1.0, 0.0], [0.0, 1.0]]).unwrap(),
            d.attr_sem,
            vec![0, 1],
            vec![1],
            d.splits,
            0,
        )
        .unwrap_err();
        assert!(err.to_string().contains("overlapping class sets"));
    }

    #[test]
    fn few_shot_budget_enforced() {
        let d = one_class();
        let samples = vec![
            d.samples[0].clone(),
            Sample {
                regions: array![[0.0, 0.0], [0.0, 0.0]],
                class: 1,
            },
        ];
        let z = ClassSemantics::new(array![[1.0, 0.0], [0.0, 1.0]]).unwrap();
        let splits = Splits {
            seen_train: vec![0],
            novel_train: vec![1],
            test: vec![],
        };
        let err = Dataset::new(
            "x".into(),
            samples.clone(),
            z.clone(),
            d.attr_sem.clone(),
            vec![0],
            vec![1],
            splits.clone(),
            0,
        )
        .unwrap_err();
        assert!(err.to_string().contains("budget"));
        let ok = Dataset::new("x".into(), samples, z, d.attr_sem, vec![0], vec![1], splits, 1).unwrap();
        assert_eq!(ok.with_shots(0).splits.novel_train, Vec::<usize>::new());
    }

    #[test]
    fn split_errors() {
        let d = one_class();
        let mut splits = d.splits.clone();
        splits.test = vec![0];
        let err = Dataset::new(
            d.name.clone(),
            d.samples.clone(),
            d.class_sem.clone(),
            d.attr_sem.clone(),
            vec![0],
            vec![],
            splits,
            0,
        )
        .unwrap_err();
        assert!(err.to_string().contains("split overlap"));
        let mut splits = d.splits.clone();
        splits.test = vec![5];
        let err = Dataset::new(d.name, d.samples, d.class_sem, d.attr_sem, vec![0], vec![], splits, 0).unwrap_err();
        assert!(err.to_string().contains("out of range"));
    }
}
