//! JSON dataset manifests. Tensor paths are relative to the manifest's directory.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{cfgf, AttributeSemantics, ClassSemantics, Dataset, Sample, Splits};
use crate::error::{Error, Result};
use crate::numkernel::Tensor;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct FeatureEntry {
    pub path: PathBuf,
    pub class_id: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct ManifestSplits {
    pub seen_train: Vec<usize>,
    pub novel_train: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct Manifest {
    pub name: String,
    pub features: Vec<FeatureEntry>,
    pub class_semantics: PathBuf,
    pub attribute_semantics: PathBuf,
    pub seen_classes: Vec<usize>,
    pub novel_classes: Vec<usize>,
    pub splits: ManifestSplits,
    pub few_shot_budget: usize,
}

fn load_matrix(base: &Path, rel: &Path, what: &str) -> Result<ndarray::Array2<f64>> {
    let t = cfgf::load_tensor(base.join(rel))?;
    if t.dims().len() != 2 {
        return Err(Error::Dataset(format!(
            "{what} must be a 2-d tensor (one vector per row), got dims {:?}",
            t.dims()
        )));
    }
    t.into_matrix()
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));

    let z = load_matrix(base, &manifest.class_semantics, "classSemantics")?;
    let v = load_matrix(base, &manifest.attribute_semantics, "attributeSemantics")?;
    let samples = manifest
        .features
        .iter()
        .map(|f| {
            Ok(Sample {
                regions: load_matrix(base, &f.path, "region features")?,
                class: f.class_id,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    Dataset::new(
        manifest.name,
        samples,
        ClassSemantics::new(z)?,
        AttributeSemantics::new(v)?,
        manifest.seen_classes,
        manifest.novel_classes,
        Splits {
            seen_train: manifest.splits.seen_train,
            novel_train: manifest.splits.novel_train,
            test: manifest.splits.test,
        },
        manifest.few_shot_budget,
    )
}

/// Writes `manifest.json` plus one CFGF file per tensor under `dir`, returning the manifest path.
pub fn write_manifest(dataset: &Dataset, dir: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    let features_dir = dir.join("features");
    fs::create_dir_all(&features_dir).map_err(|e| Error::io(&features_dir, e))?;

    let mut features = Vec::with_capacity(dataset.samples.len());
    for (i, s) in dataset.samples.iter().enumerate() {
        let rel = PathBuf::from("features").join(format!("{i:06}.cfgf"));
        cfgf::store_tensor(&Tensor::from_matrix(&s.regions)?, dir.join(&rel))?;
        features.push(FeatureEntry {
            path: rel,
            class_id: s.class,
        });
    }
    let class_semantics = PathBuf::from("class_semantics.cfgf");
    let attribute_semantics = PathBuf::from("attribute_semantics.cfgf");
    cfgf::store_tensor(
        &Tensor::from_matrix(dataset.class_sem.matrix())?,
        dir.join(&class_semantics),
    )?;
    cfgf::store_tensor(
        &Tensor::from_matrix(&dataset.attr_sem.0)?,
        dir.join(&attribute_semantics),
    )?;

    let manifest = Manifest {
        name: dataset.name.clone(),
        features,
        class_semantics,
        attribute_semantics,
        seen_classes: dataset.seen_classes.clone(),
        novel_classes: dataset.novel_classes.clone(),
        splits: ManifestSplits {
            seen_train: dataset.splits.seen_train.clone(),
            novel_train: dataset.splits.novel_train.clone(),
            test: dataset.splits.test.clone(),
        },
        few_shot_budget: dataset.few_shot_budget,
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json(&path, e))?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::synth::{synth_dataset, SynthConfig};
    use ndarray::array;

    fn write_tiny(dir: &Path, seen: &[usize], novel: &[usize]) -> PathBuf {
        fs::create_dir_all(dir.join("features")).unwrap();
        cfgf::store_tensor(
            &Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
            dir.join("features/0.cfgf"),
        )
        .unwrap();
        cfgf::store_tensor(
            &Tensor::from_matrix(&array![[1.0, 1.0], [0.0, 1.0]]).unwrap(),
            dir.join("z.cfgf"),
        )
        .unwrap();
        cfgf::store_tensor(
            &Tensor::from_matrix(&array![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]).unwrap(),
            dir.join("v.cfgf"),
        )
        .unwrap();
        let json = serde_json::json!({
            "name": "tiny",
            "features": [{"path": "features/0.cfgf", "classId": 0}],
            "classSemantics": "z.cfgf",
            "attributeSemantics": "v.cfgf",
            "seenClasses": seen,
            "novelClasses": novel,
            "splits": {"seenTrain": [0], "novelTrain": [], "test": []},
            "fewShotBudget": 0
        });
        let path = dir.join("manifest.json");
        fs::write(&path, json.to_string()).unwrap();
        path
    }

    #[test]
    fn single_seen_class_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let d = load_manifest(write_tiny(dir.path(), &[0], &[])).unwrap();
        assert_eq!(d.seen_classes, vec![0]);
        assert!(d.novel_classes.is_empty());
        let r = 0.5f64.sqrt();
        assert!((d.class_sem.row(0)[0] - r).abs() < 1e-7);
    }

    #[test]
    fn overlapping_sets_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_manifest(write_tiny(dir.path(), &[0, 1], &[1])).unwrap_err();
        assert!(err.to_string().contains("overlapping class sets"), "{err}");
    }

    #[test]
    fn missing_key_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.json");
        fs::write(&path, r#"{"name": "x"}"#).unwrap();
        let err = load_manifest(&path).unwrap_err();
        assert!(err.to_string().contains("missing field"), "{err}");
    }

    #[test]
    fn multi_vector_class_semantics_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_tiny(dir.path(), &[0], &[]);
        cfgf::store_tensor(
            &Tensor::new(vec![2, 1, 2], vec![1.0; 4]).unwrap(),
            dir.path().join("z.cfgf"),
        )
        .unwrap();
        assert!(load_manifest(path).is_err());
    }

    #[test]
    fn synthetic_round_trip() {
        let cfg = SynthConfig {
            num_seen: 3,
            num_novel: 2,
            num_attributes: 6,
            region_dim: 8,
            regions_per_image: 3,
            samples_per_seen_class: 4,
            test_samples_per_class: 2,
            few_shot_budget: 1,
            attributes_per_class: 2,
            noise_sigma: 0.1,
            semantic_dim: None,
            seed: 3,
        };
        let generated = synth_dataset(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = write_manifest(&generated, dir.path()).unwrap();
        let loaded = load_manifest(&path).unwrap();
        assert_eq!(loaded, generated);
    }
}
