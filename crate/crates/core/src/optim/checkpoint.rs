//! Checkpoint directories: `w_alpha.cfgf`, `w_e.cfgf`, `attr_sem.cfgf` and a
//! `checkpoint.json` sidecar.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::attention::ModelParams;
use crate::dataio::{cfgf, AttributeSemantics};
use crate::error::{Error, Result};
use crate::numkernel::Tensor;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(rename_all = "camelCase")]
pub struct CheckpointMeta {
    /// "attention", "compose" or "fewshot".
    pub stage: String,
    pub iteration: usize,
    pub seed: u64,
    pub calibration: bool,
    pub config: TrainConfig,
}

const W_ALPHA: &str = "w_alpha.cfgf";
const W_E: &str = "w_e.cfgf";
const ATTR_SEM: &str = "attr_sem.cfgf";
const META: &str = "checkpoint.json";

pub fn save(params: &ModelParams, meta: &CheckpointMeta, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    cfgf::store_tensor(&Tensor::from_matrix(&params.w_alpha)?, dir.join(W_ALPHA))?;
    cfgf::store_tensor(&Tensor::from_matrix(&params.w_e)?, dir.join(W_E))?;
    cfgf::store_tensor(&Tensor::from_matrix(&params.attr_sem.0)?, dir.join(ATTR_SEM))?;
    let path = dir.join(META);
    let text = serde_json::to_string_pretty(meta).map_err(|e| Error::json(&path, e))?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn load(dir: impl AsRef<Path>) -> Result<(ModelParams, CheckpointMeta)> {
    let dir = dir.as_ref();
    let w_alpha = cfgf::load_tensor(dir.join(W_ALPHA))?.into_matrix()?;
    let w_e = cfgf::load_tensor(dir.join(W_E))?.into_matrix()?;
    let v = cfgf::load_tensor(dir.join(ATTR_SEM))?.into_matrix()?;
    let path = dir.join(META);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let meta = serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
    Ok((ModelParams::new(w_alpha, w_e, AttributeSemantics::new(v)?)?, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn round_trip() {
        let v = AttributeSemantics::new(array![[0.5, -0.25]]).unwrap();
        let p = ModelParams::new(array![[1.0], [2.0]], array![[-3.0], [0.125]], v).unwrap();
        let meta = CheckpointMeta {
            stage: "attention".into(),
            iteration: 12,
            seed: 7,
            calibration: false,
            config: TrainConfig::default(),
        };
        let dir = tempfile::tempdir().unwrap();
        save(&p, &meta, dir.path()).unwrap();
        let (q, m) = load(dir.path()).unwrap();
        assert_eq!(q, p);
        assert_eq!(m, meta);
    }
}
