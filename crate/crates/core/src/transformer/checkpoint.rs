//! JSON checkpoints keyed by dotted parameter paths.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lsq::{ScaleFactor, SiteKind};
use crate::tensor::Tensor;

use super::config::ModelConfig;
use super::state::{param_shapes, quant_sites, ModelState};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scale: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config: ModelConfig,
    pub params: BTreeMap<String, ParamEntry>,
    /// Activation sites have no parameter to hang their scale on.
    #[serde(default)]
    pub activation_scales: BTreeMap<String, f64>,
}

impl Checkpoint {
    pub fn from_state(state: &ModelState) -> Self {
        let params = state
            .params
            .iter()
            .map(|(name, t)| {
                let entry = ParamEntry {
                    shape: t.shape().to_vec(),
                    values: t.data().to_vec(),
                    scale: state.scales.get(name).map(|s| s.value),
                };
                (name.clone(), entry)
            })
            .collect();
        let activation_scales = state
            .scales
            .values()
            .filter(|s| s.kind == SiteKind::Activation)
            .map(|s| (s.site.clone(), s.value))
            .collect();
        Self {
            version: CHECKPOINT_VERSION,
            config: state.config.clone(),
            params,
            activation_scales,
        }
    }

    pub fn into_state(self) -> Result<ModelState> {
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {}",
                self.version
            )));
        }
        self.config.validate()?;
        let kinds: BTreeMap<String, SiteKind> = quant_sites(&self.config)
            .into_iter()
            .map(|s| (s.id.clone(), s.kind()))
            .collect();
        let mut params = BTreeMap::new();
        let mut scales = BTreeMap::new();
        for (name, shape) in param_shapes(&self.config) {
            let entry = self
                .params
                .get(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))?;
            if entry.shape != shape {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` has shape {:?}, expected {shape:?}",
                    entry.shape
                )));
            }
            params.insert(name.clone(), Tensor::new(shape, entry.values.clone())?);
            if let Some(value) = entry.scale {
                if kinds.get(&name) != Some(&SiteKind::Weight) {
                    return Err(Error::Checkpoint(format!(
                        "`{name}` is not a quantization site but carries a scale"
                    )));
                }
                scales.insert(name.clone(), ScaleFactor::new(&name, SiteKind::Weight, value));
            }
        }
        for (site, &value) in &self.activation_scales {
            if kinds.get(site) != Some(&SiteKind::Activation) {
                return Err(Error::Checkpoint(format!("unknown activation site `{site}`")));
            }
            scales.insert(site.clone(), ScaleFactor::new(site, SiteKind::Activation, value));
        }
        Ok(ModelState {
            config: self.config,
            params,
            scales,
        })
    }
}

/// Writes `state` as JSON, creating parent directories as needed.
pub fn save_checkpoint(state: &ModelState, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let json = serde_json::to_string(&Checkpoint::from_state(state))?;
    fs::write(path, json)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelState> {
    let text = fs::read_to_string(path)?;
    let ckpt: Checkpoint = serde_json::from_str(&text)?;
    ckpt.into_state()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transformer::config::BitConfig;

    #[test]
    fn round_trip_is_exact() {
        let mut state = ModelState::init(ModelConfig::toy().with_bits(BitConfig::new(4, 4, 8)), 7, 0.3)
            .unwrap();
        for site in crate::transformer::active_sites(&state.config) {
            state.scales.insert(
                site.id.clone(),
                ScaleFactor::new(&site.id, site.kind(), 0.1 + site.id.len() as f64 / 7.0),
            );
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        save_checkpoint(&state, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back, state);
    }

    #[test]
    fn rejects_bad_version_and_shapes() {
        let state = ModelState::init(ModelConfig::toy(), 1, 0.02).unwrap();
        let mut ckpt = Checkpoint::from_state(&state);
        ckpt.version = 99;
        assert!(ckpt.into_state().is_err());

        let mut ckpt = Checkpoint::from_state(&state);
        ckpt.params.get_mut("classifier.bias").unwrap().shape = vec![3];
        assert!(ckpt.into_state().is_err());

        let mut ckpt = Checkpoint::from_state(&state);
        ckpt.params.get_mut("embeddings.position").unwrap().scale = Some(1.0);
        assert!(ckpt.into_state().is_err());
    }
}
