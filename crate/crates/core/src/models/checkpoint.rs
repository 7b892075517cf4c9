use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ModelParams;
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;
const CHECKPOINT_FORMAT: &str = "eegcond-checkpoint";

/// Self-describing model file: spec, named tensors, batch-norm buffers and
/// training provenance. Floats are written with round-trip precision, so a
/// reload is bit-exact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    pub step: usize,
    pub model: ModelParams,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn new(model: ModelParams, seed: u64, step: usize) -> Self {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            seed,
            step,
            model,
            metadata: BTreeMap::new(),
        }
    }
}

pub fn save_checkpoint(path: impl AsRef<Path>, checkpoint: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string(checkpoint).map_err(|e| Error::format(path, e))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let ck: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::format(path, e))?;
    if ck.format != CHECKPOINT_FORMAT {
        return Err(Error::format(
            path,
            format!("not a checkpoint (format {:?})", ck.format),
        ));
    }
    if ck.version != CHECKPOINT_VERSION {
        return Err(Error::format(
            path,
            format!(
                "checkpoint version {} is not supported (expected {CHECKPOINT_VERSION})",
                ck.version
            ),
        ));
    }
    ck.model.check()?;
    Ok(ck)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{init_params, Backbone, ModelSpec};

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        let mut model = init_params(&ModelSpec::new(Backbone::Lstm, 3, true), 11).unwrap();
        model.params.get_mut("dense.bias").unwrap().data[0] = 0.1 + 0.2;
        let ck = Checkpoint::new(model, 11, 42);
        save_checkpoint(&path, &ck).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back, ck);
        for (name, t) in &ck.model.params {
            let bits: Vec<u64> = t.data.iter().map(|v| v.to_bits()).collect();
            let got: Vec<u64> = back.model.params[name].data.iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits, got, "{name}");
        }
    }

    #[test]
    fn rejects_wrong_version() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        let mut ck = Checkpoint::new(init_params(&ModelSpec::new(Backbone::Dmu, 2, false), 1).unwrap(), 1, 0);
        ck.version = 99;
        save_checkpoint(&path, &ck).unwrap();
        assert!(load_checkpoint(&path).unwrap_err().is_validation());
    }
}
