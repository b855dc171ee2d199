//! JSON persistence.
//!
//! Models are written as pretty-printed JSON tagged `"format": "gbdtwm/1"`.
//! Floats use the shortest text that parses back to the same bits, so a
//! save/load/save cycle reproduces the file byte for byte.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gbdt::{Ensemble, TrainConfig, Tree};

pub const MODEL_FORMAT: &str = "gbdtwm/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub format: String,
    pub n_features: usize,
    pub class_count: usize,
    pub config: TrainConfig,
    pub base_score: Vec<f64>,
    pub trees: Vec<Tree>,
}

impl From<&Ensemble> for ModelFile {
    fn from(e: &Ensemble) -> Self {
        Self {
            format: MODEL_FORMAT.to_string(),
            n_features: e.n_features(),
            class_count: e.class_count(),
            config: e.config().clone(),
            base_score: e.base_score().to_vec(),
            trees: e.trees().to_vec(),
        }
    }
}

impl TryFrom<ModelFile> for Ensemble {
    type Error = Error;

    fn try_from(f: ModelFile) -> Result<Self> {
        check_format(&f.format, MODEL_FORMAT)?;
        Ensemble::from_parts(f.base_score, f.trees, f.config, f.class_count, f.n_features)
    }
}

fn check_format(found: &str, expected: &str) -> Result<()> {
    if found != expected {
        return Err(Error::Version {
            found: found.to_string(),
            expected: expected.to_string(),
        });
    }
    Ok(())
}

pub fn model_to_string(model: &Ensemble) -> Result<String> {
    let mut s = serde_json::to_string_pretty(&ModelFile::from(model))?;
    s.push('\n');
    Ok(s)
}

pub fn model_from_str(text: &str) -> Result<Ensemble> {
    // Check the tag before the full schema so old or foreign files fail clearly.
    let value: serde_json::Value = serde_json::from_str(text)?;
    match value.get("format").and_then(|v| v.as_str()) {
        Some(tag) => check_format(tag, MODEL_FORMAT)?,
        None => return Err(Error::Malformed("missing \"format\" field".into())),
    }
    let file: ModelFile = serde_json::from_value(value)?;
    Ensemble::try_from(file)
}

pub fn save_model(model: &Ensemble, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, model_to_string(model)?).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Ensemble> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    model_from_str(&text)
}

/// Pretty JSON for any serializable value (keys, stats, reports).
pub fn save_json<T: Serialize + ?Sized>(value: &T, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn load_json<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Loads a watermark key and checks its format tag.
pub fn load_key(path: impl AsRef<Path>) -> Result<crate::watermark::WatermarkSet> {
    let key: crate::watermark::WatermarkSet = load_json(path)?;
    check_format(&key.format, crate::watermark::KEY_FORMAT)?;
    Ok(key)
}
