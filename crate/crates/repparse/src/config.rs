//! JSON run configuration.
//!
//! Top-level keys are `ModelConfig` field names. Optional sections sit
//! alongside them: `"train"` (TrainConfig), `"decode"` (DecodeConfig),
//! `"gen"` (GenConfig) and `"sweep"` (SweepConfig). Missing fields take the
//! desk defaults.

use std::fs;
use std::path::Path;

use serde::Serialize;
use serde_json::{Map, Value};

use repparse_core::synth::GenConfig;
use repparse_core::train::TrainConfig;
use repparse_core::{DecodeConfig, ModelConfig};

use crate::error::{Error, Result};
use crate::sweep::SweepConfig;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub decode: DecodeConfig,
    pub gen: GenConfig,
    pub sweep: SweepConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::desk(),
            train: TrainConfig::desk(),
            decode: DecodeConfig::default(),
            gen: GenConfig::default(),
            sweep: SweepConfig::default(),
        }
    }
}

/// `base` with the fields given under `key` replaced.
fn section<T: Serialize + for<'de> serde::Deserialize<'de>>(obj: &mut Map<String, Value>, key: &str, path: &Path, base: T) -> Result<T> {
    let Some(v) = obj.remove(key) else { return Ok(base) };
    let Value::Object(given) = v else {
        return Err(Error::parse(path, format!("{key}: expected an object")));
    };
    let mut merged = serde_json::to_value(&base).expect("plain data serializes");
    let fields = merged.as_object_mut().expect("struct serializes to an object");
    for (k, v) in given {
        fields.insert(k, v);
    }
    serde_json::from_value(merged).map_err(|e| Error::parse(path, format!("{key}: {e}")))
}

impl RunConfig {
    pub fn from_json(text: &str, path: &Path) -> Result<Self> {
        let value: Value = serde_json::from_str(text).map_err(|e| Error::parse(path, e))?;
        let Value::Object(mut obj) = value else {
            return Err(Error::parse(path, "config must be a JSON object"));
        };
        let d = RunConfig::default();
        let train = section(&mut obj, "train", path, d.train)?;
        let decode = section(&mut obj, "decode", path, d.decode)?;
        let gen = section(&mut obj, "gen", path, d.gen)?;
        let sweep = section(&mut obj, "sweep", path, d.sweep)?;
        // Model fields not given in the file keep their desk values.
        let mut model_value = serde_json::to_value(&d.model).expect("plain data serializes");
        let base = model_value.as_object_mut().expect("struct serializes to an object");
        for (k, v) in obj {
            if !base.contains_key(&k) {
                return Err(Error::parse(path, format!("unknown config key `{k}`")));
            }
            base.insert(k, v);
        }
        let model = serde_json::from_value(model_value).map_err(|e| Error::parse(path, e))?;
        let cfg = RunConfig { model, train, decode, gen, sweep };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(RunConfig::default()),
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                Self::from_json(&text, p)
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.decode.validate()?;
        self.gen.validate()?;
        if (self.gen.height, self.gen.width) != (self.model.image_height, self.model.image_width) {
            return Err(Error::Usage(format!(
                "generator size {}x{} differs from model input {}x{}",
                self.gen.height, self.gen.width, self.model.image_height, self.model.image_width
            )));
        }
        if self.gen.parts() != self.model.parts {
            return Err(Error::Usage(format!("generator has {} parts, model {}", self.gen.parts(), self.model.parts)));
        }
        Ok(())
    }
}
