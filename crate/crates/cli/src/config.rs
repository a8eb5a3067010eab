use std::cell::RefCell;
use std::collections::BTreeMap;
use std::path::Path;

use serde::Deserialize;
use serde_json::{Map, Value};

/// Contents of a `--config` file.
#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: String,
    #[serde(default)]
    pub seed: u64,
    /// Output directory; `--out` takes precedence.
    #[serde(default)]
    pub output_dir: Option<String>,
    /// Experiment-specific parameters; unset keys take documented defaults.
    #[serde(default)]
    pub params: Map<String, Value>,
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read { path: String, source: std::io::Error },
    #[error("malformed config: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("unknown experiment `{name}`; valid names: {valid}")]
    UnknownExperiment { name: String, valid: String },
    #[error("experiment `{experiment}` has no parameter `{key}`; accepted: {accepted}")]
    UnknownParameter { experiment: String, key: String, accepted: String },
    #[error("parameter `{key}`: {reason}")]
    BadParameter { key: String, reason: String },
    #[error("no output directory: pass --out or set output_dir")]
    NoOutput,
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read { path: path.display().to_string(), source })?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Typed access to experiment parameters; records every value read, defaults included.
pub struct Params {
    given: Map<String, Value>,
    used: RefCell<BTreeMap<String, Value>>,
}

impl Params {
    pub fn new(given: Map<String, Value>) -> Self {
        Self { given, used: RefCell::new(BTreeMap::new()) }
    }

    pub fn check_keys(&self, experiment: &str, accepted: &[&str]) -> Result<(), ConfigError> {
        for key in self.given.keys() {
            if !accepted.contains(&key.as_str()) {
                return Err(ConfigError::UnknownParameter {
                    experiment: experiment.into(),
                    key: key.clone(),
                    accepted: accepted.join(", "),
                });
            }
        }
        Ok(())
    }

    fn get<T: serde::de::DeserializeOwned + serde::Serialize>(&self, key: &str, default: T) -> Result<T, ConfigError> {
        let v = match self.given.get(key) {
            Some(v) => {
                serde_json::from_value(v.clone()).map_err(|e| ConfigError::BadParameter { key: key.into(), reason: e.to_string() })?
            }
            None => default,
        };
        self.used.borrow_mut().insert(key.into(), serde_json::to_value(&v).unwrap_or(Value::Null));
        Ok(v)
    }

    pub fn f64(&self, key: &str, default: f64) -> Result<f64, ConfigError> {
        let v = self.get(key, default)?;
        if !v.is_finite() {
            return Err(ConfigError::BadParameter { key: key.into(), reason: "must be finite".into() });
        }
        Ok(v)
    }

    pub fn positive(&self, key: &str, default: f64) -> Result<f64, ConfigError> {
        let v = self.f64(key, default)?;
        if v <= 0.0 {
            return Err(ConfigError::BadParameter { key: key.into(), reason: "must be positive".into() });
        }
        Ok(v)
    }

    /// A count that must be at least `min`.
    pub fn count(&self, key: &str, default: usize, min: usize) -> Result<usize, ConfigError> {
        let v: usize = self.get(key, default)?;
        if v < min {
            return Err(ConfigError::BadParameter { key: key.into(), reason: format!("must be at least {min}") });
        }
        Ok(v)
    }

    pub fn list(&self, key: &str, default: &[f64]) -> Result<Vec<f64>, ConfigError> {
        let v: Vec<f64> = self.get(key, default.to_vec())?;
        if v.is_empty() || v.iter().any(|x| !x.is_finite()) {
            return Err(ConfigError::BadParameter { key: key.into(), reason: "must be a non-empty list of finite numbers".into() });
        }
        Ok(v)
    }

    pub fn effective(&self) -> BTreeMap<String, Value> {
        self.used.borrow().clone()
    }
}
