//! Run configuration: one TOML file, every key optional, unknown keys rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::grouper::GrouperConfig;
use crate::model::ModelConfig;
use crate::priors::PriorsConfig;
use crate::profiler::ProfilerConfig;
use crate::synthworld::WorldConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Number of activity levels in the stratified report.
    pub levels: usize,
    /// Bottom fraction of users (by purchases) treated as low-activity.
    pub low_activity_quantile: f64,
    pub predict_batch: usize,
    pub sweep_k: Vec<usize>,
    pub sweep_lambda: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            levels: 5,
            low_activity_quantile: 0.55,
            predict_batch: 4096,
            sweep_k: vec![4, 8, 16, 32],
            sweep_lambda: vec![0.0, 0.001, 0.005, 0.02, 0.1],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    /// Every stage reads and writes below this directory.
    pub out_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub world: WorldConfig,
    pub profiler: ProfilerConfig,
    pub grouper: GrouperConfig,
    pub priors: PriorsConfig,
    pub model: ModelConfig,
    pub eval: EvalConfig,
    pub paths: PathsConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<RunConfig> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads `path` (or starts from defaults) and applies `key=value`
    /// overrides, where keys are dotted paths such as `model.lambda`.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p)?,
            None => String::new(),
        };
        let mut root: toml::Table = toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
        for ov in overrides {
            apply_override(&mut root, ov)?;
        }
        let cfg: RunConfig = toml::Value::Table(root)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.profiler.windows.validate()?;
        self.model.validate()?;
        if self.eval.levels < 2 {
            return Err(Error::Config("eval.levels must be at least 2".into()));
        }
        if !(self.eval.low_activity_quantile > 0.0 && self.eval.low_activity_quantile < 1.0) {
            return Err(Error::Config("eval.low_activity_quantile must be in (0, 1)".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical TOML rendering.
    pub fn hash(&self) -> String {
        hex(&Sha256::digest(self.to_toml().as_bytes()))
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn apply_override(root: &mut toml::Table, ov: &str) -> Result<()> {
    let (key, raw) = ov
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{ov}` is not key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("override key `{key}` is malformed")));
    }
    // Anything that parses as a TOML value keeps its type; the rest is a string.
    let value = toml::from_str::<toml::Table>(&format!("v = {}", raw.trim()))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.trim().to_string()));
    let (last, parents) = path.split_last().expect("nonempty path");
    let mut table = root;
    for p in parents {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override key `{key}`: `{p}` is not a table")))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}
