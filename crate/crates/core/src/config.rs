//! Run configuration: plain-text `key = value` lines with dotted section
//! prefixes (`train.lr = 1e-4`). Later assignments win, so command-line
//! overrides are applied after the file.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::infer::{FinetuneConfig, InferConfig, Selection};
use crate::model::ModelConfig;
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferSettings {
    pub n_candidates: usize,
    /// Return-ball radius as a fraction of the dataset's best return.
    pub delta_fraction: f64,
    /// `double_check` or `boltzmann`.
    pub selection: String,
    pub beta: f64,
    pub rescore: bool,
}

impl Default for InferSettings {
    fn default() -> Self {
        Self {
            n_candidates: 300,
            delta_fraction: 0.05,
            selection: "double_check".into(),
            beta: 100.0,
            rescore: false,
        }
    }
}

impl InferSettings {
    pub fn resolve(&self, r_max: f64, gamma: f64) -> Result<InferConfig> {
        let selection = match self.selection.as_str() {
            "double_check" => Selection::DoubleCheck,
            "boltzmann" => Selection::Boltzmann { beta: self.beta },
            other => return Err(Error::usage(format!("unknown selection rule {other:?}"))),
        };
        let cfg = InferConfig {
            n_candidates: self.n_candidates,
            delta: self.delta_fraction * r_max.abs(),
            gamma,
            selection,
            rescore: self.rescore,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    pub episodes: usize,
    pub seed: u64,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self { episodes: 10, seed: 0 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub infer: InferSettings,
    pub eval: EvalSettings,
    pub finetune: FinetuneConfig,
}

impl RunConfig {
    pub fn from_file<P: AsRef<Path>>(path: P) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                path: path.to_path_buf(),
                record: i,
                message: format!("expected key = value, got {line:?}"),
            })?;
            cfg.set(key.trim(), value.trim()).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                record: i,
                message: e.to_string(),
            })?;
        }
        Ok(cfg)
    }

    /// Sets one dotted key. The value is read as JSON when it parses
    /// (numbers, booleans, lists) and as a bare string otherwise.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let mut tree = serde_json::to_value(&*self).map_err(|e| Error::usage(e.to_string()))?;
        let mut node = &mut tree;
        for part in key.split('.') {
            node = node
                .as_object_mut()
                .and_then(|m| m.get_mut(part))
                .ok_or_else(|| Error::usage(format!("unknown config key {key:?}")))?;
        }
        if node.is_object() {
            return Err(Error::usage(format!("config key {key:?} names a section")));
        }
        *node = serde_json::from_str(value).unwrap_or_else(|_| Value::String(value.to_owned()));
        *self = serde_json::from_value(tree)
            .map_err(|e| Error::usage(format!("bad value {value:?} for {key}: {e}")))?;
        Ok(())
    }

    /// Applies `key=value` overrides in order.
    pub fn apply_overrides(&mut self, pairs: &[String]) -> Result<()> {
        for p in pairs {
            let (k, v) = p
                .split_once('=')
                .ok_or_else(|| Error::usage(format!("override {p:?} is not key=value")))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    /// Flattened `key = value` lines, the same format [`RunConfig::from_file`] reads.
    pub fn to_lines(&self) -> Vec<String> {
        fn walk(prefix: &str, v: &Value, out: &mut Vec<String>) {
            match v {
                Value::Object(m) => {
                    for (k, child) in m {
                        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                        walk(&key, child, out);
                    }
                }
                Value::String(s) => out.push(format!("{prefix} = {s}")),
                other => out.push(format!("{prefix} = {other}")),
            }
        }
        let mut out = Vec::new();
        walk("", &serde_json::to_value(self).expect("config serializes"), &mut out);
        out
    }
}
